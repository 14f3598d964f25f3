//! One line per acceptance criterion. Runs without the test harness so the
//! lines always reach stdout; exits non-zero when any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use anyhow::{ensure, Result};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use ssae_cli::commands::read_image;
use ssae_core::datasets::{make_synthetic_dataset, stack_images, ClassTable};
use ssae_core::evaluation::{compute_fid, compute_lpips, frechet_distance, measure, Embedder};
use ssae_core::losses::{bce_with_logits, binary_cross_entropy};
use ssae_core::pipeline::Pipeline;
use ssae_core::refinement::{fuse, make_edit_batch, roi_masks, train_rb, RbConfig, RbTrainOptions, Refiner};
use ssae_core::sae::{train_sae, Sae, SaeConfig, SaeTrainOptions};
use ssae_core::smpn::{build_smpn, evaluate_iou, train_smpn, SmpnConfig, SmpnTrainOptions};
use ssae_core::style_edit::{inject_noise, EditSpec, MaskSource, NoiseSpec};
use ssae_core::RoiLabel;
use ssae_tensor::{Graph, ParamId, ParamStore, Tensor};

use common::{s, ssae_ok, write_zero_mask, Fixture};

// Same allocator as the `ssae` binary, so timings match what the CLI sees.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

type Check = fn(&Fixture) -> Result<String>;

fn main() {
    let t = Instant::now();
    let fixture = common::build_bundle("toy", true);
    println!("toy bundle built in {:.1} s", t.elapsed().as_secs_f64());
    let checks: [(&str, Check); 12] = [
        ("zero mask or zero strength edit equals reconstruction through the CLI", cli_identity),
        ("noise injection matches the seeded elementwise oracle", injection_oracle),
        ("unrefined edits stay inside the dilated mask footprint", locality),
        ("fusion matches the elementwise formula", fusion_oracle),
        ("structure and texture code shapes", shape_law),
        ("mask predictor BCE at 0.5 and overfitting a 20-image set", mask_predictor),
        ("autoencoder total loss decomposes on every step", loss_decomposition),
        ("refinement training lowers the masked term and keeps the outside", refinement_behavior),
        ("analytic gradients match finite differences", gradient_checks),
        ("FID and LPIPS contracts", metric_contracts),
        ("edit time within twice reconstruction time", timing),
        ("identical inputs give identical bytes across processes", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| check(&fixture)));
        let secs = t.elapsed().as_secs_f64();
        let (ok, detail) = match outcome {
            Ok(Ok(d)) => (true, d),
            Ok(Err(e)) => (false, format!("{e:#}")),
            Err(p) => (false, p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default()),
        };
        failed += !ok as usize;
        println!("{} [{:>2}] {name}: {detail} ({secs:.1} s)", if ok { "PASS" } else { "FAIL" }, i + 1);
    }
    println!("{} of {} criteria passed", checks.len() - failed, checks.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn cli_identity(f: &Fixture) -> Result<String> {
    let t = Instant::now();
    let (b, c, img) = (s(&f.bundle), s(&f.config), f.image());
    let img = s(&img);
    let zero = f.path("acc_zero.png");
    write_zero_mask(&zero, f.image_size);
    let rec = f.path("acc_rec.png");
    ssae_ok(&["--config", c, "reconstruct", "--bundle", b, "--image", img, "--out", s(&rec)]);
    let rec = std::fs::read(rec)?;
    for (i, roi) in common::ROIS.iter().enumerate() {
        let out = f.path(&format!("acc_zero_{roi}.png"));
        ssae_ok(&["--config", c, "edit", "--bundle", b, "--image", img, "--roi", roi, "--seed", &i.to_string(), "--mask", s(&zero), "--out", s(&out)]);
        ensure!(std::fs::read(&out)? == rec, "{roi}: empty-mask edit differs from reconstruction");
        let out = f.path(&format!("acc_sigma0_{roi}.png"));
        ssae_ok(&["--config", c, "edit", "--bundle", b, "--image", img, "--roi", roi, "--seed", "3", "--strength", "0", "--out", s(&out)]);
        ensure!(std::fs::read(&out)? == rec, "{roi}: zero-strength edit differs from reconstruction");
    }
    let secs = t.elapsed().as_secs_f64();
    ensure!(secs < 60.0, "took {secs:.1} s");
    Ok(format!("10 edits byte-equal to reconstruction in {secs:.1} s"))
}

fn injection_oracle(_: &Fixture) -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for case in 0..100 {
        let style = Tensor::<f64>::from_fn(&[1, 3, 4, 4], |_| rng.sample(StandardNormal));
        let mask = Tensor::<f64>::from_fn(&[4, 4], |_| if rng.random::<bool>() { 0.0 } else { rng.random_range(0.0..=1.0) });
        let seed: u64 = rng.random();
        let sigma = rng.random_range(0.0..3.0);
        let got = inject_noise(&style, &mask, &NoiseSpec::new(seed, sigma))?;
        // Each site (i, j) owns stream i * w + j of the seeded generator and
        // draws its channels in order.
        for site in 0..16 {
            let mut draws = ChaCha8Rng::seed_from_u64(seed);
            draws.set_stream(site as u64);
            for c in 0..3 {
                let n: f64 = draws.sample(StandardNormal);
                let i = c * 16 + site;
                let want = style.data()[i] + sigma * n * mask.data()[site];
                ensure!(got.data()[i] == want, "case {case} element {i}: {} vs {want}", got.data()[i]);
            }
        }
    }
    Ok("100 cases exact".into())
}

/// Pixels whose layer-grid cell overlaps the mask, dilated by `r` (Chebyshev).
fn dilated_footprint(mask: &Tensor<f32>, s: usize, res: usize, r: usize) -> Vec<bool> {
    let f = s / res;
    let cell_on = |ci: usize, cj: usize| (0..f).any(|y| (0..f).any(|x| mask.data()[(ci * f + y) * s + cj * f + x] != 0.0));
    let mut on = vec![false; s * s];
    for y in 0..s {
        for x in 0..s {
            on[y * s + x] = cell_on(y / f, x / f);
        }
    }
    let mut out = vec![false; s * s];
    for y in 0..s {
        for x in 0..s {
            let (y0, y1) = (y.saturating_sub(r), (y + r).min(s - 1));
            let (x0, x1) = (x.saturating_sub(r), (x + r).min(s - 1));
            out[y * s + x] = (y0..=y1).any(|yy| (x0..=x1).any(|xx| on[yy * s + xx]));
        }
    }
    out
}

fn locality(f: &Fixture) -> Result<String> {
    let p = Pipeline::load(&f.bundle)?;
    let sz = p.image_size();
    let specs = &p.sae.decoder.specs;
    let image = read_image(&f.image(), sz)?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut changed_total = 0;
    for case in 0..20u64 {
        let mask = if case % 2 == 0 {
            let (h, w) = (rng.random_range(2..sz / 2), rng.random_range(2..sz / 2));
            let (y0, x0) = (rng.random_range(0..sz - h), rng.random_range(0..sz - w));
            Tensor::<f32>::from_fn(&[sz, sz], |k| ((y0..y0 + h).contains(&(k / sz)) && (x0..x0 + w).contains(&(k % sz))) as u8 as f32)
        } else {
            Tensor::<f32>::from_fn(&[sz, sz], |_| (rng.random::<f64>() < 0.02) as u8 as f32)
        };
        let layer = rng.random_range(1..specs.len());
        let spec = EditSpec {
            injection_layer: Some(layer),
            mask_source: MaskSource::UserSupplied,
            ..EditSpec::new(RoiLabel::Hair, rng.random(), 2.0)
        };
        let e = p.edit(&image, &spec, Some(&mask))?;
        let radius: usize = specs[layer..].iter().map(|l| (l.kernel - 1) / 2 * (sz / l.resolution)).sum();
        let allowed = dilated_footprint(&mask, sz, specs[layer].resolution, radius);
        let (a, b) = (&e.outputs.y_sae, &e.outputs.y_noised);
        for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
            if x.to_bits() != y.to_bits() {
                changed_total += 1;
                ensure!(allowed[i % (sz * sz)], "case {case}, layer {layer}: pixel {} changed outside the envelope", i % (sz * sz));
            }
        }
    }
    ensure!(changed_total > 0, "no edit changed any pixel");
    Ok(format!("20 cases, 0 violations, {changed_total} changed values"))
}

fn fusion_oracle(_: &Fixture) -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let shape = [2, 3, 5, 5];
    let rand_image = |rng: &mut ChaCha8Rng| Tensor::<f64>::from_fn(&shape, |_| rng.random_range(-1.0..1.0));
    for case in 0..102 {
        let (pre, noised) = (rand_image(&mut rng), rand_image(&mut rng));
        let per_image = case % 2 == 1;
        let mshape: &[usize] = if per_image { &[2, 1, 5, 5] } else { &[5, 5] };
        let mask = match case {
            100 => Tensor::zeros(mshape),
            101 => Tensor::ones(mshape),
            _ => Tensor::from_fn(mshape, |_| rng.random::<bool>() as u8 as f64),
        };
        let got = fuse(&pre, &noised, &mask)?;
        for i in 0..pre.len() {
            let m = if per_image { mask.data()[(i / 75) * 25 + i % 25] } else { mask.data()[i % 25] };
            let want = pre.data()[i] * m + noised.data()[i] * (1.0 - m);
            ensure!(got.data()[i] == want, "case {case} element {i}");
            if case == 100 {
                ensure!(got.data()[i] == noised.data()[i], "M=0 must return the noised image");
            }
            if case == 101 {
                ensure!(got.data()[i] == pre.data()[i], "M=1 must return the pre-fusion image");
            }
        }
    }
    Ok("100 random binary masks plus M=0 and M=1 exact".into())
}

fn shape_law(_: &Fixture) -> Result<String> {
    let full = Sae::<f32>::new(&SaeConfig::full_scale(), 0)?;
    let code = full.encode(&Tensor::zeros(&[1, 3, 256, 256]))?;
    ensure!(code.structure.shape() == [1, 8, 16, 16], "full structure {:?}", code.structure.shape());
    ensure!(code.texture.shape() == [1, 2048, 1, 1], "full texture {:?}", code.texture.shape());
    let cfg = SaeConfig::toy();
    let toy = Sae::<f32>::new(&cfg, 0)?;
    let x = Tensor::zeros(&[1, 3, 64, 64]);
    let code = toy.encode(&x)?;
    ensure!(code.structure.shape() == [1, 8, 4, 4], "toy structure {:?}", code.structure.shape());
    ensure!(code.texture.shape() == [1, cfg.texture_dim, 1, 1], "toy texture {:?}", code.texture.shape());
    ensure!(toy.decode(&code, None)?.shape() == x.shape(), "toy decode changes the image shape");
    Ok(format!("full S_s (16,16,8) S_t (1,1,2048); toy S_s (4,4,8) S_t (1,1,{})", cfg.texture_dim))
}

fn mask_predictor(_: &Fixture) -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let y = Tensor::<f64>::from_fn(&[4, 1, 8, 8], |_| rng.random::<bool>() as u8 as f64);
    let bce = binary_cross_entropy(&Tensor::full(&[4, 1, 8, 8], 0.5), &y);
    ensure!((bce - std::f64::consts::LN_2).abs() < 1e-6, "BCE at 0.5 is {bce}");
    let g = Graph::new();
    let logit_bce = bce_with_logits(g.constant(Tensor::zeros(&[4, 1, 8, 8])), g.constant(y)).item();
    ensure!((logit_bce - std::f64::consts::LN_2).abs() < 1e-6, "BCE from zero logits is {logit_bce}");

    let t = Instant::now();
    let data = make_synthetic_dataset(20, 32, 21);
    let table = ClassTable::default();
    let mut ious = Vec::new();
    for roi in RoiLabel::ALL {
        let mut m = build_smpn::<f32>(&SmpnConfig::new(32, 8), roi, 0)?;
        let opts = SmpnTrainOptions { epochs: 200, lr: 2e-3, batch_size: 4, ..Default::default() };
        train_smpn(&mut m, &data, &table, &opts)?;
        ious.push((roi, evaluate_iou(&m, &data, &table)?));
    }
    let secs = t.elapsed().as_secs_f64();
    let summary = ious.iter().map(|(r, v)| format!("{r} {v:.3}")).collect::<Vec<_>>().join(", ");
    ensure!(ious.iter().all(|(_, v)| *v > 0.9), "IoU after 200 epochs: {summary}");
    ensure!(secs < 900.0, "training took {secs:.0} s");
    Ok(format!("BCE = ln 2; IoU {summary} in {secs:.0} s"))
}

fn loss_decomposition(_: &Fixture) -> Result<String> {
    let data = make_synthetic_dataset(8, 32, 7);
    let mut sae = Sae::<f32>::new(&SaeConfig::micro(), 0)?;
    let opts = SaeTrainOptions { steps: 100, lr: 2e-3, ..Default::default() };
    let h = train_sae(&mut sae, &data, &opts)?;
    ensure!(h.records.len() == 100, "{} steps recorded", h.records.len());
    let mut worst: f64 = 0.0;
    for r in &h.records {
        let l = &r.report;
        let err = (l.total - (l.rec + 0.5 * (l.gan_rec + l.gan_swap + l.cooccur))).abs();
        ensure!(err <= 1e-6, "step {}: total {} off by {err}", r.step, l.total);
        worst = worst.max(err);
    }
    Ok(format!("100 steps, worst gap {worst:.1e}"))
}

fn refinement_behavior(_: &Fixture) -> Result<String> {
    let sae = Sae::<f32>::new(&SaeConfig::micro(), 0)?;
    let data = make_synthetic_dataset(24, 32, 5);
    let (train, held) = data.split_at(16);
    let table = ClassTable::celebamask();
    let roi = RoiLabel::Hair;
    let mut rb = Refiner::<f32>::new(&RbConfig::default(), roi, 0)?;
    let h = train_rb(&mut rb, &sae, train, &roi_masks(train, roi, &table)?, &RbTrainOptions::default())?;
    ensure!(h.records.len() == 300, "{} steps recorded", h.records.len());
    let mean = |rs: &[ssae_core::refinement::RbStepRecord]| rs.iter().map(|r| r.rec).sum::<f64>() / rs.len() as f64;
    let (first, last) = (mean(&h.records[..10]), mean(&h.records[290..]));
    let drop = 1.0 - last / first;
    let held_masks = roi_masks(held, roi, &table)?;
    let (mut acc, mut n) = (0.0, 0usize);
    for i in 0..held.len() {
        let batch = make_edit_batch(&sae, held, &held_masks, roi, &[(i, 5000 + i as u64)], 1.0, None)?;
        let (_, _, y_ref) = rb.forward(&batch.y_noised, &batch.mask)?;
        let plane = batch.mask.len();
        for (k, (a, b)) in y_ref.data().iter().zip(batch.y_noised.data()).enumerate() {
            if batch.mask.data()[k % plane] == 0.0 {
                acc += (a - b).abs() as f64;
                n += 1;
            }
        }
    }
    let outside = acc / n as f64;
    ensure!(drop >= 0.5, "masked term fell {:.0}% ({first:.4} -> {last:.4})", drop * 100.0);
    ensure!(outside < 0.02, "held-out outside delta {outside:.4}");
    Ok(format!("masked term {first:.4} -> {last:.4} ({:.0}% drop), held-out outside delta {outside:.4}", drop * 100.0))
}

/// Central differences at `samples` sampled coordinates; returns the worst
/// relative error and how many draws were discarded.
///
/// Leaky ReLU is piecewise linear, so a perturbation that moves some
/// pre-activation across zero measures a blend of two slopes. Such draws show
/// up as one-sided differences that disagree and are redrawn.
fn finite_difference_check(
    store: &mut ParamStore<f64>,
    ids: &[ParamId],
    samples: usize,
    loss: impl Fn(&ParamStore<f64>) -> f64,
    grads: &[Tensor<f64>],
) -> Result<(f64, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let (mut checked, mut kinked) = (0, 0);
    while checked < samples {
        ensure!(kinked <= samples, "{kinked} draws straddled a kink");
        let id = ids[(checked + kinked) % ids.len()];
        let j = rng.random_range(0..store.get(id).len());
        let orig = store.get(id).data()[j];
        let mid = loss(store);
        store.get_mut(id).data_mut()[j] = orig + h;
        let up = loss(store);
        store.get_mut(id).data_mut()[j] = orig - h;
        let down = loss(store);
        store.get_mut(id).data_mut()[j] = orig;
        let (fwd, bwd) = ((up - mid) / h, (mid - down) / h);
        if (fwd - bwd).abs() > 1e-4 * fwd.abs().max(bwd.abs()).max(1e-2) {
            kinked += 1;
            continue;
        }
        let fd = (up - down) / (2.0 * h);
        let an = grads[id.0].data()[j];
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
        ensure!(rel < 1e-3, "{}[{j}]: finite difference {fd} vs analytic {an}", store.name(id));
        worst = worst.max(rel);
        checked += 1;
    }
    Ok((worst, kinked))
}

fn gradient_checks(_: &Fixture) -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);

    let mut m = build_smpn::<f64>(&SmpnConfig::new(16, 2), RoiLabel::Nose, 1)?;
    let ids: Vec<ParamId> = m.store.iter().map(|(id, _)| id).collect();
    for &id in &ids {
        if m.store.name(id).ends_with(".bias") {
            let n = m.store.get(id).len();
            m.store.set(id, Tensor::from_fn(&[n], |_| rng.random_range(-0.1..0.1)));
        }
    }
    let x = Tensor::<f64>::from_fn(&[2, 3, 16, 16], |_| rng.random_range(-1.0..1.0));
    let y = Tensor::<f64>::from_fn(&[2, 1, 16, 16], |_| rng.random::<bool>() as u8 as f64);
    let smpn_loss = |store: &ParamStore<f64>, grad: bool| {
        let g = Graph::new();
        let p = store.bind(&g, grad);
        let l = bce_with_logits(m.logits(&p, g.constant(x.clone())), g.constant(y.clone()));
        (l.item(), grad.then(|| store.collect_grads(&p, &g.backward(l))))
    };
    let grads = smpn_loss(&m.store, true).1.unwrap();
    let mut store = m.store.clone();
    let (smpn_worst, smpn_kinks) = finite_difference_check(&mut store, &ids, 30, |s| smpn_loss(s, false).0, &grads)?;

    let sae = Sae::<f64>::new(&SaeConfig::micro(), 2)?;
    let code = sae.encode(&make_synthetic_dataset(1, 32, 3)[0].batch().cast::<f64>())?;
    let res = sae.layer_resolution(3)?;
    let delta = Tensor::<f64>::from_fn(&[1, sae.config.texture_dim, res, res], |_| rng.random_range(-0.5..0.5));
    let probe = Tensor::<f64>::from_fn(&[1, 3, 32, 32], |_| rng.random_range(-1.0..1.0));
    let dec_loss = |store: &ParamStore<f64>, grad: bool| {
        let g = Graph::new();
        let p = store.bind(&g, grad);
        let deltas = BTreeMap::from([(3, g.constant(delta.clone()))]);
        let out = sae.decoder.forward(&p, g.constant(code.structure.clone()), g.constant(code.texture.clone()), &deltas);
        let l = (out * g.constant(probe.clone())).sum();
        (l.item(), grad.then(|| store.collect_grads(&p, &g.backward(l))))
    };
    let grads = dec_loss(&sae.generator, true).1.unwrap();
    let dec_ids: Vec<ParamId> = sae.generator.iter().filter(|(_, p)| p.name.starts_with("decoder.")).map(|(id, _)| id).collect();
    let mut store = sae.generator.clone();
    let (dec_worst, dec_kinks) = finite_difference_check(&mut store, &dec_ids, 30, |s| dec_loss(s, false).0, &grads)?;
    Ok(format!(
        "30 mask-predictor and 30 decoder coordinates, worst relative error {smpn_worst:.1e} / {dec_worst:.1e}, \
         {smpn_kinks} / {dec_kinks} draws redrawn at activation kinks"
    ))
}

fn metric_contracts(_: &Fixture) -> Result<String> {
    let emb = Embedder::toy(0);
    let faces = make_synthetic_dataset(16, 32, 12);
    let x = stack_images(&faces.iter().collect::<Vec<_>>());
    let self_fid = compute_fid(&x, &x, &emb)?;
    ensure!(self_fid < 1e-4, "FID(X, X) = {self_fid}");

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let d = 6;
        let mu1 = DVector::<f64>::from_fn(d, |_, _| rng.random_range(-2.0..2.0));
        let mu2 = DVector::<f64>::from_fn(d, |_, _| rng.random_range(-2.0..2.0));
        let v1: Vec<f64> = (0..d).map(|_| rng.random_range(0.1..3.0)).collect();
        let v2: Vec<f64> = (0..d).map(|_| rng.random_range(0.1..3.0)).collect();
        let got = frechet_distance(&mu1, &DMatrix::from_diagonal(&DVector::from_vec(v1.clone())), &mu2, &DMatrix::from_diagonal(&DVector::from_vec(v2.clone())))?;
        let want: f64 = (0..d).map(|i| (mu1[i] - mu2[i]).powi(2) + v1[i] + v2[i] - 2.0 * (v1[i] * v2[i]).sqrt()).sum();
        worst = worst.max((got - want).abs());
    }
    ensure!(worst < 1e-5, "diagonal closed form off by {worst}");

    let mut lp_worst: f64 = 0.0;
    for i in 0..8 {
        let (a, b) = (faces[i].batch(), faces[i + 8].batch());
        let same = compute_lpips(&a, &a, &emb)?;
        ensure!(same.abs() <= 1e-6, "LPIPS(x, x) = {same}");
        let (ab, ba) = (compute_lpips(&a, &b, &emb)?, compute_lpips(&b, &a, &emb)?);
        ensure!((ab - ba).abs() <= 1e-6, "LPIPS asymmetric: {ab} vs {ba}");
        lp_worst = lp_worst.max((ab - ba).abs());
    }
    Ok(format!("FID(X,X) {self_fid:.1e}, diagonal gap {worst:.1e}, LPIPS asymmetry {lp_worst:.1e}"))
}

fn timing(f: &Fixture) -> Result<String> {
    let p = Pipeline::load(&f.bundle)?;
    let image = read_image(&f.image(), p.image_size())?;
    let spec = EditSpec::new(RoiLabel::Hair, 1, 1.0);
    let mask = p.resolve_mask(&image, &spec, None)?;
    let edit = measure(3, 20, || p.edit_final(&image, &mask, &spec).map(drop))?;
    let rec = measure(3, 20, || p.sae.reconstruct(&image).map(drop))?;
    let refined_spec = EditSpec { refine: true, ..spec.clone() };
    let refined = measure(3, 20, || p.edit_final(&image, &mask, &refined_spec).map(drop))?;
    let ratio = edit.mean_s / rec.mean_s;
    ensure!(ratio <= 2.0, "edit {:.4} s vs reconstruction {:.4} s (ratio {ratio:.2})", edit.mean_s, rec.mean_s);
    Ok(format!(
        "edit {:.4} s vs reconstruction {:.4} s over 20 trials, ratio {ratio:.2}; with refinement {:.4} s, ratio {:.2} \
         (reference figures 0.01143 s vs 120.602 s, context only)",
        edit.mean_s,
        rec.mean_s,
        refined.mean_s,
        refined.mean_s / rec.mean_s
    ))
}

fn determinism(f: &Fixture) -> Result<String> {
    let (b, c, img) = (s(&f.bundle), s(&f.config), f.image());
    let outs: Vec<_> = ["acc_det_a.png", "acc_det_b.png"].iter().map(|n| f.path(n)).collect();
    for out in &outs {
        ssae_ok(&["--config", c, "edit", "--bundle", b, "--image", s(&img), "--roi", "hair", "--seed", "77", "--refine", "--out", s(out)]);
    }
    let (a, b2) = (std::fs::read(&outs[0])?, std::fs::read(&outs[1])?);
    ensure!(a == b2, "outputs differ");
    Ok(format!("two processes wrote identical {}-byte PNGs", a.len()))
}

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ssae_core::datasets::{dataset_class_table, load_dataset, make_synthetic_dataset, ClassTable, ImageSample, Split};
use ssae_core::imageio::{decode_png_rgb, encode_png_gray, mask_to_gray, read_mask_png, rgb_to_tensor, tensor_to_rgb, write_png_rgb};
use ssae_core::pipeline::{evaluate, BundleManifest, EvalOptions, Pipeline};
use ssae_core::refinement::{roi_masks, save_rb, train_rb, RbTrainOptions, Refiner};
use ssae_core::sae::{train_sae, Sae, SaeTrainOptions};
use ssae_core::smpn::{build_smpn, evaluate_iou, save_smpn, train_smpn, SmpnConfig, SmpnTrainOptions};
use ssae_core::style_edit::{EditSpec, MaskSource};
use ssae_core::{evaluation, RoiLabel};
use ssae_tensor::Tensor;

use crate::cli::*;
use crate::config::Config;
use crate::run::{beside, RunManifest};

pub fn run(cli: Cli) -> Result<()> {
    let config = Config::load(cli.config.as_deref())?;
    match cli.command {
        Command::Synth(a) => synth(&config, a),
        Command::TrainSmpn(a) => train_smpn_cmd(&config, a),
        Command::TrainSae(a) => train_sae_cmd(&config, a),
        Command::TrainRb(a) => train_rb_cmd(&config, a),
        Command::InitBundle(a) => init_bundle(&config, a),
        Command::Edit(a) => edit(&config, a),
        Command::Reconstruct(a) => reconstruct(&config, a),
        Command::Masks(a) => masks(&config, a),
        Command::Eval(a) => eval(&config, a),
        Command::Serve(a) => crate::server::serve_blocking(&config, a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn split(name: &str) -> Result<Split> {
    Ok(name.parse()?)
}

fn load_split(root: &Path, name: &str, size: usize) -> Result<(Vec<ImageSample>, ClassTable)> {
    let data = load_dataset(root, split(name)?, size)?;
    Ok((data, dataset_class_table(root)?))
}

/// Reads a PNG as `[1, 3, S, S]`; any other format or size is rejected.
pub fn read_image(path: &Path, size: usize) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let rgb = decode_png_rgb(&bytes).with_context(|| format!("decoding {}", path.display()))?;
    if rgb.dimensions() != (size as u32, size as u32) {
        bail!("{} is {}x{} but the models expect {size}x{size}", path.display(), rgb.width(), rgb.height());
    }
    Ok(rgb_to_tensor(&rgb).reshape(&[1, 3, size, size]))
}

pub fn write_image(path: &Path, image: &Tensor<f32>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    Ok(write_png_rgb(path, &tensor_to_rgb(image)?)?)
}

fn write_mask(path: &Path, mask: &Tensor<f32>) -> Result<()> {
    let bytes = encode_png_gray(&mask_to_gray(mask)?)?;
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn synth(config: &Config, a: SynthArgs) -> Result<()> {
    let size = a.size.unwrap_or(config.data.image_size);
    let table = ClassTable::celebamask();
    let train = make_synthetic_dataset(a.train.max(1), size, a.seed);
    ssae_core::datasets::write_dataset(&a.out, Split::Train, &train, &table)?;
    if a.test > 0 {
        let test = make_synthetic_dataset(a.test, size, a.seed.wrapping_add(1));
        ssae_core::datasets::write_dataset(&a.out, Split::Test, &test, &table)?;
    }
    RunManifest::new("synth", config).seed("data", a.seed).write(&a.out.join("run.json"))?;
    println!("wrote {} train and {} test images to {}", a.train.max(1), a.test, a.out.display());
    Ok(())
}

fn train_smpn_cmd(config: &Config, a: TrainSmpnArgs) -> Result<()> {
    let c = &config.smpn;
    let (data, table) = load_split(&a.data, &config.data.train_split, config.data.image_size)?;
    let mut model = build_smpn::<f32>(&SmpnConfig::new(config.data.image_size, c.base_channels), a.roi, a.seed)?;
    let opts = SmpnTrainOptions {
        epochs: a.epochs.unwrap_or(c.epochs),
        lr: a.lr.unwrap_or(c.lr),
        batch_size: c.batch_size,
        seed: a.seed,
        checkpoint_dir: Some(a.out.join("checkpoints")),
        checkpoint_every: c.checkpoint_every,
        cosine_decay: c.cosine_decay,
    };
    let history = train_smpn(&mut model, &data, &table, &opts)?;
    let path = save_smpn(&model, &a.out, &format!("smpn_{}", a.roi))?;
    let iou = evaluate_iou(&model, &data, &table)?;
    let mut run = RunManifest::new("train-smpn", config).seed("init", a.seed);
    run.outputs = vec![path.clone()];
    run.write(&a.out.join(format!("smpn_{}.run.json", a.roi)))?;
    println!(
        "{}: final loss {:.4}, train IoU {iou:.3}, saved {}",
        a.roi,
        history.epoch_loss.last().copied().unwrap_or(f64::NAN),
        path.display()
    );
    Ok(())
}

fn train_sae_cmd(config: &Config, a: TrainSaeArgs) -> Result<()> {
    let c = &config.sae;
    let mut sae = match &a.resume {
        Some(path) => Sae::<f32>::load(path, true)?,
        None => {
            let sc = match &a.preset {
                Some(p) => crate::config::SaeSection { preset: p.clone(), ..c.clone() }.config()?,
                None => c.config()?,
            };
            Sae::new(&sc, a.seed)?
        }
    };
    let (data, _) = load_split(&a.data, &config.data.train_split, sae.config.image_size)?;
    create_dir(&a.out)?;
    let opts = SaeTrainOptions {
        steps: a.steps.unwrap_or(c.steps),
        batch_size: c.batch_size,
        lr: a.lr.unwrap_or(c.lr),
        seed: a.seed,
        r1_gamma: c.r1_gamma,
        r1_every: c.r1_every,
        checkpoint_dir: Some(a.out.join("checkpoints")),
        checkpoint_every: c.checkpoint_every,
        history_csv: Some(a.out.join("sae_history.csv")),
        ..SaeTrainOptions::default()
    };
    let history = train_sae(&mut sae, &data, &opts)?;
    let last = history.records.last().map(|r| r.report);
    let metrics = last.map(|r| BTreeMap::from([("rec".to_string(), r.rec), ("total".to_string(), r.total)])).unwrap_or_default();
    let path = sae.save(&a.out, "sae", metrics)?;
    let mut run = RunManifest::new("train-sae", config).seed("init", a.seed);
    run.outputs = vec![path.clone()];
    run.write(&a.out.join("sae.run.json"))?;
    if let Some(r) = last {
        println!("step {}: rec {:.4}, total {:.4}; saved {}", history.records.len(), r.rec, r.total, path.display());
    }
    Ok(())
}

fn train_rb_cmd(config: &Config, a: TrainRbArgs) -> Result<()> {
    let c = &config.refinement;
    let sae = Sae::<f32>::load(&a.sae, false)?;
    let (data, table) = load_split(&a.data, &config.data.train_split, sae.config.image_size)?;
    let masks = roi_masks(&data, a.roi, &table)?;
    let mut rb = Refiner::<f32>::new(&c.rb_config(), a.roi, a.seed)?;
    create_dir(&a.out)?;
    let opts = RbTrainOptions {
        steps: a.steps.unwrap_or(c.steps),
        batch_size: c.batch_size,
        lr: a.lr.unwrap_or(c.lr),
        seed: a.seed,
        strength: c.strength,
        injection_layer: config.edit.injection_layer,
        checkpoint_dir: Some(a.out.join("checkpoints")),
        checkpoint_every: c.checkpoint_every,
        history_csv: Some(a.out.join(format!("rb_{}_history.csv", a.roi))),
    };
    let history = train_rb(&mut rb, &sae, &data, &masks, &opts)?;
    let path = save_rb(&rb, &a.out, &format!("rb_{}", a.roi))?;
    let mut run = RunManifest::new("train-rb", config).seed("init", a.seed);
    run.outputs = vec![path.clone()];
    run.write(&a.out.join(format!("rb_{}.run.json", a.roi)))?;
    if let Some(r) = history.records.last() {
        println!("{}: rec {:.4}, adv {:.4}; saved {}", a.roi, r.rec, r.adv, path.display());
    }
    Ok(())
}

/// Stores `path` relative to `base` when it lies inside it, absolute otherwise.
fn bundle_path(base: &Path, path: &Path) -> Result<PathBuf> {
    let abs = std::fs::canonicalize(path).with_context(|| format!("checkpoint {} not found", path.display()))?;
    let base = std::fs::canonicalize(base)?;
    Ok(abs.strip_prefix(&base).map(Path::to_path_buf).unwrap_or(abs))
}

fn init_bundle(config: &Config, a: InitBundleArgs) -> Result<()> {
    let base = a.out.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new(".")).to_path_buf();
    create_dir(&base)?;
    let sae = Sae::<f32>::load(&a.sae, false)?;
    let mut m = BundleManifest::new(sae.config.clone(), bundle_path(&base, &a.sae)?);
    let (mut smpn, mut rb) = (a.smpn, a.rb);
    if let Some(dir) = &a.scan {
        for roi in RoiLabel::ALL {
            for (prefix, list) in [("smpn", &mut smpn), ("rb", &mut rb)] {
                let p = dir.join(format!("{prefix}_{roi}.json"));
                if p.exists() && !list.iter().any(|(r, _)| *r == roi) {
                    list.push((roi, p));
                }
            }
        }
    }
    for (roi, p) in smpn {
        m.smpn.insert(roi, bundle_path(&base, &p)?);
    }
    for (roi, p) in rb {
        m.rb.insert(roi, bundle_path(&base, &p)?);
    }
    m.write(&a.out)?;
    let pipeline = Pipeline::load(&a.out).context("bundle failed its self-check")?;
    let mut run = RunManifest::new("init-bundle", config);
    run.weights_checksum = Some(pipeline.checksum());
    run.outputs = vec![a.out.clone()];
    run.write(&beside(&a.out))?;
    println!("bundle {}: {} mask model(s), {} refinement block(s)", a.out.display(), m.smpn.len(), m.rb.len());
    Ok(())
}

fn edit(config: &Config, a: EditArgs) -> Result<()> {
    let pipeline = Pipeline::load(&a.bundle.bundle)?;
    let image = read_image(&a.image, pipeline.image_size())?;
    let mask_source = match (a.mask_source, &a.mask) {
        (Some(s), _) => s.into(),
        (None, Some(_)) => MaskSource::UserSupplied,
        (None, None) => MaskSource::Predicted,
    };
    let supplied = a.mask.as_deref().map(read_mask_png).transpose()?;
    let seed = a.seed.unwrap_or_else(|| rand::random::<u64>() >> 11);
    let spec = EditSpec {
        injection_layer: a.layer.or(config.edit.injection_layer),
        refine: a.refine,
        mask_source,
        ..EditSpec::new(a.roi, seed, a.strength.unwrap_or(config.edit.strength))
    };
    let e = pipeline.edit(&image, &spec, supplied.as_ref())?;
    write_image(&a.out, e.outputs.final_image())?;
    let mut outputs = vec![a.out.clone()];
    if let Some(dir) = &a.chain_dir {
        create_dir(dir)?;
        let o = &e.outputs;
        let named = [("y_sae", Some(&o.y_sae)), ("y_noised", Some(&o.y_noised)), ("y_pre", o.y_pre.as_ref()), ("y_fused", o.y_fused.as_ref()), ("y_ref", o.y_ref.as_ref())];
        for (name, t) in named {
            if let Some(t) = t {
                let p = dir.join(format!("{name}.png"));
                write_image(&p, t)?;
                outputs.push(p);
            }
        }
        let p = dir.join("mask.png");
        write_mask(&p, &e.mask)?;
        outputs.push(p);
    }
    let mut run = RunManifest::new("edit", config).seed("noise", seed);
    run.weights_checksum = Some(pipeline.checksum());
    run.outputs = outputs;
    run.write(&beside(&a.out))?;
    if a.refine && !e.refined {
        eprintln!("warning: no refinement block for {}; wrote the unrefined edit", a.roi);
    }
    println!("{} edit, seed {seed}, layer {} -> {}", a.roi, e.layer, a.out.display());
    Ok(())
}

fn reconstruct(config: &Config, a: ReconstructArgs) -> Result<()> {
    let pipeline = Pipeline::load(&a.bundle.bundle)?;
    let image = read_image(&a.image, pipeline.image_size())?;
    write_image(&a.out, &pipeline.sae.reconstruct(&image)?)?;
    let mut run = RunManifest::new("reconstruct", config);
    run.weights_checksum = Some(pipeline.checksum());
    run.outputs = vec![a.out.clone()];
    run.write(&beside(&a.out))
}

fn masks(config: &Config, a: MasksArgs) -> Result<()> {
    let pipeline = Pipeline::load(&a.bundle.bundle)?;
    let image = read_image(&a.image, pipeline.image_size())?;
    let set = pipeline.masks(&image)?;
    create_dir(&a.out)?;
    let mut run = RunManifest::new("masks", config);
    for (roi, soft) in &set.masks {
        let hard = ssae_core::smpn::binarize_mask(soft, config.smpn.mask_threshold)?;
        for (suffix, m) in [("soft", soft), ("hard", &hard)] {
            let p = a.out.join(format!("{roi}_{suffix}.png"));
            write_mask(&p, m)?;
            run.outputs.push(p);
        }
    }
    run.weights_checksum = Some(pipeline.checksum());
    run.write(&a.out.join("run.json"))?;
    println!("wrote {} masks to {}", set.len(), a.out.display());
    Ok(())
}

fn eval(config: &Config, a: EvalArgs) -> Result<()> {
    let pipeline = Pipeline::load(&a.bundle.bundle)?;
    let split_name = a.split.clone().unwrap_or_else(|| config.data.eval_split.clone());
    let (data, table) = load_split(&a.data, &split_name, pipeline.image_size())?;
    let opts = EvalOptions {
        mask_source: a.mask_source.into(),
        seed: a.seed,
        strength: config.eval.strength,
        refine: a.refine,
        warmup: config.eval.warmup,
        trials: a.trials.unwrap_or(config.eval.trials),
        embedder: config.eval.embedder.clone(),
        ..EvalOptions::default()
    };
    let report = evaluate(&pipeline, &data, &table, &opts)?;
    let files = evaluation::emit_report(&report, &a.out)?;
    let mut run = RunManifest::new("eval", config).seed("noise", a.seed);
    run.weights_checksum = Some(pipeline.checksum());
    run.outputs = vec![files.csv.clone(), files.markdown.clone(), files.json.clone()];
    run.write(&a.out.join("run.json"))?;
    print!("{}", report.to_markdown());
    Ok(())
}

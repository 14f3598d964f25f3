//! Adversarial training of the autoencoder.
//!
//! Generator objective: `rec + 0.5 * (gan_rec + gan_swap + cooccur)` with an
//! L1 reconstruction term and non-saturating logistic adversarial terms. The
//! swap image pairs each structure code with the texture code of the next
//! image in the batch.

use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use ssae_tensor::{Adam, Bound, CropBox, Graph, Scalar, Tensor, Var};

use super::Sae;
use crate::datasets::ImageSample;
use crate::error::{Error, Result};
use crate::losses;
use crate::rng::{derive_rng, purpose};

/// Patches per image for the co-occurrence critic, both targets and references.
const PATCHES: usize = 4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub rec: f64,
    pub gan_rec: f64,
    pub gan_swap: f64,
    pub cooccur: f64,
    pub total: f64,
}

impl LossReport {
    pub fn weighted_sum(&self) -> f64 {
        self.rec + 0.5 * self.gan_rec + 0.5 * self.gan_swap + 0.5 * self.cooccur
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub report: LossReport,
    pub d_loss: f64,
    /// R1 penalty when it was applied on this step.
    pub r1: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct SaeTrainOptions {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    pub r1_gamma: f64,
    /// Lazy R1: applied every this many steps, scaled up accordingly. Zero disables it.
    pub r1_every: u64,
    pub checkpoint_dir: Option<PathBuf>,
    pub checkpoint_every: u64,
    pub history_csv: Option<PathBuf>,
}

impl Default for SaeTrainOptions {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 4,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.99,
            seed: 0,
            r1_gamma: 10.0,
            r1_every: 16,
            checkpoint_dir: None,
            checkpoint_every: 500,
            history_csv: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SaeTrainState<T> {
    pub g_opt: Adam<T>,
    pub d_opt: Adam<T>,
    pub step: u64,
}

impl<T: Scalar> SaeTrainState<T> {
    pub fn new(sae: &Sae<T>, opts: &SaeTrainOptions) -> Self {
        Self {
            g_opt: Adam::with_betas(&sae.generator, opts.lr, opts.beta1, opts.beta2),
            d_opt: Adam::with_betas(&sae.discriminator, opts.lr, opts.beta1, opts.beta2),
            step: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct SaeHistory {
    pub records: Vec<StepRecord>,
    pub checkpoints: Vec<PathBuf>,
}

impl SaeHistory {
    /// CSV with columns `step, rec, gan_rec, gan_swap, cooccur, d_loss`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["step", "rec", "gan_rec", "gan_swap", "cooccur", "d_loss"])?;
        for r in &self.records {
            let l = &r.report;
            w.write_record([
                r.step.to_string(),
                l.rec.to_string(),
                l.gan_rec.to_string(),
                l.gan_swap.to_string(),
                l.cooccur.to_string(),
                r.d_loss.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

struct Crops {
    /// Crops of the swap output, grouped per image.
    fake: Vec<CropBox>,
    /// Crops of each texture-source image.
    real: Vec<CropBox>,
    /// Reference crops of each texture-source image.
    refs: Vec<CropBox>,
}

fn random_boxes(rng: &mut ChaCha8Rng, batch: usize, size: usize) -> Vec<CropBox> {
    let (lo, hi) = ((size / 8).max(1), (size / 4).max(1));
    (0..PATCHES)
        .map(|_| {
            let side = rng.random_range(lo..=hi);
            let y0 = rng.random_range(0..=size - side);
            let x0 = rng.random_range(0..=size - side);
            CropBox { batch, y0, x0, height: side, width: side }
        })
        .collect()
}

fn sample_crops(rng: &mut ChaCha8Rng, batch: usize, size: usize) -> Crops {
    let mut c = Crops { fake: Vec::new(), real: Vec::new(), refs: Vec::new() };
    for b in 0..batch {
        let src = (b + 1) % batch;
        c.fake.extend(random_boxes(rng, b, size));
        c.real.extend(random_boxes(rng, src, size));
        c.refs.extend(random_boxes(rng, src, size));
    }
    c
}

fn rolled(batch: usize) -> Vec<usize> {
    (0..batch).map(|b| (b + 1) % batch).collect()
}

struct GeneratorPass<'g, T> {
    rec_img: Var<'g, T>,
    swap_img: Var<'g, T>,
    rec: Var<'g, T>,
    gan_rec: Var<'g, T>,
    gan_swap: Var<'g, T>,
    cooccur: Var<'g, T>,
    total: Var<'g, T>,
}

impl<T: Scalar> GeneratorPass<'_, T> {
    fn report(&self) -> LossReport {
        let f = |v: Var<'_, T>| v.item().as_f64();
        LossReport {
            rec: f(self.rec),
            gan_rec: f(self.gan_rec),
            gan_swap: f(self.gan_swap),
            cooccur: f(self.cooccur),
            total: f(self.total),
        }
    }
}

fn generator_pass<'g, T: Scalar>(
    sae: &Sae<T>,
    pg: &Bound<'g, T>,
    pd: &Bound<'g, T>,
    x: Var<'g, T>,
    crops: &Crops,
) -> GeneratorPass<'g, T> {
    let g = x.graph();
    let batch = x.shape()[0];
    let patch = sae.config.image_size / 4;
    let none = Default::default();
    let (s, t) = sae.encoder.forward(pg, x);
    let rec_img = sae.decoder.forward(pg, s, t, &none);
    let swap_img = sae.decoder.forward(pg, s, t.select_batch(&rolled(batch)), &none);

    let rec = losses::l1(rec_img, x);
    let gan_rec = losses::generator_loss(sae.image_disc.forward(pd, rec_img));
    let gan_swap = losses::generator_loss(sae.image_disc.forward(pd, swap_img));
    let targets = g.crop_resize(swap_img, &crops.fake, patch);
    let refs = g.crop_resize(x, &crops.refs, patch);
    let cooccur = losses::generator_loss(sae.cooccur_disc.forward(pd, targets, refs, PATCHES, PATCHES));
    let total = rec + (gan_rec + gan_swap + cooccur).scale(T::lit(0.5));
    GeneratorPass { rec_img, swap_img, rec, gan_rec, gan_swap, cooccur, total }
}

/// Generator loss terms on one batch `[B, 3, H, W]`, `B >= 2`, without updating anything.
pub fn sae_loss<T: Scalar>(sae: &Sae<T>, batch: &Tensor<T>, seed: u64) -> Result<LossReport> {
    sae.check_image(batch)?;
    let b = batch.shape()[0];
    if b < 2 {
        return Err(Error::Invalid(format!("SAE loss needs a batch of at least 2 for swapping, got {b}")));
    }
    let crops = sample_crops(&mut derive_rng(seed, purpose::CROPS, 0), b, sae.config.image_size);
    let g = Graph::new();
    let pg = sae.generator.bind(&g, false);
    let pd = sae.discriminator.bind(&g, false);
    Ok(generator_pass(sae, &pg, &pd, g.constant(batch.clone()), &crops).report())
}

fn check_finite(value: f64, step: u64, what: &str, last_good: &Option<PathBuf>) -> Result<()> {
    if value.is_finite() {
        return Ok(());
    }
    let tail = match last_good {
        Some(p) => format!("; last good checkpoint {}", p.display()),
        None => "; no checkpoint written yet".to_string(),
    };
    Err(Error::NonFinite { step, detail: format!("{what} = {value}{tail}") })
}

/// Logits of the image critic summed over the batch, and its parameter gradients.
fn critic_sum_grads<T: Scalar>(sae: &Sae<T>, x: &Tensor<T>) -> Vec<Tensor<T>> {
    let g = Graph::new();
    let pd = sae.discriminator.bind(&g, true);
    let f = sae.image_disc.forward(&pd, g.constant(x.clone())).sum();
    sae.discriminator.collect_grads(&pd, &g.backward(f))
}

/// R1 penalty `gamma / 2 * mean_b |grad_x D(x_b)|^2` and its parameter gradient.
///
/// The parameter gradient is a Hessian-vector product, taken as a central
/// difference of first-order gradients along `v = grad_x D(x)`:
/// `gamma / B * (grad_theta F(x + h v) - grad_theta F(x - h v)) / 2h`, with `F = sum_b D(x_b)`.
pub fn r1_penalty<T: Scalar>(sae: &Sae<T>, x: &Tensor<T>, gamma: f64) -> (f64, Vec<Tensor<T>>) {
    let g = Graph::new();
    let pd = sae.discriminator.bind(&g, false);
    let xv = g.input(x.clone());
    let f = sae.image_disc.forward(&pd, xv).sum();
    let v = g.backward(f).get(xv).cloned().expect("input gradient");
    let batch = x.shape()[0] as f64;
    let penalty = 0.5 * gamma * v.norm_sq().as_f64() / batch;

    let vmax = v.data().iter().fold(0.0f64, |m, a| m.max(a.as_f64().abs()));
    if vmax == 0.0 {
        return (penalty, sae.discriminator.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect());
    }
    // Largest input shift near the optimal central-difference step for the precision.
    let h = T::epsilon().as_f64().cbrt() / vmax;
    let shifted = |sign: f64| x.zip_map(&v, |a, b| a + T::lit(sign * h) * b);
    let plus = critic_sum_grads(sae, &shifted(1.0));
    let minus = critic_sum_grads(sae, &shifted(-1.0));
    let k = T::lit(gamma / batch / (2.0 * h));
    let grads = plus.iter().zip(&minus).map(|(p, m)| p.zip_map(m, |a, b| (a - b) * k)).collect();
    (penalty, grads)
}

fn step_once<T: Scalar>(
    sae: &mut Sae<T>,
    state: &mut SaeTrainState<T>,
    data: &[ImageSample],
    opts: &SaeTrainOptions,
    last_good: &Option<PathBuf>,
) -> Result<StepRecord> {
    let step = state.step;
    let mut rng = derive_rng(opts.seed, purpose::STEP, step);
    let batch = opts.batch_size.min(data.len());
    let picks = index::sample(&mut rng, data.len(), batch).into_vec();
    let samples: Vec<&ImageSample> = picks.iter().map(|&i| &data[i]).collect();
    let x: Tensor<T> = crate::datasets::stack_images(&samples).cast();
    sae.check_image(&x)?;
    let crops = sample_crops(&mut rng, batch, sae.config.image_size);
    let patch = sae.config.image_size / 4;

    // Generator update.
    let (report, rec_img, swap_img) = {
        let g = Graph::new();
        let pg = sae.generator.bind(&g, true);
        let pd = sae.discriminator.bind(&g, false);
        let pass = generator_pass(sae, &pg, &pd, g.constant(x.clone()), &crops);
        let report = pass.report();
        check_finite(report.total, step, "generator loss", last_good)?;
        let grads = sae.generator.collect_grads(&pg, &g.backward(pass.total));
        state.g_opt.update(&mut sae.generator, &grads);
        (report, (*pass.rec_img.value()).clone(), (*pass.swap_img.value()).clone())
    };

    // Critic update on the same fakes.
    let g = Graph::new();
    let pd = sae.discriminator.bind(&g, true);
    let real = g.constant(x.clone());
    let d_real = sae.image_disc.forward(&pd, real);
    let d_rec = sae.image_disc.forward(&pd, g.constant(rec_img));
    let swap = g.constant(swap_img);
    let d_swap = sae.image_disc.forward(&pd, swap);
    let half = T::lit(0.5);
    let d_img = d_real.neg().softplus().mean() + (d_rec.softplus().mean() + d_swap.softplus().mean()).scale(half);
    let refs = g.crop_resize(real, &crops.refs, patch);
    let c_real = sae.cooccur_disc.forward(&pd, g.crop_resize(real, &crops.real, patch), refs, PATCHES, PATCHES);
    let c_fake = sae.cooccur_disc.forward(&pd, g.crop_resize(swap, &crops.fake, patch), refs, PATCHES, PATCHES);
    let d_loss = d_img + losses::discriminator_loss(c_real, c_fake);
    let d_value = d_loss.item().as_f64();
    check_finite(d_value, step, "critic loss", last_good)?;
    let mut grads = sae.discriminator.collect_grads(&pd, &g.backward(d_loss));
    drop(pd);

    let mut r1 = None;
    if opts.r1_every > 0 && step % opts.r1_every == 0 && opts.r1_gamma > 0.0 {
        let (penalty, rg) = r1_penalty(sae, &x, opts.r1_gamma * opts.r1_every as f64);
        check_finite(penalty, step, "R1 penalty", last_good)?;
        for (acc, r) in grads.iter_mut().zip(&rg) {
            acc.add_assign(r);
        }
        r1 = Some(penalty / opts.r1_every as f64);
    }
    state.d_opt.update(&mut sae.discriminator, &grads);
    state.step += 1;
    Ok(StepRecord { step, report, d_loss: d_value, r1 })
}

/// Runs `opts.steps` alternating generator and critic updates.
///
/// Every step draws its batch and crops from `(opts.seed, step)`, so a run
/// resumed from a checkpoint continues exactly as an uninterrupted one.
pub fn train_sae<T: Scalar>(sae: &mut Sae<T>, data: &[ImageSample], opts: &SaeTrainOptions) -> Result<SaeHistory> {
    if data.len() < 2 || opts.batch_size < 2 {
        return Err(Error::Dataset(format!(
            "SAE training needs at least 2 images and batch size >= 2 (have {} images, batch {})",
            data.len(),
            opts.batch_size
        )));
    }
    let mut state = sae.training.take().unwrap_or_else(|| SaeTrainState::new(sae, opts));
    state.g_opt.lr = opts.lr;
    state.d_opt.lr = opts.lr;
    let mut history = SaeHistory::default();
    let mut last_good: Option<PathBuf> = None;
    for _ in 0..opts.steps {
        let record = match step_once(sae, &mut state, data, opts, &last_good) {
            Ok(r) => r,
            Err(e) => {
                sae.training = Some(state);
                return Err(e);
            }
        };
        log::debug!(
            "sae step {} rec {:.4} total {:.4} d {:.4}",
            record.step,
            record.report.rec,
            record.report.total,
            record.d_loss
        );
        history.records.push(record);
        if let Some(dir) = &opts.checkpoint_dir {
            if opts.checkpoint_every > 0 && state.step % opts.checkpoint_every == 0 {
                let r = record.report;
                let metrics = [("rec", r.rec), ("gan_rec", r.gan_rec), ("gan_swap", r.gan_swap), ("cooccur", r.cooccur), ("d_loss", record.d_loss)]
                    .into_iter()
                    .map(|(k, v)| (k.to_string(), v))
                    .collect();
                sae.training = Some(state);
                let path = sae.save(dir, &format!("sae_s{:06}", sae.training.as_ref().unwrap().step), metrics)?;
                state = sae.training.take().unwrap();
                last_good = Some(path.clone());
                history.checkpoints.push(path);
            }
        }
    }
    sae.training = Some(state);
    if let Some(path) = &opts.history_csv {
        history.write_csv(path)?;
    }
    Ok(history)
}

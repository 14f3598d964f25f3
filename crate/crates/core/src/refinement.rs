//! Per-ROI refinement blocks.
//!
//! A block cleans up a coarse edit at full resolution: skip-connected convs
//! over `Y_noised` give `Y_pre`, the masked fusion
//! `Y_fused = Y_pre ⊙ M + Y_noised ⊙ (1 − M)` keeps everything outside the
//! ROI, and a second skip-connected stage gives `Y_ref`.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use ssae_tensor::{Adam, Bound, Conv2d, Graph, ParamStore, Scalar, Tensor, Var};

use crate::checkpoint::{self, Manifest};
use crate::datasets::{labelmap_to_roi_masks, ClassTable, ImageSample};
use crate::error::{Error, Result};
use crate::losses;
use crate::rng::{derive_rng, purpose};
use crate::roi::RoiLabel;
use crate::sae::Sae;
use crate::smpn::binarize_mask;
use crate::style_edit::{edit_image, CoarseEdit, EditSpec, MaskMode};

const SLOPE: f64 = 0.2;
const ADV_WEIGHT: f64 = 0.5;
const MASK_THRESHOLD: f64 = 0.5;

/// What the refined image must match outside the ROI.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecTarget {
    /// The noised decode, so the block leaves non-ROI pixels untouched.
    #[default]
    Noised,
    /// The clean reconstruction.
    Clean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RbConfig {
    pub pre_fusion_convs: usize,
    pub post_fusion_convs: usize,
    pub channels: usize,
    pub kernel: usize,
    pub disc_channels: usize,
    #[serde(default)]
    pub target: RecTarget,
}

impl Default for RbConfig {
    fn default() -> Self {
        Self { pre_fusion_convs: 3, post_fusion_convs: 2, channels: 32, kernel: 3, disc_channels: 16, target: RecTarget::Noised }
    }
}

impl RbConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pre_fusion_convs == 0 || self.post_fusion_convs == 0 {
            return Err(Error::Config("refinement stages need at least one conv each".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("refinement kernel must be odd, got {}", self.kernel)));
        }
        if self.channels == 0 || self.disc_channels == 0 {
            return Err(Error::Config("refinement channel counts must be positive".into()));
        }
        Ok(())
    }
}

/// The image chain of one edit, every entry `[B, 3, H, W]`.
#[derive(Clone, Debug)]
pub struct EditOutputs<T> {
    pub y_sae: Tensor<T>,
    pub y_noised: Tensor<T>,
    pub y_pre: Option<Tensor<T>>,
    pub y_fused: Option<Tensor<T>>,
    pub y_ref: Option<Tensor<T>>,
}

impl<T: Scalar> EditOutputs<T> {
    /// The refined image when present, else the noised decode.
    pub fn final_image(&self) -> &Tensor<T> {
        self.y_ref.as_ref().unwrap_or(&self.y_noised)
    }
}

fn mask_dims(mask: &Tensor<impl Scalar>) -> Option<(usize, usize, usize)> {
    match *mask.shape() {
        [h, w] => Some((1, h, w)),
        [b, 1, h, w] => Some((b, h, w)),
        _ => None,
    }
}

/// `Y_pre ⊙ M + Y_noised ⊙ (1 − M)`. `mask` is `[H, W]` (shared by the
/// batch) or `[B, 1, H, W]`, broadcast over channels.
pub fn fuse<T: Scalar>(y_pre: &Tensor<T>, y_noised: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
    if y_pre.shape() != y_noised.shape() || y_pre.rank() != 4 {
        return Err(Error::shape("refined image", y_noised.shape(), y_pre.shape()));
    }
    let (b, c, h, w) = y_pre.dims4();
    let Some((mb, mh, mw)) = mask_dims(mask) else {
        return Err(Error::shape("fusion mask", &[h, w], mask.shape()));
    };
    if (mh, mw) != (h, w) || (mb != 1 && mb != b) || (mask.rank() == 4 && mb != b) {
        return Err(Error::shape("fusion mask", &[b, 1, h, w], mask.shape()));
    }
    let plane = h * w;
    let shared = mask.rank() == 2;
    Ok(Tensor::from_fn(y_pre.shape(), |i| {
        let m = if shared { mask.data()[i % plane] } else { mask.data()[(i / (c * plane)) * plane + i % plane] };
        y_pre.data()[i] * m + y_noised.data()[i] * (T::one() - m)
    }))
}

/// Conv stack with an additive skip from its input; no stride, no resampling.
#[derive(Clone, Debug)]
struct SkipStage {
    convs: Vec<Conv2d>,
}

impl SkipStage {
    fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, n: usize, channels: usize, k: usize, rng: &mut R) -> Self {
        let convs = (0..n)
            .map(|i| {
                let cin = if i == 0 { 3 } else { channels };
                let cout = if i + 1 == n { 3 } else { channels };
                Conv2d::new(store, &format!("{name}.conv{i}"), cin, cout, k, 1, true, rng)
            })
            .collect();
        Self { convs }
    }

    fn forward<'g, T: Scalar>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        let last = self.convs.len() - 1;
        let mut h = x;
        for (i, c) in self.convs.iter().enumerate() {
            h = c.forward(p, h);
            debug_assert_eq!(h.shape()[2..], x.shape()[2..], "refinement changed resolution");
            if i != last {
                h = h.leaky_relu(T::lit(SLOPE));
            }
        }
        x + h
    }
}

/// Patch critic: two stride-2 convs then a logit map at 1/4 resolution.
#[derive(Clone, Debug)]
struct PatchCritic {
    convs: Vec<Conv2d>,
    out: Conv2d,
}

impl PatchCritic {
    fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, base: usize, rng: &mut R) -> Self {
        let convs = vec![
            Conv2d::new(store, "critic.down0", 3, base, 3, 2, true, rng),
            Conv2d::new(store, "critic.down1", base, 2 * base, 3, 2, true, rng),
        ];
        let out = Conv2d::with_gain(store, "critic.out", 2 * base, 1, 3, 1, true, 1.0, rng);
        Self { convs, out }
    }

    fn forward<'g, T: Scalar>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        let mut h = x;
        for c in &self.convs {
            h = c.forward(p, h).leaky_relu(T::lit(SLOPE));
        }
        self.out.forward(p, h)
    }
}

#[derive(Clone, Debug)]
pub struct RbTrainState<T> {
    pub g_opt: Adam<T>,
    pub d_opt: Adam<T>,
    pub step: u64,
}

/// One refinement block and its critic.
#[derive(Clone, Debug)]
pub struct Refiner<T> {
    pub config: RbConfig,
    pub roi: RoiLabel,
    pub seed: u64,
    pub store: ParamStore<T>,
    pub critic_store: ParamStore<T>,
    pre: SkipStage,
    post: SkipStage,
    critic: PatchCritic,
    pub training: Option<RbTrainState<T>>,
}

/// Vars of one forward pass.
pub struct RbPass<'g, T> {
    pub y_pre: Var<'g, T>,
    pub y_fused: Var<'g, T>,
    pub y_ref: Var<'g, T>,
}

fn expand_mask<'g, T: Scalar>(mask: Var<'g, T>) -> Var<'g, T> {
    mask.graph().concat_channels(&[mask, mask, mask])
}

impl<T: Scalar> Refiner<T> {
    pub fn new(config: &RbConfig, roi: RoiLabel, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = derive_rng(seed, purpose::INIT, 200 + roi.code() as u64);
        let mut store = ParamStore::new();
        let pre = SkipStage::new(&mut store, "pre", config.pre_fusion_convs, config.channels, config.kernel, &mut rng);
        let post = SkipStage::new(&mut store, "post", config.post_fusion_convs, config.channels, config.kernel, &mut rng);
        let mut critic_store = ParamStore::new();
        let critic = PatchCritic::new(&mut critic_store, config.disc_channels, &mut rng);
        Ok(Self { config: config.clone(), roi, seed, store, critic_store, pre, post, critic, training: None })
    }

    /// Graph-level forward. `mask` is `[B, 1, H, W]`.
    pub fn pass<'g>(&self, p: &Bound<'g, T>, y_noised: Var<'g, T>, mask: Var<'g, T>) -> RbPass<'g, T> {
        let m = expand_mask(mask);
        let y_pre = self.pre.forward(p, y_noised);
        let y_fused = y_pre * m + y_noised * m.neg().add_scalar(T::one());
        let y_ref = self.post.forward(p, y_fused).clamp(-T::one(), T::one());
        RbPass { y_pre, y_fused, y_ref }
    }

    /// `(Y_pre, Y_fused, Y_ref)` for `y_noised [B, 3, H, W]` and a mask
    /// `[H, W]` or `[B, 1, H, W]`.
    pub fn forward(&self, y_noised: &Tensor<T>, mask: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        if y_noised.rank() != 4 || y_noised.shape()[1] != 3 {
            return Err(Error::shape("refinement input", &[1, 3, 0, 0], y_noised.shape()));
        }
        let (b, _, h, w) = y_noised.dims4();
        let mask = match mask_dims(mask) {
            Some((1, mh, mw)) if (mh, mw) == (h, w) && b > 1 => {
                Tensor::stack_batch(&vec![mask.clone().reshape(&[1, 1, h, w]); b])
            }
            Some((mb, mh, mw)) if (mb, mh, mw) == (b, h, w) => mask.clone().reshape(&[b, 1, h, w]),
            _ => return Err(Error::shape("refinement mask", &[b, 1, h, w], mask.shape())),
        };
        let g = Graph::new();
        let p = self.store.bind(&g, false);
        let out = self.pass(&p, g.constant(y_noised.clone()), g.constant(mask));
        Ok(((*out.y_pre.value()).clone(), (*out.y_fused.value()).clone(), (*out.y_ref.value()).clone()))
    }

    /// Completes a coarse edit. Masks are binarized unless `soft` is set.
    pub fn refine(&self, coarse: &CoarseEdit<T>, mask: &Tensor<T>, soft: bool) -> Result<EditOutputs<T>> {
        let mask = if soft { mask.clone() } else { binarize_mask(mask, MASK_THRESHOLD)? };
        let (y_pre, y_fused, y_ref) = self.forward(&coarse.y_noised, &mask)?;
        Ok(EditOutputs {
            y_sae: coarse.y_sae.clone(),
            y_noised: coarse.y_noised.clone(),
            y_pre: Some(y_pre),
            y_fused: Some(y_fused),
            y_ref: Some(y_ref),
        })
    }
}

/// Losses of one refinement pass.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RbStepRecord {
    pub step: u64,
    pub rec: f64,
    pub adv: f64,
    pub total: f64,
    pub d_loss: f64,
}

#[derive(Clone, Debug, Default)]
pub struct RbHistory {
    pub records: Vec<RbStepRecord>,
    pub checkpoints: Vec<PathBuf>,
}

impl RbHistory {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
        for r in &self.records {
            w.serialize(r).map_err(|e| Error::Invalid(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RbTrainOptions {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Noise strength of the generated coarse edits.
    pub strength: f64,
    pub injection_layer: Option<usize>,
    pub checkpoint_dir: Option<PathBuf>,
    pub checkpoint_every: u64,
    pub history_csv: Option<PathBuf>,
}

impl Default for RbTrainOptions {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 4,
            lr: 1e-3,
            seed: 0,
            strength: 1.0,
            injection_layer: None,
            checkpoint_dir: None,
            checkpoint_every: 100,
            history_csv: None,
        }
    }
}

/// Ground-truth `[H, W]` masks of one ROI, aligned with `data`.
pub fn roi_masks(data: &[ImageSample], roi: RoiLabel, table: &ClassTable) -> Result<Vec<Tensor<f32>>> {
    data.iter().map(|s| Ok(labelmap_to_roi_masks(&s.labelmap, table)?.masks[&roi].clone())).collect()
}

/// A batch of coarse edits: clean and noised decodes and the binary masks.
pub struct EditBatch<T> {
    pub y_sae: Tensor<T>,
    pub y_noised: Tensor<T>,
    /// `[B, 1, H, W]`, values in `{0, 1}`.
    pub mask: Tensor<T>,
}

/// Runs the frozen autoencoder on `picks` with one noise seed per image.
pub fn make_edit_batch<T: Scalar>(
    sae: &Sae<T>,
    data: &[ImageSample],
    masks: &[Tensor<f32>],
    roi: RoiLabel,
    picks: &[(usize, u64)],
    strength: f64,
    injection_layer: Option<usize>,
) -> Result<EditBatch<T>> {
    let mut parts = (Vec::new(), Vec::new(), Vec::new());
    for &(i, seed) in picks {
        let mask = binarize_mask(&masks[i].cast::<T>(), MASK_THRESHOLD)?;
        let spec = EditSpec { injection_layer, ..EditSpec::new(roi, seed, strength) };
        let e = edit_image(sae, &data[i].batch().cast(), &mask, &spec, MaskMode::Soft)?;
        let (h, w) = (mask.shape()[0], mask.shape()[1]);
        parts.0.push(e.y_sae);
        parts.1.push(e.y_noised);
        parts.2.push(mask.reshape(&[1, 1, h, w]));
    }
    Ok(EditBatch {
        y_sae: Tensor::stack_batch(&parts.0),
        y_noised: Tensor::stack_batch(&parts.1),
        mask: Tensor::stack_batch(&parts.2),
    })
}

/// Generator-side losses. `rec` is the mean L1 over channels and pixels
/// outside the mask (the full image when the mask is empty, 0 when it is full).
pub struct RbLoss<'g, T> {
    pub rec: Var<'g, T>,
    pub adv: Var<'g, T>,
    pub total: Var<'g, T>,
    pub y_ref: Var<'g, T>,
}

pub fn rb_loss<'g, T: Scalar>(
    rb: &Refiner<T>,
    p: &Bound<'g, T>,
    pc: &Bound<'g, T>,
    batch: &EditBatch<T>,
    g: &'g Graph<T>,
) -> RbLoss<'g, T> {
    let y_noised = g.constant(batch.y_noised.clone());
    let mask = g.constant(batch.mask.clone());
    let out = rb.pass(p, y_noised, mask);
    let target = match rb.config.target {
        RecTarget::Noised => y_noised,
        RecTarget::Clean => g.constant(batch.y_sae.clone()),
    };
    let keep = expand_mask(mask).neg().add_scalar(T::one());
    let count = 3.0 * batch.mask.data().iter().filter(|&&m| m == T::zero()).count() as f64;
    let rec = ((out.y_ref - target).abs() * keep).sum().scale(T::lit(1.0 / count.max(1.0)));
    let adv = losses::generator_loss(rb.critic.forward(pc, out.y_ref));
    let total = rec + adv.scale(T::lit(ADV_WEIGHT));
    RbLoss { rec, adv, total, y_ref: out.y_ref }
}

fn check_finite(value: f64, step: u64, what: &str) -> Result<()> {
    if value.is_finite() {
        return Ok(());
    }
    Err(Error::NonFinite { step, detail: format!("refinement {what} is {value}") })
}

/// Trains `rb` against the frozen `sae`. Each step samples images and fresh
/// noise seeds, then updates the block and its critic in turn.
pub fn train_rb<T: Scalar>(
    rb: &mut Refiner<T>,
    sae: &Sae<T>,
    data: &[ImageSample],
    masks: &[Tensor<f32>],
    opts: &RbTrainOptions,
) -> Result<RbHistory> {
    if data.is_empty() || data.len() != masks.len() {
        return Err(Error::Dataset(format!("refinement needs one mask per image ({} images, {} masks)", data.len(), masks.len())));
    }
    let mut state = rb.training.take().unwrap_or_else(|| RbTrainState {
        g_opt: Adam::with_betas(&rb.store, opts.lr, 0.5, 0.99),
        d_opt: Adam::with_betas(&rb.critic_store, opts.lr, 0.5, 0.99),
        step: 0,
    });
    let mut history = RbHistory::default();
    for _ in 0..opts.steps {
        let step = state.step;
        let mut rng = derive_rng(opts.seed, purpose::STEP, 1_000_000 + step);
        let picks: Vec<(usize, u64)> =
            (0..opts.batch_size.max(1)).map(|_| (rng.random_range(0..data.len()), rng.random())).collect();
        let batch = make_edit_batch(sae, data, masks, rb.roi, &picks, opts.strength, opts.injection_layer)?;

        let (rec, adv, total, fake) = {
            let g = Graph::new();
            let p = rb.store.bind(&g, true);
            let pc = rb.critic_store.bind(&g, false);
            let l = rb_loss(rb, &p, &pc, &batch, &g);
            let total = l.total.item().as_f64();
            check_finite(total, step, "loss")?;
            let grads = rb.store.collect_grads(&p, &g.backward(l.total));
            state.g_opt.update(&mut rb.store, &grads);
            (l.rec.item().as_f64(), l.adv.item().as_f64(), total, (*l.y_ref.value()).clone())
        };

        let g = Graph::new();
        let pc = rb.critic_store.bind(&g, true);
        let d = losses::discriminator_loss(
            rb.critic.forward(&pc, g.constant(batch.y_sae.clone())),
            rb.critic.forward(&pc, g.constant(fake)),
        );
        let d_loss = d.item().as_f64();
        check_finite(d_loss, step, "critic loss")?;
        let grads = rb.critic_store.collect_grads(&pc, &g.backward(d));
        state.d_opt.update(&mut rb.critic_store, &grads);
        state.step += 1;

        log::debug!("rb {} step {step} rec {rec:.4} adv {adv:.4} d {d_loss:.4}", rb.roi.name());
        history.records.push(RbStepRecord { step, rec, adv, total, d_loss });
        if let Some(dir) = &opts.checkpoint_dir {
            if opts.checkpoint_every > 0 && state.step % opts.checkpoint_every == 0 {
                rb.training = Some(state);
                let path = save_rb(rb, dir, &format!("rb_{}_s{:06}", rb.roi.name(), rb.training.as_ref().unwrap().step))?;
                state = rb.training.take().unwrap();
                history.checkpoints.push(path);
            }
        }
    }
    rb.training = Some(state);
    if let Some(path) = &opts.history_csv {
        history.write_csv(path)?;
    }
    Ok(history)
}

/// Mean `|Y_ref − Y_noised|` over pixels outside the (binarized) masks of
/// the given `(image index, seed)` edits.
pub fn outside_delta<T: Scalar>(
    rb: &Refiner<T>,
    sae: &Sae<T>,
    data: &[ImageSample],
    masks: &[Tensor<f32>],
    picks: &[(usize, u64)],
    strength: f64,
) -> Result<f64> {
    let (mut acc, mut n) = (0.0, 0usize);
    for pick in picks {
        let batch = make_edit_batch(sae, data, masks, rb.roi, std::slice::from_ref(pick), strength, None)?;
        let (_, _, y_ref) = rb.forward(&batch.y_noised, &batch.mask)?;
        let plane = batch.mask.len();
        for (i, (a, b)) in y_ref.data().iter().zip(batch.y_noised.data()).enumerate() {
            if batch.mask.data()[i % plane] == T::zero() {
                acc += (a.as_f64() - b.as_f64()).abs();
                n += 1;
            }
        }
    }
    Ok(if n == 0 { 0.0 } else { acc / n as f64 })
}

pub fn save_rb<T: Scalar>(rb: &Refiner<T>, dir: &Path, stem: &str) -> Result<PathBuf> {
    let step = rb.training.as_ref().map_or(0, |t| t.step);
    let mut m = Manifest::new::<T>("rb", rb.config.clone(), step, rb.seed);
    m.roi = Some(rb.roi);
    let path = checkpoint::save(dir, stem, m.clone(), &rb.store, rb.training.as_ref().map(|t| &t.g_opt))?;
    m.kind = "rb_critic".into();
    checkpoint::save(dir, &format!("{stem}.critic"), m, &rb.critic_store, rb.training.as_ref().map(|t| &t.d_opt))?;
    Ok(path)
}

/// Loads a block saved by [`save_rb`]; the critic is restored when present.
pub fn load_rb<T: Scalar>(manifest_path: &Path) -> Result<Refiner<T>> {
    let m: Manifest<RbConfig> = checkpoint::read_manifest(manifest_path)?;
    if m.kind != "rb" {
        return Err(Error::Checkpoint { path: manifest_path.to_path_buf(), detail: format!("expected an rb checkpoint, found {}", m.kind) });
    }
    let roi = m.roi.ok_or_else(|| Error::Checkpoint { path: manifest_path.to_path_buf(), detail: "rb manifest lacks an roi".into() })?;
    let mut rb = Refiner::new(&m.config, roi, m.seed)?;
    checkpoint::load_weights(manifest_path, &m, &mut rb.store)?;
    let stem = manifest_path.file_stem().and_then(|s| s.to_str()).unwrap_or("rb");
    let critic = manifest_path.with_file_name(format!("{stem}.critic.json"));
    if critic.exists() {
        let cm: Manifest<RbConfig> = checkpoint::read_manifest(&critic)?;
        checkpoint::load_weights(&critic, &cm, &mut rb.critic_store)?;
    }
    Ok(rb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::make_synthetic_dataset;
    use crate::sae::SaeConfig;
    use proptest::prelude::*;

    #[test]
    fn fuse_examples() {
        let pre = Tensor::<f64>::new(&[1, 1, 2, 2], vec![10.0; 4]);
        let noised = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let m = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(fuse(&pre, &noised, &m).unwrap().data(), &[10.0, 2.0, 3.0, 10.0]);
        assert_eq!(fuse(&pre, &noised, &Tensor::zeros(&[2, 2])).unwrap(), noised);
        assert_eq!(fuse(&pre, &noised, &Tensor::ones(&[2, 2])).unwrap(), pre);
        assert!(fuse(&pre, &noised, &Tensor::zeros(&[3, 2])).is_err());
        assert!(fuse(&pre, &Tensor::zeros(&[1, 1, 2, 3]), &m).is_err());
    }

    proptest! {
        #[test]
        fn fusion_outside_mask_is_bitwise_noised(seed in any::<u64>(), bits in proptest::collection::vec(any::<bool>(), 2 * 25)) {
            let mut rng = derive_rng(seed, 0, 0);
            let pre = Tensor::<f32>::randn(&[2, 3, 5, 5], 3.0, &mut rng);
            let noised = Tensor::<f32>::randn(&[2, 3, 5, 5], 1.0, &mut rng);
            let m = Tensor::new(&[2, 1, 5, 5], bits.iter().map(|&b| b as u8 as f32).collect());
            let out = fuse(&pre, &noised, &m).unwrap();
            for i in 0..out.len() {
                let mi = bits[(i / 75) * 25 + i % 25];
                let want = if mi { pre.data()[i] } else { noised.data()[i] };
                prop_assert_eq!(out.data()[i].to_bits(), want.to_bits());
            }
        }
    }

    fn zeroed(mut rb: Refiner<f64>) -> Refiner<f64> {
        let ids: Vec<_> = rb.store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let shape = rb.store.get(id).shape().to_vec();
            rb.store.set(id, Tensor::zeros(&shape));
        }
        rb
    }

    #[test]
    fn zero_weights_pass_input_through() {
        let rb = zeroed(Refiner::new(&RbConfig::default(), RoiLabel::Hair, 0).unwrap());
        let y = Tensor::from_fn(&[1, 3, 16, 16], |i| ((i as f64) * 0.13).sin());
        let m = Tensor::from_fn(&[16, 16], |i| (i % 3 == 0) as u8 as f64);
        let (pre, fused, refined) = rb.forward(&y, &m).unwrap();
        assert_eq!(pre, y);
        assert_eq!(fused, y);
        assert_eq!(refined, y);
    }

    #[test]
    fn resolution_preserved() {
        let rb = Refiner::<f32>::new(&RbConfig { channels: 8, ..RbConfig::default() }, RoiLabel::Eyes, 1).unwrap();
        for s in [64, 128] {
            let y = Tensor::zeros(&[1, 3, s, s]);
            let (pre, fused, refined) = rb.forward(&y, &Tensor::ones(&[s, s])).unwrap();
            for t in [pre, fused, refined] {
                assert_eq!(t.shape(), [1, 3, s, s]);
            }
        }
        assert!(rb.forward(&Tensor::zeros(&[1, 3, 8, 8]), &Tensor::ones(&[4, 4])).is_err());
        assert!(matches!(RbConfig { kernel: 4, ..RbConfig::default() }.validate(), Err(Error::Config(_))));
    }

    fn small_setup() -> (Sae<f64>, Refiner<f64>, EditBatch<f64>) {
        let sae = Sae::<f64>::new(&SaeConfig::micro(), 0).unwrap();
        let data = make_synthetic_dataset(2, 32, 3);
        let masks = roi_masks(&data, RoiLabel::Hair, &ClassTable::celebamask()).unwrap();
        let batch = make_edit_batch(&sae, &data, &masks, RoiLabel::Hair, &[(0, 1), (1, 2)], 1.0, None).unwrap();
        let rb = Refiner::new(&RbConfig { channels: 8, disc_channels: 4, ..RbConfig::default() }, RoiLabel::Hair, 2).unwrap();
        (sae, rb, batch)
    }

    #[test]
    fn loss_identities() {
        let (_, rb, mut batch) = small_setup();
        let g = Graph::new();
        let (p, pc) = (rb.store.bind(&g, false), rb.critic_store.bind(&g, false));
        let l = rb_loss(&rb, &p, &pc, &batch, &g);
        assert!((l.total.item() - (l.rec.item() + 0.5 * l.adv.item())).abs() < 1e-12);

        // Empty mask: the masked term is the plain full-image L1.
        batch.mask = Tensor::zeros(batch.mask.shape());
        let g = Graph::new();
        let (p, pc) = (rb.store.bind(&g, false), rb.critic_store.bind(&g, false));
        let l = rb_loss(&rb, &p, &pc, &batch, &g);
        let full = l.y_ref.value().zip_map(&batch.y_noised, |a, b| (a - b).abs()).mean();
        assert!((l.rec.item() - full).abs() < 1e-12);

        // Identity block: nothing to reconstruct.
        let rb = zeroed(rb);
        let g = Graph::new();
        let (p, pc) = (rb.store.bind(&g, false), rb.critic_store.bind(&g, false));
        assert_eq!(rb_loss(&rb, &p, &pc, &batch, &g).rec.item(), 0.0);
    }

    #[test]
    fn pre_fusion_weights_learn_only_through_the_mask() {
        let (_, rb, mut batch) = small_setup();
        let grads_for = |batch: &EditBatch<f64>| {
            let g = Graph::new();
            let (p, pc) = (rb.store.bind(&g, true), rb.critic_store.bind(&g, false));
            let l = rb_loss(&rb, &p, &pc, batch, &g);
            rb.store.collect_grads(&p, &g.backward(l.total))
        };
        let pre_ids: Vec<_> = rb.store.iter().filter(|(_, p)| p.name.starts_with("pre.")).map(|(id, _)| id.0).collect();
        let with_mask = grads_for(&batch);
        assert!(pre_ids.iter().any(|&i| with_mask[i].norm_sq() > 0.0));
        batch.mask = Tensor::zeros(batch.mask.shape());
        let without = grads_for(&batch);
        assert!(pre_ids.iter().all(|&i| without[i].norm_sq() == 0.0));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (sae, mut rb, batch) = small_setup();
        let data = make_synthetic_dataset(2, 32, 3);
        let masks = roi_masks(&data, RoiLabel::Hair, &ClassTable::celebamask()).unwrap();
        let opts = RbTrainOptions { steps: 2, batch_size: 2, ..RbTrainOptions::default() };
        let h = train_rb(&mut rb, &sae, &data, &masks, &opts).unwrap();
        assert_eq!(h.records.len(), 2);
        let path = save_rb(&rb, dir.path(), "rb_hair").unwrap();
        let back = load_rb::<f64>(&path).unwrap();
        assert_eq!(back.roi, RoiLabel::Hair);
        let a = rb.forward(&batch.y_noised, &batch.mask).unwrap().2;
        let b = back.forward(&batch.y_noised, &batch.mask).unwrap().2;
        assert!(a.bit_eq(&b));
    }
}

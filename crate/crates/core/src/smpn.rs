//! Semantic mask prediction: one binary segmentation network per ROI.
//!
//! Encoder: full-resolution stem, then four residual levels that each halve
//! the resolution (ResNet basic block with a strided projection shortcut)
//! followed by parallel residual 3x3 branches. Decoder: per level a 2x
//! nearest upsample and two 3x3 convolutions, no skip connections. Head: 1x1
//! convolution and sigmoid.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use ssae_tensor::{blob, Adam, Bound, Conv2d, Graph, ParamStore, Scalar, Tensor, Var};
#[cfg(test)]
use ssae_tensor::ParamId;

use crate::checkpoint::{self, Manifest};
use crate::datasets::{labelmap_to_roi_masks, ClassTable, ImageSample, RoiMaskSet};
use crate::error::{Error, Result};
use crate::losses;
use crate::rng::{derive_rng, purpose};
use crate::roi::RoiLabel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmpnConfig {
    pub image_size: usize,
    pub encoder_levels: usize,
    pub parallel_blocks_per_level: usize,
    pub decoder_convs_per_level: usize,
    pub base_channels: usize,
    pub pretrained_encoder: bool,
    /// Weight blob holding `encoder.*` parameters, required when `pretrained_encoder` is set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoder_weights: Option<PathBuf>,
}

impl SmpnConfig {
    pub fn new(image_size: usize, base_channels: usize) -> Self {
        Self {
            image_size,
            encoder_levels: 4,
            parallel_blocks_per_level: 1,
            decoder_convs_per_level: 2,
            base_channels,
            pretrained_encoder: false,
            encoder_weights: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_levels != 4 {
            return Err(Error::Config(format!("SMPN encoder needs 4 levels, got {}", self.encoder_levels)));
        }
        if self.decoder_convs_per_level != 2 {
            return Err(Error::Config(format!(
                "SMPN decoder uses 2 convolutions per level, got {}",
                self.decoder_convs_per_level
            )));
        }
        let div = 1 << self.encoder_levels;
        if self.image_size == 0 || self.image_size % div != 0 {
            return Err(Error::Config(format!("SMPN image_size {} not divisible by {div}", self.image_size)));
        }
        if self.base_channels == 0 {
            return Err(Error::Config("SMPN base_channels must be positive".into()));
        }
        if self.pretrained_encoder && self.encoder_weights.is_none() {
            return Err(Error::Config("pretrained_encoder set but no encoder_weights given".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct EncoderLevel {
    conv_a: Conv2d,
    conv_b: Conv2d,
    shortcut: Conv2d,
    parallel: Vec<(Conv2d, Conv2d)>,
}

/// Optimizer state carried by a model under training.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub optimizer: Adam<T>,
    pub step: u64,
    pub epoch: u64,
}

#[derive(Clone, Debug)]
pub struct Smpn<T> {
    pub config: SmpnConfig,
    pub roi: RoiLabel,
    pub seed: u64,
    pub store: ParamStore<T>,
    pub training: Option<TrainState<T>>,
    stem: Conv2d,
    levels: Vec<EncoderLevel>,
    decoder: Vec<Vec<Conv2d>>,
    head: Conv2d,
}

/// Builds the network for one ROI with deterministic initial weights.
pub fn build_smpn<T: Scalar>(config: &SmpnConfig, roi: RoiLabel, seed: u64) -> Result<Smpn<T>> {
    config.validate()?;
    let mut rng = derive_rng(seed, purpose::INIT, 100 + roi.code() as u64);
    let mut store = ParamStore::new();
    let c0 = config.base_channels;
    let ch = |l: usize| c0 << l;

    let stem = Conv2d::new(&mut store, "encoder.stem", 3, c0, 3, 1, true, &mut rng);
    let mut levels = Vec::new();
    for l in 0..config.encoder_levels {
        let (cin, cout) = (if l == 0 { c0 } else { ch(l - 1) }, ch(l));
        let p = format!("encoder.level{l}");
        let conv_a = Conv2d::new(&mut store, &format!("{p}.conv_a"), cin, cout, 3, 2, true, &mut rng);
        let conv_b = Conv2d::with_gain(&mut store, &format!("{p}.conv_b"), cout, cout, 3, 1, true, 1.0, &mut rng);
        let shortcut = Conv2d::with_gain(&mut store, &format!("{p}.shortcut"), cin, cout, 1, 2, true, 1.0, &mut rng);
        let parallel = (0..config.parallel_blocks_per_level)
            .map(|k| {
                let a = Conv2d::new(&mut store, &format!("{p}.parallel{k}.a"), cout, cout, 3, 1, true, &mut rng);
                let b = Conv2d::with_gain(&mut store, &format!("{p}.parallel{k}.b"), cout, cout, 3, 1, true, 0.5, &mut rng);
                (a, b)
            })
            .collect();
        levels.push(EncoderLevel { conv_a, conv_b, shortcut, parallel });
    }
    let mut decoder = Vec::new();
    for l in (0..config.encoder_levels).rev() {
        let (cin, cout) = (ch(l), if l == 0 { c0 } else { ch(l - 1) });
        let convs = (0..config.decoder_convs_per_level)
            .map(|k| {
                let i = if k == 0 { cin } else { cout };
                Conv2d::new(&mut store, &format!("decoder.level{l}.conv{k}"), i, cout, 3, 1, true, &mut rng)
            })
            .collect();
        decoder.push(convs);
    }
    let head = Conv2d::with_gain(&mut store, "decoder.head", c0, 1, 1, 1, true, 1.0, &mut rng);

    let mut model = Smpn { config: config.clone(), roi, seed, store, training: None, stem, levels, decoder, head };
    if config.pretrained_encoder {
        let path = config.encoder_weights.clone().expect("validated");
        model.load_pretrained_encoder(&path)?;
    }
    Ok(model)
}

impl<T: Scalar> Smpn<T> {
    /// Replaces `encoder.*` parameters with those stored in a weight blob.
    pub fn load_pretrained_encoder(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let entries = blob::decode::<T>(&bytes)?;
        self.store.load_entries(entries, |name| name.starts_with("encoder."))?;
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        self.store.numel()
    }

    fn check_input(&self, image: &Tensor<T>) -> Result<()> {
        let s = self.config.image_size;
        match image.shape() {
            [_, 3, h, w] if *h == s && *w == s => Ok(()),
            other => Err(Error::shape("SMPN input", &[other.first().copied().unwrap_or(1), 3, s, s], other)),
        }
    }

    /// Mask logits `[B, 1, H, W]`.
    pub fn logits<'g>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        let mut h = self.stem.forward(p, x).relu();
        for level in &self.levels {
            let a = level.conv_a.forward(p, h).relu();
            let b = level.conv_b.forward(p, a);
            h = (b + level.shortcut.forward(p, h)).relu();
            for (pa, pb) in &level.parallel {
                let branch = pb.forward(p, pa.forward(p, h).relu());
                h = (h + branch).relu();
            }
        }
        for convs in &self.decoder {
            h = h.upsample(2);
            for conv in convs {
                h = conv.forward(p, h).relu();
            }
        }
        self.head.forward(p, h)
    }

    /// Soft mask `[B, 1, H, W]` with values in `(0, 1)`.
    pub fn forward(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(image)?;
        let g = Graph::new();
        let p = self.store.bind(&g, false);
        let x = g.constant(image.clone());
        let probs = self.logits(&p, x).sigmoid();
        // Keep strictly inside (0, 1) even where the sigmoid saturates in floating point.
        let eps = T::lit(1e-6);
        Ok(probs.value().map(|v| v.max(eps).min(T::one() - eps)))
    }
}

/// Step function: 1 where `soft >= threshold`, else 0.
pub fn binarize_mask<T: Scalar>(soft: &Tensor<T>, threshold: f64) -> Result<Tensor<T>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Invalid(format!("threshold {threshold} outside (0, 1)")));
    }
    let t = T::lit(threshold);
    Ok(soft.map(|v| if v >= t { T::one() } else { T::zero() }))
}

/// One soft mask per ROI for a single image `[1, 3, H, W]`.
pub fn predict_all_rois<T: Scalar>(models: &BTreeMap<RoiLabel, Smpn<T>>, image: &Tensor<T>) -> Result<RoiMaskSet> {
    let missing: Vec<RoiLabel> = RoiLabel::ALL.iter().copied().filter(|r| !models.contains_key(r)).collect();
    if !missing.is_empty() {
        return Err(Error::MissingRoiModels(missing));
    }
    let sizes: Vec<usize> = models.values().map(|m| m.config.image_size).collect();
    if sizes.windows(2).any(|w| w[0] != w[1]) {
        return Err(Error::Config(format!("SMPN image sizes differ: {sizes:?}")));
    }
    if image.shape().first() != Some(&1) {
        return Err(Error::shape("mask prediction input", &[1, 3, sizes[0], sizes[0]], image.shape()));
    }
    let mut masks = BTreeMap::new();
    for roi in RoiLabel::ALL {
        let soft = models[&roi].forward(image)?;
        let (_, _, h, w) = soft.dims4();
        masks.insert(roi, soft.cast::<f32>().reshape(&[h, w]));
    }
    Ok(RoiMaskSet { masks, ground_truth: false })
}

#[derive(Clone, Debug)]
pub struct SmpnTrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub checkpoint_dir: Option<PathBuf>,
    pub checkpoint_every: usize,
    /// Anneal the learning rate to zero over `epochs` with a half cosine.
    pub cosine_decay: bool,
}

impl Default for SmpnTrainOptions {
    fn default() -> Self {
        Self { epochs: 10, lr: 2e-4, batch_size: 4, seed: 0, checkpoint_dir: None, checkpoint_every: 1, cosine_decay: true }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SmpnHistory {
    /// Mean-reduced BCE per optimizer step.
    pub step_loss: Vec<f64>,
    pub epoch_loss: Vec<f64>,
    /// Mean IoU of the binarized training-batch predictions, per epoch.
    pub epoch_iou: Vec<f64>,
    pub checkpoints: Vec<PathBuf>,
}

/// Ground-truth masks `[N, 1, H, W]` for one ROI.
pub fn gt_masks<T: Scalar>(samples: &[&ImageSample], roi: RoiLabel, table: &ClassTable) -> Result<Tensor<T>> {
    let parts = samples
        .iter()
        .map(|s| {
            let set = labelmap_to_roi_masks(&s.labelmap, table)?;
            let m = &set.masks[&roi];
            let (h, w) = s.size();
            Ok(m.cast::<T>().reshape(&[1, 1, h, w]))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack_batch(&parts))
}

pub fn images<T: Scalar>(samples: &[&ImageSample]) -> Tensor<T> {
    crate::datasets::stack_images(samples).cast()
}

/// Minimizes per-pixel BCE of the model's ROI mask against ground truth.
pub fn train_smpn<T: Scalar>(
    model: &mut Smpn<T>,
    data: &[ImageSample],
    table: &ClassTable,
    opts: &SmpnTrainOptions,
) -> Result<SmpnHistory> {
    if data.is_empty() {
        return Err(Error::Dataset("no training samples".into()));
    }
    let roi = model.roi;
    let mut state = model.training.take().unwrap_or_else(|| TrainState {
        optimizer: Adam::new(&model.store, opts.lr),
        step: 0,
        epoch: 0,
    });
    state.optimizer.lr = opts.lr;
    let mut history = SmpnHistory::default();
    let mut order: Vec<usize> = (0..data.len()).collect();

    for e in 0..opts.epochs {
        if opts.cosine_decay {
            let t = e as f64 / opts.epochs as f64;
            state.optimizer.lr = opts.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
        }
        let epoch = state.epoch;
        order.sort_unstable();
        order.shuffle(&mut derive_rng(opts.seed, purpose::SHUFFLE, epoch));
        let (mut loss_sum, mut iou_sum, mut iou_n, mut batches) = (0.0, 0.0, 0usize, 0usize);
        for chunk in order.chunks(opts.batch_size.max(1)) {
            let batch: Vec<&ImageSample> = chunk.iter().map(|&i| &data[i]).collect();
            let x = images::<T>(&batch);
            model.check_input(&x)?;
            let y = gt_masks::<T>(&batch, roi, table)?;

            let g = Graph::new();
            let p = model.store.bind(&g, true);
            let logits = model.logits(&p, g.constant(x));
            let target = g.constant(y.clone());
            let loss = losses::bce_with_logits(logits, target);
            let lv = loss.item().as_f64();
            if !lv.is_finite() {
                model.training = Some(state);
                return Err(Error::NonFinite { step: model_step(model), detail: format!("SMPN[{roi}] BCE = {lv}") });
            }
            let grads = g.backward(loss);
            let gs = model.store.collect_grads(&p, &grads);
            let probs = logits.value().map(sigmoid_scalar);
            drop(p);
            state.optimizer.update(&mut model.store, &gs);
            state.step += 1;

            let (_, _, h, w) = probs.dims4();
            for b in 0..chunk.len() {
                let pb = probs.select_batch(&[b]).reshape(&[h, w]);
                let yb = y.select_batch(&[b]).reshape(&[h, w]);
                iou_sum += losses::iou(&pb, &yb);
                iou_n += 1;
            }
            history.step_loss.push(lv);
            loss_sum += lv;
            batches += 1;
        }
        state.epoch += 1;
        let (el, ei) = (loss_sum / batches as f64, iou_sum / iou_n as f64);
        history.epoch_loss.push(el);
        history.epoch_iou.push(ei);
        log::debug!("smpn[{roi}] epoch {} loss {el:.5} iou {ei:.4}", state.epoch);

        if let Some(dir) = &opts.checkpoint_dir {
            if opts.checkpoint_every > 0 && state.epoch % opts.checkpoint_every as u64 == 0 {
                let mut m = Manifest::new::<T>("smpn", model.config.clone(), state.step, model.seed);
                m.roi = Some(roi);
                m.epoch = Some(state.epoch);
                m.metrics.insert("bce".into(), el);
                m.metrics.insert("iou".into(), ei);
                let stem = format!("smpn_{}_e{:04}", roi.name(), state.epoch);
                history.checkpoints.push(checkpoint::save(dir, &stem, m, &model.store, Some(&state.optimizer))?);
            }
        }
    }
    model.training = Some(state);
    Ok(history)
}

fn model_step<T>(model: &Smpn<T>) -> u64 {
    model.training.as_ref().map_or(0, |s| s.step)
}

fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Mean IoU of binarized predictions against ground truth over a sample set.
pub fn evaluate_iou<T: Scalar>(model: &Smpn<T>, data: &[ImageSample], table: &ClassTable) -> Result<f64> {
    let mut total = 0.0;
    for s in data {
        let x = images::<T>(&[s]);
        let pred = binarize_mask(&model.forward(&x)?, 0.5)?;
        let gt = gt_masks::<T>(&[s], model.roi, table)?;
        total += losses::iou(&pred, &gt);
    }
    Ok(total / data.len() as f64)
}

/// Saves an inference checkpoint (weights only).
pub fn save_smpn<T: Scalar>(model: &Smpn<T>, dir: &Path, stem: &str) -> Result<PathBuf> {
    let step = model_step(model);
    let mut m = Manifest::new::<T>("smpn", model.config.clone(), step, model.seed);
    m.roi = Some(model.roi);
    m.epoch = model.training.as_ref().map(|s| s.epoch);
    checkpoint::save(dir, stem, m, &model.store, None)
}

pub fn load_smpn<T: Scalar>(manifest_path: &Path) -> Result<Smpn<T>> {
    let m: Manifest<SmpnConfig> = checkpoint::read_manifest(manifest_path)?;
    let roi = m.roi.ok_or_else(|| Error::Checkpoint {
        path: manifest_path.to_path_buf(),
        detail: "SMPN manifest lacks an roi".into(),
    })?;
    let mut config = m.config.clone();
    // Weights come from the checkpoint itself.
    config.pretrained_encoder = false;
    config.encoder_weights = None;
    let mut model = build_smpn::<T>(&config, roi, m.seed)?;
    checkpoint::load_weights(manifest_path, &m, &mut model.store)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::make_synthetic_dataset;

    fn tiny() -> SmpnConfig {
        SmpnConfig::new(32, 4)
    }

    #[test]
    fn config_invariants_enforced() {
        let mut c = tiny();
        c.encoder_levels = 3;
        assert!(matches!(build_smpn::<f32>(&c, RoiLabel::Hair, 0), Err(Error::Config(_))));
        let c = SmpnConfig::new(40, 4);
        assert!(matches!(build_smpn::<f32>(&c, RoiLabel::Hair, 0), Err(Error::Config(_))));
        let mut c = tiny();
        c.decoder_convs_per_level = 3;
        assert!(build_smpn::<f32>(&c, RoiLabel::Hair, 0).is_err());
        let mut c = tiny();
        c.pretrained_encoder = true;
        assert!(build_smpn::<f32>(&c, RoiLabel::Hair, 0).is_err());
    }

    #[test]
    fn deterministic_build_and_shared_architecture() {
        let x = Tensor::<f32>::from_fn(&[1, 3, 32, 32], |i| ((i % 17) as f32 - 8.0) / 8.0);
        let a = build_smpn::<f32>(&tiny(), RoiLabel::Nose, 5).unwrap();
        let b = build_smpn::<f32>(&tiny(), RoiLabel::Nose, 5).unwrap();
        assert!(a.forward(&x).unwrap().bit_eq(&b.forward(&x).unwrap()));

        let counts: Vec<usize> =
            RoiLabel::ALL.iter().map(|&r| build_smpn::<f32>(&tiny(), r, 5).unwrap().num_parameters()).collect();
        assert!(counts.windows(2).all(|w| w[0] == w[1]));
        let hair = build_smpn::<f32>(&tiny(), RoiLabel::Hair, 5).unwrap();
        assert_ne!(hair.store.get(hair.stem.weight), a.store.get(a.stem.weight));
    }

    #[test]
    fn output_range_shape_and_batch_independence() {
        for size in [32, 64, 128] {
            let m = build_smpn::<f32>(&SmpnConfig::new(size, 4), RoiLabel::Skin, 1).unwrap();
            let one = Tensor::<f32>::from_fn(&[1, 3, size, size], |i| ((i * 7 % 13) as f32 - 6.0) / 6.0);
            let two = Tensor::stack_batch(&[one.clone(), one.clone()]);
            let out = m.forward(&two).unwrap();
            assert_eq!(out.shape(), &[2, 1, size, size]);
            assert!(out.min() > 0.0 && out.max() < 1.0);
            assert!(out.select_batch(&[0]).bit_eq(&out.select_batch(&[1])));
        }
    }

    #[test]
    fn wrong_input_shape_names_expected() {
        let m = build_smpn::<f32>(&tiny(), RoiLabel::Skin, 1).unwrap();
        let err = m.forward(&Tensor::zeros(&[1, 3, 16, 16])).unwrap_err();
        assert!(err.to_string().contains("[1, 3, 32, 32]"), "{err}");
    }

    #[test]
    fn binarize_examples() {
        let soft = Tensor::<f64>::new(&[2, 2], vec![0.49, 0.5, 0.51, 0.7]);
        assert_eq!(binarize_mask(&soft, 0.5).unwrap().data(), &[0.0, 1.0, 1.0, 1.0]);
        assert_eq!(binarize_mask(&Tensor::<f64>::full(&[3], 0.4), 0.5).unwrap().sum(), 0.0);
        let gt = Tensor::<f64>::new(&[4], vec![0.0, 1.0, 1.0, 0.0]);
        for t in [0.01, 0.3, 0.99] {
            assert_eq!(binarize_mask(&gt, t).unwrap(), gt);
        }
        assert!(binarize_mask(&gt, 0.0).is_err());
        assert!(binarize_mask(&gt, 1.0).is_err());
    }

    #[test]
    fn predict_all_requires_every_roi_and_is_order_independent() {
        let x = images::<f32>(&[&make_synthetic_dataset(1, 32, 3)[0]]);
        let mut models = BTreeMap::new();
        for roi in [RoiLabel::Eyes, RoiLabel::Hair] {
            models.insert(roi, build_smpn::<f32>(&tiny(), roi, 9).unwrap());
        }
        match predict_all_rois(&models, &x) {
            Err(Error::MissingRoiModels(m)) => assert_eq!(m, vec![RoiLabel::Skin, RoiLabel::Nose, RoiLabel::LipsMouth]),
            other => panic!("unexpected {other:?}"),
        }
        let mut forward = BTreeMap::new();
        let mut reverse = BTreeMap::new();
        for roi in RoiLabel::ALL {
            forward.insert(roi, build_smpn::<f32>(&tiny(), roi, 9).unwrap());
        }
        for roi in RoiLabel::ALL.iter().rev() {
            reverse.insert(*roi, build_smpn::<f32>(&tiny(), *roi, 9).unwrap());
        }
        let a = predict_all_rois(&forward, &x).unwrap();
        let b = predict_all_rois(&reverse, &x).unwrap();
        assert_eq!(a.len(), 5);
        assert_eq!(a, b);
        for roi in RoiLabel::ALL {
            let single = forward[&roi].forward(&x).unwrap().reshape(&[32, 32]);
            assert!(a.get(roi).unwrap().bit_eq(&single));
        }
    }

    #[test]
    fn checkpoint_roundtrip_and_pretrained_encoder() {
        let dir = tempfile::tempdir().unwrap();
        let data = make_synthetic_dataset(2, 32, 4);
        let mut m = build_smpn::<f32>(&tiny(), RoiLabel::Hair, 2).unwrap();
        let opts = SmpnTrainOptions { epochs: 2, batch_size: 2, checkpoint_dir: Some(dir.path().into()), ..Default::default() };
        let hist = train_smpn(&mut m, &data, &ClassTable::default(), &opts).unwrap();
        assert_eq!(hist.checkpoints.len(), 2);
        assert_eq!(hist.step_loss.len(), 2);

        let loaded = load_smpn::<f32>(&hist.checkpoints[1]).unwrap();
        let x = images::<f32>(&[&data[0]]);
        assert!(loaded.forward(&x).unwrap().bit_eq(&m.forward(&x).unwrap()));
        let manifest: Manifest<SmpnConfig> = checkpoint::read_manifest(&hist.checkpoints[1]).unwrap();
        assert_eq!(manifest.roi, Some(RoiLabel::Hair));
        assert_eq!(manifest.epoch, Some(2));
        assert!(manifest.metrics.contains_key("iou"));

        // Encoder-only transfer into a model for another ROI.
        let blob_path = dir.path().join(&manifest.weights);
        let mut cfg = tiny();
        cfg.pretrained_encoder = true;
        cfg.encoder_weights = Some(blob_path);
        let other = build_smpn::<f32>(&cfg, RoiLabel::Eyes, 77).unwrap();
        assert_eq!(other.store.get(other.stem.weight), m.store.get(m.stem.weight));
        assert_ne!(other.store.get(other.head.weight), m.store.get(m.head.weight));
    }

    fn bce_of(m: &Smpn<f64>, x: &Tensor<f64>, y: &Tensor<f64>) -> f64 {
        let g = Graph::new();
        let p = m.store.bind(&g, false);
        losses::bce_with_logits(m.logits(&p, g.constant(x.clone())), g.constant(y.clone())).item()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut m = build_smpn::<f64>(&SmpnConfig::new(16, 2), RoiLabel::Eyes, 3).unwrap();
        // Zero biases leave exact relu kinks in dead regions; move off them.
        let mut rng = derive_rng(1, 0, 0);
        let biases: Vec<ParamId> = m.store.iter().filter(|(_, p)| p.name.ends_with(".bias")).map(|(id, _)| id).collect();
        for id in biases {
            let n = m.store.get(id).len();
            m.store.set(id, Tensor::randn(&[n], 0.1, &mut rng));
        }
        let x = Tensor::<f64>::from_fn(&[2, 3, 16, 16], |i| ((i * 31 % 23) as f64 - 11.0) / 11.0);
        let y = Tensor::<f64>::from_fn(&[2, 1, 16, 16], |i| ((i / 5) % 2) as f64);
        let g = Graph::new();
        let p = m.store.bind(&g, true);
        let loss = losses::bce_with_logits(m.logits(&p, g.constant(x.clone())), g.constant(y.clone()));
        let grads = m.store.collect_grads(&p, &g.backward(loss));
        drop(p);
        let ids: Vec<ParamId> = m.store.iter().map(|(id, _)| id).collect();
        let h = 1e-5;
        for (k, id) in ids.iter().enumerate().step_by(3) {
            let n = m.store.get(*id).len();
            for j in [0, n / 2, n - 1] {
                let orig = m.store.get(*id).data()[j];
                m.store.get_mut(*id).data_mut()[j] = orig + h;
                let up = bce_of(&m, &x, &y);
                m.store.get_mut(*id).data_mut()[j] = orig - h;
                let down = bce_of(&m, &x, &y);
                m.store.get_mut(*id).data_mut()[j] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = grads[k].data()[j];
                assert!((fd - an).abs() <= 1e-6 + 1e-4 * an.abs().max(fd.abs()), "{} [{j}]: fd {fd} vs {an}", m.store.name(*id));
            }
        }
    }

    #[test]
    fn overfits_a_single_sample() {
        let data = make_synthetic_dataset(1, 64, 21);
        let table = ClassTable::default();
        let mut m = build_smpn::<f32>(&SmpnConfig::new(64, 8), RoiLabel::Skin, 0).unwrap();
        let opts = SmpnTrainOptions { epochs: 250, lr: 2e-3, batch_size: 1, ..Default::default() };
        let hist = train_smpn(&mut m, &data, &table, &opts).unwrap();
        let iou = evaluate_iou(&m, &data, &table).unwrap();
        assert!(hist.epoch_loss.last().unwrap() < &hist.epoch_loss[0]);
        assert!(iou > 0.95, "IoU {iou}");
    }
}

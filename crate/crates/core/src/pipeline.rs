//! A loaded set of models (one autoencoder, per-ROI mask predictors and
//! refinement blocks) and the edit and evaluation entry points built on it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use ssae_tensor::Tensor;

use crate::checkpoint::FORMAT_VERSION;
use crate::datasets::{labelmap_to_roi_masks, stack_images, ClassTable, ImageSample, RoiMaskSet};
use crate::error::{Error, Result};
use crate::evaluation::{compute_fid, compute_lpips, locality_score, measure, Embedder, EvalReport, EvalRow};
use crate::refinement::{load_rb, EditOutputs, Refiner};
use crate::roi::RoiLabel;
use crate::sae::{Sae, SaeConfig};
use crate::smpn::{binarize_mask, load_smpn, predict_all_rois, Smpn};
use crate::style_edit::{noised_deltas, receptive_field_after, EditSpec, MaskMode, MaskSource};

pub const MASK_THRESHOLD: f64 = 0.5;

/// On-disk bundle description. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub format_version: u32,
    pub image_size: usize,
    pub sae: PathBuf,
    #[serde(default)]
    pub smpn: BTreeMap<RoiLabel, PathBuf>,
    #[serde(default)]
    pub rb: BTreeMap<RoiLabel, PathBuf>,
    pub sae_config: SaeConfig,
}

impl BundleManifest {
    pub fn new(sae_config: SaeConfig, sae: PathBuf) -> Self {
        Self { format_version: FORMAT_VERSION, image_size: sae_config.image_size, sae, smpn: BTreeMap::new(), rb: BTreeMap::new(), sae_config }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text)?;
        if m.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                detail: format!("bundle format {} unsupported (expected {FORMAT_VERSION})", m.format_version),
            });
        }
        Ok(m)
    }
}

/// Frozen models for inference; nothing here is mutated after loading.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub sae: Sae<f32>,
    pub smpn: BTreeMap<RoiLabel, Smpn<f32>>,
    pub rb: BTreeMap<RoiLabel, Refiner<f32>>,
}

/// A finished edit with the mask that drove it.
#[derive(Clone, Debug)]
pub struct PipelineEdit {
    pub outputs: EditOutputs<f32>,
    /// Binary `[H, W]` mask at image resolution.
    pub mask: Tensor<f32>,
    pub layer: usize,
    /// Where the noise actually landed: the layer mask's support upsampled to the image.
    pub footprint: Tensor<f32>,
    pub refined: bool,
}

impl Pipeline {
    pub fn new(sae: Sae<f32>) -> Self {
        Self { sae, smpn: BTreeMap::new(), rb: BTreeMap::new() }
    }

    /// Loads a bundle and checks every component on a blank image.
    pub fn load(bundle: &Path) -> Result<Self> {
        let m = BundleManifest::read(bundle)?;
        let dir = bundle.parent().unwrap_or(Path::new("."));
        let sae = Sae::load(&dir.join(&m.sae), false)?;
        if sae.config != m.sae_config {
            return Err(Error::Config(format!("{}: autoencoder config differs from the bundle's", bundle.display())));
        }
        let mut p = Self::new(sae);
        for (&roi, path) in &m.smpn {
            p.smpn.insert(roi, load_smpn(&dir.join(path))?);
        }
        for (&roi, path) in &m.rb {
            p.rb.insert(roi, load_rb(&dir.join(path))?);
        }
        p.self_check()?;
        Ok(p)
    }

    pub fn image_size(&self) -> usize {
        self.sae.config.image_size
    }

    /// Confirms that every component accepts and preserves the image size.
    pub fn self_check(&self) -> Result<()> {
        let s = self.image_size();
        let probe = Tensor::zeros(&[1, 3, s, s]);
        let y = self.sae.reconstruct(&probe)?;
        if y.shape() != [1, 3, s, s] {
            return Err(Error::shape("reconstruction probe", &[1, 3, s, s], y.shape()));
        }
        for (roi, m) in &self.smpn {
            if m.config.image_size != s {
                return Err(Error::Config(format!("{roi} mask model is {}px but the autoencoder is {s}px", m.config.image_size)));
            }
            m.forward(&probe)?;
        }
        for rb in self.rb.values() {
            rb.forward(&probe, &Tensor::zeros(&[s, s]))?;
        }
        Ok(())
    }

    /// SHA-256 over all weights, in a fixed order.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.sae.generator.to_blob());
        for (roi, m) in &self.smpn {
            h.update([roi.code()]);
            h.update(m.store.to_blob());
        }
        for (roi, rb) in &self.rb {
            h.update([roi.code() + 8]);
            h.update(rb.store.to_blob());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Soft masks from every ROI predictor.
    pub fn masks(&self, image: &Tensor<f32>) -> Result<RoiMaskSet> {
        predict_all_rois(&self.smpn, image)
    }

    /// The binary image-resolution mask an edit uses.
    pub fn resolve_mask(&self, image: &Tensor<f32>, spec: &EditSpec, supplied: Option<&Tensor<f32>>) -> Result<Tensor<f32>> {
        let s = self.image_size();
        let mask = match (spec.mask_source, supplied) {
            (MaskSource::Predicted, _) => {
                let model = self.smpn.get(&spec.roi).ok_or_else(|| Error::MissingRoiModels(vec![spec.roi]))?;
                model.forward(image)?.reshape(&[s, s])
            }
            (_, Some(m)) => m.clone(),
            (source, None) => {
                return Err(Error::Invalid(format!("mask source {source:?} needs a mask to be supplied")));
            }
        };
        if mask.shape() != [s, s] {
            return Err(Error::shape("edit mask", &[s, s], mask.shape()));
        }
        binarize_mask(&mask, MASK_THRESHOLD)
    }

    /// One encode and one noised decode, plus the refinement block when
    /// requested and available. This is what edit timing measures.
    pub fn edit_final(&self, image: &Tensor<f32>, mask: &Tensor<f32>, spec: &EditSpec) -> Result<Tensor<f32>> {
        let code = self.sae.encode(image)?;
        let (_, _, deltas) = noised_deltas(&self.sae, &code, mask, spec, MaskMode::Soft)?;
        let y = self.sae.decode_with_deltas(&code, &deltas)?;
        match (spec.refine, self.rb.get(&spec.roi)) {
            (true, Some(rb)) => Ok(rb.forward(&y, mask)?.2),
            _ => Ok(y),
        }
    }

    /// Full edit chain for `image [1, 3, S, S]`.
    pub fn edit(&self, image: &Tensor<f32>, spec: &EditSpec, supplied_mask: Option<&Tensor<f32>>) -> Result<PipelineEdit> {
        let mask = self.resolve_mask(image, spec, supplied_mask)?;
        let code = self.sae.encode(image)?;
        let (layer, layer_mask, deltas) = noised_deltas(&self.sae, &code, &mask, spec, MaskMode::Soft)?;
        let y_sae = self.sae.decode(&code, None)?;
        let y_noised = self.sae.decode_with_deltas(&code, &deltas)?;
        let s = self.image_size();
        let res = layer_mask.shape()[0];
        let f = s / res;
        let footprint = Tensor::from_fn(&[s, s], |k| (layer_mask.data()[(k / s / f) * res + (k % s) / f] != 0.0) as u8 as f32);
        let coarse = EditOutputs { y_sae, y_noised, y_pre: None, y_fused: None, y_ref: None };
        let (outputs, refined) = match (spec.refine, self.rb.get(&spec.roi)) {
            (true, Some(rb)) => {
                let (y_pre, y_fused, y_ref) = rb.forward(&coarse.y_noised, &mask)?;
                (EditOutputs { y_pre: Some(y_pre), y_fused: Some(y_fused), y_ref: Some(y_ref), ..coarse }, true)
            }
            (true, None) => {
                log::warn!("no refinement block for {}; returning the unrefined edit", spec.roi);
                (coarse, false)
            }
            (false, _) => (coarse, false),
        };
        Ok(PipelineEdit { outputs, mask, layer, footprint, refined })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub rois: Vec<RoiLabel>,
    pub mask_source: MaskSource,
    pub seed: u64,
    pub strength: f64,
    pub refine: bool,
    pub warmup: usize,
    pub trials: usize,
    pub embedder: String,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            rois: RoiLabel::ALL.to_vec(),
            mask_source: MaskSource::GroundTruth,
            seed: 0,
            strength: 1.0,
            refine: false,
            warmup: 1,
            trials: 5,
            embedder: Embedder::TOY.into(),
        }
    }
}

/// Edits every image once per ROI (seed `opts.seed + i` for image `i`) and
/// scores the edits against the inputs.
pub fn evaluate(pipeline: &Pipeline, data: &[ImageSample], table: &ClassTable, opts: &EvalOptions) -> Result<EvalReport> {
    if data.len() < 2 {
        return Err(Error::Dataset(format!("evaluation needs at least 2 images, got {}", data.len())));
    }
    let embedder = Embedder::by_name(&opts.embedder)?;
    let inputs = stack_images(&data.iter().collect::<Vec<_>>());
    let mut rows = Vec::new();
    for &roi in &opts.rois {
        let mut edited = Vec::with_capacity(data.len());
        let (mut outside, mut inside) = (Vec::new(), Vec::new());
        let mut timing_case = None;
        for (i, sample) in data.iter().enumerate() {
            let x = sample.batch();
            let gt = match opts.mask_source {
                MaskSource::Predicted => None,
                _ => Some(labelmap_to_roi_masks(&sample.labelmap, table)?.masks[&roi].clone()),
            };
            let spec = EditSpec { refine: opts.refine, mask_source: opts.mask_source, ..EditSpec::new(roi, opts.seed + i as u64, opts.strength) };
            let e = pipeline.edit(&x, &spec, gt.as_ref())?;
            let r = receptive_field_after(&pipeline.sae, e.layer)?;
            let score = locality_score(&e.outputs.y_sae, e.outputs.final_image(), &e.footprint, r)?;
            outside.push(score.outside);
            inside.extend(score.inside);
            edited.push(e.outputs.final_image().clone());
            if timing_case.is_none() {
                timing_case = Some((x, e.mask, spec));
            }
        }
        let (x, mask, spec) = timing_case.expect("at least two images");
        let timing = measure(opts.warmup, opts.trials, || pipeline.edit_final(&x, &mask, &spec).map(|_| ()))?;
        let edited = Tensor::stack_batch(&edited);
        let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        rows.push(EvalRow {
            roi: roi.name().into(),
            fid: compute_fid(&edited, &inputs, &embedder)?,
            lpips: compute_lpips(&edited, &inputs, &embedder)?,
            time_mean_s: timing.mean_s,
            time_std_s: timing.std_s,
            outside_delta: avg(&outside),
            inside_delta: (!inside.is_empty()).then(|| avg(&inside)),
        });
    }
    let meta = BTreeMap::from([
        ("hardware".to_string(), crate::evaluation::hardware_summary()),
        ("images".to_string(), data.len().to_string()),
        ("image_size".to_string(), pipeline.image_size().to_string()),
        ("embedder".to_string(), embedder.name().to_string()),
        ("seed".to_string(), opts.seed.to_string()),
        ("strength".to_string(), opts.strength.to_string()),
        ("refine".to_string(), opts.refine.to_string()),
        ("mask_source".to_string(), format!("{:?}", opts.mask_source)),
        ("timing".to_string(), format!("warmup {}, trials {}", opts.warmup, opts.trials)),
    ]);
    EvalReport::new(rows, meta)
}

//! Swapping autoencoder: an encoder splitting an image into a spatial
//! structure code `S_s` and a global texture code `S_t`, a decoder built from
//! per-pixel modulated convolutions, and the two critics used in training.

mod modconv;
mod networks;
mod train;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use ssae_tensor::{Graph, ParamStore, Scalar, Tensor};

use crate::checkpoint::{self, Manifest};
use crate::error::{Error, Result};
use crate::rng::{derive_rng, purpose};

pub use modconv::{modulate_var, modulated_conv, ModConv};
pub use networks::{CooccurDiscriminator, Decoder, Encoder, ImageDiscriminator};
pub use train::{sae_loss, train_sae, LossReport, SaeHistory, SaeTrainOptions, SaeTrainState, StepRecord};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaeConfig {
    pub image_size: usize,
    pub downsample_factor: usize,
    pub structure_channels: usize,
    pub texture_dim: usize,
    /// Output channels of each stride-2 encoder block; one block per halving.
    pub encoder_channels: Vec<usize>,
    /// Output channels of every 3x3 decoder layer. The first runs at the
    /// structure resolution, the next `log2(downsample_factor)` each upsample
    /// 2x first, the rest run at full resolution. A 1x1 RGB layer follows.
    pub decoder_layer_channels: Vec<usize>,
    pub use_demodulation: bool,
    pub disc_channels: usize,
    pub cooccur_channels: usize,
}

/// One decoder layer: optional 2x upsample, then a modulated convolution at `resolution`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub upsample: bool,
    pub resolution: usize,
}

impl SaeConfig {
    /// 256x256 images, 16x16x8 structure, 2048-d texture.
    pub fn full_scale() -> Self {
        Self {
            image_size: 256,
            downsample_factor: 16,
            structure_channels: 8,
            texture_dim: 2048,
            encoder_channels: vec![64, 128, 256, 512],
            decoder_layer_channels: vec![512, 512, 256, 128, 64, 64],
            use_demodulation: true,
            disc_channels: 64,
            cooccur_channels: 64,
        }
    }

    /// 64x64 images, 4x4x8 structure, 256-d texture.
    pub fn toy() -> Self {
        Self {
            image_size: 64,
            downsample_factor: 16,
            structure_channels: 8,
            texture_dim: 256,
            encoder_channels: vec![16, 32, 64, 64],
            decoder_layer_channels: vec![64, 64, 64, 32, 32, 32],
            use_demodulation: true,
            disc_channels: 16,
            cooccur_channels: 16,
        }
    }

    /// 32x32 images, 2x2x8 structure, 64-d texture. For fast tests.
    pub fn micro() -> Self {
        Self {
            image_size: 32,
            downsample_factor: 16,
            structure_channels: 8,
            texture_dim: 64,
            encoder_channels: vec![8, 16, 16, 32],
            decoder_layer_channels: vec![32, 32, 16, 16, 16, 16],
            use_demodulation: true,
            disc_channels: 8,
            cooccur_channels: 8,
        }
    }

    pub fn levels(&self) -> usize {
        self.downsample_factor.trailing_zeros() as usize
    }

    pub fn structure_size(&self) -> usize {
        self.image_size / self.downsample_factor
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.downsample_factor;
        if f < 2 || !f.is_power_of_two() {
            return Err(Error::Config(format!("downsample_factor {f} must be a power of two >= 2")));
        }
        if self.image_size == 0 || self.image_size % f != 0 {
            return Err(Error::Config(format!("image_size {} not divisible by downsample_factor {f}", self.image_size)));
        }
        if self.encoder_channels.len() != self.levels() {
            return Err(Error::Config(format!(
                "encoder_channels has {} entries, downsample_factor {f} needs {}",
                self.encoder_channels.len(),
                self.levels()
            )));
        }
        if self.decoder_layer_channels.len() < self.levels() + 1 {
            return Err(Error::Config(format!(
                "decoder needs at least {} layers to reach full resolution, got {}",
                self.levels() + 1,
                self.decoder_layer_channels.len()
            )));
        }
        let all = self.encoder_channels.iter().chain(&self.decoder_layer_channels);
        if self.structure_channels == 0 || self.texture_dim == 0 || all.into_iter().any(|&c| c == 0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.image_size < 16 || self.disc_channels == 0 || self.cooccur_channels == 0 {
            return Err(Error::Config("critics need image_size >= 16 and positive widths".into()));
        }
        Ok(())
    }

    /// Decoder schedule including the final RGB layer.
    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let levels = self.levels();
        let mut res = self.structure_size();
        let mut cin = self.structure_channels;
        let mut specs = Vec::new();
        for (i, &c) in self.decoder_layer_channels.iter().enumerate() {
            let upsample = (1..=levels).contains(&i);
            if upsample {
                res *= 2;
            }
            specs.push(LayerSpec { in_channels: cin, out_channels: c, kernel: 3, upsample, resolution: res });
            cin = c;
        }
        specs.push(LayerSpec { in_channels: cin, out_channels: 3, kernel: 1, upsample: false, resolution: res });
        specs
    }

    /// Number of decoder layers, counting the RGB layer.
    pub fn depth(&self) -> usize {
        self.decoder_layer_channels.len() + 1
    }

    /// The last-but-one layer: the final 3x3 layer before RGB.
    pub fn default_injection_layer(&self) -> usize {
        self.depth() - 2
    }
}

/// Structure and texture codes of a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode<T> {
    /// `[B, C_s, H/f, W/f]`.
    pub structure: Tensor<T>,
    /// `[B, D, 1, 1]`.
    pub texture: Tensor<T>,
}

impl<T: Scalar> LatentCode<T> {
    pub fn batch(&self) -> usize {
        self.structure.shape()[0]
    }

    pub fn is_finite(&self) -> bool {
        self.structure.all_finite() && self.texture.all_finite()
    }
}

/// Per-layer spatial style maps replacing the broadcast texture code.
pub type StyleOverrides<T> = BTreeMap<usize, Tensor<T>>;

#[derive(Clone, Debug)]
pub struct Sae<T> {
    pub config: SaeConfig,
    pub seed: u64,
    pub generator: ParamStore<T>,
    pub discriminator: ParamStore<T>,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub image_disc: ImageDiscriminator,
    pub cooccur_disc: CooccurDiscriminator,
    pub training: Option<SaeTrainState<T>>,
}

impl<T: Scalar> Sae<T> {
    pub fn new(config: &SaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = derive_rng(seed, purpose::INIT, 200);
        let mut generator = ParamStore::new();
        let encoder =
            Encoder::new(&mut generator, &config.encoder_channels, config.structure_channels, config.texture_dim, &mut rng);
        let decoder = Decoder::new(&mut generator, &config.layer_specs(), config.texture_dim, config.use_demodulation, &mut rng);
        let mut discriminator = ParamStore::new();
        let image_disc = ImageDiscriminator::new(&mut discriminator, config.image_size, config.disc_channels, &mut rng);
        let cooccur_disc =
            CooccurDiscriminator::new(&mut discriminator, config.image_size / 4, config.cooccur_channels, &mut rng);
        Ok(Self {
            config: config.clone(),
            seed,
            generator,
            discriminator,
            encoder,
            decoder,
            image_disc,
            cooccur_disc,
            training: None,
        })
    }

    pub fn depth(&self) -> usize {
        self.decoder.specs.len()
    }

    pub fn layer_resolution(&self, layer: usize) -> Result<usize> {
        self.decoder
            .specs
            .get(layer)
            .map(|s| s.resolution)
            .ok_or(Error::InvalidLayer { layer, max: self.depth() - 1 })
    }

    pub fn check_image(&self, image: &Tensor<T>) -> Result<()> {
        let s = self.config.image_size;
        match image.shape() {
            [_, 3, h, w] if *h == s && *w == s => Ok(()),
            other => Err(Error::shape("SAE input", &[other.first().copied().unwrap_or(1), 3, s, s], other)),
        }
    }

    fn check_code(&self, code: &LatentCode<T>) -> Result<()> {
        let b = code.batch();
        let n = self.config.structure_size();
        if code.structure.shape() != [b, self.config.structure_channels, n, n] {
            return Err(Error::shape("structure code", &[b, self.config.structure_channels, n, n], code.structure.shape()));
        }
        if code.texture.shape() != [b, self.config.texture_dim, 1, 1] {
            return Err(Error::shape("texture code", &[b, self.config.texture_dim, 1, 1], code.texture.shape()));
        }
        Ok(())
    }

    pub fn encode(&self, image: &Tensor<T>) -> Result<LatentCode<T>> {
        self.check_image(image)?;
        let g = Graph::new();
        let p = self.generator.bind(&g, false);
        let (s, t) = self.encoder.forward(&p, g.constant(image.clone()));
        Ok(LatentCode { structure: (*s.value()).clone(), texture: (*t.value()).clone() })
    }

    /// Decodes a code; layers listed in `overrides` use the given style map instead of the broadcast.
    pub fn decode(&self, code: &LatentCode<T>, overrides: Option<&StyleOverrides<T>>) -> Result<Tensor<T>> {
        self.check_code(code)?;
        let mut deltas = StyleOverrides::new();
        for (&layer, map) in overrides.into_iter().flatten() {
            self.check_style_map(code, layer, map)?;
            let res = map.shape()[2];
            // Offset from the broadcast code; exactly zero wherever the map is unperturbed.
            let delta = Tensor::from_fn(map.shape(), |i| map.data()[i] - code.texture.data()[i / (res * res)]);
            deltas.insert(layer, delta);
        }
        self.decode_with_deltas(code, &deltas)
    }

    /// Decodes with `deltas[layer]` added to the broadcast texture code at that layer.
    pub fn decode_with_deltas(&self, code: &LatentCode<T>, deltas: &StyleOverrides<T>) -> Result<Tensor<T>> {
        self.check_code(code)?;
        let g = Graph::new();
        let p = self.generator.bind(&g, false);
        let mut ov = BTreeMap::new();
        for (&layer, delta) in deltas {
            self.check_style_map(code, layer, delta)?;
            ov.insert(layer, g.constant(delta.clone()));
        }
        let y = self.decoder.forward(&p, g.constant(code.structure.clone()), g.constant(code.texture.clone()), &ov);
        Ok((*y.value()).clone())
    }

    fn check_style_map(&self, code: &LatentCode<T>, layer: usize, map: &Tensor<T>) -> Result<()> {
        let res = self.layer_resolution(layer)?;
        let expected = [code.batch(), self.config.texture_dim, res, res];
        if map.shape() != expected {
            return Err(Error::shape(format!("style override for decoder layer {layer}"), &expected, map.shape()));
        }
        Ok(())
    }

    /// `decode(encode(image))`.
    pub fn reconstruct(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let code = self.encode(image)?;
        self.decode(&code, None)
    }

    /// Decodes the structure of `a` with the texture of `b`.
    pub fn swap_generate(&self, a: &LatentCode<T>, b: &LatentCode<T>) -> Result<Tensor<T>> {
        self.check_code(a)?;
        self.check_code(b)?;
        if a.batch() != b.batch() {
            return Err(Error::Invalid(format!("swap needs equal batches, got {} and {}", a.batch(), b.batch())));
        }
        self.decode(&LatentCode { structure: a.structure.clone(), texture: b.texture.clone() }, None)
    }

    /// Writes generator weights (and, when training, the critics plus both optimizers).
    pub fn save(&self, dir: &Path, stem: &str, metrics: BTreeMap<String, f64>) -> Result<PathBuf> {
        let step = self.training.as_ref().map_or(0, |t| t.step);
        let mut m = Manifest::new::<T>("sae", self.config.clone(), step, self.seed);
        m.metrics = metrics;
        let opt = self.training.as_ref().map(|t| &t.g_opt);
        let path = checkpoint::save(dir, stem, m.clone(), &self.generator, opt)?;
        let dm = Manifest::new::<T>("sae_critics", self.config.clone(), step, self.seed);
        checkpoint::save(dir, &format!("{stem}.critics"), dm, &self.discriminator, self.training.as_ref().map(|t| &t.d_opt))?;
        Ok(path)
    }

    /// Loads a checkpoint written by [`Sae::save`]. With `resume`, optimizer
    /// state is restored so training continues exactly where it stopped.
    pub fn load(manifest_path: &Path, resume: bool) -> Result<Self> {
        let m: Manifest<SaeConfig> = checkpoint::read_manifest(manifest_path)?;
        let mut sae = Self::new(&m.config, m.seed)?;
        checkpoint::load_weights(manifest_path, &m, &mut sae.generator)?;
        let critics = critics_path(manifest_path);
        let dm: Manifest<SaeConfig> = checkpoint::read_manifest(&critics)?;
        checkpoint::load_weights(&critics, &dm, &mut sae.discriminator)?;
        if resume {
            let mut state = SaeTrainState::new(&sae, &SaeTrainOptions::default());
            checkpoint::load_optimizer(manifest_path, &m, &sae.generator, &mut state.g_opt, m.step)?;
            checkpoint::load_optimizer(&critics, &dm, &sae.discriminator, &mut state.d_opt, m.step)?;
            state.step = m.step;
            sae.training = Some(state);
        }
        Ok(sae)
    }
}

fn critics_path(manifest_path: &Path) -> PathBuf {
    let stem = manifest_path.file_stem().and_then(|s| s.to_str()).unwrap_or("sae");
    manifest_path.with_file_name(format!("{stem}.critics.json"))
}

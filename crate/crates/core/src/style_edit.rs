//! Localized style editing: broadcast the texture code over a decoder layer,
//! add ROI-masked Gaussian noise to it, and decode.
//!
//! `S'_t = S_t + sigma * n ⊙ M`, with `n` standard normal per channel and
//! spatial site and `M` the ROI mask at the layer's resolution.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use ssae_tensor::{Scalar, Tensor};

use crate::error::{Error, Result};
use crate::roi::RoiLabel;
use crate::sae::{LatentCode, Sae, StyleOverrides};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub seed: u64,
    /// Scale on the standard normal draw; 1 is the unscaled edit.
    pub strength: f64,
    /// Draw one value per channel and reuse it at every site.
    #[serde(default)]
    pub per_channel_only: bool,
}

impl NoiseSpec {
    pub fn new(seed: u64, strength: f64) -> Self {
        Self { seed, strength, per_channel_only: false }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.strength >= 0.0 && self.strength.is_finite()) {
            return Err(Error::Invalid(format!("noise strength must be finite and >= 0, got {}", self.strength)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    #[default]
    Predicted,
    GroundTruth,
    UserSupplied,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Area average, values in `[0, 1]`.
    #[default]
    Soft,
    /// Area average thresholded at 0.5.
    Hard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditSpec {
    pub roi: RoiLabel,
    pub seed: u64,
    pub strength: f64,
    /// Decoder layer receiving the noise; `None` means the last-but-one layer.
    #[serde(default)]
    pub injection_layer: Option<usize>,
    #[serde(default)]
    pub refine: bool,
    #[serde(default)]
    pub mask_source: MaskSource,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub per_channel_noise: bool,
}

impl EditSpec {
    pub fn new(roi: RoiLabel, seed: u64, strength: f64) -> Self {
        Self {
            roi,
            seed,
            strength,
            injection_layer: None,
            refine: false,
            mask_source: MaskSource::Predicted,
            per_channel_noise: false,
        }
    }

    pub fn noise(&self) -> NoiseSpec {
        NoiseSpec { seed: self.seed, strength: self.strength, per_channel_only: self.per_channel_noise }
    }
}

/// Copies `S_t` (`[B, D, 1, 1]` or `[B, D]`) to every site of an `h x w` grid.
pub fn broadcast_style<T: Scalar>(texture: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    if h == 0 || w == 0 {
        return Err(Error::Invalid(format!("broadcast target {h}x{w} must be at least 1x1")));
    }
    let (b, d) = match texture.shape() {
        [b, d] | [b, d, 1, 1] => (*b, *d),
        other => return Err(Error::shape("texture code", &[1, other.get(1).copied().unwrap_or(1), 1, 1], other)),
    };
    Ok(Tensor::from_fn(&[b, d, h, w], |i| texture.data()[i / (h * w)]))
}

/// Exact area-overlap weights mapping `n` source cells onto `m` target cells.
fn area_weights(n: usize, m: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n as f64 / m as f64;
    (0..m)
        .map(|i| {
            let (lo, hi) = (i as f64 * scale, (i + 1) as f64 * scale);
            (lo.floor() as usize..(hi.ceil() as usize).min(n))
                .filter_map(|j| {
                    let overlap = (hi.min((j + 1) as f64) - lo.max(j as f64)).max(0.0);
                    (overlap > 0.0).then_some((j, overlap / scale))
                })
                .collect()
        })
        .collect()
}

/// Area-averages an `H x W` mask onto an `h x w` grid; `Hard` then thresholds at 0.5.
pub fn resize_mask_to_layer<T: Scalar>(mask: &Tensor<T>, h: usize, w: usize, mode: MaskMode) -> Result<Tensor<T>> {
    let [mh, mw] = *mask.shape() else {
        return Err(Error::shape("mask", &[h, w], mask.shape()));
    };
    if h == 0 || w == 0 {
        return Err(Error::Invalid(format!("mask target {h}x{w} must be at least 1x1")));
    }
    let (ry, rx) = (area_weights(mh, h), area_weights(mw, w));
    let out = Tensor::from_fn(&[h, w], |k| {
        let (i, j) = (k / w, k % w);
        let mut acc = 0.0;
        for &(y, wy) in &ry[i] {
            for &(x, wx) in &rx[j] {
                acc += wy * wx * mask.data()[y * mw + x].as_f64();
            }
        }
        let v = acc.clamp(0.0, 1.0);
        T::lit(match mode {
            MaskMode::Soft => v,
            MaskMode::Hard => (v >= 0.5) as u8 as f64,
        })
    });
    Ok(out)
}

/// Source of the noise draws: `ChaCha8Rng::seed_from_u64(seed)`. Site
/// `(b, i, j)` of an `h x w` map reads its `C` channel draws, in channel
/// order, from stream `(b * h + i) * w + j`, so sites are independent and
/// only masked ones need drawing. With `per_channel_only`, the `B x C`
/// draws come from stream `u64::MAX` and repeat over the sites.
struct NoiseSource {
    base: ChaCha8Rng,
    per_channel: Option<Vec<f64>>,
}

impl NoiseSource {
    fn new(seed: u64, b: usize, c: usize, per_channel_only: bool) -> Self {
        let base = ChaCha8Rng::seed_from_u64(seed);
        let per_channel = per_channel_only.then(|| {
            let mut rng = base.clone();
            rng.set_stream(u64::MAX);
            (0..b * c).map(|_| rng.sample(StandardNormal)).collect()
        });
        Self { base, per_channel }
    }

    /// Fills `out` with the channel draws of one site.
    fn site(&self, b: usize, site: u64, out: &mut [f64]) {
        match &self.per_channel {
            Some(draws) => out.copy_from_slice(&draws[b * out.len()..(b + 1) * out.len()]),
            None => {
                let mut rng = self.base.clone();
                rng.set_stream(site);
                for v in out.iter_mut() {
                    *v = rng.sample(StandardNormal);
                }
            }
        }
    }
}

/// The full noise field of a `[B, C, h, w]` style map, row-major over `(b, c, i, j)`.
pub fn noise_field(shape: &[usize], seed: u64, per_channel_only: bool) -> Vec<f64> {
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let src = NoiseSource::new(seed, b, c, per_channel_only);
    let mut out = vec![0.0; b * c * h * w];
    let mut draws = vec![0.0; c];
    for bi in 0..b {
        for site in 0..h * w {
            src.site(bi, (bi * h * w + site) as u64, &mut draws);
            for (ci, &v) in draws.iter().enumerate() {
                out[(bi * c + ci) * h * w + site] = v;
            }
        }
    }
    out
}

/// Calls `f(index, n)` for every element of a `[B, C, h, w]` map whose site
/// has a nonzero mask value, `n` being its draw.
///
/// Sites are drawn in runs and handed over channel by channel, so writes
/// into a channel-major map stay contiguous.
fn for_masked_draws<T: Scalar>(shape: (usize, usize, usize, usize), mask: &Tensor<T>, noise: &NoiseSpec, mut f: impl FnMut(usize, f64)) {
    const RUN: usize = 64;
    let (b, c, h, w) = shape;
    let plane = h * w;
    let src = NoiseSource::new(noise.seed, b, c, noise.per_channel_only);
    let mut draws = vec![0.0; RUN * c];
    let mut sites = Vec::with_capacity(RUN);
    for bi in 0..b {
        for start in (0..plane).step_by(RUN) {
            sites.clear();
            sites.extend((start..(start + RUN).min(plane)).filter(|&s| mask.data()[s] != T::zero()));
            for (k, &site) in sites.iter().enumerate() {
                src.site(bi, (bi * plane + site) as u64, &mut draws[k * c..(k + 1) * c]);
            }
            for ci in 0..c {
                for (k, &site) in sites.iter().enumerate() {
                    f((bi * c + ci) * plane + site, draws[k * c + ci]);
                }
            }
        }
    }
}

fn check_injection<T: Scalar>(h: usize, w: usize, mask: &Tensor<T>, noise: &NoiseSpec) -> Result<()> {
    noise.validate()?;
    if mask.shape() != [h, w] {
        return Err(Error::shape("layer mask", &[h, w], mask.shape()));
    }
    Ok(())
}

/// `S' = S + sigma * n ⊙ M`; sites with `M = 0` are returned bit-identical.
pub fn inject_noise<T: Scalar>(style: &Tensor<T>, mask: &Tensor<T>, noise: &NoiseSpec) -> Result<Tensor<T>> {
    let (b, c, h, w) = style.dims4();
    check_injection(h, w, mask, noise)?;
    let mut out = style.clone();
    if noise.strength == 0.0 {
        return Ok(out);
    }
    let sigma = T::lit(noise.strength);
    let plane = h * w;
    let data = out.data_mut();
    for_masked_draws((b, c, h, w), mask, noise, |i, n| data[i] += sigma * T::lit(n) * mask.data()[i % plane]);
    Ok(out)
}

/// `inject_noise(broadcast_style(texture, h, w), ..) - broadcast_style(texture, h, w)`
/// without materializing either map: exactly zero wherever the mask is.
pub fn noise_delta<T: Scalar>(texture: &Tensor<T>, mask: &Tensor<T>, noise: &NoiseSpec) -> Result<Tensor<T>> {
    let [h, w] = *mask.shape() else {
        return Err(Error::shape("layer mask", &[1, 1], mask.shape()));
    };
    let (b, c) = match texture.shape() {
        [b, c] | [b, c, 1, 1] => (*b, *c),
        other => return Err(Error::shape("texture code", &[1, other.get(1).copied().unwrap_or(1), 1, 1], other)),
    };
    check_injection(h, w, mask, noise)?;
    let mut out = Tensor::zeros(&[b, c, h, w]);
    if noise.strength == 0.0 {
        return Ok(out);
    }
    let sigma = T::lit(noise.strength);
    let plane = h * w;
    let data = out.data_mut();
    for_masked_draws((b, c, h, w), mask, noise, |i, n| {
        let t = texture.data()[i / plane];
        data[i] = (t + sigma * T::lit(n) * mask.data()[i % plane]) - t;
    });
    Ok(out)
}

/// Output-pixel radius over which a change at one site of `layer` can spread:
/// `sum_{j >= layer} (k_j - 1) / 2 * (image_size / res_j)`.
pub fn receptive_field_after<T: Scalar>(sae: &Sae<T>, layer: usize) -> Result<usize> {
    let specs = &sae.decoder.specs;
    if layer >= specs.len() {
        return Err(Error::InvalidLayer { layer, max: specs.len() - 1 });
    }
    let size = sae.config.image_size;
    Ok(specs[layer..].iter().map(|s| (s.kernel - 1) / 2 * (size / s.resolution)).sum())
}

/// Output pixels a masked edit may touch: the support of the layer mask,
/// upsampled to the image, dilated by `radius` (Chebyshev distance).
pub fn locality_envelope<T: Scalar>(layer_mask: &Tensor<T>, image_size: usize, radius: usize) -> Vec<bool> {
    let [h, w] = *layer_mask.shape() else { panic!("layer mask must be 2-D") };
    let (fy, fx) = (image_size / h, image_size / w);
    let mut env = vec![false; image_size * image_size];
    for i in 0..h {
        for j in 0..w {
            if layer_mask.data()[i * w + j] == T::zero() {
                continue;
            }
            let y0 = (i * fy).saturating_sub(radius);
            let y1 = ((i + 1) * fy + radius).min(image_size);
            let x0 = (j * fx).saturating_sub(radius);
            let x1 = ((j + 1) * fx + radius).min(image_size);
            for y in y0..y1 {
                env[y * image_size + x0..y * image_size + x1].fill(true);
            }
        }
    }
    env
}

/// Clean reconstruction and noised decode of one edit.
#[derive(Clone, Debug)]
pub struct CoarseEdit<T> {
    pub y_sae: Tensor<T>,
    pub y_noised: Tensor<T>,
    pub layer: usize,
    pub layer_mask: Tensor<T>,
}

fn resolve_layer<T: Scalar>(sae: &Sae<T>, spec: &EditSpec) -> Result<usize> {
    let layer = spec.injection_layer.unwrap_or(sae.config.default_injection_layer());
    sae.layer_resolution(layer)?;
    Ok(layer)
}

fn check_mask<T: Scalar>(sae: &Sae<T>, mask: &Tensor<T>) -> Result<()> {
    let s = sae.config.image_size;
    if mask.shape() != [s, s] {
        return Err(Error::shape("edit mask", &[s, s], mask.shape()));
    }
    Ok(())
}

/// Style override that puts the noised map at the injection layer.
pub fn noised_overrides<T: Scalar>(
    sae: &Sae<T>,
    code: &LatentCode<T>,
    mask: &Tensor<T>,
    spec: &EditSpec,
    mode: MaskMode,
) -> Result<(usize, Tensor<T>, StyleOverrides<T>)> {
    check_mask(sae, mask)?;
    let layer = resolve_layer(sae, spec)?;
    let res = sae.layer_resolution(layer)?;
    let layer_mask = resize_mask_to_layer(mask, res, res, mode)?;
    let style = broadcast_style(&code.texture, res, res)?;
    let noised = inject_noise(&style, &layer_mask, &spec.noise())?;
    Ok((layer, layer_mask, BTreeMap::from([(layer, noised)])))
}

/// The same edit as [`noised_overrides`], as an offset from the broadcast
/// code, which is what the decoder consumes.
pub fn noised_deltas<T: Scalar>(
    sae: &Sae<T>,
    code: &LatentCode<T>,
    mask: &Tensor<T>,
    spec: &EditSpec,
    mode: MaskMode,
) -> Result<(usize, Tensor<T>, StyleOverrides<T>)> {
    check_mask(sae, mask)?;
    let layer = resolve_layer(sae, spec)?;
    let res = sae.layer_resolution(layer)?;
    let layer_mask = resize_mask_to_layer(mask, res, res, mode)?;
    let delta = noise_delta(&code.texture, &layer_mask, &spec.noise())?;
    Ok((layer, layer_mask, BTreeMap::from([(layer, delta)])))
}

/// `Y_SAE = decode(encode(x))` and `Y^N_SAE`, the decode with the noised
/// style at the injection layer and the plain broadcast everywhere else.
pub fn edit_image<T: Scalar>(
    sae: &Sae<T>,
    image: &Tensor<T>,
    mask: &Tensor<T>,
    spec: &EditSpec,
    mode: MaskMode,
) -> Result<CoarseEdit<T>> {
    let code = sae.encode(image)?;
    let (layer, layer_mask, deltas) = noised_deltas(sae, &code, mask, spec, mode)?;
    let y_sae = sae.decode(&code, None)?;
    let y_noised = sae.decode_with_deltas(&code, &deltas)?;
    Ok(CoarseEdit { y_sae, y_noised, layer, layer_mask })
}

/// Only `Y^N_SAE`: one encode and one decode.
pub fn edit_noised_only<T: Scalar>(
    sae: &Sae<T>,
    image: &Tensor<T>,
    mask: &Tensor<T>,
    spec: &EditSpec,
    mode: MaskMode,
) -> Result<Tensor<T>> {
    let code = sae.encode(image)?;
    let (_, _, deltas) = noised_deltas(sae, &code, mask, spec, mode)?;
    sae.decode_with_deltas(&code, &deltas)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::make_synthetic_dataset;
    use crate::sae::SaeConfig;
    use proptest::prelude::*;

    #[test]
    fn broadcast_examples() {
        let t = Tensor::<f64>::new(&[1, 2], vec![1.0, 2.0]);
        let b = broadcast_style(&t, 2, 2).unwrap();
        assert_eq!(b.data(), &[1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]);
        let t4 = Tensor::<f64>::new(&[1, 3, 1, 1], vec![4.0, 5.0, 6.0]);
        assert_eq!(broadcast_style(&t4, 1, 1).unwrap(), t4);
        assert!(broadcast_style(&t4, 0, 2).is_err());
    }

    #[test]
    fn resize_examples() {
        let ones = Tensor::<f64>::ones(&[8, 8]);
        for n in [1, 2, 3, 4, 8, 16] {
            assert!(resize_mask_to_layer(&ones, n, n, MaskMode::Soft).unwrap().data().iter().all(|&v| v == 1.0));
        }
        let mut m = Tensor::<f64>::zeros(&[4, 4]);
        m.data_mut()[0] = 1.0;
        assert_eq!(resize_mask_to_layer(&m, 2, 2, MaskMode::Soft).unwrap().data(), &[0.25, 0.0, 0.0, 0.0]);
        assert_eq!(resize_mask_to_layer(&m, 2, 2, MaskMode::Hard).unwrap().data(), &[0.0; 4]);
    }

    #[test]
    fn inject_example_against_seeded_oracle() {
        let s = Tensor::<f64>::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let m = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 0.0]);
        let nu: f64 = rand::Rng::sample(&mut ChaCha8Rng::seed_from_u64(42), StandardNormal);
        let out = inject_noise(&s, &m, &NoiseSpec::new(42, 1.0)).unwrap();
        assert_eq!(out.data(), &[1.0 + nu, 2.0, 3.0, 4.0]);
        assert_eq!(inject_noise(&s, &Tensor::zeros(&[2, 2]), &NoiseSpec::new(42, 1.0)).unwrap(), s);
        assert_eq!(inject_noise(&s, &m, &NoiseSpec::new(42, 0.0)).unwrap(), s);
        assert!(inject_noise(&s, &Tensor::zeros(&[3, 2]), &NoiseSpec::new(1, 1.0)).is_err());
        assert!(inject_noise(&s, &m, &NoiseSpec::new(1, -1.0)).is_err());
    }

    #[test]
    fn per_channel_noise_is_spatially_constant() {
        let n = noise_field(&[2, 3, 4, 4], 9, true);
        for plane in n.chunks(16) {
            assert!(plane.iter().all(|&v| v == plane[0]));
        }
    }

    proptest! {
        #[test]
        fn unmasked_sites_bit_identical(seed in any::<u64>(), bits in proptest::collection::vec(any::<bool>(), 16), sigma in 0.0f64..3.0) {
            let style = Tensor::<f32>::from_fn(&[2, 3, 4, 4], |i| (i as f32 * 0.37).sin());
            let mask = Tensor::new(&[4, 4], bits.iter().map(|&b| b as u8 as f32).collect());
            let out = inject_noise(&style, &mask, &NoiseSpec::new(seed, sigma)).unwrap();
            for i in 0..style.len() {
                if !bits[i % 16] {
                    prop_assert_eq!(out.data()[i].to_bits(), style.data()[i].to_bits());
                }
            }
        }
    }

    #[test]
    fn sites_draw_from_their_own_stream() {
        let n = noise_field(&[2, 3, 2, 2], 7, false);
        for (b, i, j) in [(0, 0, 0), (0, 1, 0), (1, 1, 1)] {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            rng.set_stream(((b * 2 + i) * 2 + j) as u64);
            for c in 0..3 {
                let v: f64 = rand::Rng::sample(&mut rng, StandardNormal);
                assert_eq!(n[((b * 3 + c) * 2 + i) * 2 + j], v);
            }
        }
    }

    proptest! {
        #[test]
        fn delta_is_noised_minus_broadcast(seed in any::<u64>(), bits in proptest::collection::vec(0u8..3, 9), per_channel in any::<bool>()) {
            let texture = Tensor::<f32>::from_fn(&[2, 4, 1, 1], |i| (i as f32 * 0.71).cos());
            let mask = Tensor::new(&[3, 3], bits.iter().map(|&b| b as f32 / 2.0).collect());
            let noise = NoiseSpec { per_channel_only: per_channel, ..NoiseSpec::new(seed, 1.5) };
            let style = broadcast_style(&texture, 3, 3).unwrap();
            let noised = inject_noise(&style, &mask, &noise).unwrap();
            let delta = noise_delta(&texture, &mask, &noise).unwrap();
            for i in 0..style.len() {
                prop_assert_eq!(delta.data()[i].to_bits(), (noised.data()[i] - style.data()[i]).to_bits());
            }
        }
    }

    #[test]
    fn delta_decode_matches_override_decode() {
        let sae = Sae::<f32>::new(&SaeConfig::micro(), 1).unwrap();
        let x = make_synthetic_dataset(1, 32, 4)[0].batch();
        let mask = Tensor::from_fn(&[32, 32], |k| (k % 32 < 12) as u8 as f32);
        let spec = EditSpec::new(RoiLabel::Skin, 8, 1.0);
        let code = sae.encode(&x).unwrap();
        let (_, _, ov) = noised_overrides(&sae, &code, &mask, &spec, MaskMode::Soft).unwrap();
        let (_, _, deltas) = noised_deltas(&sae, &code, &mask, &spec, MaskMode::Soft).unwrap();
        assert!(sae.decode(&code, Some(&ov)).unwrap().bit_eq(&sae.decode_with_deltas(&code, &deltas).unwrap()));
    }

    #[test]
    fn receptive_field_examples() {
        let sae = Sae::<f32>::new(&SaeConfig::toy(), 0).unwrap();
        let depth = sae.depth();
        assert_eq!(receptive_field_after(&sae, depth - 1).unwrap(), 0);
        assert_eq!(receptive_field_after(&sae, depth - 2).unwrap(), 1);
        // Layers 4, 5 at 64, layer 3 at 32 (one 3x3 conv = 2 output pixels).
        assert_eq!(receptive_field_after(&sae, 3).unwrap(), 4);
        assert!(matches!(receptive_field_after(&sae, depth), Err(Error::InvalidLayer { .. })));
    }

    #[test]
    fn zero_mask_edit_is_reconstruction_and_layer_checked() {
        let sae = Sae::<f32>::new(&SaeConfig::micro(), 0).unwrap();
        let x = make_synthetic_dataset(1, 32, 0)[0].batch();
        let spec = EditSpec::new(RoiLabel::Hair, 3, 1.0);
        let e = edit_image(&sae, &x, &Tensor::zeros(&[32, 32]), &spec, MaskMode::Soft).unwrap();
        assert!(e.y_noised.bit_eq(&e.y_sae));
        let bad = EditSpec { injection_layer: Some(sae.depth()), ..spec };
        match edit_image(&sae, &x, &Tensor::ones(&[32, 32]), &bad, MaskMode::Soft) {
            Err(Error::InvalidLayer { max, .. }) => assert_eq!(max, sae.depth() - 1),
            other => panic!("{other:?}"),
        }
    }

    fn changed_pixels(a: &Tensor<f64>, b: &Tensor<f64>, s: usize) -> Vec<bool> {
        let mut out = vec![false; s * s];
        for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
            if x.to_bits() != y.to_bits() {
                out[i % (s * s)] = true;
            }
        }
        out
    }

    #[test]
    fn edits_stay_inside_receptive_envelope() {
        let sae = Sae::<f64>::new(&SaeConfig::micro(), 4).unwrap();
        let s = sae.config.image_size;
        let x = make_synthetic_dataset(1, s, 1)[0].batch().cast::<f64>();
        let mut rng = crate::rng::derive_rng(11, 0, 0);
        for layer in 1..sae.depth() {
            let radius = receptive_field_after(&sae, layer).unwrap();
            let res = sae.layer_resolution(layer).unwrap();
            for case in 0..3u64 {
                let mask = Tensor::from_fn(&[s, s], |_| (rand::Rng::random::<f64>(&mut rng) < 0.05) as u8 as f64);
                let spec = EditSpec { injection_layer: Some(layer), ..EditSpec::new(RoiLabel::Hair, case, 2.0) };
                let e = edit_image(&sae, &x, &mask, &spec, MaskMode::Hard).unwrap();
                let env = locality_envelope(&e.layer_mask, s, radius);
                let changed = changed_pixels(&e.y_sae, &e.y_noised, s);
                assert!(changed.iter().zip(&env).all(|(&c, &inside)| !c || inside), "layer {layer} res {res}");
            }
            // One site in the middle: the change reaches the envelope's edge.
            let mut layer_mask = Tensor::zeros(&[res, res]);
            layer_mask.data_mut()[(res / 2) * res + res / 2] = 1.0;
            let code = sae.encode(&x).unwrap();
            let style = broadcast_style(&code.texture, res, res).unwrap();
            let noised = inject_noise(&style, &layer_mask, &NoiseSpec::new(5, 2.0)).unwrap();
            let y0 = sae.decode(&code, None).unwrap();
            let y1 = sae.decode(&code, Some(&BTreeMap::from([(layer, noised)]))).unwrap();
            let changed = changed_pixels(&y0, &y1, s);
            let f = s / res;
            let (lo, hi) = ((res / 2) * f, (res / 2 + 1) * f - 1);
            let reach = (0..s * s)
                .filter(|&k| changed[k])
                .map(|k| {
                    let d = |v: usize| if v < lo { lo - v } else { v.saturating_sub(hi) };
                    d(k / s).max(d(k % s))
                })
                .max()
                .unwrap();
            assert_eq!(reach, radius, "layer {layer}");
        }
    }

    #[test]
    fn edit_spec_json_fields() {
        let spec = EditSpec::new(RoiLabel::Eyes, 7, 1.0);
        let v: serde_json::Value = serde_json::to_value(&spec).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(keys, ["injection_layer", "mask_source", "refine", "roi", "seed", "strength"]);
        assert_eq!(serde_json::from_value::<EditSpec>(v).unwrap(), spec);
    }
}

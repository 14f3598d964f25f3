//! Convolution modulated per pixel by a spatial style map.

use rand::Rng;
use ssae_tensor::{Bound, Conv2d, Graph, ParamId, ParamStore, Scalar, Tensor, Var};

use crate::error::{Error, Result};

const DEMOD_EPS: f64 = 1e-8;

/// `conv(x * scales, W)`, optionally divided per pixel by
/// `sqrt(sum_i scales_i^2 * sum_k W_oik^2 + eps)`.
///
/// `scales` has the input's shape; it is what the style projection produced.
pub fn modulate_var<'g, T: Scalar>(
    x: Var<'g, T>,
    scales: Var<'g, T>,
    weight: Var<'g, T>,
    demodulate: bool,
) -> Var<'g, T> {
    let g = x.graph();
    let pad = weight.shape()[2] / 2;
    let y = g.conv2d(x * scales, weight, None, 1, pad);
    if !demodulate {
        return y;
    }
    let norm = g.conv2d(scales.square(), weight.kernel_sq_sum(), None, 1, 0);
    y * norm.add_scalar(T::lit(DEMOD_EPS)).powf(T::lit(-0.5))
}

/// Tensor-level modulated convolution.
///
/// The style map is projected to per-input-channel scales by a 1x1
/// convolution (`proj_weight [C_in, C_style, 1, 1]`, `proj_bias [C_in]`),
/// which must share the features' spatial size.
pub fn modulated_conv<T: Scalar>(
    features: &Tensor<T>,
    style_map: &Tensor<T>,
    proj_weight: &Tensor<T>,
    proj_bias: &Tensor<T>,
    weight: &Tensor<T>,
    demodulate: bool,
) -> Result<Tensor<T>> {
    let (b, c, h, w) = features.dims4();
    let (sb, sc, sh, sw) = style_map.dims4();
    if (sb, sh, sw) != (b, h, w) {
        return Err(Error::shape("style map", &[b, sc, h, w], style_map.shape()));
    }
    if weight.shape()[1] != c || proj_weight.shape()[0] != c || proj_weight.shape()[1] != sc {
        return Err(Error::Invalid(format!(
            "modulated_conv: features have {c} channels, style {sc}, projection {:?}, weight {:?}",
            proj_weight.shape(),
            weight.shape()
        )));
    }
    let g = Graph::new();
    let scales = g.conv2d(g.constant(style_map.clone()), g.constant(proj_weight.clone()), Some(g.constant(proj_bias.clone())), 1, 0);
    let out = modulate_var(g.constant(features.clone()), scales, g.constant(weight.clone()), demodulate);
    Ok((*out.value()).clone())
}

/// A modulated convolution layer with its style projection and output bias.
#[derive(Clone, Debug)]
pub struct ModConv {
    pub projection: Conv2d,
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub demodulate: bool,
}

impl ModConv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        style_dim: usize,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        demodulate: bool,
        rng: &mut R,
    ) -> Self {
        let projection = Conv2d::with_gain(store, &format!("{name}.style"), style_dim, in_channels, 1, 1, true, 1.0, rng);
        // Scales start around one so the layer begins close to a plain convolution.
        store.set(projection.bias.expect("bias"), Tensor::ones(&[in_channels]));
        let fan_in = (in_channels * kernel * kernel) as f64;
        let gain = if demodulate { 2.0 } else { 1.0 };
        let w = Tensor::randn(&[out_channels, in_channels, kernel, kernel], (gain / fan_in).sqrt(), rng);
        let weight = store.add(format!("{name}.weight"), w);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]));
        Self { projection, weight, bias, in_channels, out_channels, kernel, demodulate }
    }

    /// Per-pixel input scales at resolution `res`: the projected texture
    /// code, broadcast, plus the projection of `delta` (a spatial style
    /// offset) where given. The projection is linear, so this equals
    /// projecting the offset style map itself.
    pub fn scales<'g, T: Scalar>(
        &self,
        p: &Bound<'g, T>,
        texture: Var<'g, T>,
        delta: Option<Var<'g, T>>,
        res: usize,
    ) -> Var<'g, T> {
        let base = self.projection.forward(p, texture).broadcast_hw(res, res);
        match delta {
            Some(d) => base + texture.graph().conv2d(d, p[self.projection.weight], None, 1, 0),
            None => base,
        }
    }

    /// Pre-activation output for features `x` given their per-pixel scales.
    pub fn forward<'g, T: Scalar>(&self, p: &Bound<'g, T>, x: Var<'g, T>, scales: Var<'g, T>) -> Var<'g, T> {
        modulate_var(x, scales, p[self.weight], self.demodulate).add_channel(p[self.bias])
    }
}

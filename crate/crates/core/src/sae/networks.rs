use std::collections::BTreeMap;

use rand::Rng;
use ssae_tensor::{Bound, Conv2d, Graph, ParamStore, Scalar, Var};

use super::modconv::ModConv;
use super::LayerSpec;

const SLOPE: f64 = 0.2;

fn lrelu<T: Scalar>(x: Var<'_, T>) -> Var<'_, T> {
    x.leaky_relu(T::lit(SLOPE))
}

/// Residual block halving the resolution.
#[derive(Clone, Debug)]
struct DownBlock {
    conv_a: Conv2d,
    conv_b: Conv2d,
    shortcut: Conv2d,
}

impl DownBlock {
    fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        Self {
            conv_a: Conv2d::new(store, &format!("{name}.conv_a"), cin, cout, 3, 2, true, rng),
            conv_b: Conv2d::with_gain(store, &format!("{name}.conv_b"), cout, cout, 3, 1, true, 0.5, rng),
            shortcut: Conv2d::with_gain(store, &format!("{name}.shortcut"), cin, cout, 1, 2, false, 1.0, rng),
        }
    }

    fn forward<'g, T: Scalar>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        let h = self.conv_b.forward(p, lrelu(self.conv_a.forward(p, x)));
        lrelu(h + self.shortcut.forward(p, x))
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    stem: Conv2d,
    blocks: Vec<DownBlock>,
    structure: Conv2d,
    texture_convs: Vec<Conv2d>,
    texture_out: Conv2d,
}

impl Encoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        channels: &[usize],
        structure_channels: usize,
        texture_dim: usize,
        rng: &mut R,
    ) -> Self {
        let stem = Conv2d::new(store, "encoder.stem", 3, channels[0], 3, 1, true, rng);
        let mut cin = channels[0];
        let blocks = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let b = DownBlock::new(store, &format!("encoder.down{i}"), cin, c, rng);
                cin = c;
                b
            })
            .collect();
        let structure = Conv2d::with_gain(store, "encoder.structure", cin, structure_channels, 1, 1, true, 1.0, rng);
        let texture_convs = (0..2)
            .map(|i| {
                let c = 2 * cin;
                let conv = Conv2d::new(store, &format!("encoder.texture{i}"), if i == 0 { cin } else { c }, c, 3, 2, true, rng);
                conv
            })
            .collect();
        let texture_out = Conv2d::with_gain(store, "encoder.texture_out", 2 * cin, texture_dim, 1, 1, true, 1.0, rng);
        Self { stem, blocks, structure, texture_convs, texture_out }
    }

    /// `(S_s [B, C_s, H/f, W/f], S_t [B, D, 1, 1])`.
    pub fn forward<'g, T: Scalar>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> (Var<'g, T>, Var<'g, T>) {
        let mut h = lrelu(self.stem.forward(p, x));
        for b in &self.blocks {
            h = b.forward(p, h);
        }
        let structure = self.structure.forward(p, h);
        let mut t = h;
        for c in &self.texture_convs {
            t = lrelu(c.forward(p, t));
        }
        let texture = self.texture_out.forward(p, t.mean_hw());
        (structure, texture)
    }
}

/// Stack of modulated convolutions ending in an RGB layer.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub specs: Vec<LayerSpec>,
    layers: Vec<ModConv>,
}

impl Decoder {
    /// The last spec is the RGB output layer (no activation, then tanh).
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        specs: &[LayerSpec],
        style_dim: usize,
        demodulate: bool,
        rng: &mut R,
    ) -> Self {
        let last = specs.len() - 1;
        let layers = specs
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let name = if i == last { "decoder.to_rgb".to_string() } else { format!("decoder.layer{i}") };
                ModConv::new(store, &name, style_dim, s.in_channels, s.out_channels, s.kernel, demodulate && i != last, rng)
            })
            .collect();
        Self { specs: specs.to_vec(), layers }
    }

    /// Decodes from the structure code and texture code `[B, D, 1, 1]`.
    ///
    /// `deltas` maps a layer index to a style offset `[B, D, res, res]` added
    /// to the broadcast texture code at that layer.
    pub fn forward<'g, T: Scalar>(
        &self,
        p: &Bound<'g, T>,
        structure: Var<'g, T>,
        texture: Var<'g, T>,
        deltas: &BTreeMap<usize, Var<'g, T>>,
    ) -> Var<'g, T> {
        let last = self.layers.len() - 1;
        let mut h = structure;
        for (i, (layer, spec)) in self.layers.iter().zip(&self.specs).enumerate() {
            if spec.upsample {
                h = h.upsample(2);
            }
            let scales = layer.scales(p, texture, deltas.get(&i).copied(), spec.resolution);
            let y = layer.forward(p, h, scales);
            h = if i == last { y.tanh() } else { lrelu(y) };
        }
        h
    }
}

/// Strided convolutional critic scoring whole images.
#[derive(Clone, Debug)]
pub struct ImageDiscriminator {
    stem: Conv2d,
    downs: Vec<Conv2d>,
    out: Conv2d,
}

fn strided_stack<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    name: &str,
    mut size: usize,
    stop: usize,
    base: usize,
    rng: &mut R,
) -> (Conv2d, Vec<Conv2d>, usize) {
    let stem = Conv2d::new(store, &format!("{name}.stem"), 3, base, 3, 1, true, rng);
    let mut c = base;
    let mut downs = Vec::new();
    let mut i = 0;
    while size > stop {
        let next = (2 * c).min(4 * base);
        downs.push(Conv2d::new(store, &format!("{name}.down{i}"), c, next, 3, 2, true, rng));
        c = next;
        size /= 2;
        i += 1;
    }
    (stem, downs, c)
}

impl ImageDiscriminator {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, image_size: usize, base: usize, rng: &mut R) -> Self {
        let (stem, downs, c) = strided_stack(store, "disc", image_size, 4, base, rng);
        let out = Conv2d::with_gain(store, "disc.out", c, 1, 1, 1, true, 1.0, rng);
        Self { stem, downs, out }
    }

    /// Logits `[B, 1, 1, 1]`.
    pub fn forward<'g, T: Scalar>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        let mut h = lrelu(self.stem.forward(p, x));
        for d in &self.downs {
            h = lrelu(d.forward(p, h));
        }
        self.out.forward(p, h.mean_hw())
    }
}

/// Judges whether a target patch shares texture statistics with a set of reference patches.
#[derive(Clone, Debug)]
pub struct CooccurDiscriminator {
    stem: Conv2d,
    downs: Vec<Conv2d>,
    hidden: Conv2d,
    out: Conv2d,
}

impl CooccurDiscriminator {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, patch_size: usize, base: usize, rng: &mut R) -> Self {
        let (stem, downs, c) = strided_stack(store, "cooccur", patch_size, 2, base, rng);
        let hidden = Conv2d::new(store, "cooccur.hidden", 2 * c, c, 1, 1, true, rng);
        let out = Conv2d::with_gain(store, "cooccur.out", c, 1, 1, 1, true, 1.0, rng);
        Self { stem, downs, hidden, out }
    }

    /// Patch features `[N, F, 1, 1]`.
    pub fn features<'g, T: Scalar>(&self, p: &Bound<'g, T>, patches: Var<'g, T>) -> Var<'g, T> {
        let mut h = lrelu(self.stem.forward(p, patches));
        for d in &self.downs {
            h = lrelu(d.forward(p, h));
        }
        h.mean_hw()
    }

    /// Logits `[B * k, 1, 1, 1]` for `B * k` target patches (grouped per image)
    /// against `B * r` reference patches (grouped per image).
    pub fn forward<'g, T: Scalar>(
        &self,
        p: &Bound<'g, T>,
        targets: Var<'g, T>,
        references: Var<'g, T>,
        per_image_targets: usize,
        per_image_refs: usize,
    ) -> Var<'g, T> {
        let g: &Graph<T> = targets.graph();
        let tf = self.features(p, targets);
        let rf = self.features(p, references);
        let images = rf.shape()[0] / per_image_refs;
        let mut mean = rf.select_batch(&(0..images).map(|b| b * per_image_refs).collect::<Vec<_>>());
        for k in 1..per_image_refs {
            mean = mean + rf.select_batch(&(0..images).map(|b| b * per_image_refs + k).collect::<Vec<_>>());
        }
        let mean = mean.scale(T::lit(1.0 / per_image_refs as f64));
        let paired = mean.select_batch(&(0..images * per_image_targets).map(|i| i / per_image_targets).collect::<Vec<_>>());
        let h = lrelu(self.hidden.forward(p, g.concat_channels(&[tf, paired])));
        self.out.forward(p, h)
    }
}

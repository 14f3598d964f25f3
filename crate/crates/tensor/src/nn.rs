//! Parameters, layers and the optimizer.

use std::ops::Index;
use std::sync::Arc;

use rand::Rng;

use crate::error::TensorError;
use crate::graph::{Graph, Gradients, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Arc<Tensor<T>>,
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(self.params.iter().all(|p| p.name != name), "duplicate parameter {name}");
        self.params.push(Param { name, value: Arc::new(value) });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) {
        assert_eq!(self.params[id.0].value.shape(), value.shape(), "set: shape change for {}", self.params[id.0].name);
        self.params[id.0].value = Arc::new(value);
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of scalar weights.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Registers every parameter on `graph`. Frozen bindings receive no gradients.
    pub fn bind<'g>(&self, graph: &'g Graph<T>, trainable: bool) -> Bound<'g, T> {
        Bound {
            vars: self.params.iter().map(|p| graph.leaf_shared(Arc::clone(&p.value), trainable)).collect(),
        }
    }

    /// Collects gradients for each parameter of a binding (zeros where absent).
    pub fn collect_grads(&self, bound: &Bound<'_, T>, grads: &Gradients<T>) -> Vec<Tensor<T>> {
        self.params
            .iter()
            .zip(&bound.vars)
            .map(|(p, v)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(p.value.shape())))
            .collect()
    }

    /// Serializes every parameter into the weight blob format.
    pub fn to_blob(&self) -> Vec<u8> {
        let entries: Vec<(&str, &Tensor<T>)> = self.params.iter().map(|p| (p.name.as_str(), &*p.value)).collect();
        crate::blob::encode(&entries)
    }

    /// Overwrites parameters from a blob; every parameter must be present with its shape.
    pub fn load_blob(&mut self, bytes: &[u8]) -> Result<(), TensorError> {
        let entries = crate::blob::decode::<T>(bytes)?;
        self.load_entries(entries, |_| true)
    }

    /// Loads only parameters accepted by `filter`, e.g. a pretrained sub-network.
    pub fn load_entries(
        &mut self,
        entries: Vec<(String, Tensor<T>)>,
        filter: impl Fn(&str) -> bool,
    ) -> Result<(), TensorError> {
        let mut by_name: std::collections::HashMap<String, Tensor<T>> = entries.into_iter().collect();
        for p in self.params.iter_mut().filter(|p| filter(&p.name)) {
            let t = by_name.remove(&p.name).ok_or_else(|| TensorError::MissingParam(p.name.clone()))?;
            if t.shape() != p.value.shape() {
                return Err(TensorError::ParamShape {
                    name: p.name.clone(),
                    expected: p.value.shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            p.value = Arc::new(t);
        }
        Ok(())
    }
}

/// Parameters of a store registered on one graph.
pub struct Bound<'g, T> {
    vars: Vec<Var<'g, T>>,
}

impl<'g, T> Index<ParamId> for Bound<'g, T> {
    type Output = Var<'g, T>;
    fn index(&self, id: ParamId) -> &Self::Output {
        &self.vars[id.0]
    }
}

impl<'g, T> Bound<'g, T> {
    pub fn vars(&self) -> &[Var<'g, T>] {
        &self.vars
    }
}

/// Zero-padded 2-D convolution with optional bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// He-normal weights, zero bias. Padding keeps size for odd kernels at stride 1.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        Self::with_gain(store, name, in_channels, out_channels, kernel, stride, bias, 2.0, rng)
    }

    /// Like [`Conv2d::new`] with weight variance `gain / fan_in`.
    #[allow(clippy::too_many_arguments)]
    pub fn with_gain<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let std = (gain / fan_in).sqrt();
        let w = Tensor::randn(&[out_channels, in_channels, kernel, kernel], std, rng);
        let weight = store.add(format!("{name}.weight"), w);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels])));
        Self { weight, bias, in_channels, out_channels, kernel, stride, pad: kernel / 2 }
    }

    pub fn forward<'g, T: Scalar>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        let g = x.graph();
        g.conv2d(x, p[self.weight], self.bias.map(|b| p[b]), self.stride, self.pad)
    }
}

/// Adaptive-moment optimizer state for one parameter store.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, lr: f64) -> Self {
        Self::with_betas(store, lr, 0.9, 0.999)
    }

    pub fn with_betas(store: &ParamStore<T>, lr: f64, beta1: f64, beta2: f64) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect::<Vec<_>>();
        Self { lr, beta1, beta2, eps: 1e-8, step: 0, first: zeros(), second: zeros() }
    }

    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>]) {
        assert_eq!(grads.len(), store.len(), "one gradient per parameter");
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(t));
        let c2 = T::lit(1.0 - self.beta2.powi(t));
        let lr = T::lit(self.lr);
        let eps = T::lit(self.eps);
        for (i, g) in grads.iter().enumerate() {
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let w = store.get_mut(ParamId(i)).data_mut();
            for j in 0..g.len() {
                let gj = g.data()[j];
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                w[j] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }

    /// Moments as named tensors for checkpointing.
    pub fn state_entries(&self, store: &ParamStore<T>) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::with_capacity(2 * store.len() + 1);
        for (id, p) in store.iter() {
            out.push((format!("adam.m.{}", p.name), self.first[id.0].clone()));
            out.push((format!("adam.v.{}", p.name), self.second[id.0].clone()));
        }
        out
    }

    pub fn load_state_entries(
        &mut self,
        store: &ParamStore<T>,
        entries: Vec<(String, Tensor<T>)>,
        step: u64,
    ) -> Result<(), TensorError> {
        let mut map: std::collections::HashMap<String, Tensor<T>> = entries.into_iter().collect();
        for (id, p) in store.iter() {
            for (prefix, slot) in [("adam.m.", &mut self.first), ("adam.v.", &mut self.second)] {
                let key = format!("{prefix}{}", p.name);
                let t = map.remove(&key).ok_or(TensorError::MissingParam(key))?;
                slot[id.0] = t;
            }
        }
        self.step = step;
        Ok(())
    }
}

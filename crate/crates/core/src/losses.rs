//! Loss terms shared by the trainers.

use ssae_tensor::{Scalar, Tensor, Var};

/// Mean binary cross-entropy of probabilities `p` against targets `y`.
///
/// Probabilities are clamped to `[1e-12, 1 - 1e-12]` before the logarithm.
pub fn binary_cross_entropy<T: Scalar>(p: &Tensor<T>, y: &Tensor<T>) -> T {
    assert_eq!(p.shape(), y.shape(), "bce shape mismatch");
    let eps = T::lit(1e-12);
    let one = T::one();
    let total: T = p
        .data()
        .iter()
        .zip(y.data())
        .map(|(&p, &y)| {
            let p = p.max(eps).min(one - eps);
            -(y * p.ln() + (one - y) * (one - p).ln())
        })
        .sum();
    total / T::from_usize(p.len()).unwrap()
}

/// Mean BCE computed from logits: `softplus(z) - y * z`.
pub fn bce_with_logits<'g, T: Scalar>(logits: Var<'g, T>, target: Var<'g, T>) -> Var<'g, T> {
    (logits.softplus() - target * logits).mean()
}

/// Non-saturating generator loss `mean(-ln sigmoid(z)) = mean(softplus(-z))`.
pub fn generator_loss<T: Scalar>(fake_logits: Var<'_, T>) -> Var<'_, T> {
    fake_logits.neg().softplus().mean()
}

/// Logistic discriminator loss `mean(softplus(-real)) + mean(softplus(fake))`.
pub fn discriminator_loss<'g, T: Scalar>(real_logits: Var<'g, T>, fake_logits: Var<'g, T>) -> Var<'g, T> {
    real_logits.neg().softplus().mean() + fake_logits.softplus().mean()
}

pub fn l1<'g, T: Scalar>(a: Var<'g, T>, b: Var<'g, T>) -> Var<'g, T> {
    (a - b).abs().mean()
}

/// L1 restricted by a weight map: `mean(|a - b| * weight)` over all elements.
pub fn weighted_l1<'g, T: Scalar>(a: Var<'g, T>, b: Var<'g, T>, weight: Var<'g, T>) -> Var<'g, T> {
    ((a - b) * weight).abs().mean()
}

/// Intersection over union of two binary masks (1 when both are empty).
pub fn iou<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    assert_eq!(a.len(), b.len());
    let half = T::lit(0.5);
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x >= half, y >= half);
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

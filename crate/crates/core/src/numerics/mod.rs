//! Dense `f64` tensors and a small reverse-mode autodiff tape.

mod graph;
mod tensor;

pub use graph::{Graph, Var};
pub use tensor::Tensor;

/// Probability clamp applied before taking logarithms in the cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

/// Rows with a smaller Euclidean norm normalize to zero.
pub const NORM_EPS: f64 = 1e-12;

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of probability `p` against a soft target in `[0, 1]`.
pub fn bce_loss(p: f64, target: f64) -> f64 {
    let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}

#[inline]
pub(crate) fn smooth_l1_term(d: f64) -> f64 {
    let a = d.abs();
    if a < 1.0 {
        0.5 * d * d
    } else {
        a - 0.5
    }
}

/// Smooth-L1 distance between two box-delta vectors, summed over components.
pub fn smooth_l1(pred: &[f64; 4], target: &[f64; 4]) -> f64 {
    pred.iter().zip(target).map(|(p, t)| smooth_l1_term(p - t)).sum()
}

//! Stateless element-wise and pooling operations with backward helpers.

use ndarray::{Array1, Array3};

/// Leaky slope: keeps a small gradient on the negative side so units starved
/// of signal early in training can still recover under adaptive optimizers.
pub const RELU_LEAK: f64 = 0.01;

pub fn relu(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(|v| if v > 0.0 { v } else { RELU_LEAK * v })
}

/// Gradient through relu given the *pre-activation* input.
pub fn relu_backward(gy: &Array3<f64>, pre: &Array3<f64>) -> Array3<f64> {
    let mut g = gy.clone();
    g.zip_mut_with(pre, |gv, &p| {
        if p <= 0.0 {
            *gv *= RELU_LEAK
        }
    });
    g
}

pub fn relu1(x: &Array1<f64>) -> Array1<f64> {
    x.mapv(|v| if v > 0.0 { v } else { RELU_LEAK * v })
}

pub fn relu1_backward(gy: &Array1<f64>, pre: &Array1<f64>) -> Array1<f64> {
    let mut g = gy.clone();
    g.zip_mut_with(pre, |gv, &p| {
        if p <= 0.0 {
            *gv *= RELU_LEAK
        }
    });
    g
}

/// Global average pooling: per-channel spatial mean.
pub fn global_avg_pool(fm: &Array3<f64>) -> Array1<f64> {
    let (c, h, w) = fm.dim();
    let scale = 1.0 / (h * w) as f64;
    Array1::from_iter((0..c).map(|ic| fm.index_axis(ndarray::Axis(0), ic).sum() * scale))
}

/// Spread a pooled gradient back over the spatial extent.
pub fn global_avg_pool_backward(g: &Array1<f64>, c: usize, h: usize, w: usize) -> Array3<f64> {
    let scale = 1.0 / (h * w) as f64;
    Array3::from_shape_fn((c, h, w), |(ic, _, _)| g[ic] * scale)
}

/// Numerically stable softmax.
pub fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp = logits.mapv(|v| (v - max).exp());
    let sum = exp.sum();
    exp / sum
}

pub fn log_softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = logits.mapv(|v| (v - max).exp()).sum().ln() + max;
    logits.mapv(|v| v - log_sum)
}

/// Cross-entropy of a softmax prediction against a hard label, plus the
/// gradient w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &Array1<f64>, label: usize) -> (f64, Array1<f64>) {
    let log_p = log_softmax(logits);
    let loss = -log_p[label];
    let mut grad = log_p.mapv(f64::exp);
    grad[label] -= 1.0;
    (loss, grad)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

//! Dense tensors, distance and similarity kernels, and a central-difference
//! gradient oracle.
//!
//! Storage is `f32`, row-major. Reductions accumulate in `f64` so results do
//! not depend on summation width.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

thread_local! {
    static DISTANCE_EVALS: Cell<u64> = const { Cell::new(0) };
}

/// Number of latent distance-map evaluations performed on the current thread.
///
/// The refinement fast paths are audited with this counter.
pub fn distance_evaluations() -> u64 {
    DISTANCE_EVALS.with(Cell::get)
}

/// Row-major `f32` tensor whose values are always finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "tensor element {i} is {}",
                data[i]
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> f32) -> Result<Self> {
        let n: usize = shape.iter().product();
        Self::new(shape, (0..n).map(&mut f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Copy with a single element replaced. Used by the gradient oracle.
    pub fn with_value(&self, index: usize, value: f32) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("value {value} at {index}")));
        }
        let mut data = self.data.clone();
        data[index] = value;
        Ok(Self {
            shape: self.shape.clone(),
            data,
        })
    }
}

/// Parameters of the log-ratio similarity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityConfig {
    pub epsilon: f64,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        Self { epsilon: 1e-4 }
    }
}

impl SimilarityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::Config(format!(
                "similarity epsilon must lie in (0, 1), got {}",
                self.epsilon
            )));
        }
        Ok(())
    }

    /// Similarity at zero distance, `-ln(epsilon)`.
    pub fn max_similarity(&self) -> f64 {
        -self.epsilon.ln()
    }
}

/// Squared Euclidean distance from every cell of an `H'×W'×D` grid to `proto`,
/// returned as an `H'×W'` tensor.
pub fn distance_map(latent: &Tensor, proto: &[f32]) -> Result<Tensor> {
    let d = squared_distances(latent, proto)?;
    let shape = latent.shape()[..2].to_vec();
    Tensor::new(shape, d.into_iter().map(|v| v as f32).collect())
}

/// Full-precision form of [`distance_map`], one value per cell in row-major order.
pub fn squared_distances(latent: &Tensor, proto: &[f32]) -> Result<Vec<f64>> {
    let shape = latent.shape();
    if shape.len() != 3 {
        return Err(Error::Shape(format!(
            "latent must be H'xW'xD, got shape {shape:?}"
        )));
    }
    let depth = shape[2];
    if proto.len() != depth {
        return Err(Error::Shape(format!(
            "prototype length {} does not match latent depth {} (latent shape {:?})",
            proto.len(),
            depth,
            shape
        )));
    }
    DISTANCE_EVALS.with(|c| c.set(c.get() + 1));
    Ok(latent
        .data()
        .chunks_exact(depth)
        .map(|cell| squared_distance(cell, proto))
        .collect())
}

#[inline]
pub fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let diff = x as f64 - y as f64;
            diff * diff
        })
        .sum()
}

/// `ln((d + 1) / (d + eps))`: strictly decreasing, `-ln(eps)` at zero, vanishing at infinity.
pub fn similarity(d: f64, cfg: &SimilarityConfig) -> Result<f64> {
    if !(d >= 0.0) || !d.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "squared distance must be finite and non-negative, got {d}"
        )));
    }
    Ok(similarity_unchecked(d, cfg.epsilon))
}

#[inline]
pub(crate) fn similarity_unchecked(d: f64, epsilon: f64) -> f64 {
    ((d + 1.0) / (d + epsilon)).ln()
}

/// Derivative of [`similarity`] with respect to the squared distance.
#[inline]
pub fn similarity_derivative(d: f64, cfg: &SimilarityConfig) -> f64 {
    1.0 / (d + 1.0) - 1.0 / (d + cfg.epsilon)
}

/// Closed-form inverse of [`similarity`]: the squared distance that produces `s`.
///
/// Clamped to zero for `s >= -ln(eps)`.
pub fn distance_from_similarity(s: f64, cfg: &SimilarityConfig) -> f64 {
    let e = s.exp();
    if e <= 1.0 {
        return f64::INFINITY;
    }
    ((1.0 - cfg.epsilon * e) / (e - 1.0)).max(0.0)
}

/// Central-difference gradient of `f` at `x`.
///
/// The divisor is the step that is actually representable in `f32`
/// (`x_i + h` minus `x_i - h` after rounding), which removes the rounding bias
/// a fixed `2h` would carry.
pub fn finite_diff_gradient<F>(f: F, x: &Tensor, h: f32) -> Result<Tensor>
where
    F: Fn(&Tensor) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "step must be positive, got {h}"
        )));
    }
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let xi = x.data()[i];
        let plus = xi + h;
        let minus = xi - h;
        let fp = f(&x.with_value(i, plus)?);
        let fm = f(&x.with_value(i, minus)?);
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective not finite around coordinate {i}: f(+h)={fp}, f(-h)={fm}"
            )));
        }
        grad.push(((fp - fm) / (plus as f64 - minus as f64)) as f32);
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// Largest absolute entry.
pub fn max_abs(values: impl IntoIterator<Item = f64>) -> f64 {
    values.into_iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Numerically stable two-class softmax.
pub fn softmax2(logits: [f64; 2]) -> [f64; 2] {
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    let z = e0 + e1;
    [e0 / z, e1 / z]
}

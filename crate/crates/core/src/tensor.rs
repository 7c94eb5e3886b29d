//! Numeric element type and the small set of tensor helpers the network needs.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{Array1, Array3, ArrayView1, NdFloat};

/// Element type of every network tensor. Training runs in `f32`; the gradient
/// harness instantiates the same code in `f64`.
pub trait Real: NdFloat + Sum + Debug + Display + Default {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Channels × height × width.
pub type FeatureMap<T> = Array3<T>;

/// A 3 × H × W input image.
pub type ImageTensor<T> = Array3<T>;

pub fn all_finite<'a, T: Real, I: IntoIterator<Item = &'a T>>(values: I) -> bool {
    values.into_iter().all(|v| v.is_finite())
}

/// Numerically stable softmax.
pub fn softmax<T: Real>(logits: ArrayView1<'_, T>) -> Array1<T> {
    let max = logits.fold(T::neg_infinity(), |m, &v| m.max(v));
    let exp = logits.mapv(|v| (v - max).exp());
    let total: T = exp.sum();
    exp / total
}

/// Vector-Jacobian product of softmax: given `s = softmax(z)` and `dL/ds`,
/// returns `dL/dz`.
pub fn softmax_backward<T: Real>(s: ArrayView1<'_, T>, ds: ArrayView1<'_, T>) -> Array1<T> {
    let dot: T = s.iter().zip(ds.iter()).map(|(&a, &b)| a * b).sum();
    let mut out = Array1::zeros(s.len());
    for ((o, &si), &di) in out.iter_mut().zip(s.iter()).zip(ds.iter()) {
        *o = si * (di - dot);
    }
    out
}

/// Global average pooling over the spatial axes.
pub fn global_avg_pool<T: Real>(f: &FeatureMap<T>) -> Array1<T> {
    let (c, h, w) = f.dim();
    let area = T::from_f64((h * w) as f64);
    let mut out = Array1::zeros(c);
    for (ch, o) in out.iter_mut().enumerate() {
        let s: T = f.index_axis(ndarray::Axis(0), ch).iter().copied().sum();
        *o = s / area;
    }
    out
}

pub fn global_avg_pool_backward<T: Real>(d_pooled: ArrayView1<'_, T>, h: usize, w: usize) -> FeatureMap<T> {
    let c = d_pooled.len();
    let area = T::from_f64((h * w) as f64);
    Array3::from_shape_fn((c, h, w), |(ch, _, _)| d_pooled[ch] / area)
}

pub fn argmax<T: Real>(v: ArrayView1<'_, T>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

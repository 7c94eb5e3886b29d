//! Attribute attention: the channel mask computed from the attribute feature
//! map, its application to that map, and the mask-guided re-weighting of the
//! category feature map with its shortcut.

use ndarray::{Array1, ArrayView1, Axis, Zip};

use super::layers::Linear;
use crate::error::{Error, Result};
use crate::tensor::{all_finite, global_avg_pool, global_avg_pool_backward, softmax, softmax_backward, FeatureMap, Real};

/// Softmax-normalized per-channel attention weights. Every weight is
/// nonnegative and the weights sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMask<T> {
    weights: Array1<T>,
}

impl<T: Real> ChannelMask<T> {
    /// Normalizes arbitrary logits into a mask.
    pub fn from_logits(logits: ArrayView1<'_, T>) -> Self {
        Self { weights: softmax(logits) }
    }

    /// Wraps weights that already form a distribution.
    pub fn from_weights(weights: Array1<T>) -> Result<Self> {
        if !all_finite(weights.iter()) {
            return Err(Error::NonFinite("channel mask".into()));
        }
        if weights.iter().any(|&w| w < T::zero()) {
            return Err(Error::Config("channel mask weights must be nonnegative".into()));
        }
        let total = weights.sum().to_f64();
        if (total - 1.0).abs() > 1e-5 {
            return Err(Error::Config(format!("channel mask sums to {total}, not 1")));
        }
        Ok(Self { weights })
    }

    pub fn uniform(channels: usize) -> Self {
        Self {
            weights: Array1::from_elem(channels, T::one() / T::from_f64(channels as f64)),
        }
    }

    pub fn weights(&self) -> ArrayView1<'_, T> {
        self.weights.view()
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// `M = softmax(conv1x1(GAP(f_r)))`. The 1×1 convolution on a pooled vector is
/// a dense map from the channels of `f_r` to `mask_dim` outputs.
pub fn attribute_mask<T: Real>(f_r: &FeatureMap<T>, conv: &Linear<T>) -> Result<ChannelMask<T>> {
    if !all_finite(f_r.iter()) {
        return Err(Error::NonFinite("attribute feature map".into()));
    }
    let channels = f_r.len_of(Axis(0));
    if channels != conv.inputs() {
        return Err(Error::shape("attribute_mask", conv.inputs(), channels));
    }
    let pooled = global_avg_pool(f_r);
    Ok(ChannelMask::from_logits(conv.forward(pooled.view()).view()))
}

/// Back-propagates `dL/dM` through softmax, the 1×1 convolution and pooling.
/// Accumulates the convolution gradient into `grad` and returns `dL/df_r`.
pub fn attribute_mask_backward<T: Real>(
    f_r: &FeatureMap<T>,
    conv: &Linear<T>,
    mask: &ChannelMask<T>,
    d_mask: ArrayView1<'_, T>,
    grad: &mut Linear<T>,
) -> FeatureMap<T> {
    let (_, h, w) = f_r.dim();
    let pooled = global_avg_pool(f_r);
    let d_logits = softmax_backward(mask.weights(), d_mask);
    let d_pooled = conv.backward(pooled.view(), d_logits.view(), grad);
    global_avg_pool_backward(d_pooled.view(), h, w)
}

/// `out[c, h, w] = f[c, h, w] · mask[c]`.
pub fn apply_mask<T: Real>(f: &FeatureMap<T>, mask: &ChannelMask<T>) -> Result<FeatureMap<T>> {
    let channels = f.len_of(Axis(0));
    if channels != mask.len() {
        return Err(Error::shape("apply_mask", channels, mask.len()));
    }
    Ok(scale_channels(f, mask.weights()))
}

/// Returns `(dL/df, dL/dmask)`.
pub fn apply_mask_backward<T: Real>(
    f: &FeatureMap<T>,
    mask: &ChannelMask<T>,
    d_out: &FeatureMap<T>,
) -> (FeatureMap<T>, Array1<T>) {
    let d_f = scale_channels(d_out, mask.weights());
    let d_mask = channel_dot(f, d_out);
    (d_f, d_mask)
}

/// `f_cs = f_c + f_c ⊗ conv1x1(M)`: the guide convolution projects the mask
/// onto the channels of `f_c`, and the shortcut adds `f_c` back.
pub fn guided_category_features<T: Real>(
    f_c: &FeatureMap<T>,
    mask: &ChannelMask<T>,
    guide: &Linear<T>,
) -> Result<FeatureMap<T>> {
    let channels = f_c.len_of(Axis(0));
    if guide.inputs() != mask.len() {
        return Err(Error::shape("guided_category_features (mask)", guide.inputs(), mask.len()));
    }
    if guide.outputs() != channels {
        return Err(Error::shape("guided_category_features (channels)", guide.outputs(), channels));
    }
    let gate = guide.forward(mask.weights());
    let mut out = f_c.clone();
    Zip::from(out.outer_iter_mut())
        .and(f_c.outer_iter())
        .and(&gate)
        .for_each(|mut o, f, &g| o.scaled_add(g, &f));
    Ok(out)
}

/// Returns `(dL/df_c, dL/dM)` and accumulates the guide convolution gradient.
pub fn guided_category_features_backward<T: Real>(
    f_c: &FeatureMap<T>,
    mask: &ChannelMask<T>,
    guide: &Linear<T>,
    d_out: &FeatureMap<T>,
    grad: &mut Linear<T>,
) -> (FeatureMap<T>, Array1<T>) {
    let gate = guide.forward(mask.weights());
    let mut d_f = d_out.clone();
    Zip::from(d_f.outer_iter_mut())
        .and(d_out.outer_iter())
        .and(&gate)
        .for_each(|mut o, d, &g| o.scaled_add(g, &d));
    let d_gate = channel_dot(f_c, d_out);
    let d_mask = guide.backward(mask.weights(), d_gate.view(), grad);
    (d_f, d_mask)
}

fn scale_channels<T: Real>(f: &FeatureMap<T>, scale: ArrayView1<'_, T>) -> FeatureMap<T> {
    let mut out = f.clone();
    Zip::from(out.outer_iter_mut())
        .and(&scale)
        .for_each(|mut o, &s| o.mapv_inplace(|v| v * s));
    out
}

fn channel_dot<T: Real>(a: &FeatureMap<T>, b: &FeatureMap<T>) -> Array1<T> {
    a.outer_iter()
        .zip(b.outer_iter())
        .map(|(x, y)| x.iter().zip(y.iter()).map(|(&p, &q)| p * q).sum())
        .collect()
}

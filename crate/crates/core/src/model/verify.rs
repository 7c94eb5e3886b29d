//! Pairwise verification head: element-wise squared difference of the two
//! embeddings followed by a learned projection to same/different logits.

use ndarray::{Array1, ArrayView1};

use super::layers::Linear;
use crate::error::{Error, Result};
use crate::tensor::Real;

/// Index of the "same identity" logit.
pub const SAME: usize = 0;
/// Index of the "different identity" logit.
pub const DIFFERENT: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerificationLogits<T> {
    pub values: [T; 2],
}

/// `f_v = (f1 - f2)²`, element-wise.
pub fn square_difference<T: Real>(f1: ArrayView1<'_, T>, f2: ArrayView1<'_, T>) -> Result<Array1<T>> {
    if f1.len() != f2.len() {
        return Err(Error::shape("square_difference", f1.len(), f2.len()));
    }
    Ok(f1.iter().zip(f2.iter()).map(|(&a, &b)| (a - b) * (a - b)).collect())
}

pub fn verification_head<T: Real>(
    f1: ArrayView1<'_, T>,
    f2: ArrayView1<'_, T>,
    head: &Linear<T>,
) -> Result<VerificationLogits<T>> {
    let fv = square_difference(f1, f2)?;
    if head.inputs() != fv.len() || head.outputs() != 2 {
        return Err(Error::shape("verification_head", format!("2 x {}", fv.len()), format!("{} x {}", head.outputs(), head.inputs())));
    }
    let y = head.forward(fv.view());
    Ok(VerificationLogits { values: [y[0], y[1]] })
}

/// Returns `(dL/df1, dL/df2)` given `dL/dlogits`, accumulating the head gradient.
pub fn verification_head_backward<T: Real>(
    f1: ArrayView1<'_, T>,
    f2: ArrayView1<'_, T>,
    head: &Linear<T>,
    d_logits: [T; 2],
    grad: &mut Linear<T>,
) -> (Array1<T>, Array1<T>) {
    let diff = &f1 - &f2;
    let fv = diff.mapv(|d| d * d);
    let d_fv = head.backward(fv.view(), ndarray::arr1(&d_logits).view(), grad);
    let two = T::from_f64(2.0);
    let d_f1 = &d_fv * &diff * two;
    let d_f2 = d_f1.mapv(|v| -v);
    (d_f1, d_f2)
}

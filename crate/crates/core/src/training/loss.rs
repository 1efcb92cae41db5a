//! Soft dice loss averaged over the three foreground classes.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use crate::volume::NUM_CLASSES;

/// Smoothing added to both numerator and denominator of every class dice.
pub const DICE_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct DiceLoss<T> {
    pub loss: f64,
    /// Gradient w.r.t. the probabilities, same shape as the input.
    pub grad: Tensor<T>,
    /// Soft dice of core, edema and enhancing (class-axis order 1..4).
    pub dice: [f64; 3],
}

/// `1 - mean_l DSC_l` over classes 1..4 of `(B, 4, D, H, W)` tensors, voxels
/// pooled over the batch. The background channel gets a zero gradient.
pub fn multiple_dice_loss<T: Real>(probs: &Tensor<T>, target: &Tensor<T>) -> Result<DiceLoss<T>> {
    if probs.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "probabilities {:?} and reference {:?} differ",
            probs.shape(),
            target.shape()
        )));
    }
    let [b, c, d, h, w] = probs.dims5()?;
    if c != NUM_CLASSES {
        return Err(Error::Shape(format!("expected {NUM_CLASSES} classes, got {c}")));
    }
    let s = d * h * w;
    let p = probs.data();
    let r = target.data();
    let mut inter = [0.0f64; NUM_CLASSES];
    let mut mass = [0.0f64; NUM_CLASSES];
    for bi in 0..b {
        for l in 1..NUM_CLASSES {
            let o = (bi * c + l) * s;
            for i in o..o + s {
                let (pv, rv) = (p[i].as_f64(), r[i].as_f64());
                inter[l] += pv * rv;
                mass[l] += pv + rv;
            }
        }
    }
    let k = (NUM_CLASSES - 1) as f64;
    let mut dice = [0.0; 3];
    let mut coef_r = [0.0; NUM_CLASSES];
    let mut coef_c = [0.0; NUM_CLASSES];
    for l in 1..NUM_CLASSES {
        let num = 2.0 * inter[l] + DICE_EPS;
        let den = mass[l] + DICE_EPS;
        dice[l - 1] = num / den;
        // d(1 - DSC/K)/dp = -(2 r den - num) / (K den^2)
        coef_r[l] = -2.0 / (k * den);
        coef_c[l] = num / (k * den * den);
    }
    let loss = 1.0 - dice.iter().sum::<f64>() / k;
    let mut grad = Tensor::zeros(probs.shape());
    let g = grad.data_mut();
    for bi in 0..b {
        for l in 1..NUM_CLASSES {
            let o = (bi * c + l) * s;
            for i in o..o + s {
                g[i] = T::from_f64(coef_r[l] * r[i].as_f64() + coef_c[l]);
            }
        }
    }
    Ok(DiceLoss { loss, grad, dice })
}

//! Focal and dice losses on probability maps, with analytic gradients.

use ndarray::{Array2, ArrayView2, Zip};

use crate::error::{shape, Result};

/// Probabilities are clipped to `[PROB_EPS, 1 - PROB_EPS]` inside the focal log.
pub const PROB_EPS: f64 = 1e-7;

fn check(pred: &ArrayView2<'_, f64>, mask: &ArrayView2<'_, u8>) -> Result<()> {
    if pred.dim() != mask.dim() {
        return Err(shape(format!(
            "prediction is {:?} but mask is {:?}",
            pred.dim(),
            mask.dim()
        )));
    }
    Ok(())
}

/// `(loss, dloss/dp_t)` of `-alpha (1 - p_t)^gamma ln p_t` at one pixel.
fn focal_term(pt: f64, gamma: f64, alpha: f64) -> (f64, f64) {
    let q = 1.0 - pt;
    let ln = pt.ln();
    let loss = -alpha * q.powf(gamma) * ln;
    let slope = if gamma == 0.0 {
        0.0
    } else {
        gamma * q.powf(gamma - 1.0) * ln
    };
    (loss, alpha * (slope - q.powf(gamma) / pt))
}

/// Mean over pixels of `-alpha (1 - p_t)^gamma ln p_t`, where `p_t = p` on
/// positive pixels and `1 - p` elsewhere.
pub fn focal_loss(
    pred: ArrayView2<'_, f64>,
    mask: ArrayView2<'_, u8>,
    gamma: f64,
    alpha: f64,
) -> Result<f64> {
    Ok(focal_loss_grad(pred, mask, gamma, alpha)?.0)
}

/// Focal loss and its gradient with respect to the unclipped prediction.
pub fn focal_loss_grad(
    pred: ArrayView2<'_, f64>,
    mask: ArrayView2<'_, u8>,
    gamma: f64,
    alpha: f64,
) -> Result<(f64, Array2<f64>)> {
    check(&pred, &mask)?;
    let n = pred.len() as f64;
    let mut total = 0.0;
    let mut grad = Array2::<f64>::zeros(pred.dim());
    Zip::from(&mut grad)
        .and(pred)
        .and(mask)
        .for_each(|g, &p, &y| {
            let clipped = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            let positive = y != 0;
            let pt = if positive { clipped } else { 1.0 - clipped };
            let (loss, dpt) = focal_term(pt, gamma, alpha);
            total += loss;
            if clipped == p {
                *g = if positive { dpt } else { -dpt } / n;
            }
        });
    Ok((total / n, grad))
}

/// `1 - (2 Σ p·g + smooth) / (Σ p + Σ g + smooth)`.
pub fn dice_loss(pred: ArrayView2<'_, f64>, mask: ArrayView2<'_, u8>, smooth: f64) -> Result<f64> {
    Ok(dice_loss_grad(pred, mask, smooth)?.0)
}

pub fn dice_loss_grad(
    pred: ArrayView2<'_, f64>,
    mask: ArrayView2<'_, u8>,
    smooth: f64,
) -> Result<(f64, Array2<f64>)> {
    check(&pred, &mask)?;
    let mut inter = 0.0;
    let mut sum_p = 0.0;
    let mut sum_g = 0.0;
    Zip::from(pred).and(mask).for_each(|&p, &y| {
        let g = f64::from(y.min(1));
        inter += p * g;
        sum_p += p;
        sum_g += g;
    });
    let num = 2.0 * inter + smooth;
    let den = sum_p + sum_g + smooth;
    if den == 0.0 {
        return Ok((0.0, Array2::zeros(pred.dim())));
    }
    let grad = mask.mapv(|y| -(2.0 * f64::from(y.min(1)) * den - num) / (den * den));
    Ok((1.0 - num / den, grad))
}

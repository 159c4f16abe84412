//! Training objectives: information maximization, label-smoothed cross entropy and the
//! weighted intra/inter combination.
//!
//! The diversity term uses the batch-mean probability `p̄_c = mean_m p_{m,c}` (positive sign).
//! All losses are batch means, so the trade-off weights do not depend on batch size.

use crate::aten::ForwardTrace;
use crate::error::{Error, Result};
use crate::numerics::{softmax_backward, softmax_slice, Matrix};
use crate::scalar::Scalar;

/// Probabilities are clamped to this before taking logs so one-hot rows are legal.
pub const LOG_EPS: f64 = 1e-12;
pub const DEFAULT_LABEL_SMOOTHING: f64 = 0.1;

const SIMPLEX_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImLoss<T> {
    /// `l_ent − l_div`
    pub l_im: T,
    /// Mean per-sample entropy.
    pub l_ent: T,
    /// Entropy of the batch-mean prediction.
    pub l_div: T,
}

#[inline]
fn safe_ln<T: Scalar>(p: T) -> T {
    p.max(T::lit(LOG_EPS)).ln()
}

/// Information-maximization loss of a batch of probability rows.
pub fn im_loss<T: Scalar>(probs: &Matrix<T>) -> Result<ImLoss<T>> {
    let (batch, classes) = probs.shape();
    if batch == 0 || classes == 0 {
        return Err(Error::contract("im_loss", "empty batch"));
    }
    let tol = T::lit(SIMPLEX_TOL);
    for m in 0..batch {
        let row = probs.row(m);
        let total: T = row.iter().copied().sum();
        if (total - T::one()).abs() > tol || row.iter().any(|&p| !(p >= -tol)) {
            return Err(Error::contract("im_loss", format!("row {m} is not a probability vector")));
        }
    }
    let b = T::from_usize_lossy(batch);
    let mut ent = T::zero();
    for m in 0..batch {
        for &p in probs.row(m) {
            ent -= p * safe_ln(p);
        }
    }
    let l_ent = ent / b;
    let mut l_div = T::zero();
    for p_bar in probs.column_sums() {
        let p_bar = p_bar / b;
        l_div -= p_bar * safe_ln(p_bar);
    }
    Ok(ImLoss {
        l_im: l_ent - l_div,
        l_ent,
        l_div,
    })
}

/// IM loss of `softmax(logits)` together with its gradient with respect to the logits.
pub fn im_loss_with_grad<T: Scalar>(logits: &Matrix<T>) -> Result<(ImLoss<T>, Matrix<T>)> {
    let (batch, classes) = logits.shape();
    let mut probs = Matrix::zeros(batch, classes);
    for m in 0..batch {
        probs.row_mut(m).copy_from_slice(&softmax_slice(logits.row(m)));
    }
    let loss = im_loss(&probs)?;
    let b = T::from_usize_lossy(batch);
    let p_bar: Vec<T> = probs.column_sums().into_iter().map(|s| s / b).collect();
    let log_floor = T::lit(LOG_EPS);
    let mut grad = Matrix::zeros(batch, classes);
    for m in 0..batch {
        // d l_ent / dp = -(ln p + 1)/B ; d l_div / dp = -(ln p̄ + 1)/B (clamped logs have zero slope)
        let dp: Vec<T> = (0..classes)
            .map(|c| {
                let p = probs[(m, c)];
                let d_ent = if p > log_floor { -(p.ln() + T::one()) } else { -log_floor.ln() };
                let d_div = if p_bar[c] > log_floor { -(p_bar[c].ln() + T::one()) } else { -log_floor.ln() };
                (d_ent - d_div) / b
            })
            .collect();
        grad.row_mut(m).copy_from_slice(&softmax_backward(probs.row(m), &dp));
    }
    Ok((loss, grad))
}

fn check_labels(op: &'static str, labels: &[usize], batch: usize, classes: usize) -> Result<()> {
    if labels.len() != batch {
        return Err(Error::contract(op, format!("{} labels for a batch of {batch}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::contract(op, format!("label {bad} out of range for {classes} classes")));
    }
    Ok(())
}

/// Mean cross entropy against `(1−ε)·onehot + ε/C`, with its gradient in the logits.
pub fn ce_label_smoothing_with_grad<T: Scalar>(
    logits: &Matrix<T>,
    labels: &[usize],
    smoothing: T,
) -> Result<(T, Matrix<T>)> {
    let (batch, classes) = logits.shape();
    check_labels("ce_label_smoothing", labels, batch, classes)?;
    if !(smoothing >= T::zero() && smoothing < T::one()) {
        return Err(Error::contract("ce_label_smoothing", format!("smoothing {smoothing} outside [0, 1)")));
    }
    let b = T::from_usize_lossy(batch);
    let off = smoothing / T::from_usize_lossy(classes);
    let on = T::one() - smoothing + off;
    let mut total = T::zero();
    let mut grad = Matrix::zeros(batch, classes);
    for (m, &label) in labels.iter().enumerate() {
        let row = logits.row(m);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for &v in row {
            z += (v - max).exp();
        }
        let lse = max + z.ln();
        for (c, &v) in row.iter().enumerate() {
            let q = if c == label { on } else { off };
            total -= q * (v - lse);
            grad[(m, c)] = ((v - lse).exp() - q) / b;
        }
    }
    Ok((total / b, grad))
}

pub fn ce_label_smoothing<T: Scalar>(logits: &Matrix<T>, labels: &[usize], smoothing: T) -> Result<T> {
    ce_label_smoothing_with_grad(logits, labels, smoothing).map(|(l, _)| l)
}

/// Sum over domains of the IM loss of `softmax(ỹ^i)` on the learned branch.
pub fn intra_objective<T: Scalar>(trace: &ForwardTrace<T>) -> Result<T> {
    let y_tilde = trace
        .learned_y_tilde()
        .ok_or_else(|| Error::contract("intra_objective", "trace has no learned intra-domain branch"))?;
    let mut total = T::zero();
    for y in y_tilde {
        total += im_loss_with_grad(y)?.0.l_im;
    }
    Ok(total)
}

/// `γ · CE_ls(ÿ, labels) + IM(softmax(ÿ))`.
pub fn inter_objective<T: Scalar>(
    y_final: &Matrix<T>,
    pseudo_labels: Option<&[usize]>,
    gamma: T,
    smoothing: T,
) -> Result<T> {
    let labels = pseudo_labels.ok_or_else(|| Error::contract("inter_objective", "pseudo labels missing"))?;
    let ce = ce_label_smoothing(y_final, labels, smoothing)?;
    Ok(gamma * ce + im_loss_with_grad(y_final)?.0.l_im)
}

pub fn total_objective<T: Scalar>(l_inter: T, l_intra: T, lambda: T) -> T {
    l_inter + lambda * l_intra
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights<T> {
    /// Weight of the intra-domain objective.
    pub lambda: T,
    /// Weight of the pseudo-label cross entropy.
    pub gamma: T,
    pub smoothing: T,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport<T> {
    pub l_total: T,
    pub l_inter: T,
    pub l_intra: T,
    pub l_ce: T,
    pub l_ent: T,
    pub l_div: T,
    pub batch_size: usize,
}

/// Upstream gradients of the total loss at the two places losses attach to the trace.
#[derive(Clone, Debug)]
pub struct LossGrads<T> {
    /// `dL/dÿ`
    pub y_final: Matrix<T>,
    /// `dL/dỹ^i` on the learned branch from the intra objective (already scaled by λ).
    pub y_tilde_learned: Option<Vec<Matrix<T>>>,
}

/// Evaluates the total objective on a trace. The intra term needs the learned branch; without
/// one (ATEN) it is zero.
pub fn evaluate_losses<T: Scalar>(
    trace: &ForwardTrace<T>,
    pseudo_labels: &[usize],
    weights: &LossWeights<T>,
) -> Result<(LossReport<T>, LossGrads<T>)> {
    let (ce, d_ce) = ce_label_smoothing_with_grad(&trace.y_final, pseudo_labels, weights.smoothing)?;
    let (im, d_im) = im_loss_with_grad(&trace.y_final)?;
    let l_inter = weights.gamma * ce + im.l_im;
    let mut d_final = d_ce.scale(weights.gamma);
    d_final.add_assign(&d_im)?;

    let (l_intra, d_intra) = match trace.learned_y_tilde() {
        Some(y_tilde) => {
            let mut total = T::zero();
            let mut grads = Vec::with_capacity(y_tilde.len());
            for y in y_tilde {
                let (loss, g) = im_loss_with_grad(y)?;
                total += loss.l_im;
                grads.push(g.scale(weights.lambda));
            }
            (total, Some(grads))
        }
        None => (T::zero(), None),
    };
    let report = LossReport {
        l_total: total_objective(l_inter, l_intra, weights.lambda),
        l_inter,
        l_intra,
        l_ce: ce,
        l_ent: im.l_ent,
        l_div: im.l_div,
        batch_size: trace.batch(),
    };
    if !report.l_total.is_finite() {
        return Err(Error::NonFinite { node: "total loss".into() });
    }
    Ok((
        report,
        LossGrads {
            y_final: d_final,
            y_tilde_learned: d_intra,
        },
    ))
}

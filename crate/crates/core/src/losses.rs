//! Training objectives: the autoregressive, classification and masked
//! losses, their weighted joint sum, and the kernel (MMD) loss used on soft
//! pseudo text.
//!
//! The functions here operate on plain matrices. The training graph reuses
//! [`mmd_value_and_grad`] for its kernel node and the same target layouts
//! ([`ag_targets`], [`nag_targets`]) for its cross-entropy nodes.

use serde::{Deserialize, Serialize};

use crate::decode::MaskVector;
use crate::diagnostics::{self, Warning};
use crate::error::{KestError, Result};
use crate::tensor::{log_sum_exp, Mat, Scalar};
use crate::tokenizer::{TokenSequence, PAD};

pub const LOG_EPS: f64 = 1e-12;
pub const BANDWIDTH_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_c: f64,
    pub lambda_ag: f64,
    pub lambda_nag: f64,
}

impl LossWeights {
    /// Base-phase weights (5, 1, 1).
    pub fn base() -> Self {
        Self { lambda_c: 5.0, lambda_ag: 1.0, lambda_nag: 1.0 }
    }

    /// Self-training weights (1, 1, 1).
    pub fn self_training() -> Self {
        Self { lambda_c: 1.0, lambda_ag: 1.0, lambda_nag: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_c, self.lambda_ag, self.lambda_nag];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(KestError::config("loss weights must be finite and non-negative"));
        }
        if all.iter().all(|&w| w == 0.0) {
            return Err(KestError::config("loss weights must not all be zero"));
        }
        Ok(())
    }
}

/// Per-row targets for next-token prediction: row `j` predicts token `j + 1`.
pub fn ag_targets(targets: &TokenSequence) -> Vec<Option<usize>> {
    let ids = targets.ids();
    (0..ids.len())
        .map(|j| ids.get(j + 1).filter(|&&t| t != PAD && j + 1 < targets.len()).map(|&t| t as usize))
        .collect()
}

/// Per-row targets for masked prediction: only masked positions are scored.
pub fn nag_targets(original: &TokenSequence, mask: &MaskVector) -> Result<Vec<Option<usize>>> {
    if mask.len() > original.maskable_len() {
        return Err(KestError::precondition(format!(
            "mask covers {} positions but only {} are maskable; it would touch EOS or PAD",
            mask.len(),
            original.maskable_len()
        )));
    }
    let mut out = vec![None; original.l_max()];
    for pos in mask.masked_positions() {
        out[pos] = Some(original.ids()[pos] as usize);
    }
    Ok(out)
}

/// Summed NLL of the given `(row, target)` pairs under row-softmax.
pub fn sequence_nll<T: Scalar>(logits: &Mat<T>, targets: &[Option<usize>]) -> f64 {
    targets
        .iter()
        .enumerate()
        .filter_map(|(r, t)| t.map(|t| (r, t)))
        .map(|(r, t)| {
            let row: Vec<f64> = logits.row(r).iter().map(|v| v.f64()).collect();
            log_sum_exp(&row) - row[t]
        })
        .sum()
}

/// Autoregressive NLL of one sequence, summed over non-PAD target positions.
pub fn loss_ag<T: Scalar>(logits: &Mat<T>, targets: &TokenSequence) -> f64 {
    let t = ag_targets(targets);
    if t.iter().all(Option::is_none) {
        diagnostics::warn(Warning::AllPadTarget, "loss_ag called on a sequence with no scored positions");
        return 0.0;
    }
    sequence_nll(logits, &t)
}

/// Batch mean of [`loss_ag`].
pub fn loss_ag_batch<T: Scalar>(items: &[(Mat<T>, TokenSequence)]) -> f64 {
    if items.is_empty() {
        return 0.0;
    }
    items.iter().map(|(l, t)| loss_ag(l, t)).sum::<f64>() / items.len() as f64
}

/// `−ln probs[label]`, clamped at `1e-12`.
pub fn loss_cls(probs: &[f64], label: usize) -> f64 {
    let p = probs[label];
    if p < LOG_EPS {
        diagnostics::warn(Warning::ClampedLog, "classification probability clamped");
    }
    -p.max(LOG_EPS).ln()
}

pub fn loss_cls_batch(items: &[(Vec<f64>, usize)]) -> f64 {
    if items.is_empty() {
        return 0.0;
    }
    items.iter().map(|(p, l)| loss_cls(p, *l)).sum::<f64>() / items.len() as f64
}

/// Masked-position NLL of one sequence.
pub fn loss_nag<T: Scalar>(logits: &Mat<T>, original: &TokenSequence, mask: &MaskVector) -> Result<f64> {
    Ok(sequence_nll(logits, &nag_targets(original, mask)?))
}

/// `λ_c·L_c + λ_ag·L_ag + λ_nag·L_nag`
pub fn loss_joint(components: (f64, f64, f64), weights: &LossWeights) -> f64 {
    let (c, ag, nag) = components;
    weights.lambda_c * c + weights.lambda_ag * ag + weights.lambda_nag * nag
}

/// RBF bandwidth bank: `2M + 1` values, summed when evaluating the kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub m: usize,
    pub bandwidths: Vec<f64>,
}

impl KernelConfig {
    pub fn new(m: usize, bandwidths: Vec<f64>) -> Result<Self> {
        let cfg = Self { m, bandwidths };
        cfg.validate()?;
        Ok(cfg)
    }

    /// A single fixed bandwidth.
    pub fn single(sigma: f64) -> Result<Self> {
        Self::new(0, vec![sigma])
    }

    pub fn validate(&self) -> Result<()> {
        if self.bandwidths.len() != 2 * self.m + 1 {
            return Err(KestError::config(format!(
                "bandwidth bank needs {} values, got {}",
                2 * self.m + 1,
                self.bandwidths.len()
            )));
        }
        if let Some(s) = self.bandwidths.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(KestError::config(format!("bandwidth {s} is not positive")));
        }
        Ok(())
    }
}

/// Soft sequence `P × E`, stored as an `L_max × d` matrix. Rows at
/// positions `>= length` hold the PAD embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftSequence {
    pub matrix: Mat<f64>,
    pub length: usize,
}

/// `Σ_σ exp(−d² / (2σ²))`
#[inline]
pub fn kernel_from_sq_dist(d2: f64, bandwidths: &[f64]) -> f64 {
    bandwidths.iter().map(|s| (-d2 / (2.0 * s * s)).exp()).sum()
}

pub fn rbf_kernel(a: &SoftSequence, b: &SoftSequence, config: &KernelConfig) -> Result<f64> {
    config.validate()?;
    if a.matrix.shape() != b.matrix.shape() {
        return Err(KestError::precondition("kernel inputs differ in shape"));
    }
    Ok(kernel_from_sq_dist(a.matrix.sq_dist(&b.matrix), &config.bandwidths))
}

/// Bank `(2^a · H)` for `a = −M..=M`, where `H` is the mean squared
/// distance over all `|D_o| × |D_pt|` cross pairs.
pub fn median_bandwidths_raw(d_o: &[Mat<f64>], d_pt: &[Mat<f64>], m: usize) -> Result<Vec<f64>> {
    if d_o.is_empty() || d_pt.is_empty() {
        return Err(KestError::precondition("median heuristic needs two non-empty sets"));
    }
    let mut total = 0.0;
    for a in d_o {
        for b in d_pt {
            total += a.sq_dist(b);
        }
    }
    let h = total / (d_o.len() * d_pt.len()) as f64;
    if h <= 0.0 {
        diagnostics::warn(Warning::ZeroBandwidth, "all cross distances are zero; bandwidths floored");
    }
    let m = m as i32;
    Ok((-m..=m).map(|a| (2f64.powi(a) * h).max(BANDWIDTH_FLOOR)).collect())
}

pub fn median_bandwidths(d_o: &[SoftSequence], d_pt: &[SoftSequence], m: usize) -> Result<KernelConfig> {
    let o: Vec<Mat<f64>> = d_o.iter().map(|s| s.matrix.clone()).collect();
    let t: Vec<Mat<f64>> = d_pt.iter().map(|s| s.matrix.clone()).collect();
    KernelConfig::new(m, median_bandwidths_raw(&o, &t, m)?)
}

/// Kernel loss
/// `1/(N(N−1)) Σ_{i≠j} k(x̃_i, x̃_j) − 2/N² Σ_{i,j} k(x̃_i, x̂_j)`.
pub fn loss_mmd(d_o: &[SoftSequence], d_pt: &[SoftSequence], config: &KernelConfig) -> Result<f64> {
    config.validate()?;
    if d_o.len() < 2 {
        return Err(KestError::precondition(format!("kernel loss needs N >= 2, got {}", d_o.len())));
    }
    if d_o.len() != d_pt.len() {
        return Err(KestError::precondition(format!(
            "kernel loss needs |D_o| = |D_pt|, got {} and {}",
            d_o.len(),
            d_pt.len()
        )));
    }
    let o: Vec<Mat<f64>> = d_o.iter().map(|s| s.matrix.clone()).collect();
    let t: Vec<Mat<f64>> = d_pt.iter().map(|s| s.matrix.clone()).collect();
    Ok(mmd_value_and_grad(&o, &t, &config.bandwidths).0)
}

/// Kernel loss and its gradient with respect to each generated sequence.
/// Pairs are visited in a fixed order so the result is bitwise reproducible.
pub fn mmd_value_and_grad(generated: &[Mat<f64>], targets: &[Mat<f64>], bandwidths: &[f64]) -> (f64, Vec<Mat<f64>>) {
    let n = generated.len();
    let nt = targets.len();
    assert!(n >= 2, "kernel loss needs at least two generated sequences");
    assert!(nt >= 1, "kernel loss needs targets");
    let (rows, cols) = generated[0].shape();
    let mut grads: Vec<Mat<f64>> = (0..n).map(|_| Mat::zeros(rows, cols)).collect();
    let within_w = 1.0 / (n * (n - 1)) as f64;
    let cross_w = 2.0 / (n * nt) as f64;

    let mut within = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let d2 = generated[i].sq_dist(&generated[j]);
            let k = kernel_from_sq_dist(d2, bandwidths);
            within += 2.0 * k;
            // d/dx_i of k(x_i, x_j) = −Σ_σ k_σ (x_i − x_j) / σ²
            let coef: f64 = bandwidths.iter().map(|s| (-d2 / (2.0 * s * s)).exp() / (s * s)).sum();
            let scale = 2.0 * within_w * coef;
            let (gi, gj) = pair_mut(&mut grads, i, j);
            for ((a, b), (ga, gb)) in generated[i]
                .data()
                .iter()
                .zip(generated[j].data())
                .zip(gi.data_mut().iter_mut().zip(gj.data_mut().iter_mut()))
            {
                let diff = a - b;
                *ga -= scale * diff;
                *gb += scale * diff;
            }
        }
    }

    let mut cross = 0.0;
    for (i, x) in generated.iter().enumerate() {
        for y in targets {
            let d2 = x.sq_dist(y);
            cross += kernel_from_sq_dist(d2, bandwidths);
            let coef: f64 = bandwidths.iter().map(|s| (-d2 / (2.0 * s * s)).exp() / (s * s)).sum();
            let scale = cross_w * coef;
            for ((a, b), g) in x.data().iter().zip(y.data()).zip(grads[i].data_mut()) {
                *g += scale * (a - b);
            }
        }
    }
    (within_w * within - cross_w * cross, grads)
}

fn pair_mut<T>(v: &mut [T], i: usize, j: usize) -> (&mut T, &mut T) {
    debug_assert!(i < j);
    let (lo, hi) = v.split_at_mut(j);
    (&mut lo[i], &mut hi[0])
}

//! Margins, ramp loss, margin errors, normalized margin distributions and
//! the two margin-bound evaluators.
//!
//! Threshold convention: a margin counts against threshold `γ` when
//! `ζ ≤ γ`. Ties at zero therefore count as errors.

use std::borrow::Borrow;
use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::run::RunRecord;

/// `[f(x)]_y − max_{j≠y} [f(x)]_j`.
pub fn margin(logits: &[f64], label: usize) -> Result<f64> {
    if logits.len() < 2 {
        return Err(Error::domain(format!(
            "margin needs at least 2 classes, got {}",
            logits.len()
        )));
    }
    if label >= logits.len() {
        return Err(Error::domain(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("non-finite logit"));
    }
    let other = logits
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != label)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(logits[label] - other)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RampParams {
    gamma1: f64,
    gamma2: f64,
}

impl RampParams {
    pub fn new(gamma1: f64, gamma2: f64) -> Result<Self> {
        if !(gamma1 >= 0.0) || !gamma2.is_finite() || !(gamma2 > gamma1) {
            return Err(Error::domain(format!(
                "ramp needs 0 <= gamma1 < gamma2, got ({gamma1}, {gamma2})"
            )));
        }
        Ok(RampParams { gamma1, gamma2 })
    }

    pub fn gamma1(&self) -> f64 {
        self.gamma1
    }

    pub fn gamma2(&self) -> f64 {
        self.gamma2
    }

    pub fn delta(&self) -> f64 {
        self.gamma2 - self.gamma1
    }
}

/// 1 below `γ1`, 0 above `γ2`, linear in between.
pub fn ramp_loss(zeta: f64, p: &RampParams) -> f64 {
    if zeta < p.gamma1 {
        1.0
    } else if zeta > p.gamma2 {
        0.0
    } else {
        (p.gamma2 - zeta) / p.delta()
    }
}

/// `1[ζ ≤ γ]`.
pub fn margin_error(zeta: f64, gamma: f64) -> f64 {
    if zeta <= gamma {
        1.0
    } else {
        0.0
    }
}

fn count_at_most(sorted: &[f64], gamma: f64) -> usize {
    sorted.partition_point(|&m| m <= gamma)
}

/// Fraction of `sorted` that is `≤ γ`; a right-continuous step function.
pub fn empirical_margin_cdf(sorted: &[f64], gamma: f64) -> Result<f64> {
    if sorted.is_empty() {
        return Err(Error::domain("empirical CDF of an empty sample"));
    }
    Ok(count_at_most(sorted, gamma) as f64 / sorted.len() as f64)
}

/// `inf{γ : P_n[ζ ≤ γ] ≥ q}`, attained at a sample value.
pub fn quantile_margin(sorted: &[f64], q: f64) -> Result<f64> {
    if sorted.is_empty() {
        return Err(Error::domain("quantile of an empty sample"));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::domain(format!("quantile level {q} outside [0, 1]")));
    }
    let n = sorted.len() as f64;
    // cdf(sorted[k]) is non-decreasing in k, so the first index reaching q is found by bisection.
    let (mut lo, mut hi) = (0, sorted.len() - 1);
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if (count_at_most(sorted, sorted[mid]) as f64 / n) < q {
            lo = mid + 1;
        } else {
            hi = mid;
        }
    }
    Ok(sorted[lo])
}

/// Constants entering the bound evaluators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundParams {
    pub num_classes: usize,
    pub n: usize,
    pub delta: f64,
    /// User-supplied stand-in for the Rademacher term (`4K·R_n` or `8K·R_n`).
    pub complexity: f64,
    pub tau: f64,
    /// Bound `M` on input norms.
    pub input_bound: f64,
    pub depth: usize,
}

impl Default for BoundParams {
    fn default() -> Self {
        BoundParams {
            num_classes: 2,
            n: 1,
            delta: 0.05,
            complexity: 0.0,
            tau: 0.01,
            input_bound: 1.0,
            depth: 1,
        }
    }
}

impl BoundParams {
    fn validate_common(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::domain("bound needs n >= 1"));
        }
        if !(self.complexity >= 0.0) || !self.complexity.is_finite() {
            return Err(Error::domain(format!(
                "complexity constant must be >= 0, got {}",
                self.complexity
            )));
        }
        Ok(())
    }
}

/// One normalized epoch: margins divided by `L_f`, sorted ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMargins {
    pub epoch: u64,
    pub lipschitz: f64,
    pub train: Vec<f64>,
    pub test: Option<Vec<f64>>,
    pub train_loss: Option<f64>,
    pub train_error: Option<f64>,
    pub test_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MarginDynamics {
    pub epochs: Vec<EpochMargins>,
}

fn sorted_normalized(raw: &[f64], lipschitz: f64) -> Vec<f64> {
    let mut v: Vec<f64> = raw.iter().map(|&z| z / lipschitz).collect();
    v.sort_by(f64::total_cmp);
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Divides every epoch's margins by its `L_f` and sorts them.
pub fn normalize_run<I>(records: I) -> Result<MarginDynamics>
where
    I: IntoIterator,
    I::Item: Borrow<RunRecord>,
{
    let mut seen = HashSet::new();
    let mut epochs = Vec::new();
    for rec in records {
        let rec = rec.borrow();
        if !seen.insert(rec.epoch) {
            return Err(Error::Data(format!("duplicate epoch {}", rec.epoch)));
        }
        let l = rec.lipschitz.ok_or_else(|| {
            Error::Data(format!(
                "epoch {} has no Lipschitz factor; resolve it from weights first",
                rec.epoch
            ))
        })?;
        if !(l > 0.0) || !l.is_finite() {
            return Err(Error::Data(format!(
                "epoch {} has non-positive Lipschitz factor {l}",
                rec.epoch
            )));
        }
        if rec.train_margins.is_empty() {
            return Err(Error::Data(format!(
                "epoch {} has no training margins",
                rec.epoch
            )));
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !finite(&rec.train_margins) || !rec.test_margins.as_deref().is_none_or(finite) {
            return Err(Error::Data(format!(
                "epoch {} has a non-finite margin",
                rec.epoch
            )));
        }
        epochs.push(EpochMargins {
            epoch: rec.epoch,
            lipschitz: l,
            train: sorted_normalized(&rec.train_margins, l),
            test: rec
                .test_margins
                .as_ref()
                .filter(|t| !t.is_empty())
                .map(|t| sorted_normalized(t, l)),
            train_loss: rec.train_loss,
            train_error: rec.train_error,
            test_error: rec.test_error,
        });
    }
    Ok(MarginDynamics { epochs })
}

impl MarginDynamics {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn epoch_ids(&self) -> Vec<u64> {
        self.epochs.iter().map(|e| e.epoch).collect()
    }

    pub fn has_test(&self) -> bool {
        !self.epochs.is_empty() && self.epochs.iter().all(|e| e.test.is_some())
    }

    pub fn get(&self, epoch: u64) -> Result<&EpochMargins> {
        self.epochs
            .iter()
            .find(|e| e.epoch == epoch)
            .ok_or_else(|| Error::domain(format!("epoch {epoch} not in run")))
    }

    fn split<'a>(&self, e: &'a EpochMargins, which: Split) -> Result<&'a [f64]> {
        match which {
            Split::Train => Ok(&e.train),
            Split::Test => e
                .test
                .as_deref()
                .ok_or_else(|| Error::Analysis(format!("epoch {} has no test margins", e.epoch))),
        }
    }

    /// All normalized margins of `which` across epochs, sorted.
    pub fn pooled(&self, which: &[Split]) -> Result<Vec<f64>> {
        let mut all = Vec::new();
        for e in &self.epochs {
            for &s in which {
                all.extend_from_slice(self.split(e, s)?);
            }
        }
        all.sort_by(f64::total_cmp);
        Ok(all)
    }
}

/// Per-epoch `P_n[ζ̃ ≤ γ]` on the chosen split.
pub fn margin_error_curve(dynamics: &MarginDynamics, gamma: f64, which: Split) -> Result<Vec<f64>> {
    dynamics
        .epochs
        .iter()
        .map(|e| empirical_margin_cdf(dynamics.split(e, which)?, gamma))
        .collect()
}

/// Per-epoch quantile margin `γ̂_{q,t}` of the training margins.
pub fn quantile_curve(dynamics: &MarginDynamics, q: f64) -> Result<Vec<f64>> {
    dynamics
        .epochs
        .iter()
        .map(|e| quantile_margin(&e.train, q))
        .collect()
}

/// Per-epoch `1/γ̂_{q,t}`; `None` where `γ̂_{q,t} ≤ 0`.
pub fn inverse_quantile_curve(dynamics: &MarginDynamics, q: f64) -> Result<Vec<Option<f64>>> {
    Ok(quantile_curve(dynamics, q)?
        .into_iter()
        .map(|g| (g > 0.0).then(|| 1.0 / g))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginBoundTerms {
    /// `P_n[ζ̃ ≤ γ2]`.
    pub empirical: f64,
    /// `C_H / Δ`.
    pub complexity: f64,
    /// `√(ln(1/δ) / 2n)`.
    pub confidence: f64,
    pub total: f64,
}

/// Right-hand side of the fixed-threshold normalized margin bound at one epoch.
///
/// Only an evaluator: the complexity constant is whatever the caller supplies.
pub fn theorem1_rhs(
    dynamics: &MarginDynamics,
    epoch: u64,
    ramp: &RampParams,
    params: &BoundParams,
) -> Result<MarginBoundTerms> {
    params.validate_common()?;
    if !(params.delta > 0.0 && params.delta <= 1.0) {
        return Err(Error::domain(format!(
            "delta must lie in (0, 1], got {}",
            params.delta
        )));
    }
    let e = dynamics.get(epoch)?;
    let empirical = empirical_margin_cdf(&e.train, ramp.gamma2())?;
    let complexity = params.complexity / ramp.delta();
    let confidence = ((1.0 / params.delta).ln() / (2.0 * params.n as f64)).sqrt();
    Ok(MarginBoundTerms {
        empirical,
        complexity,
        confidence,
        total: empirical + complexity + confidence,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantileBoundTerms {
    pub quantile_margin: f64,
    pub q: f64,
    /// `√(ln(2/δ) / 2n)`.
    pub confidence: f64,
    /// `√(ln(log₂(4(M+l)/τ)) / n)`.
    pub stratification: f64,
    /// `q + confidence + stratification`.
    pub c_q: f64,
    /// `C_H / γ̂_{q,t}`.
    pub complexity: f64,
    pub total: f64,
    /// Set when `γ̂_{q,t} ≤ τ`, i.e. the bound's precondition fails.
    pub precondition_violated: bool,
}

/// Right-hand side of the quantile-margin bound at one epoch.
pub fn theorem2_rhs(
    dynamics: &MarginDynamics,
    epoch: u64,
    q: f64,
    params: &BoundParams,
) -> Result<QuantileBoundTerms> {
    params.validate_common()?;
    if !(params.delta > 0.0 && params.delta < 1.0) {
        return Err(Error::domain(format!(
            "delta must lie in (0, 1), got {}",
            params.delta
        )));
    }
    if !(params.tau > 0.0) || !(params.input_bound > 0.0) || params.depth == 0 {
        return Err(Error::domain(
            "need tau > 0, input bound M > 0 and depth >= 1",
        ));
    }
    let e = dynamics.get(epoch)?;
    let gamma = quantile_margin(&e.train, q)?;
    if !(gamma > 0.0) {
        return Err(Error::Analysis(format!(
            "quantile margin at q={q}, epoch {epoch} is {gamma}; the bound needs it positive"
        )));
    }
    let n = params.n as f64;
    let log2_arg = (4.0 * (params.input_bound + params.depth as f64) / params.tau).log2();
    if !(log2_arg >= 1.0) {
        return Err(Error::domain(format!(
            "log2(4(M+l)/tau) = {log2_arg} < 1 makes the stratification term undefined"
        )));
    }
    let confidence = ((2.0 / params.delta).ln() / (2.0 * n)).sqrt();
    let stratification = (log2_arg.ln() / n).sqrt();
    let c_q = q + confidence + stratification;
    let complexity = params.complexity / gamma;
    Ok(QuantileBoundTerms {
        quantile_margin: gamma,
        q,
        confidence,
        stratification,
        c_q,
        complexity,
        total: c_q + complexity,
        precondition_violated: gamma <= params.tau,
    })
}

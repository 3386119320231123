//! Rank correlations between margin dynamics, correlation heatmaps over
//! `(γ1, γ2)`, phase-transition detection, predictor selection, early-stop
//! suggestions and the dilemma flag.
//!
//! A correlation of a constant series is undefined and reported as `None`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::margin::{
    inverse_quantile_curve, margin_error_curve, quantile_curve, quantile_margin, MarginDynamics,
    Split,
};

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::domain(format!(
            "series lengths differ: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::domain("correlation needs at least 2 points"));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::domain("correlation of non-finite values"));
    }
    Ok(())
}

/// 1-based ranks with ties replaced by their average rank.
pub fn mid_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Pearson correlation of mid-ranks. `None` when either series is constant.
pub fn spearman_rho(x: &[f64], y: &[f64]) -> Result<Option<f64>> {
    check_pair(x, y)?;
    Ok(pearson(&mid_ranks(x), &mid_ranks(y)))
}

/// Kendall's τ-b over all pairs. `None` when either series is constant.
pub fn kendall_tau(x: &[f64], y: &[f64]) -> Result<Option<f64>> {
    check_pair(x, y)?;
    let n = x.len();
    let (mut concordant, mut discordant) = (0i64, 0i64);
    let (mut ties_x, mut ties_y) = (0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let dx = x[i].total_cmp(&x[j]) as i64;
            let dy = y[i].total_cmp(&y[j]) as i64;
            if dx == 0 {
                ties_x += 1;
            }
            if dy == 0 {
                ties_y += 1;
            }
            match dx * dy {
                1 => concordant += 1,
                -1 => discordant += 1,
                _ => {}
            }
        }
    }
    let n0 = (n * (n - 1) / 2) as i64;
    let denom = ((n0 - ties_x) as f64) * ((n0 - ties_y) as f64);
    if denom == 0.0 {
        return Ok(None);
    }
    Ok(Some(
        ((concordant - discordant) as f64 / denom.sqrt()).clamp(-1.0, 1.0),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub spearman_rho: Option<f64>,
    pub kendall_tau: Option<f64>,
    pub n_points: usize,
}

impl CorrelationResult {
    pub fn is_constant(&self) -> bool {
        self.spearman_rho.is_none()
    }
}

pub fn correlate(x: &[f64], y: &[f64]) -> Result<CorrelationResult> {
    Ok(CorrelationResult {
        spearman_rho: spearman_rho(x, y)?,
        kendall_tau: kendall_tau(x, y)?,
        n_points: x.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationHeatmap {
    /// Rows: thresholds for the test margin-error curves.
    pub gamma1_grid: Vec<f64>,
    /// Columns: thresholds for the training margin-error curves.
    pub gamma2_grid: Vec<f64>,
    pub spearman: Vec<Vec<Option<f64>>>,
    pub kendall: Vec<Vec<Option<f64>>>,
    pub method: String,
}

fn require_test(dynamics: &MarginDynamics) -> Result<()> {
    if dynamics.is_empty() {
        return Err(Error::Analysis("run has no epochs".into()));
    }
    if !dynamics.has_test() {
        return Err(Error::Analysis(
            "this analysis needs test margins at every epoch".into(),
        ));
    }
    Ok(())
}

/// `size` thresholds at evenly spaced quantiles of all normalized margins
/// (train and test, every epoch), from the minimum to the maximum. Repeated
/// values are dropped. A single point sits at the median.
pub fn default_gamma_grid(dynamics: &MarginDynamics, size: usize) -> Result<Vec<f64>> {
    if size == 0 {
        return Err(Error::domain("grid size must be at least 1"));
    }
    let splits: &[Split] = if dynamics.has_test() {
        &[Split::Train, Split::Test]
    } else {
        &[Split::Train]
    };
    let pooled = dynamics.pooled(splits)?;
    if pooled.is_empty() {
        return Err(Error::Analysis("no margins to build a grid from".into()));
    }
    if size == 1 {
        return Ok(vec![quantile_margin(&pooled, 0.5)?]);
    }
    let mut grid: Vec<f64> = Vec::with_capacity(size);
    for i in 0..size {
        let g = quantile_margin(&pooled, i as f64 / (size - 1) as f64)?;
        if grid.last().is_none_or(|&last| g > last) {
            grid.push(g);
        }
    }
    Ok(grid)
}

fn check_grid(name: &str, grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::domain(format!("{name} is empty")));
    }
    if grid.iter().any(|g| !g.is_finite()) || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::domain(format!(
            "{name} must be finite and strictly increasing"
        )));
    }
    Ok(())
}

/// Cell `(i, j)` correlates, over epochs, the test margin-error curve at
/// `γ1[i]` with the training margin-error curve at `γ2[j]`.
pub fn correlation_heatmap(
    dynamics: &MarginDynamics,
    gamma1_grid: &[f64],
    gamma2_grid: &[f64],
) -> Result<CorrelationHeatmap> {
    require_test(dynamics)?;
    check_grid("gamma1 grid", gamma1_grid)?;
    check_grid("gamma2 grid", gamma2_grid)?;
    if dynamics.len() < 2 {
        return Err(Error::Analysis(
            "correlations need at least 2 epochs".into(),
        ));
    }
    let test_curves = gamma1_grid
        .par_iter()
        .map(|&g| margin_error_curve(dynamics, g, Split::Test))
        .collect::<Result<Vec<_>>>()?;
    let train_curves = gamma2_grid
        .par_iter()
        .map(|&g| margin_error_curve(dynamics, g, Split::Train))
        .collect::<Result<Vec<_>>>()?;
    let cells = (0..gamma1_grid.len() * gamma2_grid.len())
        .into_par_iter()
        .map(|k| {
            let (i, j) = (k / gamma2_grid.len(), k % gamma2_grid.len());
            correlate(&test_curves[i], &train_curves[j])
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = |f: fn(&CorrelationResult) -> Option<f64>| {
        cells
            .chunks(gamma2_grid.len())
            .map(|row| row.iter().map(f).collect())
            .collect()
    };
    Ok(CorrelationHeatmap {
        gamma1_grid: gamma1_grid.to_vec(),
        gamma2_grid: gamma2_grid.to_vec(),
        spearman: rows(|c| c.spearman_rho),
        kendall: rows(|c| c.kendall_tau),
        method: "spearman".into(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    IncreaseThenDecrease,
    DecreaseThenIncrease,
    MonotoneUp,
    MonotoneDown,
    Flat,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// Width of the centered moving average; even widths are widened by one.
    pub window: usize,
    /// Minimum drop on both sides of an interior extremum, as a fraction of
    /// the smoothed curve's range.
    pub prominence: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            window: 5,
            prominence: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseDetection {
    /// Index of the interior extremum, when one passed the prominence test.
    pub transition: Option<usize>,
    pub direction: Direction,
    /// Drop from the extremum to the nearer-valued endpoint over the range.
    pub prominence: f64,
}

/// Centered moving average; the window shrinks near the ends.
pub fn moving_average(curve: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    (0..curve.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(curve.len() - 1);
            curve[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect()
}

pub fn detect_phase_transition(curve: &[f64], cfg: &DetectorConfig) -> Result<PhaseDetection> {
    if curve.len() < 3 {
        return Err(Error::domain(format!(
            "phase detection needs at least 3 points, got {}",
            curve.len()
        )));
    }
    if curve.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("phase detection on a non-finite curve"));
    }
    if cfg.window == 0 || !(cfg.prominence >= 0.0) {
        return Err(Error::domain("window must be >= 1 and prominence >= 0"));
    }
    let s = moving_average(curve, cfg.window);
    let last = s.len() - 1;
    let (mut imax, mut imin) = (0, 0);
    for (i, &v) in s.iter().enumerate() {
        if v > s[imax] {
            imax = i;
        }
        if v < s[imin] {
            imin = i;
        }
    }
    let range = s[imax] - s[imin];
    let scale = s.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if range <= 1e-12 * scale {
        return Ok(PhaseDetection {
            transition: None,
            direction: Direction::Flat,
            prominence: 0.0,
        });
    }
    let (first, end) = (s[0], s[last]);
    let peak = (s[imax] - first.max(end)) / range;
    let valley = (first.min(end) - s[imin]) / range;
    let interior = |i: usize| i > 0 && i < last;
    let hump = interior(imax) && peak >= cfg.prominence && peak > 0.0;
    let dip = interior(imin) && valley >= cfg.prominence && valley > 0.0;
    let det = if hump && (!dip || peak >= valley) {
        PhaseDetection {
            transition: Some(imax),
            direction: Direction::IncreaseThenDecrease,
            prominence: peak,
        }
    } else if dip {
        PhaseDetection {
            transition: Some(imin),
            direction: Direction::DecreaseThenIncrease,
            prominence: valley,
        }
    } else {
        let direction = if end > first {
            Direction::MonotoneUp
        } else if end < first {
            Direction::MonotoneDown
        } else {
            Direction::Flat
        };
        PhaseDetection {
            transition: None,
            direction,
            prominence: peak.max(valley).max(0.0),
        }
    };
    Ok(det)
}

pub const DEFAULT_Q_SET: [f64; 4] = [0.5, 0.7, 0.9, 0.95];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileDetection {
    pub q: f64,
    pub detection: PhaseDetection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DilemmaReport {
    pub flag: bool,
    pub per_q: Vec<QuantileDetection>,
    /// Detection on the per-epoch test error, when the run has one.
    pub test_error: Option<PhaseDetection>,
}

/// Per-epoch test error: the fraction of test margins `≤ 0` when test
/// margins exist, else the recorded `test_error` scalars if every epoch has one.
pub fn test_error_curve(dynamics: &MarginDynamics) -> Result<Option<Vec<f64>>> {
    if dynamics.has_test() {
        return margin_error_curve(dynamics, 0.0, Split::Test).map(Some);
    }
    Ok(dynamics.epochs.iter().map(|e| e.test_error).collect())
}

/// Quantile-margin curves of every level in `q_set`, each with its detection.
pub fn quantile_detections(
    dynamics: &MarginDynamics,
    q_set: &[f64],
    cfg: &DetectorConfig,
) -> Result<Vec<QuantileDetection>> {
    q_set
        .par_iter()
        .map(|&q| {
            let curve = quantile_curve(dynamics, q)?;
            Ok(QuantileDetection {
                q,
                detection: detect_phase_transition(&curve, cfg)?,
            })
        })
        .collect()
}

/// True when every quantile-margin curve in `q_set` improves monotonically
/// and, if the run has a test error, that error has an interior minimum.
pub fn breiman_dilemma_flag(
    dynamics: &MarginDynamics,
    q_set: &[f64],
    cfg: &DetectorConfig,
) -> Result<DilemmaReport> {
    if q_set.is_empty() {
        return Err(Error::domain("quantile set is empty"));
    }
    let per_q = quantile_detections(dynamics, q_set, cfg)?;
    let test_error = test_error_curve(dynamics)?
        .map(|c| detect_phase_transition(&c, cfg))
        .transpose()?;
    let uniform = per_q
        .iter()
        .all(|d| d.detection.direction == Direction::MonotoneUp);
    let u_shaped = test_error.is_none_or(|d| d.direction == Direction::DecreaseThenIncrease);
    Ok(DilemmaReport {
        flag: uniform && u_shaped,
        per_q,
        test_error,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridScore {
    pub value: f64,
    pub rho: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorSelection {
    pub gamma: Option<f64>,
    pub gamma_rho: Option<f64>,
    pub q: Option<f64>,
    pub q_rho: Option<f64>,
    pub gamma_scores: Vec<GridScore>,
    pub q_scores: Vec<GridScore>,
}

/// `0.01, 0.02, …, 0.99`.
pub fn default_q_grid() -> Vec<f64> {
    (1..100).map(|i| i as f64 / 100.0).collect()
}

fn best(scores: &[GridScore]) -> Option<&GridScore> {
    scores
        .iter()
        .fold(None, |acc: Option<&GridScore>, s| match (acc, s.rho) {
            (_, None) => acc,
            (Some(a), Some(r)) if a.rho.is_some_and(|ar| ar >= r) => acc,
            _ => Some(s),
        })
}

/// Picks the threshold `γ*` whose training margin-error curve, and the level
/// `q*` whose inverse quantile-margin curve, rank-correlate best with the
/// test error. Ties go to the smaller grid value.
pub fn select_predictor(
    dynamics: &MarginDynamics,
    gamma_grid: &[f64],
    q_grid: &[f64],
) -> Result<PredictorSelection> {
    require_test(dynamics)?;
    if dynamics.len() < 2 {
        return Err(Error::Analysis(
            "predictor selection needs at least 2 epochs".into(),
        ));
    }
    check_grid("gamma grid", gamma_grid)?;
    check_grid("q grid", q_grid)?;
    let target = margin_error_curve(dynamics, 0.0, Split::Test)?;
    let gamma_scores = gamma_grid
        .par_iter()
        .map(|&g| {
            let curve = margin_error_curve(dynamics, g, Split::Train)?;
            Ok(GridScore {
                value: g,
                rho: spearman_rho(&curve, &target)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let q_scores = q_grid
        .par_iter()
        .map(|&q| {
            let inv = inverse_quantile_curve(dynamics, q)?;
            let (xs, ys): (Vec<f64>, Vec<f64>) = inv
                .iter()
                .zip(&target)
                .filter_map(|(v, &t)| v.map(|v| (v, t)))
                .unzip();
            let rho = if xs.len() >= 2 {
                spearman_rho(&xs, &ys)?
            } else {
                None
            };
            Ok(GridScore { value: q, rho })
        })
        .collect::<Result<Vec<_>>>()?;
    let g = best(&gamma_scores).cloned();
    let q = best(&q_scores).cloned();
    Ok(PredictorSelection {
        gamma: g.as_ref().map(|s| s.value),
        gamma_rho: g.and_then(|s| s.rho),
        q: q.as_ref().map(|s| s.value),
        q_rho: q.and_then(|s| s.rho),
        gamma_scores,
        q_scores,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveMinima {
    /// Index of the global minimum; the earliest one on ties.
    pub argmin: usize,
    /// First index of every local minimum plateau, endpoints included.
    pub local_minima: Vec<usize>,
}

/// Minima of a curve with undefined entries skipped.
pub fn curve_minima(curve: &[Option<f64>]) -> Result<CurveMinima> {
    if curve.len() < 3 {
        return Err(Error::Analysis(format!(
            "stopping suggestion needs at least 3 epochs, got {}",
            curve.len()
        )));
    }
    let defined: Vec<(usize, f64)> = curve
        .iter()
        .enumerate()
        .filter_map(|(i, v)| v.filter(|x| x.is_finite()).map(|x| (i, x)))
        .collect();
    if defined.is_empty() {
        return Err(Error::Analysis(
            "proxy curve is undefined at every epoch".into(),
        ));
    }
    let argmin = defined
        .iter()
        .fold(defined[0], |m, &p| if p.1 < m.1 { p } else { m })
        .0;
    // Collapse equal neighbours into plateaus, then keep plateaus lower than both sides.
    let mut plateaus: Vec<(usize, f64)> = Vec::new();
    for &(i, v) in &defined {
        if plateaus.last().is_none_or(|&(_, pv)| pv != v) {
            plateaus.push((i, v));
        }
    }
    let local_minima = (0..plateaus.len())
        .filter(|&k| {
            let v = plateaus[k].1;
            (k == 0 || plateaus[k - 1].1 > v) && (k + 1 == plateaus.len() || plateaus[k + 1].1 > v)
        })
        .map(|k| plateaus[k].0)
        .collect();
    Ok(CurveMinima {
        argmin,
        local_minima,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum StopProxy {
    /// `1/γ̂_{q,t}`.
    InverseQuantile(f64),
    /// Training margin error at `γ`.
    MarginError(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StopSuggestion {
    pub proxy: StopProxy,
    pub epoch: u64,
    pub index: usize,
    pub local_minima_epochs: Vec<u64>,
    pub curve: Vec<Option<f64>>,
}

pub fn proxy_curve(dynamics: &MarginDynamics, proxy: StopProxy) -> Result<Vec<Option<f64>>> {
    match proxy {
        StopProxy::InverseQuantile(q) => inverse_quantile_curve(dynamics, q),
        StopProxy::MarginError(g) => Ok(margin_error_curve(dynamics, g, Split::Train)?
            .into_iter()
            .map(Some)
            .collect()),
    }
}

/// The epoch minimizing the proxy, plus every local minimum.
pub fn suggest_early_stop(dynamics: &MarginDynamics, proxy: StopProxy) -> Result<StopSuggestion> {
    let curve = proxy_curve(dynamics, proxy)?;
    let m = curve_minima(&curve)?;
    let ids = dynamics.epoch_ids();
    Ok(StopSuggestion {
        proxy,
        epoch: ids[m.argmin],
        index: m.argmin,
        local_minima_epochs: m.local_minima.iter().map(|&i| ids[i]).collect(),
        curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::margin::normalize_run;
    use crate::run::RunRecord;

    fn det(curve: &[f64], window: usize) -> PhaseDetection {
        detect_phase_transition(
            curve,
            &DetectorConfig {
                window,
                prominence: 0.05,
            },
        )
        .unwrap()
    }

    #[test]
    fn correlation_examples() {
        assert_eq!(
            spearman_rho(&[1., 2., 3.], &[10., 20., 30.]).unwrap(),
            Some(1.0)
        );
        assert_eq!(
            spearman_rho(&[1., 2., 3.], &[3., 2., 1.]).unwrap(),
            Some(-1.0)
        );
        assert_eq!(
            kendall_tau(&[1., 2., 3.], &[10., 20., 30.]).unwrap(),
            Some(1.0)
        );
        assert_eq!(
            kendall_tau(&[1., 2., 3.], &[3., 2., 1.]).unwrap(),
            Some(-1.0)
        );
        assert_eq!(spearman_rho(&[1., 1., 1.], &[1., 2., 3.]).unwrap(), None);
        assert_eq!(kendall_tau(&[1., 2., 3.], &[5., 5., 5.]).unwrap(), None);
        assert!(spearman_rho(&[1., 2.], &[1.]).is_err());
        assert!(kendall_tau(&[1.], &[1.]).is_err());
    }

    #[test]
    fn mid_ranks_average_ties() {
        assert_eq!(mid_ranks(&[10., 20., 10., 30.]), vec![1.5, 3.0, 1.5, 4.0]);
    }

    #[test]
    fn kendall_with_ties_matches_hand_count() {
        // Pairs: x=[1,2,2,3], y=[1,3,2,3]. C=4, D=0, ties_x=1, ties_y=1, n0=6.
        let t = kendall_tau(&[1., 2., 2., 3.], &[1., 3., 2., 3.])
            .unwrap()
            .unwrap();
        assert!((t - 4.0 / 5.0).abs() < 1e-15);
    }

    #[test]
    fn detector_examples() {
        let d = det(&[1., 2., 3., 2., 1.], 1);
        assert_eq!(d.transition, Some(2));
        assert_eq!(d.direction, Direction::IncreaseThenDecrease);
        let d = det(&[1., 2., 3., 4., 5.], 5);
        assert_eq!((d.transition, d.direction), (None, Direction::MonotoneUp));
        assert_eq!(det(&[5., 4., 3.], 1).direction, Direction::MonotoneDown);
        assert_eq!(det(&[2.; 6], 3).direction, Direction::Flat);
        let d = det(&[3., 1., 0., 1., 3.], 1);
        assert_eq!(
            (d.transition, d.direction),
            (Some(2), Direction::DecreaseThenIncrease)
        );
        assert!(detect_phase_transition(&[1., 2.], &DetectorConfig::default()).is_err());
    }

    #[test]
    fn detector_ignores_small_end_dip() {
        // A 2% sag at the end of a rising curve stays below the 5% prominence.
        let mut c: Vec<f64> = (0..50).map(f64::from).collect();
        c.push(48.0);
        assert_eq!(det(&c, 1).direction, Direction::MonotoneUp);
    }

    #[test]
    fn minima_examples() {
        let m = curve_minima(&[Some(3.), Some(1.), Some(2.)]).unwrap();
        assert_eq!(m.argmin, 1);
        let m = curve_minima(&[Some(3.), Some(1.), Some(2.), Some(1.), Some(3.)]).unwrap();
        assert_eq!(m.argmin, 1);
        assert_eq!(m.local_minima, vec![1, 3]);
        let m = curve_minima(&[Some(2.), None, Some(1.), Some(1.), Some(4.)]).unwrap();
        assert_eq!((m.argmin, m.local_minima), (2, vec![2]));
        assert!(matches!(
            curve_minima(&[None, None, None]),
            Err(Error::Analysis(_))
        ));
        assert!(curve_minima(&[Some(1.)]).is_err());
    }

    fn run(train: &[Vec<f64>], test: &[Vec<f64>]) -> MarginDynamics {
        normalize_run(
            train
                .iter()
                .zip(test)
                .enumerate()
                .map(|(t, (a, b))| RunRecord::new(t as u64, 1.0, a.clone()).with_test(b.clone()))
                .collect::<Vec<_>>(),
        )
        .unwrap()
    }

    #[test]
    fn heatmap_identical_dynamics_has_unit_diagonal() {
        let epochs: Vec<Vec<f64>> = (0..6)
            .map(|t| (0..10).map(|i| (i as f64 - 4.0) + 0.3 * t as f64).collect())
            .collect();
        let d = run(&epochs, &epochs);
        let grid = [-2.0, 0.0, 1.5];
        let h = correlation_heatmap(&d, &grid, &grid).unwrap();
        for i in 0..3 {
            assert_eq!(h.spearman[i][i], Some(1.0));
        }
        assert!(correlation_heatmap(&d, &[1.0, 0.0], &grid).is_err());
    }

    #[test]
    fn heatmap_reversed_dynamics_is_negative() {
        let errors = |k: usize| {
            (0..5)
                .map(|i| if i < k { -1.0 } else { 1.0 })
                .collect::<Vec<f64>>()
        };
        let train: Vec<Vec<f64>> = (0..5).map(errors).collect();
        let test: Vec<Vec<f64>> = (0..5).rev().map(errors).collect();
        let h = correlation_heatmap(&run(&train, &test), &[0.0], &[0.0]).unwrap();
        assert_eq!(h.spearman[0][0], Some(-1.0));
    }

    #[test]
    fn heatmap_requires_test() {
        let d = normalize_run(vec![
            RunRecord::new(0, 1.0, vec![1.0]),
            RunRecord::new(1, 1.0, vec![2.0]),
        ])
        .unwrap();
        assert!(matches!(
            correlation_heatmap(&d, &[0.0], &[0.0]),
            Err(Error::Analysis(_))
        ));
    }

    #[test]
    fn dilemma_flag_definition() {
        // γ̂ rises for every q while test error is U-shaped.
        let train: Vec<Vec<f64>> = (0..9)
            .map(|t| (1..=10).map(|i| i as f64 * (1.0 + t as f64)).collect())
            .collect();
        let err = [5, 4, 3, 2, 1, 2, 3, 4, 5];
        let test: Vec<Vec<f64>> = err
            .iter()
            .map(|&k| (0..10).map(|i| if i < k { -1.0 } else { 1.0 }).collect())
            .collect();
        let cfg = DetectorConfig {
            window: 1,
            prominence: 0.05,
        };
        let r = breiman_dilemma_flag(&run(&train, &test), &DEFAULT_Q_SET, &cfg).unwrap();
        assert!(r.flag);

        // Largest quantile peaks mid-run: no flag.
        let mut humped = train.clone();
        for (t, e) in humped.iter_mut().enumerate() {
            e[9] = 100.0 - (t as f64 - 4.0).powi(2) * 10.0;
            e.sort_by(f64::total_cmp);
        }
        let r = breiman_dilemma_flag(&run(&humped, &test), &[0.95], &cfg).unwrap();
        assert!(!r.flag);
    }

    #[test]
    fn planted_predictor_is_selected() {
        // Train margin error at γ=0.5 equals the test error exactly.
        let err = [4, 3, 2, 3, 4, 5];
        let train: Vec<Vec<f64>> = err
            .iter()
            .map(|&k| {
                (0..10)
                    .map(|i| if i < k { 0.2 } else { 0.1 * i as f64 + 5.0 })
                    .collect()
            })
            .collect();
        let test: Vec<Vec<f64>> = err
            .iter()
            .map(|&k| (0..10).map(|i| if i < k { -1.0 } else { 1.0 }).collect())
            .collect();
        let d = run(&train, &test);
        let s = select_predictor(&d, &[0.1, 0.5, 10.0], &[0.5]).unwrap();
        assert_eq!(s.gamma, Some(0.5));
        assert_eq!(s.gamma_rho, Some(1.0));
        assert_eq!(s.gamma_scores[0].rho, None);
    }

    #[test]
    fn constant_test_error_selects_nothing() {
        let train: Vec<Vec<f64>> = (0..4).map(|t| vec![t as f64, 1.0]).collect();
        let test = vec![vec![1.0, 2.0]; 4];
        let s = select_predictor(&run(&train, &test), &[0.5], &[0.5]).unwrap();
        assert_eq!((s.gamma, s.q), (None, None));
    }

    #[test]
    fn early_stop_reports_epoch_ids() {
        let d = normalize_run(
            [(10u64, 1.0), (20, 3.0), (30, 2.0)]
                .iter()
                .map(|&(e, m)| RunRecord::new(e, 1.0, vec![m]))
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let s = suggest_early_stop(&d, StopProxy::InverseQuantile(0.5)).unwrap();
        assert_eq!((s.epoch, s.index), (20, 1));
    }

    #[test]
    fn default_grid_spans_pooled_margins() {
        let d = run(
            &[vec![0.0, 1.0], vec![2.0, 3.0]],
            &[vec![-1.0, 4.0], vec![4.0, 4.0]],
        );
        let g = default_gamma_grid(&d, 40).unwrap();
        assert_eq!(g.first(), Some(&-1.0));
        assert_eq!(g.last(), Some(&4.0));
        assert!(g.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(default_gamma_grid(&d, 1).unwrap().len(), 1);
    }
}

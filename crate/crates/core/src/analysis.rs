//! End-to-end analysis of one normalized run: predictor selection, curves,
//! stopping suggestions, phase detection and bound tables.

use serde::{Deserialize, Serialize};

use crate::dynamics::{
    breiman_dilemma_flag, correlate, correlation_heatmap, default_gamma_grid, default_q_grid,
    proxy_curve, select_predictor, suggest_early_stop, test_error_curve, CorrelationHeatmap,
    CorrelationResult, DetectorConfig, DilemmaReport, PredictorSelection, StopProxy,
    StopSuggestion, DEFAULT_Q_SET,
};
use crate::error::{Error, Result};
use crate::margin::{
    inverse_quantile_curve, margin_error_curve, quantile_curve, theorem1_rhs, theorem2_rhs,
    BoundParams, MarginBoundTerms, MarginDynamics, QuantileBoundTerms, RampParams, Split,
};
use crate::run::RunManifest;

pub const REPORT_VERSION: u32 = 1;
pub const DEFAULT_Q: f64 = 0.95;
pub const DEFAULT_GRID_SIZE: usize = 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    /// Quantile level for the stopping proxy and the quantile bound. `None`
    /// uses the selected `q*` when selection is possible, else [`DEFAULT_Q`].
    pub q: Option<f64>,
    /// Margin threshold. `None` means automatic selection.
    pub gamma: Option<f64>,
    pub grid_size: usize,
    pub q_grid: Vec<f64>,
    pub q_set: Vec<f64>,
    pub detector: DetectorConfig,
    pub complexity: f64,
    pub delta: f64,
    pub tau: f64,
    pub input_bound: f64,
    pub depth: usize,
    pub heatmap: bool,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            q: None,
            gamma: None,
            grid_size: DEFAULT_GRID_SIZE,
            q_grid: default_q_grid(),
            q_set: DEFAULT_Q_SET.to_vec(),
            detector: DetectorConfig::default(),
            complexity: 0.0,
            delta: 0.05,
            tau: 0.01,
            input_bound: 1.0,
            depth: 1,
            heatmap: true,
        }
    }
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(q) = self.q {
            if !(q > 0.0 && q <= 1.0) {
                return Err(Error::validation(
                    "q",
                    format!("must lie in (0, 1], got {q}"),
                ));
            }
        }
        if let Some(g) = self.gamma {
            if !g.is_finite() {
                return Err(Error::validation("gamma", "must be finite"));
            }
        }
        if self.grid_size == 0 {
            return Err(Error::validation("grid_size", "must be at least 1"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::validation(
                "delta",
                format!("must lie in (0, 1), got {}", self.delta),
            ));
        }
        if !(self.complexity >= 0.0) || !self.complexity.is_finite() {
            return Err(Error::validation("complexity", "must be finite and >= 0"));
        }
        if !(self.tau > 0.0) {
            return Err(Error::validation("tau", "must be positive"));
        }
        if !(self.input_bound > 0.0) {
            return Err(Error::validation("input_bound", "must be positive"));
        }
        if self.depth == 0 {
            return Err(Error::validation("depth", "must be at least 1"));
        }
        if self.detector.window == 0 || !(self.detector.prominence >= 0.0) {
            return Err(Error::validation(
                "detector",
                "window must be >= 1 and prominence >= 0",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub num_classes: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub normalization_method: String,
    pub epochs: usize,
    pub first_epoch: u64,
    pub last_epoch: u64,
    pub has_test_margins: bool,
}

/// What the analysis actually used after defaults and selection were resolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedSettings {
    pub q: f64,
    pub q_source: ValueSource,
    pub gamma: Option<f64>,
    pub gamma_source: ValueSource,
    pub delta: f64,
    pub complexity: f64,
    pub tau: f64,
    pub input_bound: f64,
    pub depth: usize,
    pub detector: DetectorConfig,
    pub q_set: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueSource {
    User,
    Selected,
    Default,
    Unavailable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyCorrelation {
    pub proxy: StopProxy,
    pub with_test_error: CorrelationResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginBoundRow {
    pub epoch: u64,
    pub terms: MarginBoundTerms,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileBoundRow {
    pub epoch: u64,
    pub terms: Option<QuantileBoundTerms>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundTables {
    /// Ramp `(0, γ)`; absent when no positive `γ` is in use.
    pub margin_bound: Option<Vec<MarginBoundRow>>,
    pub quantile_bound: Vec<QuantileBoundRow>,
}

/// Per-epoch curves, aligned with `epochs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curves {
    pub epochs: Vec<u64>,
    pub lipschitz: Vec<f64>,
    pub train_error: Vec<f64>,
    pub test_error: Option<Vec<f64>>,
    pub train_margin_error: Option<Vec<f64>>,
    pub quantile_margin: Vec<f64>,
    pub inverse_quantile_margin: Vec<Option<f64>>,
    pub train_loss: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub report_version: u32,
    pub run: RunSummary,
    pub settings: ResolvedSettings,
    pub selection: Option<PredictorSelection>,
    pub correlations: Vec<ProxyCorrelation>,
    pub stop: Vec<StopSuggestion>,
    pub dilemma: Option<DilemmaReport>,
    pub bounds: BoundTables,
    pub curves: Curves,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisBundle {
    pub report: AnalysisReport,
    pub heatmap: Option<CorrelationHeatmap>,
}

fn summary(manifest: &RunManifest, d: &MarginDynamics) -> RunSummary {
    let ids = d.epoch_ids();
    RunSummary {
        num_classes: manifest.num_classes,
        n_train: manifest.n_train,
        n_test: manifest.n_test,
        normalization_method: manifest.normalization_method.clone(),
        epochs: d.len(),
        first_epoch: ids[0],
        last_epoch: ids[ids.len() - 1],
        has_test_margins: d.has_test(),
    }
}

/// Runs every analysis that the run's length and contents allow. Steps that
/// cannot run are explained in `notes` instead of failing the whole report.
pub fn analyze_run(
    manifest: &RunManifest,
    d: &MarginDynamics,
    cfg: &AnalysisConfig,
) -> Result<AnalysisBundle> {
    cfg.validate()?;
    if d.is_empty() {
        return Err(Error::Analysis("run has no epochs".into()));
    }
    let mut notes = Vec::new();
    let has_test = d.has_test();
    if !has_test {
        notes.push(if d.epochs.iter().any(|e| e.test.is_some()) {
            "test margins are missing at some epochs; test-dependent analyses were skipped"
                .to_string()
        } else {
            "run has no test margins; predictor selection and heatmaps were skipped".to_string()
        });
    }

    let selection = if has_test && d.len() >= 2 {
        let grid = default_gamma_grid(d, cfg.grid_size)?;
        Some(select_predictor(d, &grid, &cfg.q_grid)?)
    } else {
        if has_test {
            notes.push("predictor selection needs at least 2 epochs".into());
        }
        None
    };

    let (q, q_source) = match (cfg.q, selection.as_ref().and_then(|s| s.q)) {
        (Some(q), _) => (q, ValueSource::User),
        (None, Some(q)) => (q, ValueSource::Selected),
        (None, None) => (DEFAULT_Q, ValueSource::Default),
    };
    let (gamma, gamma_source) = match (cfg.gamma, selection.as_ref().and_then(|s| s.gamma)) {
        (Some(g), _) => (Some(g), ValueSource::User),
        (None, Some(g)) => (Some(g), ValueSource::Selected),
        (None, None) => {
            notes.push(
                "automatic threshold selection requires test margins at every epoch and at least 2 epochs; \
                 pass an explicit gamma to get the margin-error proxy"
                    .into(),
            );
            (None, ValueSource::Unavailable)
        }
    };

    let test_error = test_error_curve(d)?;
    let mut proxies = vec![StopProxy::InverseQuantile(q)];
    proxies.extend(gamma.map(StopProxy::MarginError));

    let mut stop = Vec::new();
    let mut correlations = Vec::new();
    for &proxy in &proxies {
        if d.len() < 3 {
            continue;
        }
        match suggest_early_stop(d, proxy) {
            Ok(s) => stop.push(s),
            Err(Error::Analysis(msg)) => notes.push(format!("{}: {msg}", proxy_label(proxy))),
            Err(e) => return Err(e),
        }
        if let Some(te) = &test_error {
            let curve = proxy_curve(d, proxy)?;
            let (xs, ys): (Vec<f64>, Vec<f64>) = curve
                .iter()
                .zip(te)
                .filter_map(|(v, &t)| v.map(|v| (v, t)))
                .unzip();
            if xs.len() >= 2 {
                correlations.push(ProxyCorrelation {
                    proxy,
                    with_test_error: correlate(&xs, &ys)?,
                });
            }
        }
    }
    if d.len() < 3 {
        notes.push(format!(
            "stopping suggestions and phase detection need at least 3 epochs, run has {}",
            d.len()
        ));
    }

    let dilemma = if d.len() >= 3 {
        Some(breiman_dilemma_flag(d, &cfg.q_set, &cfg.detector)?)
    } else {
        None
    };

    let params = BoundParams {
        num_classes: manifest.num_classes,
        n: manifest.n_train.max(1),
        delta: cfg.delta,
        complexity: cfg.complexity,
        tau: cfg.tau,
        input_bound: cfg.input_bound,
        depth: cfg.depth,
    };
    let ids = d.epoch_ids();
    let margin_bound = match gamma {
        Some(g) if g > 0.0 => {
            let ramp = RampParams::new(0.0, g)?;
            Some(
                ids.iter()
                    .map(|&epoch| {
                        Ok(MarginBoundRow {
                            epoch,
                            terms: theorem1_rhs(d, epoch, &ramp, &params)?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?,
            )
        }
        Some(g) => {
            notes.push(format!(
                "margin bound table skipped: threshold {g} is not positive"
            ));
            None
        }
        None => None,
    };
    let quantile_bound = ids
        .iter()
        .map(|&epoch| match theorem2_rhs(d, epoch, q, &params) {
            Ok(terms) => Ok(QuantileBoundRow {
                epoch,
                terms: Some(terms),
                reason: None,
            }),
            Err(Error::Analysis(msg)) => Ok(QuantileBoundRow {
                epoch,
                terms: None,
                reason: Some(msg),
            }),
            Err(e) => Err(e),
        })
        .collect::<Result<Vec<_>>>()?;

    let curves = Curves {
        epochs: ids.clone(),
        lipschitz: d.epochs.iter().map(|e| e.lipschitz).collect(),
        train_error: margin_error_curve(d, 0.0, Split::Train)?,
        test_error: test_error.clone(),
        train_margin_error: gamma
            .map(|g| margin_error_curve(d, g, Split::Train))
            .transpose()?,
        quantile_margin: quantile_curve(d, q)?,
        inverse_quantile_margin: inverse_quantile_curve(d, q)?,
        train_loss: d.epochs.iter().map(|e| e.train_loss).collect(),
    };

    let heatmap = if cfg.heatmap && has_test && d.len() >= 2 {
        let grid = default_gamma_grid(d, cfg.grid_size)?;
        Some(correlation_heatmap(d, &grid, &grid)?)
    } else {
        None
    };

    Ok(AnalysisBundle {
        report: AnalysisReport {
            report_version: REPORT_VERSION,
            run: summary(manifest, d),
            settings: ResolvedSettings {
                q,
                q_source,
                gamma,
                gamma_source,
                delta: cfg.delta,
                complexity: cfg.complexity,
                tau: cfg.tau,
                input_bound: cfg.input_bound,
                depth: cfg.depth,
                detector: cfg.detector,
                q_set: cfg.q_set.clone(),
            },
            selection,
            correlations,
            stop,
            dilemma,
            bounds: BoundTables {
                margin_bound,
                quantile_bound,
            },
            curves,
            notes,
        },
        heatmap,
    })
}

fn proxy_label(p: StopProxy) -> String {
    match p {
        StopProxy::InverseQuantile(q) => format!("inverse quantile margin (q={q})"),
        StopProxy::MarginError(g) => format!("training margin error (gamma={g})"),
    }
}

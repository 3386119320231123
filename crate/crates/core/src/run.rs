//! Per-epoch records of a training run, as stored in run files.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// First line of a run file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub num_classes: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub normalization_method: String,
    #[serde(default)]
    pub creator: String,
    #[serde(default)]
    pub notes: String,
    /// Fields this version does not know about, kept for round-tripping.
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl RunManifest {
    pub fn new(
        num_classes: usize,
        n_train: usize,
        n_test: usize,
        normalization_method: impl Into<String>,
    ) -> Self {
        RunManifest {
            schema_version: SCHEMA_VERSION,
            num_classes,
            n_train,
            n_test,
            normalization_method: normalization_method.into(),
            creator: String::new(),
            notes: String::new(),
            extra: Map::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::validation(
                "schema_version",
                format!(
                    "unsupported version {} (expected {SCHEMA_VERSION})",
                    self.schema_version
                ),
            ));
        }
        if self.num_classes < 2 {
            return Err(Error::validation(
                "num_classes",
                format!("need at least 2 classes, got {}", self.num_classes),
            ));
        }
        Ok(())
    }
}

/// One epoch of a run: raw (unnormalized) margins plus scalar metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub epoch: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lipschitz: Option<f64>,
    /// Directory with a network description, relative to the run file, used
    /// to compute `lipschitz` when it is absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<String>,
    pub train_margins: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_margins: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_error: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_error: Option<f64>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl RunRecord {
    pub fn new(epoch: u64, lipschitz: f64, train_margins: Vec<f64>) -> Self {
        RunRecord {
            epoch,
            lipschitz: Some(lipschitz),
            weights: None,
            train_margins,
            test_margins: None,
            train_loss: None,
            train_error: None,
            test_error: None,
            extra: Map::new(),
        }
    }

    pub fn with_test(mut self, test_margins: Vec<f64>) -> Self {
        self.test_margins = Some(test_margins);
        self
    }

    /// Checks a single record in isolation (uniqueness is checked by readers).
    pub fn validate(&self) -> Result<()> {
        if self.train_margins.is_empty() {
            return Err(Error::validation("train_margins", "must not be empty"));
        }
        if self.train_margins.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation(
                "train_margins",
                "contains a non-finite value",
            ));
        }
        if let Some(t) = &self.test_margins {
            if t.is_empty() {
                return Err(Error::validation(
                    "test_margins",
                    "must not be empty when present",
                ));
            }
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::validation(
                    "test_margins",
                    "contains a non-finite value",
                ));
            }
        }
        match (self.lipschitz, &self.weights) {
            (Some(l), _) if !(l > 0.0) || !l.is_finite() => Err(Error::validation(
                "lipschitz",
                format!("must be positive and finite, got {l}"),
            )),
            (None, None) => Err(Error::validation(
                "lipschitz",
                "missing, and no `weights` directory to compute it from",
            )),
            _ => Ok(()),
        }
    }
}

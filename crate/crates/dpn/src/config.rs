//! Run configuration: a flat JSON document mapping directly onto the
//! pairwise model parameters plus solver settings.
//!
//! The file is deliberately flat — every key is a scalar or one flat array
//! — so configs diff cleanly and survive hand editing. Label count is not
//! part of the config: it comes from the probability tensor at run time,
//! and [`RunConfig::to_pairwise`] checks the context array against it.

use crate::energy::{check_epsilon, ContextFilterBank, PairwiseConfig, DEFAULT_EPSILON};
use crate::error::{DpnError, Result};
use crate::links::WindowSpec;
use crate::meanfield::Schedule;
use serde::{Deserialize, Serialize};
use std::path::Path;

fn default_epsilon() -> f32 {
    DEFAULT_EPSILON
}

fn default_schedule() -> String {
    "sync".to_string()
}

fn default_max_iters() -> usize {
    10
}

fn default_tol() -> f32 {
    1e-4
}

fn default_workers() -> usize {
    1
}

/// Everything a run needs beyond its input tensors.
///
/// `local_m`/`local_t` are the spatial and temporal sides of the
/// distance-weighting window, `context_n`/`context_t` those of the label
/// context window; all four must be odd. `contexts`, when present, is the
/// flat context filter bank in `(mixture, own label, tap, neighbor label)`
/// order and its length must equal `mixtures · L · taps · L` for the label
/// count `L` of the data; when absent the bank is all zeros.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub omega1: f32,
    pub omega2: f32,
    pub local_m: usize,
    pub local_t: usize,
    pub context_n: usize,
    pub context_t: usize,
    pub mixtures: usize,
    pub lin_a: f32,
    pub lin_b: f32,
    #[serde(default = "default_epsilon")]
    pub epsilon: f32,
    /// `"sync"` or `"seq"`.
    #[serde(default = "default_schedule")]
    pub schedule: String,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_tol")]
    pub tol: f32,
    /// Worker threads for internal parallelism; 1 keeps runs serial.
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contexts: Option<Vec<f32>>,
}

impl RunConfig {
    /// Validate every field against its own invariant. Errors name the
    /// offending field.
    pub fn validate(&self) -> Result<()> {
        for (field, value) in [
            ("omega1", self.omega1),
            ("omega2", self.omega2),
            ("lin_a", self.lin_a),
            ("lin_b", self.lin_b),
        ] {
            if !value.is_finite() {
                return Err(invalid(field, format!("must be finite, got {value}")));
            }
        }
        for (field, side) in [
            ("local_m", self.local_m),
            ("local_t", self.local_t),
            ("context_n", self.context_n),
            ("context_t", self.context_t),
        ] {
            if side == 0 || side % 2 == 0 {
                return Err(invalid(field, format!("window side must be odd, got {side}")));
            }
        }
        if self.mixtures == 0 {
            return Err(invalid("mixtures", "must be at least 1".into()));
        }
        check_epsilon(self.epsilon).map_err(|_| {
            invalid(
                "epsilon",
                format!("must lie strictly inside (0, 1), got {}", self.epsilon),
            )
        })?;
        if self.schedule != "sync" && self.schedule != "seq" {
            return Err(invalid(
                "schedule",
                format!("must be \"sync\" or \"seq\", got \"{}\"", self.schedule),
            ));
        }
        if self.max_iters == 0 {
            return Err(invalid("max_iters", "must be at least 1".into()));
        }
        if !self.tol.is_finite() || self.tol <= 0.0 {
            return Err(invalid(
                "tol",
                format!("must be a positive number, got {}", self.tol),
            ));
        }
        if self.workers == 0 {
            return Err(invalid("workers", "must be at least 1".into()));
        }
        if let Some(contexts) = &self.contexts {
            if let Some(bad) = contexts.iter().find(|v| !v.is_finite()) {
                return Err(invalid(
                    "contexts",
                    format!("must contain only finite values, found {bad}"),
                ));
            }
        }
        Ok(())
    }

    /// The iteration schedule this config requests.
    pub fn schedule(&self) -> Result<Schedule> {
        match self.schedule.as_str() {
            "sync" => Ok(Schedule::Synchronous),
            "seq" => Ok(Schedule::Sequential),
            other => Err(invalid(
                "schedule",
                format!("must be \"sync\" or \"seq\", got \"{other}\""),
            )),
        }
    }

    /// Build the pairwise model for a `labels`-class problem.
    pub fn to_pairwise(&self, labels: usize) -> Result<PairwiseConfig> {
        self.validate()?;
        let local_rf = WindowSpec::new(self.local_m, self.local_t)?;
        let context_rf = WindowSpec::new(self.context_n, self.context_t)?;
        let taps = context_rf.taps();
        let bank = match &self.contexts {
            None => ContextFilterBank::zeros(self.mixtures, labels, taps),
            Some(values) => {
                let expected = self.mixtures * labels * taps * labels;
                if values.len() != expected {
                    return Err(invalid(
                        "contexts",
                        format!(
                            "{} values given, but {} mixtures x {labels} labels x {taps} taps x \
                             {labels} labels needs {expected}",
                            values.len(),
                            self.mixtures
                        ),
                    ));
                }
                ContextFilterBank::new(self.mixtures, labels, taps, values.clone())?
            }
        };
        PairwiseConfig::new(
            self.omega1,
            self.omega2,
            local_rf,
            context_rf,
            self.lin_a,
            self.lin_b,
            bank,
        )
    }

    /// Parse and validate a JSON document.
    pub fn from_json(text: &str) -> Result<Self> {
        let config: RunConfig = serde_json::from_str(text)
            .map_err(|e| invalid("config", format!("not a valid config document: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    /// Pretty-printed JSON document for this config.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialization cannot fail")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| DpnError::io(path, e))?;
        let config: RunConfig = serde_json::from_str(&text).map_err(|e| DpnError::ConfigParse {
            path: path.to_path_buf(),
            source: e,
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| DpnError::io(path, e))
    }

    /// A config mirroring an existing pairwise model, keeping the given
    /// solver settings.
    pub fn from_pairwise(
        cfg: &PairwiseConfig,
        epsilon: f32,
        schedule: &str,
        max_iters: usize,
        tol: f32,
        workers: usize,
    ) -> Self {
        RunConfig {
            omega1: cfg.omega1,
            omega2: cfg.omega2,
            local_m: cfg.local_rf.side,
            local_t: cfg.local_rf.t_side,
            context_n: cfg.context_rf.side,
            context_t: cfg.context_rf.t_side,
            mixtures: cfg.mixtures(),
            lin_a: cfg.lin_a,
            lin_b: cfg.lin_b,
            epsilon,
            schedule: schedule.to_string(),
            max_iters,
            tol,
            workers,
            contexts: Some(cfg.contexts.values().to_vec()),
        }
    }
}

fn invalid(field: &'static str, reason: String) -> DpnError {
    DpnError::InvalidConfig { field, reason }
}

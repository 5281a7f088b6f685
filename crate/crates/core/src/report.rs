//! Evaluation reports and the metrics derived from perplexities.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, TrainConfig};
use crate::surgery::BridgeDeviation;
use crate::train::TrainReport;

/// One evaluated method or configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub ppl: f64,
    pub trainable_fraction: f64,
    pub trainable_params: usize,
    pub total_params: usize,
    /// Wall-clock training seconds; `None` when no clock was supplied.
    pub seconds: Option<f64>,
    pub seed: u64,
    pub model_config: ModelConfig,
    /// Absent for pure evaluation.
    pub train_config: Option<TrainConfig>,
    #[serde(default)]
    pub epoch_losses: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_position_ppl: Option<Vec<(usize, f64)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position_variance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transfer_penalty_pct: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bridge_deviations: Option<Vec<BridgeDeviation>>,
    /// Named scalar extras (ratios, pre-recovery PPL, ...).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metrics: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl EvalReport {
    /// A report with no training attached.
    pub fn evaluation(method: impl Into<String>, ppl: f64, model_config: ModelConfig, total_params: usize, seed: u64) -> Self {
        Self {
            method: method.into(),
            ppl,
            trainable_fraction: 0.0,
            trainable_params: 0,
            total_params,
            seconds: Some(0.0),
            seed,
            model_config,
            train_config: None,
            epoch_losses: Vec::new(),
            per_position_ppl: None,
            position_variance: None,
            transfer_penalty_pct: None,
            bridge_deviations: None,
            metrics: BTreeMap::new(),
            notes: Vec::new(),
        }
    }

    /// A report for a model trained per `train`.
    pub fn trained(
        method: impl Into<String>,
        ppl: f64,
        model_config: ModelConfig,
        config: &TrainConfig,
        train: &TrainReport,
        timed: bool,
    ) -> Self {
        let mut r = Self::evaluation(method, ppl, model_config, train.total_params, config.seed);
        r.trainable_fraction = train.trainable_fraction;
        r.trainable_params = train.trainable_params;
        r.seconds = timed.then_some(train.seconds);
        r.train_config = Some(*config);
        r.epoch_losses = train.epoch_losses.clone();
        r
    }

    /// True when every reported number is finite.
    pub fn is_finite(&self) -> bool {
        let opt = |v: Option<f64>| v.is_none_or(f64::is_finite);
        self.ppl.is_finite()
            && self.trainable_fraction.is_finite()
            && opt(self.seconds)
            && opt(self.position_variance)
            && opt(self.transfer_penalty_pct)
            && self.epoch_losses.iter().all(|v| v.is_finite())
            && self.metrics.values().all(|v| v.is_finite())
            && self.per_position_ppl.iter().flatten().all(|(_, v)| v.is_finite())
            && self
                .bridge_deviations
                .iter()
                .flatten()
                .all(|d| d.input.is_finite() && d.output.is_finite())
    }
}

/// Population variance (divides by `n`). Zero for fewer than two values.
pub fn population_variance(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

/// Percent change from source-domain to target-domain perplexity.
pub fn transfer_penalty_pct(source_ppl: f64, target_ppl: f64) -> f64 {
    100.0 * (target_ppl - source_ppl) / source_ppl
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variance_by_hand() {
        assert_eq!(population_variance(&[2.0, 4.0, 6.0, 8.0]), 5.0);
        assert_eq!(population_variance(&[3.5]), 0.0);
    }

    #[test]
    fn penalty_sign_and_zero() {
        assert_eq!(transfer_penalty_pct(10.0, 10.0), 0.0);
        assert!((transfer_penalty_pct(100.0, 150.0) - 50.0).abs() < 1e-12);
        assert!(transfer_penalty_pct(100.0, 50.0) < 0.0);
    }
}

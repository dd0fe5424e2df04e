//! Metric records.
//!
//! A metrics file is JSON Lines: one header record, then step, epoch and
//! evaluation records in the order they happen. Field order within each
//! record is fixed:
//!
//! ```text
//! {"kind":"header","format":"featvat-metrics","version":1,"config":{...}}
//! {"kind":"step","step":..,"epoch":..,"total":..,"classification":..,"domain":..,
//!  "attentive":..,"vat":..,"conditional_entropy":..,"lds":..,"source_batch_accuracy":..,
//!  "beta":..,"vat_fallbacks":..[,"wall_time_s":..]}
//! {"kind":"epoch","epoch":..,"steps":..,"mean_total":..,"source_train_accuracy":..[,"wall_time_s":..]}
//! {"kind":"eval","epoch":..,"split":..,"weights":"ema"|"student","accuracy":..,"per_class":[..]}
//! ```
//!
//! `domain` is the discriminator cross-entropy being minimized (the negated
//! domain loss). `wall_time_s` is emitted only when `log_wall_time` is set,
//! since it makes logs differ between otherwise identical runs.

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricRecord {
    Header {
        format: String,
        version: u32,
        config: serde_json::Value,
    },
    Step(StepRecord),
    Epoch(EpochRecord),
    Eval(EvalRecord),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub total: f64,
    pub classification: f64,
    pub domain: f64,
    pub attentive: f64,
    pub vat: f64,
    pub conditional_entropy: f64,
    pub lds: f64,
    pub source_batch_accuracy: f64,
    pub beta: f64,
    pub vat_fallbacks: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_time_s: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub mean_total: f64,
    pub source_train_accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_time_s: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub epoch: usize,
    pub split: String,
    pub weights: String,
    pub accuracy: f64,
    pub per_class: Vec<f64>,
}

impl MetricRecord {
    pub fn header(config: serde_json::Value) -> Self {
        MetricRecord::Header {
            format: "featvat-metrics".into(),
            version: 1,
            config,
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("metric records always serialize")
    }
}

/// Receives records as training produces them.
pub trait TrainObserver {
    fn record(&mut self, rec: &MetricRecord) -> Result<()>;

    /// Called at checkpoint cadence with the current state.
    fn checkpoint(&mut self, _state: &super::TrainState, _epoch: usize) -> Result<()> {
        Ok(())
    }
}

/// In-memory record list.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricLog {
    pub records: Vec<MetricRecord>,
}

impl MetricLog {
    pub fn steps(&self) -> impl Iterator<Item = &StepRecord> {
        self.records.iter().filter_map(|r| match r {
            MetricRecord::Step(s) => Some(s),
            _ => None,
        })
    }

    pub fn evals(&self) -> impl Iterator<Item = &EvalRecord> {
        self.records.iter().filter_map(|r| match r {
            MetricRecord::Eval(e) => Some(e),
            _ => None,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_jsonl(&self) -> String {
        self.records.iter().map(|r| r.to_line() + "\n").collect()
    }
}

impl TrainObserver for MetricLog {
    fn record(&mut self, rec: &MetricRecord) -> Result<()> {
        self.records.push(rec.clone());
        Ok(())
    }
}

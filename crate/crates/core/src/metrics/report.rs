use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{AttentionMass, KindStability, PopeScores};
use crate::error::{Result, VtiError};

/// Scores for one evaluated condition. Suites that were not run are `null`
/// or empty; key names are fixed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub condition: String,
    pub alpha: f64,
    pub beta: f64,
    pub chair_s: Option<f64>,
    pub chair_i: Option<f64>,
    pub recall: Option<f64>,
    pub avg_len: Option<f64>,
    pub pope: BTreeMap<String, PopeScores>,
    pub stability: BTreeMap<String, KindStability>,
    pub attention: Option<AttentionMass>,
    pub probe_accuracy: Option<f64>,
    pub warnings: Vec<String>,
    pub config: serde_json::Value,
}

impl EvalReport {
    /// Checks that every rate lies in `[0, 1]` and histograms add up.
    pub fn check(&self) -> Result<()> {
        let mut rates: Vec<(String, f64)> = Vec::new();
        for (k, v) in [
            ("chair_s", self.chair_s),
            ("chair_i", self.chair_i),
            ("recall", self.recall),
            ("probe_accuracy", self.probe_accuracy),
        ] {
            if let Some(v) = v {
                rates.push((k.into(), v));
            }
        }
        for (mode, p) in &self.pope {
            for (k, v) in [
                ("accuracy", p.accuracy),
                ("precision", p.precision),
                ("recall", p.recall),
                ("f1", p.f1),
            ] {
                rates.push((format!("pope.{mode}.{k}"), v));
            }
        }
        if let Some(a) = self.attention {
            rates.push(("attention.vision".into(), a.vision));
            rates.push(("attention.text".into(), a.text));
        }
        for (kind, s) in &self.stability {
            rates.push((format!("stability.{kind}.tail_frac"), s.tail_frac));
            if s.histogram.counts.iter().sum::<u64>() != s.features {
                return Err(VtiError::Degenerate(format!("stability.{kind} histogram does not sum to the feature count")));
            }
        }
        match rates.into_iter().find(|(_, v)| !(0.0..=1.0).contains(v)) {
            Some((k, v)) => Err(VtiError::Degenerate(format!("{k} = {v} is not a rate"))),
            None => Ok(()),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

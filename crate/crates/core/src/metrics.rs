//! Accuracies, generalization gap, attack advantages and the empirical
//! `g/2 ≤ v ≤ g` bound check.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::attacks::{features_matrix, AttackKind, AttackOutcome, AttackResult};
use crate::dataset::Instance;
use crate::error::{param, Result};
use crate::model::{argmax, MlpModel};

/// Training accuracy, testing accuracy and their gap.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelAccuracy {
    pub a_r: f64,
    pub a_e: f64,
    /// `a_r − a_e`.
    pub g: f64,
}

impl ModelAccuracy {
    pub fn new(a_r: f64, a_e: f64) -> Self {
        Self {
            a_r,
            a_e,
            g: generalization_gap(a_r, a_e),
        }
    }
}

/// Fraction of `instances` whose predicted label is correct.
pub fn accuracy(model: &MlpModel, instances: &[Instance]) -> Result<f64> {
    if instances.is_empty() {
        return param("accuracy of an empty set");
    }
    let probs = model.predict_proba_batch(features_matrix(instances).view())?;
    let correct = probs
        .rows()
        .into_iter()
        .zip(instances)
        .filter(|(p, inst)| argmax(p.as_slice().unwrap()) == inst.label)
        .count();
    Ok(correct as f64 / instances.len() as f64)
}

pub fn generalization_gap(a_r: f64, a_e: f64) -> f64 {
    a_r - a_e
}

/// Advantage the label-only baseline attack should reach: `g / 2`.
pub fn expected_baseline_advantage(g: f64) -> f64 {
    g / 2.0
}

/// Balanced accuracy of a rule that accepts members at rate `member_hit` and
/// non-members at rate `non_member_hit`.
pub fn balanced_accuracy(member_hit: f64, non_member_hit: f64) -> f64 {
    0.5 * (member_hit + (1.0 - non_member_hit))
}

/// Largest advantage and the attack achieving it; ties go to the attack that
/// comes first in reporting order.
pub fn highest_advantage(results: &[AttackResult]) -> Result<(f64, AttackKind)> {
    let mut sorted: Vec<&AttackResult> = results.iter().collect();
    sorted.sort_by_key(|r| r.attack);
    let first = sorted
        .first()
        .ok_or_else(|| crate::Error::Parameter("no attack results".into()))?;
    let mut best = (first.advantage, first.attack);
    for r in &sorted[1..] {
        if r.advantage > best.0 {
            best = (r.advantage, r.attack);
        }
    }
    Ok(best)
}

/// [`highest_advantage`] over the successful outcomes of a run.
pub fn highest_outcome_advantage(outcomes: &[AttackOutcome]) -> Result<(f64, AttackKind)> {
    let results: Vec<AttackResult> = outcomes.iter().filter_map(|o| o.result.clone()).collect();
    highest_advantage(&results)
}

/// Outcome of checking `g/2 − slack ≤ v ≤ g + slack`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundVerdict {
    pub g: f64,
    pub v: f64,
    pub slack: f64,
    pub lower_ok: bool,
    pub upper_ok: bool,
}

impl BoundVerdict {
    pub fn holds(&self) -> bool {
        self.lower_ok && self.upper_ok
    }

    /// Recomputes the booleans from the stored reals.
    pub fn is_consistent(&self) -> bool {
        let again = bound_check(self.g, self.v, self.slack);
        again.lower_ok == self.lower_ok && again.upper_ok == self.upper_ok
    }
}

/// Default slack used in library mode.
pub const DEFAULT_BOUND_SLACK: f64 = 0.03;

pub fn bound_check(g: f64, v: f64, slack: f64) -> BoundVerdict {
    let slack = slack.max(0.0);
    BoundVerdict {
        g,
        v,
        slack,
        lower_ok: v >= g / 2.0 - slack,
        upper_ok: v <= g + slack,
    }
}

/// Which probability to export for CDF plots.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConfidenceMode {
    TrueLabel,
    TopOne,
}

/// Sorted per-instance confidences.
pub fn confidence_cdf_export(
    model: &MlpModel,
    instances: &[Instance],
    mode: ConfidenceMode,
) -> Result<Vec<f64>> {
    if instances.is_empty() {
        return param("CDF export of an empty set");
    }
    let probs = model.predict_proba_batch(features_matrix(instances).view())?;
    let mut values: Vec<f64> = probs
        .rows()
        .into_iter()
        .zip(instances)
        .map(|(p, inst)| match mode {
            ConfidenceMode::TrueLabel => p[inst.label],
            ConfidenceMode::TopOne => p.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
        .collect();
    values.sort_by(|a, b| a.total_cmp(b));
    Ok(values)
}

/// Two-column CSV `value,empirical_cdf` for sorted values.
pub fn cdf_csv(sorted: &[f64]) -> String {
    let mut out = String::from("value,empirical_cdf\n");
    let n = sorted.len() as f64;
    for (i, v) in sorted.iter().enumerate() {
        let _ = writeln!(out, "{v},{}", (i + 1) as f64 / n);
    }
    out
}

//! Shadow-model machinery and the seven black-box membership-inference
//! attacks.
//!
//! Attacks only ever receive [`EvalQueries`] (features and labels) and query
//! the target through [`LabelOracle`] / [`ProbabilityOracle`]; membership
//! ground truth is consulted only by [`AttackResult::score`].

use std::fmt;

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    sample_disjoint, sample_training_set, BalancedEvalSet, Dataset, EvalQueries, Instance,
    MembershipBitmap, Pool, SplitPlan,
};
use crate::error::{param, shape, Error, Result};
use crate::model::{argmax, LabelOracle, MlpModel, ProbabilityOracle, PROB_FLOOR};
use crate::rng::{rng_from_seed, stage_seed};
use crate::train::{train_model, MmdConfig, TrainConfig};

/// The attack catalog, in reporting order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AttackKind {
    #[serde(rename = "Baseline")]
    Baseline,
    #[serde(rename = "Class-Vector")]
    ClassVector,
    #[serde(rename = "Global-Loss")]
    GlobalLoss,
    #[serde(rename = "Global-Probability")]
    GlobalProbability,
    #[serde(rename = "Global-TopOne")]
    GlobalTopOne,
    #[serde(rename = "Global-TopThree")]
    GlobalTopThree,
    #[serde(rename = "Instance-Vector")]
    InstanceVector,
}

impl AttackKind {
    pub const ALL: [AttackKind; 7] = [
        AttackKind::Baseline,
        AttackKind::ClassVector,
        AttackKind::GlobalLoss,
        AttackKind::GlobalProbability,
        AttackKind::GlobalTopOne,
        AttackKind::GlobalTopThree,
        AttackKind::InstanceVector,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Baseline => "Baseline",
            AttackKind::ClassVector => "Class-Vector",
            AttackKind::GlobalLoss => "Global-Loss",
            AttackKind::GlobalProbability => "Global-Probability",
            AttackKind::GlobalTopOne => "Global-TopOne",
            AttackKind::GlobalTopThree => "Global-TopThree",
            AttackKind::InstanceVector => "Instance-Vector",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Membership predictions scored against a balanced set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub attack: AttackKind,
    pub predictions: Vec<bool>,
    pub accuracy: f64,
    /// `accuracy − 1/2`.
    pub advantage: f64,
}

impl AttackResult {
    pub fn score(attack: AttackKind, predictions: Vec<bool>, is_member: &[bool]) -> Result<Self> {
        if predictions.len() != is_member.len() || predictions.is_empty() {
            return shape(format!(
                "{} predictions for {} evaluation instances",
                predictions.len(),
                is_member.len()
            ));
        }
        let correct = predictions
            .iter()
            .zip(is_member)
            .filter(|(p, m)| p == m)
            .count();
        let accuracy = correct as f64 / predictions.len() as f64;
        Ok(Self {
            attack,
            predictions,
            accuracy,
            advantage: accuracy - 0.5,
        })
    }

    pub fn n_eval(&self) -> usize {
        self.predictions.len()
    }
}

/// An attack run that may have failed without stopping the others.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub attack: AttackKind,
    pub result: Option<AttackResult>,
    pub error: Option<String>,
}

impl AttackOutcome {
    pub fn advantage(&self) -> Option<f64> {
        self.result.as_ref().map(|r| r.advantage)
    }
}

/// Which side of the threshold counts as "member".
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    /// `score ≥ threshold` ⇒ member.
    AtLeast,
    /// `score < threshold` ⇒ member.
    Below,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdModel {
    pub threshold: f64,
    pub direction: Direction,
}

impl ThresholdModel {
    pub fn new(threshold: f64, direction: Direction) -> Result<Self> {
        if !threshold.is_finite() {
            return Err(Error::Numeric(format!("non-finite threshold {threshold}")));
        }
        Ok(Self {
            threshold,
            direction,
        })
    }

    pub fn is_member(&self, score: f64) -> bool {
        match self.direction {
            Direction::AtLeast => score >= self.threshold,
            Direction::Below => score < self.threshold,
        }
    }

    pub fn predict(&self, scores: &[f64]) -> Vec<bool> {
        scores.iter().map(|&s| self.is_member(s)).collect()
    }
}

/// Tunables of the attack suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    /// Global-TopOne: the threshold leaves this percentage of random queries
    /// at or above it.
    pub topone_percentile: f64,
    pub topone_queries: usize,
    /// Recipe for the neural attack classifiers (no hidden layers means
    /// logistic regression).
    pub classifier: TrainConfig,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            topone_percentile: 10.0,
            topone_queries: 1000,
            classifier: TrainConfig {
                hidden_layers: Vec::new(),
                epochs: 20,
                batch_size: 128,
                learning_rate: 0.1,
                history_interval: 0,
                ..TrainConfig::default()
            },
        }
    }
}

/// `k` shadow models with the `D_E` membership of each.
#[derive(Clone, Debug)]
pub struct ShadowEnsemble {
    pub models: Vec<MlpModel>,
    pub bitmaps: Vec<MembershipBitmap>,
}

/// Shadow outputs on `D_E`, precomputed once and shared by all attacks.
#[derive(Clone, Debug)]
pub struct ShadowObservations {
    /// Per shadow, a `(|D_E|, c)` matrix of probabilities.
    pub probs: Vec<Array2<f64>>,
    /// True labels of `D_E`.
    pub labels: Vec<usize>,
    pub bitmaps: Vec<MembershipBitmap>,
}

impl ShadowObservations {
    pub fn k(&self) -> usize {
        self.probs.len()
    }

    pub fn eval_size(&self) -> usize {
        self.labels.len()
    }

    /// Every `(shadow, D_E position)` pair as `(probability row, member)`.
    fn pairs(&self) -> impl Iterator<Item = (usize, usize, bool)> + '_ {
        (0..self.k()).flat_map(move |s| {
            (0..self.eval_size()).map(move |j| (s, j, self.bitmaps[s].is_member(j)))
        })
    }
}

/// Trains `k` shadows on independent halves of `D_E` plus holdout fill, with
/// the same recipe (and defense) as the target.
///
/// Shadow `i` uses sub-seed `stage_seed(seed, i + 1)`, itself split into
/// stream 0 (training sample), 1 (validation sample) and 2 (training).
pub fn train_shadow_ensemble(
    dataset: &Dataset,
    plan: &SplitPlan,
    k: usize,
    train_size: usize,
    config: &TrainConfig,
    mmd_config: &MmdConfig,
    seed: u64,
) -> Result<ShadowEnsemble> {
    if k == 0 {
        return param("need at least one shadow model");
    }
    let trained: Vec<Result<(MlpModel, MembershipBitmap)>> = (0..k)
        .into_par_iter()
        .map(|i| {
            let s = stage_seed(seed, i as u64 + 1);
            let sample = sample_training_set(plan, Pool::Holdout, train_size, stage_seed(s, 0))?;
            let validation = if config.mmd_enabled() {
                Some(sample_disjoint(
                    plan,
                    Pool::Holdout,
                    &sample.ids,
                    train_size,
                    stage_seed(s, 1),
                )?)
            } else {
                None
            };
            let cfg = TrainConfig {
                seed: stage_seed(s, 2),
                history_interval: 0,
                ..config.clone()
            };
            let out = train_model(
                dataset,
                &sample.ids,
                validation.as_deref(),
                None,
                &cfg,
                mmd_config,
            )?;
            Ok((out.model, sample.bitmap))
        })
        .collect();
    let mut models = Vec::with_capacity(k);
    let mut bitmaps = Vec::with_capacity(k);
    for r in trained {
        let (m, b) = r?;
        models.push(m);
        bitmaps.push(b);
    }
    Ok(ShadowEnsemble { models, bitmaps })
}

impl ShadowEnsemble {
    pub fn k(&self) -> usize {
        self.models.len()
    }

    /// Queries every shadow on `D_E`.
    pub fn observe(&self, dataset: &Dataset, plan: &SplitPlan) -> Result<ShadowObservations> {
        let eval = dataset.select(&plan.eval_ids);
        let x = features_matrix(&eval);
        let probs = self
            .models
            .iter()
            .map(|m| m.predict_proba_batch(x.view()))
            .collect::<Result<Vec<_>>>()?;
        Ok(ShadowObservations {
            probs,
            labels: eval.iter().map(|i| i.label).collect(),
            bitmaps: self.bitmaps.clone(),
        })
    }
}

pub(crate) fn features_matrix(instances: &[Instance]) -> Array2<f64> {
    let d = instances.first().map_or(0, |i| i.features.len());
    let mut flat = Vec::with_capacity(instances.len() * d);
    for inst in instances {
        flat.extend_from_slice(&inst.features);
    }
    Array2::from_shape_vec((instances.len(), d), flat).expect("instances of equal width")
}

/// `Σ_j p_j ln(p_j / max(q_j, 1e-12))`, skipping `p_j = 0` terms.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return shape(format!("KL of vectors of length {} and {}", p.len(), q.len()));
    }
    Ok(p.iter()
        .zip(q)
        .filter(|(&pj, _)| pj > 0.0)
        .map(|(&pj, &qj)| pj * (pj / qj.max(PROB_FLOOR)).ln())
        .sum())
}

fn true_label_loss(p: &[f64], y: usize) -> f64 {
    -p[y].max(PROB_FLOOR).ln()
}

/// Member iff the target labels the query correctly. Uses labels only.
pub fn baseline_attack<O: LabelOracle + ?Sized>(
    target: &O,
    queries: &EvalQueries,
) -> Result<Vec<bool>> {
    queries
        .instances
        .iter()
        .map(|inst| Ok(target.query_label(&inst.features)? == inst.label))
        .collect()
}

/// Mean over shadows of each shadow's mean loss on its own `D_E` members.
pub fn global_loss_threshold(obs: &ShadowObservations) -> Result<ThresholdModel> {
    if obs.k() == 0 {
        return param("Global-Loss needs at least one shadow model");
    }
    let mut total = 0.0;
    for (probs, bitmap) in obs.probs.iter().zip(&obs.bitmaps) {
        let (mut sum, mut n) = (0.0, 0usize);
        for (j, &y) in obs.labels.iter().enumerate() {
            if bitmap.is_member(j) {
                sum += true_label_loss(probs.row(j).as_slice().unwrap(), y);
                n += 1;
            }
        }
        if n == 0 {
            return param("a shadow model has no members in the evaluation set");
        }
        total += sum / n as f64;
    }
    ThresholdModel::new(total / obs.k() as f64, Direction::Below)
}

/// Member iff `−ln F(x)_y` is strictly below the shadow-estimated average
/// training loss.
pub fn global_loss_attack(
    target_probs: &Array2<f64>,
    queries: &EvalQueries,
    obs: &ShadowObservations,
) -> Result<Vec<bool>> {
    let threshold = global_loss_threshold(obs)?;
    let losses: Vec<f64> = queries
        .instances
        .iter()
        .enumerate()
        .map(|(i, inst)| true_label_loss(target_probs.row(i).as_slice().unwrap(), inst.label))
        .collect();
    Ok(threshold.predict(&losses))
}

/// The threshold `t` among the observed scores maximizing balanced accuracy of
/// "member iff score ≥ t"; ties go to the smallest `t`.
pub fn best_probability_threshold(scores: &[f64], members: &[bool]) -> Result<ThresholdModel> {
    if scores.is_empty() || scores.len() != members.len() {
        return shape("threshold search needs one membership flag per score");
    }
    let mut pairs: Vec<(f64, bool)> = scores.iter().copied().zip(members.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let pos = members.iter().filter(|&&m| m).count();
    let neg = members.len() - pos;
    let rate = |hit: usize, total: usize| if total == 0 { 1.0 } else { hit as f64 / total as f64 };

    // Sweep ascending: at candidate pairs[k].0, everything from k on is
    // predicted member.
    let (mut tp, mut tn) = (pos, 0usize);
    let mut best = (f64::NEG_INFINITY, pairs[0].0);
    let mut k = 0;
    while k < pairs.len() {
        let t = pairs[k].0;
        let acc = 0.5 * (rate(tp, pos) + rate(tn, neg));
        if acc > best.0 {
            best = (acc, t);
        }
        while k < pairs.len() && pairs[k].0 == t {
            if pairs[k].1 {
                tp -= 1;
            } else {
                tn += 1;
            }
            k += 1;
        }
    }
    ThresholdModel::new(best.1, Direction::AtLeast)
}

/// Member iff `F(x)_y ≥ t*`, with `t*` tuned on shadow outputs.
pub fn global_probability_attack(
    target_probs: &Array2<f64>,
    queries: &EvalQueries,
    obs: &ShadowObservations,
) -> Result<Vec<bool>> {
    if obs.k() == 0 {
        return param("Global-Probability needs at least one shadow model");
    }
    let (scores, members): (Vec<f64>, Vec<bool>) = obs
        .pairs()
        .map(|(s, j, m)| (obs.probs[s][[j, obs.labels[j]]], m))
        .unzip();
    let threshold = best_probability_threshold(&scores, &members)?;
    let target_scores: Vec<f64> = queries
        .instances
        .iter()
        .enumerate()
        .map(|(i, inst)| target_probs[[i, inst.label]])
        .collect();
    Ok(threshold.predict(&target_scores))
}

/// The value `v` such that the top `percentile`% of `values` are `≥ v`:
/// ascending sort, index `floor((1 − t/100)·N)` clamped to `N − 1`.
pub fn top_percentile_threshold(values: &[f64], percentile: f64) -> Result<f64> {
    if values.is_empty() {
        return param("percentile of an empty sample");
    }
    if !(0.0..=100.0).contains(&percentile) {
        return param(format!("percentile {percentile} outside [0, 100]"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    // (100 − t)·N / 100 is exact whenever the true index is an integer and t
    // is a whole percent.
    let idx = (((100.0 - percentile) * n as f64 / 100.0).floor() as usize).min(n - 1);
    Ok(sorted[idx])
}

/// Uniform random feature vectors within the per-dimension range of `queries`.
pub fn random_queries<R: Rng>(queries: &EvalQueries, count: usize, rng: &mut R) -> Array2<f64> {
    let x = features_matrix(&queries.instances);
    let lo = x.fold_axis(Axis(0), f64::INFINITY, |a, &b| a.min(b));
    let hi = x.fold_axis(Axis(0), f64::NEG_INFINITY, |a, &b| a.max(b));
    Array2::from_shape_fn((count, x.ncols()), |(_, j)| {
        if hi[j] > lo[j] {
            rng.gen_range(lo[j]..hi[j])
        } else {
            lo[j]
        }
    })
}

fn row_max(m: &Array2<f64>) -> Vec<f64> {
    m.rows()
        .into_iter()
        .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

/// Member iff `max F(x) ≥` the top-`percentile` value of `max F` over random
/// (presumed non-member) queries. Needs no shadow models.
pub fn global_topone_attack<O: ProbabilityOracle + ?Sized, R: Rng>(
    target: &O,
    queries: &EvalQueries,
    percentile: f64,
    num_random_queries: usize,
    rng: &mut R,
) -> Result<Vec<bool>> {
    if num_random_queries < 100 {
        return param("Global-TopOne needs at least 100 random queries");
    }
    if !(5.0..=25.0).contains(&percentile) {
        log::warn!("Global-TopOne percentile {percentile} is outside the usual 5-25 range");
    }
    let random = random_queries(queries, num_random_queries, rng);
    let random_top = row_max(&target.query_probs(random.view())?);
    let threshold =
        ThresholdModel::new(top_percentile_threshold(&random_top, percentile)?, Direction::AtLeast)?;
    let x = features_matrix(&queries.instances);
    Ok(threshold.predict(&row_max(&target.query_probs(x.view())?)))
}

/// A binary member / non-member classifier over attack features, with
/// z-score standardization learned from its training data.
#[derive(Clone, Debug)]
pub struct AttackClassifier {
    pub model: MlpModel,
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl AttackClassifier {
    /// Fits on `(features, member)` rows with the given recipe.
    pub fn fit(features: ArrayView2<'_, f64>, members: &[bool], config: &TrainConfig) -> Result<Self> {
        if features.nrows() == 0 || features.nrows() != members.len() {
            return shape("attack classifier needs one label per feature row");
        }
        let n = features.nrows() as f64;
        let mean = features.sum_axis(Axis(0)) / n;
        let std = features
            .map_axis(Axis(0), |col| {
                let m = col.sum() / n;
                (col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt()
            })
            .mapv(|s| if s > 1e-12 { s } else { 1.0 });
        let mean = mean.to_vec();
        let std = std.to_vec();
        let instances: Vec<Instance> = features
            .rows()
            .into_iter()
            .zip(members)
            .map(|(r, &m)| Instance {
                features: standardize(r.as_slice().unwrap_or(&r.to_vec()), &mean, &std),
                label: m as usize,
            })
            .collect();
        let dim = features.ncols();
        let ds = Dataset::new(instances, 2, dim)?;
        let ids: Vec<usize> = (0..ds.len()).collect();
        let out = train_model(&ds, &ids, None, None, config, &MmdConfig::default())?;
        Ok(Self {
            model: out.model,
            mean,
            std,
        })
    }

    /// Attack probability of "member" is ≥ 0.5.
    pub fn predict(&self, features: ArrayView2<'_, f64>) -> Result<Vec<bool>> {
        let mut z = features.to_owned();
        for mut row in z.rows_mut() {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        let probs = self.model.predict_proba_batch(z.view())?;
        Ok(probs.rows().into_iter().map(|p| p[1] >= 0.5).collect())
    }
}

fn standardize(row: &[f64], mean: &[f64], std: &[f64]) -> Vec<f64> {
    row.iter()
        .zip(mean)
        .zip(std)
        .map(|((v, m), s)| (v - m) / s)
        .collect()
}

/// The largest `min(3, c)` entries of each row, in descending order.
pub fn top_k_features(probs: &Array2<f64>) -> Array2<f64> {
    let k = probs.ncols().min(3);
    let mut out = Array2::zeros((probs.nrows(), k));
    for (i, row) in probs.rows().into_iter().enumerate() {
        let mut v = row.to_vec();
        v.sort_by(|a, b| b.total_cmp(a));
        for j in 0..k {
            out[[i, j]] = v[j];
        }
    }
    out
}

fn stacked_shadow_rows(obs: &ShadowObservations, rows: &[(usize, usize)]) -> Array2<f64> {
    let c = obs.probs.first().map_or(0, |p| p.ncols());
    let mut out = Array2::zeros((rows.len(), c));
    for (r, &(s, j)) in rows.iter().enumerate() {
        out.row_mut(r).assign(&obs.probs[s].row(j));
    }
    out
}

/// One global classifier over the sorted top-3 probabilities.
pub fn global_topthree_attack(
    target_probs: &Array2<f64>,
    obs: &ShadowObservations,
    classifier: &TrainConfig,
) -> Result<Vec<bool>> {
    if obs.k() == 0 {
        return param("Global-TopThree needs at least one shadow model");
    }
    let (rows, members): (Vec<(usize, usize)>, Vec<bool>) =
        obs.pairs().map(|(s, j, m)| ((s, j), m)).unzip();
    let train = top_k_features(&stacked_shadow_rows(obs, &rows));
    let clf = AttackClassifier::fit(train.view(), &members, classifier)?;
    clf.predict(top_k_features(target_probs).view())
}

/// One classifier per class over full probability vectors; queries are routed
/// by their label. Classes whose shadow data lacks members or non-members use
/// a global classifier trained on every class.
pub fn class_vector_attack(
    target_probs: &Array2<f64>,
    queries: &EvalQueries,
    obs: &ShadowObservations,
    classifier: &TrainConfig,
) -> Result<Vec<bool>> {
    if obs.k() == 0 {
        return param("Class-Vector needs at least one shadow model");
    }
    let c = target_probs.ncols();
    let mut per_class: Vec<(Vec<(usize, usize)>, Vec<bool>)> = vec![(Vec::new(), Vec::new()); c];
    for (s, j, m) in obs.pairs() {
        let y = obs.labels[j];
        per_class[y].0.push((s, j));
        per_class[y].1.push(m);
    }
    let mut global: Option<AttackClassifier> = None;
    let mut classifiers: Vec<Option<AttackClassifier>> = Vec::with_capacity(c);
    for (rows, members) in &per_class {
        let both = members.iter().any(|&m| m) && members.iter().any(|&m| !m);
        classifiers.push(if both {
            let x = stacked_shadow_rows(obs, rows);
            Some(AttackClassifier::fit(x.view(), members, classifier)?)
        } else {
            None
        });
    }
    if classifiers.iter().any(Option::is_none) {
        let (rows, members): (Vec<(usize, usize)>, Vec<bool>) =
            obs.pairs().map(|(s, j, m)| ((s, j), m)).unzip();
        let x = stacked_shadow_rows(obs, &rows);
        global = Some(AttackClassifier::fit(x.view(), &members, classifier)?);
    }
    let mut predictions = vec![false; queries.len()];
    for class in 0..c {
        let idx: Vec<usize> = (0..queries.len())
            .filter(|&i| queries.instances[i].label == class)
            .collect();
        if idx.is_empty() {
            continue;
        }
        let clf = classifiers[class]
            .as_ref()
            .or(global.as_ref())
            .expect("global fallback trained");
        let x = target_probs.select(Axis(0), &idx);
        for (i, p) in idx.into_iter().zip(clf.predict(x.view())?) {
            predictions[i] = p;
        }
    }
    Ok(predictions)
}

/// Component-wise mean of the selected shadow rows, renormalized.
fn average_vector(obs: &ShadowObservations, shadows: &[usize], j: usize) -> Vec<f64> {
    let c = obs.probs[0].ncols();
    let mut avg = vec![0.0; c];
    for &s in shadows {
        for (a, p) in avg.iter_mut().zip(obs.probs[s].row(j)) {
            *a += p;
        }
    }
    let sum: f64 = avg.iter().sum();
    avg.iter_mut().for_each(|a| *a /= sum);
    avg
}

/// Member iff `KL(F(x) ‖ avg_in) < KL(F(x) ‖ avg_out)`, where the averages run
/// over shadows trained with and without `x`.
///
/// Queries without a `D_E` position, or with fewer than two shadows on either
/// side, fall back to the baseline rule.
pub fn instance_vector_attack(
    target_probs: &Array2<f64>,
    queries: &EvalQueries,
    obs: &ShadowObservations,
) -> Result<Vec<bool>> {
    if obs.k() == 0 {
        return param("Instance-Vector needs at least one shadow model");
    }
    let mut out = Vec::with_capacity(queries.len());
    for (i, inst) in queries.instances.iter().enumerate() {
        let p = target_probs.row(i);
        let p = p.as_slice().unwrap();
        let pos = queries.eval_positions[i].filter(|&j| j < obs.eval_size());
        let split = pos.map(|j| {
            let (ins, outs): (Vec<usize>, Vec<usize>) =
                (0..obs.k()).partition(|&s| obs.bitmaps[s].is_member(j));
            (j, ins, outs)
        });
        match split {
            Some((j, ins, outs)) if ins.len() >= 2 && outs.len() >= 2 => {
                let kl_in = kl_divergence(p, &average_vector(obs, &ins, j))?;
                let kl_out = kl_divergence(p, &average_vector(obs, &outs, j))?;
                out.push(kl_in < kl_out);
            }
            _ => out.push(argmax(p) == inst.label),
        }
    }
    Ok(out)
}

/// Runs `kinds` against `target` on `eval`, scoring each; a failing attack is
/// recorded and the rest continue.
pub fn run_attacks<T: LabelOracle + ProbabilityOracle + ?Sized>(
    kinds: &[AttackKind],
    target: &T,
    eval: &BalancedEvalSet,
    obs: &ShadowObservations,
    config: &AttackConfig,
    seed: u64,
) -> Vec<AttackOutcome> {
    let queries = eval.queries();
    let mut sorted = kinds.to_vec();
    sorted.sort();
    sorted.dedup();
    let probs = match target.query_probs(features_matrix(&queries.instances).view()) {
        Ok(p) => p,
        Err(e) => {
            return sorted
                .into_iter()
                .map(|kind| AttackOutcome {
                    attack: kind,
                    result: None,
                    error: Some(e.to_string()),
                })
                .collect()
        }
    };
    let probs = &probs;
    sorted
        .into_iter()
        .map(|kind| {
            let predictions = {
                match kind {
                    AttackKind::Baseline => baseline_attack(target, queries),
                    AttackKind::ClassVector => {
                        class_vector_attack(probs, queries, obs, &config.classifier)
                    }
                    AttackKind::GlobalLoss => global_loss_attack(probs, queries, obs),
                    AttackKind::GlobalProbability => global_probability_attack(probs, queries, obs),
                    AttackKind::GlobalTopOne => global_topone_attack(
                        target,
                        queries,
                        config.topone_percentile,
                        config.topone_queries,
                        &mut rng_from_seed(seed),
                    ),
                    AttackKind::GlobalTopThree => {
                        global_topthree_attack(probs, obs, &config.classifier)
                    }
                    AttackKind::InstanceVector => instance_vector_attack(probs, queries, obs),
                }
            };
            match predictions.and_then(|p| AttackResult::score(kind, p, eval.is_member())) {
                Ok(r) => AttackOutcome {
                    attack: kind,
                    result: Some(r),
                    error: None,
                },
                Err(e) => AttackOutcome {
                    attack: kind,
                    result: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect()
}

/// All seven attacks in reporting order.
pub fn run_all_attacks<T: LabelOracle + ProbabilityOracle + ?Sized>(
    target: &T,
    eval: &BalancedEvalSet,
    obs: &ShadowObservations,
    config: &AttackConfig,
    seed: u64,
) -> Vec<AttackOutcome> {
    run_attacks(&AttackKind::ALL, target, eval, obs, config, seed)
}

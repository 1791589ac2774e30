//! Synthetic tabular data and the three-way split used by every experiment.
//!
//! The population is partitioned once into an evaluation set `D_E`, a general
//! pool `D_G` (target-side fill and validation data) and a holdout pool `D_H`
//! (shadow-side fill). Every trained model sees exactly half of `D_E`, which
//! makes `D_E` a balanced member / non-member evaluation set for that model.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::rng::rng_from_seed;

/// Standard deviation of the per-class mean vectors, per coordinate.
///
/// Class means are drawn once per dataset from `N(0, CLASS_MEAN_STD^2 I)`;
/// `cluster_spread` is the within-class standard deviation, so the ratio of the
/// two controls class overlap.
pub const CLASS_MEAN_STD: f64 = 1.0;

/// One labeled example.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub features: Vec<f64>,
    pub label: usize,
}

/// A labeled population.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    instances: Vec<Instance>,
    num_classes: usize,
    dim: usize,
}

impl Dataset {
    /// Validates and wraps a list of instances.
    pub fn new(instances: Vec<Instance>, num_classes: usize, dim: usize) -> Result<Self> {
        if instances.is_empty() {
            return param("dataset must not be empty");
        }
        if num_classes == 0 || dim == 0 {
            return param("dataset needs at least one class and one feature");
        }
        for (i, inst) in instances.iter().enumerate() {
            if inst.features.len() != dim {
                return Err(Error::Shape(format!(
                    "instance {i} has {} features, expected {dim}",
                    inst.features.len()
                )));
            }
            if inst.label >= num_classes {
                return Err(Error::Invariant(format!(
                    "instance {i} has label {} >= {num_classes}",
                    inst.label
                )));
            }
        }
        Ok(Self {
            instances,
            num_classes,
            dim,
        })
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn get(&self, idx: usize) -> &Instance {
        &self.instances[idx]
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Clones the instances at `ids`, in order.
    pub fn select(&self, ids: &[usize]) -> Vec<Instance> {
        ids.iter().map(|&i| self.instances[i].clone()).collect()
    }

    /// Writes the dataset as CSV: header `f0,…,f{d-1},label`, one row per
    /// instance.
    ///
    /// Features use Rust's shortest round-trip decimal formatting for `f64`,
    /// so parsing the text back yields bit-identical values.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let mut header = String::new();
        for j in 0..self.dim {
            let _ = write!(header, "f{j},");
        }
        header.push_str("label");
        writeln!(out, "{header}")?;
        let mut line = String::new();
        for inst in &self.instances {
            line.clear();
            for v in &inst.features {
                let _ = write!(line, "{v},");
            }
            let _ = write!(line, "{}", inst.label);
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    /// Reads a CSV written by [`Dataset::write_csv`]. When `num_classes` is
    /// `None` it is inferred as `max(label) + 1`.
    pub fn read_csv<R: BufRead>(input: R, num_classes: Option<usize>) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty dataset file".into()))??;
        let cols: Vec<&str> = header.trim().split(',').collect();
        if cols.last() != Some(&"label") || cols.len() < 2 {
            return Err(Error::Parse("header must end with a `label` column".into()));
        }
        let dim = cols.len() - 1;
        let mut instances = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != dim + 1 {
                return Err(Error::Parse(format!(
                    "row {} has {} fields, expected {}",
                    lineno + 2,
                    fields.len(),
                    dim + 1
                )));
            }
            let features = fields[..dim]
                .iter()
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|e| Error::Parse(format!("row {}: {e}", lineno + 2)))
                })
                .collect::<Result<Vec<_>>>()?;
            let label = fields[dim]
                .parse::<usize>()
                .map_err(|e| Error::Parse(format!("row {}: {e}", lineno + 2)))?;
            instances.push(Instance { features, label });
        }
        let inferred = instances.iter().map(|i| i.label + 1).max().unwrap_or(0);
        Self::new(instances, num_classes.unwrap_or(inferred), dim)
    }
}

/// Draws `num_classes * per_class` instances from isotropic Gaussian clusters.
///
/// Class means are drawn first (class 0 first, coordinate-major within a class)
/// from `N(0, CLASS_MEAN_STD^2 I)`, then each class's instances from
/// `N(mean, cluster_spread^2 I)`. Instances are stored class-major.
pub fn generate_synthetic(
    num_classes: usize,
    dim: usize,
    per_class: usize,
    cluster_spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes < 2 {
        return param("need at least two classes");
    }
    if dim == 0 || per_class == 0 {
        return param("dim and per_class must be positive");
    }
    if !(cluster_spread >= 0.0) || !cluster_spread.is_finite() {
        return param("cluster_spread must be a finite non-negative number");
    }
    let mut rng = rng_from_seed(seed);
    let means: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| {
            (0..dim)
                .map(|_| CLASS_MEAN_STD * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    let mut instances = Vec::with_capacity(num_classes * per_class);
    for (label, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            let features = mean
                .iter()
                .map(|m| m + cluster_spread * rng.sample::<f64, _>(StandardNormal))
                .collect();
            instances.push(Instance { features, label });
        }
    }
    Dataset::new(instances, num_classes, dim)
}

/// Disjoint index sets into a [`Dataset`]. Each set is sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    pub eval_ids: Vec<usize>,
    pub general_ids: Vec<usize>,
    pub holdout_ids: Vec<usize>,
}

/// Which non-evaluation pool fills a training set beyond its half of `D_E`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pool {
    /// `D_G`, reserved for the target model.
    General,
    /// `D_H`, reserved for shadow models.
    Holdout,
}

impl SplitPlan {
    pub fn eval_size(&self) -> usize {
        self.eval_ids.len()
    }

    pub fn pool(&self, pool: Pool) -> &[usize] {
        match pool {
            Pool::General => &self.general_ids,
            Pool::Holdout => &self.holdout_ids,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Parses a manifest and re-checks disjointness.
    pub fn from_json(text: &str) -> Result<Self> {
        let plan: SplitPlan = serde_json::from_str(text)?;
        plan.check_disjoint()?;
        Ok(plan)
    }

    fn check_disjoint(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for &i in self
            .eval_ids
            .iter()
            .chain(&self.general_ids)
            .chain(&self.holdout_ids)
        {
            if !seen.insert(i) {
                return Err(Error::Invariant(format!("index {i} appears in two splits")));
            }
        }
        Ok(())
    }
}

/// Randomly partitions `0..dataset_len` into `D_E` (exactly `eval_size`),
/// `D_G` and `D_H`; the remainder is split evenly with the odd one to `D_G`.
pub fn split_three_way(dataset_len: usize, eval_size: usize, seed: u64) -> Result<SplitPlan> {
    if eval_size == 0 || eval_size % 2 != 0 {
        return param(format!("eval_size must be even and positive, got {eval_size}"));
    }
    if eval_size >= dataset_len {
        return param(format!(
            "eval_size {eval_size} must be smaller than the dataset ({dataset_len})"
        ));
    }
    let mut rng = rng_from_seed(seed);
    let mut perm: Vec<usize> = (0..dataset_len).collect();
    perm.shuffle(&mut rng);
    let rest = dataset_len - eval_size;
    let general_len = rest - rest / 2;
    let mut eval_ids = perm[..eval_size].to_vec();
    let mut general_ids = perm[eval_size..eval_size + general_len].to_vec();
    let mut holdout_ids = perm[eval_size + general_len..].to_vec();
    eval_ids.sort_unstable();
    general_ids.sort_unstable();
    holdout_ids.sort_unstable();
    Ok(SplitPlan {
        seed,
        eval_ids,
        general_ids,
        holdout_ids,
    })
}

/// One flag per position of `D_E`: did this model train on it?
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MembershipBitmap {
    pub member_flags: Vec<bool>,
}

impl MembershipBitmap {
    pub fn len(&self) -> usize {
        self.member_flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.member_flags.is_empty()
    }

    pub fn popcount(&self) -> usize {
        self.member_flags.iter().filter(|&&f| f).count()
    }

    pub fn is_member(&self, eval_pos: usize) -> bool {
        self.member_flags[eval_pos]
    }
}

/// A training index set plus the record of which `D_E` positions it used.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingSample {
    pub ids: Vec<usize>,
    pub bitmap: MembershipBitmap,
}

/// Draws half of `D_E` uniformly, then fills up to `train_size` from `pool`.
pub fn sample_training_set(
    plan: &SplitPlan,
    pool: Pool,
    train_size: usize,
    seed: u64,
) -> Result<TrainingSample> {
    let n_eval = plan.eval_size();
    let half = n_eval / 2;
    if train_size < half {
        return param(format!(
            "train_size {train_size} is smaller than half the evaluation set ({half})"
        ));
    }
    let fill = train_size - half;
    let pool_ids = plan.pool(pool);
    if fill > pool_ids.len() {
        return param(format!(
            "{pool:?} pool has {} instances, {fill} needed",
            pool_ids.len()
        ));
    }
    let mut rng = rng_from_seed(seed);
    let mut member_flags = vec![false; n_eval];
    let mut ids = Vec::with_capacity(train_size);
    for pos in index::sample(&mut rng, n_eval, half).into_iter() {
        member_flags[pos] = true;
    }
    ids.extend(
        member_flags
            .iter()
            .zip(&plan.eval_ids)
            .filter(|(f, _)| **f)
            .map(|(_, &id)| id),
    );
    let mut fill_ids: Vec<usize> = index::sample(&mut rng, pool_ids.len(), fill)
        .into_iter()
        .map(|p| pool_ids[p])
        .collect();
    fill_ids.sort_unstable();
    ids.extend(fill_ids);
    Ok(TrainingSample {
        ids,
        bitmap: MembershipBitmap { member_flags },
    })
}

/// Draws `size` indices uniformly from `pool` while avoiding `exclude`.
///
/// Used to carve the validation set for the MMD regularizer out of the pool
/// that the model's own training fill came from.
pub fn sample_disjoint(
    plan: &SplitPlan,
    pool: Pool,
    exclude: &[usize],
    size: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    let excluded: HashSet<usize> = exclude.iter().copied().collect();
    let available: Vec<usize> = plan
        .pool(pool)
        .iter()
        .copied()
        .filter(|i| !excluded.contains(i))
        .collect();
    if available.len() < size {
        return param(format!(
            "{pool:?} pool has {} free instances, {size} needed",
            available.len()
        ));
    }
    let mut rng = rng_from_seed(seed);
    let mut out: Vec<usize> = index::sample(&mut rng, available.len(), size)
        .into_iter()
        .map(|p| available[p])
        .collect();
    out.sort_unstable();
    Ok(out)
}

/// Queries handed to an attack: features and labels only, never membership.
///
/// `eval_positions[i]` is the `D_E` position of query `i` when it has one;
/// instance-level attacks need it to look up shadow memberships.
#[derive(Clone, Debug)]
pub struct EvalQueries {
    pub instances: Vec<Instance>,
    pub eval_positions: Vec<Option<usize>>,
}

impl EvalQueries {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

/// A balanced evaluation set: queries plus the ground truth used for scoring.
#[derive(Clone, Debug)]
pub struct BalancedEvalSet {
    queries: EvalQueries,
    is_member: Vec<bool>,
}

impl BalancedEvalSet {
    /// Builds a set from arbitrary queries; checks that exactly half are
    /// members.
    pub fn new(queries: EvalQueries, is_member: Vec<bool>) -> Result<Self> {
        if queries.len() != is_member.len() {
            return Err(Error::Shape("membership flags do not match queries".into()));
        }
        let members = is_member.iter().filter(|&&m| m).count();
        if queries.is_empty() || members * 2 != is_member.len() {
            return Err(Error::Invariant(format!(
                "evaluation set is not balanced: {members} members of {}",
                is_member.len()
            )));
        }
        Ok(Self { queries, is_member })
    }

    pub fn queries(&self) -> &EvalQueries {
        &self.queries
    }

    pub fn is_member(&self) -> &[bool] {
        &self.is_member
    }

    pub fn len(&self) -> usize {
        self.is_member.len()
    }

    pub fn is_empty(&self) -> bool {
        self.is_member.is_empty()
    }

    /// `(instance, is_member)` pairs in query order.
    pub fn iter(&self) -> impl Iterator<Item = (&Instance, bool)> {
        self.queries
            .instances
            .iter()
            .zip(self.is_member.iter().copied())
    }

    pub fn members(&self) -> Vec<Instance> {
        self.iter().filter(|(_, m)| *m).map(|(i, _)| i.clone()).collect()
    }

    pub fn non_members(&self) -> Vec<Instance> {
        self.iter().filter(|(_, m)| !*m).map(|(i, _)| i.clone()).collect()
    }
}

/// All of `D_E`, tagged by the target's bitmap.
pub fn build_balanced_eval_set(
    dataset: &Dataset,
    plan: &SplitPlan,
    bitmap: &MembershipBitmap,
) -> Result<BalancedEvalSet> {
    if bitmap.len() != plan.eval_size() {
        return Err(Error::Shape(format!(
            "bitmap length {} does not match |D_E| = {}",
            bitmap.len(),
            plan.eval_size()
        )));
    }
    let queries = EvalQueries {
        instances: dataset.select(&plan.eval_ids),
        eval_positions: (0..plan.eval_size()).map(Some).collect(),
    };
    BalancedEvalSet::new(queries, bitmap.member_flags.clone())
}

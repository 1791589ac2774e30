//! Minibatch SGD with the defense stack: mix-up, per-class MMD regularization
//! against a validation set, and DP-SGD style clipping plus noise.

use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{param, shape, Error, Result};
use crate::model::{
    mean_cross_entropy, one_hot, softmax_backward, Dropout, ForwardTrace, GradientSet, MlpModel,
};
use crate::rng::{stage_rng, LabRng};

/// Optimization recipe shared by target, shadow and attack models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Hidden widths; the input and output widths come from the data.
    pub hidden_layers: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// `(epoch, multiplier)`: at the start of that (0-based) epoch the
    /// current learning rate is multiplied.
    pub lr_schedule: Vec<(usize, f64)>,
    pub l2_coeff: f64,
    pub dropout_keep: f64,
    /// Beta(α, α) parameter for mix-up; 0 disables it.
    pub mixup_alpha: f64,
    /// Weight of the MMD penalty; 0 disables it.
    pub mmd_weight: f64,
    /// Per-example clipping norm; `None` disables DP-SGD.
    pub dp_clip_norm: Option<f64>,
    pub dp_noise_scale: f64,
    pub seed: u64,
    /// Record accuracies every this many epochs (the final epoch is always
    /// recorded); 0 records only the final epoch.
    pub history_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden_layers: vec![256, 128],
            epochs: 50,
            batch_size: 64,
            learning_rate: 0.1,
            lr_schedule: Vec::new(),
            l2_coeff: 0.0,
            dropout_keep: 1.0,
            mixup_alpha: 0.0,
            mmd_weight: 0.0,
            dp_clip_norm: None,
            dp_noise_scale: 0.0,
            seed: 0,
            history_interval: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return param("epochs and batch_size must be positive");
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return param("learning_rate must be positive");
        }
        if self.lr_schedule.iter().any(|(_, m)| !(*m > 0.0)) {
            return param("lr_schedule multipliers must be positive");
        }
        if !(self.l2_coeff >= 0.0) {
            return param("l2_coeff must be non-negative");
        }
        if !(self.dropout_keep > 0.0 && self.dropout_keep <= 1.0) {
            return param("dropout_keep must lie in (0, 1]");
        }
        if !(self.mixup_alpha >= 0.0) || !self.mixup_alpha.is_finite() {
            return param("mixup_alpha must be non-negative");
        }
        if !(self.mmd_weight >= 0.0) || !self.mmd_weight.is_finite() {
            return param("mmd_weight must be non-negative");
        }
        if let Some(c) = self.dp_clip_norm {
            if !(c > 0.0) {
                return param("dp_clip_norm must be positive");
            }
            if self.mmd_weight > 0.0 {
                return param("MMD couples examples in a batch and cannot be combined with per-example DP-SGD clipping");
            }
        }
        if !(self.dp_noise_scale >= 0.0) || !self.dp_noise_scale.is_finite() {
            return param("dp_noise_scale must be non-negative");
        }
        Ok(())
    }

    pub fn mixup_enabled(&self) -> bool {
        self.mixup_alpha > 0.0
    }

    pub fn mmd_enabled(&self) -> bool {
        self.mmd_weight > 0.0
    }

    pub fn dp_enabled(&self) -> bool {
        self.dp_clip_norm.is_some()
    }

    /// Full layer widths for `dim` inputs and `classes` outputs.
    pub fn layer_dims(&self, dim: usize, classes: usize) -> Vec<usize> {
        let mut dims = vec![dim];
        dims.extend(&self.hidden_layers);
        dims.push(classes);
        dims
    }
}

/// Marker for the data-dependent kernel bandwidth.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BandwidthHeuristic {
    #[serde(rename = "median-heuristic")]
    Median,
}

/// Base bandwidth `h` of the Gaussian kernel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KernelBandwidth {
    Fixed(f64),
    /// `h² = median` of pairwise squared distances over both samples
    /// (1 when that median is 0 or undefined), floored at
    /// [`MmdConfig::min_heuristic_sq`].
    Heuristic(BandwidthHeuristic),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MmdEstimator {
    #[serde(rename = "biased-squared")]
    BiasedSquared,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MmdConfig {
    pub kernel_bandwidth_base: KernelBandwidth,
    pub bandwidth_multipliers: Vec<f64>,
    pub estimator: MmdEstimator,
    /// Lower bound on a positive heuristic `h²`. Softmax outputs of one class
    /// can collapse onto each other, and the kernel gradient grows like `1/h`.
    pub min_heuristic_sq: f64,
}

pub const DEFAULT_MIN_HEURISTIC_SQ: f64 = 1e-2;

impl Default for MmdConfig {
    fn default() -> Self {
        Self {
            kernel_bandwidth_base: KernelBandwidth::Heuristic(BandwidthHeuristic::Median),
            bandwidth_multipliers: vec![0.25, 0.5, 1.0, 2.0, 4.0],
            estimator: MmdEstimator::BiasedSquared,
            min_heuristic_sq: DEFAULT_MIN_HEURISTIC_SQ,
        }
    }
}

impl MmdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bandwidth_multipliers.is_empty()
            || self.bandwidth_multipliers.iter().any(|m| !(*m > 0.0))
        {
            return param("bandwidth multipliers must be positive and non-empty");
        }
        if !(self.min_heuristic_sq >= 0.0) || !self.min_heuristic_sq.is_finite() {
            return param("min_heuristic_sq must be finite and non-negative");
        }
        if let KernelBandwidth::Fixed(h) = self.kernel_bandwidth_base {
            if !(h > 0.0) {
                return param("fixed kernel bandwidth must be positive");
            }
        }
        Ok(())
    }

    /// Squared widths `(m·h)²` for samples `a` and `b`.
    fn squared_widths(&self, a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Vec<f64> {
        let h2 = match self.kernel_bandwidth_base {
            KernelBandwidth::Fixed(h) => h * h,
            KernelBandwidth::Heuristic(_) => median_pairwise_sq_distance(a, b)
                .filter(|m| *m > 0.0)
                .map_or(1.0, |m| m.max(self.min_heuristic_sq)),
        };
        self.bandwidth_multipliers.iter().map(|m| m * m * h2).collect()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median over unordered pairs of distinct rows of `a ∪ b`; `None` when there
/// is only one row. Even counts average the two middle values.
pub fn median_pairwise_sq_distance(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Option<f64> {
    let rows: Vec<&[f64]> = a
        .rows()
        .into_iter()
        .chain(b.rows())
        .map(|r| r.to_slice().expect("standard layout"))
        .collect();
    let mut d = Vec::with_capacity(rows.len() * rows.len().saturating_sub(1) / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            d.push(sq_dist(rows[i], rows[j]));
        }
    }
    if d.is_empty() {
        return None;
    }
    d.sort_unstable_by(|x, y| x.total_cmp(y));
    let n = d.len();
    Some(if n % 2 == 1 {
        d[n / 2]
    } else {
        0.5 * (d[n / 2 - 1] + d[n / 2])
    })
}

fn kernel_with_widths(a: &[f64], b: &[f64], widths: &[f64]) -> f64 {
    let d2 = sq_dist(a, b);
    widths.iter().map(|s2| (-d2 / (2.0 * s2)).exp()).sum()
}

/// `K[i][j] = Σ_m exp(−‖a_i − b_j‖² / (2 (m h)²))`.
pub fn gaussian_kernel_matrix(
    a: ArrayView2<'_, f64>,
    b: ArrayView2<'_, f64>,
    config: &MmdConfig,
) -> Result<Array2<f64>> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return param("kernel inputs must be non-empty");
    }
    if a.ncols() != b.ncols() {
        return shape("kernel inputs have different widths");
    }
    let a = a.as_standard_layout();
    let b = b.as_standard_layout();
    let widths = config.squared_widths(a.view(), b.view());
    let mut k = Array2::zeros((a.nrows(), b.nrows()));
    for (i, ai) in a.rows().into_iter().enumerate() {
        for (j, bj) in b.rows().into_iter().enumerate() {
            k[[i, j]] = kernel_with_widths(ai.to_slice().unwrap(), bj.to_slice().unwrap(), &widths);
        }
    }
    Ok(k)
}

/// Value of the biased squared-MMD estimator and its gradient with respect to
/// the first sample only.
#[derive(Clone, Debug)]
pub struct MmdValue {
    pub value: f64,
    pub grad_x: Array2<f64>,
}

/// `mean(K_XX) − 2 mean(K_XY) + mean(K_YY)`.
///
/// `y` is treated as constant: no gradient flows to it. A data-dependent
/// bandwidth is likewise treated as a constant when differentiating.
pub fn mmd_squared(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    config: &MmdConfig,
) -> Result<MmdValue> {
    let (n, m) = (x.nrows(), y.nrows());
    if n == 0 || m == 0 {
        return param("MMD needs non-empty samples");
    }
    if x.ncols() != y.ncols() {
        return shape("MMD samples have different widths");
    }
    let x = x.as_standard_layout();
    let y = y.as_standard_layout();
    let widths = config.squared_widths(x.view(), y.view());
    let xr: Vec<&[f64]> = x.rows().into_iter().map(|r| r.to_slice().unwrap()).collect();
    let yr: Vec<&[f64]> = y.rows().into_iter().map(|r| r.to_slice().unwrap()).collect();
    let (nf, mf) = (n as f64, m as f64);
    let mut grad_x = Array2::zeros((n, x.ncols()));

    // ∂k(a,b)/∂a = −Σ_m (a − b)/s_m² · exp(−‖a−b‖²/(2 s_m²))
    let pair = |a: &[f64], b: &[f64], coeff: f64, out: &mut [f64]| -> f64 {
        let d2 = sq_dist(a, b);
        let mut k = 0.0;
        let mut dk = 0.0;
        for s2 in &widths {
            let e = (-d2 / (2.0 * s2)).exp();
            k += e;
            dk += e / s2;
        }
        if coeff != 0.0 {
            for ((o, ai), bi) in out.iter_mut().zip(a).zip(b) {
                *o -= coeff * dk * (ai - bi);
            }
        }
        k
    };

    let (mut kxx, mut kxy) = (0.0, 0.0);
    for i in 0..n {
        let mut g = vec![0.0; x.ncols()];
        for j in 0..n {
            kxx += pair(xr[i], xr[j], 2.0 / (nf * nf), &mut g);
        }
        for j in 0..m {
            kxy += pair(xr[i], yr[j], -2.0 / (nf * mf), &mut g);
        }
        grad_x.row_mut(i).assign(&ndarray::ArrayView1::from(&g));
    }
    let mut kyy = 0.0;
    for a in &yr {
        for b in &yr {
            kyy += kernel_with_widths(a, b, &widths);
        }
    }
    let value = kxx / (nf * nf) - 2.0 * kxy / (nf * mf) + kyy / (mf * mf);
    Ok(MmdValue { value, grad_x })
}

/// Mix-up of one pair: `λ·a + (1−λ)·b` for both features and labels.
pub fn mix_pair(
    xi: &[f64],
    yi: &[f64],
    xj: &[f64],
    yj: &[f64],
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let mix = |a: &[f64], b: &[f64]| -> Vec<f64> {
        a.iter()
            .zip(b)
            .map(|(u, v)| lambda * u + (1.0 - lambda) * v)
            .collect()
    };
    (mix(xi, xj), mix(yi, yj))
}

/// A mixed batch and the choices that produced it.
#[derive(Clone, Debug)]
pub struct MixedBatch {
    pub x: Array2<f64>,
    pub y: Array2<f64>,
    pub partners: Vec<usize>,
    pub lambdas: Vec<f64>,
}

/// Deterministic mix-up given the partner of each row and its λ.
pub fn mixup_with(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    partners: &[usize],
    lambdas: &[f64],
) -> Result<MixedBatch> {
    let n = x.nrows();
    if y.nrows() != n || partners.len() != n || lambdas.len() != n {
        return shape("mix-up inputs have inconsistent lengths");
    }
    let mut mx = Array2::zeros(x.raw_dim());
    let mut my = Array2::zeros(y.raw_dim());
    for i in 0..n {
        let (j, lam) = (partners[i], lambdas[i]);
        if j >= n {
            return shape(format!("partner {j} out of range"));
        }
        mx.row_mut(i)
            .assign(&(&x.row(i) * lam + &x.row(j) * (1.0 - lam)));
        my.row_mut(i)
            .assign(&(&y.row(i) * lam + &y.row(j) * (1.0 - lam)));
    }
    Ok(MixedBatch {
        x: mx,
        y: my,
        partners: partners.to_vec(),
        lambdas: lambdas.to_vec(),
    })
}

/// Pairs each row with the row at the same position of a random permutation
/// and mixes with `λ ~ Beta(α, α)` drawn per pair.
pub fn mixup_batch<R: Rng>(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    alpha: f64,
    rng: &mut R,
) -> Result<MixedBatch> {
    let n = x.nrows();
    if n < 2 {
        return param("mix-up needs at least two instances");
    }
    if !(alpha > 0.0) {
        return param("mix-up alpha must be positive");
    }
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::Parameter(e.to_string()))?;
    let mut partners: Vec<usize> = (0..n).collect();
    partners.shuffle(rng);
    let lambdas: Vec<f64> = (0..n).map(|_| beta.sample(rng)).collect();
    mixup_with(x, y, &partners, &lambdas)
}

/// Averaged MMD penalty over class groups and its gradient with respect to
/// the logits of `trace`.
///
/// `groups` lists, per class, the rows of `trace` carrying that class and the
/// validation probabilities of the same class. The penalty is the mean of the
/// per-class MMD² values.
fn mmd_penalty(
    trace_probs: &Array2<f64>,
    groups: &[(Vec<usize>, Array2<f64>)],
    config: &MmdConfig,
) -> Result<(f64, Array2<f64>)> {
    let mut dprobs = Array2::zeros(trace_probs.raw_dim());
    if groups.is_empty() {
        return Ok((0.0, dprobs));
    }
    let scale = 1.0 / groups.len() as f64;
    let mut total = 0.0;
    for (rows, val_probs) in groups {
        let x = trace_probs.select(Axis(0), rows);
        let mmd = mmd_squared(x.view(), val_probs.view(), config)?;
        total += mmd.value;
        for (k, &r) in rows.iter().enumerate() {
            dprobs.row_mut(r).scaled_add(scale, &mmd.grad_x.row(k));
        }
    }
    let dlogits = softmax_backward(trace_probs, &dprobs);
    Ok((total * scale, dlogits))
}

/// A labeled minibatch of features with (possibly soft) targets.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x: Array2<f64>,
    pub targets: Array2<f64>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(x: Array2<f64>, labels: Vec<usize>, num_classes: usize) -> Self {
        let targets = one_hot(&labels, num_classes);
        Self { x, targets, labels }
    }
}

/// `CE(train) + mmd_weight · MMD²(softmax(train), softmax(validation))` for a
/// single class, with gradient flowing through the training outputs only.
///
/// The validation batch is passed through the model in inference mode; the
/// training batch uses `dropout` when given.
pub fn mmd_regularized_loss<R: Rng>(
    model: &MlpModel,
    train: &Batch,
    validation: &Batch,
    mmd_weight: f64,
    l2_coeff: f64,
    config: &MmdConfig,
    dropout: Option<Dropout<'_, R>>,
) -> Result<(f64, GradientSet)> {
    if train.labels.is_empty() || validation.labels.is_empty() {
        return param("MMD-regularized loss needs non-empty batches");
    }
    let class = train.labels[0];
    if train.labels.iter().chain(&validation.labels).any(|&y| y != class) {
        return param("training and validation batches must share one class label");
    }
    let trace = model.forward_batch(train.x.view(), dropout)?;
    let (ce, mut grad) = model.backward_from_trace(&trace, train.targets.view(), l2_coeff)?;
    if mmd_weight == 0.0 {
        return Ok((ce, grad));
    }
    let val_probs = model.predict_proba_batch(validation.x.view())?;
    let probs = trace.probs();
    let rows: Vec<usize> = (0..train.labels.len()).collect();
    let (penalty, dlogits) = mmd_penalty(&probs, &[(rows, val_probs)], config)?;
    grad.add_scaled(&model.backprop(&trace, &dlogits), mmd_weight);
    Ok((ce + mmd_weight * penalty, grad))
}

/// Clips each per-example gradient to global norm `clip_norm`, sums, adds
/// `N(0, σ²C²)` per coordinate, divides by the batch size and takes an SGD
/// step.
pub fn dp_sgd_step<R: Rng>(
    model: &mut MlpModel,
    per_example: &[GradientSet],
    clip_norm: f64,
    noise_scale: f64,
    lr: f64,
    rng: &mut R,
) -> Result<()> {
    check_dp(clip_norm, noise_scale, per_example.len())?;
    let mut sum = GradientSet::zeros_like(model);
    for g in per_example {
        sum.add_scaled(g, clip_factor(g, clip_norm));
    }
    noisy_update(model, sum, per_example.len(), clip_norm, noise_scale, lr, rng)
}

fn check_dp(clip_norm: f64, noise_scale: f64, batch: usize) -> Result<()> {
    if !(clip_norm > 0.0) {
        return param("clip norm must be positive");
    }
    if !(noise_scale >= 0.0) {
        return param("noise scale must be non-negative");
    }
    if batch == 0 {
        return param("DP-SGD step needs at least one example");
    }
    Ok(())
}

/// Second half of a DP-SGD step: noise the clipped sum, average, update.
fn noisy_update<R: Rng>(
    model: &mut MlpModel,
    mut sum: GradientSet,
    batch: usize,
    clip_norm: f64,
    noise_scale: f64,
    lr: f64,
    rng: &mut R,
) -> Result<()> {
    if noise_scale > 0.0 {
        let std = noise_scale * clip_norm;
        let normal = Normal::new(0.0, std).map_err(|e| Error::Numeric(e.to_string()))?;
        for v in sum.iter_mut() {
            *v += normal.sample(rng);
        }
    }
    sum.scale(1.0 / batch as f64);
    model.apply_gradient(&sum, lr);
    Ok(())
}

/// `min(1, C / ‖g‖₂)`.
pub fn clip_factor(g: &GradientSet, clip_norm: f64) -> f64 {
    let norm = g.l2_norm();
    if norm > clip_norm {
        clip_norm / norm
    } else {
        1.0
    }
}

/// One row of the per-epoch training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_acc: Option<f64>,
    pub eval_acc: Option<f64>,
    pub mean_ce: f64,
    pub mean_mmd: f64,
}

/// Result of [`train_model`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: MlpModel,
    pub history: Vec<EpochRecord>,
}

/// History as CSV with header `epoch,train_acc,eval_acc,mean_ce,mean_mmd`.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_acc,eval_acc,mean_ce,mean_mmd\n");
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    for r in history {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.epoch,
            opt(r.train_acc),
            opt(r.eval_acc),
            r.mean_ce,
            r.mean_mmd
        );
    }
    out
}

fn gather(dataset: &Dataset, ids: &[usize]) -> (Array2<f64>, Vec<usize>) {
    let mut flat = Vec::with_capacity(ids.len() * dataset.dim());
    let mut labels = Vec::with_capacity(ids.len());
    for &i in ids {
        let inst = dataset.get(i);
        flat.extend_from_slice(&inst.features);
        labels.push(inst.label);
    }
    let x = Array2::from_shape_vec((ids.len(), dataset.dim()), flat).expect("consistent dims");
    (x, labels)
}

/// Fraction of rows of `x` whose predicted class equals `labels`.
pub(crate) fn batch_accuracy(model: &MlpModel, x: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    let probs = model.predict_proba_batch(x.view())?;
    let correct = probs
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(p, &y)| crate::model::argmax(p.as_slice().unwrap()) == y)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Trains a fresh model on `train_ids`.
///
/// * `validation_ids`: the MMD reference set (required when `mmd_weight > 0`).
/// * `monitor_ids`: optional held-out instances whose accuracy is logged as
///   `eval_acc` in the history.
///
/// RNG streams (all derived from `config.seed`): 1 initialization,
/// 2 shuffling / dropout / mix-up, 3 validation sub-batch sampling,
/// 4 DP noise.
pub fn train_model(
    dataset: &Dataset,
    train_ids: &[usize],
    validation_ids: Option<&[usize]>,
    monitor_ids: Option<&[usize]>,
    config: &TrainConfig,
    mmd_config: &MmdConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_ids.is_empty() {
        return param("training set is empty");
    }
    let classes = dataset.num_classes();
    let validation = match (config.mmd_enabled(), validation_ids) {
        (true, None) => return param("MMD regularization needs a validation set"),
        (true, Some(v)) if v.is_empty() => return param("validation set is empty"),
        (true, Some(v)) => {
            mmd_config.validate()?;
            let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
            for &i in v {
                by_class[dataset.get(i).label].push(i);
            }
            Some(by_class)
        }
        (false, _) => None,
    };

    let mut init_rng = stage_rng(config.seed, 1);
    let mut rng = stage_rng(config.seed, 2);
    let mut val_rng = stage_rng(config.seed, 3);
    let mut noise_rng = stage_rng(config.seed, 4);

    let mut model = MlpModel::new(&config.layer_dims(dataset.dim(), classes), &mut init_rng)?;
    let (train_x, train_labels) = gather(dataset, train_ids);
    let train_y = one_hot(&train_labels, classes);
    let monitor = monitor_ids
        .filter(|m| !m.is_empty())
        .map(|m| gather(dataset, m));

    let mut lr = config.learning_rate;
    let mut order: Vec<usize> = (0..train_ids.len()).collect();
    let mut history = Vec::new();

    for epoch in 0..config.epochs {
        for (_, mult) in config.lr_schedule.iter().filter(|(e, _)| *e == epoch) {
            lr *= mult;
        }
        order.shuffle(&mut rng);
        let (mut ce_sum, mut mmd_sum, mut steps) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let bx = train_x.select(Axis(0), chunk);
            let by = train_y.select(Axis(0), chunk);
            let blabels: Vec<usize> = chunk.iter().map(|&i| train_labels[i]).collect();
            let (ce, mmd) = step(
                &mut model,
                StepInput {
                    x: bx,
                    y: by,
                    labels: &blabels,
                    validation: validation.as_deref(),
                    dataset,
                },
                config,
                mmd_config,
                lr,
                &mut rng,
                &mut val_rng,
                &mut noise_rng,
            )?;
            ce_sum += ce;
            mmd_sum += mmd;
            steps += 1;
        }
        if !model.is_finite() {
            return Err(Error::Numeric(format!("training diverged in epoch {epoch}")));
        }
        let last = epoch + 1 == config.epochs;
        let record = last
            || (config.history_interval > 0 && (epoch + 1) % config.history_interval == 0);
        let (train_acc, eval_acc) = if record {
            let tr = batch_accuracy(&model, &train_x, &train_labels)?;
            let ev = match &monitor {
                Some((mx, ml)) => Some(batch_accuracy(&model, mx, ml)?),
                None => None,
            };
            (Some(tr), ev)
        } else {
            (None, None)
        };
        history.push(EpochRecord {
            epoch: epoch + 1,
            train_acc,
            eval_acc,
            mean_ce: ce_sum / steps as f64,
            mean_mmd: mmd_sum / steps as f64,
        });
    }
    Ok(TrainOutcome { model, history })
}

struct StepInput<'a> {
    x: Array2<f64>,
    y: Array2<f64>,
    labels: &'a [usize],
    validation: Option<&'a [Vec<usize>]>,
    dataset: &'a Dataset,
}

/// One SGD step; returns the batch cross-entropy and MMD penalty.
#[allow(clippy::too_many_arguments)]
fn step(
    model: &mut MlpModel,
    input: StepInput<'_>,
    config: &TrainConfig,
    mmd_config: &MmdConfig,
    lr: f64,
    rng: &mut LabRng,
    val_rng: &mut LabRng,
    noise_rng: &mut LabRng,
) -> Result<(f64, f64)> {
    let StepInput {
        x,
        y,
        labels,
        validation,
        dataset,
    } = input;
    let mixed = if config.mixup_enabled() && x.nrows() >= 2 {
        Some(mixup_batch(x.view(), y.view(), config.mixup_alpha, rng)?)
    } else {
        None
    };
    let (fit_x, fit_y) = match &mixed {
        Some(m) => (m.x.view(), m.y.view()),
        None => (x.view(), y.view()),
    };
    let trace = model.forward_batch(
        fit_x,
        Some(Dropout {
            keep: config.dropout_keep,
            rng: &mut *rng,
        }),
    )?;

    if let Some(clip) = config.dp_clip_norm {
        let probs = trace.probs();
        let ce = mean_cross_entropy(&probs, fit_y);
        let dlogits = &probs - &fit_y;
        check_dp(clip, config.dp_noise_scale, dlogits.nrows())?;
        let sum = model.clipped_gradient_sum(&trace, &dlogits, config.l2_coeff, clip);
        noisy_update(model, sum, dlogits.nrows(), clip, config.dp_noise_scale, lr, noise_rng)?;
        return Ok((ce, 0.0));
    }

    let (ce, mut grad) = model.backward_from_trace(&trace, fit_y, config.l2_coeff)?;
    let mut penalty = 0.0;
    if let (true, Some(val_by_class)) = (config.mmd_enabled(), validation) {
        // The penalty compares clean training outputs with validation outputs,
        // so a mixed batch needs its own forward pass over the originals.
        let clean_trace: ForwardTrace = if mixed.is_some() {
            model.forward_batch(
                x.view(),
                Some(Dropout {
                    keep: config.dropout_keep,
                    rng: &mut *rng,
                }),
            )?
        } else {
            trace
        };
        let probs = clean_trace.probs();
        let mut picked_rows = Vec::new();
        let mut spans = Vec::new();
        for class in 0..dataset.num_classes() {
            let rows: Vec<usize> = labels
                .iter()
                .enumerate()
                .filter(|(_, &l)| l == class)
                .map(|(i, _)| i)
                .collect();
            let pool = &val_by_class[class];
            if rows.is_empty() || pool.is_empty() {
                continue;
            }
            let take = rows.len().min(pool.len());
            let start = picked_rows.len();
            picked_rows.extend(index::sample(val_rng, pool.len(), take).into_iter().map(|p| pool[p]));
            spans.push((rows, start..picked_rows.len()));
        }
        // One inference pass over all sampled validation rows.
        let (vx, _) = gather(dataset, &picked_rows);
        let val_probs = model.predict_proba_batch(vx.view())?;
        let groups: Vec<(Vec<usize>, Array2<f64>)> = spans
            .into_iter()
            .map(|(rows, span)| (rows, val_probs.slice(ndarray::s![span, ..]).to_owned()))
            .collect();
        let (value, dlogits) = mmd_penalty(&probs, &groups, mmd_config)?;
        grad.add_scaled(&model.backprop(&clean_trace, &dlogits), config.mmd_weight);
        penalty = value;
    }
    model.apply_gradient(&grad, lr);
    Ok((ce, penalty))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use ndarray::array;

    #[test]
    fn mixup_endpoints_and_midpoint() {
        let x = array![[0.0, 2.0], [2.0, 0.0]];
        let y = one_hot(&[0, 1], 2);
        let m = mixup_with(x.view(), y.view(), &[1, 0], &[1.0, 1.0]).unwrap();
        assert_eq!(m.x, x);
        assert_eq!(m.y, y);
        let m = mixup_with(x.view(), y.view(), &[1, 0], &[0.5, 0.5]).unwrap();
        assert_eq!(m.x.row(0).to_vec(), vec![1.0, 1.0]);
        assert_eq!(m.y.row(0).to_vec(), vec![0.5, 0.5]);
        let (px, py) = mix_pair(&[0.0, 2.0], &[1.0, 0.0], &[2.0, 0.0], &[0.0, 1.0], 0.5);
        assert_eq!((px, py), (vec![1.0, 1.0], vec![0.5, 0.5]));
    }

    #[test]
    fn mixup_rejects_tiny_batches() {
        let x = array![[1.0]];
        let y = one_hot(&[0], 2);
        assert!(mixup_batch(x.view(), y.view(), 1.0, &mut rng_from_seed(0)).is_err());
    }

    #[test]
    fn kernel_closed_forms() {
        let cfg = MmdConfig {
            kernel_bandwidth_base: KernelBandwidth::Fixed(1.0),
            bandwidth_multipliers: vec![1.0],
            ..MmdConfig::default()
        };
        let a = array![[1.0, 0.0]];
        let b = array![[0.0, 1.0]];
        let k = gaussian_kernel_matrix(a.view(), b.view(), &cfg).unwrap();
        assert!((k[[0, 0]] - (-1.0f64).exp()).abs() < 1e-15);

        let k = gaussian_kernel_matrix(a.view(), a.view(), &MmdConfig::default()).unwrap();
        assert_eq!(k[[0, 0]], 5.0);
    }

    #[test]
    fn kernel_decreases_with_distance() {
        let cfg = MmdConfig::default();
        let origin = array![[0.0, 0.0]];
        let far = array![[0.1, 0.0], [0.5, 0.0], [1.0, 0.0], [3.0, 0.0]];
        let cfg = MmdConfig {
            kernel_bandwidth_base: KernelBandwidth::Fixed(0.7),
            ..cfg
        };
        let k = gaussian_kernel_matrix(origin.view(), far.view(), &cfg).unwrap();
        for j in 1..4 {
            assert!(k[[0, j]] < k[[0, j - 1]]);
        }
    }

    #[test]
    fn median_heuristic_fallback() {
        let a = array![[0.3, 0.7]];
        assert_eq!(median_pairwise_sq_distance(a.view(), Array2::zeros((0, 2)).view()), None);
        let b = array![[0.3, 0.7]];
        assert_eq!(median_pairwise_sq_distance(a.view(), b.view()), Some(0.0));
        // Median 0 falls back to h = 1 instead of dividing by zero.
        let v = mmd_squared(a.view(), b.view(), &MmdConfig::default()).unwrap();
        assert!(v.value.abs() < 1e-12);
    }

    #[test]
    fn mmd_of_identical_samples_is_zero() {
        let x = array![[0.2, 0.8], [0.6, 0.4], [0.9, 0.1]];
        let v = mmd_squared(x.view(), x.view(), &MmdConfig::default()).unwrap();
        assert!(v.value.abs() <= 1e-12);
        assert!(v.grad_x.iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn dp_step_clip_contract() {
        let mut rng = rng_from_seed(0);
        let model = MlpModel::new(&[2, 3, 2], &mut rng).unwrap();
        let mut g = model.parameters();
        g.scale(10.0);
        let f = clip_factor(&g, 1.0);
        let mut clipped = g.clone();
        clipped.scale(f);
        assert!(clipped.l2_norm() <= 1.0 + 1e-12);
        assert_eq!(clip_factor(&g, 1e9), 1.0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            mixup_alpha: -1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            mmd_weight: 1.0,
            dp_clip_norm: Some(1.0),
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn mmd_config_json_shape() {
        let json = serde_json::to_string(&MmdConfig::default()).unwrap();
        assert!(json.contains("\"median-heuristic\""));
        assert!(json.contains("\"biased-squared\""));
        let fixed: MmdConfig =
            serde_json::from_str(r#"{"kernel_bandwidth_base":0.5}"#).unwrap();
        assert_eq!(fixed.kernel_bandwidth_base, KernelBandwidth::Fixed(0.5));
    }

    #[test]
    fn history_csv_layout() {
        let csv = history_csv(&[EpochRecord {
            epoch: 1,
            train_acc: Some(0.5),
            eval_acc: None,
            mean_ce: 0.25,
            mean_mmd: 0.0,
        }]);
        assert_eq!(csv, "epoch,train_acc,eval_acc,mean_ce,mean_mmd\n1,0.5,,0.25,0\n");
    }
}

//! Feed-forward softmax classifier with hand-written backpropagation.
//!
//! Layer `l` maps width `layer_dims[l]` to `layer_dims[l + 1]` as
//! `z = W x + b` with `W` stored `(out, in)`. Hidden layers use ReLU followed
//! by optional inverted dropout; the last layer produces logits.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape, Error, Result};

/// Lower clamp applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Softmax output over `c` classes.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    /// Wraps a vector after checking it lies on the simplex (within 1e-9).
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return shape("probability vector must not be empty");
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0 || *p > 1.0) {
            return Err(Error::Numeric(format!("not a probability vector: {probs:?}")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Numeric(format!("probabilities sum to {sum}")));
        }
        Ok(Self(probs))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest component; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

/// First index of the maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Result<ProbVector> {
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::Numeric("softmax of non-finite logits".into()));
    }
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    ProbVector::new(out)
}

/// Softmax of `logits / temperature`. Only meaningful at inference time.
pub fn softmax_with_temperature(logits: &[f64], temperature: f64) -> Result<ProbVector> {
    if !(temperature > 0.0) {
        return Err(Error::Parameter("temperature must be positive".into()));
    }
    let scaled: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
    softmax(&scaled)
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for z in row.iter_mut() {
        *z = (*z - max).exp();
        sum += *z;
    }
    for z in row.iter_mut() {
        *z /= sum;
    }
}

/// Row-wise softmax of a `(n, c)` logit matrix.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut probs = logits.clone();
    for mut row in probs.rows_mut() {
        softmax_in_place(row.as_slice_mut().expect("standard layout"));
    }
    probs
}

/// Label target for cross-entropy: a class index or a soft distribution.
#[derive(Clone, Copy, Debug)]
pub enum Target<'a> {
    Hard(usize),
    Soft(&'a [f64]),
}

/// `-Σ_j y_j ln p_j`, probabilities clamped at [`PROB_FLOOR`].
pub fn cross_entropy(p: &[f64], y: Target<'_>) -> Result<f64> {
    match y {
        Target::Hard(label) => {
            if label >= p.len() {
                return shape(format!("label {label} out of range for {} classes", p.len()));
            }
            Ok(-p[label].max(PROB_FLOOR).ln())
        }
        Target::Soft(soft) => {
            if soft.len() != p.len() {
                return shape("soft label length differs from probability vector");
            }
            Ok(soft_cross_entropy(p, soft))
        }
    }
}

pub(crate) fn soft_cross_entropy(p: &[f64], soft: &[f64]) -> f64 {
    -p.iter()
        .zip(soft)
        .filter(|(_, &y)| y != 0.0)
        .map(|(&p, &y)| y * p.max(PROB_FLOOR).ln())
        .sum::<f64>()
}

/// Parameters of the classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpModel {
    layer_dims: Vec<usize>,
    pub(crate) weights: Vec<Array2<f64>>,
    pub(crate) biases: Vec<Array1<f64>>,
}

/// Per-parameter tensors with the same shapes as an [`MlpModel`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl GradientSet {
    pub fn zeros_like(model: &MlpModel) -> Self {
        Self {
            weights: model.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            biases: model.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &GradientSet, scale: f64) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.scaled_add(scale, b);
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            a.scaled_add(scale, b);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for w in &mut self.weights {
            *w *= factor;
        }
        for b in &mut self.biases {
            *b *= factor;
        }
    }

    /// Global L2 norm over every parameter.
    pub fn l2_norm(&self) -> f64 {
        let sq: f64 = self
            .weights
            .iter()
            .map(|w| w.iter().map(|v| v * v).sum::<f64>())
            .chain(self.biases.iter().map(|b| b.iter().map(|v| v * v).sum::<f64>()))
            .sum();
        sq.sqrt()
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// All entries, layer by layer: weights row-major then biases.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| w.iter_mut().chain(b.iter_mut()))
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }
}

/// Activations recorded by a batched forward pass, needed for backprop.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// `activations[0]` is the input; `activations[l]` the (post-dropout)
    /// output of hidden layer `l`.
    pub activations: Vec<Array2<f64>>,
    /// Inverted-dropout masks (entries 0 or 1/keep) per hidden layer.
    pub masks: Vec<Option<Array2<f64>>>,
    pub logits: Array2<f64>,
}

impl ForwardTrace {
    pub fn probs(&self) -> Array2<f64> {
        softmax_rows(&self.logits)
    }

    pub fn batch_size(&self) -> usize {
        self.logits.nrows()
    }
}

/// Output of a single-instance forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Forward {
    pub logits: Vec<f64>,
    pub hidden: Vec<Vec<f64>>,
}

/// Dropout applied during a training-mode forward pass.
pub struct Dropout<'a, R: Rng> {
    pub keep: f64,
    pub rng: &'a mut R,
}

/// JSON checkpoint layout.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub layer_dims: Vec<usize>,
    /// One flat row-major `(out, in)` array per layer.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub activation: String,
}

impl MlpModel {
    /// He-uniform initialized weights, zero biases.
    pub fn new<R: Rng>(layer_dims: &[usize], rng: &mut R) -> Result<Self> {
        let mut model = Self::zeros(layer_dims)?;
        for w in &mut model.weights {
            let limit = (6.0 / w.ncols() as f64).sqrt();
            w.mapv_inplace(|_| rng.gen_range(-limit..limit));
        }
        Ok(model)
    }

    /// All parameters zero.
    pub fn zeros(layer_dims: &[usize]) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.iter().any(|&d| d == 0) {
            return shape(format!("invalid layer dims {layer_dims:?}"));
        }
        let weights = layer_dims
            .windows(2)
            .map(|w| Array2::zeros((w[1], w[0])))
            .collect();
        let biases = layer_dims[1..].iter().map(|&n| Array1::zeros(n)).collect();
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
        })
    }

    /// Builds a model from explicit parameters, checking every shape.
    pub fn from_parameters(weights: Vec<Array2<f64>>, biases: Vec<Array1<f64>>) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return shape("need one bias vector per weight matrix");
        }
        let mut dims = vec![weights[0].ncols()];
        for (l, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.ncols() != *dims.last().unwrap() || w.nrows() != b.len() {
                return shape(format!("layer {l} has inconsistent shapes"));
            }
            dims.push(w.nrows());
        }
        let model = Self {
            layer_dims: dims,
            weights,
            biases,
        };
        if !model.is_finite() {
            return Err(Error::Numeric("non-finite parameters".into()));
        }
        Ok(model)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<f64>] {
        &self.biases
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    /// Parameters viewed as a [`GradientSet`]-shaped container.
    pub fn parameters(&self) -> GradientSet {
        GradientSet {
            weights: self.weights.clone(),
            biases: self.biases.clone(),
        }
    }

    pub fn set_parameters(&mut self, params: GradientSet) -> Result<()> {
        let candidate = Self::from_parameters(params.weights, params.biases)?;
        if candidate.layer_dims != self.layer_dims {
            return shape("parameter shapes differ from the model");
        }
        *self = candidate;
        Ok(())
    }

    /// Plain SGD update `θ -= lr * grad`.
    pub fn apply_gradient(&mut self, grad: &GradientSet, lr: f64) {
        for (w, g) in self.weights.iter_mut().zip(&grad.weights) {
            w.scaled_add(-lr, g);
        }
        for (b, g) in self.biases.iter_mut().zip(&grad.biases) {
            b.scaled_add(-lr, g);
        }
    }

    /// `Σ ‖W_l‖²` over weight matrices (biases excluded).
    pub fn weight_sq_norm(&self) -> f64 {
        self.weights
            .iter()
            .map(|w| w.iter().map(|v| v * v).sum::<f64>())
            .sum()
    }

    /// Batched forward pass over the rows of `x`. Dropout, when given, is
    /// applied to every hidden activation.
    pub fn forward_batch<R: Rng>(
        &self,
        x: ArrayView2<'_, f64>,
        mut dropout: Option<Dropout<'_, R>>,
    ) -> Result<ForwardTrace> {
        if x.ncols() != self.input_dim() {
            return shape(format!(
                "input has {} features, model expects {}",
                x.ncols(),
                self.input_dim()
            ));
        }
        let last = self.num_layers() - 1;
        let mut activations = vec![x.to_owned()];
        let mut masks = Vec::with_capacity(last);
        for l in 0..last {
            let mut h = activations[l].dot(&self.weights[l].t()) + &self.biases[l];
            h.mapv_inplace(|v| v.max(0.0));
            let mask = match dropout.as_mut() {
                Some(d) if d.keep < 1.0 => {
                    let keep = d.keep;
                    let scale = 1.0 / keep;
                    let m = Array2::from_shape_simple_fn(h.raw_dim(), || {
                        if d.rng.gen::<f64>() < keep {
                            scale
                        } else {
                            0.0
                        }
                    });
                    h *= &m;
                    Some(m)
                }
                _ => None,
            };
            masks.push(mask);
            activations.push(h);
        }
        let logits = activations[last].dot(&self.weights[last].t()) + &self.biases[last];
        Ok(ForwardTrace {
            activations,
            masks,
            logits,
        })
    }

    /// Inference-mode logits for the rows of `x`.
    pub fn logits_batch(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(self
            .forward_batch::<rand::rngs::mock::StepRng>(x, None)?
            .logits)
    }

    /// Inference-mode probabilities for the rows of `x`.
    pub fn predict_proba_batch(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(softmax_rows(&self.logits_batch(x)?))
    }

    /// Single-instance forward pass. Dropout with `keep` is applied only when
    /// `rng` is supplied.
    pub fn forward<R: Rng>(
        &self,
        x: &[f64],
        dropout_keep: f64,
        rng: Option<&mut R>,
    ) -> Result<Forward> {
        if !(dropout_keep > 0.0 && dropout_keep <= 1.0) {
            return Err(Error::Parameter("dropout_keep must lie in (0, 1]".into()));
        }
        let xv = ArrayView2::from_shape((1, x.len()), x)
            .map_err(|e| Error::Shape(e.to_string()))?;
        let dropout = rng.map(|rng| Dropout {
            keep: dropout_keep,
            rng,
        });
        let trace = self.forward_batch(xv, dropout)?;
        Ok(Forward {
            logits: trace.logits.row(0).to_vec(),
            hidden: trace.activations[1..]
                .iter()
                .map(|a| a.row(0).to_vec())
                .collect(),
        })
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<ProbVector> {
        let f = self.forward::<rand::rngs::mock::StepRng>(x, 1.0, None)?;
        softmax(&f.logits)
    }

    /// Predicted class; ties go to the lowest class index.
    pub fn predict_label(&self, x: &[f64]) -> Result<usize> {
        Ok(self.predict_proba(x)?.argmax())
    }

    /// Backpropagates `dlogits` (already scaled by the caller, e.g. by 1/n for
    /// a mean loss) through a recorded forward pass. No regularization.
    pub fn backprop(&self, trace: &ForwardTrace, dlogits: &Array2<f64>) -> GradientSet {
        let deltas = self.layer_deltas(trace, dlogits);
        let weights = deltas.iter().zip(&trace.activations).map(|(d, a)| d.t().dot(a)).collect();
        let biases = deltas.iter().map(|d| d.sum_axis(Axis(0))).collect();
        GradientSet { weights, biases }
    }

    /// Per-row gradients of the loss w.r.t. each layer's pre-activation
    /// output; row `i` of layer `l`'s weight gradient is `δ_i a_iᵀ`.
    pub fn layer_deltas(&self, trace: &ForwardTrace, dlogits: &Array2<f64>) -> Vec<Array2<f64>> {
        let layers = self.num_layers();
        let mut deltas = vec![Array2::zeros((0, 0)); layers];
        let mut delta = dlogits.clone();
        for l in (0..layers).rev() {
            if l > 0 {
                let mut upstream = delta.dot(&self.weights[l]);
                let act = &trace.activations[l];
                match &trace.masks[l - 1] {
                    Some(mask) => Zip::from(&mut upstream)
                        .and(act)
                        .and(mask)
                        .for_each(|d, &a, &m| *d = if a > 0.0 { *d * m } else { 0.0 }),
                    None => Zip::from(&mut upstream)
                        .and(act)
                        .for_each(|d, &a| {
                            if a <= 0.0 {
                                *d = 0.0
                            }
                        }),
                }
                deltas[l] = std::mem::replace(&mut delta, upstream);
            } else {
                deltas[l] = std::mem::take(&mut delta);
            }
        }
        deltas
    }

    /// One gradient per row of the trace, for per-example clipping.
    pub fn per_example_backprop(
        &self,
        trace: &ForwardTrace,
        dlogits: &Array2<f64>,
    ) -> Vec<GradientSet> {
        (0..trace.batch_size())
            .map(|i| {
                let row = |a: &Array2<f64>| a.slice(ndarray::s![i..i + 1, ..]).to_owned();
                let single = ForwardTrace {
                    activations: trace.activations.iter().map(row).collect(),
                    masks: trace.masks.iter().map(|m| m.as_ref().map(row)).collect(),
                    logits: row(&trace.logits),
                };
                self.backprop(&single, &row(dlogits))
            })
            .collect()
    }

    /// `Σ_i min(1, C/‖g_i‖) g_i` where `g_i` is row `i`'s gradient (its
    /// `dlogits` row backpropagated, plus the L2 term) — the clipped sum of
    /// [`MlpModel::per_example_backprop`] without materializing each `g_i`.
    ///
    /// With `g_i = δ_i a_iᵀ + λW` per layer,
    /// `‖g_i‖² = Σ_l ‖δ_il‖²(‖a_il‖² + 1) + 2λ δ_ilᵀ W_l a_il + λ²‖W_l‖²`,
    /// and by linearity the clipped sum is one backprop of the row-scaled
    /// `dlogits` plus `λ (Σ_i c_i) W`.
    pub fn clipped_gradient_sum(
        &self,
        trace: &ForwardTrace,
        dlogits: &Array2<f64>,
        l2_coeff: f64,
        clip_norm: f64,
    ) -> GradientSet {
        let deltas = self.layer_deltas(trace, dlogits);
        let n = dlogits.nrows();
        let mut sq = Array1::<f64>::zeros(n);
        for (l, (d, a)) in deltas.iter().zip(&trace.activations).enumerate() {
            let d2 = d.mapv(|v| v * v).sum_axis(Axis(1));
            let a2 = a.mapv(|v| v * v).sum_axis(Axis(1));
            sq += &(&d2 * &(a2 + 1.0));
            if l2_coeff != 0.0 {
                let w = &self.weights[l];
                let cross = (&a.dot(&w.t()) * d).sum_axis(Axis(1));
                sq += &(cross * (2.0 * l2_coeff));
                sq += l2_coeff * l2_coeff * w.mapv(|v| v * v).sum();
            }
        }
        let factors = sq.mapv(|s| {
            let norm = s.max(0.0).sqrt();
            if norm > clip_norm { clip_norm / norm } else { 1.0 }
        });
        let scaled = dlogits * &factors.view().insert_axis(Axis(1));
        let mut sum = self.backprop(trace, &scaled);
        if l2_coeff != 0.0 {
            let total = factors.sum();
            for (g, w) in sum.weights.iter_mut().zip(&self.weights) {
                g.scaled_add(l2_coeff * total, w);
            }
        }
        sum
    }

    /// Adds the gradient of `l2_coeff * ‖W‖² / 2` (weights only).
    pub fn add_l2_gradient(&self, grad: &mut GradientSet, l2_coeff: f64) {
        if l2_coeff == 0.0 {
            return;
        }
        for (g, w) in grad.weights.iter_mut().zip(&self.weights) {
            g.scaled_add(l2_coeff, w);
        }
    }

    /// Mean soft-label cross-entropy plus `l2_coeff * ‖W‖² / 2` over a batch,
    /// and its exact gradient.
    ///
    /// `targets` holds one distribution per row of `x`. When `dropout` is
    /// given the pass runs in training mode with freshly drawn masks.
    pub fn backward<R: Rng>(
        &self,
        x: ArrayView2<'_, f64>,
        targets: ArrayView2<'_, f64>,
        dropout: Option<Dropout<'_, R>>,
        l2_coeff: f64,
    ) -> Result<(f64, GradientSet)> {
        let trace = self.forward_batch(x, dropout)?;
        self.backward_from_trace(&trace, targets, l2_coeff)
    }

    /// [`MlpModel::backward`] for an already recorded forward pass, so callers
    /// can reuse a fixed set of dropout masks.
    pub fn backward_from_trace(
        &self,
        trace: &ForwardTrace,
        targets: ArrayView2<'_, f64>,
        l2_coeff: f64,
    ) -> Result<(f64, GradientSet)> {
        let n = trace.batch_size();
        if n == 0 {
            return Err(Error::Parameter("empty batch".into()));
        }
        if targets.dim() != trace.logits.dim() {
            return shape("targets must have one row per instance and one column per class");
        }
        let probs = trace.probs();
        let loss = mean_cross_entropy(&probs, targets)
            + 0.5 * l2_coeff * self.weight_sq_norm();
        let dlogits = (&probs - &targets) / n as f64;
        let mut grad = self.backprop(trace, &dlogits);
        self.add_l2_gradient(&mut grad, l2_coeff);
        Ok((loss, grad))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            layer_dims: self.layer_dims.clone(),
            weights: self.weights.iter().map(|w| w.iter().copied().collect()).collect(),
            biases: self.biases.iter().map(|b| b.to_vec()).collect(),
            activation: "relu".to_string(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.activation != "relu" {
            return Err(Error::Parse(format!("unsupported activation {}", ck.activation)));
        }
        if ck.layer_dims.len() < 2
            || ck.weights.len() != ck.layer_dims.len() - 1
            || ck.biases.len() != ck.weights.len()
        {
            return shape("checkpoint layer count mismatch");
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (l, dims) in ck.layer_dims.windows(2).enumerate() {
            let w = Array2::from_shape_vec((dims[1], dims[0]), ck.weights[l].clone())
                .map_err(|e| Error::Shape(format!("layer {l}: {e}")))?;
            if ck.biases[l].len() != dims[1] {
                return shape(format!("layer {l}: bias length mismatch"));
            }
            weights.push(w);
            biases.push(Array1::from_vec(ck.biases[l].clone()));
        }
        Self::from_parameters(weights, biases)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_checkpoint())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_checkpoint(&serde_json::from_str(text)?)
    }
}

/// Mean over rows of the soft-label cross-entropy.
pub fn mean_cross_entropy(probs: &Array2<f64>, targets: ArrayView2<'_, f64>) -> f64 {
    let n = probs.nrows();
    probs
        .rows()
        .into_iter()
        .zip(targets.rows())
        .map(|(p, y)| soft_cross_entropy(p.as_slice().unwrap(), &y.to_vec()))
        .sum::<f64>()
        / n as f64
}

/// One-hot rows for `labels`.
pub fn one_hot(labels: &[usize], num_classes: usize) -> Array2<f64> {
    let mut out = Array2::zeros((labels.len(), num_classes));
    for (i, &y) in labels.iter().enumerate() {
        out[[i, y]] = 1.0;
    }
    out
}

/// Stacks feature vectors into a `(n, d)` matrix.
pub fn stack_rows<'a, I>(rows: I, dim: usize) -> Array2<f64>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut flat = Vec::new();
    let mut n = 0;
    for r in rows {
        flat.extend_from_slice(r);
        n += 1;
    }
    Array2::from_shape_vec((n, dim), flat).expect("rows of equal width")
}

/// Chain rule through softmax: given `dL/dp` per row and the probabilities,
/// returns `dL/dz = p ⊙ (g - <g, p>)`.
pub fn softmax_backward(probs: &Array2<f64>, dprobs: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(probs.raw_dim());
    for ((p, g), mut o) in probs.rows().into_iter().zip(dprobs.rows()).zip(out.rows_mut()) {
        let inner = p.dot(&g);
        Zip::from(&mut o)
            .and(&p)
            .and(&g)
            .for_each(|o, &p, &g| *o = p * (g - inner));
    }
    out
}

/// Anything that answers label queries. The baseline attack only ever sees
/// this interface.
pub trait LabelOracle {
    fn query_label(&self, x: &[f64]) -> Result<usize>;
}

/// Anything that answers probability-vector queries.
pub trait ProbabilityOracle {
    fn query_probs(&self, xs: ArrayView2<'_, f64>) -> Result<Array2<f64>>;
    fn num_classes(&self) -> usize;
}

impl LabelOracle for MlpModel {
    fn query_label(&self, x: &[f64]) -> Result<usize> {
        self.predict_label(x)
    }
}

impl ProbabilityOracle for MlpModel {
    fn query_probs(&self, xs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.predict_proba_batch(xs)
    }

    fn num_classes(&self) -> usize {
        MlpModel::num_classes(self)
    }
}

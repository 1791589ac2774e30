//! Analytic gradients against central finite differences.

use mialab::model::{cross_entropy, one_hot, Dropout, MlpModel, Target};
use mialab::rng::{rng_from_seed, LabRng};
use mialab::train::{
    mixup_with, mmd_regularized_loss, mmd_squared, Batch, KernelBandwidth, MmdConfig,
};
use ndarray::Array2;
use rand::Rng;

const STEP: f64 = 1e-6;
const REL_TOL: f64 = 1e-4;
const POINTS: usize = 120;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-7 {
        // Both essentially zero: compare absolutely.
        (analytic - numeric).abs() / 1e-7
    } else {
        (analytic - numeric).abs() / scale
    }
}

fn random_matrix(rows: usize, cols: usize, rng: &mut LabRng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.5..1.5))
}

fn no_dropout() -> Option<Dropout<'static, LabRng>> {
    None
}

/// Perturbs flat parameter `idx` by `delta` and returns the new model.
fn nudged(model: &MlpModel, idx: usize, delta: f64) -> MlpModel {
    let mut p = model.parameters();
    *p.iter_mut().nth(idx).unwrap() += delta;
    let mut m = model.clone();
    m.set_parameters(p).unwrap();
    m
}

/// ReLU on/off pattern of every hidden unit over a batch.
fn relu_pattern(model: &MlpModel, x: &Array2<f64>) -> Vec<bool> {
    x.rows()
        .into_iter()
        .flat_map(|r| {
            let f = model.forward::<LabRng>(r.as_slice().unwrap(), 1.0, None).unwrap();
            f.hidden.into_iter().flatten().map(|h| h > 0.0).collect::<Vec<_>>()
        })
        .collect()
}

/// Checks `grad` (flattened in `iter_mut` order) against central differences
/// of the loss at `POINTS` random (model, coordinate) draws. Draws whose
/// difference stencil crosses a ReLU kink are redrawn, since the loss is not
/// differentiable there.
fn check<F, G>(label: &str, seed: u64, mut setup: F)
where
    F: FnMut(&mut LabRng) -> (MlpModel, Array2<f64>, G),
    G: Fn(&MlpModel) -> (f64, Vec<f64>),
{
    let mut rng = rng_from_seed(seed);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    while checked < POINTS {
        let (model, x, eval) = setup(&mut rng);
        let (_, grad) = eval(&model);
        let idx = rng.gen_range(0..grad.len());
        let (up_model, down_model) = (nudged(&model, idx, STEP), nudged(&model, idx, -STEP));
        if relu_pattern(&up_model, &x) != relu_pattern(&down_model, &x) {
            continue;
        }
        let numeric = (eval(&up_model).0 - eval(&down_model).0) / (2.0 * STEP);
        worst = worst.max(rel_err(grad[idx], numeric));
        checked += 1;
    }
    assert!(worst <= REL_TOL, "{label}: worst relative error {worst:e}");
}

fn flat(mut g: mialab::model::GradientSet) -> Vec<f64> {
    g.iter_mut().map(|v| *v).collect()
}

#[test]
fn plain_cross_entropy_gradient() {
    check("plain", 1, |rng| {
        let model = MlpModel::new(&[4, 6, 5, 3], rng).unwrap();
        let x = random_matrix(7, 4, rng);
        let labels: Vec<usize> = (0..7).map(|_| rng.gen_range(0..3)).collect();
        let l2 = 0.01;
        let probe = x.clone();
        let eval = move |m: &MlpModel| {
            let (loss, g) = m
                .backward(x.view(), one_hot(&labels, 3).view(), no_dropout(), l2)
                .unwrap();
            (loss, flat(g))
        };
        (model, probe, eval)
    });
}

/// Independent oracle for the plain loss value: per-row hard-label
/// cross-entropy through the single-instance API.
#[test]
fn plain_loss_value_matches_single_instance_oracle() {
    let mut rng = rng_from_seed(2);
    let model = MlpModel::new(&[3, 4, 2], &mut rng).unwrap();
    let x = random_matrix(5, 3, &mut rng);
    let labels = [0, 1, 1, 0, 1];
    let (loss, _) = model
        .backward(x.view(), one_hot(&labels, 2).view(), no_dropout(), 0.0)
        .unwrap();
    let oracle: f64 = x
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(r, y)| {
            let p = model.predict_proba(r.as_slice().unwrap()).unwrap();
            cross_entropy(p.as_slice(), Target::Hard(y)).unwrap()
        })
        .sum::<f64>()
        / 5.0;
    assert!((loss - oracle).abs() < 1e-12);
}

#[test]
fn mixup_loss_gradient() {
    check("mix-up", 3, |rng| {
        let model = MlpModel::new(&[4, 6, 3], rng).unwrap();
        let n = 6;
        let x = random_matrix(n, 4, rng);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        let y = one_hot(&labels, 3);
        let partners: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
        let lambdas: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mixed = mixup_with(x.view(), y.view(), &partners, &lambdas).unwrap();
        let probe = mixed.x.clone();
        // Value oracle: λ·CE(p, y_i) + (1−λ)·CE(p, y_j), averaged.
        let eval = move |m: &MlpModel| {
            let (_, g) = m.backward(mixed.x.view(), mixed.y.view(), no_dropout(), 0.0).unwrap();
            let value: f64 = (0..n)
                .map(|i| {
                    let p = m.predict_proba(mixed.x.row(i).as_slice().unwrap()).unwrap();
                    let lam = lambdas[i];
                    lam * cross_entropy(p.as_slice(), Target::Hard(labels[i])).unwrap()
                        + (1.0 - lam) * cross_entropy(p.as_slice(), Target::Hard(labels[partners[i]])).unwrap()
                })
                .sum::<f64>()
                / n as f64;
            (value, flat(g))
        };
        (model, probe, eval)
    });
}

fn fixed_kernel() -> MmdConfig {
    MmdConfig {
        kernel_bandwidth_base: KernelBandwidth::Fixed(0.3),
        ..MmdConfig::default()
    }
}

/// One-sided objective: the validation outputs are frozen at the point where
/// the gradient is taken, so the oracle detaches them too.
#[test]
fn mmd_regularized_loss_gradient() {
    let cfg = fixed_kernel();
    check("mmd-regularized", 4, |rng| {
        let model = MlpModel::new(&[4, 6, 3], rng).unwrap();
        let class = rng.gen_range(0..3);
        let train = Batch::new(random_matrix(5, 4, rng), vec![class; 5], 3);
        let validation = Batch::new(random_matrix(6, 4, rng), vec![class; 6], 3);
        let frozen_val = model.predict_proba_batch(validation.x.view()).unwrap();
        let weight = rng.gen_range(0.5..4.0);
        let probe = train.x.clone();
        let cfg = cfg.clone();
        let eval = move |m: &MlpModel| {
            let (_, g) = mmd_regularized_loss(
                m,
                &train,
                &validation,
                weight,
                0.0,
                &cfg,
                no_dropout(),
            )
            .unwrap();
            let (ce, _) = m.backward(train.x.view(), train.targets.view(), no_dropout(), 0.0).unwrap();
            let probs = m.predict_proba_batch(train.x.view()).unwrap();
            let mmd = mmd_squared(probs.view(), frozen_val.view(), &cfg).unwrap().value;
            (ce + weight * mmd, flat(g))
        };
        (model, probe, eval)
    });
}

#[test]
fn mmd_gradient_with_respect_to_first_sample() {
    let cfg = fixed_kernel();
    let mut rng = rng_from_seed(5);
    let mut worst: f64 = 0.0;
    for _ in 0..POINTS {
        let n = rng.gen_range(2..7);
        let m = rng.gen_range(2..7);
        let x = random_matrix(n, 3, &mut rng).mapv(|v| v * 0.4);
        let y = random_matrix(m, 3, &mut rng).mapv(|v| v * 0.4);
        let g = mmd_squared(x.view(), y.view(), &cfg).unwrap().grad_x;
        let (i, j) = (rng.gen_range(0..n), rng.gen_range(0..3));
        let mut up = x.clone();
        up[[i, j]] += STEP;
        let mut down = x.clone();
        down[[i, j]] -= STEP;
        let numeric = (mmd_squared(up.view(), y.view(), &cfg).unwrap().value
            - mmd_squared(down.view(), y.view(), &cfg).unwrap().value)
            / (2.0 * STEP);
        worst = worst.max(rel_err(g[[i, j]], numeric));
    }
    assert!(worst <= REL_TOL, "worst relative error {worst:e}");
}

/// Softmax-backward sanity: the MMD penalty gradient routed through logits
/// sums to zero per row (softmax is shift invariant).
#[test]
fn penalty_logit_gradient_is_shift_invariant() {
    let mut rng = rng_from_seed(6);
    let model = MlpModel::new(&[3, 4, 4], &mut rng).unwrap();
    let train = Batch::new(random_matrix(4, 3, &mut rng), vec![2; 4], 4);
    let validation = Batch::new(random_matrix(4, 3, &mut rng), vec![2; 4], 4);
    let (_, with) = mmd_regularized_loss(&model, &train, &validation, 1.0, 0.0, &fixed_kernel(), no_dropout()).unwrap();
    let (_, without) = mmd_regularized_loss(&model, &train, &validation, 0.0, 0.0, &fixed_kernel(), no_dropout()).unwrap();
    // Output-layer bias gradient of the penalty alone.
    let last = with.biases.len() - 1;
    let diff = &with.biases[last] - &without.biases[last];
    assert!(diff.sum().abs() < 1e-12);
}

//! Desk-scale acceptance suite: nine criteria on the benchmark configuration,
//! one PASS/FAIL line each.

use mialab::attacks::{best_probability_threshold, kl_divergence, AttackKind};
use mialab::model::{one_hot, softmax, Dropout, GradientSet, MlpModel};
use mialab::rng::{rng_from_seed, LabRng};
use mialab::runner::{
    execute_run, run_experiment, run_trainsize_sweep, select_mmd_weight, validation_check_from,
    Defense, DefenseKnobs, ExperimentConfig, RunArtifacts, RunRecord,
};
use mialab::train::{dp_sgd_step, mmd_regularized_loss, mmd_squared, mixup_with, Batch, KernelBandwidth, MmdConfig};
use ndarray::Array2;
use rand::Rng;

const SLACK: f64 = 0.03;
const SEEDS_BOUND: [u64; 10] = [1, 2, 3, 4, 5, 6, 7, 8, 9, 10];
const SEEDS_DEFENSE: [u64; 5] = [1, 2, 3, 4, 5];
const MMD_CANDIDATES: [f64; 6] = [0.1, 0.25, 0.5, 1.0, 2.0, 4.0];
const REFERENCE_WEIGHT: f64 = 1.0;
const MAX_ACC_DROP: f64 = 0.02;
const DP_SIGMAS: [f64; 5] = [0.0, 2.0, 4.0, 8.0, 16.0];
const SIZES: [usize; 3] = [1000, 2500, 4000];

struct Gate {
    lines: Vec<String>,
    failed: Vec<usize>,
}

impl Gate {
    fn record(&mut self, id: usize, name: &str, pass: bool, detail: String) {
        let line = format!("criterion {id} [{name}]: {} — {detail}", if pass { "PASS" } else { "FAIL" });
        println!("{line}");
        self.lines.push(line);
        if !pass {
            self.failed.push(id);
        }
    }
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn adv(r: &RunRecord, kind: AttackKind) -> f64 {
    r.advantage(kind).unwrap_or_else(|| panic!("{kind} missing in {}", r.label))
}

/// Average ranks (ties share the mean rank).
fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman correlation: Pearson correlation of the average ranks.
fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let (mx, my) = (mean(rx.iter().copied()), mean(ry.iter().copied()));
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

fn run(config: &ExperimentConfig, seed: u64) -> (RunRecord, RunArtifacts) {
    let c = ExperimentConfig { seed, ..config.clone() };
    let (record, _, art) = execute_run(&c, None).unwrap_or_else(|e| panic!("{} seed {seed}: {e}", c.defense));
    println!(
        "  {:<22} a_R {:.3} a_E {:.3} g {:.3} v {:.3} ({}) {:.1}s",
        record.label, record.accuracy.a_r, record.accuracy.a_e, record.accuracy.g, record.v, record.best_attack,
        record.wall_clock_secs
    );
    (record, art)
}

#[test]
fn acceptance() {
    let mut gate = Gate { lines: Vec::new(), failed: Vec::new() };
    let base = ExperimentConfig::default();
    let knobs = DefenseKnobs::default();

    // Undefended runs feed criteria 1–3 and serve as the reference for 4–5.
    println!("undefended benchmark, {} seeds", SEEDS_BOUND.len());
    let none: Vec<RunRecord> = SEEDS_BOUND.iter().map(|&s| run(&base, s).0).collect();
    let a_r = mean(none.iter().map(|r| r.accuracy.a_r));
    let a_e = mean(none.iter().map(|r| r.accuracy.a_e));
    println!("benchmark calibration: mean a_R {a_r:.4}, mean a_E {a_e:.4} (want a_R ≥ 0.99, a_E in [0.6, 0.9])");
    assert!(a_r >= 0.99 && (0.6..=0.9).contains(&a_e), "benchmark is not in its intended regime");

    // 1. Baseline advantage tracks half the generalization gap.
    let close = none
        .iter()
        .filter(|r| (adv(r, AttackKind::Baseline) - r.accuracy.g / 2.0).abs() <= SLACK)
        .count();
    let worst = none
        .iter()
        .map(|r| (adv(r, AttackKind::Baseline) - r.accuracy.g / 2.0).abs())
        .fold(0.0, f64::max);
    gate.record(1, "baseline ≈ g/2", close >= 9, format!("{close}/10 within {SLACK}, worst deviation {worst:.4}"));

    // 2. g/2 − slack ≤ v ≤ g + slack.
    let inside = none
        .iter()
        .filter(|r| r.accuracy.g / 2.0 - SLACK <= r.v && r.v <= r.accuracy.g + SLACK)
        .count();
    gate.record(2, "g/2 ≤ v ≤ g", inside >= 9, format!("{inside}/10 inside the slackened bound"));

    // 3. Attack ordering.
    let m = |k| mean(none.iter().map(|r| adv(r, k)));
    let (base_adv, prob, loss, top1) = (
        m(AttackKind::Baseline),
        m(AttackKind::GlobalProbability),
        m(AttackKind::GlobalLoss),
        m(AttackKind::GlobalTopOne),
    );
    gate.record(
        3,
        "attack ordering",
        prob >= base_adv - 0.02 && loss >= base_adv - 0.02 && prob >= top1 - 0.02,
        format!("baseline {base_adv:.4}, global-probability {prob:.4}, global-loss {loss:.4}, global-top-one {top1:.4}"),
    );

    // 4. MMD + mix-up at the largest weight within the accuracy budget.
    let selection = select_mmd_weight(&base, Defense::MmdMixup, &knobs, &MMD_CANDIDATES, MAX_ACC_DROP, &SEEDS_DEFENSE);
    let weight = match &selection {
        Ok(s) => {
            println!("weight selection: undefended test acc {:.4}", s.baseline_test_acc);
            for (w, acc) in &s.candidates {
                println!("  mmd_weight {w:<5} test acc {acc:.4} (drop {:+.4})", s.baseline_test_acc - acc);
            }
            s.chosen
        }
        Err(e) => {
            println!("weight selection found no admissible weight ({e}); using reference weight {REFERENCE_WEIGHT}");
            REFERENCE_WEIGHT
        }
    };
    let with_weight = |d: Defense| {
        let k = DefenseKnobs { mmd_weight: weight, ..knobs.clone() };
        base.with_defense(d, &k)
    };
    let combined_cfg = with_weight(Defense::MmdMixup);
    println!("mmd+mixup at weight {weight}");
    let combined: Vec<(RunRecord, RunArtifacts)> = SEEDS_DEFENSE.iter().map(|&s| run(&combined_cfg, s)).collect();
    let ref_runs = &none[..SEEDS_DEFENSE.len()];
    let (v0, g0) = (mean(ref_runs.iter().map(|r| r.v)), mean(ref_runs.iter().map(|r| r.accuracy.g)));
    let (v1, g1) = (
        mean(combined.iter().map(|(r, _)| r.v)),
        mean(combined.iter().map(|(r, _)| r.accuracy.g)),
    );
    let acc_drop = mean(ref_runs.iter().map(|r| r.accuracy.a_e)) - mean(combined.iter().map(|(r, _)| r.accuracy.a_e));
    let (dv, dg) = (1.0 - v1 / v0, 1.0 - g1 / g0);
    gate.record(
        4,
        "defense effectiveness",
        selection.is_ok() && dv >= 0.3 && dg >= 0.3,
        format!(
            "weight {weight}{}, test-acc drop {acc_drop:.4}; v {v0:.4} → {v1:.4} ({:.1}% lower), g {g0:.4} → {g1:.4} ({:.1}% lower)",
            if selection.is_ok() { "" } else { " (no admissible weight)" },
            100.0 * dv,
            100.0 * dg
        ),
    );

    // 5. Ablation: combined ≤ min(single mechanisms) + 0.02 ≤ undefended.
    println!("ablation: mmd only at weight {weight}, mixup only");
    let mmd_only = mean(SEEDS_DEFENSE.iter().map(|&s| run(&with_weight(Defense::Mmd), s).0.v));
    let mixup_only = mean(SEEDS_DEFENSE.iter().map(|&s| run(&with_weight(Defense::Mixup), s).0.v));
    let best_single = mmd_only.min(mixup_only);
    gate.record(
        5,
        "ablation ordering",
        v1 <= best_single + 0.02 && best_single + 0.02 <= v0,
        format!("largest advantage: mmd+mixup {v1:.4}, mmd {mmd_only:.4}, mixup {mixup_only:.4}, none {v0:.4}"),
    );

    // 6. Validation instances are indistinguishable from fresh test data.
    let checks: Vec<f64> = combined
        .iter()
        .map(|(r, art)| {
            let c = ExperimentConfig { seed: r.seeds.global, ..combined_cfg.clone() };
            validation_check_from(&c, art).unwrap().highest_advantage
        })
        .collect();
    let check_mean = mean(checks.iter().copied());
    gate.record(
        6,
        "validation-set MI",
        check_mean <= SLACK,
        format!("mean highest advantage {check_mean:.4} over {} seeds {checks:.3?}", checks.len()),
    );

    // 7. DP-SGD noise trades accuracy for privacy.
    println!("dp-sgd σ sweep");
    let dp: Vec<RunRecord> = DP_SIGMAS
        .iter()
        .map(|&sigma| {
            let k = DefenseKnobs { dp_noise_scale: sigma, ..knobs.clone() };
            run(&base.with_defense(Defense::DpSgd, &k), 1).0
        })
        .collect();
    let sigmas = DP_SIGMAS.to_vec();
    let rho_acc = spearman(&sigmas, &dp.iter().map(|r| r.accuracy.a_r).collect::<Vec<_>>());
    let rho_adv = spearman(&sigmas, &dp.iter().map(|r| r.v).collect::<Vec<_>>());
    gate.record(
        7,
        "dp-sgd tradeoff",
        rho_acc <= 0.0 && rho_adv <= 0.0,
        format!("spearman(σ, a_R) {rho_acc:.3}, spearman(σ, v) {rho_adv:.3}"),
    );

    // 8. Larger training sets leak less.
    println!("training-size sweep {SIZES:?}");
    let sweep = run_trainsize_sweep(&ExperimentConfig { seed: 1, ..base.clone() }, &SIZES).unwrap();
    assert!(sweep.failures.is_empty(), "{:?}", sweep.failures);
    for r in &sweep.runs {
        println!("  size {:<5} a_R {:.3} a_E {:.3} g {:.3} v {:.3}", r.train_size, r.accuracy.a_r, r.accuracy.a_e, r.accuracy.g, r.v);
    }
    let (first, last) = (sweep.runs.first().unwrap().v, sweep.runs.last().unwrap().v);
    gate.record(8, "training-size sweep", last <= first + 0.02, format!("v {first:.4} at {} → {last:.4} at {}", SIZES[0], SIZES[2]));

    // 9. Numerical properties.
    let (ok, detail) = numeric_properties();
    gate.record(9, "numerical properties", ok, detail);

    println!("\nsummary:");
    for l in &gate.lines {
        println!("{l}");
    }
    assert!(gate.failed.is_empty(), "failing criteria: {:?}", gate.failed);
}

fn no_dropout() -> Option<Dropout<'static, LabRng>> {
    None
}

fn random(rows: usize, cols: usize, rng: &mut LabRng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
}

/// Worst relative central-difference error of `eval`'s gradient over random
/// coordinates of a smooth (no hidden layer) model.
fn fd_worst(seed: u64, eval: impl Fn(&MlpModel) -> (f64, GradientSet)) -> f64 {
    let mut rng = rng_from_seed(seed);
    let model = MlpModel::new(&[4, 3], &mut rng).unwrap();
    let (_, grad) = eval(&model);
    let analytic = grad.flatten();
    let step = 1e-6;
    (0..analytic.len())
        .map(|i| {
            let shifted = |d: f64| {
                let mut p = model.parameters();
                *p.iter_mut().nth(i).unwrap() += d;
                let mut m = model.clone();
                m.set_parameters(p).unwrap();
                eval(&m).0
            };
            let numeric = (shifted(step) - shifted(-step)) / (2.0 * step);
            (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-7)
        })
        .fold(0.0, f64::max)
}

fn numeric_properties() -> (bool, String) {
    let mut rng = rng_from_seed(99);
    let mut notes = Vec::new();
    let mut ok = true;
    let mut check = |name: &str, pass: bool, value: String| {
        ok &= pass;
        notes.push(format!("{name} {value}{}", if pass { "" } else { " (FAIL)" }));
    };

    let x = random(6, 4, &mut rng);
    let labels = vec![0, 1, 2, 0, 1, 2];
    let y = one_hot(&labels, 3);
    let plain = fd_worst(1, |m| m.backward(x.view(), y.view(), no_dropout(), 0.01).unwrap());
    check("fd plain", plain <= 1e-4, format!("{plain:.1e}"));

    let lambdas: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..1.0)).collect();
    let mixed = mixup_with(x.view(), y.view(), &[3, 4, 5, 0, 1, 2], &lambdas).unwrap();
    let mix = fd_worst(2, |m| m.backward(mixed.x.view(), mixed.y.view(), no_dropout(), 0.0).unwrap());
    check("fd mix-up", mix <= 1e-4, format!("{mix:.1e}"));

    // The penalty treats validation outputs as constants, so the reference
    // objective freezes them at the base model.
    let cfg = MmdConfig { kernel_bandwidth_base: KernelBandwidth::Fixed(0.3), ..MmdConfig::default() };
    let train = Batch::new(random(5, 4, &mut rng), vec![1; 5], 3);
    let val = Batch::new(random(5, 4, &mut rng), vec![1; 5], 3);
    let frozen = MlpModel::new(&[4, 3], &mut rng_from_seed(3)).unwrap().predict_proba_batch(val.x.view()).unwrap();
    let mmd = fd_worst(3, |m| {
        let (_, g) = mmd_regularized_loss(m, &train, &val, 2.0, 0.0, &cfg, no_dropout()).unwrap();
        let (ce, _) = m.backward(train.x.view(), train.targets.view(), no_dropout(), 0.0).unwrap();
        let p = m.predict_proba_batch(train.x.view()).unwrap();
        (ce + 2.0 * mmd_squared(p.view(), frozen.view(), &cfg).unwrap().value, g)
    });
    check("fd mmd", mmd <= 1e-4, format!("{mmd:.1e}"));

    let a = random(7, 3, &mut rng).mapv(f64::abs);
    let b = random(5, 3, &mut rng).mapv(f64::abs);
    let dflt = MmdConfig::default();
    let self_mmd = mmd_squared(a.view(), a.view(), &dflt).unwrap().value.abs();
    let asym = (mmd_squared(a.view(), b.view(), &dflt).unwrap().value
        - mmd_squared(b.view(), a.view(), &dflt).unwrap().value)
        .abs();
    check("mmd(X,X)", self_mmd <= 1e-12, format!("{self_mmd:.1e}"));
    check("mmd symmetry", asym <= 1e-12, format!("{asym:.1e}"));

    let logits: Vec<f64> = (0..10).map(|_| rng.gen_range(-1e3..1e3)).collect();
    let s: f64 = softmax(&logits).unwrap().as_slice().iter().sum();
    check("softmax sum", (s - 1.0).abs() <= 1e-9, format!("{:.1e}", (s - 1.0).abs()));

    let model = MlpModel::new(&[4, 5, 3], &mut rng).unwrap();
    let grads: Vec<GradientSet> = (0..6).map(|_| MlpModel::new(&[4, 5, 3], &mut rng).unwrap().parameters()).collect();
    let mut dp = model.clone();
    dp_sgd_step(&mut dp, &grads, 1e12, 0.0, 0.1, &mut rng_from_seed(0)).unwrap();
    let mut avg = GradientSet::zeros_like(&model);
    for g in &grads {
        avg.add_scaled(g, 1.0 / 6.0);
    }
    let mut sgd = model.clone();
    sgd.apply_gradient(&avg, 0.1);
    let dev = dp.parameters().flatten().iter().zip(sgd.parameters().flatten()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    check("dp ≡ sgd", dev <= 1e-12, format!("{dev:.1e}"));

    let p = [0.1, 0.6, 0.3];
    check("KL(p‖p)", kl_divergence(&p, &p).unwrap() == 0.0, "0".into());

    let scores: Vec<f64> = (0..50).map(|_| (rng.gen_range(0..10) as f64) / 10.0).collect();
    let members: Vec<bool> = (0..50).map(|_| rng.gen_bool(0.5)).collect();
    let found = best_probability_threshold(&scores, &members).unwrap().threshold;
    let acc = |t: f64| {
        let hit = |want: bool| {
            let (n, h) = scores.iter().zip(&members).filter(|(_, &m)| m == want).fold((0, 0), |(n, h), (&s, _)| {
                (n + 1, h + usize::from((s >= t) == want))
            });
            h as f64 / n as f64
        };
        0.5 * (hit(true) + hit(false))
    };
    let best = scores.iter().map(|&t| acc(t)).fold(f64::NEG_INFINITY, f64::max);
    let oracle = scores.iter().copied().filter(|&t| acc(t) == best).fold(f64::INFINITY, f64::min);
    check("threshold ≡ scan", found == oracle, format!("{found}"));

    let mut tiny = ExperimentConfig::default();
    tiny.dataset.num_classes = 3;
    tiny.dataset.dim = 5;
    tiny.dataset.per_class = 200;
    tiny.eval_size = 200;
    tiny.train_size = 150;
    tiny.shadow_count = 3;
    tiny.target.hidden_layers = vec![16];
    tiny.target.epochs = 5;
    tiny.attack.classifier.epochs = 3;
    tiny.attack.topone_queries = 200;
    let r1 = run_experiment(&tiny).unwrap();
    let r2 = run_experiment(&tiny).unwrap();
    let same = r1.to_csv() == r2.to_csv() && r1.to_json().unwrap() == r2.to_json().unwrap();
    check("identical reports", same, String::new());

    (ok, notes.join(", "))
}

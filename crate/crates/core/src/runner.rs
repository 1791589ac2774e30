//! Config-driven experiments: data → split → target → shadows → attacks →
//! metrics, plus the defense grid, validation-set check and training-size
//! sweep built on top of a single run.
//!
//! Every stochastic stage draws from its own sub-seed of the global seed
//! (see [`crate::rng`]):
//!
//! | stage | use                                   |
//! |-------|---------------------------------------|
//! | 0     | synthetic data (unless pinned)        |
//! | 1     | three-way split                       |
//! | 2     | target training sample and validation |
//! | 3     | target training                       |
//! | 4     | shadow ensemble (unless pinned)       |
//! | 5     | attacks (random queries)              |
//! | 6     | test sample for the validation check  |

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attacks::{
    run_attacks, AttackConfig, AttackKind, AttackOutcome, ShadowObservations,
};
use crate::dataset::{
    build_balanced_eval_set, generate_synthetic, sample_disjoint, sample_training_set,
    split_three_way, BalancedEvalSet, Dataset, EvalQueries, MembershipBitmap, Pool, SplitPlan,
};
use crate::error::{Error, Result};
use crate::metrics::{
    accuracy, bound_check, highest_outcome_advantage, BoundVerdict, ModelAccuracy,
    DEFAULT_BOUND_SLACK,
};
use crate::model::MlpModel;
use crate::rng::stage_seed;
use crate::train::{history_csv, train_model, EpochRecord, MmdConfig, TrainConfig};

pub const STAGE_DATA: u64 = 0;
pub const STAGE_SPLIT: u64 = 1;
pub const STAGE_TARGET_SAMPLE: u64 = 2;
pub const STAGE_TARGET_TRAIN: u64 = 3;
pub const STAGE_SHADOWS: u64 = 4;
pub const STAGE_ATTACKS: u64 = 5;
pub const STAGE_VALIDATION_CHECK: u64 = 6;

/// Which defense mechanisms a run uses. The matching [`TrainConfig`] knobs
/// must agree; nothing is inferred from the knobs alone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Defense {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "mixup")]
    Mixup,
    #[serde(rename = "mmd")]
    Mmd,
    #[serde(rename = "mmd+mixup")]
    MmdMixup,
    #[serde(rename = "dpsgd")]
    DpSgd,
    #[serde(rename = "dpsgd+mixup")]
    DpSgdMixup,
}

impl Defense {
    pub const ALL: [Defense; 6] = [
        Defense::None,
        Defense::Mixup,
        Defense::Mmd,
        Defense::MmdMixup,
        Defense::DpSgd,
        Defense::DpSgdMixup,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Defense::None => "none",
            Defense::Mixup => "mixup",
            Defense::Mmd => "mmd",
            Defense::MmdMixup => "mmd+mixup",
            Defense::DpSgd => "dpsgd",
            Defense::DpSgdMixup => "dpsgd+mixup",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|d| d.name() == name)
    }

    pub fn uses_mixup(self) -> bool {
        matches!(self, Defense::Mixup | Defense::MmdMixup | Defense::DpSgdMixup)
    }

    pub fn uses_mmd(self) -> bool {
        matches!(self, Defense::Mmd | Defense::MmdMixup)
    }

    pub fn uses_dp(self) -> bool {
        matches!(self, Defense::DpSgd | Defense::DpSgdMixup)
    }

    /// The knob swept for this defense in a comparison grid, if any.
    pub fn tunable_parameter(self) -> Option<&'static str> {
        if self.uses_mmd() {
            Some("mmd_weight")
        } else if self.uses_dp() {
            Some("dp_noise_scale")
        } else {
            None
        }
    }

    /// Checks that `cfg` enables exactly the mechanisms of this defense.
    pub fn check(self, cfg: &TrainConfig) -> Result<()> {
        let name = self.name();
        let mismatch = |what: &str| Err(Error::Config(format!("defense `{name}` {what}")));
        match (self.uses_mixup(), cfg.mixup_enabled()) {
            (true, false) => return mismatch("requires mixup_alpha > 0"),
            (false, true) => return mismatch("must not set mixup_alpha"),
            _ => {}
        }
        match (self.uses_mmd(), cfg.mmd_enabled()) {
            (true, false) => return mismatch("requires mmd_weight > 0"),
            (false, true) => return mismatch("must not set mmd_weight"),
            _ => {}
        }
        match (self.uses_dp(), cfg.dp_enabled()) {
            (true, false) => return mismatch("requires dp_clip_norm"),
            (false, true) => return mismatch("must not set dp_clip_norm"),
            _ => {}
        }
        if !self.uses_dp() && cfg.dp_noise_scale != 0.0 {
            return mismatch("must not set dp_noise_scale");
        }
        Ok(())
    }

    /// `base` with this defense's mechanisms switched on from `knobs` and all
    /// others switched off.
    pub fn configure(self, base: &TrainConfig, knobs: &DefenseKnobs) -> TrainConfig {
        TrainConfig {
            mixup_alpha: if self.uses_mixup() { knobs.mixup_alpha } else { 0.0 },
            mmd_weight: if self.uses_mmd() { knobs.mmd_weight } else { 0.0 },
            dp_clip_norm: if self.uses_dp() { Some(knobs.dp_clip_norm) } else { None },
            dp_noise_scale: if self.uses_dp() { knobs.dp_noise_scale } else { 0.0 },
            ..base.clone()
        }
    }
}

impl std::fmt::Display for Defense {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Parameter values used when a defense is switched on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DefenseKnobs {
    pub mixup_alpha: f64,
    pub mmd_weight: f64,
    pub dp_clip_norm: f64,
    pub dp_noise_scale: f64,
}

impl Default for DefenseKnobs {
    fn default() -> Self {
        Self {
            mixup_alpha: 1.0,
            mmd_weight: 1.0,
            dp_clip_norm: 1.0,
            dp_noise_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub cluster_spread: f64,
    /// Pins the data independently of the global seed.
    pub seed: Option<u64>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            dim: 20,
            per_class: 2000,
            cluster_spread: 1.5,
            seed: None,
        }
    }
}

/// A parameter swept over a list of values, one run per value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub parameter: String,
    pub values: Vec<f64>,
}

/// Everything needed to reproduce one experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub eval_size: usize,
    /// Size of every target / shadow training set (half of `D_E` plus fill).
    pub train_size: usize,
    pub defense: Defense,
    pub target: TrainConfig,
    pub shadow_count: usize,
    /// Shadow recipe; `None` reuses the target's.
    pub shadow: Option<TrainConfig>,
    /// Pins the shadow stage independently of the global seed.
    pub shadow_seed: Option<u64>,
    pub mmd: MmdConfig,
    pub attack: AttackConfig,
    pub sweep: Option<SweepSpec>,
    pub bound_slack: f64,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "desk-benchmark".into(),
            seed: 1,
            dataset: DatasetSpec::default(),
            eval_size: 2000,
            train_size: 1000,
            defense: Defense::None,
            target: TrainConfig {
                hidden_layers: vec![128],
                epochs: 150,
                batch_size: 128,
                learning_rate: 0.1,
                history_interval: 10,
                ..TrainConfig::default()
            },
            shadow_count: 20,
            shadow: None,
            shadow_seed: None,
            mmd: MmdConfig::default(),
            attack: AttackConfig::default(),
            sweep: None,
            bound_slack: DEFAULT_BOUND_SLACK,
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn shadow_config(&self) -> &TrainConfig {
        self.shadow.as_ref().unwrap_or(&self.target)
    }

    /// Switches the defense on both the target and (explicit) shadow recipes.
    pub fn with_defense(&self, defense: Defense, knobs: &DefenseKnobs) -> Self {
        let mut out = self.clone();
        out.defense = defense;
        out.target = defense.configure(&self.target, knobs);
        out.shadow = self.shadow.as_ref().map(|s| defense.configure(s, knobs));
        out
    }

    /// Rejects inconsistent configurations before any compute.
    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| match e {
            Error::Config(m) => Error::Config(m),
            other => Error::Config(other.to_string()),
        };
        let d = &self.dataset;
        if d.num_classes < 2 || d.dim == 0 || d.per_class == 0 {
            return Err(Error::Config("dataset needs ≥ 2 classes, dim ≥ 1, per_class ≥ 1".into()));
        }
        if !(d.cluster_spread >= 0.0) {
            return Err(Error::Config("cluster_spread must be non-negative".into()));
        }
        let total = d.num_classes * d.per_class;
        if self.eval_size == 0 || self.eval_size % 2 != 0 || self.eval_size >= total {
            return Err(Error::Config(format!(
                "eval_size must be even, positive and below the dataset size {total}"
            )));
        }
        let half = self.eval_size / 2;
        if self.train_size < half {
            return Err(Error::Config(format!(
                "train_size {} is below half the evaluation set ({half})",
                self.train_size
            )));
        }
        if self.shadow_count == 0 {
            return Err(Error::Config("shadow_count must be positive".into()));
        }
        for recipe in [&self.target, self.shadow_config()] {
            recipe.validate().map_err(cfg)?;
            self.defense.check(recipe)?;
        }
        self.mmd.validate().map_err(cfg)?;
        self.attack.classifier.validate().map_err(cfg)?;
        if self.attack.topone_queries < 100 {
            return Err(Error::Config("attack.topone_queries must be ≥ 100".into()));
        }

        let rest = total - self.eval_size;
        let general = rest - rest / 2;
        let holdout = rest / 2;
        let fill = self.train_size - half;
        let validation = if self.defense.uses_mmd() { self.train_size } else { 0 };
        if fill + validation > general {
            return Err(Error::Config(format!(
                "general pool has {general} instances, {} needed for training fill and validation",
                fill + validation
            )));
        }
        if fill + validation > holdout {
            return Err(Error::Config(format!(
                "holdout pool has {holdout} instances, {} needed per shadow model",
                fill + validation
            )));
        }
        if let Some(s) = &self.sweep {
            if s.values.is_empty() {
                return Err(Error::Config("sweep needs at least one value".into()));
            }
            if !SWEEPABLE.contains(&s.parameter.as_str()) {
                return Err(Error::Config(format!(
                    "cannot sweep `{}`; choose one of {SWEEPABLE:?}",
                    s.parameter
                )));
            }
        }
        Ok(())
    }

    /// Stage sub-seeds for this configuration.
    pub fn stage_seeds(&self) -> StageSeeds {
        StageSeeds {
            global: self.seed,
            data: self
                .dataset
                .seed
                .unwrap_or_else(|| stage_seed(self.seed, STAGE_DATA)),
            split: stage_seed(self.seed, STAGE_SPLIT),
            target_sample: stage_seed(self.seed, STAGE_TARGET_SAMPLE),
            target_train: stage_seed(self.seed, STAGE_TARGET_TRAIN),
            shadows: self
                .shadow_seed
                .unwrap_or_else(|| stage_seed(self.seed, STAGE_SHADOWS)),
            attacks: stage_seed(self.seed, STAGE_ATTACKS),
        }
    }
}

/// Parameters accepted by [`SweepSpec::parameter`].
pub const SWEEPABLE: [&str; 10] = [
    "mmd_weight",
    "mixup_alpha",
    "dp_noise_scale",
    "dp_clip_norm",
    "learning_rate",
    "epochs",
    "l2_coeff",
    "dropout_keep",
    "train_size",
    "seed",
];

/// `config` with `parameter` set to `value` (on both recipes for training
/// knobs).
pub fn apply_parameter(config: &ExperimentConfig, parameter: &str, value: f64) -> Result<ExperimentConfig> {
    let mut out = config.clone();
    out.sweep = None;
    let set = |t: &mut TrainConfig| -> Result<()> {
        match parameter {
            "mmd_weight" => t.mmd_weight = value,
            "mixup_alpha" => t.mixup_alpha = value,
            "dp_noise_scale" => t.dp_noise_scale = value,
            "dp_clip_norm" => t.dp_clip_norm = Some(value),
            "learning_rate" => t.learning_rate = value,
            "epochs" => t.epochs = value as usize,
            "l2_coeff" => t.l2_coeff = value,
            "dropout_keep" => t.dropout_keep = value,
            _ => return Err(Error::Config(format!("unknown parameter `{parameter}`"))),
        }
        Ok(())
    };
    match parameter {
        "train_size" => out.train_size = value as usize,
        "seed" => out.seed = value as u64,
        _ => {
            set(&mut out.target)?;
            if let Some(s) = out.shadow.as_mut() {
                set(s)?;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSeeds {
    pub global: u64,
    pub data: u64,
    pub split: u64,
    pub target_sample: u64,
    pub target_train: u64,
    pub shadows: u64,
    pub attacks: u64,
}

/// One finished run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub label: String,
    pub defense: Defense,
    pub sweep_parameter: Option<String>,
    pub sweep_value: Option<f64>,
    pub train_size: usize,
    pub seeds: StageSeeds,
    pub accuracy: ModelAccuracy,
    pub attacks: Vec<AttackOutcome>,
    /// Highest advantage over the successful attacks.
    pub v: f64,
    pub best_attack: AttackKind,
    pub verdict: BoundVerdict,
    /// Excluded from the report files so reports stay byte-reproducible; see
    /// `timings.csv`.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl RunRecord {
    pub fn advantage(&self, kind: AttackKind) -> Option<f64> {
        self.attacks
            .iter()
            .find(|o| o.attack == kind)
            .and_then(AttackOutcome::advantage)
    }

    /// Checks every derived field against the raw ones.
    pub fn is_self_consistent(&self) -> bool {
        let acc = ModelAccuracy::new(self.accuracy.a_r, self.accuracy.a_e);
        let scored_ok = self.attacks.iter().all(|o| match &o.result {
            Some(r) => r.advantage == r.accuracy - 0.5,
            None => true,
        });
        let best = highest_outcome_advantage(&self.attacks).ok();
        acc.g == self.accuracy.g
            && scored_ok
            && best == Some((self.v, self.best_attack))
            && self.verdict == bound_check(self.accuracy.g, self.v, self.verdict.slack)
    }
}

/// A run that could not complete.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub label: String,
    pub defense: Defense,
    pub sweep_parameter: Option<String>,
    pub sweep_value: Option<f64>,
    pub error: String,
}

/// Files produced alongside a run; not part of the JSON report.
#[derive(Clone, Debug, Default)]
pub struct RunFiles {
    pub target_checkpoint: String,
    pub history: Vec<EpochRecord>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub runs: Vec<RunRecord>,
    pub failures: Vec<RunFailure>,
    #[serde(skip)]
    pub files: Vec<RunFiles>,
}

const CSV_HEADER_PREFIX: &str =
    "label,defense,sweep_parameter,sweep_value,train_size,seed,a_r,a_e,g";

impl ExperimentReport {
    /// One row per run: accuracies, gap, every advantage, `v` and the bound
    /// verdict.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER_PREFIX);
        for k in AttackKind::ALL {
            let _ = write!(out, ",adv_{}", k.name());
        }
        out.push_str(",v,best_attack,bound_slack,lower_ok,upper_ok\n");
        for r in &self.runs {
            let _ = write!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.label,
                r.defense,
                r.sweep_parameter.as_deref().unwrap_or(""),
                r.sweep_value.map(|v| v.to_string()).unwrap_or_default(),
                r.train_size,
                r.seeds.global,
                r.accuracy.a_r,
                r.accuracy.a_e,
                r.accuracy.g
            );
            for k in AttackKind::ALL {
                let _ = write!(
                    out,
                    ",{}",
                    r.advantage(k).map(|v| v.to_string()).unwrap_or_default()
                );
            }
            let _ = writeln!(
                out,
                ",{},{},{},{},{}",
                r.v, r.best_attack, r.verdict.slack, r.verdict.lower_ok, r.verdict.upper_ok
            );
        }
        out
    }

    /// Per-attack rows `attack,accuracy,advantage,n_eval` for every run.
    pub fn attacks_csv(&self) -> String {
        let mut out = String::from("label,attack,accuracy,advantage,n_eval,error\n");
        for r in &self.runs {
            for o in &r.attacks {
                match &o.result {
                    Some(res) => {
                        let _ = writeln!(
                            out,
                            "{},{},{},{},{},",
                            r.label,
                            o.attack,
                            res.accuracy,
                            res.advantage,
                            res.n_eval()
                        );
                    }
                    None => {
                        let _ = writeln!(
                            out,
                            "{},{},,,,{}",
                            r.label,
                            o.attack,
                            o.error.as_deref().unwrap_or("").replace(',', ";")
                        );
                    }
                }
            }
        }
        out
    }

    pub fn timings_csv(&self) -> String {
        let mut out = String::from("label,wall_clock_secs\n");
        for r in &self.runs {
            let _ = writeln!(out, "{},{:.3}", r.label, r.wall_clock_secs);
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Writes `report.csv`, `report.json`, `attacks.csv`, `timings.csv`,
    /// `history/*.csv` and `checkpoints/*.json` under `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.csv"), self.to_csv())?;
        fs::write(dir.join("report.json"), self.to_json()?)?;
        fs::write(dir.join("attacks.csv"), self.attacks_csv())?;
        fs::write(dir.join("timings.csv"), self.timings_csv())?;
        if !self.files.is_empty() {
            fs::create_dir_all(dir.join("history"))?;
            fs::create_dir_all(dir.join("checkpoints"))?;
        }
        for (i, (run, files)) in self.runs.iter().zip(&self.files).enumerate() {
            let stem = format!("{i:03}_{}", file_stem(&run.label));
            fs::write(
                dir.join("history").join(format!("{stem}.csv")),
                history_csv(&files.history),
            )?;
            fs::write(
                dir.join("checkpoints").join(format!("{stem}.json")),
                &files.target_checkpoint,
            )?;
        }
        Ok(())
    }

    pub fn mean_over_runs(&self, f: impl Fn(&RunRecord) -> f64) -> Option<f64> {
        if self.runs.is_empty() {
            return None;
        }
        Some(self.runs.iter().map(f).sum::<f64>() / self.runs.len() as f64)
    }
}

fn file_stem(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect()
}

/// Data, split and target training sets of a run, before any training.
#[derive(Clone, Debug)]
pub struct PreparedRun {
    pub dataset: Dataset,
    pub plan: SplitPlan,
    pub target_ids: Vec<usize>,
    pub target_bitmap: MembershipBitmap,
    pub validation_ids: Option<Vec<usize>>,
    pub seeds: StageSeeds,
}

pub fn prepare(config: &ExperimentConfig) -> Result<PreparedRun> {
    let seeds = config.stage_seeds();
    let d = &config.dataset;
    let dataset = generate_synthetic(d.num_classes, d.dim, d.per_class, d.cluster_spread, seeds.data)?;
    let plan = split_three_way(dataset.len(), config.eval_size, seeds.split)?;
    let sample = sample_training_set(
        &plan,
        Pool::General,
        config.train_size,
        stage_seed(seeds.target_sample, 0),
    )?;
    let validation_ids = if config.defense.uses_mmd() {
        Some(sample_disjoint(
            &plan,
            Pool::General,
            &sample.ids,
            config.train_size,
            stage_seed(seeds.target_sample, 1),
        )?)
    } else {
        None
    };
    Ok(PreparedRun {
        dataset,
        plan,
        target_ids: sample.ids,
        target_bitmap: sample.bitmap,
        validation_ids,
        seeds,
    })
}

/// A trained target with its accuracies.
#[derive(Clone, Debug)]
pub struct TrainedTarget {
    pub model: MlpModel,
    pub history: Vec<EpochRecord>,
    pub accuracy: ModelAccuracy,
    pub eval_set: BalancedEvalSet,
}

/// Trains the target and measures `a_R` (on its training set) and `a_E` (on
/// the non-member half of `D_E`).
pub fn train_target(config: &ExperimentConfig, prep: &PreparedRun) -> Result<TrainedTarget> {
    let eval_set = build_balanced_eval_set(&prep.dataset, &prep.plan, &prep.target_bitmap)?;
    let monitor: Vec<usize> = prep
        .plan
        .eval_ids
        .iter()
        .zip(&prep.target_bitmap.member_flags)
        .filter(|(_, m)| !**m)
        .map(|(&i, _)| i)
        .collect();
    let recipe = TrainConfig {
        seed: prep.seeds.target_train,
        ..config.target.clone()
    };
    let out = train_model(
        &prep.dataset,
        &prep.target_ids,
        prep.validation_ids.as_deref(),
        Some(&monitor),
        &recipe,
        &config.mmd,
    )?;
    let a_r = accuracy(&out.model, &prep.dataset.select(&prep.target_ids))?;
    let a_e = accuracy(&out.model, &eval_set.non_members())?;
    Ok(TrainedTarget {
        model: out.model,
        history: out.history,
        accuracy: ModelAccuracy::new(a_r, a_e),
        eval_set,
    })
}

/// Everything produced by a full run, for follow-up analyses.
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub prepared: PreparedRun,
    pub target: TrainedTarget,
    pub observations: ShadowObservations,
}

fn run_label(config: &ExperimentConfig, sweep: Option<(&str, f64)>) -> String {
    match sweep {
        Some((p, v)) => format!("{}/{p}={v}", config.defense),
        None => format!("{}/seed={}", config.defense, config.seed),
    }
}

/// One full run: prepare, train target and shadows, attack, score.
pub fn execute_run(
    config: &ExperimentConfig,
    sweep: Option<(&str, f64)>,
) -> Result<(RunRecord, RunFiles, RunArtifacts)> {
    config.validate()?;
    let started = Instant::now();
    let prepared = prepare(config)?;
    let target = train_target(config, &prepared)?;
    let ensemble = crate::attacks::train_shadow_ensemble(
        &prepared.dataset,
        &prepared.plan,
        config.shadow_count,
        config.train_size,
        config.shadow_config(),
        &config.mmd,
        prepared.seeds.shadows,
    )?;
    let observations = ensemble.observe(&prepared.dataset, &prepared.plan)?;
    let attacks = run_attacks(
        &AttackKind::ALL,
        &target.model,
        &target.eval_set,
        &observations,
        &config.attack,
        prepared.seeds.attacks,
    );
    for o in attacks.iter().filter(|o| o.error.is_some()) {
        log::warn!("{} failed: {}", o.attack, o.error.as_deref().unwrap_or(""));
    }
    let (v, best_attack) = highest_outcome_advantage(&attacks)?;
    let verdict = bound_check(target.accuracy.g, v, config.bound_slack);
    let record = RunRecord {
        label: run_label(config, sweep),
        defense: config.defense,
        sweep_parameter: sweep.map(|(p, _)| p.to_string()),
        sweep_value: sweep.map(|(_, v)| v),
        train_size: config.train_size,
        seeds: prepared.seeds,
        accuracy: target.accuracy,
        attacks,
        v,
        best_attack,
        verdict,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    let files = RunFiles {
        target_checkpoint: target.model.to_json()?,
        history: target.history.clone(),
    };
    Ok((
        record,
        files,
        RunArtifacts {
            prepared,
            target,
            observations,
        },
    ))
}

impl ExperimentReport {
    fn push(&mut self, config: &ExperimentConfig, sweep: Option<(&str, f64)>, run: Result<(RunRecord, RunFiles, RunArtifacts)>) {
        match run {
            Ok((record, files, _)) => {
                self.runs.push(record);
                self.files.push(files);
            }
            Err(e) => {
                log::warn!("run {} failed: {e}", run_label(config, sweep));
                self.failures.push(RunFailure {
                    label: run_label(config, sweep),
                    defense: config.defense,
                    sweep_parameter: sweep.map(|(p, _)| p.to_string()),
                    sweep_value: sweep.map(|(_, v)| v),
                    error: e.to_string(),
                });
            }
        }
    }
}

/// Runs the configured experiment (once, or once per sweep value).
///
/// Validation of the base configuration happens before any compute. A single
/// run propagates its error; in a sweep, failing values are recorded and the
/// sweep continues.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let mut report = ExperimentReport {
        name: config.name.clone(),
        ..Default::default()
    };
    match &config.sweep {
        None => {
            let (record, files, _) = execute_run(config, None)?;
            report.runs.push(record);
            report.files.push(files);
        }
        Some(sweep) => {
            for &value in &sweep.values {
                let point = Some((sweep.parameter.as_str(), value));
                let run = apply_parameter(config, &sweep.parameter, value)
                    .and_then(|c| execute_run(&c, point));
                report.push(config, point, run);
            }
        }
    }
    Ok(report)
}

/// Sweep values per tunable knob for a defense comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DefenseSweep {
    pub mmd_weights: Vec<f64>,
    pub dp_noise_scales: Vec<f64>,
    /// Values used for mechanisms that are on but not swept.
    pub knobs: DefenseKnobs,
}

impl Default for DefenseSweep {
    fn default() -> Self {
        Self {
            mmd_weights: vec![0.5, 1.0, 2.0, 4.0],
            dp_noise_scales: vec![0.0, 2.0, 4.0, 8.0, 16.0],
            knobs: DefenseKnobs::default(),
        }
    }
}

/// Grid of runs plus the two accuracy / vulnerability tradeoff tables.
#[derive(Clone, Debug)]
pub struct DefenseComparison {
    pub report: ExperimentReport,
    /// `defense,parameter,value,train_acc,test_acc,error`
    pub accuracy_tradeoff_csv: String,
    /// `defense,parameter,value,highest_advantage,test_acc,error`
    pub advantage_tradeoff_csv: String,
}

/// Every defense in `defenses`, swept over its tunable knob where it has
/// one; failures are recorded and the grid continues.
pub fn run_defense_comparison(
    base: &ExperimentConfig,
    defenses: &[Defense],
    sweep: &DefenseSweep,
) -> Result<DefenseComparison> {
    if defenses.is_empty() {
        return Err(Error::Config("defense list is empty".into()));
    }
    let mut report = ExperimentReport {
        name: format!("{}-defense-comparison", base.name),
        ..Default::default()
    };
    for &defense in defenses {
        let config = base.with_defense(defense, &sweep.knobs);
        let values: Vec<Option<(&str, f64)>> = match defense.tunable_parameter() {
            Some(p @ "mmd_weight") => sweep.mmd_weights.iter().map(|&v| Some((p, v))).collect(),
            Some(p) => sweep.dp_noise_scales.iter().map(|&v| Some((p, v))).collect(),
            None => vec![None],
        };
        if values.is_empty() {
            return Err(Error::Config(format!("no sweep values for defense `{defense}`")));
        }
        for point in values {
            let run = match point {
                Some((p, v)) => apply_parameter(&config, p, v).and_then(|c| execute_run(&c, point)),
                None => execute_run(&config, None),
            };
            report.push(&config, point, run);
        }
    }
    let mut acc = String::from("defense,parameter,value,train_acc,test_acc,error\n");
    let mut adv = String::from("defense,parameter,value,highest_advantage,test_acc,error\n");
    for r in &report.runs {
        let (p, v) = (
            r.sweep_parameter.as_deref().unwrap_or(""),
            r.sweep_value.map(|v| v.to_string()).unwrap_or_default(),
        );
        let _ = writeln!(acc, "{},{p},{v},{},{},", r.defense, r.accuracy.a_r, r.accuracy.a_e);
        let _ = writeln!(adv, "{},{p},{v},{},{},", r.defense, r.v, r.accuracy.a_e);
    }
    for f in &report.failures {
        let (p, v) = (
            f.sweep_parameter.as_deref().unwrap_or(""),
            f.sweep_value.map(|v| v.to_string()).unwrap_or_default(),
        );
        let err = f.error.replace(',', ";");
        let _ = writeln!(acc, "{},{p},{v},,,{err}", f.defense);
        let _ = writeln!(adv, "{},{p},{v},,,{err}", f.defense);
    }
    Ok(DefenseComparison {
        report,
        accuracy_tradeoff_csv: acc,
        advantage_tradeoff_csv: adv,
    })
}

impl DefenseComparison {
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        self.report.write_to(dir)?;
        fs::write(dir.join("tradeoff_accuracy.csv"), &self.accuracy_tradeoff_csv)?;
        fs::write(dir.join("tradeoff_advantage.csv"), &self.advantage_tradeoff_csv)?;
        Ok(())
    }
}

/// Attacks against "validation instances as members, unseen test instances as
/// non-members".
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ValidationCheck {
    pub outcomes: Vec<AttackOutcome>,
    pub highest_advantage: f64,
    pub best_attack: AttackKind,
    pub validation_acc: f64,
    pub test_acc: f64,
}

impl ValidationCheck {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("attack,accuracy,advantage,n_eval\n");
        for o in &self.outcomes {
            if let Some(r) = &o.result {
                let _ = writeln!(out, "{},{},{},{}", o.attack, r.accuracy, r.advantage, r.n_eval());
            }
        }
        out
    }
}

/// Trains the MMD-defended target and shadows, then attacks a balanced set of
/// validation instances (labeled members) and fresh `D_G` instances
/// (labeled non-members). Instance-Vector needs `D_E` positions and is not
/// run.
pub fn run_validation_mi_check(config: &ExperimentConfig) -> Result<ValidationCheck> {
    if !config.defense.uses_mmd() {
        return Err(Error::Parameter(
            "validation check needs an MMD defense (no validation set otherwise)".into(),
        ));
    }
    let (_, _, art) = execute_run(config, None)?;
    validation_check_from(config, &art)
}

/// The validation check on an already executed MMD run.
pub fn validation_check_from(config: &ExperimentConfig, art: &RunArtifacts) -> Result<ValidationCheck> {
    let prep = &art.prepared;
    let validation = prep
        .validation_ids
        .as_ref()
        .ok_or_else(|| Error::Parameter("run has no validation set".into()))?;
    let mut used = prep.target_ids.clone();
    used.extend(validation);
    let test_ids = sample_disjoint(
        &prep.plan,
        Pool::General,
        &used,
        validation.len(),
        stage_seed(config.seed, STAGE_VALIDATION_CHECK),
    )?;
    let mut instances = prep.dataset.select(validation);
    instances.extend(prep.dataset.select(&test_ids));
    let mut is_member = vec![true; validation.len()];
    is_member.extend(vec![false; test_ids.len()]);
    let n = instances.len();
    let eval = BalancedEvalSet::new(
        EvalQueries {
            instances,
            eval_positions: vec![None; n],
        },
        is_member,
    )?;
    let kinds: Vec<AttackKind> = AttackKind::ALL
        .into_iter()
        .filter(|k| *k != AttackKind::InstanceVector)
        .collect();
    let outcomes = run_attacks(
        &kinds,
        &art.target.model,
        &eval,
        &art.observations,
        &config.attack,
        stage_seed(prep.seeds.attacks, 1),
    );
    let (highest_advantage, best_attack) = highest_outcome_advantage(&outcomes)?;
    Ok(ValidationCheck {
        outcomes,
        highest_advantage,
        best_attack,
        validation_acc: accuracy(&art.target.model, &eval.members())?,
        test_acc: accuracy(&art.target.model, &eval.non_members())?,
    })
}

/// One full run per training-set size (ascending). Infeasible sizes are
/// recorded as failures and skipped.
pub fn run_trainsize_sweep(config: &ExperimentConfig, sizes: &[usize]) -> Result<ExperimentReport> {
    if sizes.is_empty() {
        return Err(Error::Config("no training sizes given".into()));
    }
    if sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("training sizes must be strictly ascending".into()));
    }
    let mut report = ExperimentReport {
        name: format!("{}-size-sweep", config.name),
        ..Default::default()
    };
    for &size in sizes {
        let point = Some(("train_size", size as f64));
        let run = apply_parameter(config, "train_size", size as f64).and_then(|c| execute_run(&c, point));
        report.push(config, point, run);
    }
    Ok(report)
}

/// Outcome of the "largest weight within an accuracy budget" rule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightSelection {
    pub chosen: f64,
    pub baseline_test_acc: f64,
    /// `(weight, mean test accuracy)` for every candidate.
    pub candidates: Vec<(f64, f64)>,
}

/// Picks the largest MMD weight whose mean target test accuracy (over
/// `seeds`) is at most `max_drop` below that of `undefended`. Only targets
/// are trained.
pub fn select_mmd_weight(
    undefended: &ExperimentConfig,
    defense: Defense,
    knobs: &DefenseKnobs,
    weights: &[f64],
    max_drop: f64,
    seeds: &[u64],
) -> Result<WeightSelection> {
    if !defense.uses_mmd() {
        return Err(Error::Config(format!("defense `{defense}` has no MMD weight")));
    }
    if weights.is_empty() || seeds.is_empty() {
        return Err(Error::Config("need candidate weights and seeds".into()));
    }
    let mean_test_acc = |cfg: &ExperimentConfig| -> Result<f64> {
        let mut total = 0.0;
        for &seed in seeds {
            let c = ExperimentConfig { seed, ..cfg.clone() };
            c.validate()?;
            total += train_target(&c, &prepare(&c)?)?.accuracy.a_e;
        }
        Ok(total / seeds.len() as f64)
    };
    let base = undefended.with_defense(Defense::None, knobs);
    let baseline_test_acc = mean_test_acc(&base)?;
    let mut candidates = Vec::new();
    let defended = undefended.with_defense(defense, knobs);
    for &w in weights {
        let cfg = apply_parameter(&defended, "mmd_weight", w)?;
        candidates.push((w, mean_test_acc(&cfg)?));
    }
    let chosen = candidates
        .iter()
        .filter(|(_, acc)| baseline_test_acc - acc <= max_drop)
        .map(|(w, _)| *w)
        .fold(None, |best: Option<f64>, w| Some(best.map_or(w, |b| b.max(w))))
        .ok_or_else(|| {
            Error::Config(format!(
                "no MMD weight keeps the test accuracy within {max_drop} of {baseline_test_acc}"
            ))
        })?;
    Ok(WeightSelection {
        chosen,
        baseline_test_acc,
        candidates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defense_names_round_trip() {
        for d in Defense::ALL {
            assert_eq!(Defense::parse(d.name()), Some(d));
            assert_eq!(serde_json::to_string(&d).unwrap(), format!("\"{}\"", d.name()));
        }
    }

    #[test]
    fn defense_configure_and_check_agree() {
        let base = TrainConfig::default();
        let knobs = DefenseKnobs::default();
        for d in Defense::ALL {
            let cfg = d.configure(&base, &knobs);
            d.check(&cfg).unwrap();
            for other in Defense::ALL.into_iter().filter(|o| *o != d) {
                assert!(other.check(&cfg).is_err(), "{other} accepted {d} config");
            }
        }
    }

    #[test]
    fn mmd_without_weight_is_flagged() {
        let mut cfg = ExperimentConfig::default();
        cfg.defense = Defense::Mmd;
        assert!(matches!(cfg.validate(), Err(Error::Config(m)) if m.contains("mmd_weight")));
    }

    #[test]
    fn default_config_is_valid_and_round_trips() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_json(&json).unwrap(), cfg);
        assert!(ExperimentConfig::from_json(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn pool_capacity_is_checked() {
        let cfg = ExperimentConfig {
            train_size: 20_000,
            ..ExperimentConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn sweep_parameters_apply() {
        let cfg = ExperimentConfig::default();
        let c = apply_parameter(&cfg, "mmd_weight", 2.0).unwrap();
        assert_eq!(c.target.mmd_weight, 2.0);
        let c = apply_parameter(&cfg, "train_size", 1500.0).unwrap();
        assert_eq!(c.train_size, 1500);
        assert!(apply_parameter(&cfg, "nope", 1.0).is_err());
    }

    #[test]
    fn shadow_seed_pin_leaves_other_stages() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig {
            shadow_seed: Some(99),
            ..a.clone()
        };
        let (sa, sb) = (a.stage_seeds(), b.stage_seeds());
        assert_eq!(sa.target_train, sb.target_train);
        assert_eq!(sa.data, sb.data);
        assert_ne!(sa.shadows, sb.shadows);
    }
}

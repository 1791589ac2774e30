use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mialab::metrics::ModelAccuracy;
use mialab::runner::{
    prepare, run_defense_comparison, run_experiment, run_trainsize_sweep,
    run_validation_mi_check, train_target, Defense, DefenseKnobs, DefenseSweep, ExperimentConfig,
    ExperimentReport, SweepSpec,
};
use mialab::train::history_csv;
use mialab::{Error, Result};

/// Membership-inference attack lab.
#[derive(Parser)]
#[command(name = "mialab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and the three-way split.
    GenData(Common),
    /// Train the target model only.
    Train(Common),
    /// Full run: target, shadows, all attacks (once or per sweep value).
    Attack(Common),
    /// Grid over defenses, sweeping each one's tunable knob.
    DefendCompare {
        #[command(flatten)]
        common: Common,
        /// Comma-separated defenses.
        #[arg(long, value_delimiter = ',', default_value = "none,mixup,mmd,mmd+mixup,dpsgd,dpsgd+mixup")]
        defenses: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        mmd_weights: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        noise_scales: Option<Vec<f64>>,
    },
    /// Attack validation (member) vs. unseen test (non-member) instances.
    ValidationCheck(Common),
    /// One full run per training-set size.
    SizeSweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', required = true)]
        sizes: Vec<usize>,
    },
    /// Summarize an existing report.json.
    Report {
        /// Directory holding report.json.
        #[arg(long)]
        input: PathBuf,
    },
}

/// Config file plus per-field overrides.
#[derive(Args, Clone)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    num_classes: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    spread: Option<f64>,
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    eval_size: Option<usize>,
    #[arg(long)]
    train_size: Option<usize>,
    #[arg(long)]
    shadow_count: Option<usize>,
    #[arg(long)]
    shadow_seed: Option<u64>,
    /// Switches a defense on: none, mixup, mmd, mmd+mixup, dpsgd,
    /// dpsgd+mixup. Its knobs default to 1 unless set by the flags below.
    #[arg(long)]
    defense: Option<String>,
    /// Hidden layer widths, e.g. `256,128`.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    l2_coeff: Option<f64>,
    #[arg(long)]
    dropout_keep: Option<f64>,
    #[arg(long)]
    mixup_alpha: Option<f64>,
    #[arg(long)]
    mmd_weight: Option<f64>,
    #[arg(long)]
    dp_clip_norm: Option<f64>,
    #[arg(long)]
    dp_noise_scale: Option<f64>,
    #[arg(long)]
    sweep_param: Option<String>,
    #[arg(long, value_delimiter = ',')]
    sweep_values: Option<Vec<f64>>,
    #[arg(long)]
    bound_slack: Option<f64>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = &self.$flag { c.$($field).+ = v.clone(); })*
            };
        }
        set!(
            seed => seed, name => name, num_classes => dataset.num_classes,
            dim => dataset.dim, per_class => dataset.per_class,
            spread => dataset.cluster_spread, eval_size => eval_size,
            train_size => train_size, shadow_count => shadow_count,
            bound_slack => bound_slack,
        );
        if let Some(s) = self.data_seed {
            c.dataset.seed = Some(s);
        }
        if let Some(s) = self.shadow_seed {
            c.shadow_seed = Some(s);
        }
        if let Some(p) = &self.out {
            c.output_dir = Some(p.clone());
        }
        if let Some(d) = &self.defense {
            let defense = Defense::parse(d)
                .ok_or_else(|| Error::Config(format!("unknown defense `{d}`")))?;
            // Knob flags override the defaults the defense switches on with.
            let base = DefenseKnobs::default();
            let knobs = DefenseKnobs {
                mixup_alpha: self.mixup_alpha.unwrap_or(base.mixup_alpha),
                mmd_weight: self.mmd_weight.unwrap_or(base.mmd_weight),
                dp_clip_norm: self.dp_clip_norm.unwrap_or(base.dp_clip_norm),
                dp_noise_scale: self.dp_noise_scale.unwrap_or(base.dp_noise_scale),
            };
            c = c.with_defense(defense, &knobs);
        }
        let mut recipes = vec![&mut c.target];
        if let Some(s) = c.shadow.as_mut() {
            recipes.push(s);
        }
        for t in recipes {
            macro_rules! train {
                ($($flag:ident),*) => { $(if let Some(v) = &self.$flag { t.$flag = v.clone(); })* };
            }
            train!(epochs, batch_size, learning_rate, l2_coeff, dropout_keep, mixup_alpha, mmd_weight, dp_noise_scale);
            if let Some(h) = &self.hidden {
                t.hidden_layers = h.clone();
            }
            if let Some(v) = self.dp_clip_norm {
                t.dp_clip_norm = Some(v);
            }
        }
        match (&self.sweep_param, &self.sweep_values) {
            (Some(parameter), Some(values)) => {
                c.sweep = Some(SweepSpec {
                    parameter: parameter.clone(),
                    values: values.clone(),
                })
            }
            (None, None) => {}
            _ => return Err(Error::Config("--sweep-param and --sweep-values go together".into())),
        }
        c.validate()?;
        Ok(c)
    }
}

fn out_dir(c: &ExperimentConfig) -> PathBuf {
    c.output_dir.clone().unwrap_or_else(|| PathBuf::from("out"))
}

fn print_report(report: &ExperimentReport) {
    println!("{:<28} {:>7} {:>7} {:>7} {:>7}  best", "run", "a_R", "a_E", "g", "v");
    for r in &report.runs {
        println!(
            "{:<28} {:>7.3} {:>7.3} {:>7.3} {:>7.3}  {}{}",
            r.label,
            r.accuracy.a_r,
            r.accuracy.a_e,
            r.accuracy.g,
            r.v,
            r.best_attack,
            if r.verdict.holds() { "" } else { "  (bound violated)" }
        );
    }
    for f in &report.failures {
        println!("{:<28} failed: {}", f.label, f.error);
    }
}

/// A grid where every run failed is a runtime failure.
fn require_runs(report: &ExperimentReport) -> Result<()> {
    if report.runs.is_empty() && !report.failures.is_empty() {
        return Err(Error::Invariant("every run failed".into()));
    }
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(common) => {
            let c = common.load()?;
            let dir = out_dir(&c);
            fs::create_dir_all(&dir)?;
            let prep = prepare(&c)?;
            let mut file = fs::File::create(dir.join("dataset.csv"))?;
            prep.dataset.write_csv(&mut file)?;
            fs::write(dir.join("split.json"), prep.plan.to_json()?)?;
            write_json(&dir.join("config.json"), &c)?;
            println!(
                "{} instances ({} eval, {} general, {} holdout) → {}",
                prep.dataset.len(),
                prep.plan.eval_ids.len(),
                prep.plan.general_ids.len(),
                prep.plan.holdout_ids.len(),
                dir.display()
            );
        }
        Command::Train(common) => {
            let c = common.load()?;
            let dir = out_dir(&c);
            let prep = prepare(&c)?;
            let target = train_target(&c, &prep)?;
            fs::create_dir_all(dir.join("checkpoints"))?;
            fs::create_dir_all(dir.join("history"))?;
            fs::write(dir.join("checkpoints/target.json"), target.model.to_json()?)?;
            fs::write(dir.join("history/target.csv"), history_csv(&target.history))?;
            let ModelAccuracy { a_r, a_e, g } = target.accuracy;
            println!("a_R={a_r:.4} a_E={a_e:.4} g={g:.4} → {}", dir.display());
        }
        Command::Attack(common) => {
            let c = common.load()?;
            let report = run_experiment(&c)?;
            report.write_to(&out_dir(&c))?;
            print_report(&report);
            require_runs(&report)?;
        }
        Command::DefendCompare {
            common,
            defenses,
            mmd_weights,
            noise_scales,
        } => {
            let c = common.load()?;
            let defenses = defenses
                .iter()
                .map(|d| Defense::parse(d).ok_or_else(|| Error::Config(format!("unknown defense `{d}`"))))
                .collect::<Result<Vec<_>>>()?;
            let mut sweep = DefenseSweep::default();
            if let Some(a) = common.mixup_alpha {
                sweep.knobs.mixup_alpha = a;
            }
            if let Some(c) = common.dp_clip_norm {
                sweep.knobs.dp_clip_norm = c;
            }
            if let Some(w) = mmd_weights {
                sweep.mmd_weights = w;
            }
            if let Some(s) = noise_scales {
                sweep.dp_noise_scales = s;
            }
            let cmp = run_defense_comparison(&c, &defenses, &sweep)?;
            cmp.write_to(&out_dir(&c))?;
            print_report(&cmp.report);
            require_runs(&cmp.report)?;
        }
        Command::ValidationCheck(common) => {
            let c = common.load()?;
            let check = run_validation_mi_check(&c)?;
            let dir = out_dir(&c);
            fs::create_dir_all(&dir)?;
            fs::write(dir.join("validation_check.csv"), check.to_csv())?;
            write_json(&dir.join("validation_check.json"), &check)?;
            println!(
                "highest advantage {:.4} ({}), validation acc {:.4}, test acc {:.4}",
                check.highest_advantage, check.best_attack, check.validation_acc, check.test_acc
            );
        }
        Command::SizeSweep { common, sizes } => {
            let c = common.load()?;
            let report = run_trainsize_sweep(&c, &sizes)?;
            report.write_to(&out_dir(&c))?;
            print_report(&report);
            require_runs(&report)?;
        }
        Command::Report { input } => {
            let report = ExperimentReport::from_json(&fs::read_to_string(input.join("report.json"))?)?;
            print_report(&report);
            let inconsistent = report.runs.iter().filter(|r| !r.is_self_consistent()).count();
            if inconsistent > 0 {
                return Err(Error::Invariant(format!("{inconsistent} run(s) fail recomputation")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config(_)) => {
            eprintln!("config error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

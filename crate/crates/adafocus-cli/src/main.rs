//! `adafocus` command line: data generation, the three-stage training
//! pipeline, threshold calibration, evaluation, ablations, sweeps, plots,
//! and numeric self-checks. Each error category maps to a distinct exit
//! code so scripts can tell a bad config from a corrupt checkpoint.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adafocus::error::{AdaFocusError, Result};
use adafocus::evalbench::{
    ablate_feature_reuse, ablate_policies, emit_metrics_csv, emit_online_curves,
    emit_tradeoff_plot, evaluate, EvalMode, MetricsRecord, PolicyVariant, TradeoffPoint,
};
use adafocus::pipeline::{
    calibrate, load_bundle, pretrain, save_bundle, stage1_warmup,
    stage2_policy_learning, stage3_finetune, ModelBundle, Stage, StageReport,
};
use adafocus::synthdata::{generate_split, load_split, save_split, DatasetSplit, SplitRole};
use adafocus::verify::{verify_all, GRAD_TOL};
use clap::{Parser, Subcommand, ValueEnum};
use config::RunConfig;

#[derive(Parser)]
#[command(name = "adafocus", about = "Adaptive spatial-focus video recognition")]
struct Cli {
    /// Run directory holding data, checkpoints, metrics, and plots.
    #[arg(long, global = true, default_value = "runs/default")]
    run_dir: PathBuf,

    /// TOML config file (gen-data only; later commands use the persisted copy).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a config key, e.g. --set patch_size=24 (gen-data only).
    #[arg(long = "set", global = true)]
    overrides: Vec<String>,

    /// Allow re-initializing an existing run directory.
    #[arg(long, global = true)]
    overwrite: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Learned,
    Random,
    Central,
    Gaussian,
}

impl From<VariantArg> for PolicyVariant {
    fn from(v: VariantArg) -> PolicyVariant {
        match v {
            VariantArg::Learned => PolicyVariant::Learned,
            VariantArg::Random => PolicyVariant::Random,
            VariantArg::Central => PolicyVariant::Central,
            VariantArg::Gaussian => PolicyVariant::Gaussian,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AblateAxis {
    Policies,
    Reuse,
}

#[derive(Subcommand)]
enum Command {
    /// Initialize the run directory and generate the dataset splits.
    GenData,
    /// Supervised warm-up of both backbones with linear probes.
    Pretrain,
    /// Stage I: train focus network and classifier on random patches.
    Stage1,
    /// Stage II: learn the patch policy (and skip gate) with PPO.
    Stage2,
    /// Stage III: fine-tune the classifier under the frozen policy.
    Stage3,
    /// Fit the skip threshold for the configured keep fraction.
    Calibrate {
        /// Keep fraction override; defaults to the run config's eta.
        #[arg(long)]
        eta: Option<f64>,
    },
    /// Evaluate a policy variant on the test split.
    Eval {
        #[arg(long, value_enum, default_value = "learned")]
        variant: VariantArg,
        /// Report the per-frame online accuracy curve.
        #[arg(long)]
        online: bool,
        /// Use adaptive frame skipping (requires a calibrated threshold).
        #[arg(long)]
        plus: bool,
        /// Evaluate every variant on the final model instead of pairing
        /// fixed policies with the stage-1 model.
        #[arg(long)]
        hold_model_constant: bool,
    },
    /// Policy-variant or feature-reuse ablation on the test split.
    Ablate {
        #[arg(long, value_enum, default_value = "policies")]
        axis: AblateAxis,
        #[arg(long)]
        hold_model_constant: bool,
    },
    /// Accuracy-vs-compute sweep over patch sizes.
    Sweep {
        /// Patch sizes to train and evaluate.
        #[arg(long, value_delimiter = ',', default_values_t = vec![16usize, 24, 32])]
        patch_sizes: Vec<usize>,
    },
    /// Render plots from metrics stored in the run directory.
    Plot,
    /// Gradient checks, reward zero-mean, and online/offline agreement.
    Verify,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                AdaFocusError::Config(_) => 2,
                AdaFocusError::Contract(_) => 3,
                AdaFocusError::Training(_) => 4,
                AdaFocusError::Format(_) => 5,
                AdaFocusError::Io(_) => 6,
            })
        }
    }
}

struct RunDir {
    root: PathBuf,
}

impl RunDir {
    fn new(root: &Path) -> RunDir {
        RunDir { root: root.to_path_buf() }
    }

    fn config_path(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    fn split_path(&self, role: SplitRole) -> PathBuf {
        self.root.join("data").join(format!("{}.bin", role.as_str()))
    }

    fn ckpt_path(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}.ckpt"))
    }

    fn metrics_path(&self, name: &str) -> PathBuf {
        self.root.join("metrics").join(name)
    }

    fn plots_dir(&self) -> PathBuf {
        self.root.join("plots")
    }

    /// Persisted run config; commands after gen-data must find one.
    fn config(&self) -> Result<RunConfig> {
        let path = self.config_path();
        if !path.exists() {
            return Err(AdaFocusError::Config(format!(
                "{} has no config.toml; run gen-data first",
                self.root.display()
            )));
        }
        RunConfig::load(&path)
    }

    fn split(&self, role: SplitRole) -> Result<DatasetSplit> {
        let path = self.split_path(role);
        if !path.exists() {
            return Err(AdaFocusError::Config(format!(
                "missing {}; run gen-data first",
                path.display()
            )));
        }
        load_split(&path)
    }

    fn bundle(&self, name: &str, needed_by: &str) -> Result<ModelBundle> {
        let path = self.ckpt_path(name);
        if !path.exists() {
            return Err(AdaFocusError::Config(format!(
                "missing checkpoint {}; run {} first",
                path.display(),
                needed_by
            )));
        }
        load_bundle(&path)
    }
}

fn reject_config_flags(cli: &Cli) -> Result<()> {
    if cli.config.is_some() || !cli.overrides.is_empty() {
        return Err(AdaFocusError::Config(
            "--config/--set only apply to gen-data; the run uses its persisted config.toml".into(),
        ));
    }
    Ok(())
}

fn print_report(report: &StageReport) {
    for (i, e) in report.epochs.iter().enumerate() {
        println!(
            "{} epoch {:>2}: loss {:.4} return {:+.4} acc {:.3} keep {:.2}",
            report.stage, i + 1, e.loss, e.mean_return, e.accuracy, e.keep_rate
        );
    }
}

fn print_record(rec: &MetricsRecord) {
    println!(
        "{:>8}: top1 {:.3} mean-madds {:.3e} keep {:.2} [cfg {}]",
        rec.variant, rec.top1, rec.mean_flops, rec.keep_rate, rec.config_hash
    );
}

fn run(cli: &Cli) -> Result<()> {
    let dir = RunDir::new(&cli.run_dir);
    match &cli.command {
        Command::GenData => gen_data(cli, &dir),
        Command::Pretrain => {
            reject_config_flags(cli)?;
            let cfg = dir.config()?;
            let split = dir.split(SplitRole::Train)?;
            let mut bundle = ModelBundle::new(cfg.bundle_spec()?, cfg.seed)?;
            let report =
                pretrain(&mut bundle, &split, &cfg.stage_config(Stage::Pretrain), cfg.seed)?;
            print_report(&report);
            save_bundle(&dir.ckpt_path("pretrain"), &mut bundle)
        }
        Command::Stage1 => {
            reject_config_flags(cli)?;
            let cfg = dir.config()?;
            let split = dir.split(SplitRole::Train)?;
            let mut bundle = dir.bundle("pretrain", "pretrain")?;
            let report =
                stage1_warmup(&mut bundle, &split, &cfg.stage_config(Stage::Stage1), cfg.seed)?;
            print_report(&report);
            save_bundle(&dir.ckpt_path("stage1"), &mut bundle)
        }
        Command::Stage2 => {
            reject_config_flags(cli)?;
            let cfg = dir.config()?;
            let split = dir.split(SplitRole::Train)?;
            let mut bundle = dir.bundle("stage1", "stage1")?;
            let report = stage2_policy_learning(
                &mut bundle,
                &split,
                &cfg.stage_config(Stage::Stage2),
                cfg.seed,
            )?;
            print_report(&report);
            save_bundle(&dir.ckpt_path("stage2"), &mut bundle)
        }
        Command::Stage3 => {
            reject_config_flags(cli)?;
            let cfg = dir.config()?;
            let split = dir.split(SplitRole::Train)?;
            let mut bundle = dir.bundle("stage2", "stage2")?;
            let report =
                stage3_finetune(&mut bundle, &split, &cfg.stage_config(Stage::Stage3), cfg.seed)?;
            print_report(&report);
            save_bundle(&dir.ckpt_path("stage3"), &mut bundle)
        }
        Command::Calibrate { eta } => {
            reject_config_flags(cli)?;
            let cfg = dir.config()?;
            let split = dir.split(SplitRole::Calibration)?;
            let mut bundle = dir.bundle("stage3", "stage3")?;
            let eta = eta.unwrap_or(cfg.eta);
            let cal = calibrate(&mut bundle, &split, eta)?;
            println!(
                "eta {eta}: rho {:.6} kept {:.3}{}",
                cal.rho,
                cal.kept_fraction,
                if cal.degenerate { " (degenerate scores)" } else { "" }
            );
            save_bundle(&dir.ckpt_path("stage3"), &mut bundle)
        }
        Command::Eval { variant, online, plus, hold_model_constant } => {
            reject_config_flags(cli)?;
            let cfg = dir.config()?;
            let split = dir.split(SplitRole::Test)?;
            let variant = PolicyVariant::from(*variant);
            let bundle = eval_model(&dir, variant, *hold_model_constant, *plus)?;
            let mode = if *online { EvalMode::Online } else { EvalMode::Offline };
            let rec = evaluate(&bundle, &split, mode, variant, *plus, cfg.seed)?;
            print_record(&rec);
            if *online {
                for (t, acc) in rec.per_frame_accuracy.iter().enumerate() {
                    println!("  frame {:>2}: acc {:.3}", t + 1, acc);
                }
            }
            write_records(&dir.metrics_path(&format!("eval_{}.json", rec.variant)), &[rec])
        }
        Command::Ablate { axis, hold_model_constant } => {
            reject_config_flags(cli)?;
            let cfg = dir.config()?;
            let split = dir.split(SplitRole::Test)?;
            match axis {
                AblateAxis::Policies => {
                    let records = if *hold_model_constant {
                        let bundle = dir.bundle("stage3", "stage3")?;
                        ablate_policies(&bundle, &split, cfg.seed)?
                    } else {
                        // fixed policies never shaped training, so they pair
                        // with the stage-1 model; learned pairs with stage 3
                        PolicyVariant::ALL
                            .iter()
                            .map(|&v| {
                                let bundle = eval_model(&dir, v, false, false)?;
                                evaluate(&bundle, &split, EvalMode::Offline, v, false, cfg.seed)
                            })
                            .collect::<Result<Vec<_>>>()?
                    };
                    for r in &records {
                        print_record(r);
                    }
                    emit_metrics_csv(&records, &dir.metrics_path("ablate_policies.csv"))?;
                    write_records(&dir.metrics_path("ablate_policies.json"), &records)
                }
                AblateAxis::Reuse => {
                    let train = dir.split(SplitRole::Train)?;
                    let (mut on, mut off) = train_reuse_pair(&cfg, &train)?;
                    let (a, b) = ablate_feature_reuse(&mut on, &mut off, &split, cfg.seed)?;
                    println!("reuse-on : top1 {:.3}", a.top1);
                    println!("reuse-off: top1 {:.3}", b.top1);
                    let records = vec![a, b];
                    emit_metrics_csv(&records, &dir.metrics_path("ablate_reuse.csv"))?;
                    write_records(&dir.metrics_path("ablate_reuse.json"), &records)
                }
            }
        }
        Command::Sweep { patch_sizes } => {
            reject_config_flags(cli)?;
            let cfg = dir.config()?;
            let train = dir.split(SplitRole::Train)?;
            let test = dir.split(SplitRole::Test)?;
            let mut points = Vec::new();
            for &p in patch_sizes {
                let mut cfg_p = cfg.clone();
                cfg_p.patch_size = p;
                cfg_p.validate()?;
                let bundle = train_full(&cfg_p, &train)?;
                let entries = [(format!("P{p}"), &bundle, None)];
                points.extend(adafocus::evalbench::tradeoff_sweep(&entries, &test, cfg.seed)?);
                let last = points.last().expect("one point per size");
                println!("P{p}: top1 {:.3} mean-madds {:.3e}", last.top1, last.mean_flops);
            }
            let text = serde_json::to_string_pretty(&points)
                .map_err(|e| AdaFocusError::Format(e.to_string()))?;
            std::fs::create_dir_all(dir.metrics_path("sweep.json").parent().unwrap())?;
            std::fs::write(dir.metrics_path("sweep.json"), text)?;
            emit_tradeoff_plot(&points, &dir.plots_dir())?;
            Ok(())
        }
        Command::Plot => {
            reject_config_flags(cli)?;
            plot(&dir)
        }
        Command::Verify => {
            reject_config_flags(cli)?;
            let seed = dir
                .config_path()
                .exists()
                .then(|| dir.config().map(|c| c.seed))
                .transpose()?
                .unwrap_or(0);
            let report = verify_all(seed)?;
            for g in &report.gradients {
                println!(
                    "gradient {:<22} rel-err {:.2e} {}",
                    g.component,
                    g.max_rel_err,
                    if g.max_rel_err <= GRAD_TOL { "ok" } else { "FAIL" }
                );
            }
            println!(
                "reward zero-mean        dev {:.2e} {}",
                report.reward_zero_mean,
                if report.reward_zero_mean <= 1e-6 { "ok" } else { "FAIL" }
            );
            println!(
                "online/offline          gap {:.2e} {}",
                report.online_offline_gap,
                if report.online_offline_gap <= 1e-6 { "ok" } else { "FAIL" }
            );
            if report.passed() {
                Ok(())
            } else {
                Err(AdaFocusError::Contract("verification failed".into()))
            }
        }
    }
}

fn gen_data(cli: &Cli, dir: &RunDir) -> Result<()> {
    if dir.config_path().exists() && !cli.overwrite {
        return Err(AdaFocusError::Config(format!(
            "{} already initialized; pass --overwrite to regenerate",
            dir.root.display()
        )));
    }
    let cfg = RunConfig::resolve(cli.config.as_deref(), &cli.overrides)?;
    cfg.bundle_spec()?; // surface model-config errors before writing anything
    std::fs::create_dir_all(dir.root.join("data"))?;
    std::fs::create_dir_all(dir.root.join("checkpoints"))?;
    std::fs::create_dir_all(dir.root.join("metrics"))?;
    std::fs::create_dir_all(dir.plots_dir())?;
    let synth = cfg.synth_config();
    for (role, n, seed_tag) in [
        (SplitRole::Train, cfg.train_samples, 1u64),
        (SplitRole::Calibration, cfg.cal_samples, 2),
        (SplitRole::Test, cfg.test_samples, 3),
    ] {
        let split = generate_split(&synth, n, role, cfg.seed.wrapping_add(seed_tag))?;
        save_split(&split, &dir.split_path(role))?;
        println!("{}: {n} samples", role.as_str());
    }
    cfg.save(&dir.config_path())?;
    println!("config hash {}", cfg.hash());
    Ok(())
}

/// Fixed policies are evaluated on the stage-1 model (they never shaped
/// training); the learned policy on the stage-3 model. A calibrated
/// stage-3 checkpoint is preferred when present.
fn eval_model(
    dir: &RunDir,
    variant: PolicyVariant,
    hold_constant: bool,
    plus: bool,
) -> Result<ModelBundle> {
    // frame skipping needs the calibrated stage-3 skip gate regardless of
    // which patch policy is being scored
    if plus || hold_constant || variant == PolicyVariant::Learned {
        dir.bundle("stage3", "stage3")
    } else {
        dir.bundle("stage1", "stage1")
    }
}

fn write_records(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let text = serde_json::to_string_pretty(records)
        .map_err(|e| AdaFocusError::Format(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

fn train_full(cfg: &RunConfig, train: &DatasetSplit) -> Result<ModelBundle> {
    let mut bundle = ModelBundle::new(cfg.bundle_spec()?, cfg.seed)?;
    pretrain(&mut bundle, train, &cfg.stage_config(Stage::Pretrain), cfg.seed)?;
    stage1_warmup(&mut bundle, train, &cfg.stage_config(Stage::Stage1), cfg.seed)?;
    stage2_policy_learning(&mut bundle, train, &cfg.stage_config(Stage::Stage2), cfg.seed)?;
    stage3_finetune(&mut bundle, train, &cfg.stage_config(Stage::Stage3), cfg.seed)?;
    Ok(bundle)
}

/// Train the feature-reuse ablation pair under identical schedules. The
/// glance backbone initialization and pre-training do not depend on the
/// reuse flag, so both bundles share f_G exactly.
fn train_reuse_pair(cfg: &RunConfig, train: &DatasetSplit) -> Result<(ModelBundle, ModelBundle)> {
    let mut on_cfg = cfg.clone();
    on_cfg.reuse_glance = true;
    let mut off_cfg = cfg.clone();
    off_cfg.reuse_glance = false;
    Ok((train_full(&on_cfg, train)?, train_full(&off_cfg, train)?))
}

fn plot(dir: &RunDir) -> Result<()> {
    let mut emitted = false;
    let sweep_path = dir.metrics_path("sweep.json");
    if sweep_path.exists() {
        let text = std::fs::read_to_string(&sweep_path)?;
        let points: Vec<TradeoffPoint> =
            serde_json::from_str(&text).map_err(|e| AdaFocusError::Format(e.to_string()))?;
        emit_tradeoff_plot(&points, &dir.plots_dir())?;
        println!("wrote {}", dir.plots_dir().join("tradeoff.svg").display());
        emitted = true;
    }
    let mut online: Vec<MetricsRecord> = Vec::new();
    for variant in PolicyVariant::ALL {
        let path = dir.metrics_path(&format!("eval_{}.json", variant.name()));
        if path.exists() {
            let text = std::fs::read_to_string(&path)?;
            let recs: Vec<MetricsRecord> =
                serde_json::from_str(&text).map_err(|e| AdaFocusError::Format(e.to_string()))?;
            online.extend(recs.into_iter().filter(|r| !r.per_frame_accuracy.is_empty()));
        }
    }
    if !online.is_empty() {
        emit_online_curves(&online, &dir.plots_dir())?;
        println!("wrote {}", dir.plots_dir().join("online_curves.svg").display());
        emitted = true;
    }
    if emitted {
        Ok(())
    } else {
        Err(AdaFocusError::Contract(
            "no metrics found; run eval --online, ablate, or sweep first".into(),
        ))
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sasgp::error::{GpError, Result};
use sasgp::trainer::{
    self, evaluate, latents_of, prepare_data, verify::verify, write_latents, Checkpoint, Precision, RunConfig,
};

#[derive(Parser)]
#[command(name = "sasgp", version, about = "GP decoders trained with stochastic active sets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write curves, latents, metrics and a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on its held-out rows.
    Evaluate(EvalArgs),
    /// Run the built-in oracle suites.
    Verify(VerifyArgs),
    /// Write the latent coordinates of a checkpoint to CSV.
    ExportLatents(ExportArgs),
}

/// Run settings; flags override the config file, which overrides defaults.
#[derive(Args, Default)]
struct Overrides {
    /// `sas` or `bayesian-sas`.
    #[arg(long)]
    mode: Option<String>,
    /// Encoder network (true) or free per-datum latents (false).
    #[arg(long)]
    amortized: Option<bool>,
    /// `synth[:D]`, `idx:IMAGES[,LABELS]`, `idx-dir:DIR`, `csv:PATH`, `csv-labeled:PATH`.
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    /// Latent dimension.
    #[arg(long)]
    q: Option<usize>,
    #[arg(long)]
    active_set: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    jitter: Option<f64>,
    #[arg(long)]
    num_mc: Option<usize>,
    /// `none`, `conditional-only` or `active-only`.
    #[arg(long)]
    ablation: Option<String>,
    /// `64` or `32`.
    #[arg(long)]
    precision: Option<String>,
    /// Random training active sets averaged over at evaluation.
    #[arg(long)]
    eval_active_sets: Option<usize>,
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        let pairs: [(&str, Option<String>); 16] = [
            ("mode", self.mode.clone()),
            ("amortized", self.amortized.map(|v| v.to_string())),
            ("data", self.data.clone()),
            ("n_train", self.n_train.map(|v| v.to_string())),
            ("n_test", self.n_test.map(|v| v.to_string())),
            ("q", self.q.map(|v| v.to_string())),
            ("active_set", self.active_set.map(|v| v.to_string())),
            ("batch", self.batch.map(|v| v.to_string())),
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("lr", self.lr.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("data_seed", self.data_seed.map(|v| v.to_string())),
            ("jitter", self.jitter.map(|v| v.to_string())),
            ("num_mc", self.num_mc.map(|v| v.to_string())),
            ("ablation", self.ablation.clone()),
            ("precision", self.precision.clone()),
        ];
        for (k, v) in pairs {
            if let Some(v) = v {
                cfg.set(k, &v)?;
            }
        }
        if let Some(v) = self.eval_active_sets {
            cfg.eval_active_sets = v;
        }
        Ok(())
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
    /// Directory for `metrics.json`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// `all`, `cv-identity`, `two-term`, `unbiased` or `grad-check`.
    #[arg(long, default_value = "all")]
    suite: String,
    #[arg(long, default_value = "64")]
    precision: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Rows {
    Train,
    Test,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
    /// Which rows to encode.
    #[arg(long, value_enum, default_value = "train")]
    rows: Rows,
    /// Destination CSV.
    #[arg(long)]
    out: PathBuf,
}

fn json(v: &serde_json::Value) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| GpError::InvalidConfig(e.to_string()))
}

/// Checkpoint, its run configuration with overrides applied, and parameters.
fn open_checkpoint(path: &PathBuf, overrides: &Overrides) -> Result<(RunConfig, sasgp::optim::ModelParams<f64>)> {
    let ckpt = Checkpoint::load(path)?;
    let mut cfg = RunConfig::parse_text(&ckpt.config)?;
    overrides.apply(&mut cfg)?;
    Ok((cfg, ckpt.to_params()?))
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train(a) => {
            let mut cfg = match &a.config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::default(),
            };
            a.overrides.apply(&mut cfg)?;
            if a.out.is_some() {
                cfg.out = a.out;
            }
            let outcome = trainer::train(&cfg)?;
            let last = outcome.log.epochs.last();
            println!(
                "{}",
                json(&serde_json::json!({
                    "config_hash": outcome.log.config_hash,
                    "epochs": outcome.log.epochs.len(),
                    "final_objective": last.map(|e| e.objective),
                    "final_exact_log_marginal": outcome.log.final_exact_log_marginal,
                    "metrics": outcome.log.metrics,
                    "out": cfg.out,
                }))?
            );
        }
        Command::Evaluate(a) => {
            let (cfg, params) = open_checkpoint(&a.checkpoint, &a.overrides)?;
            let (train, test) = prepare_data(&cfg)?;
            let metrics = evaluate(&params, &cfg, &train, &test)?;
            let text = json(&serde_json::json!({ "metrics": metrics }))?;
            println!("{text}");
            if let Some(dir) = a.out {
                std::fs::create_dir_all(&dir)?;
                sasgp::data::write_atomic(&dir.join(trainer::METRICS_FILE), text.as_bytes())?;
            }
        }
        Command::Verify(a) => {
            let report = verify(&a.suite, a.precision.parse::<Precision>()?, a.seed)?;
            for r in &report.results {
                let relax = r.relaxed_from.map(|t| format!(" (relaxed from {t:e})")).unwrap_or_default();
                println!(
                    "{} {:<12} {}: error {:.3e}, tolerance {:e}{relax}",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.suite,
                    r.name,
                    r.error,
                    r.tolerance
                );
            }
            let relaxed = report.relaxations().len();
            if relaxed > 0 {
                println!("{relaxed} tolerance relaxation(s) at {}-bit", report.precision);
            }
            if !report.all_passed() {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::ExportLatents(a) => {
            let (cfg, params) = open_checkpoint(&a.checkpoint, &a.overrides)?;
            let (train, test) = prepare_data(&cfg)?;
            let ds = match a.rows {
                Rows::Train => &train,
                Rows::Test => &test,
            };
            let (z, var) = latents_of(&params, ds)?;
            write_latents(&a.out, &z, var.as_ref(), ds.labels.as_deref())?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

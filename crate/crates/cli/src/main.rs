use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mtgate::backbone::GateMode;
use mtgate::config::{Ablation, DatasetConfig, ExperimentConfig};
use mtgate::data::{generate, Dataset, SplitName};
use mtgate::metrics::SingleTaskReference;
use mtgate::pipeline::{self, reference_path};
use mtgate::trainer::{delta_against, evaluate};
use mtgate::{Error, GatedBackbone, Result};

/// Multi-task training with learned task policies and instance gating.
#[derive(Parser)]
#[command(name = "mtgate", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (JSON). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from a named preset (default, nyu-like, mimic-like) instead of a file.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides output_dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated target rates, e.g. 1.0,0.8,0.55.
    #[arg(long, value_delimiter = ',')]
    target_rates: Option<Vec<f64>>,
    #[arg(long)]
    ablation: Option<Ablation>,
    /// Parallel retrains.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args, Clone)]
struct RefArgs {
    /// Single-task reference CSV; defaults to <out>/reference.csv.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Train single-task baselines when no reference file exists.
    #[arg(long)]
    compute_reference: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset as CSV plus its spec.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train single-task baselines and write the reference CSV.
    SingleTask {
        #[command(flatten)]
        common: Common,
    },
    /// Warm-up and policy learning; checkpoints every epoch and resumes.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Retrain sampled plans from a finished policy checkpoint and evaluate.
    Retrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        refs: RefArgs,
    },
    /// Evaluate a saved model on a split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        refs: RefArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
    },
    /// Full pipeline over a list of target rates.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        refs: RefArgs,
    },
    /// Join a run directory's artifacts into report.json and report.csv.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare hard sharing, task-policy only and the full method.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        refs: RefArgs,
        /// Also run the instance-gating-only variant.
        #[arg(long)]
        instance_only: bool,
    },
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match (&c.config, &c.preset) {
        (Some(p), _) => ExperimentConfig::load(p)?,
        (None, Some(name)) => ExperimentConfig::preset(name)?,
        (None, None) => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.output_dir = o.clone();
    }
    if let Some(t) = &c.target_rates {
        cfg.target_rates = t.clone();
    }
    if let Some(a) = c.ablation {
        cfg.ablation = a;
    }
    if let Some(w) = c.workers {
        cfg.train.workers = w;
    }
    cfg.validate()?;
    log::info!("config {} (seed {})", &cfg.hash()[..12], cfg.seed);
    Ok(cfg)
}

fn create_out(cfg: &ExperimentConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))
}

fn reference(cfg: &ExperimentConfig, data: &Dataset, refs: &RefArgs) -> Result<SingleTaskReference> {
    let path = refs.reference.clone().unwrap_or_else(|| reference_path(&cfg.output_dir));
    if path.exists() {
        return SingleTaskReference::load_csv(&path);
    }
    if !refs.compute_reference {
        return Err(Error::MissingArtifacts(vec![format!(
            "{} (run single-task first or pass --compute-reference)",
            path.display()
        )]));
    }
    let r = pipeline::run_single_task::<f64>(cfg, data)?;
    create_out(cfg)?;
    r.save_csv(&reference_path(&cfg.output_dir))?;
    Ok(r)
}

fn require(paths: &[&Path]) -> Result<()> {
    let missing: Vec<String> = paths
        .iter()
        .filter(|p| !p.exists())
        .map(|p| p.display().to_string())
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::MissingArtifacts(missing))
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common } => {
            let cfg = load_config(&common)?;
            let DatasetConfig::Synthetic(spec) = &cfg.dataset else {
                return Err(Error::Config("gen-data needs a synthetic dataset section".into()));
            };
            create_out(&cfg)?;
            let data = generate(spec, cfg.seed)?;
            data.save_csv(&cfg.output_dir.join("data.csv"))?;
            Dataset::save_spec(spec, cfg.seed, &cfg.output_dir.join("data_spec.json"))?;
            println!("wrote {}", cfg.output_dir.join("data.csv").display());
        }
        Command::SingleTask { common } => {
            let cfg = load_config(&common)?;
            let data = pipeline::load_dataset(&cfg)?;
            let r = pipeline::run_single_task::<f64>(&cfg, &data)?;
            create_out(&cfg)?;
            r.save_csv(&reference_path(&cfg.output_dir))?;
            println!("wrote {}", reference_path(&cfg.output_dir).display());
        }
        Command::Train { common } => {
            let cfg = load_config(&common)?;
            let data = pipeline::load_dataset(&cfg)?;
            create_out(&cfg)?;
            let stage = pipeline::run_policy_stage::<f64>(&cfg, &data, cfg.ablation, Some(&cfg.output_dir))?;
            let names: Vec<String> = data.tasks.iter().map(|t| t.name.clone()).collect();
            let policy_csv = cfg.output_dir.join("policy.csv");
            std::fs::write(&policy_csv, stage.policy.alpha_csv(&names)).map_err(|e| Error::io(&policy_csv, e))?;
            let spec = stage.model.spec();
            mtgate::trainer::write_log_csv(&stage.log, spec.num_tasks(), spec.num_blocks(), &cfg.output_dir.join("metrics.csv"))?;
            print!("{}", stage.policy.alpha_csv(&names));
        }
        Command::Retrain { common, refs } => {
            let cfg = load_config(&common)?;
            if cfg.ablation != Ablation::InstanceOnly {
                require(&[&cfg.output_dir.join("train_state.json")])?;
            }
            let data = pipeline::load_dataset(&cfg)?;
            let r = reference(&cfg, &data, &refs)?;
            let s = pipeline::run_pipeline::<f64>(&cfg, &data, &r, &cfg.output_dir)?;
            println!("{}", serde_json::to_string_pretty(&s.variants.iter().map(|v| (&v.variant, v.val_delta, v.expected_flops)).collect::<Vec<_>>())?);
        }
        Command::Evaluate {
            common,
            refs,
            model,
            split,
        } => {
            let cfg = load_config(&common)?;
            require(&[&model])?;
            let data = pipeline::load_dataset(&cfg)?;
            let (m, plan) = GatedBackbone::load_json(&model)?;
            let spec = m.spec();
            let plan = plan.unwrap_or_else(|| mtgate::backbone::ExecutionPlan::all_ones(spec.num_blocks(), spec.num_tasks()));
            let which = match split.as_str() {
                "train" => SplitName::Train,
                "val" => SplitName::Val,
                "test" => SplitName::Test,
                s => return Err(Error::Config(format!("unknown split {s:?}"))),
            };
            let gates = if spec.gated_blocks().is_empty() { GateMode::Open } else { cfg.train.eval_gates.mode() };
            let ev = evaluate(&m, &plan, gates, data.split(which), cfg.train.ratio_threshold, cfg.seed)?;
            let mut out = serde_json::json!({ "metrics": ev.metrics, "gate_rates": ev.gate_rates });
            if let Ok(r) = reference(&cfg, &data, &refs) {
                let (per, overall) = delta_against(&ev.metrics, &pipeline::reference_for(&data, &r)?)?;
                out["delta_per_task"] = serde_json::json!(per);
                out["delta"] = serde_json::json!(overall);
            }
            println!("{}", serde_json::to_string_pretty(&out)?);
        }
        Command::Sweep { common, refs } => {
            let cfg = load_config(&common)?;
            let data = pipeline::load_dataset(&cfg)?;
            let r = reference(&cfg, &data, &refs)?;
            let s = pipeline::run_pipeline::<f64>(&cfg, &data, &r, &cfg.output_dir)?;
            for v in &s.variants {
                println!(
                    "{:<16} t={:<5} val Δ={:+.3} test Δ={:+.3} params={} flops={:.0}",
                    v.variant, v.target_rate, v.val_delta, v.test_delta, v.params, v.expected_flops
                );
            }
        }
        Command::Report { out } => {
            let rep = pipeline::report(&out)?;
            println!("{}", serde_json::to_string_pretty(&rep.summary.variants.iter().map(|v| (&v.variant, v.val_delta, v.test_delta)).collect::<Vec<_>>())?);
        }
        Command::Ablate {
            common,
            refs,
            instance_only,
        } => {
            let cfg = load_config(&common)?;
            let data = pipeline::load_dataset(&cfg)?;
            let r = reference(&cfg, &data, &refs)?;
            let rows = pipeline::run_ablation::<f64>(&cfg, &data, &r, instance_only, Some(&cfg.output_dir))?;
            for row in rows {
                println!(
                    "{:<14} t={:<5} val Δ={:+.3} flops={:.0}",
                    row.method,
                    row.target_rate.map(|t| t.to_string()).unwrap_or_else(|| "-".into()),
                    row.val_delta,
                    row.expected_flops
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

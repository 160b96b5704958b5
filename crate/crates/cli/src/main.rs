use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{Map, Value};
use superfed::experiment::{self, OUT_ROOT_ENV, PRESETS};

#[derive(Parser)]
#[command(name = "superfed", version, about = "Personalized federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one simulation and write its outputs.
    Run(RunArgs),
    /// List the built-in presets.
    Presets,
    /// Print the fully resolved config without running it.
    Resolve(RunArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Scheme {
    Mm,
    Lm,
}

#[derive(clap::Args)]
struct RunArgs {
    /// JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    local_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    clients: Option<usize>,
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    nu: Option<f64>,
    #[arg(long, value_enum)]
    scheme: Option<Scheme>,
    #[arg(long)]
    personalization_start: Option<usize>,
    /// `pathological[:shards]` or `dirichlet:<alpha>`.
    #[arg(long)]
    partition: Option<String>,
    /// `none`, `pair:<ratio>` or `symmetric:<ratio>`.
    #[arg(long)]
    noise: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run clients one after another instead of on the thread pool.
    #[arg(long)]
    serial: bool,
    /// Output directory; defaults to `$SUPERFED_OUT_ROOT/<config hash>`.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn overrides(&self) -> Result<Value> {
        let mut m = Map::new();
        let mut put = |k: &str, v: Value| {
            m.insert(k.to_string(), v);
        };
        if let Some(v) = self.rounds {
            put("rounds", v.into());
        }
        if let Some(v) = self.local_epochs {
            put("local_epochs", v.into());
        }
        if let Some(v) = self.batch_size {
            put("batch_size", v.into());
        }
        if let Some(v) = self.clients {
            put("clients", v.into());
        }
        if let Some(v) = self.fraction {
            put("fraction", v.into());
        }
        if let Some(v) = self.lr {
            put("lr", v.into());
        }
        if let Some(v) = self.mu {
            put("mu", v.into());
        }
        if let Some(v) = self.nu {
            put("nu", v.into());
        }
        if let Some(s) = self.scheme {
            put("scheme", match s {
                Scheme::Mm => "mm",
                Scheme::Lm => "lm",
            }
            .into());
        }
        if let Some(v) = self.personalization_start {
            put("personalization_start", v.into());
        }
        if let Some(p) = &self.partition {
            put("partition", experiment::parse_partition_flag(p)?);
        }
        if let Some(n) = &self.noise {
            put("noise", experiment::parse_noise_flag(n)?);
        }
        if let Some(v) = self.seed {
            put("seed", v.into());
        }
        if self.serial {
            put("parallel", false.into());
        }
        if let Some(o) = &self.out {
            put("out_dir", o.to_string_lossy().into_owned().into());
        }
        Ok(Value::Object(m))
    }

    fn resolve(&self) -> Result<experiment::ResolvedConfig> {
        let file = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                Some(experiment::parse_config_str(&text).with_context(|| format!("parsing {}", p.display()))?)
            }
            None => None,
        };
        Ok(experiment::resolve(self.preset.as_deref(), file, self.overrides()?)?)
    }
}

fn run(args: &RunArgs) -> Result<()> {
    let resolved = args.resolve()?;
    let out = experiment::default_out_dir(&resolved);
    log::info!("config {} -> {}", resolved.short_hash(), out.display());
    let report = experiment::execute_in(&resolved, &out)
        .with_context(|| format!("run failed; partial outputs in {}", out.display()))?;
    println!("outputs: {}", report.out_dir.display());
    if let Some(f) = &report.final_metrics {
        println!("global model top-1:   {:.4}", f.global.top1_mean);
        println!(
            "best average top-1:   {:.4} ± {:.4} at λ* = {}",
            f.best_average.shared.top1_mean, f.best_average.shared.top1_std, f.lambda_star
        );
        println!(
            "per-client best top-1: {:.4} ± {:.4}",
            f.best_average.per_client.top1_mean, f.best_average.per_client.top1_std
        );
        println!("ECE {:.4}  MCE {:.4}  (λ = {})", f.ece, f.mce, f.headline_lambda);
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => run(args),
        Command::Resolve(args) => args.resolve().and_then(|r| {
            println!("{}", serde_json::to_string_pretty(&r)?);
            Ok(())
        }),
        Command::Presets => {
            for p in PRESETS {
                println!("{p}");
            }
            println!("\noutput root: ${OUT_ROOT_ENV} (default ./runs)");
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

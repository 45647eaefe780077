use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use lipgate::metrics::GateDecision;
use lipgate::models::ArchKind;
use lipgate_cli::commands::{self, Method, ScoreColumn};
use lipgate_cli::{experiment, RunConfig};

#[derive(Parser)]
#[command(name = "lipgate", version, about = "Uncertainty scoring and accept/refer gating for learned reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration
    #[arg(long)]
    config: PathBuf,
    /// Overrides `seed` and `data.base_seed`
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> anyhow::Result<RunConfig> {
        let cfg = RunConfig::load(&self.config)?.with_seed(self.seed);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the train / ID-test / OOD-test datasets
    Datagen {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Defaults to `paths.out_dir`
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Train one model and write its checkpoint and loss history
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// automap, automap-dropout or unet-residual; defaults to the config
        #[arg(long)]
        arch: Option<String>,
        /// Ensemble member index (selects the init and shuffle seeds)
        #[arg(long, default_value_t = 0)]
        member: u64,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        loss_csv: PathBuf,
    },
    /// Score a dataset and write per-sample records
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "single")]
        method: String,
        /// Repeat for ensemble members
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// ROC curve and AUC for ID vs OOD records
    Ood {
        #[arg(long)]
        id: PathBuf,
        #[arg(long)]
        ood: PathBuf,
        #[arg(long, default_value = "lipschitz")]
        score: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Referral curve and gate threshold for a target MAE
    Calibrate {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        mae_limit: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruct one input and decide ACCEPT (exit 0) or REFER (exit 2)
    Gate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Tensor file holding an `input` tensor
        #[arg(long)]
        input: PathBuf,
        #[arg(long, allow_negative_numbers = true)]
        gamma: f64,
        #[arg(long, default_value_t = lipgate::uncertainty::DEFAULT_NOISE_FRACTION)]
        noise_fraction: f64,
        #[arg(long, default_value_t = 0)]
        noise_seed: u64,
        /// Tensor file for the reconstruction and uncertainty map
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Copy one dataset sample into a tensor file usable by `gate`
    Extract {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        index: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full pipeline into `paths.out_dir`
    Experiment {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "single")]
        methods: Vec<String>,
    },
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Datagen { cfg, out_dir } => {
            let cfg = cfg.load()?;
            let dir = out_dir.unwrap_or_else(|| cfg.paths.out_dir.clone());
            for (path, count) in commands::cmd_datagen(&cfg, &dir)? {
                println!("{} samples -> {}", count, path.display());
            }
        }
        Command::Train { cfg, data, arch, member, checkpoint, loss_csv } => {
            let cfg = cfg.load()?;
            let kind = match arch {
                Some(a) => ArchKind::parse(&a).ok_or_else(|| anyhow!("unknown arch `{a}`"))?,
                None => cfg.arch_kind()?,
            };
            let (_, history) = commands::cmd_train(&cfg, &data, kind, member, &checkpoint, &loss_csv)?;
            if let Some(last) = history.last() {
                println!("final mean loss {:.6}", last.mean_total_loss);
            }
            println!("checkpoint -> {}", checkpoint.display());
        }
        Command::Eval { cfg, dataset, method, checkpoint, out } => {
            let cfg = cfg.load()?;
            let method = Method::parse(&method).ok_or_else(|| anyhow!("unknown method `{method}`"))?;
            let recs = commands::cmd_eval(&cfg, &checkpoint, &dataset, method, &out)?;
            println!("{} records -> {}", recs.len(), out.display());
        }
        Command::Ood { id, ood, score, out } => {
            let column = ScoreColumn::parse(&score).ok_or_else(|| anyhow!("unknown score column `{score}`"))?;
            let roc = commands::cmd_ood(&id, &ood, column, &out)?;
            println!("AUC {:.6}", roc.auc);
        }
        Command::Calibrate { records, mae_limit, out } => {
            let t = commands::cmd_calibrate(&records, mae_limit, &out)?;
            println!("gamma {}", t.gamma);
            println!("referral fraction {}", t.fraction);
        }
        Command::Gate { checkpoint, input, gamma, noise_fraction, noise_seed, out } => {
            let outcome = commands::cmd_gate(&checkpoint, &input, gamma, noise_fraction, noise_seed, out.as_deref())?;
            println!("lipschitz {}", outcome.lipschitz);
            return Ok(match outcome.decision {
                GateDecision::Accept => {
                    println!("ACCEPT");
                    ExitCode::SUCCESS
                }
                GateDecision::Refer => {
                    println!("REFER: process this input with an alternative reconstruction");
                    ExitCode::from(2)
                }
            });
        }
        Command::Extract { dataset, index, out } => {
            commands::cmd_extract(&dataset, index, &out)?;
        }
        Command::Experiment { cfg, methods } => {
            let cfg = cfg.load()?;
            let methods = methods
                .iter()
                .map(|m| Method::parse(m).ok_or_else(|| anyhow!("unknown method `{m}`")))
                .collect::<anyhow::Result<Vec<_>>>()?;
            let report = experiment::run(&cfg, &methods, |line| eprintln!("{line}")).context("experiment failed")?;
            for m in &report.methods {
                println!(
                    "{}: spearman {:.4}  auc_lipschitz {:.6}  auc_variance {:.6}",
                    m.method.name(),
                    m.spearman_id,
                    m.auc_lipschitz,
                    m.auc_variance
                );
            }
            if let Some(t) = report.calibration {
                println!("gamma {} (mae_limit {}, fraction {})", t.gamma, t.mae_limit, t.fraction);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

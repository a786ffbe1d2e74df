use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use phasefort_core::attack::Strategy;
use phasefort_core::checkpoint::{load_checkpoint, Checkpoint};
use phasefort_core::config::ExperimentConfig;
use phasefort_core::experiment;
use phasefort_core::layers::{default_tolerance, Mode};
use phasefort_core::network::{build, Arch, Model, Variant};

#[derive(Parser)]
#[command(name = "phasefort", version, about = "Phase-rotation feature encryption: training, attacks and audits")]
struct Cli {
    /// Worker threads for matrix products (1 keeps runs bit-reproducible).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Adversarially train the complex pipeline; writes checkpoint and CSV log.
    Train(RunArgs),
    /// Train a real baseline (original, additional_layers, noisy:<γ>).
    TrainBaseline {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        variant: Option<String>,
    },
    /// Train an inversion attack against a frozen checkpoint.
    Attack {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// 1 (phase estimation), 2 (direct decoding) or plaintext.
        #[arg(long)]
        strategy: String,
    },
    /// Classification error of a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Audit the processing stack's phase equivariance.
    CheckEquivariance {
        /// Checkpoint to audit; without it a fresh build of --arch is audited.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "lenet")]
        arch: String,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 32)]
        image_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Attack a checkpoint and write an original/reconstruction PPM grid.
    ExportRecon {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        strategy: String,
        #[arg(long, default_value_t = 16)]
        rows: usize,
    },
}

/// Config file plus flag overrides shared by the run commands.
#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lambda_adv: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    /// CIFAR-10 binary directory; switches the data source to cifar.
    #[arg(long)]
    cifar: Option<PathBuf>,
    #[arg(long)]
    train_size: Option<usize>,
    #[arg(long)]
    test_size: Option<usize>,
    #[arg(long)]
    attack_epochs: Option<usize>,
}

impl RunArgs {
    fn resolve(&self) -> Result<(ExperimentConfig, u64)> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = &self.out {
            cfg.output_dir = v.clone();
        }
        if let Some(v) = &self.arch {
            cfg.arch = v.clone();
        }
        if let Some(v) = self.epochs {
            cfg.train.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.train.batch_size = v;
        }
        if let Some(v) = self.lambda_adv {
            cfg.adversarial.lambda_adv = v;
        }
        if let Some(v) = self.k {
            cfg.adversarial.k = v;
        }
        if let Some(v) = &self.cifar {
            cfg.data.source = "cifar".into();
            cfg.data.path = Some(v.clone());
        }
        if let Some(v) = self.train_size {
            cfg.data.train_size = v;
        }
        if let Some(v) = self.test_size {
            cfg.data.test_size = v;
        }
        if let Some(v) = self.attack_epochs {
            cfg.attack.epochs = v;
            cfg.attack.critic_epochs = v;
        }
        cfg.validate()?;
        let seed = cfg.resolve_seed(self.seed)?;
        Ok((cfg, seed))
    }
}

fn parse_strategy(s: &str) -> Result<Strategy> {
    Ok(s.parse::<Strategy>()?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => {
            let (cfg, seed) = args.resolve()?;
            let out = experiment::run_train(&cfg, seed)?;
            println!("checkpoint {}", out.checkpoint.display());
            println!("log {}", out.log.display());
            println!("test error {:.2}%", out.test_error);
        }
        Command::TrainBaseline { run, variant } => {
            let (cfg, seed) = run.resolve()?;
            let variant: Variant = match variant {
                Some(v) => v.parse()?,
                None => cfg.variant()?,
            };
            let out = experiment::run_train_baseline(&cfg, variant, seed)?;
            println!("checkpoint {}", out.checkpoint.display());
            println!("log {}", out.log.display());
            println!("test error {:.2}%", out.test_error);
        }
        Command::Attack { run, checkpoint, strategy } => {
            let strategy = parse_strategy(&strategy)?;
            let (cfg, seed) = run.resolve()?;
            let (report, _, _) = experiment::run_attack_experiment(&cfg, &checkpoint, strategy, seed)?;
            println!("{report}");
            println!("report {}", cfg.output_dir.join(experiment::REPORT_CSV_FILE).display());
        }
        Command::Eval { run, checkpoint } => {
            let (cfg, seed) = run.resolve()?;
            let err = experiment::run_eval(&cfg, &checkpoint, seed)?;
            println!("classification error {err:.2}%");
        }
        Command::CheckEquivariance { checkpoint, arch, trials, classes, image_size, seed } => {
            let model: Model<f32> = match checkpoint {
                Some(p) => {
                    let ck: Checkpoint<f32> = load_checkpoint(&p).with_context(|| format!("loading {}", p.display()))?;
                    ck.model
                }
                None => {
                    let arch: Arch = arch.parse()?;
                    Model::new(build(arch, classes, [3, image_size, image_size])?, seed)?
                }
            };
            if !model.net.variant.is_complex() {
                bail!("{} checkpoints have no processing stack to audit", model.net.variant.tag());
            }
            let tol = default_tolerance::<f32>();
            let mut pass = true;
            for mode in [Mode::Eval, Mode::Train] {
                let rep = model.net.certify(&model.store, 2, mode, trials, tol, seed)?;
                println!(
                    "{} {mode:?}: max residual {:.3e} over {} trials (tol {tol:.0e}) {}",
                    model.net.arch,
                    rep.max_residual,
                    rep.trials,
                    if rep.pass { "pass" } else { "FAIL" }
                );
                pass &= rep.pass;
            }
            if !pass {
                bail!("equivariance audit failed");
            }
        }
        Command::ExportRecon { run, checkpoint, strategy, rows } => {
            let strategy = parse_strategy(&strategy)?;
            let (cfg, seed) = run.resolve()?;
            let (report, path) = experiment::run_export_recon(&cfg, &checkpoint, strategy, rows, seed)?;
            println!("{report}");
            println!("grid {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    // The matrix kernel reads its thread count from the environment on first use.
    std::env::set_var("MATMUL_NUM_THREADS", cli.threads.max(1).to_string());
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

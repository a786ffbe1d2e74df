//! End-to-end runs: every run writes its effective config, CSV log and
//! checkpoint (and, for attacks, the report) into one output directory.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use crate::adversarial::{train_baseline, train_complex, BaselineTrainer, CsvLog, Trainer};
use crate::attack::{classification_error, export_ppm, run_attack, train_attack, AttackReport, Strategy, REPORT_CSV_HEADER};
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::{DeltaChoice, ExperimentConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{build, build_baseline, build_with_delta, forward_plain, Model, Variant};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const REPORT_CSV_FILE: &str = "attack_report.csv";
pub const REPORT_TEXT_FILE: &str = "attack_report.txt";
pub const RECON_FILE: &str = "reconstructions.ppm";

/// Classification error (percent) on `data`. Complex models run the full
/// encrypted round trip with fresh secrets; baselines run `d(g(I))`.
pub fn evaluate<T: Scalar>(model: &Model<T>, data: &Dataset, batch_size: usize, seed: u64) -> Result<f64> {
    let mut rng = Rng::derive(seed, 0xEFA1);
    let mut wrong = 0.0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(2)) {
        let (x, y) = data.batch::<T>(chunk)?;
        let logits = if model.net.variant.is_complex() && chunk.len() >= 2 {
            model.infer(&x, &mut rng)?
        } else if model.net.variant.is_complex() {
            model.infer_with(&x, &[crate::secure::sample_phase(&mut rng)], None)?
        } else {
            forward_plain(model, &x, &mut rng)?
        };
        wrong += classification_error(&logits, &y)? * chunk.len() as f64 / 100.0;
    }
    Ok(if data.is_empty() { 0.0 } else { 100.0 * wrong / data.len() as f64 })
}

/// What a training run produced.
#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub test_error: f64,
    pub model: Model<f32>,
}

fn complex_net(cfg: &ExperimentConfig) -> Result<crate::network::NetworkDivision> {
    let (train_shape, classes) = shape_and_classes(cfg)?;
    match cfg.delta()?.mode() {
        None => build(cfg.arch()?, classes, train_shape),
        Some(mode) => build_with_delta(cfg.arch()?, classes, train_shape, mode),
    }
}

fn shape_and_classes(cfg: &ExperimentConfig) -> Result<([usize; 3], usize)> {
    Ok(match cfg.data.source.as_str() {
        "cifar" => ([3, 32, 32], 10),
        _ => ([3, cfg.data.image_size, cfg.data.image_size], cfg.data.classes),
    })
}

fn effective(cfg: &ExperimentConfig, seed: u64) -> ExperimentConfig {
    ExperimentConfig { seed: Some(seed), ..cfg.clone() }
}

/// Adversarial training of the complex pipeline.
pub fn run_train(cfg: &ExperimentConfig, seed: u64) -> Result<TrainOutcome> {
    let cfg = effective(cfg, seed);
    let dir = cfg.output_dir.clone();
    cfg.echo(&dir)?;
    let (train, test) = cfg.datasets(seed)?;
    let model = Model::<f32>::new(complex_net(&cfg)?, seed)?;
    let mut trainer = Trainer::new(model, cfg.adv_options(), seed ^ 0xD15C)?;
    let log_path = dir.join(TRAIN_LOG_FILE);
    let mut log = CsvLog::new(BufWriter::new(File::create(&log_path)?))?;
    train_complex(&mut trainer, &train, cfg.train.epochs, cfg.train.batch_size, seed, |r| log.record(r))?;
    drop(log);
    let ck = Checkpoint { model: trainer.model, delta: cfg.delta()?, step: trainer.steps, config: cfg.snapshot()? };
    let path = dir.join(CHECKPOINT_FILE);
    save_checkpoint(&ck, &path)?;
    let test_error = evaluate(&ck.model, &test, cfg.train.batch_size, seed)?;
    Ok(TrainOutcome { checkpoint: path, log: log_path, test_error, model: ck.model })
}

/// Supervised training of a real baseline variant.
pub fn run_train_baseline(cfg: &ExperimentConfig, variant: Variant, seed: u64) -> Result<TrainOutcome> {
    if variant.is_complex() {
        return Err(Error::Config("train-baseline needs original, additional_layers or noisy:<γ>".into()));
    }
    let mut cfg = effective(cfg, seed);
    cfg.baseline.variant = variant.tag();
    let dir = cfg.output_dir.clone();
    cfg.echo(&dir)?;
    let (train, test) = cfg.datasets(seed)?;
    let (shape, classes) = shape_and_classes(&cfg)?;
    let model = Model::<f32>::new(build_baseline(cfg.arch()?, variant, classes, shape)?, seed)?;
    let mut trainer = BaselineTrainer::new(model, &cfg.adv_options());
    let log_path = dir.join(TRAIN_LOG_FILE);
    let mut log = CsvLog::new(BufWriter::new(File::create(&log_path)?))?;
    train_baseline(&mut trainer, &train, cfg.train.epochs, cfg.train.batch_size, seed, |r| log.record(r))?;
    drop(log);
    let ck = Checkpoint { model: trainer.model, delta: DeltaChoice::Default, step: trainer.steps, config: cfg.snapshot()? };
    let path = dir.join(CHECKPOINT_FILE);
    save_checkpoint(&ck, &path)?;
    let test_error = evaluate(&ck.model, &test, cfg.train.batch_size, seed)?;
    Ok(TrainOutcome { checkpoint: path, log: log_path, test_error, model: ck.model })
}

/// Classification error of a saved model on the configured test split.
pub fn run_eval(cfg: &ExperimentConfig, checkpoint: &Path, seed: u64) -> Result<f64> {
    let ck: Checkpoint<f32> = load_checkpoint(checkpoint)?;
    let (_, test) = cfg.datasets(seed)?;
    check_compatible(&ck.model, &test)?;
    evaluate(&ck.model, &test, cfg.train.batch_size, seed)
}

fn check_compatible<T: Scalar>(model: &Model<T>, data: &Dataset) -> Result<()> {
    if data.image_shape() != model.net.input_shape || data.classes != model.net.classes {
        return Err(Error::Config(format!(
            "checkpoint expects {:?} images and {} classes; data has {:?} and {}",
            model.net.input_shape,
            model.net.classes,
            data.image_shape(),
            data.classes
        )));
    }
    Ok(())
}

/// Trains an attack against a frozen checkpoint, evaluates it on the test
/// split and writes the report (CSV and text) to the output directory.
pub fn run_attack_experiment(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    strategy: Strategy,
    seed: u64,
) -> Result<(AttackReport, Tensor<f32>, Dataset)> {
    let cfg = effective(cfg, seed);
    let dir = cfg.output_dir.clone();
    cfg.echo(&dir)?;
    let ck: Checkpoint<f32> = load_checkpoint(checkpoint)?;
    let (train, test) = cfg.datasets(seed)?;
    check_compatible(&ck.model, &train)?;
    let attack = train_attack(&ck.model, &train, strategy, &cfg.attack_config(), seed)?;
    let (report, recon) = run_attack(&ck.model, &attack, &test, cfg.attack.batch_size, seed)?;
    std::fs::write(dir.join(REPORT_CSV_FILE), format!("{REPORT_CSV_HEADER}\n{}\n", report.csv_row()))?;
    std::fs::write(dir.join(REPORT_TEXT_FILE), format!("{report}\n"))?;
    Ok((report, recon, test))
}

/// Attack run followed by a PPM grid of the first `rows` test images.
pub fn run_export_recon(cfg: &ExperimentConfig, checkpoint: &Path, strategy: Strategy, rows: usize, seed: u64) -> Result<(AttackReport, PathBuf)> {
    let (report, recon, test) = run_attack_experiment(cfg, checkpoint, strategy, seed)?;
    let n = rows.min(test.len());
    let idx: Vec<usize> = (0..n).collect();
    let (orig, _) = test.batch::<f32>(&idx)?;
    let path = cfg.output_dir.join(RECON_FILE);
    export_ppm(&path, &orig, &recon.select_batch(&idx)?, n)?;
    Ok((report, path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(dir: &Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig { output_dir: dir.to_path_buf(), ..Default::default() };
        cfg.data.train_size = 24;
        cfg.data.test_size = 8;
        cfg.data.classes = 4;
        cfg.data.image_size = 16;
        cfg.train.epochs = 1;
        cfg.train.batch_size = 8;
        cfg.adversarial.n_critic = 1;
        cfg.attack.epochs = 1;
        cfg.attack.critic_epochs = 1;
        cfg.attack.levels = 2;
        cfg.attack.base_width = 2;
        cfg.attack.grid = 8;
        cfg
    }

    #[test]
    fn run_directory_is_complete() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let out = run_train(&cfg, 5).unwrap();
        assert!((0.0..=100.0).contains(&out.test_error));
        let log = std::fs::read_to_string(&out.log).unwrap();
        assert_eq!(log.lines().next().unwrap(), crate::adversarial::CSV_HEADER);
        assert_eq!(log.lines().count(), 1 + 3);
        let echo = ExperimentConfig::load(&dir.path().join(crate::config::ECHO_FILE)).unwrap();
        assert_eq!(echo.seed, Some(5));
        assert_eq!(echo.data, cfg.data);
        let (report, _, _) = run_attack_experiment(&cfg, &out.checkpoint, Strategy::DirectDecode, 5).unwrap();
        assert_eq!(report.n_samples, 8);
        assert!(dir.path().join(REPORT_CSV_FILE).exists() && dir.path().join(REPORT_TEXT_FILE).exists());
        let err = run_eval(&cfg, &out.checkpoint, 5).unwrap();
        assert!((0.0..=100.0).contains(&err));
    }

    #[test]
    fn zero_epochs_still_writes_a_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(dir.path());
        cfg.train.epochs = 0;
        let out = run_train(&cfg, 1).unwrap();
        let ck: Checkpoint<f32> = load_checkpoint(&out.checkpoint).unwrap();
        assert_eq!(ck.step, 0);
    }

    #[test]
    fn baseline_run_and_plaintext_attack() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let out = run_train_baseline(&cfg, Variant::Noisy { gamma: 0.5 }, 2).unwrap();
        let ck: Checkpoint<f32> = load_checkpoint(&out.checkpoint).unwrap();
        assert_eq!(ck.model.net.variant, Variant::Noisy { gamma: 0.5 });
        let (report, path) = run_export_recon(&cfg, &out.checkpoint, Strategy::Plaintext, 3, 2).unwrap();
        assert!(report.angle_error.is_none());
        assert!(std::fs::read(path).unwrap().starts_with(b"P6\n"));
        assert!(run_attack_experiment(&cfg, &out.checkpoint, Strategy::DirectDecode, 2).is_err());
        assert!(run_train_baseline(&cfg, Variant::Complex, 2).is_err());
    }
}

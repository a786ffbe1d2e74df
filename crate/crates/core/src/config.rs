//! Experiment configuration: a sectioned TOML file, validated on load and
//! echoed into every run directory.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adversarial::AdvOptions;
use crate::attack::AttackConfig;
use crate::data::{load_cifar, synth_dataset, Dataset, Split};
use crate::error::{Error, Result};
use crate::layers::DeltaMode;
use crate::network::{Arch, Variant};

/// Environment variable consulted for the seed when neither the command
/// line nor the config file sets one.
pub const SEED_ENV: &str = "PHASEFORT_SEED";

/// File name of the effective-config echo inside a run directory.
pub const ECHO_FILE: &str = "config.toml";

/// δ scaling for the processing stack: the architecture's own choice, a
/// per-channel running mean modulus, or a fixed constant.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum DeltaChoice {
    #[default]
    Default,
    Channelwise,
    Fixed(f64),
}

impl DeltaChoice {
    pub fn mode(self) -> Option<DeltaMode> {
        match self {
            DeltaChoice::Default => None,
            DeltaChoice::Channelwise => Some(DeltaMode::Channelwise),
            DeltaChoice::Fixed(c) => Some(DeltaMode::Fixed(c)),
        }
    }
}

impl fmt::Display for DeltaChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DeltaChoice::Default => write!(f, "default"),
            DeltaChoice::Channelwise => write!(f, "channelwise"),
            DeltaChoice::Fixed(c) => write!(f, "fixed:{c}"),
        }
    }
}

impl FromStr for DeltaChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "default" => Ok(DeltaChoice::Default),
            "channelwise" => Ok(DeltaChoice::Channelwise),
            _ => {
                let c = s
                    .strip_prefix("fixed:")
                    .and_then(|c| c.parse::<f64>().ok())
                    .ok_or_else(|| Error::Config(format!("delta must be default, channelwise or fixed:<c>, got {s:?}")))?;
                if !(c > 0.0 && c.is_finite()) {
                    return Err(Error::Config(format!("fixed delta constant must be positive, got {c}")));
                }
                Ok(DeltaChoice::Fixed(c))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// `synth` or `cifar`.
    pub source: String,
    /// CIFAR-10 binary directory or file (cifar only).
    pub path: Option<PathBuf>,
    /// Items kept from each split (0 keeps everything for cifar).
    pub train_size: usize,
    pub test_size: usize,
    /// Synthetic data only; cifar always has 10 classes of 32×32 images.
    pub classes: usize,
    pub image_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { source: "synth".into(), path: None, train_size: 1000, test_size: 300, classes: 10, image_size: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Cosine learning-rate annealing over the run.
    pub cosine: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let o = AdvOptions::default();
        Self { epochs: 3, batch_size: 32, lr: o.lr, momentum: o.momentum, weight_decay: o.weight_decay, cosine: o.cosine }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdversarialConfig {
    pub k: usize,
    pub lambda_adv: f64,
    pub theta_min: f64,
    pub n_critic: usize,
    pub c_clip: f64,
    pub critic_lr: f64,
    pub critic_width: usize,
    /// `default`, `channelwise` or `fixed:<c>`.
    pub delta: String,
}

impl Default for AdversarialConfig {
    fn default() -> Self {
        let o = AdvOptions::default();
        Self {
            k: o.k,
            lambda_adv: o.lambda_adv,
            theta_min: o.theta_min,
            n_critic: o.n_critic,
            c_clip: o.c_clip,
            critic_lr: o.critic_lr,
            critic_width: o.critic_width,
            delta: "default".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    /// `original`, `additional_layers` or `noisy:<γ>`.
    pub variant: String,
    pub gamma_presets: Vec<f64>,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self { variant: "original".into(), gamma_presets: vec![0.2, 0.5, 1.0] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    pub base_width: usize,
    pub levels: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub grid: usize,
    pub critic_width: usize,
    pub critic_epochs: usize,
    pub critic_lr: f64,
    pub critic_clip: f64,
}

impl Default for AttackSection {
    fn default() -> Self {
        let a = AttackConfig::default();
        Self {
            base_width: a.base_width,
            levels: a.levels,
            epochs: a.epochs,
            batch_size: a.batch_size,
            lr: a.lr,
            grid: a.grid,
            critic_width: a.critic_width,
            critic_epochs: a.critic_epochs,
            critic_lr: a.critic_lr,
            critic_clip: a.critic_clip,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub arch: String,
    pub seed: Option<u64>,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub adversarial: AdversarialConfig,
    pub baseline: BaselineConfig,
    pub attack: AttackSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            arch: "lenet".into(),
            seed: None,
            output_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            adversarial: AdversarialConfig::default(),
            baseline: BaselineConfig::default(),
            attack: AttackSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// TOML stored inside checkpoints: the effective config minus the output
    /// directory, so identical runs in different places give identical bytes.
    pub fn snapshot(&self) -> Result<String> {
        Self { output_dir: PathBuf::new(), ..self.clone() }.to_toml()
    }

    /// Writes the effective config to `dir/config.toml`.
    pub fn echo(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(ECHO_FILE);
        std::fs::write(&path, self.to_toml()?)?;
        Ok(path)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        self.arch()?;
        self.variant()?;
        self.delta()?;
        match self.data.source.as_str() {
            "synth" => {
                if self.data.classes < 2 || self.data.train_size < self.data.classes || self.data.test_size < 1 {
                    return bad(format!(
                        "synthetic data needs classes >= 2 and train_size >= classes (classes {}, train {}, test {})",
                        self.data.classes, self.data.train_size, self.data.test_size
                    ));
                }
            }
            "cifar" => {
                if self.data.path.is_none() {
                    return bad("data.source = \"cifar\" needs data.path".into());
                }
            }
            other => return bad(format!("data.source must be synth or cifar, got {other:?}")),
        }
        if self.train.batch_size < 2 {
            return bad(format!("train.batch_size must be >= 2, got {}", self.train.batch_size));
        }
        if !(self.train.lr > 0.0) || !(0.0..1.0).contains(&self.train.momentum) || self.train.weight_decay < 0.0 {
            return bad("train.lr must be > 0, momentum in [0, 1) and weight_decay >= 0".into());
        }
        let a = &self.adversarial;
        if a.k < 2 {
            return bad(format!("adversarial.k must be >= 2, got {}", a.k));
        }
        if !(a.theta_min > 0.0 && a.theta_min < std::f64::consts::PI) {
            return bad(format!("adversarial.theta_min must lie in (0, π), got {}", a.theta_min));
        }
        if a.lambda_adv < 0.0 || !(a.c_clip > 0.0) || !(a.critic_lr > 0.0) || a.critic_width == 0 {
            return bad("adversarial: lambda_adv >= 0, c_clip > 0, critic_lr > 0, critic_width >= 1".into());
        }
        if self.baseline.gamma_presets.iter().any(|g| !(*g >= 0.0)) {
            return bad("baseline.gamma_presets must be >= 0".into());
        }
        let t = &self.attack;
        if t.grid < 8 || t.levels == 0 || t.base_width == 0 || t.batch_size == 0 || !(t.lr > 0.0) {
            return bad("attack: grid >= 8, levels, base_width, batch_size >= 1, lr > 0".into());
        }
        Ok(())
    }

    pub fn arch(&self) -> Result<Arch> {
        self.arch.parse().map_err(|e: Error| Error::Config(format!("arch: {e}")))
    }

    pub fn variant(&self) -> Result<Variant> {
        let v: Variant = self.baseline.variant.parse().map_err(|e: Error| Error::Config(format!("baseline.variant: {e}")))?;
        if v.is_complex() {
            return Err(Error::Config("baseline.variant must be a real baseline".into()));
        }
        Ok(v)
    }

    pub fn delta(&self) -> Result<DeltaChoice> {
        self.adversarial.delta.parse()
    }

    /// Seed precedence: explicit override, then the config file, then
    /// `PHASEFORT_SEED`, then 0.
    pub fn resolve_seed(&self, cli: Option<u64>) -> Result<u64> {
        if let Some(s) = cli.or(self.seed) {
            return Ok(s);
        }
        match std::env::var(SEED_ENV) {
            Ok(v) => v.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
            Err(_) => Ok(0),
        }
    }

    pub fn adv_options(&self) -> AdvOptions {
        let a = &self.adversarial;
        AdvOptions {
            lambda_adv: a.lambda_adv,
            k: a.k,
            theta_min: a.theta_min,
            n_critic: a.n_critic,
            c_clip: a.c_clip,
            critic_lr: a.critic_lr,
            critic_width: a.critic_width,
            lr: self.train.lr,
            momentum: self.train.momentum,
            weight_decay: self.train.weight_decay,
            cosine: self.train.cosine,
        }
    }

    pub fn attack_config(&self) -> AttackConfig {
        let t = &self.attack;
        AttackConfig {
            base_width: t.base_width,
            levels: t.levels,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            grid: t.grid,
            critic_width: t.critic_width,
            critic_epochs: t.critic_epochs,
            critic_lr: t.critic_lr,
            critic_clip: t.critic_clip,
            theta_min: self.adversarial.theta_min,
        }
    }

    /// Train and test splits. The synthetic splits derive from `seed`.
    pub fn datasets(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        let d = &self.data;
        match d.source.as_str() {
            "cifar" => {
                let path = d.path.as_deref().ok_or_else(|| Error::Config("missing data.path".into()))?;
                let keep = |ds: Dataset, n: usize| if n == 0 { Ok(ds) } else { ds.take(n) };
                Ok((keep(load_cifar(path, Split::Train)?, d.train_size)?, keep(load_cifar(path, Split::Test)?, d.test_size)?))
            }
            _ => Ok((
                synth_dataset(d.train_size, d.classes, d.image_size, seed, Split::Train)?,
                synth_dataset(d.test_size, d.classes, d.image_size, seed, Split::Test)?,
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
        let mut seeded = cfg.clone();
        seeded.seed = Some(7);
        seeded.data.path = Some("x/y".into());
        assert_eq!(ExperimentConfig::from_toml_str(&seeded.to_toml().unwrap()).unwrap(), seeded);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml_str("arhc = \"lenet\"").is_err());
        let err = ExperimentConfig::from_toml_str("[train]\nepochz = 3").unwrap_err().to_string();
        assert!(err.contains("epochz"), "{err}");
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg = ExperimentConfig::from_toml_str("arch = \"resnet20-beta\"\n[adversarial]\nk = 4\n").unwrap();
        assert_eq!(cfg.adversarial.k, 4);
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!(cfg.arch().unwrap().to_string(), "resnet20-beta");
    }

    #[test]
    fn invalid_values_are_rejected() {
        for text in [
            "arch = \"resnet21-alpha\"",
            "[adversarial]\nk = 1",
            "[adversarial]\ndelta = \"fixed:-1\"",
            "[baseline]\nvariant = \"complex\"",
            "[data]\nsource = \"cifar\"",
            "[train]\nbatch_size = 1",
        ] {
            assert!(ExperimentConfig::from_toml_str(text).is_err(), "{text}");
        }
    }

    #[test]
    fn delta_choice_parses() {
        assert_eq!("fixed:0.5".parse::<DeltaChoice>().unwrap(), DeltaChoice::Fixed(0.5));
        assert_eq!("channelwise".parse::<DeltaChoice>().unwrap().mode(), Some(DeltaMode::Channelwise));
        assert_eq!(DeltaChoice::Fixed(2.0).to_string().parse::<DeltaChoice>().unwrap(), DeltaChoice::Fixed(2.0));
        assert!("fixed".parse::<DeltaChoice>().is_err());
    }

    #[test]
    fn explicit_seed_wins() {
        let mut cfg = ExperimentConfig { seed: Some(3), ..Default::default() };
        assert_eq!(cfg.resolve_seed(Some(9)).unwrap(), 9);
        assert_eq!(cfg.resolve_seed(None).unwrap(), 3);
        cfg.seed = None;
        assert_eq!(cfg.resolve_seed(Some(4)).unwrap(), 4);
    }

    #[test]
    fn echo_writes_parseable_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::default();
        let p = cfg.echo(dir.path()).unwrap();
        assert_eq!(ExperimentConfig::load(&p).unwrap(), cfg);
    }
}

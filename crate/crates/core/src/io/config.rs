//! Run configuration: a TOML file with `[model]`, `[train]`, `[data]`, `[md]`,
//! `[phonon]`, `[elastic]` and `[bench]` sections. Missing keys take their
//! defaults; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::potential::ModelConfig;
use crate::simulate::elastic::{NORMAL_STRAINS, SHEAR_STRAINS};
use crate::simulate::ElasticOptions;
use crate::training::{DatasetConfig, LennardJones, LossConfig, OptimizerConfig, TrainConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainSection,
    pub data: DataSection,
    pub md: MdSection,
    pub phonon: PhononSection,
    pub elastic: ElasticSection,
    pub bench: BenchSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub energy_weight: f64,
    pub force_weight: f64,
    pub stress_weight: f64,
    pub huber_delta: f64,
    pub max_lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: f64,
    pub warmup_factor: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub ema_decay: f64,
    pub seed: u64,
    /// Validation force MAE (meV/Å) at which training stops early.
    pub target_force_mae: Option<f64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let loss = LossConfig::default();
        let opt = OptimizerConfig::default();
        Self {
            energy_weight: loss.energy_weight,
            force_weight: loss.force_weight,
            stress_weight: loss.stress_weight,
            huber_delta: loss.huber_delta,
            max_lr: opt.max_lr,
            min_lr: opt.min_lr,
            warmup_epochs: opt.warmup_epochs,
            warmup_factor: opt.warmup_factor,
            weight_decay: opt.weight_decay,
            batch_size: opt.batch_size,
            epochs: opt.epochs,
            ema_decay: opt.ema_decay,
            seed: 0,
            target_force_mae: None,
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self) -> TrainConfig {
        TrainConfig {
            loss: LossConfig {
                energy_weight: self.energy_weight,
                force_weight: self.force_weight,
                stress_weight: self.stress_weight,
                huber_delta: self.huber_delta,
            },
            optimizer: OptimizerConfig {
                max_lr: self.max_lr,
                min_lr: self.min_lr,
                warmup_epochs: self.warmup_epochs,
                warmup_factor: self.warmup_factor,
                weight_decay: self.weight_decay,
                batch_size: self.batch_size,
                epochs: self.epochs,
                ema_decay: self.ema_decay,
            },
            seed: self.seed,
            target_force_mae: self.target_force_mae,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Extended-XYZ file of labeled frames; generated from the oracle when absent.
    pub path: Option<PathBuf>,
    pub n_samples: usize,
    pub seed: u64,
    pub species: Vec<u32>,
    /// Gaussian displacement width (Å).
    pub perturbation: f64,
    pub cell_jitter: f64,
    /// Oracle cutoff (Å).
    pub cutoff: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        let d = DatasetConfig::desk(500);
        Self {
            path: None,
            n_samples: d.n_samples,
            seed: 0,
            species: d.species,
            perturbation: d.perturbation,
            cell_jitter: d.cell_jitter,
            cutoff: d.oracle.cutoff,
        }
    }
}

impl DataSection {
    pub fn to_dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            n_samples: self.n_samples,
            species: self.species.clone(),
            perturbation: self.perturbation,
            cell_jitter: self.cell_jitter,
            oracle: LennardJones::argon_krypton(self.cutoff),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MdSection {
    /// fs
    pub dt: f64,
    pub steps: usize,
    /// Initial and bath temperature (K).
    pub temperature: f64,
    /// Langevin friction (1/fs); zero runs plain velocity Verlet.
    pub friction: f64,
    pub seed: u64,
    /// Steps between trajectory frames.
    pub interval: usize,
}

impl Default for MdSection {
    fn default() -> Self {
        Self {
            dt: 0.5,
            steps: 1000,
            temperature: 300.0,
            friction: 0.0,
            seed: 0,
            interval: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhononSection {
    pub supercell: [usize; 3],
    /// Å
    pub displacement: f64,
}

impl Default for PhononSection {
    fn default() -> Self {
        Self {
            supercell: [2, 2, 2],
            displacement: crate::simulate::phonon::DEFAULT_DISPLACEMENT,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ElasticSection {
    pub normal_strains: Vec<f64>,
    pub shear_strains: Vec<f64>,
}

impl Default for ElasticSection {
    fn default() -> Self {
        Self {
            normal_strains: NORMAL_STRAINS.to_vec(),
            shear_strains: SHEAR_STRAINS.to_vec(),
        }
    }
}

impl ElasticSection {
    pub fn to_options(&self) -> ElasticOptions {
        ElasticOptions {
            normal_strains: self.normal_strains.clone(),
            shear_strains: self.shear_strains.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    /// Any of `HIENet`, `EqvNet`, `InvNet`.
    pub variants: Vec<String>,
    /// Scalar widths of the size grid.
    pub sizes: Vec<usize>,
    pub batch_size: usize,
    /// Timed iterations per variant, after the warmup ones.
    pub iterations: usize,
    pub warmup: usize,
    /// Training epochs per variant for the validation loss.
    pub epochs: usize,
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            variants: vec!["HIENet".into(), "EqvNet".into(), "InvNet".into()],
            sizes: vec![32, 64],
            batch_size: 1,
            iterations: 50,
            warmup: 10,
            epochs: 5,
            n_samples: 100,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Every key with its default value.
    pub fn documented_defaults() -> String {
        toml::to_string(&Self::default()).expect("defaults serialize")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.to_train_config().validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.data.species.is_empty() || !(self.data.cutoff > 0.0) {
            return bad("data.species must be non-empty and data.cutoff positive".into());
        }
        if !(self.md.dt > 0.0) || self.md.interval == 0 || !(self.md.temperature >= 0.0) || !(self.md.friction >= 0.0) {
            return bad("md.dt and md.interval must be positive, md.temperature and md.friction non-negative".into());
        }
        if self.phonon.supercell.contains(&0) || !(self.phonon.displacement > 0.0) {
            return bad("phonon.supercell entries and phonon.displacement must be positive".into());
        }
        if self.elastic.normal_strains.iter().chain(&self.elastic.shear_strains).any(|&e| !(e > 0.0)) {
            return bad("elastic strains must be positive magnitudes".into());
        }
        if let Some(v) = self.bench.variants.iter().find(|v| !["HIENet", "EqvNet", "InvNet"].contains(&v.as_str())) {
            return bad(format!("bench.variants: unknown variant {v}"));
        }
        if self.bench.batch_size == 0 || self.bench.iterations == 0 || self.bench.sizes.contains(&0) {
            return bad("bench.batch_size, bench.iterations and bench.sizes must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let text = RunConfig::documented_defaults();
        assert_eq!(RunConfig::parse(&text).unwrap(), RunConfig::default());
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn default_hyperparameters() {
        let t = RunConfig::default().train.to_train_config();
        assert_eq!(t.loss, LossConfig::default());
        assert_eq!(t.optimizer.max_lr, 0.01);
        assert_eq!(t.optimizer.min_lr, 5e-6);
        assert_eq!(t.optimizer.ema_decay, 0.999);
        assert_eq!(RunConfig::default().model, ModelConfig::default());
    }

    #[test]
    fn unknown_keys_name_the_key() {
        let err = RunConfig::parse("[train]\nlearning_rate = 0.1\n").unwrap_err().to_string();
        assert!(err.contains("learning_rate"), "{err}");
        let err = RunConfig::parse("[optim]\nx = 1\n").unwrap_err().to_string();
        assert!(err.contains("optim"), "{err}");
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let c = RunConfig::parse("[model]\nhidden_dim = 32\nirreps = [32, 8]\n[md]\nsteps = 10\n").unwrap();
        assert_eq!(c.model.hidden_dim, 32);
        assert_eq!(c.model.cutoff, 5.0);
        assert_eq!(c.md.steps, 10);
        assert_eq!(c.md.dt, 0.5);
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::parse("[train]\nmin_lr = 1.0\n").is_err());
        assert!(RunConfig::parse("[phonon]\nsupercell = [0, 1, 1]\n").is_err());
        assert!(RunConfig::parse("[bench]\nvariants = [\"Foo\"]\n").is_err());
        assert!(RunConfig::parse("[md]\ndt = \"fast\"\n").is_err());
    }
}

//! Experiment configuration: one TOML file, overridable by command-line
//! flags, hashed so every artifact can state exactly what produced it.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use odfsep_core::fissile::FissileOptions;
use odfsep_core::mesh::{DENSE_MESH_PIXELS, NET_MESH_PIXELS};
use odfsep_core::mlp::{self, TrainConfig};
use odfsep_core::simulate::{DEFAULT_N_THREE, DEFAULT_N_TWO};
use odfsep_core::vmf::DEFAULT_KAPPA;

use crate::CliError;

/// Relative peak threshold of the watershed baseline: lobes whose peak is
/// below this fraction of the strongest peak are discarded as band-limit
/// sidelobes.
pub const DEFAULT_WATERSHED_REL_THRESHOLD: f64 = 0.2;

/// Smallest per-cell sample count that gives the sweep's medians and
/// interquartile ranges any meaning.
pub const MIN_SWEEP_SAMPLES_PER_CELL: usize = 30;

/// Whole-experiment configuration. Serialized form is the TOML config file;
/// the SHA-256 of the effective (post-override) JSON encoding is the config
/// hash stamped into every artifact.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed: datasets, sweeps, and training data derive from it.
    pub seed: u64,
    /// Spherical-harmonic band limit.
    pub lmax: usize,
    /// Two-fiber sample count for `simulate`.
    pub n_two: usize,
    /// Three-fiber sample count for `simulate`.
    pub n_three: usize,
    /// Directory receiving every artifact.
    pub output_dir: PathBuf,
    /// Worker threads for per-voxel work; never changes numeric output.
    pub threads: usize,
    pub fissile: FissileSection,
    pub watershed: WatershedSection,
    pub net: NetSection,
    pub train: TrainSection,
    pub sweep: SweepSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 42,
            lmax: 6,
            n_two: DEFAULT_N_TWO,
            n_three: DEFAULT_N_THREE,
            output_dir: PathBuf::from("out"),
            threads: 1,
            fissile: FissileSection::default(),
            watershed: WatershedSection::default(),
            net: NetSection::default(),
            train: TrainSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

/// Knobs of the constrained optimizer.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct FissileSection {
    pub max_fibers: usize,
    pub cost_threshold: f64,
    pub multistart: usize,
    pub max_inner_solves: usize,
    pub mesh_pixels: usize,
}

impl Default for FissileSection {
    fn default() -> Self {
        let d = FissileOptions::default();
        FissileSection {
            max_fibers: d.max_fibers,
            cost_threshold: d.cost_threshold,
            multistart: d.multistart,
            max_inner_solves: d.max_inner_solves,
            mesh_pixels: d.mesh_pixels,
        }
    }
}

impl FissileSection {
    pub fn to_options(&self, seed: u64) -> FissileOptions {
        FissileOptions {
            max_fibers: self.max_fibers,
            cost_threshold: self.cost_threshold,
            multistart: self.multistart,
            max_inner_solves: self.max_inner_solves,
            seed,
            mesh_pixels: self.mesh_pixels,
        }
    }
}

/// Knobs of the watershed baseline.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct WatershedSection {
    pub mesh_pixels: usize,
    pub rel_peak_threshold: f64,
}

impl Default for WatershedSection {
    fn default() -> Self {
        WatershedSection {
            mesh_pixels: DENSE_MESH_PIXELS,
            rel_peak_threshold: DEFAULT_WATERSHED_REL_THRESHOLD,
        }
    }
}

/// Network architecture and target-construction knobs.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct NetSection {
    pub mesh_pixels: usize,
    pub hidden_width: usize,
    pub kappa: f64,
    /// Include single-fiber voxels in the training mixture.
    pub include_single: bool,
}

impl Default for NetSection {
    fn default() -> Self {
        NetSection {
            mesh_pixels: NET_MESH_PIXELS,
            hidden_width: mlp::DEFAULT_HIDDEN_WIDTH,
            kappa: DEFAULT_KAPPA,
            include_single: true,
        }
    }
}

/// Optimizer schedule for `train`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub train_samples: usize,
    pub validation_samples: usize,
    pub validate_every: usize,
    pub patience: usize,
    /// Seed of the weight initialization (data seeds derive from the
    /// experiment seed).
    pub init_seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSection {
            learning_rate: d.learning_rate,
            batch_size: d.batch_size,
            train_samples: d.train_samples,
            validation_samples: d.validation_samples,
            validate_every: d.validate_every,
            patience: d.patience,
            init_seed: 0,
        }
    }
}

impl TrainSection {
    pub fn to_core(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            train_samples: self.train_samples,
            validation_samples: self.validation_samples,
            validate_every: self.validate_every,
            patience: self.patience,
            seed,
        }
    }

    /// Switches to the full published budget (5.12M training samples).
    pub fn apply_full_budget(&mut self) {
        self.train_samples = mlp::FULL_TRAIN_SAMPLES;
        self.validation_samples = mlp::FULL_VALIDATION_SAMPLES;
    }
}

/// Sensitivity-sweep grid: angular separation x smaller volume fraction.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub separations_deg: Vec<f64>,
    pub min_fractions: Vec<f64>,
    pub samples_per_cell: usize,
    pub methods: Vec<String>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            separations_deg: vec![20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0],
            min_fractions: vec![0.1, 0.2, 0.3, 0.4, 0.5],
            samples_per_cell: MIN_SWEEP_SAMPLES_PER_CELL,
            methods: vec!["watershed".into(), "fissile".into()],
        }
    }
}

impl ExperimentConfig {
    /// Loads the TOML file, or the defaults when no file is given.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(ExperimentConfig::default());
        };
        let text = fs::read_to_string(path).map_err(|e| {
            CliError::usage(format!("cannot read config {}: {e}", path.display()))
        })?;
        toml::from_str(&text)
            .map_err(|e| CliError::usage(format!("invalid config {}: {e}", path.display())))
    }

    /// Sanity checks shared by every subcommand.
    pub fn validate(&self) -> Result<(), CliError> {
        if self.lmax == 0 || self.lmax % 2 != 0 {
            return Err(CliError::usage(format!(
                "lmax must be a positive even order, got {}",
                self.lmax
            )));
        }
        if self.threads == 0 {
            return Err(CliError::usage("threads must be at least 1".into()));
        }
        if self.sweep.samples_per_cell < MIN_SWEEP_SAMPLES_PER_CELL {
            return Err(CliError::usage(format!(
                "sweep.samples_per_cell must be at least {MIN_SWEEP_SAMPLES_PER_CELL} \
                 for meaningful medians, got {}",
                self.sweep.samples_per_cell
            )));
        }
        Ok(())
    }

    /// SHA-256 of the effective configuration's canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        let mut hex = String::with_capacity(64);
        for byte in digest {
            hex.push_str(&format!("{byte:02x}"));
        }
        hex
    }

    /// Derived seed for the training-data stream.
    pub fn train_data_seed(&self) -> u64 {
        self.seed ^ 0x7452_4149_4e00_0001
    }

    /// Derived seed for the held-out validation stream.
    pub fn validation_seed(&self) -> u64 {
        self.seed ^ 0x5641_4c49_4400_0002
    }

    /// Derived seed for sweep sample generation.
    pub fn sweep_seed(&self) -> u64 {
        self.seed ^ 0x5357_4545_5000_0003
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn hash_changes_with_any_field() {
        let base = ExperimentConfig::default();
        let mut other = base.clone();
        other.seed += 1;
        assert_ne!(base.hash(), other.hash());
        assert_eq!(base.hash(), base.clone().hash());
        assert_eq!(base.hash().len(), 64);
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let cfg: ExperimentConfig =
            toml::from_str("seed = 7\n[sweep]\nsamples_per_cell = 31\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.sweep.samples_per_cell, 31);
        assert_eq!(cfg.lmax, 6);
        assert_eq!(cfg.n_two, 250);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<ExperimentConfig>("sead = 7\n").unwrap_err();
        assert!(err.to_string().contains("sead"));
    }

    #[test]
    fn validation_rejects_degenerate_settings() {
        let mut cfg = ExperimentConfig::default();
        cfg.lmax = 5;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.sweep.samples_per_cell = 5;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.threads = 0;
        assert!(cfg.validate().is_err());
        assert!(ExperimentConfig::default().validate().is_ok());
    }
}

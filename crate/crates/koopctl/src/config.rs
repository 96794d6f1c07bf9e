//! Run configuration, read from TOML. Every section is optional and falls
//! back to the defaults below; unknown keys are rejected.

use std::path::{Path, PathBuf};

use dkmpc_core::koopman::{Architecture, TrainConfig};
use dkmpc_core::plant::PlantConfig;
use dkmpc_core::tasks::TaskParams;
use dkmpc_core::STATE_DIM;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Global seed; every random stream of a run is derived from it.
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Subdirectory of `output_dir` for this run. Defaults to `seed-<seed>`.
    pub run_id: Option<String>,
    pub plant: PlantConfig,
    pub dataset: DatasetConfig,
    pub dk: DkConfig,
    pub rbf: RbfConfig,
    pub mpc: MpcSettings,
    pub tasks: TaskParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            output_dir: PathBuf::from("out"),
            run_id: None,
            plant: PlantConfig::default(),
            dataset: DatasetConfig::default(),
            dk: DkConfig::default(),
            rbf: RbfConfig::default(),
            mpc: MpcSettings::default(),
            tasks: TaskParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub episodes: usize,
    pub steps_per_episode: usize,
    /// Ticks each random pressure vector is held.
    pub hold_steps: usize,
    /// Train / validation / test fractions of the episodes.
    pub split: [f64; 3],
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            episodes: 100,
            steps_per_episode: 200,
            hold_steps: 4,
            split: [0.8, 0.1, 0.1],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DkConfig {
    pub architecture: Architecture,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RbfConfig {
    pub centers: usize,
}

impl Default for RbfConfig {
    fn default() -> Self {
        RbfConfig { centers: 100 }
    }
}

/// How the deep Koopman controller weights latent deviations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StateWeight {
    /// `q·CᵀC + q·ε·I` with `C` the latent-to-state readout over the train split.
    #[default]
    Readout,
    /// `q·I`.
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcSettings {
    pub horizon: usize,
    pub q: f64,
    pub r: f64,
    pub dk_state_weight: StateWeight,
    /// `ε` of the readout weight.
    pub readout_eps: f64,
    pub solver_tol: f64,
    pub solver_max_iters: usize,
}

impl Default for MpcSettings {
    fn default() -> Self {
        MpcSettings {
            horizon: 10,
            q: 100.0,
            r: 0.01,
            dk_state_weight: StateWeight::Readout,
            readout_eps: 1e-8,
            solver_tol: 1e-6,
            solver_max_iters: 5000,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let config: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::Config(m));
        self.plant.validate().map_err(core_config)?;
        self.dk.train.validate().map_err(core_config)?;
        self.tasks.validate().map_err(core_config)?;

        let d = &self.dataset;
        if d.episodes < 3 || d.hold_steps == 0 {
            return bad("dataset needs at least 3 episodes and hold_steps >= 1".into());
        }
        if d.steps_per_episode < self.dk.train.horizon {
            return bad(format!(
                "dataset.steps_per_episode ({}) is shorter than the prediction horizon ({})",
                d.steps_per_episode, self.dk.train.horizon
            ));
        }
        if d.split.iter().any(|f| !(*f > 0.0)) || (d.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("dataset.split must be positive and sum to 1, got {:?}", d.split));
        }

        let enc = &self.dk.architecture.encoder_widths;
        let dec = &self.dk.architecture.decoder_widths;
        if enc.len() < 2 || dec.len() < 2 || enc.contains(&0) || dec.contains(&0) {
            return bad("dk.architecture widths need at least two positive entries".into());
        }
        if enc[0] != STATE_DIM || dec[dec.len() - 1] != STATE_DIM || enc[enc.len() - 1] != dec[0] {
            return bad(format!(
                "dk.architecture must map {STATE_DIM} -> n -> {STATE_DIM}, got encoder {enc:?} and decoder {dec:?}"
            ));
        }
        if self.rbf.centers == 0 {
            return bad("rbf.centers must be at least 1".into());
        }

        let m = &self.mpc;
        if m.horizon == 0 {
            return bad("mpc.horizon must be at least 1".into());
        }
        if !(m.q > 0.0) || !(m.r >= 0.0) || !m.q.is_finite() || !m.r.is_finite() {
            return bad("mpc.q must be positive and mpc.r non-negative".into());
        }
        if !(m.readout_eps >= 0.0) || !(m.solver_tol > 0.0) || m.solver_max_iters == 0 {
            return bad("mpc.readout_eps, solver_tol and solver_max_iters are out of range".into());
        }
        if let Some(id) = &self.run_id {
            if id.is_empty() || id.contains(['/', '\\']) || id == "." || id == ".." {
                return bad(format!("run_id {id:?} is not a plain directory name"));
            }
        }
        Ok(())
    }

    pub fn run_dir(&self) -> PathBuf {
        let id = self.run_id.clone().unwrap_or_else(|| format!("seed-{}", self.seed));
        self.output_dir.join(id)
    }

    /// Training settings with the shuffle seed derived from the run seed.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.seed, Stream::Shuffle),
            ..self.dk.train.clone()
        }
    }
}

fn core_config(e: dkmpc_core::Error) -> CliError {
    CliError::Config(e.to_string())
}

/// Independent random streams of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Collect,
    Split,
    Init,
    Shuffle,
    Centers,
    Track,
}

/// SplitMix64 of the run seed and the stream index.
pub fn derive_seed(seed: u64, stream: Stream) -> u64 {
    let mut z = seed ^ (stream as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

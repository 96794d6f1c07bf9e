//! The experiment steps behind each subcommand. Artifacts live under the run
//! directory:
//!
//! ```text
//! dataset.csv
//! checkpoint_dk.bin  checkpoint_rbf.bin  losses.csv
//! track_<controller>_<task>.csv  report_<controller>_<task>.json
//! comparison.json  comparison.txt
//! ```
//!
//! plus a `.meta.json` sidecar with timings next to each of them.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::{Duration, Instant};

use dkmpc_core::baseline::{edmd_fit, kmpc_controller, normalized_state_box, state_block_weight, EdmdModel, Lifting, RbfLifting};
use dkmpc_core::data::{collect_random_episodes, extract_windows, fit_stats_over, split_dataset, EpisodeDataset, Split};
use dkmpc_core::koopman::{train, KoopmanModel, TrainOutcome};
use dkmpc_core::mpc::{readout_weight, run_tracking, LiftedModel, MpcConfig, MpcController, TrackingLog};
use dkmpc_core::plant::SoftArm;
use dkmpc_core::tasks::{make_reference, Task, TrackingReport};
use dkmpc_core::State;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{derive_seed, RunConfig, StateWeight, Stream};
use crate::error::{CliError, CliResult};
use crate::io;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Controller {
    Dk,
    Rbf,
}

impl Controller {
    pub const ALL: [Controller; 2] = [Controller::Dk, Controller::Rbf];

    pub fn label(self) -> &'static str {
        match self {
            Controller::Dk => "dk",
            Controller::Rbf => "rbf",
        }
    }

    /// Name used in comparison tables.
    pub fn method(self) -> &'static str {
        match self {
            Controller::Dk => "DK-MPC",
            Controller::Rbf => "K-MPC",
        }
    }
}

impl fmt::Display for Controller {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Controller {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "dk" => Ok(Controller::Dk),
            "rbf" => Ok(Controller::Rbf),
            _ => Err(format!("unknown controller {s:?} (expected dk or rbf)")),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(config: &RunConfig) -> Self {
        RunPaths { dir: config.run_dir() }
    }
    pub fn dataset(&self) -> PathBuf {
        self.dir.join("dataset.csv")
    }
    pub fn checkpoint(&self, c: Controller) -> PathBuf {
        self.dir.join(format!("checkpoint_{c}.bin"))
    }
    pub fn losses(&self) -> PathBuf {
        self.dir.join("losses.csv")
    }
    pub fn track(&self, c: Controller, task: Task) -> PathBuf {
        self.dir.join(format!("track_{c}_{}.csv", task.label()))
    }
    pub fn report(&self, c: Controller, task: Task) -> PathBuf {
        self.dir.join(format!("report_{c}_{}.json", task.label()))
    }
    pub fn comparison_json(&self) -> PathBuf {
        self.dir.join("comparison.json")
    }
    pub fn comparison_txt(&self) -> PathBuf {
        self.dir.join("comparison.txt")
    }
}

/// Random-actuation episodes on the configured plant, split by episode.
pub fn collect(config: &RunConfig) -> CliResult<EpisodeDataset> {
    let d = &config.dataset;
    let mut arm = SoftArm::new(config.plant.clone())?;
    let ds = collect_random_episodes(
        &mut arm,
        d.episodes,
        d.steps_per_episode,
        derive_seed(config.seed, Stream::Collect),
        d.hold_steps,
    )?;
    Ok(split_dataset(&ds, d.split, derive_seed(config.seed, Stream::Split))?)
}

pub fn train_dk(config: &RunConfig, ds: &EpisodeDataset) -> CliResult<TrainOutcome> {
    let stats = fit_stats_over(ds.tuples_in(Split::Train))?;
    let tc = config.train_config();
    let train_w = extract_windows(ds, Split::Train, tc.horizon, &stats)?;
    let val_w = extract_windows(ds, Split::Val, tc.horizon, &stats)?;
    let model = KoopmanModel::new(&config.dk.architecture, stats, derive_seed(config.seed, Stream::Init))?;
    Ok(train(model, &train_w, &val_w, &tc)?)
}

pub fn train_rbf(config: &RunConfig, ds: &EpisodeDataset) -> CliResult<EdmdModel> {
    let stats = fit_stats_over(ds.tuples_in(Split::Train))?;
    let (lo, hi) = normalized_state_box(ds, &stats)
        .ok_or_else(|| CliError::Config("training split is empty; cannot place RBF centers".into()))?;
    let lifting = RbfLifting::sample(config.rbf.centers, &lo, &hi, derive_seed(config.seed, Stream::Centers))?;
    Ok(edmd_fit(ds, Lifting::Rbf(lifting), &stats)?)
}

fn base_mpc(config: &RunConfig, model: &impl LiftedModel) -> MpcConfig {
    let m = &config.mpc;
    let mut c = MpcConfig::diagonal(model.latent_dim(), m.horizon, m.q, m.r, model.stats());
    c.solver_tol = m.solver_tol;
    c.solver_max_iters = m.solver_max_iters;
    c
}

/// Normalized train-split states, the sample set of the readout weight.
fn train_states(ds: &EpisodeDataset, model: &impl LiftedModel) -> Vec<State> {
    ds.episodes_in(Split::Train)
        .flat_map(|e| e.states())
        .map(|x| model.stats().normalize_state(&x))
        .collect()
}

pub fn dk_controller(config: &RunConfig, model: KoopmanModel, ds: &EpisodeDataset) -> CliResult<MpcController<KoopmanModel>> {
    let mut mpc = base_mpc(config, &model);
    if config.mpc.dk_state_weight == StateWeight::Readout {
        mpc.q = readout_weight(&model, &train_states(ds, &model), config.mpc.q, config.mpc.readout_eps)?;
    }
    Ok(MpcController::new(model, mpc)?)
}

pub fn rbf_controller(config: &RunConfig, model: EdmdModel) -> CliResult<MpcController<EdmdModel>> {
    let mut mpc = base_mpc(config, &model);
    mpc.q = state_block_weight(model.latent_dim(), config.mpc.q);
    Ok(kmpc_controller(model, mpc)?)
}

/// Closed-loop run of one task; the plant starts from rest.
pub fn track<M: LiftedModel>(
    config: &RunConfig,
    controller: &mut MpcController<M>,
    label: Controller,
    task: Task,
) -> CliResult<(TrackingLog, TrackingReport)> {
    let path = make_reference(task, &config.tasks, &config.plant)?;
    let mut arm = SoftArm::new(config.plant.clone())?;
    let log = run_tracking(controller, &mut arm, &path.points, path.dt, derive_seed(config.seed, Stream::Track))
        .map_err(|(_, e)| CliError::Core(e))?;
    let report = TrackingReport::from_log(label.label(), task, config.seed, &log, &config.tasks)?;
    Ok((log, report))
}

/// Timed closure whose result is written with a runtime sidecar.
fn timed<T>(f: impl FnOnce() -> CliResult<T>) -> CliResult<(T, Duration)> {
    let start = Instant::now();
    let v = f()?;
    Ok((v, start.elapsed()))
}

pub fn cmd_collect(config: &RunConfig) -> CliResult<PathBuf> {
    let paths = RunPaths::new(config);
    let (ds, took) = timed(|| collect(config))?;
    let out = paths.dataset();
    io::write_dataset(&out, &ds)?;
    io::write_meta(&out, took)?;
    Ok(out)
}

fn load_dataset(paths: &RunPaths) -> CliResult<EpisodeDataset> {
    io::read_dataset(&paths.dataset())
}

pub fn cmd_train(config: &RunConfig, families: &[Controller]) -> CliResult<Vec<PathBuf>> {
    let paths = RunPaths::new(config);
    let ds = load_dataset(&paths)?;
    let mut written = Vec::new();
    for &c in families {
        let out = paths.checkpoint(c);
        match c {
            Controller::Dk => {
                let (outcome, took) = timed(|| train_dk(config, &ds))?;
                Checkpoint::Dk(outcome.model).save(&out)?;
                io::write_meta(&out, took)?;
                io::write_file(&paths.losses(), &io::losses_csv(&outcome.history))?;
                written.push(paths.losses());
            }
            Controller::Rbf => {
                let (model, took) = timed(|| train_rbf(config, &ds))?;
                Checkpoint::Edmd(model).save(&out)?;
                io::write_meta(&out, took)?;
            }
        }
        written.push(out);
    }
    Ok(written)
}

fn load_checkpoint(paths: &RunPaths, c: Controller) -> CliResult<Checkpoint> {
    let path = paths.checkpoint(c);
    let ckpt = Checkpoint::load(&path)?;
    if ckpt.family() != c.label() {
        return Err(CliError::format(path, format!("holds a {} model, expected {c}", ckpt.family())));
    }
    Ok(ckpt)
}

/// Tracks every `(controller, task)` pair, controllers outermost, and writes
/// the log and report of each.
pub fn cmd_track(config: &RunConfig, controllers: &[Controller], tasks: &[Task]) -> CliResult<Vec<TrackingReport>> {
    let paths = RunPaths::new(config);
    let mut reports = Vec::new();
    for &c in controllers {
        let mut ctrl = match load_checkpoint(&paths, c)? {
            Checkpoint::Dk(m) => Planner::Dk(dk_controller(config, m, &load_dataset(&paths)?)?),
            Checkpoint::Edmd(m) => Planner::Rbf(rbf_controller(config, m)?),
        };
        for &task in tasks {
            let ((log, report), took) = timed(|| match &mut ctrl {
                Planner::Dk(k) => track(config, k, c, task),
                Planner::Rbf(k) => track(config, k, c, task),
            })?;
            io::write_file(&paths.track(c, task), &io::tracking_csv(&log))?;
            let out = paths.report(c, task);
            io::write_json(&out, &report)?;
            io::write_meta(&out, took)?;
            reports.push(report);
        }
    }
    Ok(reports)
}

enum Planner {
    Dk(MpcController<KoopmanModel>),
    Rbf(MpcController<EdmdModel>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: String,
    pub controller: Controller,
    pub task: Task,
    #[serde(rename = "Avg. Err.")]
    pub avg_error: f64,
    pub max_error: f64,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub seed: u64,
    /// Error unit of every row.
    pub unit: String,
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn from_reports(seed: u64, reports: &[TrackingReport]) -> Self {
        let mut rows = Vec::new();
        for c in Controller::ALL {
            for task in Task::ALL {
                for r in reports.iter().filter(|r| r.controller == c.label() && r.task == task) {
                    rows.push(ComparisonRow {
                        method: c.method().into(),
                        controller: c,
                        task,
                        avg_error: r.avg_error,
                        max_error: r.max_error,
                        steps: r.errors.len(),
                    });
                }
            }
        }
        Comparison {
            seed,
            unit: "mm".into(),
            rows,
        }
    }

    pub fn find(&self, c: Controller, task: Task) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.controller == c && r.task == task)
    }

    /// Aligned text table, one row per (method, task).
    pub fn to_table(&self) -> String {
        let mut s = format!("{:<8}  {:<6}  {:>15}  {:>15}\n", "Method", "Task", "Avg. Err. (mm)", "Max. Err. (mm)");
        s.push_str(&format!("{}\n", "-".repeat(50)));
        for r in &self.rows {
            s.push_str(&format!("{:<8}  {:<6}  {:>15.3}  {:>15.3}\n", r.method, r.task.label(), r.avg_error, r.max_error));
        }
        s
    }
}

/// Reads every report of the run and writes `comparison.json` and
/// `comparison.txt`.
pub fn cmd_report(config: &RunConfig) -> CliResult<Comparison> {
    let paths = RunPaths::new(config);
    let mut reports = Vec::new();
    for c in Controller::ALL {
        for task in Task::ALL {
            let p = paths.report(c, task);
            if p.exists() {
                reports.push(io::read_json::<TrackingReport>(&p)?);
            }
        }
    }
    if reports.is_empty() {
        return Err(CliError::MissingFile(paths.dir.join("report_<controller>_<task>.json")));
    }
    let cmp = Comparison::from_reports(config.seed, &reports);
    io::write_json(&paths.comparison_json(), &cmp)?;
    io::write_file(&paths.comparison_txt(), cmp.to_table().as_bytes())?;
    Ok(cmp)
}

/// Collect, train both families, track every task with both controllers and
/// write the comparison.
pub fn run_all(config: &RunConfig) -> CliResult<Comparison> {
    cmd_collect(config)?;
    cmd_train(config, &Controller::ALL)?;
    cmd_track(config, &Controller::ALL, &Task::ALL)?;
    cmd_report(config)
}


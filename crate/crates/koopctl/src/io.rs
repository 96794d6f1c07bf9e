//! CSV and JSON artifacts. Floats are written in shortest round-trip form,
//! so reading a file back reproduces every value exactly.

use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use dkmpc_core::data::{Episode, EpisodeDataset, Split, TransitionTuple};
use dkmpc_core::koopman::EpochRecord;
use dkmpc_core::mpc::{TrackingLog, TrackingRow};
use dkmpc_core::{Control, State, CONTROL_DIM, STATE_DIM};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{CliError, CliResult};

pub fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn fmt(v: f64) -> String {
    format!("{v:?}")
}

fn csv_bytes(header: &[String], rows: impl Iterator<Item = Vec<String>>) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory csv");
    for r in rows {
        w.write_record(&r).expect("in-memory csv");
    }
    w.into_inner().expect("in-memory csv")
}

fn read_csv(path: &Path) -> CliResult<(csv::StringRecord, Vec<csv::StringRecord>)> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    let mut r = csv::Reader::from_reader(bytes.as_slice());
    let header = r.headers().map_err(|e| CliError::format(path, e.to_string()))?.clone();
    let rows = r
        .records()
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::format(path, e.to_string()))?;
    Ok((header, rows))
}

fn indexed(prefix: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    (0..n).map(move |i| format!("{prefix}{i}"))
}

fn split_label(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

fn parse_split(s: &str) -> Option<Split> {
    match s {
        "train" => Some(Split::Train),
        "val" => Some(Split::Val),
        "test" => Some(Split::Test),
        _ => None,
    }
}

fn dataset_header() -> Vec<String> {
    let mut h = vec!["episode".to_string(), "split".into(), "step".into()];
    h.extend(indexed("x", STATE_DIM));
    h.extend(indexed("u", CONTROL_DIM));
    h.extend(indexed("next_x", STATE_DIM));
    h
}

/// One row per transition tuple: episode, split, step, x, u (kPa), next x (mm).
pub fn dataset_csv(ds: &EpisodeDataset) -> Vec<u8> {
    let rows = ds.episodes.iter().flat_map(|ep| {
        ep.tuples.iter().map(move |t| {
            let mut r = vec![t.episode.to_string(), split_label(ep.split).into(), t.step.to_string()];
            r.extend(t.state.iter().chain(&t.control).chain(&t.next_state).map(|v| fmt(*v)));
            r
        })
    });
    csv_bytes(&dataset_header(), rows)
}

pub fn write_dataset(path: &Path, ds: &EpisodeDataset) -> CliResult<()> {
    write_file(path, &dataset_csv(ds))
}

pub fn read_dataset(path: &Path) -> CliResult<EpisodeDataset> {
    let (header, rows) = read_csv(path)?;
    let expect = dataset_header();
    if header.iter().ne(expect.iter().map(String::as_str)) {
        return Err(CliError::format(path, "unexpected dataset header"));
    }
    let mut ds = EpisodeDataset::default();
    for (i, row) in rows.iter().enumerate() {
        let line = i + 2;
        let bad = |what: &str| CliError::format(path, format!("line {line}: bad {what}"));
        let episode: usize = row[0].parse().map_err(|_| bad("episode"))?;
        let split = parse_split(&row[1]).ok_or_else(|| bad("split"))?;
        let step: usize = row[2].parse().map_err(|_| bad("step"))?;
        let mut vals = [0.0; 2 * STATE_DIM + CONTROL_DIM];
        for (k, v) in vals.iter_mut().enumerate() {
            *v = row[3 + k].parse().map_err(|_| bad("number"))?;
        }
        let tuple = TransitionTuple {
            episode,
            step,
            state: vals[..STATE_DIM].try_into().unwrap(),
            control: vals[STATE_DIM..STATE_DIM + CONTROL_DIM].try_into().unwrap(),
            next_state: vals[STATE_DIM + CONTROL_DIM..].try_into().unwrap(),
        };
        match ds.episodes.last_mut() {
            Some(ep) if ep.id == episode => {
                if ep.split != split {
                    return Err(bad("split (changes inside an episode)"));
                }
                ep.tuples.push(tuple);
            }
            _ => ds.episodes.push(Episode {
                id: episode,
                split,
                tuples: vec![tuple],
            }),
        }
    }
    if !ds.is_chained() {
        return Err(CliError::format(path, "episodes are not chained (x_{k+1} of one row must equal x of the next)"));
    }
    Ok(ds)
}

pub fn losses_csv(history: &[EpochRecord]) -> Vec<u8> {
    let header: Vec<String> = ["epoch", "train_total", "train_recon", "train_pred", "train_linear", "train_reg", "val_total"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let rows = history.iter().map(|h| {
        vec![
            h.epoch.to_string(),
            fmt(h.train.total),
            fmt(h.train.recon),
            fmt(h.train.pred),
            fmt(h.train.linear),
            fmt(h.train.reg),
            h.val_total.map(fmt).unwrap_or_default(),
        ]
    });
    csv_bytes(&header, rows)
}

fn log_header() -> Vec<String> {
    let mut h = vec!["step".to_string(), "t".into()];
    h.extend(["x", "y", "z", "ref_x", "ref_y", "ref_z", "error"].map(String::from));
    h.extend(indexed("u", CONTROL_DIM));
    h.extend(["objective", "converged"].map(String::from));
    h
}

/// Closed-loop log: state, reference, error (mm), applied pressures (kPa).
pub fn tracking_csv(log: &TrackingLog) -> Vec<u8> {
    let rows = log.rows.iter().enumerate().map(|(k, r)| {
        let err = (0..STATE_DIM).map(|i| (r.state[i] - r.reference[i]).powi(2)).sum::<f64>().sqrt();
        let mut v = vec![k.to_string(), fmt(r.t)];
        v.extend(r.state.iter().chain(&r.reference).map(|x| fmt(*x)));
        v.push(fmt(err));
        v.extend(r.input.iter().map(|x| fmt(*x)));
        v.push(fmt(r.objective));
        v.push(r.converged.to_string());
        v
    });
    csv_bytes(&log_header(), rows)
}

pub fn read_tracking_log(path: &Path) -> CliResult<TrackingLog> {
    let (header, rows) = read_csv(path)?;
    if header.iter().ne(log_header().iter().map(String::as_str)) {
        return Err(CliError::format(path, "unexpected tracking log header"));
    }
    let mut log = TrackingLog::default();
    for (i, row) in rows.iter().enumerate() {
        let bad = || CliError::format(path, format!("line {}: bad value", i + 2));
        let num = |k: usize| row[k].parse::<f64>().map_err(|_| bad());
        let state: State = [num(2)?, num(3)?, num(4)?];
        let reference: State = [num(5)?, num(6)?, num(7)?];
        let mut input: Control = [0.0; CONTROL_DIM];
        for (j, u) in input.iter_mut().enumerate() {
            *u = num(9 + j)?;
        }
        log.rows.push(TrackingRow {
            t: num(1)?,
            state,
            reference,
            input,
            objective: num(9 + CONTROL_DIM)?,
            converged: row[10 + CONTROL_DIM].parse().map_err(|_| bad())?,
        });
    }
    Ok(log)
}

pub fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(value).expect("serializable artifact");
    s.push(b'\n');
    s
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    write_file(path, &json_bytes(value))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::format(path, e.to_string()))
}

/// `<artifact>.meta.json` next to `artifact`: wall-clock data that would
/// otherwise break byte-for-byte reproducibility of the artifact itself.
pub fn meta_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    artifact.with_file_name(name)
}

#[derive(Debug, Serialize, serde::Deserialize)]
pub struct Meta {
    pub artifact: String,
    pub runtime_s: f64,
    pub finished_unix_s: u64,
    pub koopctl_version: String,
}

pub fn write_meta(artifact: &Path, runtime: Duration) -> CliResult<()> {
    let meta = Meta {
        artifact: artifact.file_name().unwrap_or_default().to_string_lossy().into_owned(),
        runtime_s: runtime.as_secs_f64(),
        finished_unix_s: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        koopctl_version: env!("CARGO_PKG_VERSION").to_string(),
    };
    write_json(&meta_path(artifact), &meta)
}

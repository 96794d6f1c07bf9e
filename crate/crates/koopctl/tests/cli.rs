use std::path::Path;
use std::process::{Command, Output};

use dkmpc_core::tasks::{Task, TrackingReport};
use koopctl::io;
use koopctl::pipeline::{Comparison, Controller, RunPaths};
use koopctl::RunConfig;

fn koopctl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_koopctl")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Small enough to run the whole pipeline in a few seconds.
fn tiny_config(out: &Path) -> String {
    format!(
        r#"seed = 5
output_dir = "{}"
run_id = "tiny"

[dataset]
episodes = 10
steps_per_episode = 40

[dk.architecture]
encoder_widths = [3, 16, 6]
decoder_widths = [6, 16, 3]

[dk.train]
epochs = 3
batch_size = 32

[rbf]
centers = 12

[mpc]
horizon = 4
solver_max_iters = 500

[tasks]
circle_ticks = 30
letter_speed = 400.0
corner_dwell = 1
target_dwell = 4
"#,
        out.display()
    )
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("run.toml");
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn missing_checkpoint_exits_2_and_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config(&dir.path().join("out")));
    let o = koopctl(&["track", "--config", &cfg, "--controller", "rbf", "--task", "O"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("checkpoint_rbf.bin"), "{}", stderr(&o));
}

#[test]
fn bad_configs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[mpc]\nhorizon = 0\n");
    let o = koopctl(&["collect", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("horizon"), "{}", stderr(&o));

    let o = koopctl(&["collect", "--config", "/nonexistent/run.toml"]);
    assert_eq!(o.status.code(), Some(2));

    let cfg = write_config(dir.path(), "seed = \"x\"\n");
    assert_eq!(koopctl(&["collect", "--config", &cfg]).status.code(), Some(2));
}

#[test]
fn bad_arguments_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    for args in [
        vec!["track", "--config", cfg.as_str(), "--controller", "pid"],
        vec!["track", "--config", cfg.as_str(), "--task", "Q"],
        vec!["fly", "--config", cfg.as_str()],
        vec!["track"],
    ] {
        assert_eq!(koopctl(&args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn report_without_runs_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config(&dir.path().join("out")));
    assert_eq!(koopctl(&["report", "--config", &cfg]).status.code(), Some(2));
}

#[test]
fn tiny_pipeline_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let text = tiny_config(&dir.path().join("out"));
    let cfg = write_config(dir.path(), &text);
    for args in [
        vec!["collect", "--config", cfg.as_str()],
        vec!["train", "--config", cfg.as_str()],
        vec!["track", "--config", cfg.as_str()],
        vec!["targets", "--config", cfg.as_str()],
        vec!["report", "--config", cfg.as_str()],
    ] {
        let o = koopctl(&args);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
    }

    let config: RunConfig = toml::from_str(&text).unwrap();
    let paths = RunPaths::new(&config);
    assert!(paths.losses().is_file());
    assert!(io::meta_path(&paths.dataset()).is_file());
    let comparison: Comparison = io::read_json(&paths.comparison_json()).unwrap();
    assert_eq!(comparison.rows.len(), Controller::ALL.len() * Task::ALL.len());
    let table = std::fs::read_to_string(paths.comparison_txt()).unwrap();
    assert!(table.contains("Avg. Err. (mm)"));
    assert!(table.contains("DK-MPC") && table.contains("K-MPC"));

    for c in Controller::ALL {
        for task in Task::ALL {
            let report: TrackingReport = io::read_json(&paths.report(c, task)).unwrap();
            let log = io::read_tracking_log(&paths.track(c, task)).unwrap();
            assert_eq!(report.errors.len(), log.rows.len());
            let mean = report.errors.iter().sum::<f64>() / report.errors.len() as f64;
            assert!((report.avg_error - mean).abs() <= 1e-12 * mean.max(1.0));
            let row = comparison.find(c, task).unwrap();
            assert_eq!(row.avg_error, report.avg_error);
            if task == Task::Square {
                assert_eq!(report.dwell_end_errors.len(), 5);
            }
        }
    }

    // Same seed, new directory: every artifact except the timing sidecars
    // is byte-identical.
    let rerun = text.replace("run_id = \"tiny\"", "run_id = \"again\"");
    let cfg2 = write_config(dir.path(), &rerun);
    for cmd in ["collect", "train", "track", "targets", "report"] {
        assert!(koopctl(&[cmd, "--config", &cfg2]).status.success());
    }
    let again = RunPaths::new(&toml::from_str(&rerun).unwrap());
    let mut compared = 0;
    for entry in std::fs::read_dir(&paths.dir).unwrap() {
        let name = entry.unwrap().file_name();
        if name.to_string_lossy().ends_with(".meta.json") {
            continue;
        }
        let a = std::fs::read(paths.dir.join(&name)).unwrap();
        let b = std::fs::read(again.dir.join(&name)).unwrap();
        assert!(a == b, "{name:?} differs between runs");
        compared += 1;
    }
    assert!(compared >= 2 + 2 + 2 * 2 * Task::ALL.len());
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let text = tiny_config(&dir.path().join("out")).replace("run_id = \"tiny\"\n", "");
    let cfg = write_config(dir.path(), &text);
    let o = koopctl(&["collect", "--config", &cfg, "--seed", "77"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("out/seed-77/dataset.csv").is_file());
}

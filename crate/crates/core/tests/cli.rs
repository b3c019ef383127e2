use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

use sgkit::config::ExperimentConfig;
use sgkit::experiment::{EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_IO, PROBE_HEADER};

fn sgkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sgkit"))
        .args(args)
        .output()
        .expect("run sgkit")
}

fn out_dir(dir: &Path) -> String {
    format!("output.dir={}", dir.display())
}

const SMALL: [&str; 8] = [
    "--set", "model.n_rec=16",
    "--set", "task.n_train=40",
    "--set", "task.n_val=20",
    "--set", "train.epochs=1",
];

#[test]
fn empty_mask_reports_naive_values() {
    let dir = tempfile::tempdir().unwrap();
    let o = out_dir(dir.path());
    let out = sgkit(&["init-solve", "--set", &o, "--set", "init.mask=none"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("conditions: none"));
    for line in text.lines().skip(2) {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[1].parse::<f64>().unwrap(), 0.0);
        assert_eq!(cols[2].parse::<f64>().unwrap(), 1.0 / 64.0);
        assert_eq!((cols[3], cols[4]), ("1.000000e0", "1.000000e0"));
    }
    assert!(dir.path().join("init_solve.txt").exists());
}

#[test]
fn infeasible_solve_exits_with_its_own_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = sgkit(&["init-solve", "--set", &out_dir(dir.path())]);
    assert_eq!(out.status.code(), Some(EXIT_INFEASIBLE));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("false"), "{text}");
    assert!(String::from_utf8_lossy(&out.stderr).contains("infeasible"));
}

#[test]
fn bad_decay_is_a_config_error() {
    let out = sgkit(&["init-solve", "--set", "model.alpha=1.0"]);
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));
    let out = sgkit(&["train", "--set", "nonsense.key=1"]);
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));
    let out = sgkit(&["train", "--config", "/definitely/not/here.cfg"]);
    assert_eq!(out.status.code(), Some(EXIT_IO));
}

#[test]
fn missing_dataset_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = out_dir(dir.path());
    let out = sgkit(&["train", "--set", &o, "--set", "task.kind=events", "--set", "task.path=/no/such/events.txt"]);
    assert_eq!(out.status.code(), Some(EXIT_IO), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn train_echo_reloads_and_repeats_bytewise() {
    let dir = tempfile::tempdir().unwrap();
    let run = |sub: &str| {
        let o = out_dir(&dir.path().join(sub));
        let mut args = vec!["train", "--set", &o];
        args.extend_from_slice(&SMALL);
        let out = sgkit(&args);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        std::fs::read(dir.path().join(sub).join("history.csv")).unwrap()
    };
    assert_eq!(run("a"), run("b"));
    let echo = dir.path().join("a").join("config.txt");
    let cfg = ExperimentConfig::load(&echo).unwrap();
    assert_eq!(cfg.model.n_rec, 16);
    assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
    // the echo drives an identical run
    let o = out_dir(&dir.path().join("c"));
    let out = sgkit(&["train", "--config", echo.to_str().unwrap(), "--set", &o]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(
        std::fs::read(dir.path().join("c").join("history.csv")).unwrap(),
        std::fs::read(dir.path().join("a").join("history.csv")).unwrap()
    );
}

#[test]
fn one_epoch_at_desk_size_is_quick() {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let out = sgkit(&["train", "--set", &out_dir(dir.path()), "--set", "train.epochs=1"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(start.elapsed().as_secs_f64() < 60.0);
    let csv = std::fs::read_to_string(dir.path().join("history.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn probe_rows_cover_every_step_and_layer() {
    let dir = tempfile::tempdir().unwrap();
    let out = sgkit(&[
        "probe", "--set", &out_dir(dir.path()), "--set", "probe.steps=30", "--set", "probe.samples=2",
        "--set", "model.layers=3",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("probe.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(PROBE_HEADER));
    assert_eq!(lines.count(), 30 * 3);
}

#[test]
fn shape_sweep_has_one_row_per_shape_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let o = out_dir(dir.path());
    let mut args = vec![
        "sweep", "--set", &o, "--set", "sweep.axis=shape", "--set",
        "sweep.values=triangular,exponential,gaussian,dsigmoid,dfastsigmoid,rectangular,qpseudospike",
        "--set", "sweep.seeds=2", "--set", "task.steps=10",
    ];
    args.extend_from_slice(&SMALL);
    let out = sgkit(&args);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("sweep_shape.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 7 * 2);
    assert!(rows.iter().all(|r| r.ends_with(",ok") || r.ends_with(",failed")));
}

#[test]
fn encode_writes_a_readable_event_file() {
    let dir = tempfile::tempdir().unwrap();
    let o = out_dir(dir.path());
    let mut args = vec!["encode", "--set", &o];
    args.extend_from_slice(&SMALL);
    let out = sgkit(&args);
    assert_eq!(out.status.code(), Some(0));
    let data = sgkit::data::read_events_file(&dir.path().join("events.txt")).unwrap();
    assert_eq!(data.len(), 60);
}

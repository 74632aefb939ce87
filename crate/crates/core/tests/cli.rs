use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use semevo::io::{SnapshotReader, SnapshotWriter};

const SMALL: &str = r#"
run_id = "small"
seed = 4
[hyperparams]
n = 60
[world]
images = 40
[output]
checkpoints = [0, 20]
"#;

fn semevo(args: &[&str], env_seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_semevo"));
    cmd.args(args).env_remove("SEMEVO_SEED");
    if let Some(s) = env_seed {
        cmd.env("SEMEVO_SEED", s);
    }
    cmd.output().unwrap()
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn data_rows(csv: &Path) -> Vec<String> {
    fs::read_to_string(csv).unwrap().lines().skip(1).map(str::to_string).collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn repeated_runs_write_identical_metric_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(semevo(&["simulate", "--config", &cfg, "--out", s(&a)], None));
    ok(semevo(&["simulate", "--config", &cfg, "--out", s(&b)], None));
    for f in ["metrics.csv", "images.jsonl"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert!(a.join("timing.csv").exists());
}

#[test]
fn three_by_three_grid_gives_nine_rows_and_matching_cells() {
    let dir = tempfile::tempdir().unwrap();
    let grid = format!("{SMALL}\n[grid]\ntau_base = [0.6, 0.7, 0.72]\nalpha = [0.0, 0.2, 0.4]\n");
    let cfg = write_config(dir.path(), "g.toml", &grid);
    let out = dir.path().join("ablate");
    ok(semevo(&["ablate", "--config", &cfg, "--out", s(&out)], None));
    let rows = data_rows(&out.join("ablation.csv"));
    assert_eq!(rows.len(), 9);
    assert_eq!(data_rows(&out.join("ablation_timing.csv")).len(), 9);

    // The cell at the defaults (tau 0.7, alpha 0.2) equals a plain run.
    let plain = write_config(dir.path(), "p.toml", SMALL);
    let single = dir.path().join("single");
    ok(semevo(&["simulate", "--config", &plain, "--out", s(&single)], None));
    let row = data_rows(&single.join("metrics.csv")).remove(0);
    assert!(rows.contains(&row), "{row}\nnot in\n{rows:#?}");
}

#[test]
fn invalid_grid_point_fails_before_running() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "g.toml", &format!("{SMALL}\n[grid]\ntau_base = [0.7, 1.5]\n"));
    let out = dir.path().join("never");
    let res = semevo(&["ablate", "--config", &cfg, "--out", s(&out)], None);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("tau_base"));
    assert!(!out.exists());
}

#[test]
fn replaying_a_written_stream_reproduces_simulate() {
    let dir = tempfile::tempdir().unwrap();
    let stream = dir.path().join("stream.jsonl");
    let sim_cfg = format!("{SMALL}\n").replace("[output]", &format!("[output]\nsnapshots = {:?}", s(&stream)));
    let cfg = write_config(dir.path(), "sim.toml", &sim_cfg);
    let sim = dir.path().join("sim");
    ok(semevo(&["simulate", "--config", &cfg, "--out", s(&sim)], None));

    let replay_cfg = format!(
        "mode = \"replay\"\nrun_id = \"small\"\nseed = 4\ninput = {:?}\n[hyperparams]\nn = 60\n[output]\ncheckpoints = [0, 20]\n",
        s(&stream)
    );
    let rcfg = write_config(dir.path(), "rep.toml", &replay_cfg);
    let rep = dir.path().join("rep");
    let stdout = ok(semevo(&["replay", "--config", &rcfg, "--out", s(&rep), "--verify-every", "10"], None));
    assert!(stdout.contains("verified 4"), "{stdout}");
    for f in ["metrics.csv", "images.jsonl"] {
        assert_eq!(fs::read(sim.join(f)).unwrap(), fs::read(rep.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn stream_without_ground_truth_cannot_report_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let full = dir.path().join("full.jsonl");
    let cfg = write_config(
        dir.path(),
        "sim.toml",
        &SMALL.replace("[output]", &format!("[output]\nsnapshots = {:?}", s(&full))),
    );
    ok(semevo(&["simulate", "--config", &cfg, "--out", s(&dir.path().join("x"))], None));

    let bare = dir.path().join("bare.jsonl");
    let reader = SnapshotReader::open(&full).unwrap();
    let mut w = SnapshotWriter::create(&bare, reader.header().clone()).unwrap();
    for snap in reader {
        let mut snap = snap.unwrap();
        snap.ground_truth = None;
        w.write(&snap).unwrap();
    }
    w.finish().unwrap();

    let base = format!("mode = \"replay\"\ninput = {:?}\n", s(&bare));
    let with_metrics = write_config(dir.path(), "r1.toml", &base);
    let res = semevo(&["replay", "--config", &with_metrics, "--out", s(&dir.path().join("r1"))], None);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("ground truth"));

    let without = write_config(
        dir.path(),
        "r2.toml",
        &format!("{base}[metrics]\naccuracy = false\nmap50 = false\n"),
    );
    ok(semevo(&["replay", "--config", &without, "--out", s(&dir.path().join("r2"))], None));
}

#[test]
fn seed_precedence_is_flag_then_env_then_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMALL);
    let seed_of = |out: &Path| -> String {
        let text = fs::read_to_string(out.join("metrics.csv")).unwrap();
        let mut lines = text.lines();
        let head: Vec<&str> = lines.next().unwrap().split(',').collect();
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        row[head.iter().position(|h| *h == "seed").unwrap()].to_string()
    };
    let (f, e, x) = (dir.path().join("f"), dir.path().join("e"), dir.path().join("x"));
    ok(semevo(&["simulate", "--config", &cfg, "--out", s(&f)], None));
    ok(semevo(&["simulate", "--config", &cfg, "--out", s(&e)], Some("9")));
    ok(semevo(&["simulate", "--config", &cfg, "--out", s(&x), "--seed", "12"], Some("9")));
    assert_eq!((seed_of(&f), seed_of(&e), seed_of(&x)), ("4".into(), "9".into(), "12".into()));
    assert_ne!(fs::read(f.join("images.jsonl")).unwrap(), fs::read(e.join("images.jsonl")).unwrap());
}

#[test]
fn flags_override_hyperparameters() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMALL);
    let out = dir.path().join("o");
    ok(semevo(
        &[
            "simulate", "--config", &cfg, "--out", s(&out), "--n", "7", "--tau-base", "0.65", "--alpha", "0.3",
            "--sigma", "0.05", "--m-max", "3", "--conf-threshold", "0.55", "--activation-space", "softmax",
        ],
        None,
    ));
    let text = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let row = text.lines().nth(1).unwrap();
    assert!(row.starts_with("small,adapted,4,7,0.65,0.3,0.05,3,0.55,softmax,"), "{row}");
    let bad = semevo(&["simulate", "--config", &cfg, "--out", s(&out), "--sigma", "-1"], None);
    assert!(!bad.status.success());
}

#[test]
fn baseline_flag_runs_zero_shot() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMALL);
    let out = dir.path().join("b");
    ok(semevo(&["simulate", "--config", &cfg, "--out", s(&out), "--baseline"], None));
    let row = data_rows(&out.join("metrics.csv")).remove(0);
    assert!(row.starts_with("small,baseline,"));
}

#[test]
fn verify_and_trajectory_export() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMALL);
    let out = dir.path().join("v");
    let stdout = ok(semevo(&["verify", "--config", &cfg, "--out", s(&out)], None));
    assert!(stdout.contains("verified 40"), "{stdout}");

    let stdout = ok(semevo(&["export-trajectory", "--config", &cfg, "--out", s(&out)], None));
    assert!(stdout.contains("30 rows"), "{stdout}");
    let rows = data_rows(&out.join("trajectory.csv"));
    let checkpoints: Vec<&str> = rows.iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(checkpoints.iter().filter(|c| **c == "0").count(), 10);
    assert_eq!(checkpoints.iter().filter(|c| **c == "20").count(), 10);
    assert_eq!(checkpoints.iter().filter(|c| **c == "40").count(), 10);
    // checkpoint, category, alignment, then 64 values.
    assert_eq!(rows[0].split(',').count(), 3 + 64);
}

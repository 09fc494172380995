mod support;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn slkd(args: &[&str], env_root: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_slkd"));
    cmd.args(args).env_remove("SLKD_RUN_ROOT");
    if let Some(root) = env_root {
        cmd.env("SLKD_RUN_ROOT", root);
    }
    cmd.output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("run.cfg.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn only_run_dir(root: &Path) -> PathBuf {
    let dirs: Vec<PathBuf> = std::fs::read_dir(root).unwrap().map(|e| e.unwrap().path()).filter(|p| p.is_dir()).collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs.into_iter().next().unwrap()
}

#[test]
fn run_all_then_report_and_plot() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &support::tiny_config().to_toml());
    let root = tmp.path().join("runs");
    let cfg_s = cfg.to_str().unwrap();
    let stdout = ok(&slkd(&["run-all", "--config", cfg_s, "--seed", "3", "--out", root.to_str().unwrap()], None));
    for arm in ["teacher", "student", "kd", "slkd"] {
        assert!(stdout.contains(&format!("{arm}:")), "{stdout}");
    }
    let run = only_run_dir(&root);
    let name = run.file_name().unwrap().to_str().unwrap();
    let (hash, seed) = name.split_once("-s").unwrap();
    assert_eq!(seed, "3");
    assert_eq!(hash.len(), 16);
    assert!(!run.join("FAILED").exists());

    let meta: toml::Table = std::fs::read_to_string(run.join("run.toml")).unwrap().parse().unwrap();
    assert_eq!(meta["config"]["seed"].as_integer(), Some(3));
    let artifacts = meta["artifacts"].as_table().unwrap();
    for key in ["teacher/final.ckpt", "teacher/best.ckpt", "kd/student.ckpt", "slkd/plans/stage3.csv", "slkd/snapshots/stage1.ckpt"] {
        assert_eq!(artifacts[key].as_str().unwrap().len(), 16, "{key}");
    }

    let table = ok(&slkd(&["report", run.to_str().unwrap()], None));
    assert!(table.contains("| slkd |") && table.contains("seed 3"), "{table}");

    let svg = tmp.path().join("acc.svg");
    let rec = format!("kd={}", run.join("kd/record.csv").display());
    ok(&slkd(&["plot", &rec, run.join("slkd/record.csv").to_str().unwrap(), "--output", svg.to_str().unwrap()], None));
    let text = std::fs::read_to_string(&svg).unwrap();
    assert!(text.starts_with("<svg") && text.matches("<polyline").count() == 2);

    let model = run.join("kd/student.ckpt");
    let eval = ok(&slkd(&["eval", "--config", cfg_s, "--model", model.to_str().unwrap()], None));
    assert!(eval.contains("top-1"), "{eval}");
    let plan = ok(&slkd(&["partition", "--config", cfg_s, "--model", model.to_str().unwrap(), "--stages", "2"], None));
    assert!(plan.starts_with("index,class,difficulty,stage"));
    let scores = ok(&slkd(&["score", "--config", cfg_s, "--model", model.to_str().unwrap()], None));
    assert_eq!(scores.lines().count(), 121);
}

#[test]
fn stepwise_commands_share_a_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &support::tiny_config().to_toml());
    let root = tmp.path().join("env-root");
    let cfg_s = cfg.to_str().unwrap();
    let out = slkd(&["distill-kd", "--config", cfg_s], Some(&root));
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("train-teacher"));
    let run = only_run_dir(&root);
    assert!(run.join("FAILED").exists());

    ok(&slkd(&["train-teacher", "--config", cfg_s], Some(&root)));
    ok(&slkd(&["distill-kd", "--config", cfg_s], Some(&root)));
    ok(&slkd(&["distill-slkd", "--config", cfg_s], Some(&root)));
    assert!(!run.join("FAILED").exists());
    assert!(run.join("kd/record.csv").exists() && run.join("slkd/plans/stage1.csv").exists());
    ok(&slkd(&["ablate-snapshots", "--config", cfg_s], Some(&root)));
    assert!(run.join("slkd-teacher-snap/record.csv").exists());
}

#[test]
fn bad_config_names_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = support::tiny_config();
    cfg.kd.tau = -2.0;
    let path = write_config(tmp.path(), &cfg.to_toml());
    let out = slkd(&["train-teacher", "--config", path.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()], None);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("kd.tau"));

    let out = slkd(&["train-teacher", "--preset", "nope"], None);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("desk-blobs"));
}

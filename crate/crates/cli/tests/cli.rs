use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_maxmin-wsl"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &str = r#"{
  "gen.train_per_class": 8,
  "gen.val_per_class": 3,
  "gen.test_per_class": 5,
  "gen.height": 32,
  "gen.width": 32,
  "train.epochs": 2
}"#;

fn small_setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.json"), SMALL).unwrap();
    let o = run(dir.path(), &["--config", "small.json", "--data", "d", "gen"]);
    assert!(o.status.success(), "{}", stderr(&o));
    dir
}

#[test]
fn dump_config_prints_every_default() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["--dump-config"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let m = v.as_object().unwrap();
    assert_eq!(m["loss.lambda"], serde_json::json!(1e-7));
    assert_eq!(m["loss.omega"], serde_json::json!(5.0));
    assert_eq!(m["loss.sigma"], serde_json::json!(0.15));
    assert_eq!(m["run.ablation"], "fg_bg_asc");
    for key in ["gen.seed", "train.lr", "pool.kmax", "net.widths", "run.out_dir"] {
        assert!(m.contains_key(key), "{key}");
    }
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.json"), r#"{"loss.mode": "eem", "train.seed": 3}"#).unwrap();
    let o = run(
        dir.path(),
        &["--config", "c.json", "--mode", "sem", "--seed", "9", "--ablation", "fg_only", "--dump-config"],
    );
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["loss.mode"], "sem");
    assert_eq!(v["train.seed"], 9);
    assert_eq!(v["gen.seed"], 9);
    assert_eq!(v["run.ablation"], "fg_only");
    // the configured value stays visible; the ablation acts at train time
    assert_eq!(v["loss.lambda"], serde_json::json!(1e-7));
}

#[test]
fn bad_config_exits_2_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("a.json"), r#"{"loss.lambdaa": 1}"#).unwrap();
    let o = run(dir.path(), &["--config", "a.json", "gen"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("loss.lambdaa"));

    fs::write(dir.path().join("b.json"), r#"{"train.lr": "fast"}"#).unwrap();
    let o = run(dir.path(), &["--config", "b.json", "gen"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train.lr"));

    fs::write(dir.path().join("c.json"), "{ not json").unwrap();
    assert_eq!(run(dir.path(), &["--config", "c.json", "gen"]).status.code(), Some(2));
    assert_eq!(run(dir.path(), &["--mode", "kl", "gen"]).status.code(), Some(2));
}

#[test]
fn gen_defaults_write_700_images_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let a = run(dir.path(), &["--data", "a", "gen"]);
    assert!(a.status.success(), "{}", stderr(&a));
    assert!(stdout(&a).contains("wrote 700 images"));
    let manifest = fs::read_to_string(dir.path().join("a/manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 700);
    let b = run(dir.path(), &["--data", "b", "gen"]);
    let hash = |o: &Output| stdout(o).lines().find(|l| l.starts_with("manifest sha256")).unwrap().to_string();
    assert_eq!(hash(&a), hash(&b));
    assert_eq!(manifest, fs::read_to_string(dir.path().join("b/manifest.jsonl")).unwrap());
}

#[test]
fn train_is_deterministic_and_writes_logs() {
    let dir = small_setup();
    let p = dir.path();
    for out in ["r1", "r2"] {
        let o = run(p, &["--config", "small.json", "--data", "d", "--out", out, "--ablation", "fg_only", "train"]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).contains("loss.lambda 1e-7"));
    }
    for f in ["best.ckpt", "best", "steps.csv", "epochs.csv", "checkpoints/epoch_0001.ckpt"] {
        let a = fs::read(p.join("r1").join(f)).unwrap();
        let b = fs::read(p.join("r2").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs");
    }
    let epochs = fs::read_to_string(p.join("r1/epochs.csv")).unwrap();
    assert_eq!(epochs.lines().count(), 3);
    let pointer = fs::read_to_string(p.join("r1/best")).unwrap();
    let pointed = fs::read(p.join("r1").join(pointer.trim())).unwrap();
    assert_eq!(pointed, fs::read(p.join("r1/best.ckpt")).unwrap());
    assert!(p.join("r1/run_info.json").is_file());
}

#[test]
fn eval_reports_and_writes_one_mask_per_image() {
    let dir = small_setup();
    let p = dir.path();
    let o = run(p, &["--config", "small.json", "--data", "d", "--out", "r", "train"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(p, &["--data", "d", "--out", "r", "eval", "--checkpoint", "r", "--split", "test"]);
    assert!(o.status.success(), "{}", stderr(&o));

    let out = p.join("r/eval_test");
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    for key in ["cl_error", "f1_plus", "f1_minus"] {
        assert!(report[key].is_number(), "{key}");
    }
    assert_eq!(fs::read_dir(out.join("masks")).unwrap().count(), 10);

    let preds = fs::read_to_string(out.join("predictions.csv")).unwrap();
    let mut rows = preds.lines();
    assert_eq!(rows.next().unwrap(), "index,label,pred,p_plus_0,p_plus_1,p_full_0,p_full_1,pred_fraction");
    for row in rows {
        let f: Vec<&str> = row.split(',').collect();
        let (p0, p1): (f64, f64) = (f[3].parse().unwrap(), f[4].parse().unwrap());
        let pred: usize = f[2].parse().unwrap();
        assert_eq!(pred, if p1 > p0 { 1 } else { 0 });
    }
    assert!(fs::read_to_string(out.join("confusion.csv")).unwrap().starts_with("truth,pred_fg,pred_bg"));
    assert_eq!(fs::read_to_string(out.join("sizes.csv")).unwrap().lines().count(), 11);
}

#[test]
fn missing_or_corrupt_files_exit_3() {
    let dir = small_setup();
    let p = dir.path();
    let o = run(p, &["--data", "d", "eval", "--checkpoint", "missing.ckpt"]);
    assert_eq!(o.status.code(), Some(3));
    fs::write(p.join("junk.ckpt"), b"garbage").unwrap();
    let o = run(p, &["--data", "d", "eval", "--checkpoint", "junk.ckpt"]);
    assert_eq!(o.status.code(), Some(3));
    let o = run(p, &["--data", "nowhere", "train"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn diverging_training_exits_4() {
    let dir = small_setup();
    let p = dir.path();
    fs::write(p.join("hot.json"), SMALL.replace("\"train.epochs\": 2", "\"train.epochs\": 2, \"train.lr\": 1e300")).unwrap();
    let o = run(p, &["--config", "hot.json", "--data", "d", "--out", "r", "train"]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"));
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["gradcheck"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let out = stdout(&o);
    assert!(out.contains("prob.eem_closed_form") && out.contains("nets.end_to_end_input_sem"));
    assert!(!out.contains("FAIL"));
}

use std::path::Path;
use std::process::{Command, Output};

fn mitu(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mitu"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("run mitu")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn phantoms(dir: &Path, count: usize, extra: &[&str]) {
    let n = count.to_string();
    let mut args = vec!["phantom", "--count", &n, "--out", dir.to_str().unwrap(), "--seed", "1"];
    args.extend_from_slice(extra);
    let o = mitu(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn phantom_writes_images_masks_and_truth() {
    let d = tempfile::tempdir().unwrap();
    phantoms(d.path(), 5, &[]);
    let truth = std::fs::read_to_string(d.path().join("truth.csv")).unwrap();
    assert_eq!(truth.lines().count(), 6);
    assert_eq!(std::fs::read_dir(d.path().join("images")).unwrap().count(), 5);
    assert_eq!(std::fs::read_dir(d.path().join("masks")).unwrap().count(), 5);
}

#[test]
fn aop_agrees_with_truth_csv() {
    let d = tempfile::tempdir().unwrap();
    phantoms(d.path(), 5, &[]);
    let truth = std::fs::read_to_string(d.path().join("truth.csv")).unwrap();
    for line in truth.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        let mask = d.path().join("masks").join(format!("{}.png", cols[0]));
        let o = mitu(&["aop", "--mask", mask.to_str().unwrap()]);
        assert!(o.status.success());
        let measured: f64 = stdout(&o).trim().parse().unwrap();
        let want: f64 = cols[1].parse().unwrap();
        assert!((measured - want).abs() < 2.0, "{} vs {want}", measured);
        let flipped = mitu(&["aop", "--mask", mask.to_str().unwrap(), "--aop-convention", "flip"]);
        let f: f64 = stdout(&flipped).trim().parse().unwrap();
        assert!((measured + f - 180.0).abs() < 1e-3);
    }
}

#[test]
fn eval_of_ground_truth_against_itself_scores_one() {
    let d = tempfile::tempdir().unwrap();
    phantoms(d.path(), 4, &[]);
    let masks = d.path().join("masks");
    let out = d.path().join("report.json");
    let o = mitu(&["eval", "--pred-dir", masks.to_str().unwrap(), "--gt-dir", masks.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(report["aggregate"]["score_of_means"].as_f64(), Some(1.0));
    assert!(d.path().join("report.csv").exists());
}

#[test]
fn unknown_flag_exits_with_usage() {
    let o = mitu(&["aop", "--nope"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn missing_file_is_a_data_error() {
    let o = mitu(&["aop", "--mask", "/nonexistent/mask.png"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn bad_config_exits_two() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("run.toml");
    std::fs::write(&cfg, "[train]\nepoch = 3\n[data]\nroot = \".\"\nout_dir = \"x\"\n").unwrap();
    let o = mitu(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = mitu(&["phantom", "--count", "1", "--out", d.path().to_str().unwrap(), "--aop-range", "120:30"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_then_infer_on_small_phantoms() {
    let d = tempfile::tempdir().unwrap();
    let data = d.path().join("data");
    phantoms(&data, 6, &["--size", "96"]);
    let run = d.path().join("run");
    let cfg = d.path().join("run.toml");
    std::fs::write(
        &cfg,
        format!(
            r#"[model.encoder]
widths = [8, 16, 24, 32]
heads = [1, 2, 2, 4]
depths = [1, 1, 1, 1]
sr_ratios = [2, 2, 1, 1]

[model.decoder]
channels = [32, 16, 8, 8]

[train]
epochs = 1
batch_size = 2
val_count = 2
seed = 3

[data]
root = "{}"
out_dir = "{}"
allow_any_size = true
"#,
            data.display(),
            run.display()
        ),
    )
    .unwrap();
    let o = mitu(&["train", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["best.mitu", "final.mitu", "train_log.csv", "run.toml"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let pred = d.path().join("pred.png");
    let ckpt = run.join("final.mitu");
    let image = data.join("images").join("00000.png");
    let args = ["infer", "--ckpt", ckpt.to_str().unwrap(), "--image", image.to_str().unwrap(), "--out", pred.to_str().unwrap()];
    // wrong architecture: checkpoint names do not match the default model
    assert_eq!(mitu(&[&args[..], &["--allow-any-size"]].concat()).status.code(), Some(1));
    let o = mitu(&[&args[..], &["--config", cfg.to_str().unwrap(), "--allow-any-size"]].concat());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(pred.exists());
}

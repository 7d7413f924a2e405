use std::path::Path;
use std::process::{Command, Output};

fn hmr(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hmr")).args(args).arg("--out").arg(dir).output().expect("binary runs")
}

const SMALL: &str = "frames = 4\nn_train = 2\nn_eval = 1\nlift_dim = 32\nlift_layers = 1\nrecon_dim = 8\nrecon_layers = 1\nn_state = 4\nepochs = 2\nmesh_epochs = 1\nlr = 1e-3\n";

#[test]
fn verify_exit_codes_and_filter() {
    let dir = tempfile::tempdir().unwrap();
    let ok = hmr(&["verify", "--only", "ssm"], dir.path());
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    let report: serde_json::Value = serde_json::from_slice(&ok.stdout).unwrap();
    let names: Vec<_> = report["suites"].as_array().unwrap().iter().map(|s| s["suite"].as_str().unwrap().to_string()).collect();
    assert_eq!(names, ["scan-equivalence", "zoh-limit"]);
    assert!(dir.path().join("verify.json").exists());

    let bad = hmr(&["verify", "--only", "scan-equivalence", "--sabotage-a-bar"], dir.path());
    assert_eq!(bad.status.code(), Some(1));
    let report: serde_json::Value = serde_json::from_slice(&bad.stdout).unwrap();
    assert_eq!(report["failures"][0]["suite"], "scan-equivalence");
    assert!(String::from_utf8_lossy(&bad.stderr).contains("max diff"));

    let csv = hmr(&["verify", "--only", "losses", "--format", "csv"], dir.path());
    assert_eq!(csv.status.code(), Some(0));
    let text = String::from_utf8(csv.stdout).unwrap();
    assert!(text.starts_with("suite,module,cases,failed_cases,max_err,passed\n"), "{text}");
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    for args in [vec!["verify", "--only", "nothing"], vec!["train", "--only", "ssm"], vec!["frobnicate"], vec!["verify", "--format", "xml"]] {
        assert_eq!(hmr(&args, dir.path()).status.code(), Some(2), "{args:?}");
    }
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "epochs = -3\n").unwrap();
    assert_eq!(hmr(&["train", "--config", cfg.to_str().unwrap()], dir.path()).status.code(), Some(2));
    let missing = hmr(&["eval", "--checkpoint", "/nonexistent.ckpt"], dir.path());
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn gen_data_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.toml");
    std::fs::write(&cfg, SMALL).unwrap();
    let c = cfg.to_str().unwrap();
    let d = dir.path().to_str().unwrap();

    assert_eq!(hmr(&["gen-data", "--config", c], dir.path()).status.code(), Some(0));
    assert!(dir.path().join("train.hmrd").exists() && dir.path().join("eval.hmrd").exists());

    let train = hmr(&["train", "--config", c, "--data", d, "--seed", "3"], dir.path());
    assert_eq!(train.status.code(), Some(0), "{}", String::from_utf8_lossy(&train.stderr));
    let report: serde_json::Value = serde_json::from_slice(&train.stdout).unwrap();
    assert_eq!(report["config"]["seed"], 3);
    assert_eq!(report["epochs"].as_array().unwrap().len(), 2);
    let ckpt = dir.path().join("lift.ckpt");
    assert!(ckpt.exists());

    let eval = hmr(&["eval", "--config", c, "--data", d, "--seed", "3", "--checkpoint", ckpt.to_str().unwrap(), "--format", "csv"], dir.path());
    assert_eq!(eval.status.code(), Some(0), "{}", String::from_utf8_lossy(&eval.stderr));
    let text = String::from_utf8(eval.stdout).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines[0], "split,MPJPE,PA-MPJPE,MPVPE,Accel");
    let train_row = report["metrics"][0]["mpjpe"].as_f64().unwrap();
    let eval_row: f64 = lines[1].split(',').nth(1).unwrap().parse().unwrap();
    assert!((train_row - eval_row).abs() <= 1e-9);

    let mesh = hmr(&["train", "--config", c, "--data", d, "--stage", "mesh", "--init", ckpt.to_str().unwrap()], dir.path());
    assert_eq!(mesh.status.code(), Some(0), "{}", String::from_utf8_lossy(&mesh.stderr));
    assert!(dir.path().join("mesh.ckpt").exists());
}

#[test]
fn bench_and_config_commands() {
    let dir = tempfile::tempdir().unwrap();
    let out = hmr(&["bench", "--sizes", "8,16", "--format", "csv"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("kind,L,seconds,tokens_per_s,max_abs_diff\n"));

    let cfg = hmr(&["config"], dir.path());
    assert_eq!(cfg.status.code(), Some(0));
    let path = dir.path().join("default.toml");
    std::fs::write(&path, &cfg.stdout).unwrap();
    let ok = hmr(&["gen-data", "--config", path.to_str().unwrap()], dir.path());
    assert_eq!(ok.status.code(), Some(0));
}

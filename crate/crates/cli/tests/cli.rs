use std::path::Path;
use std::process::{Command, Output};

fn volgibbs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_volgibbs")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = volgibbs(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Desk profile shrunk to run in seconds.
fn small_config(dir: &Path) -> String {
    let json = ok(&["--print-config"]);
    let mut cfg: serde_json::Value = serde_json::from_str(&json).unwrap();
    cfg["n_train"] = 40.into();
    cfg["n_holdout"] = 2.into();
    cfg["train"]["epochs"] = 20.into();
    cfg["gibbs"]["chain_length"] = 40.into();
    cfg["gibbs"]["burn_in"] = 10.into();
    cfg["hedge"]["n_paths"] = 3.into();
    cfg["hedge"]["steps_per_day"] = 1.into();
    cfg["hedge"]["tiers"] = serde_json::json!(["week", "day"]);
    cfg["hedge"]["reestimate_every_days"] = 60.into();
    cfg["hedge"]["gibbs"]["chain_length"] = 10.into();
    cfg["hedge"]["gibbs"]["burn_in"] = 2.into();
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn full_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let out = dir.path().join("run");
    let out = out.to_str().unwrap();
    let base = ["--config", config.as_str(), "--out", out, "--seed", "5", "--threads", "2"];
    let with = |extra: &[&str]| -> Vec<String> { base.iter().chain(extra).map(|s| s.to_string()).collect() };
    let run = |extra: &[&str]| {
        let args = with(extra);
        ok(&args.iter().map(String::as_str).collect::<Vec<_>>())
    };

    let s = run(&["synth"]);
    assert!(s.contains("40 training and 2 held-out cubes"), "{s}");
    let s = run(&["train"]);
    assert!(s.contains("latent units active"), "{s}");
    let model = format!("{out}/model.vgv");
    let cube = format!("{out}/holdout/cubes/cube_00000.csv");
    let forwards = format!("{out}/holdout/forwards/forwards_00000.csv");
    let s = run(&["impute", "--model", &model, "--cube", &cube, "--mask-rate", "0.7"]);
    assert!(s.contains("mean absolute deviation"), "{s}");
    let s = run(&["calibrate", "--cube", &cube, "--forwards", &forwards]);
    assert!(s.contains("calibrate: 48 slices"), "{s}");
    let s = run(&["hedge", "--model", &model, "--ledger"]);
    assert!(s.contains("imputation") && s.contains("interpolation"), "{s}");
    let s = run(&["diagnose", "--model", &model]);
    assert!(s.contains("of 10 latent units active"), "{s}");

    for f in [
        "synth_manifest.json",
        "train_manifest.json",
        "loss.csv",
        "imputed.csv",
        "obm_report.json",
        "params.csv",
        "fit_report.json",
        "hedge_report.json",
        "hedge_ledger.csv",
        "latent_activity.csv",
        "latent_trace.csv",
    ] {
        assert!(Path::new(out).join(f).exists(), "missing {f}");
    }

    // the same seed reproduces the same bytes, whatever the thread count
    let again = dir.path().join("again");
    let again = again.to_str().unwrap();
    ok(&["--config", &config, "--out", again, "--seed", "5", "--threads", "1", "synth"]);
    ok(&["--config", &config, "--out", again, "--seed", "5", "--threads", "1", "train"]);
    for f in ["model.vgv", "loss.csv", "training_set/cubes/cube_00007.csv"] {
        assert_eq!(
            std::fs::read(Path::new(out).join(f)).unwrap(),
            std::fs::read(Path::new(again).join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn errors_are_reported() {
    let out = volgibbs(&["calibrate", "--cube", "/nonexistent/cube.csv"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error:") && err.contains("/nonexistent/cube.csv"), "{err}");

    let out = volgibbs(&["--profile", "laptop", "synth"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown profile"));

    let out = volgibbs(&["hedge", "--strategies", "oracle"]);
    assert!(!out.status.success());

    let out = volgibbs(&[]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("no command given"));
}

#[test]
fn imputation_hedge_needs_a_model() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let out = volgibbs(&["--config", &config, "--out", dir.path().to_str().unwrap(), "hedge", "--strategies", "imputation"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("needs a trained model"));
}

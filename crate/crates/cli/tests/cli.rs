use std::path::Path;
use std::process::{Command, Output};

fn strata(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_strata"))
        .args(args)
        .env("STRATA_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, plots: &str) {
    let out = strata(&["synth", "--plots", plots, "--seed", "11", "--out", s(dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn synth_then_cv_writes_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "40");
    assert!(data.join("labels.csv").is_file());
    assert!(data.join("plots/synth_0000.csv").is_file());
    assert!(data.join("rasters/synth_0000_low.csv").is_file());

    let cfg = tmp.path().join("run.cfg");
    std::fs::write(&cfg, "epochs = 2\nm_points = 256\nraster_k = 16\n").unwrap();
    let out_dir = tmp.path().join("cv");
    let out = strata(&["--config", s(&cfg), "cv", "--data", s(&data), "--out", s(&out_dir), "--epochs", "10"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = std::fs::read_to_string(out_dir.join("cv_report.csv")).unwrap();
    assert_eq!(report.lines().count(), 7);
    assert!(report.lines().last().unwrap().starts_with("pooled,"));
    let log = std::fs::read_to_string(out_dir.join("fold_1_log.csv")).unwrap();
    // The flag overrides the config file.
    assert_eq!(log.lines().count(), 11);
    assert!(out_dir.join("fold_5_model.json").is_file());
    let preds = std::fs::read_to_string(out_dir.join("predictions.csv")).unwrap();
    assert_eq!(preds.lines().next(), Some("plot_id,o_low,o_medium,o_high"));
    assert_eq!(preds.lines().count(), 41);
}

#[test]
fn fit_gamma_train_predict_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "4");

    let g = tmp.path().join("gamma/mix.json");
    let out = strata(&["fit-gamma", "--data", s(&data), "--out", s(&g)]);
    assert!(out.status.success());
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(&g).unwrap()).unwrap();
    let w = json["weights"].as_array().unwrap();
    assert!((w[0].as_f64().unwrap() + w[1].as_f64().unwrap() - 1.0).abs() < 1e-9);

    let m = tmp.path().join("model");
    let out = strata(&[
        "train", "--data", s(&data), "--out", s(&m), "--epochs", "2", "--batch", "2", "--m-points", "64",
        "--raster-k", "8", "--mixture", s(&g),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["model.json", "training_log.csv", "mixture.json"] {
        assert!(m.join(f).is_file(), "{f}");
    }

    let p = tmp.path().join("pred");
    let plot = data.join("plots/synth_0002.csv");
    let out = strata(&["predict", "--model", s(&m.join("model.json")), "--plot", s(&plot), "--out", s(&p)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    let fields: Vec<&str> = stdout.trim().split(',').collect();
    assert_eq!(fields[0], "synth_0002");
    for v in &fields[1..] {
        let v: f64 = v.parse().unwrap();
        assert!((0.0..=1.0).contains(&v));
    }
    assert_eq!(std::fs::read_dir(p.join("rasters")).unwrap().count(), 6);
    for st in ["low", "medium", "high"] {
        assert!(p.join(format!("rasters/synth_0002_{st}.csv")).is_file());
        let pgm = std::fs::read(p.join(format!("rasters/synth_0002_{st}.pgm"))).unwrap();
        assert!(pgm.starts_with(b"P5"));
    }

    let out = strata(&["eval", "--predictions", s(&p.join("predictions.csv")), "--data", s(&data)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("e_avg="));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(strata(&["--help"]).status.code(), Some(0));
    assert_eq!(strata(&["--version"]).status.code(), Some(0));
    assert_eq!(strata(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(strata(&["train", "--epochs", "ten"]).status.code(), Some(1));
    let out = s(tmp.path());
    assert_eq!(strata(&["train", "--data", out, "--out", out, "--lambda", "-1"]).status.code(), Some(1));
    assert_eq!(strata(&["cv", "--data", out]).status.code(), Some(1));
    let bad = tmp.path().join("bad.cfg");
    std::fs::write(&bad, "colour=blue\n").unwrap();
    assert_eq!(strata(&["--config", s(&bad), "synth", "--out", out]).status.code(), Some(1));

    assert_eq!(strata(&["train", "--data", s(&tmp.path().join("missing")), "--out", out]).status.code(), Some(2));
    let plot = tmp.path().join("broken.csv");
    std::fs::write(&plot, "plot_id,x,y\np,1,2\n").unwrap();
    assert_eq!(strata(&["fit-gamma", "--data", s(&plot), "--out", out]).status.code(), Some(2));
}

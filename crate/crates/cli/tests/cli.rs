use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn stackedgp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stackedgp"))
        .args(args)
        .env_remove("STACKEDGP_DATA_DIR")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = stackedgp(args);
    assert!(
        out.status.success(),
        "stackedgp {} failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn keys(v: &Value) -> Vec<String> {
    v.as_object().unwrap().keys().cloned().collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn header(path: &Path) -> String {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .to_string()
}

fn write_chain(dir: &Path) {
    let mut z = String::from("x,z\n");
    let mut y = String::from("z,y\n");
    for i in 0..20 {
        let x = -2.0 + 4.0 * f64::from(i) / 19.0;
        z += &format!("{x},{}\n", x.sin());
        let zz = -1.0 + 2.0 * f64::from(i) / 19.0;
        y += &format!("{zz},{}\n", 1.5 * zz * zz);
    }
    fs::write(dir.join("z.csv"), z).unwrap();
    fs::write(dir.join("y.csv"), y).unwrap();
    fs::write(dir.join("inputs.csv"), "x,x_var\n-1,0\n0.5,0.1\n1.5,0.3\n").unwrap();
    fs::write(
        dir.join("net.toml"),
        r#"observed = ["x"]

[[layer]]
[[layer.node]]
name = "z"
inputs = ["x"]
dataset = "z.csv"
restarts = 2

[[layer]]
[[layer.node]]
name = "y"
inputs = ["z"]
dataset = "y.csv"
kernel = { type = "poly", degree = 2 }
noise = 0.01
fixed = true
"#,
    )
    .unwrap();
}

#[test]
fn train_predict_propagate_and_mc() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_chain(d);
    let (train, pred, prop, mc) = (d.join("t"), d.join("p"), d.join("q"), d.join("m"));
    ok(&[
        "train",
        "--config",
        s(&d.join("net.toml")),
        "--out",
        s(&train),
    ]);
    let report = json(&train.join("train_report.json"));
    assert_eq!(keys(&report), ["nodes", "seed"]);
    let nodes = report["nodes"].as_array().unwrap();
    assert_eq!(nodes.len(), 2);
    assert_eq!(nodes[1]["name"], "y");
    assert_eq!(nodes[1]["kernel"]["type"], "poly");
    assert_eq!(nodes[1]["kernel"]["degree"], 2);

    let model = train.join("model.sgp");
    let grid = d.join("grid.csv");
    fs::write(&grid, "x\n-1\n0\n1\n").unwrap();
    ok(&[
        "predict",
        "--model",
        s(&model),
        "--node",
        "z",
        "--inputs",
        s(&grid),
        "--out",
        s(&pred),
    ]);
    assert_eq!(header(&pred.join("predictions.csv")), "x,mean,variance");
    assert_eq!(
        fs::read_to_string(pred.join("predictions.csv"))
            .unwrap()
            .lines()
            .count(),
        4
    );

    let inputs = d.join("inputs.csv");
    ok(&[
        "propagate",
        "--model",
        s(&model),
        "--inputs",
        s(&inputs),
        "--mc",
        "3000",
        "--out",
        s(&prop),
    ]);
    assert_eq!(
        header(&prop.join("propagate.csv")),
        "row,z_mean,z_var,z_mc_mean,z_mc_var,y_mean,y_var,y_mc_mean,y_mc_var"
    );
    let summary = json(&prop.join("mc_summary.json"));
    assert_eq!(summary["samples"], 3000);
    assert_eq!(summary["rows"], 3);

    ok(&[
        "mc",
        "--model",
        s(&model),
        "--inputs",
        s(&inputs),
        "--samples",
        "500",
        "--bins",
        "8",
        "--out",
        s(&mc),
    ]);
    assert_eq!(
        header(&mc.join("mc.csv")),
        "row,node,mean,variance,se_mean,se_variance"
    );
    assert!(mc.join("hist_2_y.csv").exists());
    assert_eq!(
        json(&mc.join("mc_nodes.json")),
        serde_json::json!(["z", "y"])
    );
}

#[test]
fn seed_flag_overrides_config_seed() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_chain(d);
    let cfg = d.join("net.toml");
    let text = fs::read_to_string(&cfg).unwrap();
    fs::write(&cfg, format!("seed = 4\n{text}")).unwrap();
    ok(&["train", "--config", s(&cfg), "--out", s(&d.join("a"))]);
    assert_eq!(json(&d.join("a/train_report.json"))["seed"], 4);
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--seed",
        "9",
        "--out",
        s(&d.join("b")),
    ]);
    assert_eq!(json(&d.join("b/train_report.json"))["seed"], 9);
}

#[test]
fn recurrent_model_reports_the_final_step() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_chain(d);
    let cfg = d.join("net.toml");
    let mut text = fs::read_to_string(&cfg).unwrap();
    text += "\n[recurrent]\nstate = { x = \"z\" }\nsteps = 4\n";
    fs::write(&cfg, text).unwrap();
    let (train, prop) = (d.join("t"), d.join("q"));
    ok(&["train", "--config", s(&cfg), "--out", s(&train)]);
    ok(&[
        "propagate",
        "--model",
        s(&train.join("model.sgp")),
        "--inputs",
        s(&d.join("inputs.csv")),
        "--mc",
        "20000",
        "--out",
        s(&prop),
    ]);
    // the row for x = -1 (certain) after four steps of x <- sin(x)
    let row: Vec<f64> = fs::read_to_string(prop.join("propagate.csv"))
        .unwrap()
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .map(|v| v.parse().unwrap())
        .collect();
    let mut x = -1.0f64;
    for _ in 0..4 {
        x = x.sin();
    }
    let (z_mean, z_mc_mean) = (row[1], row[3]);
    assert!((z_mean - x).abs() < 0.05, "{z_mean} vs {x}");
    assert!((z_mean - z_mc_mean).abs() < 0.05, "{z_mean} vs {z_mc_mean}");
}

#[test]
fn synthetic_metrics_schema() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("syn");
    ok(&[
        "experiment",
        "synthetic",
        "--scenario",
        "3",
        "--n-train",
        "40",
        "--out",
        s(&out),
    ]);
    let m = json(&out.join("metrics.json"));
    assert_eq!(
        keys(&m),
        [
            "avg_ratio",
            "experiment",
            "mae",
            "n_test",
            "n_train",
            "rmse",
            "scenario",
            "seed"
        ]
    );
    assert_eq!(m["scenario"], 3);
    assert!(m["rmse"].as_f64().unwrap() >= 0.0);
    assert_eq!(
        header(&out.join("points.csv")),
        "x1,x2,true,pred_mean,pred_var"
    );
}

fn write_jura(dir: &Path) {
    for (name, n, off) in [("jura_train.csv", 40, 0.0), ("jura_test.csv", 12, 0.37)] {
        let mut t = String::from("Xloc,Yloc,Cd,Co,Cr,Ni,Zn,X,Y\n");
        for i in 0..n {
            let x = (f64::from(i) * 0.61 + off) % 5.0;
            let y = (f64::from(i) * 1.37 + off) % 5.0;
            let zn = (4.0 + 0.3 * x.sin()).exp();
            let ni = (3.0 + 0.2 * y.cos()).exp();
            let co = (1.0 + 0.3 * ni.ln()).exp();
            let cr = (2.0 + 0.2 * zn.ln()).exp();
            let cd = (0.1 * zn.ln() + 0.2 * co.ln() - 1.0).exp();
            t += &format!("0,0,{cd},{co},{cr},{ni},{zn},{x},{y}\n");
        }
        fs::write(dir.join(name), t).unwrap();
    }
}

#[test]
fn jura_metrics_schema_with_fixture_data() {
    let dir = tempfile::tempdir().unwrap();
    write_jura(dir.path());
    let out = dir.path().join("j");
    ok(&[
        "experiment",
        "jura",
        "--structure",
        "two_layer",
        "--data-dir",
        s(dir.path()),
        "--out",
        s(&out),
    ]);
    let m = json(&out.join("metrics.json"));
    assert_eq!(
        keys(&m),
        [
            "experiment",
            "mae",
            "n_test",
            "n_train",
            "seed",
            "structure"
        ]
    );
    assert_eq!(
        (m["n_train"].as_u64(), m["n_test"].as_u64()),
        (Some(40), Some(12))
    );
    assert!(m["mae"].as_f64().unwrap().is_finite());
}

#[test]
fn missing_dataset_exits_with_data_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = stackedgp(&[
        "experiment",
        "forestfire",
        "--data-dir",
        s(dir.path()),
        "--out",
        s(&dir.path().join("f")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("forestfires.csv"));
    assert!(!dir.path().join("f").exists());
}

#[test]
fn bad_config_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    write_chain(dir.path());
    let cfg = dir.path().join("net.toml");
    let text = fs::read_to_string(&cfg)
        .unwrap()
        .replace("degree = 2", "degree = 0");
    fs::write(&cfg, text).unwrap();
    let out = stackedgp(&[
        "train",
        "--config",
        s(&cfg),
        "--out",
        s(&dir.path().join("t")),
    ]);
    assert_eq!(
        out.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn unknown_jura_structure_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = stackedgp(&[
        "experiment",
        "jura",
        "--structure",
        "deep",
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

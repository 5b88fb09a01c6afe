use std::fs;
use std::path::Path;

use proptest::prelude::*;
use stackedgp::io::{load_model, load_table, save_model, write_csv, Model, NetworkConfig};
use stackedgp::network::{BuildOptions, StackedNetwork};
use stackedgp::{Error, ErrorKind, GaussianBelief};

fn chain_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::create_dir(p.join("data")).unwrap();
    let z: Vec<Vec<f64>> = (0..15)
        .map(|i| {
            let x = -2.0 + 4.0 * f64::from(i) / 14.0;
            vec![x, x.sin()]
        })
        .collect();
    let y: Vec<Vec<f64>> = (0..15)
        .map(|i| {
            let z = -1.0 + 2.0 * f64::from(i) / 14.0;
            vec![z, 2.0 * z * z - z]
        })
        .collect();
    write_csv(&p.join("data/z.csv"), &["X", "target"], &z).unwrap();
    write_csv(&p.join("data/y.csv"), &["z", "y"], &y).unwrap();
    fs::write(
        p.join("net.toml"),
        r#"
seed = 4
observed = ["x"]

[[layer]]
[[layer.node]]
name = "z"
inputs = ["x"]
dataset = "data/z.csv"
target = "target"
restarts = 2

[[layer]]
[[layer.node]]
name = "y"
inputs = ["z"]
dataset = "data/y.csv"
kernel = { type = "sum", parts = [{ type = "rbf", variance = 0.5 }, { type = "poly", degree = 2 }] }
noise = 0.01
standardize_inputs = true
"#,
    )
    .unwrap();
    dir
}

fn build(dir: &Path) -> StackedNetwork {
    let cfg = NetworkConfig::load(&dir.join("net.toml")).unwrap();
    let data = cfg.datasets().unwrap();
    StackedNetwork::build_and_train(
        cfg.spec().unwrap(),
        &data,
        BuildOptions {
            seed: cfg.seed.unwrap(),
            jobs: Some(1),
        },
    )
    .unwrap()
}

#[test]
fn config_paths_resolve_against_config_dir() {
    let dir = chain_dir();
    let net = build(dir.path());
    assert_eq!(net.spec().observed, vec!["x"]);
    assert_eq!(net.layers().len(), 2);
    // the column header is `X`; inputs match case-insensitively
    assert_eq!(net.node("z").unwrap().gp.n_train(), 15);
}

#[test]
fn model_file_round_trip_reproduces_propagation() {
    let dir = chain_dir();
    let net = build(dir.path());
    let path = dir.path().join("out/model.sgp");
    fs::create_dir(dir.path().join("out")).unwrap();
    save_model(&net.clone().into(), &path).unwrap();
    let loaded = load_model(&path).unwrap();
    assert!(loaded.recurrence.is_none());
    let back = loaded.network;
    for (x, v) in [(-1.2, 0.0), (0.3, 0.05), (1.9, 0.4)] {
        let obs = [GaussianBelief::new(x, v).unwrap()];
        assert_eq!(net.propagate(&obs).unwrap(), back.propagate(&obs).unwrap());
    }
}

#[test]
fn edited_model_fails_checksum() {
    let dir = chain_dir();
    let path = dir.path().join("model.sgp");
    save_model(&build(dir.path()).into(), &path).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    let i = text.find("\"noise\"").unwrap();
    let mut bytes = text.into_bytes();
    bytes[i + 1] = b'N';
    fs::write(&path, bytes).unwrap();
    assert!(matches!(load_model(&path), Err(Error::Checksum)));
}

fn add_recurrence(dir: &Path, state: &str) {
    let path = dir.join("net.toml");
    let mut text = fs::read_to_string(&path).unwrap();
    text += &format!("\n[recurrent]\nstate = {{ {state} }}\nsteps = 3\n");
    fs::write(&path, text).unwrap();
}

#[test]
fn recurrence_is_kept_in_the_model_file() {
    let dir = chain_dir();
    add_recurrence(dir.path(), "x = \"y\"");
    let cfg = NetworkConfig::load(&dir.path().join("net.toml")).unwrap();
    let r = cfg.recurrence().unwrap();
    assert_eq!(r.steps, 3);
    let net = build(dir.path());
    let path = dir.path().join("model.sgp");
    save_model(
        &Model {
            network: net.clone(),
            recurrence: Some(r.clone()),
        },
        &path,
    )
    .unwrap();
    let back = load_model(&path).unwrap();
    assert_eq!(back.recurrence.as_ref(), Some(&r));
    let obs = [GaussianBelief::new(0.4, 0.02).unwrap()];
    let t = back
        .network
        .propagate_recurrent(&obs, r.steps, &r.wiring)
        .unwrap();
    assert_eq!(
        t,
        net.propagate_recurrent(&obs, r.steps, &r.wiring).unwrap()
    );
    assert_eq!(t.steps.len(), 4);
}

#[test]
fn recurrence_naming_an_unknown_node_is_rejected() {
    let dir = chain_dir();
    add_recurrence(dir.path(), "x = \"w\"");
    assert_eq!(
        NetworkConfig::load(&dir.path().join("net.toml"))
            .unwrap_err()
            .kind(),
        ErrorKind::Config
    );
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = chain_dir();
    let path = dir.path().join("net.toml");
    let text = fs::read_to_string(&path)
        .unwrap()
        .replace("noise = 0.01", "nosie = 0.01");
    fs::write(&path, text).unwrap();
    let err = NetworkConfig::load(&path).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Config);
    assert!(err.to_string().contains("nosie"), "{err}");
}

#[test]
fn forward_reference_is_rejected() {
    let dir = chain_dir();
    let path = dir.path().join("net.toml");
    let text = fs::read_to_string(&path)
        .unwrap()
        .replace("inputs = [\"x\"]", "inputs = [\"y\"]");
    fs::write(&path, text).unwrap();
    assert_eq!(
        NetworkConfig::load(&path).unwrap_err().kind(),
        ErrorKind::Config
    );
}

#[test]
fn missing_dataset_is_a_data_error_naming_the_node() {
    let dir = chain_dir();
    fs::remove_file(dir.path().join("data/y.csv")).unwrap();
    let cfg = NetworkConfig::load(&dir.path().join("net.toml")).unwrap();
    let err = cfg.datasets().unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Data);
    assert!(err.to_string().contains("y.csv"), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn csv_round_trip_is_exact(
        rows in prop::collection::vec(prop::collection::vec(-1e6f64..1e6, 3), 1..20)
    ) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        write_csv(&path, &["a", "b", "c"], &rows).unwrap();
        let t = load_table(&path, None).unwrap();
        prop_assert_eq!(t.nrows(), rows.len());
        for (i, row) in rows.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                prop_assert_eq!(t.data[(i, j)].to_bits(), v.to_bits());
            }
        }
    }
}

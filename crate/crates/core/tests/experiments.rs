use std::path::Path;

use rand::Rng;
use stackedgp::experiments::{
    fold_labels, run_forestfire, run_jura, run_puff, ForestFireConfig, JuraConfig, JuraStructure,
    PuffConfig, JURA_COLUMNS,
};
use stackedgp::io::write_csv;
use stackedgp::rng;
use stackedgp::Error;

/// Smooth positive metal fields over a 5 km square.
fn jura_rows(n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng::stream(seed, &[]);
    (0..n)
        .map(|_| {
            let (x, y): (f64, f64) = (r.gen_range(0.0..5.0), r.gen_range(0.0..5.0));
            let mut e = || -> f64 { 0.05 * r.gen_range(-1.0..1.0) };
            let zn = (4.0 + 0.3 * (1.2 * x).sin() + 0.1 * y + e()).exp();
            let ni = (3.0 + 0.2 * (0.9 * y).cos() - 0.05 * x + e()).exp();
            let co = (2.0 + 0.4 * ni.ln() - 0.1 * x + e()).exp();
            let cr = (3.5 + 0.3 * zn.ln() - 1.0 + e()).exp();
            let cd = (0.2 * zn.ln() + 0.3 * co.ln() - 1.5 + e()).exp();
            vec![x, y, cd, co, cr, ni, zn]
        })
        .collect()
}

fn write_jura(dir: &Path) {
    write_csv(
        &dir.join("jura_train.csv"),
        &JURA_COLUMNS,
        &jura_rows(50, 1),
    )
    .unwrap();
    write_csv(&dir.join("jura_test.csv"), &JURA_COLUMNS, &jura_rows(15, 2)).unwrap();
}

fn jura(dir: &Path, s: JuraStructure) -> JuraConfig {
    JuraConfig {
        restarts: 1,
        ..JuraConfig::in_dir(dir, s)
    }
}

#[test]
fn jura_feed_through_matches_direct_inputs() {
    let dir = tempfile::tempdir().unwrap();
    write_jura(dir.path());
    let direct = run_jura(&jura(dir.path(), JuraStructure::StandardZnNi), 3, None).unwrap();
    let fed = run_jura(&jura(dir.path(), JuraStructure::TwoLayer), 3, None).unwrap();
    assert!(direct.mae.is_finite());
    assert!(
        (direct.mae - fed.mae).abs() <= 1e-6,
        "{} vs {}",
        direct.mae,
        fed.mae
    );
    for (a, b) in direct.points.iter().zip(&fed.points) {
        assert!((a.mean - b.mean).abs() <= 1e-9 * a.mean.abs());
    }
}

#[test]
fn jura_co_cr_runs_on_all_rows() {
    let dir = tempfile::tempdir().unwrap();
    write_jura(dir.path());
    let rep = run_jura(&jura(dir.path(), JuraStructure::CoCr), 3, Some(2)).unwrap();
    assert_eq!((rep.n_train, rep.n_test, rep.points.len()), (50, 15, 15));
    assert!(rep.mae.is_finite() && rep.mae > 0.0);
    assert!(rep.points.iter().all(|p| p.variance >= 0.0));
}

#[test]
fn jura_rejects_nonpositive_concentration() {
    let dir = tempfile::tempdir().unwrap();
    write_jura(dir.path());
    let mut rows = jura_rows(10, 4);
    rows[3][4] = 0.0;
    write_csv(&dir.path().join("jura_test.csv"), &JURA_COLUMNS, &rows).unwrap();
    let err = run_jura(&jura(dir.path(), JuraStructure::Standard), 3, None).unwrap_err();
    assert!(matches!(err, Error::InvalidData(_)), "{err}");
}

const FIRE_HEADERS: [&str; 9] = [
    "temp", "RH", "wind", "rain", "FFMC", "DMC", "DC", "ISI", "area",
];

fn write_fires(path: &Path, n: usize) {
    let mut r = rng::stream(9, &[]);
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let temp: f64 = r.gen_range(5.0..30.0);
            let rh = r.gen_range(20.0..90.0);
            let wind = r.gen_range(0.5..8.0);
            let rain = if r.gen_bool(0.1) {
                r.gen_range(0.0..2.0)
            } else {
                0.0
            };
            let ffmc = 80.0 + 0.4 * temp - 0.1 * rh + 0.3 * wind - 2.0 * rain;
            let dmc = 20.0 + 3.0 * temp - 0.5 * rh;
            let dc = 200.0 + 15.0 * temp - 20.0 * rain;
            let isi = 0.1 * ffmc + 0.8 * wind - 5.0;
            let area = if r.gen_bool(0.5) {
                0.0
            } else {
                (0.02 * isi * temp + r.gen_range(0.0..1.5f64)).exp() - 1.0
            };
            vec![temp, rh, wind, rain, ffmc, dmc, dc, isi, area.max(0.0)]
        })
        .collect();
    write_csv(path, &FIRE_HEADERS, &rows).unwrap();
}

#[test]
fn forest_fire_cross_validation_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    write_fires(&dir.path().join("forestfires.csv"), 60);
    let cfg = ForestFireConfig {
        folds: 3,
        restarts: 1,
        max_iters: 40,
        ..ForestFireConfig::in_dir(dir.path())
    };
    assert!(cfg.fwi.is_none());
    let a = run_forestfire(&cfg, 5, Some(1)).unwrap();
    let b = run_forestfire(&cfg, 5, Some(3)).unwrap();
    assert_eq!((a.n, a.folds, a.points.len()), (60, 3, 60));
    assert!(a.mae.is_finite() && a.rmse >= a.mae);
    assert_eq!(a.mae.to_bits(), b.mae.to_bits());
    assert_eq!(a.rmse.to_bits(), b.rmse.to_bits());
}

#[test]
fn forest_fire_missing_file_names_path() {
    let dir = tempfile::tempdir().unwrap();
    let err = run_forestfire(&ForestFireConfig::in_dir(dir.path()), 1, None).unwrap_err();
    assert!(err.to_string().contains("forestfires.csv"), "{err}");
}

#[test]
fn fold_labels_cover_every_fold() {
    let labels = fold_labels(517, 10, 2);
    let mut counts = [0usize; 10];
    for l in &labels {
        counts[*l] += 1;
    }
    assert!(counts.iter().all(|c| (51..=52).contains(c)), "{counts:?}");
    assert_eq!(labels, fold_labels(517, 10, 2));
}

#[test]
fn short_puff_run_reports_requested_steps() {
    let cfg = PuffConfig {
        trajectories: 4,
        steps: 4,
        mc_samples: 200,
        report_steps: vec![2, 4],
        histogram_step: 2,
        histogram_bins: 10,
        restarts: 1,
        ..PuffConfig::default()
    };
    let rep = run_puff(&cfg, 1, None).unwrap();
    let ks: Vec<usize> = rep.rows.iter().map(|r| r.k).collect();
    assert_eq!(ks, vec![2, 4]);
    for row in &rep.rows {
        for s in ["x", "y", "d"] {
            assert!(row.analytic[s].std >= 0.0 && row.mc[s].se_mean > 0.0);
        }
        // the puff keeps moving downwind
        assert!(row.analytic["d"].mean > 0.0);
    }
    assert_eq!(rep.histograms.len(), 3);
    assert_eq!(rep.histograms["x"].counts.iter().sum::<u64>(), 200);
}

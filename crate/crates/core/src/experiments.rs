//! Truth models, data generators and drivers for the bundled experiments:
//! four synthetic composites, recurrent puff advection, the Jura heavy-metal
//! cascade and the forest-fire index chain.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{GaussianBelief, TrainOptions, TrainingSet};
use crate::io::{self, Table};
use crate::kernel::Kernel;
use crate::network::{
    BuildOptions, InputUncertainty, NetworkSpec, NodeSpec, Source, StackedNetwork, StateWiring,
};
use crate::oracle::{mc_propagate_recurrent, Histogram};
use crate::rng;

fn rbf_node(name: &str, inputs: Vec<Source>, restarts: usize) -> Result<NodeSpec> {
    let mut n = NodeSpec::new(
        name,
        inputs.clone(),
        Kernel::rbf(1.0, vec![1.0; inputs.len()])?,
    );
    n.options = TrainOptions {
        restarts,
        standardize_inputs: true,
        standardize_target: true,
        ..TrainOptions::default()
    };
    Ok(n)
}

fn node(layer: usize, index: usize) -> Source {
    Source::Node { layer, index }
}

/// One evaluated test point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointRow {
    pub inputs: Vec<f64>,
    pub truth: f64,
    pub mean: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: usize,
    pub rmse: f64,
    pub mae: f64,
    /// Mean of `|mean - truth| / std`.
    pub avg_ratio: f64,
}

impl Metrics {
    pub fn from_points(points: &[PointRow]) -> Metrics {
        let n = points.len().max(1) as f64;
        let err = |p: &PointRow| p.mean - p.truth;
        Metrics {
            n: points.len(),
            rmse: (points.iter().map(|p| err(p).powi(2)).sum::<f64>() / n).sqrt(),
            mae: points.iter().map(|p| err(p).abs()).sum::<f64>() / n,
            avg_ratio: points
                .iter()
                .map(|p| err(p).abs() / p.variance.sqrt())
                .sum::<f64>()
                / n,
        }
    }
}

/// Per-point CSV: input columns, then `true, pred_mean, pred_var`.
pub fn write_points(path: &Path, input_names: &[&str], points: &[PointRow]) -> Result<()> {
    let mut headers = input_names.to_vec();
    headers.extend(["true", "pred_mean", "pred_var"]);
    let rows: Vec<Vec<f64>> = points
        .iter()
        .map(|p| {
            let mut r = p.inputs.clone();
            r.extend([p.truth, p.mean, p.variance]);
            r
        })
        .collect();
    io::write_csv(path, &headers, &rows)
}

// ---------------------------------------------------------------- synthetic

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    /// `z_i = x_i^2`, `y = z1 + 2 z2`
    One,
    /// `z1 = ln x1`, `z2 = ln x2^3`, `y = sin sqrt(z1 + z2)`
    Two,
    /// `z_i = sin x_i`, `y = z1 z2`
    Three,
    /// `z_i = x_i^2`, `y = sqrt(z1 + z2) + 3 cos sqrt(z1 + z2) + 5`
    Four,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [
        Scenario::One,
        Scenario::Two,
        Scenario::Three,
        Scenario::Four,
    ];

    pub fn from_number(n: u32) -> Result<Scenario> {
        match n {
            1..=4 => Ok(Self::ALL[n as usize - 1]),
            _ => Err(Error::Config(format!("scenario must be 1-4, got {n}"))),
        }
    }

    pub fn number(self) -> u32 {
        Self::ALL.iter().position(|s| *s == self).unwrap() as u32 + 1
    }

    /// Input box for both `x1` and `x2`.
    pub fn domain(self) -> (f64, f64) {
        match self {
            Scenario::One | Scenario::Four => (-1.0, 1.0),
            Scenario::Two => (1.0, 3.0),
            Scenario::Three => (-std::f64::consts::PI, std::f64::consts::PI),
        }
    }

    pub fn first_layer(self, x: f64) -> [f64; 2] {
        match self {
            Scenario::One | Scenario::Four => [x * x, x * x],
            Scenario::Two => [x.ln(), 3.0 * x.ln()],
            Scenario::Three => [x.sin(), x.sin()],
        }
    }

    pub fn output(self, z1: f64, z2: f64) -> f64 {
        match self {
            Scenario::One => z1 + 2.0 * z2,
            Scenario::Two => (z1 + z2).sqrt().sin(),
            Scenario::Three => z1 * z2,
            Scenario::Four => {
                let r = (z1 + z2).sqrt();
                r + 3.0 * r.cos() + 5.0
            }
        }
    }

    /// `(z1, z2, y)` at `(x1, x2)`.
    pub fn truth(self, x1: f64, x2: f64) -> (f64, f64, f64) {
        let z1 = self.first_layer(x1)[0];
        let z2 = self.first_layer(x2)[1];
        (z1, z2, self.output(z1, z2))
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub d1: TrainingSet,
    pub d2: TrainingSet,
    pub d3: TrainingSet,
    /// Test grid rows `(x1, x2)`.
    pub test_x: Vec<[f64; 2]>,
    pub test_y: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub scenario: Scenario,
    pub n_train: usize,
    /// Test grid points along `x1` and `x2`.
    pub grid: (usize, usize),
    pub restarts: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::One,
            n_train: 200,
            grid: (20, 10),
            restarts: 5,
        }
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

/// Noiseless training sets for the two first-layer nodes and the output node
/// (inputs drawn uniformly over the domain), plus the test grid.
pub fn synth_generate(cfg: &SyntheticConfig, seed: u64) -> Result<SyntheticData> {
    let s = cfg.scenario;
    let (lo, hi) = s.domain();
    let mut r = rng::stream(seed, &[rng::tag::DATA, s.number() as u64]);
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| r.gen_range(lo..=hi)).collect() };
    let n = cfg.n_train;
    let x1 = draw(n);
    let x2 = draw(n);
    let (a, b) = (draw(n), draw(n));
    let named = |x: Vec<f64>, m: usize, y: Vec<f64>, inputs: &[&str], target: &str| {
        TrainingSet::with_names(
            DMatrix::from_row_slice(y.len(), m, &x),
            DVector::from_vec(y),
            inputs.iter().map(|s| s.to_string()).collect(),
            target.to_string(),
        )
    };
    let d1 = named(
        x1.clone(),
        1,
        x1.iter().map(|x| s.first_layer(*x)[0]).collect(),
        &["x1"],
        "z1",
    )?;
    let d2 = named(
        x2.clone(),
        1,
        x2.iter().map(|x| s.first_layer(*x)[1]).collect(),
        &["x2"],
        "z2",
    )?;
    let mut z = Vec::with_capacity(2 * n);
    let mut y = Vec::with_capacity(n);
    for (p, q) in a.iter().zip(&b) {
        let (z1, z2, v) = s.truth(*p, *q);
        z.extend([z1, z2]);
        y.push(v);
    }
    let d3 = named(z, 2, y, &["z1", "z2"], "y")?;
    let mut test_x = Vec::new();
    let mut test_y = Vec::new();
    for u in linspace(lo, hi, cfg.grid.0) {
        for v in linspace(lo, hi, cfg.grid.1) {
            test_x.push([u, v]);
            test_y.push(s.truth(u, v).2);
        }
    }
    Ok(SyntheticData {
        d1,
        d2,
        d3,
        test_x,
        test_y,
    })
}

/// `x1 -> z1`, `x2 -> z2`, `(z1, z2) -> y`.
pub fn synth_spec(restarts: usize) -> Result<NetworkSpec> {
    Ok(NetworkSpec {
        observed: vec!["x1".into(), "x2".into()],
        layers: vec![
            vec![
                rbf_node("z1", vec![Source::Observed(0)], restarts)?,
                rbf_node("z2", vec![Source::Observed(1)], restarts)?,
            ],
            vec![rbf_node("y", vec![node(0, 0), node(0, 1)], restarts)?],
        ],
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticReport {
    pub scenario: u32,
    pub n_train: usize,
    pub metrics: Metrics,
    #[serde(skip)]
    pub points: Vec<PointRow>,
}

pub fn run_synthetic(
    cfg: &SyntheticConfig,
    seed: u64,
    jobs: Option<usize>,
) -> Result<SyntheticReport> {
    let data = synth_generate(cfg, seed)?;
    let net = StackedNetwork::build_and_train(
        synth_spec(cfg.restarts)?,
        &[data.d1, data.d2, data.d3],
        BuildOptions { seed, jobs },
    )?;
    let points = data
        .test_x
        .iter()
        .zip(&data.test_y)
        .map(|(x, y)| {
            let t =
                net.propagate(&[GaussianBelief::certain(x[0]), GaussianBelief::certain(x[1])])?;
            let b = t.output("y").expect("y node");
            Ok(PointRow {
                inputs: x.to_vec(),
                truth: *y,
                mean: b.mean,
                variance: b.variance,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticReport {
        scenario: cfg.scenario.number(),
        n_train: cfg.n_train,
        metrics: Metrics::from_points(&points),
        points,
    })
}

// --------------------------------------------------------------------- puff

/// Puff centre (km) and downwind path length (km).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PuffState {
    pub x: f64,
    pub y: f64,
    pub d: f64,
}

impl PuffState {
    pub fn at(x: f64, y: f64) -> Self {
        Self { x, y, d: 0.0 }
    }

    /// Puff radius `p d^q` (km); informational only.
    pub fn radius(&self, p: f64, q: f64) -> f64 {
        p * self.d.powf(q)
    }
}

/// One Euler step with winds in m/s and `dt` in s.
pub fn puff_truth_step(s: PuffState, ux: f64, uy: f64, dt: f64) -> PuffState {
    let k = dt / 1000.0;
    PuffState {
        x: s.x + ux * k,
        y: s.y + uy * k,
        d: s.d + ux.hypot(uy) * k,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PuffConfig {
    pub trajectories: usize,
    pub steps: usize,
    /// Seconds.
    pub dt: f64,
    /// Release point (km).
    pub release: (f64, f64),
    /// Wind component distribution (m/s).
    pub wind_mean: f64,
    pub wind_std: f64,
    /// Sensor grid: `sensors_per_side^2` sensors, `sensor_spacing` km apart,
    /// starting at the origin.
    pub sensors_per_side: usize,
    pub sensor_spacing: f64,
    pub mc_samples: usize,
    /// Steps listed in the summary table.
    pub report_steps: Vec<usize>,
    /// Step whose MC histograms are exported.
    pub histogram_step: usize,
    pub histogram_bins: usize,
    /// Radius coefficients `p`, `q`.
    pub radius_coefficients: (f64, f64),
    pub restarts: usize,
    /// How the wind nodes treat positional uncertainty.
    pub wind_inputs: InputUncertainty,
}

impl Default for PuffConfig {
    fn default() -> Self {
        Self {
            trajectories: 15,
            steps: 20,
            dt: 90.0,
            release: (6.0, 6.0),
            wind_mean: 4.0,
            wind_std: 1.0,
            sensors_per_side: 4,
            sensor_spacing: 4.0,
            mc_samples: 1000,
            report_steps: vec![5, 10, 15, 20],
            histogram_step: 10,
            histogram_bins: 30,
            radius_coefficients: (0.465, 0.824),
            restarts: 3,
            wind_inputs: InputUncertainty::MeanOnly,
        }
    }
}

/// Emulator training rows `(x, y, u_x, u_y) -> (x', y', d')`.
#[derive(Debug, Clone, PartialEq)]
pub struct PuffTrajectories {
    pub inputs: DMatrix<f64>,
    pub next: Vec<PuffState>,
}

impl PuffTrajectories {
    pub fn len(&self) -> usize {
        self.next.len()
    }

    pub fn is_empty(&self) -> bool {
        self.next.is_empty()
    }

    fn target(&self, name: &str, f: impl Fn(&PuffState) -> f64) -> Result<TrainingSet> {
        TrainingSet::with_names(
            self.inputs.clone(),
            DVector::from_iterator(self.len(), self.next.iter().map(f)),
            ["x", "y", "u_x", "u_y"].map(String::from).to_vec(),
            name.to_string(),
        )
    }

    pub fn sets(&self) -> Result<[TrainingSet; 3]> {
        Ok([
            self.target("x_next", |s| s.x)?,
            self.target("y_next", |s| s.y)?,
            self.target("d_next", |s| s.d)?,
        ])
    }
}

fn wind(cfg: &PuffConfig) -> Result<Normal<f64>> {
    Normal::new(cfg.wind_mean, cfg.wind_std)
        .map_err(|e| Error::Config(format!("wind distribution: {e}")))
}

/// Trajectories from the release point with an independent wind draw per
/// component per step.
pub fn puff_training_trajectories(cfg: &PuffConfig, seed: u64) -> Result<PuffTrajectories> {
    let w = wind(cfg)?;
    let mut rows = Vec::with_capacity(cfg.trajectories * cfg.steps * 4);
    let mut next = Vec::with_capacity(cfg.trajectories * cfg.steps);
    for t in 0..cfg.trajectories {
        let mut r = rng::stream(seed, &[rng::tag::DATA, 1, t as u64]);
        let mut s = PuffState::at(cfg.release.0, cfg.release.1);
        for _ in 0..cfg.steps {
            let (ux, uy) = (w.sample(&mut r), w.sample(&mut r));
            rows.extend([s.x, s.y, ux, uy]);
            s = puff_truth_step(s, ux, uy, cfg.dt);
            next.push(s);
        }
    }
    Ok(PuffTrajectories {
        inputs: DMatrix::from_row_slice(next.len(), 4, &rows),
        next,
    })
}

/// Sensor positions and their i.i.d. wind readings, as `(u_x set, u_y set)`.
pub fn puff_sensor_data(cfg: &PuffConfig, seed: u64) -> Result<(TrainingSet, TrainingSet)> {
    let w = wind(cfg)?;
    let mut r = rng::stream(seed, &[rng::tag::DATA, 2]);
    let n = cfg.sensors_per_side;
    let mut pos = Vec::with_capacity(2 * n * n);
    let (mut ux, mut uy) = (Vec::new(), Vec::new());
    for i in 0..n {
        for j in 0..n {
            pos.extend([i as f64 * cfg.sensor_spacing, j as f64 * cfg.sensor_spacing]);
            ux.push(w.sample(&mut r));
            uy.push(w.sample(&mut r));
        }
    }
    let x = DMatrix::from_row_slice(n * n, 2, &pos);
    let names = vec!["x".to_string(), "y".to_string()];
    Ok((
        TrainingSet::with_names(
            x.clone(),
            DVector::from_vec(ux),
            names.clone(),
            "u_x".into(),
        )?,
        TrainingSet::with_names(x, DVector::from_vec(uy), names, "u_y".into())?,
    ))
}

/// Wind nodes `u_x(x, y)`, `u_y(x, y)` feeding the emulator nodes `h_x`,
/// `h_y`, `h_d` of `(x, y, u_x, u_y)`.
pub fn puff_spec(restarts: usize, wind_inputs: InputUncertainty) -> Result<NetworkSpec> {
    let obs = vec![Source::Observed(0), Source::Observed(1)];
    let mut wind = Vec::new();
    for name in ["u_x", "u_y"] {
        let mut n = rbf_node(name, obs.clone(), restarts)?;
        n.input_uncertainty = wind_inputs;
        wind.push(n);
    }
    let inputs = vec![
        Source::Observed(0),
        Source::Observed(1),
        node(0, 0),
        node(0, 1),
    ];
    let emulators = ["h_x", "h_y", "h_d"]
        .iter()
        .map(|name| {
            let mut n = rbf_node(name, inputs.clone(), restarts)?;
            n.ica = false;
            Ok(n)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(NetworkSpec {
        observed: vec!["x".into(), "y".into()],
        layers: vec![wind, emulators],
    })
}

pub fn puff_wiring() -> StateWiring {
    StateWiring {
        links: vec![("h_x".into(), 0), ("h_y".into(), 1)],
    }
}

pub fn puff_network(cfg: &PuffConfig, seed: u64, jobs: Option<usize>) -> Result<StackedNetwork> {
    let (sx, sy) = puff_sensor_data(cfg, seed)?;
    let [hx, hy, hd] = puff_training_trajectories(cfg, seed)?.sets()?;
    StackedNetwork::build_and_train(
        puff_spec(cfg.restarts, cfg.wind_inputs)?,
        &[sx, sy, hx, hy, hd],
        BuildOptions { seed, jobs },
    )
}

/// Mean and standard deviation of one state variable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub mean: f64,
    pub std: f64,
    pub se_mean: f64,
    pub se_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PuffRow {
    pub k: usize,
    pub analytic: BTreeMap<String, Summary>,
    pub mc: BTreeMap<String, McSummary>,
    /// Radius at the analytic mean downwind distance.
    pub radius: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PuffReport {
    pub mc_samples: usize,
    pub rows: Vec<PuffRow>,
    /// MC histograms at `histogram_step`, keyed by state name.
    #[serde(skip)]
    pub histograms: BTreeMap<String, Histogram>,
}

pub const PUFF_STATES: [(&str, &str); 3] = [("x", "h_x"), ("y", "h_y"), ("d", "h_d")];

pub fn run_puff(cfg: &PuffConfig, seed: u64, jobs: Option<usize>) -> Result<PuffReport> {
    let net = puff_network(cfg, seed, jobs)?;
    let wiring = puff_wiring();
    let initial = [
        GaussianBelief::certain(cfg.release.0),
        GaussianBelief::certain(cfg.release.1),
    ];
    let trace = net.propagate_recurrent(&initial, cfg.steps, &wiring)?;
    let mc = crate::network::with_jobs(jobs, || {
        mc_propagate_recurrent(
            &net,
            &initial,
            cfg.steps,
            &wiring,
            cfg.mc_samples,
            seed,
            jobs,
        )
    })??;
    let mut rows = Vec::new();
    for &k in cfg
        .report_steps
        .iter()
        .filter(|k| (1..=cfg.steps).contains(*k))
    {
        let mut analytic = BTreeMap::new();
        let mut sampled = BTreeMap::new();
        for (state, node) in PUFF_STATES {
            let b = trace.output_at(k, node).expect("node in trace");
            analytic.insert(
                state.to_string(),
                Summary {
                    mean: b.mean,
                    std: b.std(),
                },
            );
            let s = mc.stat(k, node).expect("node in mc");
            sampled.insert(
                state.to_string(),
                McSummary {
                    mean: s.mean,
                    std: s.std(),
                    se_mean: s.se_mean,
                    se_std: s.se_std(),
                },
            );
        }
        let (p, q) = cfg.radius_coefficients;
        rows.push(PuffRow {
            k,
            radius: PuffState {
                x: 0.0,
                y: 0.0,
                d: analytic["d"].mean,
            }
            .radius(p, q),
            analytic,
            mc: sampled,
        });
    }
    let mut histograms = BTreeMap::new();
    if (1..=cfg.steps).contains(&cfg.histogram_step) {
        for (state, node) in PUFF_STATES {
            let s = mc.stat(cfg.histogram_step, node).expect("node in mc");
            histograms.insert(state.to_string(), s.histogram(cfg.histogram_bins));
        }
    }
    Ok(PuffReport {
        mc_samples: cfg.mc_samples,
        rows,
        histograms,
    })
}

// --------------------------------------------------------------------- jura

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JuraStructure {
    /// `Cd(X, Y)`
    Standard,
    /// `Cd(X, Y, Zn, Ni)` with Zn and Ni measured at the test sites.
    StandardZnNi,
    /// `Zn(X, Y)`, `Ni(X, Y)` -> `Cd(X, Y, Zn, Ni)`; measured Zn and Ni are
    /// fed through as zero-variance overrides.
    TwoLayer,
    /// As `TwoLayer`, with `Co` and `Cr` of `(X, Y, Zn, Ni)` as a middle
    /// layer and `Cd(X, Y, Zn, Ni, Co, Cr)` on top.
    CoCr,
}

impl std::str::FromStr for JuraStructure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "standard" => JuraStructure::Standard,
            "standard_zn_ni" => JuraStructure::StandardZnNi,
            "two_layer" => JuraStructure::TwoLayer,
            "co_cr" => JuraStructure::CoCr,
            other => {
                return Err(Error::Config(format!(
                    "unknown jura structure `{other}` (standard, standard_zn_ni, two_layer, co_cr)"
                )))
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JuraConfig {
    /// Training sites (the 259-row prediction set).
    pub train: PathBuf,
    /// Held-out sites (the 100-row validation set).
    pub test: PathBuf,
    pub structure: JuraStructure,
    pub restarts: usize,
    pub ica: bool,
}

impl JuraConfig {
    /// `jura_train.csv` and `jura_test.csv` inside `dir`.
    pub fn in_dir(dir: &Path, structure: JuraStructure) -> Self {
        Self {
            train: dir.join("jura_train.csv"),
            test: dir.join("jura_test.csv"),
            structure,
            restarts: 5,
            ica: false,
        }
    }
}

pub const JURA_COLUMNS: [&str; 7] = ["X", "Y", "Cd", "Co", "Cr", "Ni", "Zn"];

fn load_jura(path: &Path) -> Result<Table> {
    let cols: Vec<String> = JURA_COLUMNS.iter().map(|s| s.to_string()).collect();
    let t = io::load_table(path, Some(&cols))?;
    if t.data.columns(2, 5).iter().any(|v| *v <= 0.0) {
        return Err(Error::InvalidData(format!(
            "{}: concentrations must be positive for the log transform",
            path.display()
        )));
    }
    Ok(t)
}

fn log_columns(t: &Table) -> Table {
    let mut t = t.clone();
    for j in 2..t.headers.len() {
        t.data.column_mut(j).apply(|v| *v = v.ln());
    }
    t
}

pub fn jura_spec(cfg: &JuraConfig) -> Result<NetworkSpec> {
    let r = cfg.restarts;
    let xy = || vec![Source::Observed(0), Source::Observed(1)];
    let with_ica = |mut n: NodeSpec| {
        n.ica = cfg.ica;
        n
    };
    let layers = match cfg.structure {
        JuraStructure::Standard => vec![vec![rbf_node("Cd", xy(), r)?]],
        JuraStructure::StandardZnNi => vec![vec![rbf_node(
            "Cd",
            vec![
                Source::Observed(0),
                Source::Observed(1),
                Source::Observed(2),
                Source::Observed(3),
            ],
            r,
        )?]],
        JuraStructure::TwoLayer => vec![
            vec![rbf_node("Zn", xy(), r)?, rbf_node("Ni", xy(), r)?],
            vec![with_ica(rbf_node(
                "Cd",
                vec![
                    Source::Observed(0),
                    Source::Observed(1),
                    node(0, 0),
                    node(0, 1),
                ],
                r,
            )?)],
        ],
        JuraStructure::CoCr => {
            let mid = vec![
                Source::Observed(0),
                Source::Observed(1),
                node(0, 0),
                node(0, 1),
            ];
            let mut top = mid.clone();
            top.extend([node(1, 0), node(1, 1)]);
            vec![
                vec![rbf_node("Zn", xy(), r)?, rbf_node("Ni", xy(), r)?],
                vec![
                    with_ica(rbf_node("Co", mid.clone(), r)?),
                    with_ica(rbf_node("Cr", mid, r)?),
                ],
                vec![with_ica(rbf_node("Cd", top, r)?)],
            ]
        }
    };
    let observed = match cfg.structure {
        JuraStructure::StandardZnNi => vec!["X", "Y", "Zn", "Ni"],
        _ => vec!["X", "Y"],
    };
    Ok(NetworkSpec {
        observed: observed.into_iter().map(String::from).collect(),
        layers,
    })
}

/// Node training sets for a structure, on log concentrations.
fn jura_datasets(spec: &NetworkSpec, train: &Table) -> Result<Vec<TrainingSet>> {
    spec.nodes()
        .map(|(_, _, n)| {
            let inputs: Vec<&str> = n
                .inputs
                .iter()
                .map(|s| match *s {
                    Source::Observed(i) => spec.observed[i].as_str(),
                    Source::Node { layer, index } => spec.layers[layer][index].name.as_str(),
                })
                .collect();
            io::training_set(train, &inputs, &n.name, |v| v)
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JuraReport {
    pub structure: JuraStructure,
    pub n_train: usize,
    pub n_test: usize,
    /// Cd mean absolute error in mg/kg, predicting `exp` of the log-space mean.
    pub mae: f64,
    #[serde(skip)]
    pub points: Vec<PointRow>,
}

pub fn run_jura(cfg: &JuraConfig, seed: u64, jobs: Option<usize>) -> Result<JuraReport> {
    let train = load_jura(&cfg.train)?;
    let test = load_jura(&cfg.test)?;
    let (ltrain, ltest) = (log_columns(&train), log_columns(&test));
    let spec = jura_spec(cfg)?;
    let data = jura_datasets(&spec, &ltrain)?;
    let net = StackedNetwork::build_and_train(spec, &data, BuildOptions { seed, jobs })?;
    let col = |name: &str| test.column_index(name).expect("jura column");
    let points = (0..test.nrows())
        .map(|i| {
            let v = |name: &str| ltest.data[(i, col(name))];
            let mut observed = vec![
                GaussianBelief::certain(v("X")),
                GaussianBelief::certain(v("Y")),
            ];
            let mut overrides = BTreeMap::new();
            match cfg.structure {
                JuraStructure::Standard => {}
                JuraStructure::StandardZnNi => {
                    observed.push(GaussianBelief::certain(v("Zn")));
                    observed.push(GaussianBelief::certain(v("Ni")));
                }
                JuraStructure::TwoLayer | JuraStructure::CoCr => {
                    overrides.insert("Zn".to_string(), GaussianBelief::certain(v("Zn")));
                    overrides.insert("Ni".to_string(), GaussianBelief::certain(v("Ni")));
                }
            }
            let b = net
                .propagate_with_overrides(&observed, &overrides)?
                .output("Cd")
                .expect("Cd node");
            Ok(PointRow {
                inputs: vec![test.data[(i, col("X"))], test.data[(i, col("Y"))]],
                truth: test.data[(i, col("Cd"))],
                mean: b.mean.exp(),
                variance: b.variance,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mae = points.iter().map(|p| (p.mean - p.truth).abs()).sum::<f64>() / points.len() as f64;
    Ok(JuraReport {
        structure: cfg.structure,
        n_train: train.nrows(),
        n_test: test.nrows(),
        mae,
        points,
    })
}

// --------------------------------------------------------------- forest fire

/// Moments of `B` when `ln B ~ N(mu, var)`.
pub fn lognormal_backtransform(log: GaussianBelief) -> GaussianBelief {
    let (mu, s2) = (log.mean, log.variance);
    GaussianBelief {
        mean: (mu + 0.5 * s2).exp(),
        variance: s2.exp_m1() * (2.0 * mu + s2).exp(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestFireConfig {
    /// Fire records (UCI layout: temp, RH, wind, rain, FFMC, DMC, DC, ISI, area).
    pub fires: PathBuf,
    /// Optional separate weather-to-index table for the index nodes; when
    /// absent they train on the training folds of `fires`.
    pub fwi: Option<PathBuf>,
    pub folds: usize,
    pub restarts: usize,
    pub max_iters: usize,
}

impl ForestFireConfig {
    /// `forestfires.csv` (and `fwi.csv` if present) inside `dir`.
    pub fn in_dir(dir: &Path) -> Self {
        let fwi = dir.join("fwi.csv");
        Self {
            fires: dir.join("forestfires.csv"),
            fwi: fwi.exists().then_some(fwi),
            folds: 10,
            restarts: 2,
            max_iters: 100,
        }
    }
}

const FIRE_COLUMNS: [&str; 9] = [
    "temp", "RH", "wind", "rain", "FFMC", "DMC", "DC", "ISI", "area",
];

/// `FFMC(T, RH, W, P)`, `DMC(T, RH, P)`, `DC(T, P)` -> `ISI(W, FFMC)` ->
/// `area(FFMC, DMC, DC, ISI)` on `ln(area + 1)`.
pub fn forestfire_spec(cfg: &ForestFireConfig) -> Result<NetworkSpec> {
    let o = Source::Observed;
    let mk = |name: &str, inputs: Vec<Source>| -> Result<NodeSpec> {
        let mut n = rbf_node(name, inputs, cfg.restarts)?;
        n.options.max_iters = cfg.max_iters;
        Ok(n)
    };
    Ok(NetworkSpec {
        observed: ["temp", "RH", "wind", "rain"].map(String::from).to_vec(),
        layers: vec![
            vec![
                mk("FFMC", vec![o(0), o(1), o(2), o(3)])?,
                mk("DMC", vec![o(0), o(1), o(3)])?,
                mk("DC", vec![o(0), o(3)])?,
            ],
            vec![mk("ISI", vec![o(2), node(0, 0)])?],
            vec![mk(
                "area",
                vec![node(0, 0), node(0, 1), node(0, 2), node(1, 0)],
            )?],
        ],
    })
}

fn fire_datasets(
    spec: &NetworkSpec,
    fires: &Table,
    fwi: Option<&Table>,
) -> Result<Vec<TrainingSet>> {
    spec.nodes()
        .map(|(_, _, n)| {
            let inputs: Vec<&str> = n
                .inputs
                .iter()
                .map(|s| match *s {
                    Source::Observed(i) => spec.observed[i].as_str(),
                    Source::Node { layer, index } => spec.layers[layer][index].name.as_str(),
                })
                .collect();
            if n.name == "area" {
                io::training_set(fires, &inputs, "area", |a| (a + 1.0).ln())
            } else {
                io::training_set(fwi.unwrap_or(fires), &inputs, &n.name, |v| v)
            }
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForestFireReport {
    pub n: usize,
    pub folds: usize,
    /// Hectares, using the log-normal mean minus one as the point prediction.
    pub mae: f64,
    pub rmse: f64,
    #[serde(skip)]
    pub points: Vec<PointRow>,
}

/// Fold label per row from a seeded shuffle.
pub fn fold_labels(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[rng::tag::FOLDS]));
    let mut labels = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        labels[i] = pos % folds;
    }
    labels
}

pub fn run_forestfire(
    cfg: &ForestFireConfig,
    seed: u64,
    jobs: Option<usize>,
) -> Result<ForestFireReport> {
    if cfg.folds < 2 {
        return Err(Error::Config("forest fire needs at least 2 folds".into()));
    }
    let cols: Vec<String> = FIRE_COLUMNS.iter().map(|s| s.to_string()).collect();
    let fires = io::load_table(&cfg.fires, Some(&cols))?;
    let fwi = match &cfg.fwi {
        Some(p) => Some(io::load_table(p, Some(&cols[..8]))?),
        None => None,
    };
    let spec = forestfire_spec(cfg)?;
    let labels = fold_labels(fires.nrows(), cfg.folds, seed);
    let mut points: Vec<(usize, PointRow)> = Vec::with_capacity(fires.nrows());
    for f in 0..cfg.folds {
        let train_rows: Vec<usize> = (0..fires.nrows()).filter(|i| labels[*i] != f).collect();
        let test_rows: Vec<usize> = (0..fires.nrows()).filter(|i| labels[*i] == f).collect();
        let train = fires.select_rows(&train_rows);
        let data = fire_datasets(&spec, &train, fwi.as_ref())?;
        let net = StackedNetwork::build_and_train(
            spec.clone(),
            &data,
            BuildOptions {
                seed: rng::derive_seed(seed, &[rng::tag::FOLDS, f as u64]),
                jobs,
            },
        )?;
        log::info!("forest fire fold {}/{} trained", f + 1, cfg.folds);
        for i in test_rows {
            let x: Vec<f64> = (0..4).map(|j| fires.data[(i, j)]).collect();
            let obs: Vec<GaussianBelief> = x.iter().map(|v| GaussianBelief::certain(*v)).collect();
            let b =
                lognormal_backtransform(net.propagate(&obs)?.output("area").expect("area node"));
            points.push((
                i,
                PointRow {
                    inputs: x,
                    truth: fires.data[(i, 8)],
                    mean: b.mean - 1.0,
                    variance: b.variance,
                },
            ));
        }
    }
    points.sort_by_key(|(i, _)| *i);
    let points: Vec<PointRow> = points.into_iter().map(|(_, p)| p).collect();
    let m = Metrics::from_points(&points);
    Ok(ForestFireReport {
        n: points.len(),
        folds: cfg.folds,
        mae: m.mae,
        rmse: m.rmse,
        points,
    })
}

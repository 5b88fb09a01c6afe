use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use stackedgp::experiments::{
    self, ForestFireConfig, JuraConfig, JuraStructure, PuffConfig, Scenario, SyntheticConfig,
};
use stackedgp::io::{self, Model, NetworkConfig};
use stackedgp::network::{
    with_jobs, BuildOptions, InputUncertainty, PropagationTrace, StackedNetwork,
};
use stackedgp::oracle::{mc_propagate, mc_propagate_recurrent, McResult};
use stackedgp::{Error, ErrorKind, GaussianBelief, Kernel, Result};

/// Train, query and check stacked Gaussian-process networks.
#[derive(Parser)]
#[command(name = "stackedgp", version)]
struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Output directory; nothing is written elsewhere.
    #[arg(long)]
    out: PathBuf,
    /// Root seed for every random stream (default 1, or the config's for `train`).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
}

impl Common {
    fn seed(&self) -> u64 {
        self.seed.unwrap_or(1)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a network declared in a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Standard GP predictions of one node at certain inputs.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        node: String,
        /// CSV whose columns are named after the node inputs.
        #[arg(long)]
        inputs: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Analytic propagation of observed beliefs through the network.
    Propagate {
        #[arg(long)]
        model: PathBuf,
        /// CSV with one column per observed slot and optional `<slot>_var`.
        #[arg(long)]
        inputs: PathBuf,
        /// Also sample N Monte Carlo paths per row and compare.
        #[arg(long)]
        mc: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Monte Carlo propagation with histogram export.
    Mc {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        inputs: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long, default_value_t = 30)]
        bins: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Run a bundled experiment.
    Experiment {
        #[command(subcommand)]
        which: Experiment,
    },
}

#[derive(Subcommand)]
enum Experiment {
    /// Synthetic two-layer composites.
    Synthetic {
        #[arg(long, default_value_t = 1)]
        scenario: u32,
        #[arg(long, default_value_t = 200)]
        n_train: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Recurrent puff advection, analytic against Monte Carlo.
    Puff {
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 20)]
        steps: usize,
        /// Propagate positional uncertainty into the wind nodes instead of
        /// evaluating them at the mean position.
        #[arg(long)]
        wind_propagate: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Jura cadmium from locations and co-located metals.
    Jura {
        /// standard, standard_zn_ni, two_layer or co_cr.
        #[arg(long, default_value = "co_cr")]
        structure: String,
        /// Directory holding jura_train.csv and jura_test.csv.
        #[arg(long, env = "STACKEDGP_DATA_DIR", default_value = "data")]
        data_dir: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Forest-fire burned area through fire-weather indices, k-fold CV.
    Forestfire {
        /// Directory holding forestfires.csv (and optionally fwi.csv).
        #[arg(long, env = "STACKEDGP_DATA_DIR", default_value = "data")]
        data_dir: PathBuf,
        #[arg(long, default_value_t = 10)]
        folds: usize,
        #[command(flatten)]
        common: Common,
    },
}

fn prepare(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })
}

#[derive(Serialize)]
struct NodeSummary {
    name: String,
    layer: usize,
    log_likelihood: f64,
    iterations: usize,
    converged: bool,
    noise: f64,
    kernel: Kernel,
    ica: bool,
}

fn train(config: &Path, c: &Common) -> Result<()> {
    let cfg = NetworkConfig::load(config)?;
    let spec = cfg.spec()?;
    let data = cfg.datasets()?;
    let seed = c.seed.or(cfg.seed).unwrap_or(1);
    let net = StackedNetwork::build_and_train(spec, &data, BuildOptions { seed, jobs: c.jobs })?;
    prepare(&c.out)?;
    let model = Model {
        network: net,
        recurrence: cfg.recurrence(),
    };
    io::save_model(&model, &c.out.join("model.sgp"))?;
    let net = &model.network;
    let nodes: Vec<NodeSummary> = net
        .layers()
        .iter()
        .enumerate()
        .flat_map(|(l, layer)| {
            layer.iter().map(move |n| NodeSummary {
                name: n.spec.name.clone(),
                layer: l,
                log_likelihood: n.gp.log_marginal_likelihood(),
                iterations: n.gp.report().map_or(0, |r| r.iterations),
                converged: n.gp.report().is_none_or(|r| r.converged),
                noise: n.gp.noise(),
                kernel: n.gp.kernel().clone(),
                ica: n.ica.is_some(),
            })
        })
        .collect();
    for n in &nodes {
        println!(
            "{:<12} layer {}  log-likelihood {:>12.4}  iterations {:>4}",
            n.name, n.layer, n.log_likelihood, n.iterations
        );
    }
    io::write_json(
        &c.out.join("train_report.json"),
        &serde_json::json!({ "seed": seed, "nodes": nodes }),
    )
}

fn predict(model: &Path, node: &str, inputs: &Path, c: &Common) -> Result<()> {
    let net = io::load_model(model)?.network;
    let n = net
        .node(node)
        .ok_or_else(|| Error::Config(format!("model has no node `{node}`")))?;
    let names: Vec<String> = n
        .spec
        .inputs
        .iter()
        .map(|s| match *s {
            stackedgp::network::Source::Observed(i) => net.spec().observed[i].clone(),
            stackedgp::network::Source::Node { layer, index } => {
                net.spec().layers[layer][index].name.clone()
            }
        })
        .collect();
    let table = io::load_table(inputs, Some(&names))?;
    let rows = table
        .data
        .row_iter()
        .map(|r| {
            let x: Vec<f64> = r.iter().copied().collect();
            let b = net.predict_node(node, &x)?;
            let mut row = x;
            row.extend([b.mean, b.variance]);
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    prepare(&c.out)?;
    let mut headers: Vec<&str> = names.iter().map(String::as_str).collect();
    headers.extend(["mean", "variance"]);
    io::write_csv(&c.out.join("predictions.csv"), &headers, &rows)?;
    println!("{} predictions from node `{node}`", rows.len());
    Ok(())
}

/// Observed beliefs per input row: slot columns plus optional `<slot>_var`.
fn read_beliefs(net: &StackedNetwork, path: &Path) -> Result<Vec<Vec<GaussianBelief>>> {
    let all = io::load_table(path, None)?;
    let mut cols = Vec::new();
    for s in &net.spec().observed {
        let m = all
            .column(s)
            .ok_or_else(|| Error::MissingObserved(s.clone()))?;
        let v = all
            .column(&format!("{s}_var"))
            .unwrap_or_else(|| vec![0.0; all.nrows()]);
        cols.push((m, v));
    }
    (0..all.nrows())
        .map(|i| {
            cols.iter()
                .map(|(m, v)| GaussianBelief::new(m[i], v[i]))
                .collect()
        })
        .collect()
}

#[derive(Serialize)]
struct McSummary {
    samples: usize,
    seed: u64,
    rows: usize,
    /// Largest |analytic - MC| / SE over rows and nodes.
    max_abs_z_mean: f64,
    max_abs_z_variance: f64,
}

/// Analytic trace of one input row, iterated when the model is recurrent.
fn analytic(model: &Model, obs: &[GaussianBelief]) -> Result<PropagationTrace> {
    match &model.recurrence {
        Some(r) => model.network.propagate_recurrent(obs, r.steps, &r.wiring),
        None => model.network.propagate(obs),
    }
}

fn sampled(
    model: &Model,
    obs: &[GaussianBelief],
    n: usize,
    seed: u64,
    jobs: Option<usize>,
) -> Result<McResult> {
    with_jobs(jobs, || match &model.recurrence {
        Some(r) => mc_propagate_recurrent(&model.network, obs, r.steps, &r.wiring, n, seed, jobs),
        None => mc_propagate(&model.network, obs, n, seed, jobs),
    })?
}

fn propagate(model: &Path, inputs: &Path, mc: Option<usize>, c: &Common) -> Result<()> {
    let model = io::load_model(model)?;
    let net = &model.network;
    let rows = read_beliefs(net, inputs)?;
    let seed = c.seed();
    let names: Vec<String> = net.nodes().map(|n| n.spec.name.clone()).collect();
    let mut headers = vec!["row".to_string()];
    for n in &names {
        headers.push(format!("{n}_mean"));
        headers.push(format!("{n}_var"));
        if mc.is_some() {
            headers.push(format!("{n}_mc_mean"));
            headers.push(format!("{n}_mc_var"));
        }
    }
    let (mut zm, mut zv) = (0.0f64, 0.0f64);
    let mut out = Vec::with_capacity(rows.len());
    for (i, obs) in rows.iter().enumerate() {
        let t = analytic(&model, obs)?;
        let sampled = match mc {
            Some(n) => Some(sampled(
                &model,
                obs,
                n,
                stackedgp::rng::derive_seed(seed, &[i as u64]),
                c.jobs,
            )?),
            None => None,
        };
        let mut row = vec![i as f64];
        for (q, r) in t.last().nodes.iter().enumerate() {
            row.extend([r.output.mean, r.output.variance]);
            if let Some(s) = &sampled {
                let st = &s.last().nodes[q];
                row.extend([st.mean, st.variance]);
                if st.se_mean > 0.0 {
                    zm = zm.max((r.output.mean - st.mean).abs() / st.se_mean);
                }
                if st.se_variance > 0.0 {
                    zv = zv.max((r.output.variance - st.variance).abs() / st.se_variance);
                }
            }
        }
        out.push(row);
    }
    prepare(&c.out)?;
    let h: Vec<&str> = headers.iter().map(String::as_str).collect();
    io::write_csv(&c.out.join("propagate.csv"), &h, &out)?;
    println!("propagated {} rows", out.len());
    if let Some(n) = mc {
        let s = McSummary {
            samples: n,
            seed,
            rows: out.len(),
            max_abs_z_mean: zm,
            max_abs_z_variance: zv,
        };
        println!("max |z| mean {zm:.3}, variance {zv:.3}");
        io::write_json(&c.out.join("mc_summary.json"), &s)?;
    }
    Ok(())
}

fn monte_carlo(model: &Path, inputs: &Path, samples: usize, bins: usize, c: &Common) -> Result<()> {
    let model = io::load_model(model)?;
    let rows = read_beliefs(&model.network, inputs)?;
    let seed = c.seed();
    prepare(&c.out)?;
    let mut table = Vec::new();
    let mut names = Vec::new();
    for (i, obs) in rows.iter().enumerate() {
        let r = sampled(
            &model,
            obs,
            samples,
            stackedgp::rng::derive_seed(seed, &[i as u64]),
            c.jobs,
        )?;
        for (q, s) in r.last().nodes.iter().enumerate() {
            if i == 0 {
                names.push(s.name.clone());
            }
            table.push(vec![
                i as f64,
                q as f64,
                s.mean,
                s.variance,
                s.se_mean,
                s.se_variance,
            ]);
            io::write_histogram(
                &c.out.join(format!("hist_{i}_{}.csv", s.name)),
                &s.histogram(bins),
            )?;
        }
    }
    io::write_csv(
        &c.out.join("mc.csv"),
        &["row", "node", "mean", "variance", "se_mean", "se_variance"],
        &table,
    )?;
    io::write_json(&c.out.join("mc_nodes.json"), &names)?;
    println!("{samples} samples for each of {} rows", rows.len());
    Ok(())
}

fn experiment(which: &Experiment) -> Result<()> {
    match which {
        Experiment::Synthetic {
            scenario,
            n_train,
            common: c,
        } => {
            let cfg = SyntheticConfig {
                scenario: Scenario::from_number(*scenario)?,
                n_train: *n_train,
                ..SyntheticConfig::default()
            };
            let r = experiments::run_synthetic(&cfg, c.seed(), c.jobs)?;
            prepare(&c.out)?;
            experiments::write_points(&c.out.join("points.csv"), &["x1", "x2"], &r.points)?;
            #[derive(Serialize)]
            struct Out {
                experiment: &'static str,
                scenario: u32,
                seed: u64,
                n_train: usize,
                n_test: usize,
                rmse: f64,
                mae: f64,
                avg_ratio: f64,
            }
            io::write_json(
                &c.out.join("metrics.json"),
                &Out {
                    experiment: "synthetic",
                    scenario: r.scenario,
                    seed: c.seed(),
                    n_train: r.n_train,
                    n_test: r.metrics.n,
                    rmse: r.metrics.rmse,
                    mae: r.metrics.mae,
                    avg_ratio: r.metrics.avg_ratio,
                },
            )?;
            println!(
                "scenario {}: RMSE {:.5}, average ratio {:.3}",
                r.scenario, r.metrics.rmse, r.metrics.avg_ratio
            );
        }
        Experiment::Puff {
            samples,
            steps,
            wind_propagate,
            common: c,
        } => {
            let cfg = PuffConfig {
                mc_samples: *samples,
                steps: *steps,
                wind_inputs: if *wind_propagate {
                    InputUncertainty::Propagate
                } else {
                    InputUncertainty::MeanOnly
                },
                ..PuffConfig::default()
            };
            let r = experiments::run_puff(&cfg, c.seed(), c.jobs)?;
            prepare(&c.out)?;
            let mut rows = Vec::new();
            println!("  k | x mu   sigma | y mu   sigma | d mu   sigma | (analytic / MC)");
            for row in &r.rows {
                let mut v = vec![row.k as f64];
                for s in ["x", "y", "d"] {
                    let (a, m) = (row.analytic[s], row.mc[s]);
                    v.extend([a.mean, a.std, m.mean, m.std, m.se_mean, m.se_std]);
                }
                v.push(row.radius);
                rows.push(v);
                let a = |s: &str| (row.analytic[s].mean, row.analytic[s].std);
                let m = |s: &str| (row.mc[s].mean, row.mc[s].std);
                for (label, (x, y, d)) in [
                    ("A", (a("x"), a("y"), a("d"))),
                    ("M", (m("x"), m("y"), m("d"))),
                ] {
                    println!(
                        "{:>3}{label}| {:6.2} {:5.2} | {:6.2} {:5.2} | {:6.2} {:5.2}",
                        row.k, x.0, x.1, y.0, y.1, d.0, d.1
                    );
                }
            }
            let mut headers = vec!["k".to_string()];
            for s in ["x", "y", "d"] {
                for f in [
                    "mean",
                    "std",
                    "mc_mean",
                    "mc_std",
                    "mc_se_mean",
                    "mc_se_std",
                ] {
                    headers.push(format!("{s}_{f}"));
                }
            }
            headers.push("radius".into());
            let h: Vec<&str> = headers.iter().map(String::as_str).collect();
            io::write_csv(&c.out.join("puff_table.csv"), &h, &rows)?;
            for (s, hist) in &r.histograms {
                io::write_histogram(&c.out.join(format!("hist_{s}.csv")), hist)?;
            }
            io::write_json(
                &c.out.join("metrics.json"),
                &serde_json::json!({
                    "experiment": "puff",
                    "seed": c.seed(),
                    "mc_samples": r.mc_samples,
                    "rows": r.rows,
                }),
            )?;
        }
        Experiment::Jura {
            structure,
            data_dir,
            common: c,
        } => {
            let s: JuraStructure = structure.parse()?;
            let r = experiments::run_jura(&JuraConfig::in_dir(data_dir, s), c.seed(), c.jobs)?;
            prepare(&c.out)?;
            experiments::write_points(&c.out.join("points.csv"), &["X", "Y"], &r.points)?;
            io::write_json(
                &c.out.join("metrics.json"),
                &serde_json::json!({
                    "experiment": "jura",
                    "seed": c.seed(),
                    "structure": r.structure,
                    "n_train": r.n_train,
                    "n_test": r.n_test,
                    "mae": r.mae,
                }),
            )?;
            println!("jura {structure}: Cd MAE {:.4}", r.mae);
        }
        Experiment::Forestfire {
            data_dir,
            folds,
            common: c,
        } => {
            let cfg = ForestFireConfig {
                folds: *folds,
                ..ForestFireConfig::in_dir(data_dir)
            };
            let r = experiments::run_forestfire(&cfg, c.seed(), c.jobs)?;
            prepare(&c.out)?;
            experiments::write_points(
                &c.out.join("points.csv"),
                &["temp", "RH", "wind", "rain"],
                &r.points,
            )?;
            io::write_json(
                &c.out.join("metrics.json"),
                &serde_json::json!({
                    "experiment": "forestfire",
                    "seed": c.seed(),
                    "folds": r.folds,
                    "n": r.n,
                    "mae": r.mae,
                    "rmse": r.rmse,
                }),
            )?;
            println!("forest fire: MAE {:.3}, RMSE {:.3}", r.mae, r.rmse);
        }
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train { config, common } => train(config, common),
        Command::Predict {
            model,
            node,
            inputs,
            common,
        } => predict(model, node, inputs, common),
        Command::Propagate {
            model,
            inputs,
            mc,
            common,
        } => propagate(model, inputs, *mc, common),
        Command::Mc {
            model,
            inputs,
            samples,
            bins,
            common,
        } => monte_carlo(model, inputs, *samples, *bins, common),
        Command::Experiment { which } => experiment(which),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Data => 3,
                ErrorKind::Numerical => 4,
            })
        }
    }
}

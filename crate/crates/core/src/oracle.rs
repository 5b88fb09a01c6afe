//! Monte Carlo propagation through a trained network.
//!
//! Each sample path draws the observed inputs from their beliefs, then for
//! every node draws from that node's full predictive Gaussian at the sampled
//! inputs. Samples are generated in fixed-size shards with their own seed
//! streams and concatenated in shard order, so results do not depend on the
//! number of worker threads.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::gp::GaussianBelief;
use crate::network::{Source, StackedNetwork, StateWiring};
use crate::rng;

const SHARD: usize = 2048;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

/// Summary of the samples of one quantity.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McStat {
    pub name: String,
    pub n: usize,
    pub mean: f64,
    /// Unbiased sample variance.
    pub variance: f64,
    pub se_mean: f64,
    /// Standard error of the variance estimate from the fourth central
    /// moment.
    pub se_variance: f64,
    #[serde(skip)]
    pub samples: Vec<f64>,
}

impl McStat {
    pub fn from_samples(name: impl Into<String>, samples: Vec<f64>) -> Self {
        let n = samples.len();
        let nf = n as f64;
        let mean = samples.iter().sum::<f64>() / nf;
        let m2 = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / nf;
        let m4 = samples.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / nf;
        let variance = m2 * nf / (nf - 1.0);
        let se_var = ((m4 - (nf - 3.0) / (nf - 1.0) * variance * variance) / nf)
            .max(0.0)
            .sqrt();
        Self {
            name: name.into(),
            n,
            mean,
            variance,
            se_mean: (variance / nf).sqrt(),
            se_variance: se_var,
            samples,
        }
    }

    pub fn std(&self) -> f64 {
        self.variance.sqrt()
    }

    /// Standard error of the sample standard deviation (delta method).
    pub fn se_std(&self) -> f64 {
        if self.variance > 0.0 {
            self.se_variance / (2.0 * self.std())
        } else {
            0.0
        }
    }

    /// Equal-width histogram over the sample range; counts sum to `n`.
    pub fn histogram(&self, bins: usize) -> Histogram {
        let bins = bins.max(1);
        let lo = self.samples.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self
            .samples
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let width = if hi > lo {
            (hi - lo) / bins as f64
        } else {
            1.0
        };
        let edges: Vec<f64> = (0..=bins).map(|i| lo + width * i as f64).collect();
        let mut counts = vec![0u64; bins];
        for x in &self.samples {
            let b = (((x - lo) / width) as usize).min(bins - 1);
            counts[b] += 1;
        }
        Histogram { edges, counts }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McStep {
    pub step: usize,
    /// Observed slots (the carried state in recurrent runs).
    pub observed: Vec<McStat>,
    /// Node outputs; empty for the initial step of a recurrent run.
    pub nodes: Vec<McStat>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McResult {
    pub samples: usize,
    pub seed: u64,
    pub steps: Vec<McStep>,
}

impl McResult {
    pub fn last(&self) -> &McStep {
        self.steps.last().expect("at least one step")
    }

    /// Statistic for a node or observed slot at a step.
    pub fn stat(&self, step: usize, name: &str) -> Option<&McStat> {
        let s = self.steps.get(step)?;
        s.nodes.iter().chain(&s.observed).find(|m| m.name == name)
    }

    pub fn node(&self, name: &str) -> Option<&McStat> {
        self.steps
            .iter()
            .rev()
            .find_map(|s| s.nodes.iter().find(|m| m.name == name))
    }
}

fn draw(r: &mut ChaCha8Rng, b: GaussianBelief) -> f64 {
    if b.variance == 0.0 {
        b.mean
    } else {
        let z: f64 = r.sample(StandardNormal);
        b.mean + b.std() * z
    }
}

/// One sampled forward pass; writes node outputs into `out` in flat order.
fn sample_forward(
    net: &StackedNetwork,
    observed: &[f64],
    r: &mut ChaCha8Rng,
    out: &mut Vec<f64>,
) -> Result<()> {
    out.clear();
    let mut offsets = Vec::with_capacity(net.layers().len());
    for layer in net.layers() {
        offsets.push(out.len());
        for node in layer {
            let mut x: Vec<f64> = node
                .spec
                .inputs
                .iter()
                .map(|s| match *s {
                    Source::Observed(i) => observed[i],
                    Source::Node { layer, index } => out[offsets[layer] + index],
                })
                .collect();
            if let Some(ica) = &node.ica {
                ica.apply_point(&mut x)
                    .map_err(|e| e.in_node(&node.spec.name))?;
            }
            let p = node
                .gp
                .predict(&x)
                .map_err(|e| e.in_node(&node.spec.name))?;
            out.push(draw(r, p));
        }
    }
    Ok(())
}

fn check_n(n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::InvalidData(format!(
            "Monte Carlo needs at least 2 samples, got {n}"
        )));
    }
    Ok(())
}

/// Per-shard sample buffers: `[step][quantity][sample]`.
type ShardSamples = Vec<Vec<Vec<f64>>>;

fn run_shards(
    n: usize,
    seed: u64,
    jobs: Option<usize>,
    shard: impl Fn(&mut ChaCha8Rng, usize) -> Result<ShardSamples> + Sync,
) -> Result<ShardSamples> {
    let shards = n.div_ceil(SHARD);
    let parts = crate::network::with_jobs(jobs, || {
        (0..shards)
            .into_par_iter()
            .map(|s| {
                let mut r = rng::stream(seed, &[rng::tag::MONTE_CARLO, s as u64]);
                let len = SHARD.min(n - s * SHARD);
                shard(&mut r, len)
            })
            .collect::<Result<Vec<_>>>()
    })??;
    let mut merged = parts[0].clone();
    for p in &parts[1..] {
        for (ms, ps) in merged.iter_mut().zip(p) {
            for (m, q) in ms.iter_mut().zip(ps) {
                m.extend_from_slice(q);
            }
        }
    }
    Ok(merged)
}

/// Sample `n` joint paths through the network.
pub fn mc_propagate(
    net: &StackedNetwork,
    observed: &[GaussianBelief],
    n: usize,
    seed: u64,
    jobs: Option<usize>,
) -> Result<McResult> {
    check_n(n)?;
    net.check_observed(observed)?;
    let n_nodes = net.spec().n_nodes();
    let n_obs = observed.len();
    let samples = run_shards(n, seed, jobs, |r, len| {
        let mut obs = vec![Vec::with_capacity(len); n_obs];
        let mut nodes = vec![Vec::with_capacity(len); n_nodes];
        let mut x = vec![0.0; n_obs];
        let mut out = Vec::with_capacity(n_nodes);
        for _ in 0..len {
            for (xi, b) in x.iter_mut().zip(observed) {
                *xi = draw(r, *b);
            }
            sample_forward(net, &x, r, &mut out)?;
            for (o, v) in obs.iter_mut().zip(&x) {
                o.push(*v);
            }
            for (q, v) in nodes.iter_mut().zip(&out) {
                q.push(*v);
            }
        }
        Ok(vec![obs, nodes])
    })?;
    let mut it = samples.into_iter();
    let obs = it.next().unwrap_or_default();
    let nodes = it.next().unwrap_or_default();
    Ok(McResult {
        samples: n,
        seed,
        steps: vec![McStep {
            step: 0,
            observed: stats(&net.spec().observed, obs),
            nodes: stats(&node_names(net), nodes),
        }],
    })
}

fn node_names(net: &StackedNetwork) -> Vec<String> {
    net.nodes().map(|n| n.spec.name.clone()).collect()
}

fn stats(names: &[String], samples: Vec<Vec<f64>>) -> Vec<McStat> {
    names
        .iter()
        .zip(samples)
        .map(|(n, s)| McStat::from_samples(n.clone(), s))
        .collect()
}

/// Sample `n` recurrent trajectories of `steps` transitions.
pub fn mc_propagate_recurrent(
    net: &StackedNetwork,
    initial: &[GaussianBelief],
    steps: usize,
    wiring: &StateWiring,
    n: usize,
    seed: u64,
    jobs: Option<usize>,
) -> Result<McResult> {
    check_n(n)?;
    net.check_observed(initial)?;
    let links = net.check_wiring(wiring)?;
    let flat: Vec<(usize, usize)> = links
        .iter()
        .map(|&(l, i, slot)| (net.spec().flat_index(l, i), slot))
        .collect();
    let n_nodes = net.spec().n_nodes();
    let n_obs = initial.len();
    // layout: for step k, index 2k = observed, 2k + 1 = nodes
    let samples = run_shards(n, seed, jobs, |r, len| {
        let mut buf: ShardSamples = (0..=steps)
            .flat_map(|_| {
                [
                    vec![Vec::with_capacity(len); n_obs],
                    vec![Vec::with_capacity(len); n_nodes],
                ]
            })
            .collect();
        let mut out = Vec::with_capacity(n_nodes);
        for _ in 0..len {
            let mut state: Vec<f64> = initial.iter().map(|b| draw(r, *b)).collect();
            for (o, v) in buf[0].iter_mut().zip(&state) {
                o.push(*v);
            }
            for k in 1..=steps {
                sample_forward(net, &state, r, &mut out)?;
                for &(q, slot) in &flat {
                    state[slot] = out[q];
                }
                for (o, v) in buf[2 * k].iter_mut().zip(&state) {
                    o.push(*v);
                }
                for (o, v) in buf[2 * k + 1].iter_mut().zip(&out) {
                    o.push(*v);
                }
            }
        }
        Ok(buf)
    })?;
    let obs_names = &net.spec().observed;
    let names = node_names(net);
    let mut it = samples.into_iter();
    let mut result = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let obs = it.next().unwrap_or_default();
        let nodes = it.next().unwrap_or_default();
        result.push(McStep {
            step: k,
            observed: stats(obs_names, obs),
            nodes: if k == 0 {
                Vec::new()
            } else {
                stats(&names, nodes)
            },
        });
    }
    Ok(McResult {
        samples: n,
        seed,
        steps: result,
    })
}

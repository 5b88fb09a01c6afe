//! Layered networks of independently trained GP nodes and forward
//! propagation of Gaussian beliefs through them.

use std::collections::{BTreeMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{self, GPNode, GaussianBelief, NodeParts, TrainOptions, TrainingSet};
use crate::ica::{ica_fit, IcaOptions, IcaTransform};
use crate::kernel::Kernel;
use crate::moments::uncertain_moments;
use crate::rng;

/// Where a node input comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    /// Observed slot, by index into [`NetworkSpec::observed`].
    Observed(usize),
    /// Output of an earlier node.
    Node { layer: usize, index: usize },
}

/// How a node treats the variance of its input beliefs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputUncertainty {
    #[default]
    Propagate,
    /// Evaluate at the input means (variances dropped).
    MeanOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub name: String,
    pub inputs: Vec<Source>,
    /// Initial hyperparameters (kept as-is when `fixed`).
    pub kernel: Kernel,
    pub options: TrainOptions,
    /// Skip the likelihood fit and use `kernel` with noise `options.noise`.
    pub fixed: bool,
    /// Decorrelate node-sourced inputs with ICA when there are two or more
    /// of them. Observed inputs are never transformed.
    pub ica: bool,
    pub input_uncertainty: InputUncertainty,
}

impl NodeSpec {
    pub fn new(name: impl Into<String>, inputs: Vec<Source>, kernel: Kernel) -> Self {
        Self {
            name: name.into(),
            inputs,
            kernel,
            options: TrainOptions::default(),
            fixed: false,
            ica: true,
            input_uncertainty: InputUncertainty::Propagate,
        }
    }

    /// Positions (within `inputs`) that ICA applies to, if any.
    fn ica_columns(&self) -> Option<Vec<usize>> {
        if !self.ica {
            return None;
        }
        let cols: Vec<usize> = self
            .inputs
            .iter()
            .enumerate()
            .filter(|(_, s)| matches!(s, Source::Node { .. }))
            .map(|(i, _)| i)
            .collect();
        (cols.len() >= 2).then_some(cols)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub observed: Vec<String>,
    pub layers: Vec<Vec<NodeSpec>>,
}

impl NetworkSpec {
    pub fn n_nodes(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    /// Nodes in layer order with their flat index `q`.
    pub fn nodes(&self) -> impl Iterator<Item = (usize, usize, &NodeSpec)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(l, layer)| layer.iter().enumerate().map(move |(i, n)| (l, i, n)))
    }

    pub fn flat_index(&self, layer: usize, index: usize) -> usize {
        self.layers[..layer].iter().map(Vec::len).sum::<usize>() + index
    }

    pub fn find(&self, name: &str) -> Option<(usize, usize)> {
        self.nodes()
            .find(|(_, _, n)| n.name == name)
            .map(|(l, i, _)| (l, i))
    }

    pub fn slot(&self, name: &str) -> Option<usize> {
        self.observed.iter().position(|s| s == name)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() || self.layers.iter().any(Vec::is_empty) {
            return Err(Error::Network("every layer needs at least one node".into()));
        }
        let mut names = HashSet::new();
        for s in &self.observed {
            if !names.insert(s.as_str()) {
                return Err(Error::Network(format!("duplicate name `{s}`")));
            }
        }
        for (l, _, node) in self.nodes() {
            if !names.insert(node.name.as_str()) {
                return Err(Error::Network(format!("duplicate name `{}`", node.name)));
            }
            if node.inputs.is_empty() {
                return Err(Error::Network(format!(
                    "node `{}` has no inputs",
                    node.name
                )));
            }
            for src in &node.inputs {
                let ok = match *src {
                    Source::Observed(s) => s < self.observed.len(),
                    Source::Node { layer, index } => layer < l && index < self.layers[layer].len(),
                };
                if !ok {
                    return Err(Error::Network(format!(
                        "node `{}` has input {src:?} that is not an observed slot or an earlier node",
                        node.name
                    )));
                }
            }
            if let Some(d) = node.kernel.input_dim() {
                if d != node.inputs.len() {
                    return Err(Error::Network(format!(
                        "node `{}` wires {} inputs but its kernel expects {d}",
                        node.name,
                        node.inputs.len()
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeIca {
    /// Input positions the transform applies to.
    pub columns: Vec<usize>,
    pub transform: IcaTransform,
}

impl NodeIca {
    fn apply_beliefs(&self, beliefs: &mut [GaussianBelief]) -> Result<()> {
        let sub: Vec<GaussianBelief> = self.columns.iter().map(|&c| beliefs[c]).collect();
        for (c, b) in self
            .columns
            .iter()
            .zip(self.transform.transform_beliefs(&sub)?)
        {
            beliefs[*c] = b;
        }
        Ok(())
    }

    pub(crate) fn apply_point(&self, x: &mut [f64]) -> Result<()> {
        let sub: Vec<f64> = self.columns.iter().map(|&c| x[c]).collect();
        for (c, v) in self
            .columns
            .iter()
            .zip(self.transform.transform_point(&sub)?)
        {
            x[*c] = v;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainedNode {
    pub spec: NodeSpec,
    pub gp: GPNode,
    pub ica: Option<NodeIca>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedNodeParts {
    pub gp: NodeParts,
    pub ica: Option<NodeIca>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParts {
    pub spec: NetworkSpec,
    pub nodes: Vec<TrainedNodeParts>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BuildOptions {
    pub seed: u64,
    /// Worker cap; `None` uses the global pool.
    pub jobs: Option<usize>,
}

/// Run `f` on a pool limited to `jobs` workers, or on the global pool.
pub fn with_jobs<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match jobs {
        None => Ok(f()),
        Some(j) => rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))
            .map(|pool| pool.install(f)),
    }
}

/// Fit one node (including its ICA record) on its own dataset. Seed streams
/// are keyed by the node name, so a node trains the same way in any network.
pub fn train_node(spec: &NodeSpec, data: &TrainingSet, seed: u64) -> Result<TrainedNode> {
    let key = rng::name_key(&spec.name);
    let fit = || -> Result<TrainedNode> {
        if data.dim() != spec.inputs.len() {
            return Err(Error::DimensionMismatch {
                expected: spec.inputs.len(),
                got: data.dim(),
            });
        }
        let mut data = data.clone();
        let ica = match spec.ica_columns() {
            None => None,
            Some(columns) => {
                let sub = data.x.select_columns(&columns);
                let opts = IcaOptions {
                    seed: rng::derive_seed(seed, &[rng::tag::ICA, key]),
                    ..IcaOptions::default()
                };
                let transform = ica_fit(&sub, &opts)?;
                let mapped = transform.transform_rows(&sub)?;
                for (k, &c) in columns.iter().enumerate() {
                    data.x.set_column(c, &mapped.column(k));
                }
                Some(NodeIca { columns, transform })
            }
        };
        let gp = if spec.fixed {
            GPNode::with_hyperparameters(
                spec.kernel.clone(),
                spec.options.noise,
                &data,
                spec.options.standardize_inputs,
                spec.options.standardize_target,
            )?
        } else {
            let opts = TrainOptions {
                seed: rng::derive_seed(seed, &[rng::tag::TRAIN, key]),
                ..spec.options.clone()
            };
            gp::train(spec.kernel.clone(), &data, &opts)?
        };
        Ok(TrainedNode {
            spec: spec.clone(),
            gp,
            ica,
        })
    };
    fit().map_err(|e| e.in_node(&spec.name))
}

/// One recorded node evaluation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeRecord {
    pub layer: usize,
    pub index: usize,
    pub name: String,
    /// Beliefs handed to the GP, after ICA and any mean-only reduction.
    pub inputs: Vec<GaussianBelief>,
    pub output: GaussianBelief,
    /// Output supplied by the caller instead of computed.
    pub overridden: bool,
    pub clamped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    /// Observed-slot beliefs in effect at this step.
    pub observed: Vec<GaussianBelief>,
    /// Node evaluations, in layer order; empty for the initial step of a
    /// recurrent run.
    pub nodes: Vec<NodeRecord>,
}

/// Row of the tabular trace export.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub step: usize,
    pub node: String,
    pub mean: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropagationTrace {
    pub observed_names: Vec<String>,
    pub steps: Vec<StepRecord>,
}

impl PropagationTrace {
    pub fn last(&self) -> &StepRecord {
        self.steps.last().expect("trace has at least one step")
    }

    /// Output of a named node at the last step where it was evaluated.
    pub fn output(&self, name: &str) -> Option<GaussianBelief> {
        self.steps
            .iter()
            .rev()
            .find_map(|s| s.nodes.iter().find(|n| n.name == name).map(|n| n.output))
    }

    pub fn output_at(&self, step: usize, name: &str) -> Option<GaussianBelief> {
        let s = self.steps.get(step)?;
        s.nodes
            .iter()
            .find(|n| n.name == name)
            .map(|n| n.output)
            .or_else(|| {
                self.observed_names
                    .iter()
                    .position(|o| o == name)
                    .map(|i| s.observed[i])
            })
    }

    /// Observed slots then nodes, per step.
    pub fn rows(&self) -> Vec<TraceRow> {
        let mut out = Vec::new();
        for s in &self.steps {
            for (name, b) in self.observed_names.iter().zip(&s.observed) {
                out.push(TraceRow {
                    step: s.step,
                    node: name.clone(),
                    mean: b.mean,
                    variance: b.variance,
                });
            }
            for n in &s.nodes {
                out.push(TraceRow {
                    step: s.step,
                    node: n.name.clone(),
                    mean: n.output.mean,
                    variance: n.output.variance,
                });
            }
        }
        out
    }
}

/// Output node of step `k` feeding observed slot `slot` at step `k + 1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateWiring {
    pub links: Vec<(String, usize)>,
}

#[derive(Debug, Clone)]
pub struct StackedNetwork {
    spec: NetworkSpec,
    layers: Vec<Vec<TrainedNode>>,
}

impl StackedNetwork {
    /// Train every node on its dataset (`datasets[q]` for flat index `q`).
    pub fn build_and_train(
        spec: NetworkSpec,
        datasets: &[TrainingSet],
        opts: BuildOptions,
    ) -> Result<Self> {
        spec.validate()?;
        if datasets.len() != spec.n_nodes() {
            return Err(Error::Network(format!(
                "{} datasets for {} nodes",
                datasets.len(),
                spec.n_nodes()
            )));
        }
        let flat: Vec<(usize, &NodeSpec)> = spec
            .nodes()
            .enumerate()
            .map(|(q, (_, _, n))| (q, n))
            .collect();
        let trained: Vec<TrainedNode> = with_jobs(opts.jobs, || {
            flat.par_iter()
                .map(|(q, n)| train_node(n, &datasets[*q], opts.seed))
                .collect::<Result<Vec<_>>>()
        })??;
        let mut it = trained.into_iter();
        let layers = spec
            .layers
            .iter()
            .map(|l| it.by_ref().take(l.len()).collect())
            .collect();
        Ok(Self { spec, layers })
    }

    /// Assemble from already trained nodes, in layer order.
    pub fn from_nodes(spec: NetworkSpec, nodes: Vec<TrainedNode>) -> Result<Self> {
        spec.validate()?;
        if nodes.len() != spec.n_nodes() {
            return Err(Error::Network(format!(
                "{} nodes supplied for a spec with {}",
                nodes.len(),
                spec.n_nodes()
            )));
        }
        for ((_, _, s), n) in spec.nodes().zip(&nodes) {
            if n.gp.dim() != s.inputs.len() {
                return Err(Error::DimensionMismatch {
                    expected: s.inputs.len(),
                    got: n.gp.dim(),
                }
                .in_node(&s.name));
            }
        }
        let mut it = nodes.into_iter();
        let layers = spec
            .layers
            .iter()
            .map(|l| it.by_ref().take(l.len()).collect())
            .collect();
        Ok(Self { spec, layers })
    }

    pub fn from_parts(parts: NetworkParts) -> Result<Self> {
        let specs: Vec<NodeSpec> = parts.spec.nodes().map(|(_, _, n)| n.clone()).collect();
        if specs.len() != parts.nodes.len() {
            return Err(Error::Serialization("node count differs from spec".into()));
        }
        let nodes = specs
            .into_iter()
            .zip(parts.nodes)
            .map(|(spec, p)| {
                Ok(TrainedNode {
                    gp: GPNode::from_parts(p.gp).map_err(|e| e.in_node(&spec.name))?,
                    ica: p.ica,
                    spec,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_nodes(parts.spec, nodes)
    }

    pub fn to_parts(&self) -> NetworkParts {
        NetworkParts {
            spec: self.spec.clone(),
            nodes: self
                .nodes()
                .map(|n| TrainedNodeParts {
                    gp: n.gp.to_parts(),
                    ica: n.ica.clone(),
                })
                .collect(),
        }
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Vec<TrainedNode>] {
        &self.layers
    }

    pub fn nodes(&self) -> impl Iterator<Item = &TrainedNode> {
        self.layers.iter().flatten()
    }

    pub fn node(&self, name: &str) -> Option<&TrainedNode> {
        self.nodes().find(|n| n.spec.name == name)
    }

    /// Replace one node by a fit with a different seed; others are untouched.
    pub fn retrain_node(&mut self, name: &str, data: &TrainingSet, seed: u64) -> Result<()> {
        let (l, i) = self
            .spec
            .find(name)
            .ok_or_else(|| Error::Network(format!("no node named `{name}`")))?;
        self.layers[l][i] = train_node(&self.spec.layers[l][i], data, seed)?;
        Ok(())
    }

    pub(crate) fn check_observed(&self, observed: &[GaussianBelief]) -> Result<()> {
        if observed.len() < self.spec.observed.len() {
            return Err(Error::MissingObserved(
                self.spec.observed[observed.len()].clone(),
            ));
        }
        if observed.len() > self.spec.observed.len() {
            return Err(Error::DimensionMismatch {
                expected: self.spec.observed.len(),
                got: observed.len(),
            });
        }
        if let Some((i, _)) = observed
            .iter()
            .enumerate()
            .find(|(_, b)| !b.mean.is_finite() || !(b.variance >= 0.0) || !b.variance.is_finite())
        {
            return Err(Error::InvalidData(format!(
                "observed `{}` needs a finite mean and variance >= 0",
                self.spec.observed[i]
            )));
        }
        Ok(())
    }

    /// Slot-ordered observed beliefs from a name map.
    pub fn observed_from_map(
        &self,
        map: &BTreeMap<String, GaussianBelief>,
    ) -> Result<Vec<GaussianBelief>> {
        self.spec
            .observed
            .iter()
            .map(|s| {
                map.get(s)
                    .copied()
                    .ok_or_else(|| Error::MissingObserved(s.clone()))
            })
            .collect()
    }

    fn eval_node(
        node: &TrainedNode,
        layer: usize,
        index: usize,
        observed: &[GaussianBelief],
        outputs: &[Vec<GaussianBelief>],
    ) -> Result<NodeRecord> {
        let mut inputs: Vec<GaussianBelief> = node
            .spec
            .inputs
            .iter()
            .map(|s| match *s {
                Source::Observed(i) => observed[i],
                Source::Node { layer, index } => outputs[layer][index],
            })
            .collect();
        let name = &node.spec.name;
        if let Some(ica) = &node.ica {
            ica.apply_beliefs(&mut inputs)
                .map_err(|e| e.in_node(name))?;
        }
        if node.spec.input_uncertainty == InputUncertainty::MeanOnly {
            for b in &mut inputs {
                b.variance = 0.0;
            }
        }
        let (output, clamped) = if inputs.iter().all(GaussianBelief::is_certain) {
            let means: Vec<f64> = inputs.iter().map(|b| b.mean).collect();
            let p = node
                .gp
                .predict_detailed(&means)
                .map_err(|e| e.in_node(name))?;
            (p.belief, p.pre_clamp_variance < 0.0)
        } else {
            let m = uncertain_moments(&node.gp, &inputs).map_err(|e| e.in_node(name))?;
            (m.belief(), m.diagnostics.clamped)
        };
        Ok(NodeRecord {
            layer,
            index,
            name: name.clone(),
            inputs,
            output,
            overridden: false,
            clamped,
        })
    }

    fn forward(
        &self,
        observed: &[GaussianBelief],
        overrides: &BTreeMap<String, GaussianBelief>,
    ) -> Result<Vec<NodeRecord>> {
        let mut outputs: Vec<Vec<GaussianBelief>> = Vec::with_capacity(self.layers.len());
        let mut records = Vec::with_capacity(self.spec.n_nodes());
        for (l, layer) in self.layers.iter().enumerate() {
            let recs = layer
                .par_iter()
                .enumerate()
                .map(|(i, node)| match overrides.get(&node.spec.name) {
                    Some(b) => Ok(NodeRecord {
                        layer: l,
                        index: i,
                        name: node.spec.name.clone(),
                        inputs: Vec::new(),
                        output: *b,
                        overridden: true,
                        clamped: false,
                    }),
                    None => Self::eval_node(node, l, i, observed, &outputs),
                })
                .collect::<Result<Vec<_>>>()?;
            outputs.push(recs.iter().map(|r| r.output).collect());
            records.extend(recs);
        }
        Ok(records)
    }

    /// Layer-by-layer forward pass.
    pub fn propagate(&self, observed: &[GaussianBelief]) -> Result<PropagationTrace> {
        self.propagate_with_overrides(observed, &BTreeMap::new())
    }

    /// Forward pass where named nodes report caller-supplied beliefs instead
    /// of being evaluated (for example measured values fed through).
    pub fn propagate_with_overrides(
        &self,
        observed: &[GaussianBelief],
        overrides: &BTreeMap<String, GaussianBelief>,
    ) -> Result<PropagationTrace> {
        self.check_observed(observed)?;
        if let Some(k) = overrides.keys().find(|k| self.node(k).is_none()) {
            return Err(Error::Network(format!("override for unknown node `{k}`")));
        }
        let nodes = self.forward(observed, overrides)?;
        Ok(PropagationTrace {
            observed_names: self.spec.observed.clone(),
            steps: vec![StepRecord {
                step: 0,
                observed: observed.to_vec(),
                nodes,
            }],
        })
    }

    pub(crate) fn check_wiring(&self, wiring: &StateWiring) -> Result<Vec<(usize, usize, usize)>> {
        wiring
            .links
            .iter()
            .map(|(name, slot)| {
                let (l, i) = self.spec.find(name).ok_or_else(|| {
                    Error::Network(format!("state wiring names unknown node `{name}`"))
                })?;
                if *slot >= self.spec.observed.len() {
                    return Err(Error::Network(format!(
                        "state wiring slot {slot} out of range"
                    )));
                }
                Ok((l, i, *slot))
            })
            .collect()
    }

    /// Repeated forward passes where wired node outputs of step `k` become
    /// observed beliefs at step `k + 1`. Step 0 holds only the initial state.
    pub fn propagate_recurrent(
        &self,
        initial: &[GaussianBelief],
        steps: usize,
        wiring: &StateWiring,
    ) -> Result<PropagationTrace> {
        self.check_observed(initial)?;
        let links = self.check_wiring(wiring)?;
        let mut trace = PropagationTrace {
            observed_names: self.spec.observed.clone(),
            steps: vec![StepRecord {
                step: 0,
                observed: initial.to_vec(),
                nodes: Vec::new(),
            }],
        };
        let mut state = initial.to_vec();
        let empty = BTreeMap::new();
        for k in 1..=steps {
            let nodes = self.forward(&state, &empty)?;
            for &(l, i, slot) in &links {
                let q = self.spec.flat_index(l, i);
                state[slot] = nodes[q].output;
            }
            trace.steps.push(StepRecord {
                step: k,
                observed: state.clone(),
                nodes,
            });
        }
        Ok(trace)
    }

    /// Standard predictions of a node at certain raw inputs (ICA applied).
    pub fn predict_node(&self, name: &str, x: &[f64]) -> Result<GaussianBelief> {
        let node = self
            .node(name)
            .ok_or_else(|| Error::Network(format!("no node named `{name}`")))?;
        let mut x = x.to_vec();
        if x.len() != node.spec.inputs.len() {
            return Err(Error::DimensionMismatch {
                expected: node.spec.inputs.len(),
                got: x.len(),
            }
            .in_node(name));
        }
        if let Some(ica) = &node.ica {
            ica.apply_point(&mut x)?;
        }
        node.gp.predict(&x).map_err(|e| e.in_node(name))
    }
}

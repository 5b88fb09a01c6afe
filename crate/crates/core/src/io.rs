//! CSV ingestion, the model archive, network configuration files and
//! tabular exports.
//!
//! Model archive layout: a single header line
//! `STACKEDGP-MODEL v<version> sha256=<hex digest of payload>` followed by a
//! JSON payload holding the network spec, every node's hyperparameters,
//! scalings, training data and ICA record, and the recurrence if any. Floats are written in shortest
//! round-trip form, so a reload reproduces predictions bit for bit.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gp::{TrainOptions, TrainingSet};
use crate::kernel::{Kernel, KernelPart, PolynomialKernel, RbfKernel};
use crate::network::{
    InputUncertainty, NetworkParts, NetworkSpec, NodeSpec, Source, StackedNetwork, StateWiring,
};
use crate::oracle::Histogram;

pub const MODEL_VERSION: u32 = 1;
const MAGIC: &str = "STACKEDGP-MODEL";

/// Numeric columns read from a CSV file.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub headers: Vec<String>,
    /// One row per record.
    pub data: DMatrix<f64>,
}

impl Table {
    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.headers.iter().position(|h| h == name)
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        self.column_index(name)
            .map(|j| self.data.column(j).iter().copied().collect())
    }

    pub fn nrows(&self) -> usize {
        self.data.nrows()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Table {
        Table {
            headers: self.headers.clone(),
            data: self.data.select_rows(rows),
        }
    }
}

fn reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: e.to_string(),
    }
}

/// Read the named columns (all columns when `columns` is `None`). Other
/// columns may hold text and are ignored. Names match exactly, falling back
/// to ASCII case-insensitive matching.
pub fn load_table(path: &Path, columns: Option<&[String]>) -> Result<Table> {
    let mut rdr = reader(path)?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| csv_error(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let wanted: Vec<String> = match columns {
        Some(c) => c.to_vec(),
        None => header.clone(),
    };
    let idx: Vec<usize> = wanted
        .iter()
        .map(|c| {
            header
                .iter()
                .position(|h| h == c)
                .or_else(|| header.iter().position(|h| h.eq_ignore_ascii_case(c)))
                .ok_or_else(|| Error::Parse {
                    path: path.to_path_buf(),
                    line: 1,
                    message: format!("missing column `{c}` (have: {})", header.join(", ")),
                })
        })
        .collect::<Result<_>>()?;
    let mut values = Vec::new();
    let mut n = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        for (&j, name) in idx.iter().zip(&wanted) {
            let cell = rec.get(j).unwrap_or("");
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("column `{name}`: cannot parse `{cell}` as a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    path: path.to_path_buf(),
                    row: n + 1,
                    column: name.clone(),
                });
            }
            values.push(v);
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::InvalidData(format!(
            "{}: no data rows",
            path.display()
        )));
    }
    log::debug!("{}: read {n} rows", path.display());
    Ok(Table {
        headers: wanted.clone(),
        data: DMatrix::from_row_slice(n, wanted.len(), &values),
    })
}

/// Which CSV columns form the inputs and the target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schema {
    pub inputs: Vec<String>,
    pub target: String,
}

pub fn load_csv(path: &Path, schema: &Schema) -> Result<TrainingSet> {
    let mut cols = schema.inputs.clone();
    cols.push(schema.target.clone());
    let t = load_table(path, Some(&cols))?;
    let m = schema.inputs.len();
    TrainingSet::with_names(
        t.data.columns(0, m).into_owned(),
        t.data.column(m).into_owned(),
        schema.inputs.clone(),
        schema.target.clone(),
    )
}

/// Training set from named columns of a table, with a target transform.
pub fn training_set(
    table: &Table,
    inputs: &[&str],
    target: &str,
    transform: impl Fn(f64) -> f64,
) -> Result<TrainingSet> {
    let col = |name: &str| {
        table
            .column_index(name)
            .ok_or_else(|| Error::InvalidData(format!("missing column `{name}`")))
    };
    let idx: Vec<usize> = inputs.iter().map(|c| col(c)).collect::<Result<_>>()?;
    let t = col(target)?;
    TrainingSet::with_names(
        table.data.select_columns(&idx),
        DVector::from_iterator(
            table.nrows(),
            table.data.column(t).iter().map(|v| transform(*v)),
        ),
        inputs.iter().map(|s| s.to_string()).collect(),
        target.to_string(),
    )
}

/// One-step recurrence stored with a network: outputs of step `k` feed the
/// wired observed slots at step `k + 1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Recurrence {
    pub wiring: StateWiring,
    pub steps: usize,
}

/// A trained network as stored on disk.
#[derive(Debug, Clone)]
pub struct Model {
    pub network: StackedNetwork,
    pub recurrence: Option<Recurrence>,
}

impl From<StackedNetwork> for Model {
    fn from(network: StackedNetwork) -> Self {
        Self {
            network,
            recurrence: None,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ModelPayload {
    network: NetworkParts,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    recurrence: Option<Recurrence>,
}

pub fn model_to_string(model: &Model) -> Result<String> {
    let payload = serde_json::to_string(&ModelPayload {
        network: model.network.to_parts(),
        recurrence: model.recurrence.clone(),
    })
    .map_err(|e| Error::Serialization(e.to_string()))?;
    let digest = Sha256::digest(payload.as_bytes());
    Ok(format!(
        "{MAGIC} v{MODEL_VERSION} sha256={digest:x}\n{payload}"
    ))
}

pub fn model_from_str(text: &str) -> Result<Model> {
    let (header, payload) = text
        .split_once('\n')
        .ok_or_else(|| Error::Serialization("missing model header".into()))?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some(MAGIC) {
        return Err(Error::Serialization("not a model file".into()));
    }
    let found: u32 = parts
        .next()
        .and_then(|v| v.strip_prefix('v'))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Serialization("bad version field".into()))?;
    if found != MODEL_VERSION {
        return Err(Error::Version {
            found,
            expected: MODEL_VERSION,
        });
    }
    let expected = parts
        .next()
        .and_then(|v| v.strip_prefix("sha256="))
        .ok_or_else(|| Error::Serialization("missing checksum".into()))?;
    let digest = format!("{:x}", Sha256::digest(payload.as_bytes()));
    if digest != expected {
        return Err(Error::Checksum);
    }
    let p: ModelPayload =
        serde_json::from_str(payload).map_err(|e| Error::Serialization(e.to_string()))?;
    let network = StackedNetwork::from_parts(p.network)?;
    if let Some(r) = &p.recurrence {
        network.check_wiring(&r.wiring)?;
    }
    Ok(Model {
        network,
        recurrence: p.recurrence,
    })
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    write_file(path, &model_to_string(model)?)
}

pub fn load_model(path: &Path) -> Result<Model> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    model_from_str(&text)
}

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Pretty JSON with a trailing newline; deterministic for a given value.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s =
        serde_json::to_string_pretty(value).map_err(|e| Error::Serialization(e.to_string()))?;
    s.push('\n');
    write_file(path, &s)
}

pub fn write_csv(path: &Path, headers: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(headers).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.write_record(r.iter().map(|v| v.to_string()))
            .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_histogram(path: &Path, h: &Histogram) -> Result<()> {
    let rows: Vec<Vec<f64>> = h
        .counts
        .iter()
        .enumerate()
        .map(|(i, c)| vec![h.edges[i], h.edges[i + 1], *c as f64])
        .collect();
    write_csv(path, &["bin_left", "bin_right", "count"], &rows)
}

pub fn write_trace(path: &Path, trace: &crate::network::PropagationTrace) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["step", "node", "mean", "variance"])
        .map_err(|e| csv_error(path, e))?;
    for r in trace.rows() {
        w.write_record([
            r.step.to_string(),
            r.node,
            r.mean.to_string(),
            r.variance.to_string(),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Kernel family in a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum KernelConfig {
    Rbf {
        #[serde(default)]
        variance: Option<f64>,
        #[serde(default)]
        rates: Option<Vec<f64>>,
    },
    Poly {
        degree: u32,
    },
    Sum {
        parts: Vec<KernelConfig>,
    },
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig::Rbf {
            variance: None,
            rates: None,
        }
    }
}

impl KernelConfig {
    fn part(&self, dim: usize) -> Result<Vec<KernelPart>> {
        Ok(match self {
            KernelConfig::Rbf { variance, rates } => {
                let rates = rates.clone().unwrap_or_else(|| vec![1.0; dim]);
                if rates.len() != dim {
                    return Err(Error::Config(format!(
                        "rbf kernel lists {} rates for {dim} inputs",
                        rates.len()
                    )));
                }
                vec![KernelPart::Rbf(RbfKernel::new(
                    variance.unwrap_or(1.0),
                    rates,
                )?)]
            }
            KernelConfig::Poly { degree } => {
                vec![KernelPart::Poly(PolynomialKernel::new(*degree)?)]
            }
            KernelConfig::Sum { parts } => {
                let mut out = Vec::new();
                for p in parts {
                    out.extend(p.part(dim)?);
                }
                out
            }
        })
    }

    pub fn build(&self, dim: usize) -> Result<Kernel> {
        let parts = self.part(dim)?;
        Ok(match self {
            KernelConfig::Sum { .. } => Kernel::sum(parts)?,
            _ => parts.into_iter().next().expect("one part").into(),
        })
    }
}

fn default_true() -> bool {
    true
}

/// One node in a network config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeConfig {
    pub name: String,
    /// Observed slot or earlier node names.
    pub inputs: Vec<String>,
    /// CSV file with this node's training data (relative to the config).
    pub dataset: PathBuf,
    /// Dataset columns matching `inputs`; defaults to the input names.
    #[serde(default)]
    pub columns: Option<Vec<String>>,
    /// Target column; defaults to the node name.
    #[serde(default)]
    pub target: Option<String>,
    #[serde(default)]
    pub kernel: KernelConfig,
    #[serde(default)]
    pub noise: Option<f64>,
    #[serde(default)]
    pub restarts: Option<usize>,
    #[serde(default)]
    pub max_iters: Option<usize>,
    #[serde(default)]
    pub standardize_inputs: bool,
    #[serde(default)]
    pub standardize_target: bool,
    #[serde(default)]
    pub fixed: bool,
    #[serde(default = "default_true")]
    pub ica: bool,
    #[serde(default)]
    pub input_uncertainty: InputUncertainty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerConfig {
    pub node: Vec<NodeConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecurrentConfig {
    /// Observed slot -> node whose output feeds it at the next step.
    pub state: BTreeMap<String, String>,
    pub steps: usize,
}

/// Human-editable network declaration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    #[serde(default)]
    pub seed: Option<u64>,
    pub observed: Vec<String>,
    pub layer: Vec<LayerConfig>,
    #[serde(default)]
    pub recurrent: Option<RecurrentConfig>,
    /// Directory the dataset paths are relative to (set on load).
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl NetworkConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: NetworkConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.spec()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Validated network spec.
    pub fn spec(&self) -> Result<NetworkSpec> {
        let mut where_is: HashMap<&str, Source> = self
            .observed
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), Source::Observed(i)))
            .collect();
        let mut layers = Vec::new();
        for (l, layer) in self.layer.iter().enumerate() {
            let mut nodes = Vec::new();
            for n in &layer.node {
                let inputs = n
                    .inputs
                    .iter()
                    .map(|i| {
                        where_is.get(i.as_str()).copied().ok_or_else(|| {
                            Error::Config(format!(
                                "node `{}`: input `{i}` is neither observed nor an earlier node",
                                n.name
                            ))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                if let Some(c) = &n.columns {
                    if c.len() != n.inputs.len() {
                        return Err(Error::Config(format!(
                            "node `{}`: {} columns for {} inputs",
                            n.name,
                            c.len(),
                            n.inputs.len()
                        )));
                    }
                }
                let kernel = n
                    .kernel
                    .build(n.inputs.len())
                    .map_err(|e| Error::Config(format!("node `{}`: {e}", n.name)))?;
                let defaults = TrainOptions::default();
                let options = TrainOptions {
                    noise: n.noise.unwrap_or(defaults.noise),
                    restarts: n.restarts.unwrap_or(defaults.restarts),
                    max_iters: n.max_iters.unwrap_or(defaults.max_iters),
                    standardize_inputs: n.standardize_inputs,
                    standardize_target: n.standardize_target,
                    ..defaults
                };
                nodes.push(NodeSpec {
                    name: n.name.clone(),
                    inputs,
                    kernel,
                    options,
                    fixed: n.fixed,
                    ica: n.ica,
                    input_uncertainty: n.input_uncertainty,
                });
            }
            for (i, n) in layer.node.iter().enumerate() {
                where_is.insert(n.name.as_str(), Source::Node { layer: l, index: i });
            }
            layers.push(nodes);
        }
        let spec = NetworkSpec {
            observed: self.observed.clone(),
            layers,
        };
        spec.validate().map_err(|e| Error::Config(e.to_string()))?;
        if let Some(r) = &self.recurrent {
            for (slot, node) in &r.state {
                if spec.slot(slot).is_none() || spec.find(node).is_none() {
                    return Err(Error::Config(format!(
                        "recurrent state `{slot} = {node}` needs an observed slot and a node"
                    )));
                }
            }
        }
        Ok(spec)
    }

    pub fn wiring(&self) -> Option<StateWiring> {
        let spec = self.spec().ok()?;
        self.recurrent.as_ref().map(|r| StateWiring {
            links: r
                .state
                .iter()
                .map(|(slot, node)| (node.clone(), spec.slot(slot).expect("validated")))
                .collect(),
        })
    }

    pub fn recurrence(&self) -> Option<Recurrence> {
        let steps = self.recurrent.as_ref()?.steps;
        self.wiring().map(|wiring| Recurrence { wiring, steps })
    }

    /// Load every node's training set, in flat node order.
    pub fn datasets(&self) -> Result<Vec<TrainingSet>> {
        self.layer
            .iter()
            .flat_map(|l| &l.node)
            .map(|n| {
                let schema = Schema {
                    inputs: n.columns.clone().unwrap_or_else(|| n.inputs.clone()),
                    target: n.target.clone().unwrap_or_else(|| n.name.clone()),
                };
                load_csv(&self.base_dir.join(&n.dataset), &schema).map_err(|e| Error::Node {
                    node: n.name.clone(),
                    source: Box::new(e),
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::GaussianBelief;
    use crate::network::BuildOptions;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn reads_well_formed_csv() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "a.csv",
            "x,label,y\n1,foo,2\n2,bar,4\n3,baz,6\n",
        );
        let ts = load_csv(
            &p,
            &Schema {
                inputs: vec!["x".into()],
                target: "y".into(),
            },
        )
        .unwrap();
        assert_eq!(ts.len(), 3);
        assert_eq!(ts.y[2], 6.0);
    }

    #[test]
    fn nan_cell_names_row_and_column() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.csv", "x,y\n1,2\n2,NaN\n");
        let err = load_csv(
            &p,
            &Schema {
                inputs: vec!["x".into()],
                target: "y".into(),
            },
        )
        .unwrap_err();
        match err {
            Error::NonFinite { row, column, .. } => {
                assert_eq!(row, 2);
                assert_eq!(column, "y");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn parse_error_has_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.csv", "x,y\n1,2\n2,oops\n");
        let err = load_csv(
            &p,
            &Schema {
                inputs: vec!["x".into()],
                target: "y".into(),
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err:?}");
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_table(Path::new("/nonexistent/x.csv"), None).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    fn tiny_net() -> StackedNetwork {
        let dir = tempfile::tempdir().unwrap();
        write(
            dir.path(),
            "z.csv",
            "x,z\n-1,1\n-0.5,0.25\n0,0\n0.5,0.25\n1,1\n",
        );
        write(dir.path(), "y.csv", "z,y\n0,0\n0.25,0.5\n0.5,1\n1,2\n");
        let cfg = NetworkConfig::from_toml(
            r#"
observed = ["x"]

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
kernel = { type = "sum", parts = [{ type = "rbf" }, { type = "poly", degree = 1 }] }
restarts = 2
"#,
            dir.path(),
        )
        .unwrap();
        let data = cfg.datasets().unwrap();
        StackedNetwork::build_and_train(cfg.spec().unwrap(), &data, BuildOptions::default())
            .unwrap()
    }

    #[test]
    fn model_round_trip_is_bit_identical() {
        let net = tiny_net();
        let text = model_to_string(&net.clone().into()).unwrap();
        let back = model_from_str(&text).unwrap().network;
        for x in [-0.7, 0.1, 0.9] {
            let obs = [GaussianBelief::new(x, 0.01).unwrap()];
            assert_eq!(net.propagate(&obs).unwrap(), back.propagate(&obs).unwrap());
        }
    }

    #[test]
    fn bumped_version_is_rejected() {
        let text = model_to_string(&tiny_net().into())
            .unwrap()
            .replacen(" v1 ", " v2 ", 1);
        assert!(matches!(
            model_from_str(&text),
            Err(Error::Version {
                found: 2,
                expected: 1
            })
        ));
    }

    #[test]
    fn truncated_file_fails_checksum() {
        let text = model_to_string(&tiny_net().into()).unwrap();
        let cut = &text[..text.len() - 40];
        assert!(matches!(model_from_str(cut), Err(Error::Checksum)));
    }

    #[test]
    fn config_rejects_unknown_input() {
        let err = NetworkConfig::from_toml(
            r#"
observed = ["x"]
[[layer]]
[[layer.node]]
name = "z"
inputs = ["w"]
dataset = "z.csv"
"#,
            Path::new("."),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(m) if m.contains("`w`")));
    }
}

//! Reference message-passing backbones and classifier heads.
//!
//! Two backbones ship: a GIN-style network (`h' = MLP(h + sum_j w_ij h_j)`,
//! epsilon fixed at 0) and a GCN-style network that averages the closed
//! neighborhood with degree normalization
//! (`h' = W ((h_i + sum_j w_ij h_j) / (1 + sum_j w_ij)) + b`). Both weight
//! every message by the directed edge weight, which is how soft subgraph
//! masks reach the classifier. Self-loops are never stored on graphs; the
//! update rules add the self contribution implicitly.

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::path::Path;
use std::sync::Arc;

use crate::autodiff::{Edges, Segments, Tape, Var};
use crate::error::{LisaError, Result};
use crate::graph::Graph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneKind {
    GinLike,
    GcnLike,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Readout {
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub num_layers: usize,
    pub hidden_dim: usize,
    /// Number of classes for classifier heads, 1 for generator heads.
    pub out_dim: usize,
    /// Pooling used in graph-level mode only.
    pub readout: Readout,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers < 1 {
            return Err(LisaError::ConfigError("num_layers must be >= 1".into()));
        }
        if self.hidden_dim == 0 || self.out_dim == 0 {
            return Err(LisaError::ConfigError("dims must be positive".into()));
        }
        Ok(())
    }
}

/// Ordered collection of named parameter arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    entries: Vec<(String, Array2<f64>)>,
}

impl ParameterSet {
    pub fn new(entries: Vec<(String, Array2<f64>)>) -> Self {
        Self { entries }
    }

    pub fn entries(&self) -> &[(String, Array2<f64>)] {
        &self.entries
    }

    pub fn arrays(&self) -> impl Iterator<Item = &Array2<f64>> {
        self.entries.iter().map(|(_, a)| a)
    }

    pub fn arrays_mut(&mut self) -> impl Iterator<Item = &mut Array2<f64>> {
        self.entries.iter_mut().map(|(_, a)| a)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    /// Order-sensitive hash of the exact bit patterns; used to assert that a
    /// training phase left a parameter group untouched.
    pub fn checksum(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (name, a) in &self.entries {
            name.hash(&mut h);
            for &x in a.iter() {
                x.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    pub fn assert_finite(&self, context: &'static str) -> Result<()> {
        for (_, a) in &self.entries {
            if !a.iter().all(|x| x.is_finite()) {
                return Err(LisaError::NonFiniteActivation { context });
            }
        }
        Ok(())
    }

    /// Push every array onto a tape, as leaves when `trainable` (so gradients
    /// accumulate) or as constants otherwise.
    pub fn push_on(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.entries
            .iter()
            .map(|(_, a)| {
                if trainable {
                    tape.leaf(a.clone())
                } else {
                    tape.constant(a.clone())
                }
            })
            .collect()
    }
}

fn uniform_fan_in(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    let bound = 1.0 / (rows as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random::<f64>() * 2.0 * bound - bound)
}

fn layer_param_count(kind: BackboneKind) -> usize {
    match kind {
        BackboneKind::GinLike => 4,
        BackboneKind::GcnLike => 2,
    }
}

fn bias_fan_in(rng: &mut impl Rng, fan_in: usize, cols: usize) -> Array2<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array2::from_shape_fn((1, cols), |_| rng.random::<f64>() * 2.0 * bound - bound)
}

/// Initialize backbone + head parameters with uniform fan-in scaling.
/// Biases use the same bound as their layer so that no unit starts exactly
/// on a rectifier kink.
pub fn init_params(cfg: &BackboneConfig, in_dim: usize, rng: &mut impl Rng) -> ParameterSet {
    let h = cfg.hidden_dim;
    let mut entries = Vec::new();
    let mut d = in_dim;
    for layer in 0..cfg.num_layers {
        match cfg.kind {
            BackboneKind::GinLike => {
                entries.push((format!("layer{layer}.w1"), uniform_fan_in(rng, d, h)));
                entries.push((format!("layer{layer}.b1"), bias_fan_in(rng, d, h)));
                entries.push((format!("layer{layer}.w2"), uniform_fan_in(rng, h, h)));
                entries.push((format!("layer{layer}.b2"), bias_fan_in(rng, h, h)));
            }
            BackboneKind::GcnLike => {
                entries.push((format!("layer{layer}.w"), uniform_fan_in(rng, d, h)));
                entries.push((format!("layer{layer}.b"), bias_fan_in(rng, d, h)));
            }
        }
        d = h;
    }
    entries.push(("head.w1".into(), uniform_fan_in(rng, h, h)));
    entries.push(("head.b1".into(), bias_fan_in(rng, h, h)));
    entries.push(("head.w2".into(), uniform_fan_in(rng, h, cfg.out_dim)));
    entries.push(("head.b2".into(), bias_fan_in(rng, h, cfg.out_dim)));
    ParameterSet::new(entries)
}

/// Graph tensors prepared for forward passes; shared immutable pieces are
/// wrapped in `Arc` so multiple tape ops can reference them cheaply.
#[derive(Debug, Clone)]
pub struct PreparedGraph {
    pub x: Array2<f64>,
    pub edges: Edges,
    pub weights: Array1<f64>,
    pub num_nodes: usize,
    pub membership: Segments,
    pub num_graphs: usize,
}

impl PreparedGraph {
    pub fn from_graph(g: &Graph) -> Self {
        Self {
            x: g.node_features().clone(),
            edges: Arc::new(g.edges().to_vec()),
            weights: Array1::from_vec(g.edge_weights().to_vec()),
            num_nodes: g.num_nodes(),
            membership: Arc::new(vec![0; g.num_nodes()]),
            num_graphs: 1,
        }
    }

    pub fn from_union(union: &Graph, membership: Vec<usize>, num_graphs: usize) -> Self {
        Self {
            x: union.node_features().clone(),
            edges: Arc::new(union.edges().to_vec()),
            weights: Array1::from_vec(union.edge_weights().to_vec()),
            num_nodes: union.num_nodes(),
            membership: Arc::new(membership),
            num_graphs,
        }
    }

    /// Per-segment node counts, for mean readout.
    pub fn segment_counts(&self) -> Array1<f64> {
        let mut counts = Array1::zeros(self.num_graphs);
        for &m in self.membership.iter() {
            counts[m] += 1.0;
        }
        counts
    }
}

/// `l` rounds of weighted neighbor aggregation on the tape; returns the
/// `num_nodes x hidden_dim` embedding node.
pub fn embeddings_var(
    tape: &mut Tape,
    cfg: &BackboneConfig,
    params: &[Var],
    pg: &PreparedGraph,
    x: Var,
    w: Var,
) -> Result<Var> {
    cfg.validate()?;
    let expected = cfg.num_layers * layer_param_count(cfg.kind) + 4;
    if params.len() != expected {
        return Err(LisaError::ShapeMismatch {
            context: "backbone parameters",
            detail: format!("expected {expected} arrays, got {}", params.len()),
        });
    }
    let mut h = x;
    let mut cursor = 0;
    for layer in 0..cfg.num_layers {
        let last = layer + 1 == cfg.num_layers;
        match cfg.kind {
            BackboneKind::GinLike => {
                let (w1, b1, w2, b2) =
                    (params[cursor], params[cursor + 1], params[cursor + 2], params[cursor + 3]);
                cursor += 4;
                let agg = tape.edge_aggregate(h, w, pg.edges.clone(), pg.num_nodes);
                let s = tape.add(h, agg);
                let z1 = tape.matmul(s, w1);
                let z1 = tape.add_row(z1, b1);
                let a1 = tape.relu(z1);
                let z2 = tape.matmul(a1, w2);
                let z2 = tape.add_row(z2, b2);
                h = if last { z2 } else { tape.relu(z2) };
            }
            BackboneKind::GcnLike => {
                let (wl, bl) = (params[cursor], params[cursor + 1]);
                cursor += 2;
                let deg = tape.edge_degree(w, pg.edges.clone(), pg.num_nodes);
                let dtot = tape.add_scalar(deg, 1.0);
                let inv = tape.recip(dtot);
                let agg = tape.edge_aggregate(h, w, pg.edges.clone(), pg.num_nodes);
                let closed = tape.add(h, agg);
                let nrm = tape.row_scale(closed, inv);
                let z = tape.matmul(nrm, wl);
                let z = tape.add_row(z, bl);
                h = if last { z } else { tape.relu(z) };
            }
        }
    }
    Ok(h)
}

/// Two-layer rectifier head ending in an affine map.
pub fn head_var(tape: &mut Tape, cfg: &BackboneConfig, params: &[Var], input: Var) -> Var {
    let base = cfg.num_layers * layer_param_count(cfg.kind);
    let (w1, b1, w2, b2) = (params[base], params[base + 1], params[base + 2], params[base + 3]);
    let z1 = tape.matmul(input, w1);
    let z1 = tape.add_row(z1, b1);
    let a1 = tape.relu(z1);
    let z2 = tape.matmul(a1, w2);
    tape.add_row(z2, b2)
}

/// Readout then head: `num_graphs x out_dim` unnormalized logits.
pub fn graph_logits_var(
    tape: &mut Tape,
    cfg: &BackboneConfig,
    params: &[Var],
    pg: &PreparedGraph,
    x: Var,
    w: Var,
) -> Result<Var> {
    let h = embeddings_var(tape, cfg, params, pg, x, w)?;
    let pooled = tape.segment_sum(h, pg.membership.clone(), pg.num_graphs);
    let pooled = match cfg.readout {
        Readout::Sum => pooled,
        Readout::Mean => {
            let inv = pg.segment_counts().mapv(|c| 1.0 / c);
            let inv = tape.constant_col(&inv);
            tape.row_scale(pooled, inv)
        }
    };
    Ok(head_var(tape, cfg, params, pooled))
}

/// Per-node logits without readout: `num_nodes x out_dim`.
pub fn node_logits_var(
    tape: &mut Tape,
    cfg: &BackboneConfig,
    params: &[Var],
    pg: &PreparedGraph,
    x: Var,
    w: Var,
) -> Result<Var> {
    let h = embeddings_var(tape, cfg, params, pg, x, w)?;
    Ok(head_var(tape, cfg, params, h))
}

fn check_finite(a: &Array2<f64>, context: &'static str) -> Result<()> {
    if a.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(LisaError::NonFiniteActivation { context })
    }
}

/// Node embeddings of a single validated graph.
pub fn node_embeddings(cfg: &BackboneConfig, params: &ParameterSet, g: &Graph) -> Result<Array2<f64>> {
    let pg = PreparedGraph::from_graph(g);
    let mut tape = Tape::new();
    let x = tape.constant(pg.x.clone());
    let w = tape.constant_col(&pg.weights);
    let pvars = params.push_on(&mut tape, false);
    let h = embeddings_var(&mut tape, cfg, &pvars, &pg, x, w)?;
    let out = tape.value(h).clone();
    check_finite(&out, "node_embeddings")?;
    Ok(out)
}

/// Unnormalized class logits of a single graph.
pub fn graph_logits(cfg: &BackboneConfig, params: &ParameterSet, g: &Graph) -> Result<Array1<f64>> {
    let pg = PreparedGraph::from_graph(g);
    let mut tape = Tape::new();
    let x = tape.constant(pg.x.clone());
    let w = tape.constant_col(&pg.weights);
    let pvars = params.push_on(&mut tape, false);
    let l = graph_logits_var(&mut tape, cfg, &pvars, &pg, x, w)?;
    let out = tape.value(l).clone();
    check_finite(&out, "graph_logits")?;
    Ok(out.row(0).to_owned())
}

/// Per-node class logits of a single graph.
pub fn node_logits(cfg: &BackboneConfig, params: &ParameterSet, g: &Graph) -> Result<Array2<f64>> {
    let pg = PreparedGraph::from_graph(g);
    let mut tape = Tape::new();
    let x = tape.constant(pg.x.clone());
    let w = tape.constant_col(&pg.weights);
    let pvars = params.push_on(&mut tape, false);
    let l = node_logits_var(&mut tape, cfg, &pvars, &pg, x, w)?;
    let out = tape.value(l).clone();
    check_finite(&out, "node_logits")?;
    Ok(out)
}

/// Reverse-mode gradients of a scalar loss with respect to the given
/// parameter vars, aligned with their order.
pub fn gradient(tape: &mut Tape, loss: Var, param_vars: &[Var]) -> Result<Vec<Array2<f64>>> {
    let grads = tape.backward(loss)?;
    if !grads.is_finite() {
        return Err(LisaError::NonFiniteGradient { detail: "backward pass produced non-finite values".into() });
    }
    Ok(param_vars.iter().map(|&v| grads.grad_of(tape, v)).collect())
}

/// First-order adaptive-moment optimizer with fixed defaults.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(lr: f64, params: &ParameterSet) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.arrays().map(|a| Array2::zeros(a.raw_dim())).collect(),
            v: params.arrays().map(|a| Array2::zeros(a.raw_dim())).collect(),
        }
    }

    pub fn step(&mut self, params: &mut ParameterSet, grads: &[Array2<f64>]) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(LisaError::LengthMismatch {
                what: "gradients vs parameters",
                left: grads.len(),
                right: self.m.len(),
            });
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .arrays_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
        Ok(())
    }
}

const CHECKPOINT_MAGIC: &str = "LISA-CKPT";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamArray {
    pub shape: (usize, usize),
    pub data: Vec<f64>,
}

impl ParamArray {
    pub fn from_array(a: &Array2<f64>) -> Self {
        Self { shape: a.dim(), data: a.iter().copied().collect() }
    }

    pub fn to_array(&self) -> Result<Array2<f64>> {
        Array2::from_shape_vec(self.shape, self.data.clone()).map_err(|e| LisaError::ShapeMismatch {
            context: "checkpoint array",
            detail: e.to_string(),
        })
    }
}

/// Self-describing checkpoint container with a versioned magic header.
/// Classifier arrays live under `clf/<name>`, each generator's under
/// `gen/<id>/<name>`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub magic: String,
    pub version: u32,
    pub backbone: BackboneConfig,
    pub generator_backbone: Option<BackboneConfig>,
    pub seed: u64,
    pub epoch: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub n_generators: usize,
    pub temperature: f64,
    pub task: String,
    pub params: Vec<(String, ParamArray)>,
}

impl Checkpoint {
    pub fn new(backbone: BackboneConfig, seed: u64, epoch: usize) -> Self {
        Self {
            magic: CHECKPOINT_MAGIC.into(),
            version: CHECKPOINT_VERSION,
            backbone,
            generator_backbone: None,
            seed,
            epoch,
            num_classes: 0,
            feature_dim: 0,
            n_generators: 0,
            temperature: 1.0,
            task: "graph".into(),
            params: Vec::new(),
        }
    }

    pub fn insert_group(&mut self, prefix: &str, params: &ParameterSet) {
        for (name, a) in params.entries() {
            self.params.push((format!("{prefix}/{name}"), ParamArray::from_array(a)));
        }
    }

    /// Extract one parameter group by prefix, preserving stored order.
    pub fn group(&self, prefix: &str) -> Result<ParameterSet> {
        let want = format!("{prefix}/");
        let entries: Vec<(String, Array2<f64>)> = self
            .params
            .iter()
            .filter(|(k, _)| k.starts_with(&want))
            .map(|(k, v)| Ok((k[want.len()..].to_string(), v.to_array()?)))
            .collect::<Result<_>>()?;
        if entries.is_empty() {
            return Err(LisaError::DataError(format!("checkpoint has no group `{prefix}`")));
        }
        Ok(ParameterSet::new(entries))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)
            .map_err(|e| LisaError::DataError(format!("serialize checkpoint: {e}")))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| LisaError::ParseError { line: 0, detail: e.to_string() })?;
        if ckpt.magic != CHECKPOINT_MAGIC {
            return Err(LisaError::DataError(format!("bad checkpoint magic `{}`", ckpt.magic)));
        }
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(LisaError::DataError(format!("unsupported checkpoint version {}", ckpt.version)));
        }
        Ok(ckpt)
    }
}

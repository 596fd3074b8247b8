//! Synthetic benchmarks and dataset plumbing: the spurious-motif graph
//! classification benchmark, size-based split protocols, a two-community
//! node-classification task with a controllable feature shift, and dataset
//! (de)serialization helpers.
//!
//! Canonical structures (frozen; see `docs/dataset.md`):
//!
//! * motifs — `cycle`: 6-node ring; `house`: 5 nodes, roof triangle over a
//!   square; `crane`: 6 nodes, a triangle and a quadrilateral sharing one
//!   vertex (boom loop). All three are 2-edge-connected, so a single
//!   attachment edge can never create a second instance.
//! * bases — `tree`: balanced binary, 3 levels, 7 nodes; `ladder`: 2 x 6;
//!   `wheel`: hub plus 8-ring.
//!
//! Each graph attaches one uniformly chosen motif node to one uniformly
//! chosen base node by a single edge; the label is the motif class. The base
//! class is sampled with `P(S = C) = b` and `(1 - b) / 2` for each other
//! class; test and validation graphs use the unbiased `b = 1/3`.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{LisaError, Result};
use crate::graph::{load_graphs, load_manifest, Graph, SplitManifest};

pub const NUM_CLASSES: usize = 3;
pub const UNBIASED: f64 = 1.0 / 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureMode {
    RandomUniform,
    ConstantOne,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpMotifConfig {
    /// Spurious correlation strength between motif and base on train graphs.
    pub bias: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
    pub feature_dim: usize,
    pub feature_mode: FeatureMode,
}

impl Default for SpMotifConfig {
    fn default() -> Self {
        Self {
            bias: 0.9,
            n_train: 3000,
            n_val: 500,
            n_test: 1000,
            seed: 0,
            feature_dim: 4,
            feature_mode: FeatureMode::RandomUniform,
        }
    }
}

impl SpMotifConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.bias) {
            return Err(LisaError::ConfigError(format!(
                "bias must be in [0, 1], got {}",
                self.bias
            )));
        }
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(LisaError::ConfigError("split counts must be positive".into()));
        }
        if self.feature_dim == 0 {
            return Err(LisaError::ConfigError("feature_dim must be positive".into()));
        }
        Ok(())
    }
}

/// Undirected edge lists of the canonical motifs, label = index.
pub fn motif_edges(class: usize) -> (&'static [(usize, usize)], usize) {
    match class {
        // 6-ring
        0 => (&[(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 0)], 6),
        // roof triangle (0,1,2) over square (1,2,4,3)
        1 => (&[(0, 1), (0, 2), (1, 2), (1, 3), (2, 4), (3, 4)], 5),
        // triangle (0,1,2) and quadrilateral (2,3,4,5) sharing vertex 2
        2 => (&[(0, 1), (1, 2), (0, 2), (2, 3), (3, 4), (4, 5), (5, 2)], 6),
        _ => panic!("motif class out of range"),
    }
}

/// Undirected edge lists of the canonical bases.
pub fn base_edges(class: usize) -> (&'static [(usize, usize)], usize) {
    match class {
        // balanced binary tree, 3 levels
        0 => (&[(0, 1), (0, 2), (1, 3), (1, 4), (2, 5), (2, 6)], 7),
        // 2 x 6 ladder: rails 0..6 and 6..12, rungs between
        1 => (
            &[
                (0, 1), (1, 2), (2, 3), (3, 4), (4, 5),
                (6, 7), (7, 8), (8, 9), (9, 10), (10, 11),
                (0, 6), (1, 7), (2, 8), (3, 9), (4, 10), (5, 11),
            ],
            12,
        ),
        // wheel: hub 0, ring 1..=8
        2 => (
            &[
                (0, 1), (0, 2), (0, 3), (0, 4), (0, 5), (0, 6), (0, 7), (0, 8),
                (1, 2), (2, 3), (3, 4), (4, 5), (5, 6), (6, 7), (7, 8), (8, 1),
            ],
            9,
        ),
        _ => panic!("base class out of range"),
    }
}

fn sample_base_class(motif: usize, bias: f64, rng: &mut impl Rng) -> usize {
    let r: f64 = rng.random();
    if r < bias {
        motif
    } else if r < bias + (1.0 - bias) / 2.0 {
        (motif + 1) % NUM_CLASSES
    } else {
        (motif + 2) % NUM_CLASSES
    }
}

/// Generate one motif-plus-base graph. Exposed so tests can target specific
/// class combinations.
pub fn make_spmotif_graph(
    motif_class: usize,
    base_class: usize,
    feature_dim: usize,
    feature_mode: FeatureMode,
    rng: &mut impl Rng,
) -> Graph {
    let (m_edges, m_n) = motif_edges(motif_class);
    let (b_edges, b_n) = base_edges(base_class);
    let n = m_n + b_n;
    let mut edges: Vec<(usize, usize)> = m_edges.to_vec();
    edges.extend(b_edges.iter().map(|&(u, v)| (u + m_n, v + m_n)));
    let motif_anchor = rng.random_range(0..m_n);
    let base_anchor = m_n + rng.random_range(0..b_n);
    edges.push((motif_anchor, base_anchor));
    let features = match feature_mode {
        FeatureMode::RandomUniform => Array2::from_shape_fn((n, feature_dim), |_| rng.random::<f64>()),
        FeatureMode::ConstantOne => Array2::from_elem((n, feature_dim), 1.0),
    };
    Graph::build(&edges, features, Some(motif_class), None).expect("canonical structures are valid")
}

fn spmotif_one(cfg: &SpMotifConfig, index: usize, bias: f64) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64 + 1);
    let motif = rng.random_range(0..NUM_CLASSES);
    let base = sample_base_class(motif, bias, &mut rng);
    make_spmotif_graph(motif, base, cfg.feature_dim, cfg.feature_mode, &mut rng)
}

/// Generate the full benchmark: biased train graphs followed by unbiased
/// validation and test graphs, plus the index manifest.
pub fn spmotif_generate(cfg: &SpMotifConfig, workers: usize) -> Result<(Vec<Graph>, SplitManifest)> {
    cfg.validate()?;
    let total = cfg.n_train + cfg.n_val + cfg.n_test;
    let bias_of = |i: usize| if i < cfg.n_train { cfg.bias } else { UNBIASED };
    let graphs: Vec<Graph> = if workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| LisaError::ConfigError(format!("worker pool: {e}")))?;
        pool.install(|| (0..total).into_par_iter().map(|i| spmotif_one(cfg, i, bias_of(i))).collect())
    } else {
        (0..total).map(|i| spmotif_one(cfg, i, bias_of(i))).collect()
    };
    let manifest = SplitManifest {
        train: (0..cfg.n_train).collect(),
        val: (cfg.n_train..cfg.n_train + cfg.n_val).collect(),
        test: (cfg.n_train + cfg.n_val..total).collect(),
    };
    Ok((graphs, manifest))
}

/// Partition a dataset by node count: `n < train_max` trains,
/// `val_range.0 <= n <= val_range.1` validates, `n > test_min` tests.
pub fn size_split(
    graphs: &[Graph],
    train_max: usize,
    val_range: (usize, usize),
    test_min: usize,
) -> Result<SplitManifest> {
    if !(train_max <= val_range.0 && val_range.0 <= val_range.1 && val_range.1 <= test_min) {
        return Err(LisaError::ConfigError(format!(
            "size thresholds must be ordered: {} <= {} <= {} <= {}",
            train_max, val_range.0, val_range.1, test_min
        )));
    }
    let mut manifest = SplitManifest::default();
    for (i, g) in graphs.iter().enumerate() {
        let n = g.num_nodes();
        if n < train_max {
            manifest.train.push(i);
        } else if n >= val_range.0 && n <= val_range.1 {
            manifest.val.push(i);
        } else if n > test_min {
            manifest.test.push(i);
        }
    }
    if manifest.train.is_empty() {
        return Err(LisaError::EmptySplit { split: "train" });
    }
    if manifest.val.is_empty() {
        return Err(LisaError::EmptySplit { split: "val" });
    }
    if manifest.test.is_empty() {
        return Err(LisaError::EmptySplit { split: "test" });
    }
    Ok(manifest)
}

/// Node-level task: one graph, per-node labels, and node index splits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeTask {
    pub labels: Vec<usize>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl NodeTask {
    pub fn validate(&self, num_nodes: usize) -> Result<()> {
        if self.labels.len() != num_nodes {
            return Err(LisaError::LengthMismatch {
                what: "node labels vs nodes",
                left: self.labels.len(),
                right: num_nodes,
            });
        }
        for &i in self.train.iter().chain(&self.val).chain(&self.test) {
            if i >= num_nodes {
                return Err(LisaError::ManifestOutOfRange { index: i, count: num_nodes });
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| LisaError::DataError(format!("serialize node task: {e}")))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| LisaError::ParseError { line: 0, detail: e.to_string() })
    }
}

const NODE_TASK_NODES: usize = 300;
const NODE_FEATURE_DIM: usize = 4;
const SPURIOUS_AMPLITUDE: f64 = 0.9;

fn gaussian(rng: &mut impl Rng) -> f64 {
    // Box-Muller; one value per call keeps the stream layout simple.
    let u1: f64 = loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            break u;
        }
    };
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Two-community node task. Channel 0 carries a weak stable label signal,
/// channels 1 and 3 are noise, channel 2 is spuriously correlated with the
/// label on train/validation nodes (correlation ~0.9 at unit variance) and
/// decorrelated on test nodes by `shift_strength`.
pub fn synth_node_task(seed: u64, shift_strength: f64) -> Result<(Graph, NodeTask)> {
    if !(0.0..=1.0).contains(&shift_strength) {
        return Err(LisaError::ConfigError(format!(
            "shift_strength must be in [0, 1], got {shift_strength}"
        )));
    }
    let n = NODE_TASK_NODES;
    let half = n / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7001);

    let labels: Vec<usize> = (0..n).map(|i| usize::from(i >= half)).collect();

    // Stochastic block structure.
    let (p_in, p_out) = (0.035, 0.006);
    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            let p = if labels[u] == labels[v] { p_in } else { p_out };
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }

    // Node splits: shuffled 50/20/30.
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let n_train = n / 2;
    let n_val = n / 5;
    let train: Vec<usize> = order[..n_train].to_vec();
    let val: Vec<usize> = order[n_train..n_train + n_val].to_vec();
    let test: Vec<usize> = order[n_train + n_val..].to_vec();
    let is_test: Vec<bool> = {
        let mut v = vec![false; n];
        for &i in &test {
            v[i] = true;
        }
        v
    };

    let spur_noise = (1.0 - SPURIOUS_AMPLITUDE * SPURIOUS_AMPLITUDE).sqrt();
    let mut x = Array2::zeros((n, NODE_FEATURE_DIM));
    for i in 0..n {
        let s = if labels[i] == 1 { 1.0 } else { -1.0 };
        x[[i, 0]] = 0.3 * s + gaussian(&mut rng);
        x[[i, 1]] = gaussian(&mut rng);
        let amp = if is_test[i] { SPURIOUS_AMPLITUDE * (1.0 - shift_strength) } else { SPURIOUS_AMPLITUDE };
        x[[i, 2]] = amp * s + spur_noise * gaussian(&mut rng);
        x[[i, 3]] = gaussian(&mut rng);
    }

    let graph = Graph::build(&edges, x, None, None)?;
    let task = NodeTask { labels, train, val, test };
    task.validate(graph.num_nodes())?;
    Ok((graph, task))
}

/// Graphs of each split, resolved through a manifest.
pub struct DatasetSplits {
    pub train: Vec<Graph>,
    pub val: Vec<Graph>,
    pub test: Vec<Graph>,
}

pub fn load_dataset(dataset: &Path, manifest: &Path) -> Result<DatasetSplits> {
    let graphs = load_graphs(dataset)?;
    let manifest = load_manifest(manifest)?;
    manifest.validate(graphs.len())?;
    let pick = |idx: &[usize]| -> Vec<Graph> { idx.iter().map(|&i| graphs[i].clone()).collect() };
    Ok(DatasetSplits {
        train: pick(&manifest.train),
        val: pick(&manifest.val),
        test: pick(&manifest.test),
    })
}

pub fn save_dataset(
    dataset: &Path,
    manifest_path: &Path,
    graphs: &[Graph],
    manifest: &SplitManifest,
) -> Result<()> {
    manifest.validate(graphs.len())?;
    crate::graph::save_graphs(dataset, graphs)?;
    crate::graph::save_manifest(manifest_path, manifest)?;
    Ok(())
}

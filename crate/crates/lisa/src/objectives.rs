//! Loss functions: proxy classification loss, variance-penalized invariant
//! objective, energy scores, pairwise environment distances, the diversity
//! regularizer, and the composed inner/outer objectives of the alternating
//! scheme.
//!
//! Sign convention: the inner objective *subtracts* `beta * L_e` so that
//! minimizing it enlarges the pairwise distances between environments.
//! `literal_eq15_sign = true` adds the term instead, which collapses the
//! environments and exists for ablation only.

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::autodiff::{Tape, Var};
use crate::backbones::{self, BackboneConfig, ParameterSet, PreparedGraph};
use crate::error::{LisaError, Result};
use crate::generator::{self, GeneratorConfig};

/// Per-step loss components; serialized into the metrics log.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct LossBreakdown {
    pub l_cls_per_env: Vec<f64>,
    pub l_cls_mean: f64,
    pub l_var: f64,
    pub l_info: f64,
    pub l_e: f64,
    pub total_outer: f64,
    pub total_inner: f64,
}

/// Numerically stabilized `-log softmax(logits)[label]`.
pub fn cross_entropy(logits: ArrayView1<f64>, label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(LisaError::LabelOutOfRange { label, num_classes: logits.len() });
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
    Ok(lse - logits[label])
}

/// Mean plus `lambda_var` times the population variance of per-environment
/// losses.
pub fn vrex_objective(per_env_losses: &[f64], lambda_var: f64) -> Result<f64> {
    if per_env_losses.is_empty() {
        return Err(LisaError::EmptyEnvironments);
    }
    let n = per_env_losses.len() as f64;
    let mean = per_env_losses.iter().sum::<f64>() / n;
    let var = per_env_losses.iter().map(|&l| (l - mean) * (l - mean)).sum::<f64>() / n;
    Ok(mean + lambda_var * var)
}

/// Energy score `-log sum_Y exp(logits[Y])` via the stabilized identity.
pub fn energy_score(logits: ArrayView1<f64>) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    -(logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max)
}

/// Mean squared energy-score gap over paired samples: `(1/2N) sum (s_j - s_k)^2`.
pub fn env_pair_distance(scores_j: &[f64], scores_k: &[f64]) -> Result<f64> {
    if scores_j.len() != scores_k.len() {
        return Err(LisaError::LengthMismatch {
            what: "paired score vectors",
            left: scores_j.len(),
            right: scores_k.len(),
        });
    }
    if scores_j.is_empty() {
        return Err(LisaError::LengthMismatch { what: "paired score vectors", left: 0, right: 0 });
    }
    let n = scores_j.len() as f64;
    Ok(scores_j
        .iter()
        .zip(scores_k)
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<f64>()
        / (2.0 * n))
}

/// Mean pairwise distance over all unordered environment pairs,
/// normalization `2 / (m (m - 1))` for `m` environments.
pub fn diversity_loss(all_env_scores: &[Vec<f64>]) -> Result<f64> {
    let m = all_env_scores.len();
    if m < 2 {
        return Err(LisaError::TooFewEnvironments { got: m });
    }
    let mut total = 0.0;
    for j in 0..m {
        for k in (j + 1)..m {
            total += env_pair_distance(&all_env_scores[j], &all_env_scores[k])?;
        }
    }
    Ok(total * 2.0 / (m as f64 * (m as f64 - 1.0)))
}

/// How the generators are pushed apart in the inner objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiversityMode {
    /// Pairwise energy-score distances (the default regularizer).
    Energy,
    /// Variance of per-environment classification losses (the -Rex variant).
    Rex,
    /// No diversity term (ablation).
    None,
}

/// Options shared by the inner-loss builders.
#[derive(Debug, Clone, Copy)]
pub struct InnerOpts {
    pub alpha: f64,
    pub beta: f64,
    pub mode: DiversityMode,
    /// `+beta` instead of `-beta` on the diversity term.
    pub literal_sign: bool,
    /// Whether environment 0 participates in the pairwise sums.
    pub include_original: bool,
}

/// A minibatch prepared for classifier forwards. In graph mode `item_rows`
/// is `None` and logits rows are graphs; in node mode it selects the labeled
/// node rows of the single large graph.
#[derive(Debug, Clone)]
pub struct BatchData {
    pub pg: PreparedGraph,
    pub labels: Arc<Vec<usize>>,
    pub item_rows: Option<Arc<Vec<usize>>>,
}

impl BatchData {
    pub fn num_items(&self) -> usize {
        self.labels.len()
    }
}

/// Detached (gradient-free) context of all current environments: index 0 is
/// the original data, index `i >= 1` is generator `i`'s environment.
#[derive(Debug, Clone, Default)]
pub struct EnvContext {
    /// Energy score vectors, one per environment, each over the same items.
    pub scores: Vec<Vec<f64>>,
    /// Per-environment mean classification losses.
    pub ce_means: Vec<f64>,
}

/// Classifier logits for one (possibly masked) input; rows are items.
fn item_logits_var(
    tape: &mut Tape,
    cfg: &BackboneConfig,
    pvars: &[Var],
    batch: &BatchData,
    x: Var,
    w: Var,
) -> Result<Var> {
    match &batch.item_rows {
        None => backbones::graph_logits_var(tape, cfg, pvars, &batch.pg, x, w),
        Some(rows) => {
            let all = backbones::node_logits_var(tape, cfg, pvars, &batch.pg, x, w)?;
            Ok(tape.take_rows(all, rows.clone()))
        }
    }
}

/// Raw-input logits, convenience for environment 0.
pub fn raw_logits_var(
    tape: &mut Tape,
    cfg: &BackboneConfig,
    pvars: &[Var],
    batch: &BatchData,
) -> Result<Var> {
    let x = tape.constant(batch.pg.x.clone());
    let w = tape.constant_col(&batch.pg.weights);
    item_logits_var(tape, cfg, pvars, batch, x, w)
}

/// Pieces of one generator's forward pass that later terms reuse.
pub struct GeneratorForward {
    /// Keep probabilities, `num_nodes x 1`.
    pub p: Var,
    /// Relaxed node masks, `num_nodes x 1`.
    pub m_hat: Var,
    /// Classifier logits on the masked input; rows are items.
    pub logits: Var,
    /// Energy scores on the masked input, `items x 1`.
    pub scores: Var,
}

/// Run generator `gen` on the batch with fixed uniform draws and push the
/// masked classifier forward.
pub fn generator_forward(
    tape: &mut Tape,
    clf_cfg: &BackboneConfig,
    clf_pvars: &[Var],
    gen_cfg: &GeneratorConfig,
    gen_pvars: &[Var],
    batch: &BatchData,
    draws: &[f64],
) -> Result<GeneratorForward> {
    let x = tape.constant(batch.pg.x.clone());
    let w = tape.constant_col(&batch.pg.weights);
    let p = generator::node_prob_var(tape, gen_cfg, gen_pvars, &batch.pg, x, w)?;
    let m_hat = generator::relaxed_mask_var(tape, p, gen_cfg.temperature, draws, gen_cfg.standard_concrete);
    let edge_mask = tape.edge_average(m_hat, batch.pg.edges.clone());
    let w_eff = tape.mul(w, edge_mask);
    let x_masked = tape.row_scale(x, m_hat);
    let logits = item_logits_var(tape, clf_cfg, clf_pvars, batch, x_masked, w_eff)?;
    let lse = tape.log_sum_exp_rows(logits);
    let scores = tape.scale(lse, -1.0);
    Ok(GeneratorForward { p, m_hat, logits, scores })
}

/// Mean info-constraint estimate: per-node terms summed per graph (or over
/// the labeled nodes in node mode), averaged over items.
fn info_mean_var(tape: &mut Tape, batch: &BatchData, p: Var) -> Var {
    let terms = generator::info_terms_var(tape, p);
    match &batch.item_rows {
        None => {
            let per_graph = tape.segment_sum(terms, batch.pg.membership.clone(), batch.pg.num_graphs);
            tape.mean_all(per_graph)
        }
        Some(rows) => {
            let selected = tape.take_rows(terms, rows.clone());
            tape.mean_all(selected)
        }
    }
}

/// Diversity term for generator `gen_index` (environment slot
/// `gen_index + 1`): pairwise distances where only this generator's scores
/// carry gradients; every other environment enters as a constant.
fn energy_diversity_var(
    tape: &mut Tape,
    ctx: &EnvContext,
    gen_env: usize,
    own_scores: Var,
    include_original: bool,
) -> Result<Var> {
    let m_total = ctx.scores.len();
    let envs: Vec<usize> = (0..m_total).filter(|&e| include_original || e != 0).collect();
    let m = envs.len();
    if m < 2 {
        return Err(LisaError::TooFewEnvironments { got: m });
    }
    let n_items = ctx.scores[0].len();
    let mut acc: Option<Var> = None;
    for (a_pos, &ea) in envs.iter().enumerate() {
        for &eb in envs.iter().skip(a_pos + 1) {
            let d = if ea == gen_env || eb == gen_env {
                let other = if ea == gen_env { eb } else { ea };
                let other_col = tape.constant(
                    Array2::from_shape_fn((n_items, 1), |(i, _)| ctx.scores[other][i]),
                );
                let diff = tape.sub(own_scores, other_col);
                let sq = tape.mul(diff, diff);
                let s = tape.sum_all(sq);
                tape.scale(s, 1.0 / (2.0 * n_items as f64))
            } else {
                let v = env_pair_distance(&ctx.scores[ea], &ctx.scores[eb])?;
                tape.constant_scalar(v)
            };
            acc = Some(match acc {
                Some(prev) => tape.add(prev, d),
                None => d,
            });
        }
    }
    let total = acc.expect("at least one pair");
    Ok(tape.scale(total, 2.0 / (m as f64 * (m as f64 - 1.0))))
}

/// Rex-style diversity: variance of per-environment classification losses,
/// with only this generator's loss on the tape.
fn rex_diversity_var(
    tape: &mut Tape,
    ctx: &EnvContext,
    gen_env: usize,
    own_ce: Var,
    include_original: bool,
) -> Result<Var> {
    let envs: Vec<usize> = (0..ctx.ce_means.len()).filter(|&e| include_original || e != 0).collect();
    if envs.len() < 2 {
        return Err(LisaError::TooFewEnvironments { got: envs.len() });
    }
    let parts: Vec<Var> = envs
        .iter()
        .map(|&e| {
            if e == gen_env {
                own_ce
            } else {
                tape.constant_scalar(ctx.ce_means[e])
            }
        })
        .collect();
    let stacked = tape.stack_scalars(parts);
    Ok(tape.variance(stacked))
}

/// Components of an inner objective evaluation.
pub struct InnerEval {
    pub loss: Var,
    pub l_cls: f64,
    pub l_info: f64,
    pub l_e: f64,
    pub total: f64,
}

/// Build generator `gen_index`'s inner objective on the tape:
/// `L_cls(f(g_i)) + alpha * L_info(g_i) -/+ beta * diversity`.
#[allow(clippy::too_many_arguments)]
pub fn inner_loss_var(
    tape: &mut Tape,
    clf_cfg: &BackboneConfig,
    clf_pvars: &[Var],
    gen_cfg: &GeneratorConfig,
    gen_pvars: &[Var],
    batch: &BatchData,
    draws: &[f64],
    ctx: &EnvContext,
    gen_index: usize,
    opts: &InnerOpts,
) -> Result<InnerEval> {
    let fwd = generator_forward(tape, clf_cfg, clf_pvars, gen_cfg, gen_pvars, batch, draws)?;
    let ce = tape.cross_entropy_rows(fwd.logits, batch.labels.clone());
    let l_cls = tape.mean_all(ce);

    let mut loss = l_cls;
    let mut l_info_value = 0.0;
    if opts.alpha != 0.0 {
        let l_info = info_mean_var(tape, batch, fwd.p);
        l_info_value = tape.scalar(l_info);
        let scaled = tape.scale(l_info, opts.alpha);
        loss = tape.add(loss, scaled);
    }
    let gen_env = gen_index + 1;
    let mut l_e_value = 0.0;
    if opts.beta != 0.0 && opts.mode != DiversityMode::None {
        let div = match opts.mode {
            DiversityMode::Energy => {
                energy_diversity_var(tape, ctx, gen_env, fwd.scores, opts.include_original)?
            }
            DiversityMode::Rex => rex_diversity_var(tape, ctx, gen_env, l_cls, opts.include_original)?,
            DiversityMode::None => unreachable!(),
        };
        l_e_value = tape.scalar(div);
        let signed = tape.scale(div, if opts.literal_sign { opts.beta } else { -opts.beta });
        loss = tape.add(loss, signed);
    }
    Ok(InnerEval {
        loss,
        l_cls: tape.scalar(l_cls),
        l_info: l_info_value,
        l_e: l_e_value,
        total: tape.scalar(loss),
    })
}

/// One environment's classifier input with gradients detached from the
/// generators: scaled features and reweighted edges as plain arrays.
#[derive(Debug, Clone)]
pub struct DetachedView {
    pub x: Array2<f64>,
    pub weights: ndarray::Array1<f64>,
}

impl DetachedView {
    /// Apply a node mask to a prepared batch without a tape.
    pub fn from_mask(pg: &PreparedGraph, node_mask: &ndarray::Array1<f64>) -> Self {
        let mut x = pg.x.clone();
        for (i, mut row) in x.rows_mut().into_iter().enumerate() {
            row.mapv_inplace(|v| v * node_mask[i]);
        }
        let weights = ndarray::Array1::from_shape_fn(pg.edges.len(), |e| {
            let (u, v) = pg.edges[e];
            pg.weights[e] * 0.5 * (node_mask[u] + node_mask[v])
        });
        Self { x, weights }
    }
}

/// Components of an outer objective evaluation.
pub struct OuterEval {
    pub loss: Var,
    pub per_env_ce: Vec<f64>,
    pub l_var: f64,
    pub total: f64,
}

/// Build the outer objective on the tape: variance-penalized mean of
/// per-environment cross-entropies of the classifier over the original
/// environment plus one detached view per generator.
pub fn outer_loss_var(
    tape: &mut Tape,
    clf_cfg: &BackboneConfig,
    clf_pvars: &[Var],
    batch: &BatchData,
    views: &[DetachedView],
    lambda_var: f64,
) -> Result<OuterEval> {
    let mut env_ce: Vec<Var> = Vec::with_capacity(views.len() + 1);
    let raw = raw_logits_var(tape, clf_cfg, clf_pvars, batch)?;
    let ce0 = tape.cross_entropy_rows(raw, batch.labels.clone());
    env_ce.push(tape.mean_all(ce0));
    for view in views {
        let x = tape.constant(view.x.clone());
        let w = tape.constant_col(&view.weights);
        let logits = item_logits_var(tape, clf_cfg, clf_pvars, batch, x, w)?;
        let ce = tape.cross_entropy_rows(logits, batch.labels.clone());
        env_ce.push(tape.mean_all(ce));
    }
    let per_env_ce: Vec<f64> = env_ce.iter().map(|&v| tape.scalar(v)).collect();
    let stacked = tape.stack_scalars(env_ce);
    let mean = tape.mean_all(stacked);
    let loss = if lambda_var != 0.0 {
        let var = tape.variance(stacked);
        let pen = tape.scale(var, lambda_var);
        tape.add(mean, pen)
    } else {
        mean
    };
    let l_var = {
        let n = per_env_ce.len() as f64;
        let m = per_env_ce.iter().sum::<f64>() / n;
        per_env_ce.iter().map(|&l| (l - m) * (l - m)).sum::<f64>() / n
    };
    Ok(OuterEval { loss, per_env_ce, l_var, total: tape.scalar(loss) })
}

/// Scalar inner objective (no gradients), sharing the tape builder.
#[allow(clippy::too_many_arguments)]
pub fn inner_loss(
    clf_cfg: &BackboneConfig,
    clf_params: &ParameterSet,
    gen_cfg: &GeneratorConfig,
    gen_params: &ParameterSet,
    batch: &BatchData,
    draws: &[f64],
    ctx: &EnvContext,
    gen_index: usize,
    opts: &InnerOpts,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let clf_pvars = clf_params.push_on(&mut tape, false);
    let gen_pvars = gen_params.push_on(&mut tape, false);
    let eval = inner_loss_var(
        &mut tape, clf_cfg, &clf_pvars, gen_cfg, &gen_pvars, batch, draws, ctx, gen_index, opts,
    )?;
    Ok(LossBreakdown {
        l_cls_mean: eval.l_cls,
        l_info: eval.l_info,
        l_e: eval.l_e,
        total_inner: eval.total,
        ..Default::default()
    })
}

/// Scalar outer objective (no gradients), sharing the tape builder.
pub fn outer_loss(
    clf_cfg: &BackboneConfig,
    clf_params: &ParameterSet,
    batch: &BatchData,
    views: &[DetachedView],
    lambda_var: f64,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let clf_pvars = clf_params.push_on(&mut tape, false);
    let eval = outer_loss_var(&mut tape, clf_cfg, &clf_pvars, batch, views, lambda_var)?;
    Ok(LossBreakdown {
        l_cls_mean: eval.per_env_ce.iter().sum::<f64>() / eval.per_env_ce.len() as f64,
        l_cls_per_env: eval.per_env_ce,
        l_var: eval.l_var,
        total_outer: eval.total,
        ..Default::default()
    })
}

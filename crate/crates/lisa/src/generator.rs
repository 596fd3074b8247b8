//! Variational subgraph generator: per-node keep probabilities, concrete
//! relaxation of Bernoulli node sampling, soft mask assembly, and the
//! information constraint.
//!
//! The relaxation is `m = sigmoid(logit(p) / t + logit(u))` with the
//! temperature dividing only the learned logit. The conventional form that
//! divides the noise term as well is available behind
//! `standard_concrete = true`.

use ndarray::{Array1, Array2};
use rand::Rng;
use std::sync::Arc;

use crate::autodiff::{sigmoid, Tape, Var};
use crate::backbones::{self, BackboneConfig, ParameterSet, PreparedGraph};
use crate::error::{LisaError, Result};
use crate::graph::{Graph, MaskedView};

/// Probabilities are clamped this far from {0, 1} before any logarithm.
pub const PROB_CLAMP: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GeneratorConfig {
    pub temperature: f64,
    /// Embedding-mode backbone; `out_dim` must be 1 for the probability head.
    pub backbone: BackboneConfig,
    pub generator_id: usize,
    /// Use the conventional relaxation that divides noise by `t` as well.
    pub standard_concrete: bool,
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(LisaError::ConfigError(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.generator_id < 1 {
            return Err(LisaError::ConfigError("generator_id must be >= 1".into()));
        }
        if self.backbone.out_dim != 1 {
            return Err(LisaError::ConfigError("generator backbone out_dim must be 1".into()));
        }
        self.backbone.validate()
    }
}

/// How uniform noise is drawn when sampling a view.
pub enum SampleMode<'a> {
    /// Fresh independent uniforms from the generator's stream.
    Stochastic(&'a mut dyn rand::RngCore),
    /// `u = 0.5` for every node (evaluation mode).
    Deterministic,
    /// Re-use previously recorded draws.
    Replay(&'a [f64]),
}

/// Output of one sampling pass; immutable once built.
#[derive(Debug, Clone)]
pub struct SamplingResult {
    /// Node keep probabilities, strictly inside (0, 1).
    pub p: Array1<f64>,
    /// Relaxed node masks.
    pub m_hat: Array1<f64>,
    pub view: MaskedView,
    /// Uniform draws used for `m_hat`, recorded for replay.
    pub draws: Vec<f64>,
}

/// Per-node keep probability `p_v = sigmoid(head(h_v))`.
pub fn node_probabilities(cfg: &GeneratorConfig, params: &ParameterSet, g: &Graph) -> Result<Array1<f64>> {
    cfg.validate()?;
    let logits = backbones::node_logits(&cfg.backbone, params, g)?;
    let p = logits.column(0).mapv(sigmoid);
    if !p.iter().all(|x| x.is_finite()) {
        return Err(LisaError::NonFiniteActivation { context: "node_probabilities" });
    }
    Ok(p.to_owned())
}

fn check_unit_open(what: &'static str, v: f64) -> Result<()> {
    if !(v > 0.0 && v < 1.0) {
        return Err(LisaError::DomainError { what, value: v, domain: "(0, 1)" });
    }
    Ok(())
}

/// Concrete relaxation of a Bernoulli draw.
pub fn relax_mask(p: f64, t: f64, u: f64) -> Result<f64> {
    check_unit_open("p", p)?;
    check_unit_open("u", u)?;
    if t <= 0.0 {
        return Err(LisaError::DomainError { what: "t", value: t, domain: "(0, inf)" });
    }
    let pc = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    Ok(sigmoid((pc / (1.0 - pc)).ln() / t + (u / (1.0 - u)).ln()))
}

/// Conventional binary-concrete relaxation (temperature divides both terms).
pub fn relax_mask_standard(p: f64, t: f64, u: f64) -> Result<f64> {
    check_unit_open("p", p)?;
    check_unit_open("u", u)?;
    if t <= 0.0 {
        return Err(LisaError::DomainError { what: "t", value: t, domain: "(0, inf)" });
    }
    let pc = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    Ok(sigmoid(((pc / (1.0 - pc)).ln() + (u / (1.0 - u)).ln()) / t))
}

fn draw_unit_open(rng: &mut dyn rand::RngCore) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 && u < 1.0 {
            return u;
        }
    }
}

/// Sample a full view: probabilities, per-node relaxed masks with independent
/// uniforms, and the mask-averaged edge masks packaged as a [`MaskedView`].
pub fn generate_view(
    cfg: &GeneratorConfig,
    params: &ParameterSet,
    g: &Arc<Graph>,
    mode: SampleMode<'_>,
) -> Result<SamplingResult> {
    let p = node_probabilities(cfg, params, g)?;
    let draws: Vec<f64> = match mode {
        SampleMode::Stochastic(rng) => (0..g.num_nodes()).map(|_| draw_unit_open(rng)).collect(),
        SampleMode::Deterministic => vec![0.5; g.num_nodes()],
        SampleMode::Replay(recorded) => {
            if recorded.len() != g.num_nodes() {
                return Err(LisaError::LengthMismatch {
                    what: "replayed draws vs nodes",
                    left: recorded.len(),
                    right: g.num_nodes(),
                });
            }
            recorded.to_vec()
        }
    };
    let relax = if cfg.standard_concrete { relax_mask_standard } else { relax_mask };
    let m_hat = Array1::from_shape_fn(g.num_nodes(), |i| {
        relax(p[i], cfg.temperature, draws[i]).expect("p and u strictly inside (0,1)")
    });
    let view = MaskedView::from_node_mask(g.clone(), m_hat.clone(), cfg.generator_id)?;
    Ok(SamplingResult { p, m_hat, view, draws })
}

/// Closed-form KL of `prod Bernoulli(p_v)` from the non-informative
/// `prod Bernoulli(0.5)` prior, in nats:
/// `sum_v p ln(2p) + (1 - p) ln(2(1 - p))`.
pub fn info_loss(p: &Array1<f64>) -> Result<f64> {
    let mut total = 0.0;
    for &pv in p.iter() {
        if !(0.0..=1.0).contains(&pv) {
            return Err(LisaError::DomainError { what: "p", value: pv, domain: "[0, 1]" });
        }
        let pc = pv.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        total += pc * (2.0 * pc).ln() + (1.0 - pc) * (2.0 * (1.0 - pc)).ln();
    }
    Ok(total)
}

// --- Tape builders used by the training loop ---------------------------------

/// `n x 1` keep probabilities on the tape, clamped away from the boundary.
pub fn node_prob_var(
    tape: &mut Tape,
    cfg: &GeneratorConfig,
    params: &[Var],
    pg: &PreparedGraph,
    x: Var,
    w: Var,
) -> Result<Var> {
    let logits = backbones::node_logits_var(tape, &cfg.backbone, params, pg, x, w)?;
    let p = tape.sigmoid(logits);
    Ok(tape.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP))
}

/// Relaxed masks from probabilities and fixed uniform draws.
pub fn relaxed_mask_var(tape: &mut Tape, p: Var, t: f64, draws: &[f64], standard: bool) -> Var {
    let n = draws.len();
    let noise = Array2::from_shape_fn((n, 1), |(i, _)| {
        let u = draws[i];
        (u / (1.0 - u)).ln()
    });
    let ones = tape.constant(Array2::from_elem((n, 1), 1.0));
    let q = tape.sub(ones, p);
    let lp = tape.ln(p);
    let lq = tape.ln(q);
    let logit = tape.sub(lp, lq);
    let noise = tape.constant(noise);
    let z = if standard {
        let s = tape.add(logit, noise);
        tape.scale(s, 1.0 / t)
    } else {
        let s = tape.scale(logit, 1.0 / t);
        tape.add(s, noise)
    };
    tape.sigmoid(z)
}

/// Per-node information-constraint terms (`n x 1`); sum per graph and average
/// over the minibatch to estimate the bound.
pub fn info_terms_var(tape: &mut Tape, p: Var) -> Var {
    let n = tape.value(p).nrows();
    let ones = tape.constant(Array2::from_elem((n, 1), 1.0));
    let q = tape.sub(ones, p);
    let lp = tape.ln(p);
    let lq = tape.ln(q);
    let lp2 = tape.add_scalar(lp, std::f64::consts::LN_2);
    let lq2 = tape.add_scalar(lq, std::f64::consts::LN_2);
    let a = tape.mul(p, lp2);
    let b = tape.mul(q, lq2);
    tape.add(a, b)
}

//! Executable structural-equation oracle for augmentation label shift.
//!
//! The model is over abstract label bits: an invariant bit `z ~ Bernoulli(0.5)`,
//! an augmentation flip event `b ~ Bernoulli(p_aug)`, and label noise
//! `n ~ Bernoulli(q)` with `q < 0.5`. The observed augmented label composes
//! them in one of two ways:
//!
//! * `binary-xor`: `y = z ^ b ^ n` — flip events cancel pairwise.
//! * `non-cancelling`: `y != z` iff `b || n` — flips never undo each other,
//!   modeling generic multi-class label damage.
//!
//! The invariant predictor outputs `z`; the perturbed predictor is a function
//! of the augmented structure alone and outputs `b`, independent of `z`. Both
//! risks have closed forms, a Monte-Carlo estimator, and a solved crossover
//! in `p_aug` that is compared against the reference expression
//! `(0.5 - q) / (1 - q)`. The non-cancelling reading reproduces that
//! expression exactly; literal xor solves to `(0.5 - q) / (1 - 2q)` instead,
//! and both values are reported rather than papered over.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LisaError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Composition {
    BinaryXor,
    NonCancelling,
}

impl std::fmt::Display for Composition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Composition::BinaryXor => write!(f, "binary-xor"),
            Composition::NonCancelling => write!(f, "non-cancelling"),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SemConfig {
    /// Label-noise flip probability, in `[0, 0.5)`.
    pub q: f64,
    /// Augmentation flip probability, in `[0, 1]`.
    pub p_aug: f64,
    pub composition: Composition,
    pub num_samples: usize,
}

impl SemConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.q) {
            return Err(LisaError::DomainError { what: "q", value: self.q, domain: "[0, 0.5)" });
        }
        if !(0.0..=1.0).contains(&self.p_aug) {
            return Err(LisaError::DomainError { what: "p_aug", value: self.p_aug, domain: "[0, 1]" });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RiskMethod {
    ClosedForm,
    MonteCarlo,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SemRisks {
    /// Risk of the invariant predictor (outputs `z`).
    pub r_inv: f64,
    /// Risk of the perturbed predictor (outputs `b`).
    pub r_aug: f64,
    pub method: RiskMethod,
    /// Larger of the two binomial standard errors, Monte Carlo only.
    pub stderr: Option<f64>,
}

/// One draw of the structural model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SemInstance {
    pub z_inv: bool,
    pub flip: bool,
    pub noise: bool,
    pub label: bool,
}

pub fn sample_instance(cfg: &SemConfig, rng: &mut impl Rng) -> SemInstance {
    let z_inv = rng.random_bool(0.5);
    let flip = rng.random_bool(cfg.p_aug);
    let noise = rng.random_bool(cfg.q);
    let label = match cfg.composition {
        Composition::BinaryXor => z_inv ^ flip ^ noise,
        Composition::NonCancelling => z_inv ^ (flip || noise),
    };
    SemInstance { z_inv, flip, noise, label }
}

/// Exact risks of both predictors.
pub fn closed_form_risks(cfg: &SemConfig) -> Result<SemRisks> {
    cfg.validate()?;
    let (p, q) = (cfg.p_aug, cfg.q);
    let r_inv = match cfg.composition {
        // P(b ^ n)
        Composition::BinaryXor => p * (1.0 - q) + (1.0 - p) * q,
        // P(b || n)
        Composition::NonCancelling => p + q - p * q,
    };
    // z ~ Bernoulli(0.5) is independent of the perturbed prediction, so its
    // error rate is exactly one half in both modes.
    Ok(SemRisks { r_inv, r_aug: 0.5, method: RiskMethod::ClosedForm, stderr: None })
}

fn mc_counts(cfg: &SemConfig, rng: &mut impl Rng, n: usize) -> (u64, u64) {
    let mut inv_err = 0u64;
    let mut aug_err = 0u64;
    for _ in 0..n {
        let s = sample_instance(cfg, rng);
        if s.label != s.z_inv {
            inv_err += 1;
        }
        if s.label != s.flip {
            aug_err += 1;
        }
    }
    (inv_err, aug_err)
}

const MC_SHARD: usize = 1 << 18;

/// Empirical risks over `cfg.num_samples` draws. Sampling is sharded with
/// per-shard sub-seeded streams, so the result depends only on the seed and
/// not on how many workers execute the shards.
pub fn monte_carlo_risks(cfg: &SemConfig, seed: u64, workers: usize) -> Result<SemRisks> {
    cfg.validate()?;
    let n = cfg.num_samples.max(1);
    let shards: Vec<(u64, usize)> = {
        let mut v = Vec::new();
        let mut remaining = n;
        let mut idx = 0u64;
        while remaining > 0 {
            let take = remaining.min(MC_SHARD);
            v.push((idx, take));
            remaining -= take;
            idx += 1;
        }
        v
    };
    let run_shard = |&(idx, take): &(u64, usize)| -> (u64, u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(idx + 1);
        mc_counts(cfg, &mut rng, take)
    };
    let (inv_err, aug_err): (u64, u64) = if workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| LisaError::ConfigError(format!("worker pool: {e}")))?;
        pool.install(|| {
            shards
                .par_iter()
                .map(run_shard)
                .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1))
        })
    } else {
        shards.iter().map(run_shard).fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1))
    };
    let nf = n as f64;
    let r_inv = inv_err as f64 / nf;
    let r_aug = aug_err as f64 / nf;
    let se = |r: f64| (r * (1.0 - r) / nf).sqrt();
    Ok(SemRisks {
        r_inv,
        r_aug,
        method: RiskMethod::MonteCarlo,
        stderr: Some(se(r_inv).max(se(r_aug))),
    })
}

/// Reference crossover expression `(0.5 - q) / (1 - q)`.
pub fn reference_threshold(q: f64) -> f64 {
    (0.5 - q) / (1.0 - q)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Crossover {
    /// Root of `r_inv(p) = r_aug` solved numerically from the closed forms.
    pub solved: f64,
    /// The reference expression, for comparison.
    pub reference: f64,
    /// Whether the two agree to within `1e-12`.
    pub matches_reference: bool,
}

/// Solve `r_inv(p_aug) = r_aug` by bisection on the closed forms.
pub fn crossover_threshold(q: f64, composition: Composition) -> Result<Crossover> {
    if !(0.0..0.5).contains(&q) {
        return Err(LisaError::DomainError { what: "q", value: q, domain: "[0, 0.5)" });
    }
    let risk_gap = |p: f64| -> f64 {
        let cfg = SemConfig { q, p_aug: p, composition, num_samples: 0 };
        let risks = closed_form_risks(&cfg).expect("validated");
        risks.r_inv - risks.r_aug
    };
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    debug_assert!(risk_gap(lo) < 0.0 && risk_gap(hi) >= 0.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if risk_gap(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let solved = 0.5 * (lo + hi);
    let reference = reference_threshold(q);
    Ok(Crossover { solved, reference, matches_reference: (solved - reference).abs() < 1e-12 })
}

/// Closed-form crossover of the literal xor composition, `(0.5 - q)/(1 - 2q)`.
pub fn xor_threshold(q: f64) -> f64 {
    (0.5 - q) / (1.0 - 2.0 * q)
}

/// Find where the Monte-Carlo risk estimates cross on a `p_aug` grid, by
/// linear interpolation around the sign change of `r_inv - r_aug`.
pub fn monte_carlo_crossover(
    q: f64,
    composition: Composition,
    samples_per_point: usize,
    grid_points: usize,
    seed: u64,
    workers: usize,
) -> Result<f64> {
    if grid_points < 2 {
        return Err(LisaError::ConfigError("grid needs at least 2 points".into()));
    }
    let mut prev_p = 0.0;
    let mut prev_gap = f64::NAN;
    for i in 0..grid_points {
        let p = i as f64 / (grid_points - 1) as f64;
        let cfg = SemConfig { q, p_aug: p, composition, num_samples: samples_per_point };
        let risks = monte_carlo_risks(&cfg, seed.wrapping_add(i as u64), workers)?;
        let gap = risks.r_inv - risks.r_aug;
        if i > 0 && prev_gap < 0.0 && gap >= 0.0 {
            let t = -prev_gap / (gap - prev_gap);
            return Ok(prev_p + t * (p - prev_p));
        }
        prev_p = p;
        prev_gap = gap;
    }
    Err(LisaError::DataError(format!("no crossover found for q={q} ({composition})")))
}

/// One row of the sweep output.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub q: f64,
    pub p_aug: f64,
    pub mode: Composition,
    pub r_inv: f64,
    pub r_aug: f64,
    pub r_inv_mc: f64,
    pub r_aug_mc: f64,
    pub stderr: f64,
    pub threshold_paper: f64,
    pub threshold_solved: f64,
}

/// Closed-form plus Monte-Carlo risks over a `(q, p_aug)` grid.
pub fn sweep(
    q_grid: &[f64],
    p_grid: &[f64],
    modes: &[Composition],
    samples: usize,
    seed: u64,
    workers: usize,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    let mut point = 0u64;
    for &mode in modes {
        for &q in q_grid {
            let solved = crossover_threshold(q, mode)?.solved;
            for &p in p_grid {
                let cfg = SemConfig { q, p_aug: p, composition: mode, num_samples: samples };
                let cf = closed_form_risks(&cfg)?;
                let mc = monte_carlo_risks(&cfg, seed.wrapping_add(point), workers)?;
                point += 1;
                rows.push(SweepRow {
                    q,
                    p_aug: p,
                    mode,
                    r_inv: cf.r_inv,
                    r_aug: cf.r_aug,
                    r_inv_mc: mc.r_inv,
                    r_aug_mc: mc.r_aug,
                    stderr: mc.stderr.unwrap_or(0.0),
                    threshold_paper: reference_threshold(q),
                    threshold_solved: solved,
                });
            }
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: std::io::Write>(out: &mut W, rows: &[SweepRow]) -> Result<()> {
    writeln!(
        out,
        "q,p_aug,mode,r_inv,r_aug,r_inv_mc,r_aug_mc,stderr,threshold_paper,threshold_solved"
    )?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.q,
            r.p_aug,
            r.mode,
            r.r_inv,
            r.r_aug,
            r.r_inv_mc,
            r.r_aug_mc,
            r.stderr,
            r.threshold_paper,
            r.threshold_solved
        )?;
    }
    Ok(())
}

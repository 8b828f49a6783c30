//! EM fitting of two-state latent class models: one binary latent parent,
//! conditionally independent binary children.
//!
//! Records are grouped by their observed pattern over the selected columns,
//! so each EM iteration costs O(distinct patterns x children) rather than
//! O(records x children).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::LtmError;
use crate::ingest::InteractionMatrix;

const PROB_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct LcmConfig {
    pub restarts: usize,
    pub max_iters: usize,
    /// Convergence threshold on per-record log-likelihood gain, in nats.
    pub tol: f64,
}

impl Default for LcmConfig {
    fn default() -> Self {
        LcmConfig {
            restarts: 5,
            max_iters: 200,
            tol: 1e-4,
        }
    }
}

/// A fitted latent class model. States are labeled so that s1 is the state
/// with the higher mean child-emission probability.
#[derive(Debug, Clone)]
pub struct LcmFit {
    /// [P(Z=s0), P(Z=s1)].
    pub prior: [f64; 2],
    /// Per child, rows indexed by the latent state: emissions[j][z][x].
    pub emissions: Vec<[[f64; 2]; 2]>,
    /// Final log-likelihood of the best restart.
    pub log_likelihood: f64,
    /// Log-likelihood after each E-step of the best restart.
    pub ll_trace: Vec<f64>,
}

impl LcmFit {
    /// P(Z = s1 | pattern) for one record's observed pattern.
    pub fn posterior1(&self, pattern: u64) -> f64 {
        let (l0, l1) = pattern_loglik(&self.prior, &self.emissions, pattern);
        let m = l0.max(l1);
        let z = (l0 - m).exp() + (l1 - m).exp();
        (l1 - m).exp() / z
    }
}

struct Params {
    prior: [f64; 2],
    emissions: Vec<[[f64; 2]; 2]>,
}

fn pattern_loglik(prior: &[f64; 2], emissions: &[[[f64; 2]; 2]], pattern: u64) -> (f64, f64) {
    let mut l0 = prior[0].ln();
    let mut l1 = prior[1].ln();
    for (j, e) in emissions.iter().enumerate() {
        let x = ((pattern >> j) & 1) as usize;
        l0 += e[0][x].ln();
        l1 += e[1][x].ln();
    }
    (l0, l1)
}

fn clamp01(p: f64) -> f64 {
    p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

/// One E-step: log-likelihood at the current parameters plus the expected
/// sufficient statistics for the following M-step.
fn e_step(params: &Params, patterns: &[(u64, f64)], n_children: usize) -> (f64, Stats) {
    let mut ll = 0.0;
    let mut stats = Stats::zero(n_children);
    for &(pattern, count) in patterns {
        let (l0, l1) = pattern_loglik(&params.prior, &params.emissions, pattern);
        let m = l0.max(l1);
        let z = (l0 - m).exp() + (l1 - m).exp();
        ll += count * (m + z.ln());
        let r1 = (l1 - m).exp() / z;
        stats.weight[0] += count * (1.0 - r1);
        stats.weight[1] += count * r1;
        for j in 0..n_children {
            if (pattern >> j) & 1 == 1 {
                stats.ones[j][0] += count * (1.0 - r1);
                stats.ones[j][1] += count * r1;
            }
        }
    }
    (ll, stats)
}

struct Stats {
    weight: [f64; 2],
    ones: Vec<[f64; 2]>,
}

impl Stats {
    fn zero(n_children: usize) -> Stats {
        Stats {
            weight: [0.0; 2],
            ones: vec![[0.0; 2]; n_children],
        }
    }
}

fn m_step(stats: &Stats, n_records: f64) -> Params {
    let prior1 = clamp01(stats.weight[1] / n_records);
    let emissions = stats
        .ones
        .iter()
        .map(|ones| {
            let mut e = [[0.0; 2]; 2];
            for z in 0..2 {
                let p1 = if stats.weight[z] > 0.0 {
                    clamp01(ones[z] / stats.weight[z])
                } else {
                    0.5
                };
                e[z] = [1.0 - p1, p1];
            }
            e
        })
        .collect();
    Params {
        prior: [1.0 - prior1, prior1],
        emissions,
    }
}

/// Fit a two-state LCM over the given columns of `data` by EM with random
/// restarts. Deterministic for a given seed.
pub fn fit_lcm(
    data: &InteractionMatrix,
    cols: &[u32],
    cfg: &LcmConfig,
    seed: u64,
) -> Result<LcmFit, LtmError> {
    if cols.len() < 2 {
        return Err(LtmError::BadConfig(format!(
            "latent class model needs at least 2 children, got {}",
            cols.len()
        )));
    }
    if cols.len() > 63 {
        return Err(LtmError::BadConfig(format!(
            "cluster of {} children exceeds the supported 63",
            cols.len()
        )));
    }
    if data.rows() == 0 {
        return Err(LtmError::BadConfig("no records to fit".into()));
    }
    if cfg.restarts == 0 || cfg.max_iters == 0 || !(cfg.tol > 0.0) {
        return Err(LtmError::BadConfig(
            "restarts and max_iters must be >= 1 and tol > 0".into(),
        ));
    }

    let patterns = collect_patterns(data, cols);
    let n_records = data.rows() as f64;
    let n_children = cols.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut best: Option<LcmFit> = None;
    for _ in 0..cfg.restarts {
        let mut params = Params {
            prior: {
                let p1 = rng.gen_range(0.3..0.7);
                [1.0 - p1, p1]
            },
            emissions: (0..n_children)
                .map(|_| {
                    let mut e = [[0.0; 2]; 2];
                    for row in &mut e {
                        let p1 = rng.gen_range(0.25..0.75);
                        *row = [1.0 - p1, p1];
                    }
                    e
                })
                .collect(),
        };

        let mut trace = Vec::new();
        loop {
            let (ll, stats) = e_step(&params, &patterns, n_children);
            trace.push(ll);
            let t = trace.len();
            if t >= 2 && trace[t - 1] - trace[t - 2] < cfg.tol * n_records {
                break;
            }
            if t > cfg.max_iters {
                break;
            }
            params = m_step(&stats, n_records);
        }

        let ll = *trace.last().unwrap();
        if best.as_ref().map_or(true, |b| ll > b.log_likelihood) {
            best = Some(LcmFit {
                prior: params.prior,
                emissions: params.emissions,
                log_likelihood: ll,
                ll_trace: trace,
            });
        }
    }

    let mut fit = best.unwrap();
    relabel(&mut fit);
    Ok(fit)
}

/// Swap states if s0 has the higher mean emission probability, so s1 always
/// denotes the high-consumption ("has the taste") state.
fn relabel(fit: &mut LcmFit) {
    let mean = |z: usize| {
        fit.emissions.iter().map(|e| e[z][1]).sum::<f64>() / fit.emissions.len() as f64
    };
    if mean(0) > mean(1) {
        fit.prior.swap(0, 1);
        for e in &mut fit.emissions {
            e.swap(0, 1);
        }
    }
}

/// Distinct observed patterns with multiplicities, in ascending mask order so
/// accumulation is deterministic.
fn collect_patterns(data: &InteractionMatrix, cols: &[u32]) -> Vec<(u64, f64)> {
    let mut pos = std::collections::HashMap::with_capacity(cols.len());
    for (j, &c) in cols.iter().enumerate() {
        pos.insert(c, j);
    }
    let mut counts: std::collections::HashMap<u64, u64> = std::collections::HashMap::new();
    for r in 0..data.rows() {
        let mut mask = 0u64;
        for c in data.row(r) {
            if let Some(&j) = pos.get(c) {
                mask |= 1 << j;
            }
        }
        *counts.entry(mask).or_default() += 1;
    }
    let mut patterns: Vec<(u64, f64)> = counts
        .into_iter()
        .map(|(mask, count)| (mask, count as f64))
        .collect();
    patterns.sort_unstable_by_key(|&(mask, _)| mask);
    patterns
}

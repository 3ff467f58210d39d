//! Bayesian optimization of the relaxed objective `size + lambda * risk`.
//!
//! Every evaluation of `theta -> (size, risk)` lands in an [`EvalCache`].
//! Because the relaxed objective is linear in `lambda`, a cache filled under
//! one multiplier seeds the surrogate for any other multiplier by re-weighting
//! the stored pairs, without touching the model again.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AcllError, Result};
use crate::surrogate::{fit_gp, log_expected_improvement, GpHyper, GpModel};

/// Decimal digits kept per component of a canonical theta key.
pub const KEY_DIGITS: i32 = 12;
/// Resolution of the one-dimensional acquisition grid (1001 points).
pub const GRID_STEPS: usize = 1000;
const MULTISTART_POINTS: usize = 256;
const REFINE_STARTS: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ThetaKey(Vec<i64>);

impl ThetaKey {
    pub fn of(theta: &[f64]) -> Self {
        let scale = 10f64.powi(KEY_DIGITS);
        ThetaKey(theta.iter().map(|t| (t * scale).round() as i64).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub size: f64,
    pub risk: f64,
}

/// One audit record; the JSON-lines dump writes exactly these fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheEntry {
    pub theta: Vec<f64>,
    pub size: f64,
    pub risk: f64,
}

impl CacheEntry {
    pub fn objective(&self, lambda: f64) -> f64 {
        self.size + lambda * self.risk
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct RoundKey {
    lambda_bits: u64,
    dim: usize,
    n_init: usize,
    n_iter: usize,
    seed: u64,
    ei_tolerance_bits: u64,
}

/// Append-only store of evaluated `(theta, size, risk)` triples, in
/// evaluation order, with at most one entry per canonical theta.
///
/// Mutation goes through `&mut self`, so an insert can never interleave with
/// a read; share it across threads behind a lock.
#[derive(Debug, Clone, Default)]
pub struct EvalCache {
    entries: Vec<CacheEntry>,
    index: HashMap<ThetaKey, usize>,
    completed: HashSet<RoundKey>,
}

impl EvalCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[CacheEntry] {
        &self.entries
    }

    pub fn get(&self, theta: &[f64]) -> Option<&CacheEntry> {
        self.index.get(&ThetaKey::of(theta)).map(|&i| &self.entries[i])
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        self.index.contains_key(&ThetaKey::of(theta))
    }

    /// Evaluation count for `theta`'s entry (1-based position in evaluation order).
    pub fn eval_cost(&self, theta: &[f64]) -> Option<usize> {
        self.index.get(&ThetaKey::of(theta)).map(|&i| i + 1)
    }

    /// Records an evaluation. Returns `false` (and stores nothing) when the
    /// canonical key is already present.
    pub fn insert(&mut self, theta: Vec<f64>, eval: Evaluation) -> bool {
        let key = ThetaKey::of(&theta);
        if self.index.contains_key(&key) {
            return false;
        }
        self.index.insert(key, self.entries.len());
        self.entries.push(CacheEntry { theta, size: eval.size, risk: eval.risk });
        true
    }

    /// Entry minimizing `size + lambda * risk`; the earliest wins ties.
    pub fn best_for(&self, lambda: f64) -> Option<&CacheEntry> {
        let mut best: Option<&CacheEntry> = None;
        for e in &self.entries {
            if best.is_none_or(|b| e.objective(lambda) < b.objective(lambda)) {
                best = Some(e);
            }
        }
        best
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for e in &self.entries {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self> {
        let mut cache = EvalCache::new();
        for (n, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e: CacheEntry = serde_json::from_str(&line)
                .map_err(|err| AcllError::Format(format!("line {}: {err}", n + 1)))?;
            if !cache.insert(e.theta, Evaluation { size: e.size, risk: e.risk }) {
                return Err(AcllError::Format(format!("line {}: duplicate theta", n + 1)));
            }
        }
        Ok(cache)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoBudget {
    pub n_init: usize,
    pub n_iter: usize,
    pub seed: u64,
    /// A round stops early once the best uncached expected improvement
    /// falls to this value or below.
    #[serde(default = "default_ei_tolerance")]
    pub ei_tolerance: f64,
}

fn default_ei_tolerance() -> f64 {
    BoBudget::default().ei_tolerance
}

impl Default for BoBudget {
    fn default() -> Self {
        BoBudget { n_init: 5, n_iter: 10, seed: 0, ei_tolerance: 0.0 }
    }
}

impl BoBudget {
    pub fn validate(&self) -> Result<()> {
        if self.n_init < 2 {
            return Err(AcllError::InvalidSpec(format!("n_init must be at least 2, got {}", self.n_init)));
        }
        if self.n_iter < 1 {
            return Err(AcllError::InvalidSpec("n_iter must be at least 1".into()));
        }
        if !(self.ei_tolerance.is_finite() && self.ei_tolerance >= 0.0) {
            return Err(AcllError::InvalidSpec(format!(
                "ei_tolerance must be non-negative, got {}",
                self.ei_tolerance
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoOutcome {
    pub theta: Vec<f64>,
    pub objective: f64,
    pub size: f64,
    pub risk: f64,
    pub new_evaluations: usize,
}

pub fn lagrangian_objective(size: f64, risk: f64, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    Ok(size + lambda * risk)
}

pub(crate) fn check_lambda(lambda: f64) -> Result<()> {
    if lambda.is_finite() && lambda >= 0.0 {
        Ok(())
    } else {
        Err(AcllError::InvalidMultiplier(lambda))
    }
}

/// Every cached theta with its re-weighted objective `size + lambda * risk`.
pub fn seed_from_cache(cache: &EvalCache, lambda: f64) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    check_lambda(lambda)?;
    Ok(cache.entries().iter().map(|e| (e.theta.clone(), e.objective(lambda))).unzip())
}

/// Minimizes `size + lambda * risk` over `[0, 1]^dim`.
///
/// The initial design tops the cache up to `n_init` entries (anchors `0` and
/// `1` first), then up to `n_iter` acquisition rounds follow. The result is
/// the best entry of the whole cache under `lambda`, including entries that
/// were evaluated for other multipliers. Repeating a completed round (same
/// multiplier, dimension, budget) performs no evaluations.
pub fn bo_minimize<F>(
    evaluate: &mut F,
    lambda: f64,
    cache: &mut EvalCache,
    budget: &BoBudget,
    dim: usize,
) -> Result<BoOutcome>
where
    F: FnMut(&[f64]) -> Result<Evaluation>,
{
    check_lambda(lambda)?;
    budget.validate()?;
    if dim == 0 {
        return Err(AcllError::InvalidSpec("search space needs at least one dimension".into()));
    }
    if let Some(bad) = cache.entries().iter().find(|e| e.theta.len() != dim) {
        return Err(AcllError::Shape(format!(
            "cached theta {:?} does not match dimension {dim}",
            bad.theta
        )));
    }

    let round = RoundKey {
        lambda_bits: lambda.to_bits(),
        dim,
        n_init: budget.n_init,
        n_iter: budget.n_iter,
        seed: budget.seed,
        ei_tolerance_bits: budget.ei_tolerance.to_bits(),
    };
    let mut new_evaluations = 0;
    if !cache.completed.contains(&round) {
        for theta in initial_design(dim, budget.n_init) {
            if cache.len() >= budget.n_init {
                break;
            }
            if !cache.contains(&theta) {
                evaluate_into(evaluate, cache, theta)?;
                new_evaluations += 1;
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(budget.seed);
        for _ in 0..budget.n_iter {
            let (points, values) = seed_from_cache(cache, lambda)?;
            let gp = fit_gp(&points, &values, GpHyper::for_targets(&values))?;
            let best = gp.best_target();
            let proposal = if dim == 1 {
                propose_on_grid(&gp, best, cache)
            } else {
                propose_multistart(&gp, best, cache, dim, &mut rng)
            };
            match proposal {
                Some((theta, log_ei)) if log_ei > budget.ei_tolerance.ln() => {
                    evaluate_into(evaluate, cache, theta)?;
                    new_evaluations += 1;
                }
                _ => break,
            }
        }
        cache.completed.insert(round);
    }

    let best = cache
        .best_for(lambda)
        .ok_or_else(|| AcllError::InvalidState("cache is empty after the initial design".into()))?;
    Ok(BoOutcome {
        theta: best.theta.clone(),
        objective: best.objective(lambda),
        size: best.size,
        risk: best.risk,
        new_evaluations,
    })
}

fn evaluate_into<F>(evaluate: &mut F, cache: &mut EvalCache, theta: Vec<f64>) -> Result<()>
where
    F: FnMut(&[f64]) -> Result<Evaluation>,
{
    let wrap = |theta: &[f64], source: AcllError| AcllError::Evaluation {
        theta: theta.to_vec(),
        source: Box::new(source),
    };
    let eval = evaluate(&theta).map_err(|e| wrap(&theta, e))?;
    let in_unit = |v: f64| (0.0..=1.0).contains(&v);
    if !(in_unit(eval.size) && in_unit(eval.risk)) {
        return Err(wrap(
            &theta,
            AcllError::InvalidData(format!("size {} and risk {} must lie in [0, 1]", eval.size, eval.risk)),
        ));
    }
    cache.insert(theta, eval);
    Ok(())
}

/// `n` design points. In one dimension: the endpoints, then the interior of
/// an even grid in bit-reversed order. Otherwise: the all-zeros and all-ones
/// corners, then Halton points.
pub fn initial_design(dim: usize, n: usize) -> Vec<Vec<f64>> {
    if dim == 1 {
        let mut order: Vec<usize> = vec![0, n - 1];
        let mut interior: Vec<usize> = (1..n - 1).collect();
        interior.sort_by_key(|&i| (interior_rank(i, n), i));
        order.extend(interior);
        order.into_iter().map(|i| vec![i as f64 / (n - 1) as f64]).collect()
    } else {
        let mut pts = vec![vec![0.0; dim], vec![1.0; dim]];
        pts.extend((1..).map(|i| halton(i, dim)).take(n.saturating_sub(2)));
        pts.truncate(n);
        pts
    }
}

/// Coarse-to-fine rank of interior grid index `i` on `0..n`: the midpoint
/// first, then quarter points, and so on.
fn interior_rank(i: usize, n: usize) -> u32 {
    let x = i as f64 / (n - 1) as f64;
    for level in 1..32 {
        let scale = (1u64 << level) as f64;
        if ((x * scale).round() - x * scale).abs() < 1e-9 {
            return level;
        }
    }
    32
}

/// Highest log-EI uncached grid point.
fn propose_on_grid(gp: &GpModel, best: f64, cache: &EvalCache) -> Option<(Vec<f64>, f64)> {
    let mut winner: Option<(usize, f64)> = None;
    for i in 0..=GRID_STEPS {
        let theta = [i as f64 / GRID_STEPS as f64];
        if cache.contains(&theta) {
            continue;
        }
        let ei = log_expected_improvement(gp, &theta, best);
        if winner.is_none_or(|(_, w)| ei > w) {
            winner = Some((i, ei));
        }
    }
    winner.map(|(i, ei)| (vec![i as f64 / GRID_STEPS as f64], ei))
}

fn propose_multistart(
    gp: &GpModel,
    best: f64,
    cache: &EvalCache,
    dim: usize,
    rng: &mut ChaCha8Rng,
) -> Option<(Vec<f64>, f64)> {
    let ei = |x: &[f64]| log_expected_improvement(gp, x, best);
    let shift: Vec<f64> = (0..dim).map(|_| rng.random::<f64>()).collect();
    let mut candidates: Vec<(Vec<f64>, f64)> = (1..=MULTISTART_POINTS as u64)
        .map(|i| {
            let x: Vec<f64> = halton(i, dim).iter().zip(&shift).map(|(h, s)| (h + s).fract()).collect();
            let v = ei(&x);
            (x, v)
        })
        .collect();
    candidates.sort_by(|a, b| b.1.total_cmp(&a.1));
    let refined: Vec<(Vec<f64>, f64)> = candidates
        .iter()
        .take(REFINE_STARTS)
        .map(|(x, v)| coordinate_refine(x.clone(), *v, &ei))
        .collect();
    candidates.extend(refined);
    candidates.sort_by(|a, b| b.1.total_cmp(&a.1));
    candidates.into_iter().find(|(x, _)| !cache.contains(x))
}

fn coordinate_refine(mut x: Vec<f64>, mut value: f64, ei: &impl Fn(&[f64]) -> f64) -> (Vec<f64>, f64) {
    let mut step = 0.1;
    while step >= 1e-3 {
        let mut improved = false;
        for c in 0..x.len() {
            for dir in [-1.0, 1.0] {
                let mut y = x.clone();
                y[c] = (y[c] + dir * step).clamp(0.0, 1.0);
                let v = ei(&y);
                if v > value {
                    x = y;
                    value = v;
                    improved = true;
                }
            }
        }
        if !improved {
            step /= 2.0;
        }
    }
    (x, value)
}

fn van_der_corput(mut i: u64, base: u64) -> f64 {
    let mut result = 0.0;
    let mut f = 1.0 / base as f64;
    while i > 0 {
        result += f * (i % base) as f64;
        i /= base;
        f /= base as f64;
    }
    result
}

const PRIMES: [u64; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

pub fn halton(i: u64, dim: usize) -> Vec<f64> {
    (0..dim).map(|d| van_der_corput(i, PRIMES[d % PRIMES.len()] + 56 * (d / PRIMES.len()) as u64)).collect()
}

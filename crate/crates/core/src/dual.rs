//! Constrained compression selection.
//!
//! Minimize `size(theta)` subject to `risk(theta) <= reference_risk + epsilon`.
//! The multiplier `lambda` of the relaxed problem is bisected using the sign
//! of the constraint violation at each relaxed minimizer; once the search
//! stops, the answer is the smallest feasible entry anywhere in the cache.

use serde::{Deserialize, Serialize};

use crate::boopt::{bo_minimize, check_lambda, BoBudget, BoOutcome, EvalCache, Evaluation};
use crate::error::{AcllError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DualSearchConfig {
    /// Tolerated absolute increase of the 0-1 risk over the reference.
    pub epsilon: f64,
    pub lambda_lo: f64,
    pub lambda_hi: f64,
    /// Stop once `(hi - lo) / hi` drops below this.
    pub lambda_tol: f64,
    pub max_rounds: usize,
    pub bo_budget: BoBudget,
    /// Cap on risk evaluations over the whole search. `None` means
    /// `8 * (n_init + n_iter)`.
    pub max_evaluations: Option<usize>,
}

impl Default for DualSearchConfig {
    fn default() -> Self {
        DualSearchConfig {
            epsilon: 0.02,
            lambda_lo: 0.0,
            lambda_hi: 64.0,
            lambda_tol: 0.01,
            max_rounds: 12,
            bo_budget: BoBudget::default(),
            max_evaluations: None,
        }
    }
}

impl DualSearchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(AcllError::InvalidSpec(msg));
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return bad(format!("epsilon must be non-negative, got {}", self.epsilon));
        }
        if !(self.lambda_lo.is_finite() && self.lambda_lo >= 0.0) {
            return bad(format!("lambda_lo must be non-negative, got {}", self.lambda_lo));
        }
        if !(self.lambda_hi.is_finite() && self.lambda_hi > self.lambda_lo) {
            return bad(format!("lambda_hi must exceed lambda_lo, got {}", self.lambda_hi));
        }
        if !(self.lambda_tol.is_finite() && self.lambda_tol > 0.0) {
            return bad(format!("lambda_tol must be positive, got {}", self.lambda_tol));
        }
        if self.max_rounds < 2 {
            return bad(format!("max_rounds must be at least 2, got {}", self.max_rounds));
        }
        if self.max_evaluations.is_some_and(|m| m < self.bo_budget.n_init + 1) {
            return bad(format!("max_evaluations must be at least n_init + 1, got {:?}", self.max_evaluations));
        }
        self.bo_budget.validate()
    }

    pub fn evaluation_cap(&self) -> usize {
        self.max_evaluations.unwrap_or(8 * (self.bo_budget.n_init + self.bo_budget.n_iter))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub lambda: f64,
    pub theta: Vec<f64>,
    pub size: f64,
    pub risk: f64,
    /// `risk - (reference_risk + epsilon)`; positive means infeasible.
    pub violation: f64,
    pub new_evaluations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Incumbent {
    pub theta: Vec<f64>,
    pub size: f64,
    pub risk: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualState {
    pub round: usize,
    pub lambda: f64,
    pub lo: f64,
    pub hi: f64,
    /// A multiplier with a feasible relaxed minimizer has been seen.
    pub bracketed: bool,
    pub converged: bool,
    /// The evaluation cap was reached; later rounds used cached values only.
    pub exhausted: bool,
    pub incumbent: Option<Incumbent>,
    pub trail: Vec<RoundRecord>,
}

impl DualState {
    /// One JSON object per round.
    pub fn write_trail_jsonl<W: std::io::Write>(&self, mut out: W) -> Result<()> {
        for r in &self.trail {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub theta: Vec<f64>,
    pub size: f64,
    pub risk: f64,
    pub lambda_final: f64,
    /// No cached point met the constraint; `theta` is all zeros.
    pub infeasible: bool,
    pub evaluations: usize,
    pub state: DualState,
}

/// `min` over cached entries of `size + lambda * risk`.
pub fn dual_value(cache: &EvalCache, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    cache
        .best_for(lambda)
        .map(|e| e.objective(lambda))
        .ok_or_else(|| AcllError::InvalidState("dual value of an empty cache".into()))
}

/// Bisection over the multiplier with Bayesian optimization of each relaxed
/// subproblem. `dim` is the number of compression parameters.
pub fn acll_select<F>(
    evaluate: &mut F,
    reference_risk: f64,
    cfg: &DualSearchConfig,
    cache: &mut EvalCache,
    dim: usize,
) -> Result<Selection>
where
    F: FnMut(&[f64]) -> Result<Evaluation>,
{
    cfg.validate()?;
    if !(0.0..=1.0).contains(&reference_risk) {
        return Err(AcllError::InvalidSpec(format!("reference risk {reference_risk} outside [0, 1]")));
    }
    let threshold = reference_risk + cfg.epsilon;
    let mut state = DualState {
        round: 0,
        lambda: cfg.lambda_lo,
        lo: cfg.lambda_lo,
        hi: cfg.lambda_hi,
        bracketed: false,
        converged: false,
        exhausted: false,
        incumbent: None,
        trail: Vec::new(),
    };
    let cap = cfg.evaluation_cap();
    let mut evaluations = 0;
    let mut retried = false;

    while state.trail.len() < cfg.max_rounds {
        let lambda = match state.trail.len() {
            0 => cfg.lambda_lo,
            1 => cfg.lambda_hi,
            _ if !state.bracketed => {
                // The top of the range was infeasible: one doubling retry.
                if retried {
                    break;
                }
                retried = true;
                2.0 * cfg.lambda_hi
            }
            _ => 0.5 * (state.lo + state.hi),
        };
        let design = cfg.bo_budget.n_init.saturating_sub(cache.len());
        let iters = cfg.bo_budget.n_iter.min(cap.saturating_sub(evaluations + design));
        let out = if iters == 0 {
            // Out of evaluations: the round is answered from the cache alone.
            state.exhausted = true;
            let best = cache
                .best_for(lambda)
                .ok_or_else(|| AcllError::InvalidState("evaluation budget spent on an empty cache".into()))?;
            BoOutcome {
                theta: best.theta.clone(),
                objective: best.objective(lambda),
                size: best.size,
                risk: best.risk,
                new_evaluations: 0,
            }
        } else {
            let budget = BoBudget { n_iter: iters, ..cfg.bo_budget };
            bo_minimize(evaluate, lambda, cache, &budget, dim)?
        };
        evaluations += out.new_evaluations;
        let violation = out.risk - threshold;
        state.round = state.trail.len();
        state.lambda = lambda;
        state.trail.push(RoundRecord {
            round: state.round,
            lambda,
            theta: out.theta.clone(),
            size: out.size,
            risk: out.risk,
            violation,
            new_evaluations: out.new_evaluations,
        });

        if out.risk <= threshold {
            state.hi = lambda;
            state.bracketed = true;
            if state.incumbent.as_ref().is_none_or(|inc| out.size < inc.size) {
                state.incumbent = Some(Incumbent { theta: out.theta, size: out.size, risk: out.risk });
            }
        } else {
            state.lo = lambda;
        }

        if state.bracketed && (state.hi <= state.lo || (state.hi - state.lo) / state.hi < cfg.lambda_tol) {
            state.converged = true;
            break;
        }
    }

    let feasible = cache
        .entries()
        .iter()
        .filter(|e| e.risk <= threshold)
        .min_by(|a, b| a.size.total_cmp(&b.size).then(a.risk.total_cmp(&b.risk)));
    let lambda_final = if state.bracketed { state.hi } else { state.lambda };
    let selection = match feasible {
        Some(e) => Selection {
            theta: e.theta.clone(),
            size: e.size,
            risk: e.risk,
            lambda_final,
            infeasible: false,
            evaluations,
            state,
        },
        None => {
            let zero = vec![0.0; dim];
            let fallback = match cache.get(&zero) {
                Some(e) => Evaluation { size: e.size, risk: e.risk },
                None => {
                    let eval = evaluate(&zero).map_err(|source| AcllError::Evaluation {
                        theta: zero.clone(),
                        source: Box::new(source),
                    })?;
                    cache.insert(zero.clone(), eval);
                    evaluations += 1;
                    eval
                }
            };
            Selection {
                theta: zero,
                size: fallback.size,
                risk: fallback.risk,
                lambda_final,
                infeasible: true,
                evaluations,
                state,
            }
        }
    };
    Ok(selection)
}

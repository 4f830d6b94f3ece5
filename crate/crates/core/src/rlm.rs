//! Regularising Levenberg-Marquardt scheme.
//!
//! Each step solves (JᵀJ + αI)s = Jᵀres with the damping α chosen so the
//! linearised residual ‖res − Js‖ equals ρ·‖res‖. Iteration stops once the
//! residual falls to τδ for a preassigned noise level δ (discrepancy
//! principle), or when the local estimate of the Scherzer constant blows
//! past a cap, which flags pixels where the scheme's regularity assumption
//! fails.

use nalgebra::{DMatrix, DVector};

use crate::error::{PsError, Result};

/// Damping search range; g(α) is monotone so brackets outside this window
/// mean the target is numerically unreachable.
const ALPHA_MIN: f64 = 1e-12;
const ALPHA_MAX: f64 = 1e16;

/// Step below which two iterates count as coincident.
const STEP_EPSILON: f64 = 1e-15;

/// Solver parameters. Defaults follow the usual choice ρ = 0.5, τ = 2.5
/// with the break cap C ≥ 2000.
#[derive(Debug, Clone, Copy)]
pub struct RlmConfig {
    /// Linearised residual contraction per step, in (0,1).
    pub rho: f64,
    /// Discrepancy factor: stop once ‖res‖ ≤ tau·delta. Requires tau > 2
    /// and rho·tau > 1.
    pub tau: f64,
    /// Noise level bound on ‖y^δ − y‖; 0 disables the discrepancy stop.
    pub delta: f64,
    pub max_iters: usize,
    /// Break once the local Scherzer constant reaches this value.
    pub scherzer_cap: f64,
    /// Relative tolerance of the damping search on |‖res − Js‖ − ρ‖res‖|.
    pub alpha_tol: f64,
    /// Scherzer monitoring costs one extra Jacobian SVD per step; turn it
    /// off for speed when the diagnostic is not needed.
    pub monitor_scherzer: bool,
    /// On a Scherzer break, return the last iterate that passed (true) or
    /// the offending new iterate (false).
    pub break_returns_prestep: bool,
}

impl Default for RlmConfig {
    fn default() -> Self {
        RlmConfig {
            rho: 0.5,
            tau: 2.5,
            delta: 0.0,
            max_iters: 50,
            scherzer_cap: 2000.0,
            alpha_tol: 1e-8,
            monitor_scherzer: true,
            break_returns_prestep: true,
        }
    }
}

impl RlmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(PsError::Validation(format!(
                "rho must be in (0,1), got {}",
                self.rho
            )));
        }
        if !(self.tau > 2.0) {
            return Err(PsError::Validation(format!(
                "tau must be > 2, got {}",
                self.tau
            )));
        }
        if !(self.rho * self.tau > 1.0) {
            return Err(PsError::Validation(format!(
                "rho*tau > 1 required, got {}",
                self.rho * self.tau
            )));
        }
        if !(self.delta >= 0.0) || !self.delta.is_finite() {
            return Err(PsError::Validation(format!(
                "delta must be >= 0, got {}",
                self.delta
            )));
        }
        if self.max_iters == 0 {
            return Err(PsError::Validation("max_iters must be > 0".into()));
        }
        if !(self.scherzer_cap > 0.0) {
            return Err(PsError::Validation(format!(
                "scherzer cap must be > 0, got {}",
                self.scherzer_cap
            )));
        }
        if !(self.alpha_tol > 0.0) {
            return Err(PsError::Validation(format!(
                "alpha_tol must be > 0, got {}",
                self.alpha_tol
            )));
        }
        Ok(())
    }
}

/// Residual/Jacobian interface of one nonlinear system F(x) = y^δ.
pub trait RlmProblem {
    /// F(x).
    fn apply(&self, x: &DVector<f64>) -> DVector<f64>;
    /// Jacobian F'(x), m×n.
    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64>;
    /// Observed data y^δ.
    fn observed(&self) -> &DVector<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RlmStatus {
    /// Residual reached τδ.
    DiscrepancyStop,
    /// Local Scherzer constant reached the cap.
    ScherzerBreak,
    MaxIters,
    /// The damping target ρ‖res‖ is unreachable (rank-deficient Jacobian
    /// relative to the residual) or the step vanished.
    Stalled,
}

/// Final iterate plus per-iteration diagnostics.
#[derive(Debug, Clone)]
pub struct RlmResult {
    pub x: DVector<f64>,
    pub status: RlmStatus,
    pub iters: usize,
    pub final_residual: f64,
    pub alpha_trace: Vec<f64>,
    pub scherzer_trace: Vec<f64>,
    pub residual_trace: Vec<f64>,
}

/// Damping selection outcome: the α solving ‖res − Js(α)‖ = ρ‖res‖ together
/// with the step s(α). When the target is unreachable the smallest bracketed
/// α is returned with `stalled` set.
#[derive(Debug, Clone)]
pub struct AlphaStep {
    pub alpha: f64,
    pub step: DVector<f64>,
    /// ‖res − J·step‖ actually achieved.
    pub achieved: f64,
    pub stalled: bool,
}

struct AlphaEval {
    alpha: f64,
    step: DVector<f64>,
    g: f64,
    /// d(g²)/dα = 2α·sᵀ(JᵀJ+αI)⁻¹s, using Jᵀ(res − Js) = αs.
    dh: f64,
}

/// Selects the Tikhonov weight for one step.
///
/// g(α) = ‖res − Js(α)‖ grows monotonically from the least-squares residual
/// towards ‖res‖, so the root of g(α) = ρ‖res‖ is found by safeguarded
/// Newton on g² − (ρ‖res‖)² inside a geometrically grown bracket around
/// α = 1. Each trial factorises the n×n damped normal matrix once.
pub fn solve_alpha(jac: &DMatrix<f64>, res: &DVector<f64>, rho: f64, tol: f64) -> AlphaStep {
    let n = jac.ncols();
    debug_assert!(rho > 0.0 && rho < 1.0, "rho must lie in (0,1)");
    debug_assert_eq!(jac.nrows(), res.len());
    let rnorm = res.norm();
    if rnorm == 0.0 {
        return AlphaStep {
            alpha: 0.0,
            step: DVector::zeros(n),
            achieved: 0.0,
            stalled: false,
        };
    }
    let jtj = jac.transpose() * jac;
    let jtr = jac.transpose() * res;
    if jtr.norm() == 0.0 {
        // residual orthogonal to the Jacobian range: no step helps
        return AlphaStep {
            alpha: ALPHA_MIN,
            step: DVector::zeros(n),
            achieved: rnorm,
            stalled: true,
        };
    }
    let target = rho * rnorm;
    let tolerance = tol * rnorm;

    // LU keeps the solve free of square roots, so diagonal systems (the
    // identity-Jacobian case in particular) come out bit-exact
    let eval = |alpha: f64| -> Option<AlphaEval> {
        let mut damped = jtj.clone();
        for i in 0..n {
            damped[(i, i)] += alpha;
        }
        let lu = damped.lu();
        let step = lu.solve(&jtr)?;
        let g = (res - jac * &step).norm();
        let w = lu.solve(&step)?;
        let dh = 2.0 * alpha * step.dot(&w);
        Some(AlphaEval { alpha, step, g, dh })
    };

    let done = |e: AlphaEval, stalled: bool| AlphaStep {
        alpha: e.alpha,
        step: e.step,
        achieved: e.g,
        stalled,
    };

    let Some(start) = eval(1.0) else {
        return AlphaStep {
            alpha: 1.0,
            step: DVector::zeros(n),
            achieved: rnorm,
            stalled: true,
        };
    };
    if (start.g - target).abs() <= tolerance {
        return done(start, false);
    }

    // bracket [lo, hi] with g(lo) <= target <= g(hi)
    let (mut lo, mut hi);
    if start.g < target {
        lo = start;
        loop {
            let alpha = lo.alpha * 10.0;
            let Some(e) = eval(alpha) else {
                return done(lo, false);
            };
            if (e.g - target).abs() <= tolerance {
                return done(e, false);
            }
            if e.g > target {
                hi = e;
                break;
            }
            lo = e;
            if alpha > ALPHA_MAX {
                return done(lo, false);
            }
        }
    } else {
        hi = start;
        loop {
            let alpha = hi.alpha / 10.0;
            if alpha < ALPHA_MIN {
                let Some(floor) = eval(ALPHA_MIN) else {
                    return done(hi, true);
                };
                if floor.g > target {
                    // even an (almost) undamped Gauss-Newton step cannot
                    // contract the linearised residual to the target
                    return done(floor, true);
                }
                if (floor.g - target).abs() <= tolerance {
                    return done(floor, false);
                }
                lo = floor;
                break;
            }
            let Some(e) = eval(alpha) else {
                return done(hi, true);
            };
            if (e.g - target).abs() <= tolerance {
                return done(e, false);
            }
            if e.g < target {
                lo = e;
                break;
            }
            hi = e;
        }
    }

    // safeguarded Newton on h(α) = g² − target², launched from the bracket
    // endpoint closer to the target; geometric bisection when a Newton trial
    // leaves the bracket
    for _ in 0..200 {
        if hi.alpha - lo.alpha <= f64::EPSILON * hi.alpha {
            break;
        }
        let from = if (lo.g - target).abs() <= (hi.g - target).abs() {
            &lo
        } else {
            &hi
        };
        let h_val = from.g * from.g - target * target;
        let mut next = from.alpha - h_val / from.dh;
        if !next.is_finite() || next <= lo.alpha || next >= hi.alpha {
            next = (lo.alpha * hi.alpha).sqrt();
        }
        let Some(e) = eval(next) else {
            break;
        };
        if (e.g - target).abs() <= tolerance {
            return done(e, false);
        }
        if e.g < target {
            lo = e;
        } else {
            hi = e;
        }
    }
    let best = if (lo.g - target).abs() <= (hi.g - target).abs() {
        lo
    } else {
        hi
    };
    done(best, false)
}

/// One iteration of the scheme: x_{k+1} = x_k + (JᵀJ + α_kI)⁻¹Jᵀ(y^δ − F(x_k)).
pub fn rlm_step<P: RlmProblem + ?Sized>(
    problem: &P,
    x_k: &DVector<f64>,
    rho: f64,
    alpha_tol: f64,
) -> Result<(DVector<f64>, AlphaStep)> {
    let fx = problem.apply(x_k);
    if !fx.iter().all(|v| v.is_finite()) {
        return Err(PsError::NumericalFailure { iteration: 0 });
    }
    let res = problem.observed() - fx;
    let jac = problem.jacobian(x_k);
    if !jac.iter().all(|v| v.is_finite()) {
        return Err(PsError::NumericalFailure { iteration: 0 });
    }
    let sol = solve_alpha(&jac, &res, rho, alpha_tol);
    Ok((x_k + &sol.step, sol))
}

/// Local estimate of the Scherzer constant between two iterates.
///
/// R is the minimal-norm solution of R·J_{k+1} = J_k, obtained through the
/// singular-value pseudoinverse with cutoff 1e-12·σ_max, and
/// C = ‖R − I‖₂ / ‖x_k − x_{k+1}‖.
pub fn scherzer_local(
    jac_k: &DMatrix<f64>,
    jac_k1: &DMatrix<f64>,
    x_k: &DVector<f64>,
    x_k1: &DVector<f64>,
) -> Result<f64> {
    if jac_k.shape() != jac_k1.shape() {
        return Err(PsError::Validation(format!(
            "Jacobian shapes disagree: {:?} vs {:?}",
            jac_k.shape(),
            jac_k1.shape()
        )));
    }
    let dx = (x_k - x_k1).norm();
    if dx < STEP_EPSILON {
        return Err(PsError::UndefinedScherzer);
    }
    let m = jac_k.nrows();
    let svd = jac_k1.clone().svd(true, true);
    let smax = svd.singular_values.max().max(0.0);
    let pinv = svd
        .pseudo_inverse(1e-12 * smax)
        .map_err(|e| PsError::Validation(e.to_string()))?;
    let mut r = jac_k * pinv;
    for i in 0..m {
        r[(i, i)] -= 1.0;
    }
    let spectral = r.singular_values().max();
    Ok(spectral / dx)
}

/// Runs the scheme from x0 until the discrepancy stop, a Scherzer break,
/// a stall, or the iteration cap.
pub fn rlm_solve<P: RlmProblem + ?Sized>(
    problem: &P,
    x0: DVector<f64>,
    cfg: &RlmConfig,
) -> Result<RlmResult> {
    cfg.validate()?;
    let y = problem.observed();
    let threshold = cfg.tau * cfg.delta;

    let mut x = x0;
    let mut alpha_trace = Vec::new();
    let mut scherzer_trace = Vec::new();
    let mut residual_trace = Vec::new();
    let mut cached_jac: Option<DMatrix<f64>> = None;

    for k in 0..=cfg.max_iters {
        let fx = problem.apply(&x);
        if !fx.iter().all(|v| v.is_finite()) {
            return Err(PsError::NumericalFailure { iteration: k });
        }
        let res = y - fx;
        let rnorm = res.norm();
        residual_trace.push(rnorm);
        if rnorm <= threshold {
            return Ok(RlmResult {
                x,
                status: RlmStatus::DiscrepancyStop,
                iters: k,
                final_residual: rnorm,
                alpha_trace,
                scherzer_trace,
                residual_trace,
            });
        }
        if k == cfg.max_iters {
            return Ok(RlmResult {
                x,
                status: RlmStatus::MaxIters,
                iters: k,
                final_residual: rnorm,
                alpha_trace,
                scherzer_trace,
                residual_trace,
            });
        }

        let jac = match cached_jac.take() {
            Some(j) => j,
            None => {
                let j = problem.jacobian(&x);
                if !j.iter().all(|v| v.is_finite()) {
                    return Err(PsError::NumericalFailure { iteration: k });
                }
                j
            }
        };

        let sol = solve_alpha(&jac, &res, cfg.rho, cfg.alpha_tol);
        if sol.stalled || sol.step.norm() < STEP_EPSILON {
            return Ok(RlmResult {
                x,
                status: RlmStatus::Stalled,
                iters: k,
                final_residual: rnorm,
                alpha_trace,
                scherzer_trace,
                residual_trace,
            });
        }
        let x_next = &x + &sol.step;
        alpha_trace.push(sol.alpha);

        if cfg.monitor_scherzer {
            let jac_next = problem.jacobian(&x_next);
            if !jac_next.iter().all(|v| v.is_finite()) {
                return Err(PsError::NumericalFailure { iteration: k + 1 });
            }
            let constant = scherzer_local(&jac, &jac_next, &x, &x_next)?;
            scherzer_trace.push(constant);
            if constant >= cfg.scherzer_cap {
                let (kept, final_residual) = if cfg.break_returns_prestep {
                    (x, rnorm)
                } else {
                    let fx_next = problem.apply(&x_next);
                    let r = (y - fx_next).norm();
                    (x_next, r)
                };
                return Ok(RlmResult {
                    x: kept,
                    status: RlmStatus::ScherzerBreak,
                    iters: k,
                    final_residual,
                    alpha_trace,
                    scherzer_trace,
                    residual_trace,
                });
            }
            cached_jac = Some(jac_next);
        }

        x = x_next;
    }
    unreachable!("loop returns on every exit path")
}

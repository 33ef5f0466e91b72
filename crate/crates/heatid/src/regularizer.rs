//! The coupled Landweber / iterated-Tikhonov iteration with its unified
//! discrepancy stopping rule and parameter-choice rules.
//!
//! One cycle maps (c_k, f_k) to (c_{k+1}, f_{k+1}):
//!
//! ```text
//! f_{k+1} = f_k + γ (F′_{c_k})*(g^δ − F_{c_k}(f_k))
//! c_{k+1} ≈ argmin ‖A_{f_{k+1}}(c) − g^δ‖² + α‖c − c_k‖²_{H¹}
//! ```
//!
//! The coefficient update is one projected Gauss–Newton step: conjugate
//! gradients on (A′*A′ + αB)s = A′*(g^δ − A(c_k)) with B the H¹ Gram
//! operator, then a clip onto the admissible box. Exact minimization would
//! guarantee the per-cycle residual chain
//!
//! ```text
//! ‖𝔽(c_{k+1}, f_{k+1}) − g^δ‖ ≤ ‖F_{c_k}(f_{k+1}) − g^δ‖,
//! ```
//!
//! so the step enforces it operationally: whenever the candidate violates
//! the chain, α is inflated and the subproblem re-solved. Because of the
//! chain, a single residual evaluation per cycle drives the stopping test
//! for both half-steps (the unified discrepancy principle).
//!
//! Stopping: first iterate with ‖𝔽(c_k, f_k) − g^δ‖ ≤ τδ. With δ = 0 the
//! discrepancy never fires and the hard cap / stagnation test governs.

use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::grid::{self, ScalarField};
use crate::operators::{OperatorError, ParamPair, ProblemSetup};
use crate::pde::{PdeError, StepOperator};

/// Smallest Tikhonov weight used when the noise level is zero.
pub const ALPHA_FLOOR: f64 = 1e-8;

/// Relative slack when checking the per-cycle residual chain; covers
/// round-off when the coefficient barely moves.
pub const CHAIN_SLACK: f64 = 1e-12;

/// True when the unified residual respects the per-cycle chain bound.
pub fn chain_holds(residual_unified: f64, residual_landweber: f64) -> bool {
    residual_unified <= residual_landweber + CHAIN_SLACK * (1.0 + residual_landweber)
}

#[derive(Debug, Error)]
pub enum RegularizerError {
    #[error("invalid {name}: {message}")]
    InvalidConfig { name: &'static str, message: String },
    #[error(transparent)]
    Operator(#[from] OperatorError),
    #[error(transparent)]
    Pde(#[from] PdeError),
    #[error("conjugate gradient breakdown at inner iteration {iteration}: curvature {curvature}")]
    CgBreakdown { iteration: usize, curvature: f64 },
}

/// Tikhonov weight rule: any α > 6(δ/ρ)² is admissible; returns
/// 6.6(δ/ρ)² with a small positive floor for noise-free data.
pub fn choose_alpha(delta: f64, rho: f64) -> f64 {
    let rule = 6.6 * (delta / rho).powi(2);
    rule.max(ALPHA_FLOOR)
}

/// Discrepancy factor rule: τ must exceed 2(1+η)/(1−η); returns that bound
/// with 5% headroom.
pub fn choose_tau(eta_assumed: f64) -> Result<f64, RegularizerError> {
    if !(0.0..1.0).contains(&eta_assumed) {
        return Err(RegularizerError::InvalidConfig {
            name: "eta_assumed",
            message: format!("cone constant must lie in [0, 1), got {eta_assumed}"),
        });
    }
    Ok(1.05 * 2.0 * (1.0 + eta_assumed) / (1.0 - eta_assumed))
}

/// The minimal τ admitted by the relaxation bound for a given cone constant.
pub fn tau_lower_bound(eta_assumed: f64) -> f64 {
    2.0 * (1.0 + eta_assumed) / (1.0 - eta_assumed)
}

/// All knobs of the coupled iteration.
#[derive(Debug, Clone, Serialize)]
pub struct InversionConfig {
    /// Landweber step length; must satisfy γ‖F′‖² < 1.
    pub gamma: f64,
    /// Tikhonov weight at the start of each cycle.
    pub alpha: f64,
    /// Discrepancy factor; validated against 2(1+η)/(1−η).
    pub tau: f64,
    /// Cone constant assumed for the τ bound.
    pub eta_assumed: f64,
    /// Trust radius of the α rule.
    pub rho: f64,
    /// Hard iteration cap.
    pub k_max: usize,
    /// Relative tolerance of the inner CG solve.
    pub inner_cg_tol: f64,
    /// Iteration cap of the inner CG solve.
    pub inner_cg_maxit: usize,
    /// α inflation factor when the residual chain is violated.
    pub backtrack_factor: f64,
    /// Maximum α inflations per cycle before declaring stagnation.
    pub backtrack_max: usize,
    /// Stagnation window (iterations) for noise-free runs.
    pub stagnation_window: usize,
    /// Relative residual decrease below which the window counts as stagnant.
    pub stagnation_rtol: f64,
}

impl InversionConfig {
    /// Builds a config from explicit γ, α, τ, validating the τ bound.
    pub fn new(
        gamma: f64,
        alpha: f64,
        tau: f64,
        eta_assumed: f64,
        rho: f64,
    ) -> Result<Self, RegularizerError> {
        let cfg = Self {
            gamma,
            alpha,
            tau,
            eta_assumed,
            rho,
            k_max: 500,
            inner_cg_tol: 1e-8,
            inner_cg_maxit: 30,
            backtrack_factor: 3.0,
            backtrack_max: 10,
            stagnation_window: 10,
            stagnation_rtol: 1e-10,
        };
        cfg.validate(0.0)?;
        Ok(cfg)
    }

    /// Builds a config from the parameter-choice rules of [`choose_alpha`]
    /// and [`choose_tau`].
    pub fn from_rules(
        gamma: f64,
        delta: f64,
        rho: f64,
        eta_assumed: f64,
    ) -> Result<Self, RegularizerError> {
        Self::new(
            gamma,
            choose_alpha(delta, rho),
            choose_tau(eta_assumed)?,
            eta_assumed,
            rho,
        )
    }

    /// Checks every invariant; `delta` activates the α ≥ 6(δ/ρ)² rule.
    pub fn validate(&self, delta: f64) -> Result<(), RegularizerError> {
        let err = |name: &'static str, message: String| {
            Err(RegularizerError::InvalidConfig { name, message })
        };
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return err("gamma", format!("must be > 0, got {}", self.gamma));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return err("alpha", format!("must be > 0, got {}", self.alpha));
        }
        if !(0.0..1.0).contains(&self.eta_assumed) {
            return err(
                "eta_assumed",
                format!("must lie in [0, 1), got {}", self.eta_assumed),
            );
        }
        let bound = tau_lower_bound(self.eta_assumed);
        if !(self.tau > bound) {
            return err(
                "tau",
                format!(
                    "must exceed 2(1+η)/(1−η) = {bound} for eta_assumed = {}, got {}",
                    self.eta_assumed, self.tau
                ),
            );
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return err("rho", format!("must be > 0, got {}", self.rho));
        }
        if delta > 0.0 {
            let alpha_bound = 6.0 * (delta / self.rho).powi(2);
            if self.alpha < alpha_bound {
                return err(
                    "alpha",
                    format!(
                        "must be ≥ 6(δ/ρ)² = {alpha_bound} for δ = {delta}, got {}",
                        self.alpha
                    ),
                );
            }
        }
        if !(self.inner_cg_tol > 0.0 && self.inner_cg_tol < 1.0) {
            return err(
                "inner_cg_tol",
                format!("must lie in (0, 1), got {}", self.inner_cg_tol),
            );
        }
        if self.inner_cg_maxit == 0 {
            return err("inner_cg_maxit", "must be ≥ 1".into());
        }
        if !(self.backtrack_factor > 1.0) {
            return err(
                "backtrack_factor",
                format!("must be > 1, got {}", self.backtrack_factor),
            );
        }
        Ok(())
    }
}

/// Why the iteration stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// Unified residual fell to τδ.
    Discrepancy,
    /// Hard iteration cap reached.
    KMax,
    /// Residual decrease stalled (noise-free runs, or exhausted
    /// backtracking with no Landweber progress).
    Stagnation,
}

/// One row of the iteration log. Index 0 describes the initial pair; row k
/// describes the state after cycle k.
#[derive(Debug, Clone, Serialize)]
pub struct IterationRecord {
    pub k: usize,
    /// ‖𝔽(c_k, f_k) − g^δ‖, the unified discrepancy quantity.
    pub residual_unified: f64,
    /// ‖F_{c_{k−1}}(f_k) − g^δ‖, the mid-cycle Landweber residual of the
    /// cycle that produced this iterate; absent at k = 0.
    pub residual_landweber: Option<f64>,
    /// J_α at the accepted coefficient update; absent at k = 0.
    pub tikhonov_value: Option<f64>,
    /// α accepted by the chain backtracking; absent at k = 0.
    pub alpha_used: Option<f64>,
    /// ‖f_k − f*‖ when the ground truth is supplied.
    pub err_f: Option<f64>,
    /// ‖c_k − c*‖ when the ground truth is supplied.
    pub err_c: Option<f64>,
    /// Wall time of the cycle; excluded from the deterministic CSV log.
    pub wall_seconds: f64,
}

/// Deterministic CSV rendering of the iteration log (wall times excluded so
/// that identical config + seed reproduce the file byte for byte).
pub fn records_to_csv(records: &[IterationRecord]) -> String {
    let mut out =
        String::from("k,residual_unified,residual_landweber,tikhonov_value,alpha_used,err_f,err_c\n");
    let opt = |v: Option<f64>| v.map(|x| grid::fmt_full(x)).unwrap_or_default();
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.k,
            grid::fmt_full(r.residual_unified),
            opt(r.residual_landweber),
            opt(r.tikhonov_value),
            opt(r.alpha_used),
            opt(r.err_f),
            opt(r.err_c),
        ));
    }
    out
}

/// Final state of a run plus the full iteration log.
#[derive(Debug)]
pub struct InversionResult {
    pub pair: ParamPair,
    pub stop_reason: StopReason,
    pub k_stop: usize,
    pub records: Vec<IterationRecord>,
    /// τδ, the stopping threshold (zero for noise-free data).
    pub tau_delta: f64,
}

/// Whether the unified discrepancy test fires. With δ = 0 it never does and
/// the iteration cap governs.
pub fn unified_discrepancy(residual_unified: f64, tau: f64, delta: f64) -> bool {
    delta > 0.0 && residual_unified <= tau * delta
}

/// One Landweber half-step for the source:
/// f_{k+1} = f_k + γ (F′_{c_k})*(g^δ − F_{c_k}(f_k)).
pub fn landweber_step(
    f_k: &ScalarField,
    c_k: &ScalarField,
    setup: &ProblemSetup,
    gamma: f64,
) -> Result<ScalarField, RegularizerError> {
    let op = StepOperator::assemble(&setup.a, c_k)?;
    let final_state = op.solve_forward_final(f_k, &setup.phi)?;
    let residual = setup.g_data.sub(&final_state).map_err(OperatorError::from)?;
    let grad = op.apply_adjoint_final(&residual, None)?.grad_f;
    Ok(f_k.axpy(gamma, &grad).map_err(OperatorError::from)?)
}

/// Solves the Gauss–Newton normal system (A′*A′ + αB)s = rhs by conjugate
/// gradients in the weighted L² inner product. A′ is evaluated through the
/// supplied operator and trajectory; B is the H¹ Gram operator.
pub fn solve_gauss_newton_system(
    op: &StepOperator,
    trajectory: &crate::grid::Trajectory,
    rhs: &ScalarField,
    alpha: f64,
    tol: f64,
    maxit: usize,
) -> Result<CgOutcome, RegularizerError> {
    let apply_normal = |s: &ScalarField| -> Result<ScalarField, RegularizerError> {
        let a_s = op.solve_sensitivity_c(s, trajectory)?;
        let grads = op.apply_adjoint_final(&a_s, Some(trajectory))?;
        let ata = grads.grad_c.expect("trajectory supplied");
        let gram = grid::h1_gram(s);
        Ok(ata.axpy(alpha, &gram).map_err(OperatorError::from)?)
    };

    let grid_ref = rhs.grid();
    let mut x = ScalarField::zeros(grid_ref);
    let rhs_norm = grid::l2_norm(rhs);
    if rhs_norm == 0.0 {
        return Ok(CgOutcome {
            solution: x,
            iterations: 0,
            relative_residual: 0.0,
        });
    }
    let mut r = rhs.clone();
    let mut p = r.clone();
    let mut rz = grid::l2_inner(&r, &r).map_err(OperatorError::from)?;
    let target = tol * rhs_norm;
    let mut iterations = 0;
    for it in 0..maxit {
        let np = apply_normal(&p)?;
        let curvature = grid::l2_inner(&p, &np).map_err(OperatorError::from)?;
        if curvature <= 0.0 || !curvature.is_finite() {
            return Err(RegularizerError::CgBreakdown {
                iteration: it,
                curvature,
            });
        }
        let step = rz / curvature;
        x = x.axpy(step, &p).map_err(OperatorError::from)?;
        r = r.axpy(-step, &np).map_err(OperatorError::from)?;
        let rz_new = grid::l2_inner(&r, &r).map_err(OperatorError::from)?;
        iterations = it + 1;
        if rz_new.sqrt() <= target {
            rz = rz_new;
            break;
        }
        p = r.axpy(rz_new / rz, &p).map_err(OperatorError::from)?;
        rz = rz_new;
    }
    Ok(CgOutcome {
        solution: x,
        iterations,
        relative_residual: rz.sqrt() / rhs_norm,
    })
}

/// Inner CG result.
#[derive(Debug)]
pub struct CgOutcome {
    pub solution: ScalarField,
    pub iterations: usize,
    pub relative_residual: f64,
}

/// Outcome of one coefficient update.
#[derive(Debug)]
pub struct TikhonovOutcome {
    pub c_next: ScalarField,
    /// J_α(c_{k+1}) = unified² + α‖c_{k+1} − c_k‖²_{H¹}.
    pub tikhonov_value: f64,
    pub alpha_used: f64,
    /// Unified residual ‖𝔽(c_{k+1}, f_{k+1}) − g^δ‖ at the accepted update.
    pub residual_unified: f64,
    pub backtracks: usize,
    /// True when backtracking was exhausted and c_k was kept.
    pub stagnated: bool,
    pub cg_iterations: usize,
    pub cg_relative_residual: f64,
    /// Factored operator at the accepted coefficient (reused by the caller).
    pub op_next: StepOperator,
}

/// One projected Gauss–Newton/CG Tikhonov half-step for the coefficient,
/// with α-backtracking enforcing the per-cycle residual chain.
pub fn tikhonov_step(
    c_k: &ScalarField,
    f_next: &ScalarField,
    setup: &ProblemSetup,
    config: &InversionConfig,
    bounds: &crate::operators::AdmissibleBox,
) -> Result<TikhonovOutcome, RegularizerError> {
    let op = StepOperator::assemble(&setup.a, c_k)?;
    let trajectory = op.solve_forward(f_next, &setup.phi)?;
    let residual_mid = setup
        .g_data
        .sub(trajectory.final_snapshot())
        .map_err(OperatorError::from)?;
    let landweber_norm = grid::l2_norm(&residual_mid);
    tikhonov_step_cached(
        &op,
        &trajectory,
        c_k,
        f_next,
        landweber_norm,
        setup,
        config,
        config.alpha,
        bounds,
    )
}

/// Tikhonov half-step reusing an already-factored operator and mid-cycle
/// trajectory. `alpha_start` lets the outer loop warm-start the inflation.
#[allow(clippy::too_many_arguments)]
fn tikhonov_step_cached(
    op: &StepOperator,
    trajectory: &crate::grid::Trajectory,
    c_k: &ScalarField,
    f_next: &ScalarField,
    landweber_norm: f64,
    setup: &ProblemSetup,
    config: &InversionConfig,
    alpha_start: f64,
    bounds: &crate::operators::AdmissibleBox,
) -> Result<TikhonovOutcome, RegularizerError> {
    let residual_mid = setup
        .g_data
        .sub(trajectory.final_snapshot())
        .map_err(OperatorError::from)?;
    let rhs = op
        .apply_adjoint_final(&residual_mid, Some(trajectory))?
        .grad_c
        .expect("trajectory supplied");

    let mut alpha = alpha_start;
    let mut cg_iterations = 0;
    let mut cg_relative_residual = 0.0;
    for backtracks in 0..=config.backtrack_max {
        let cg = solve_gauss_newton_system(
            op,
            trajectory,
            &rhs,
            alpha,
            config.inner_cg_tol,
            config.inner_cg_maxit,
        )?;
        cg_iterations = cg.iterations;
        cg_relative_residual = cg.relative_residual;
        let c_cand = bounds.project_c(&c_k.add(&cg.solution).map_err(OperatorError::from)?);
        let op_cand = StepOperator::assemble(&setup.a, &c_cand)?;
        let final_cand = op_cand.solve_forward_final(f_next, &setup.phi)?;
        let unified = grid::l2_norm(&setup.g_data.sub(&final_cand).map_err(OperatorError::from)?);
        if chain_holds(unified, landweber_norm) {
            let dc = c_cand.sub(c_k).map_err(OperatorError::from)?;
            let penalty = grid::h1_inner(&dc, &dc).map_err(OperatorError::from)?;
            return Ok(TikhonovOutcome {
                c_next: c_cand,
                tikhonov_value: unified * unified + alpha * penalty,
                alpha_used: alpha,
                residual_unified: unified,
                backtracks,
                stagnated: false,
                cg_iterations,
                cg_relative_residual,
                op_next: op_cand,
            });
        }
        alpha *= config.backtrack_factor;
    }
    // Exhausted: keep c_k; the chain holds with equality.
    let op_same = StepOperator::assemble(&setup.a, c_k)?;
    Ok(TikhonovOutcome {
        c_next: c_k.clone(),
        tikhonov_value: landweber_norm * landweber_norm,
        alpha_used: alpha,
        residual_unified: landweber_norm,
        backtracks: config.backtrack_max + 1,
        stagnated: true,
        cg_iterations,
        cg_relative_residual,
        op_next: op_same,
    })
}

/// Runs the full coupled iteration from `init`, logging one record per
/// cycle, until the unified discrepancy fires, the cap is reached, or the
/// residual stagnates. Ground truth, when supplied, only adds error columns
/// to the log.
pub fn run_inversion(
    setup: &ProblemSetup,
    config: &InversionConfig,
    init: &ParamPair,
    truth: Option<&ParamPair>,
) -> Result<InversionResult, RegularizerError> {
    config.validate(setup.delta)?;
    let bounds = init.bounds;
    let mut c = bounds.project_c(&init.c);
    let mut f = bounds.project_f(&init.f);
    let tau_delta = config.tau * setup.delta;

    let truth_errors = |c: &ScalarField, f: &ScalarField| -> (Option<f64>, Option<f64>) {
        match truth {
            Some(t) => (
                Some(grid::l2_norm(&f.sub(&t.f).expect("truth on same grid"))),
                Some(grid::l2_norm(&c.sub(&t.c).expect("truth on same grid"))),
            ),
            None => (None, None),
        }
    };

    let mut op = StepOperator::assemble(&setup.a, &c)?;
    let mut final_state = op.solve_forward_final(&f, &setup.phi)?;
    let mut residual_unified =
        grid::l2_norm(&setup.g_data.sub(&final_state).map_err(OperatorError::from)?);

    let mut records = Vec::with_capacity(config.k_max.min(1024) + 1);
    let (err_f, err_c) = truth_errors(&c, &f);
    records.push(IterationRecord {
        k: 0,
        residual_unified,
        residual_landweber: None,
        tikhonov_value: None,
        alpha_used: None,
        err_f,
        err_c,
        wall_seconds: 0.0,
    });

    let mut stop_reason = StopReason::KMax;
    let mut k_stop = 0;
    let mut alpha_warm = config.alpha;
    for k in 0..=config.k_max {
        if unified_discrepancy(residual_unified, config.tau, setup.delta) {
            stop_reason = StopReason::Discrepancy;
            k_stop = k;
            break;
        }
        if k == config.k_max {
            stop_reason = StopReason::KMax;
            k_stop = k;
            break;
        }
        // Stagnation: relative residual decrease over the trailing window.
        if k >= config.stagnation_window {
            let prev = records[k - config.stagnation_window].residual_unified;
            if prev.is_finite()
                && (prev - residual_unified) <= config.stagnation_rtol * prev.max(f64::MIN_POSITIVE)
            {
                stop_reason = StopReason::Stagnation;
                k_stop = k;
                break;
            }
        }

        let started = Instant::now();

        // Landweber half-step on the source.
        let residual_field = setup.g_data.sub(&final_state).map_err(OperatorError::from)?;
        let grad = op.apply_adjoint_final(&residual_field, None)?.grad_f;
        let f_next = bounds.project_f(&f.axpy(config.gamma, &grad).map_err(OperatorError::from)?);

        // Mid-cycle state at (c_k, f_{k+1}); its trajectory feeds the
        // linearized coefficient update.
        let trajectory = op.solve_forward(&f_next, &setup.phi)?;
        let landweber_norm = grid::l2_norm(
            &setup
                .g_data
                .sub(trajectory.final_snapshot())
                .map_err(OperatorError::from)?,
        );

        // Tikhonov half-step on the coefficient, warm-starting α one
        // backtracking notch below the previously accepted value.
        let outcome = tikhonov_step_cached(
            &op,
            &trajectory,
            &c,
            &f_next,
            landweber_norm,
            setup,
            config,
            alpha_warm,
            &bounds,
        )?;
        alpha_warm = (outcome.alpha_used / config.backtrack_factor).max(config.alpha);

        debug_assert!(chain_holds(outcome.residual_unified, landweber_norm));

        c = outcome.c_next;
        f = f_next;
        op = outcome.op_next;
        final_state = op.solve_forward_final(&f, &setup.phi)?;
        residual_unified = outcome.residual_unified;

        let (err_f, err_c) = truth_errors(&c, &f);
        records.push(IterationRecord {
            k: k + 1,
            residual_unified,
            residual_landweber: Some(landweber_norm),
            tikhonov_value: Some(outcome.tikhonov_value),
            alpha_used: Some(outcome.alpha_used),
            err_f,
            err_c,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
        k_stop = k + 1;
    }

    let pair = ParamPair::new(c, f, bounds)?;
    Ok(InversionResult {
        pair,
        stop_reason,
        k_stop,
        records,
        tau_delta,
    })
}

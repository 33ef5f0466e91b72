//! The parameter-to-solution maps and their derivative/adjoint actions as
//! maps between parameter space and data space, plus the diagnostics used to
//! size the iteration: operator-norm estimation for the step length and an
//! empirical tangential-cone constant.
//!
//! The full map sends an admissible pair (c, f) to the final-time state; the
//! two restrictions fix one component each. All three share one computation
//! path, so their consistency is exact. Gradients are returned in L²
//! coordinates; the H¹ geometry of the coefficient update enters only inside
//! the Tikhonov step through the Gram operator.

use std::sync::Arc;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::grid::{self, GridError, GridSpec, ScalarField, Trajectory};
use crate::pde::{checked_initial_state, PdeError, StepOperator};

#[derive(Debug, Error)]
pub enum OperatorError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Pde(#[from] PdeError),
    #[error("invalid admissible box: {message}")]
    InvalidBox { message: String },
    #[error("parameter {name} leaves the admissible box: value {value} outside [{lower}, {upper}]")]
    OutsideBox {
        name: &'static str,
        value: f64,
        lower: f64,
        upper: f64,
    },
    #[error("invalid {name}: {message}")]
    InvalidParameter { name: &'static str, message: String },
    /// Every η sample had a degenerate denominator.
    #[error("all {skipped} cone-condition samples were degenerate")]
    DegenerateSamples { skipped: usize },
}

/// Pointwise bounds of the admissible set: 0 < c̲ ≤ c ≤ c̄, with optional
/// box constraints on the source.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdmissibleBox {
    pub c_lower: f64,
    pub c_upper: f64,
    pub f_lower: Option<f64>,
    pub f_upper: Option<f64>,
}

impl AdmissibleBox {
    pub fn new(c_lower: f64, c_upper: f64) -> Result<Self, OperatorError> {
        if !(c_lower > 0.0 && c_lower.is_finite()) {
            return Err(OperatorError::InvalidBox {
                message: format!("c_lower must be > 0, got {c_lower}"),
            });
        }
        if !(c_upper >= c_lower) || !c_upper.is_finite() {
            return Err(OperatorError::InvalidBox {
                message: format!("need c_lower ≤ c_upper < ∞, got [{c_lower}, {c_upper}]"),
            });
        }
        Ok(Self {
            c_lower,
            c_upper,
            f_lower: None,
            f_upper: None,
        })
    }

    pub fn with_f_bounds(mut self, f_lower: f64, f_upper: f64) -> Result<Self, OperatorError> {
        if f_lower > f_upper {
            return Err(OperatorError::InvalidBox {
                message: format!("need f_lower ≤ f_upper, got [{f_lower}, {f_upper}]"),
            });
        }
        self.f_lower = Some(f_lower);
        self.f_upper = Some(f_upper);
        Ok(self)
    }

    /// Pointwise clip of the reaction coefficient into the box. Idempotent
    /// and nonexpansive in L².
    pub fn project_c(&self, c: &ScalarField) -> ScalarField {
        c.map(|v| v.clamp(self.c_lower, self.c_upper))
            .expect("clamp keeps values finite")
    }

    /// Pointwise clip of the source; identity when no f bounds are set.
    pub fn project_f(&self, f: &ScalarField) -> ScalarField {
        match (self.f_lower, self.f_upper) {
            (Some(lo), Some(hi)) => f.map(|v| v.clamp(lo, hi)).expect("clamp keeps values finite"),
            _ => f.clone(),
        }
    }

    pub fn contains_c(&self, c: &ScalarField) -> bool {
        c.values()
            .iter()
            .all(|&v| v >= self.c_lower && v <= self.c_upper)
    }

    pub fn contains_f(&self, f: &ScalarField) -> bool {
        match (self.f_lower, self.f_upper) {
            (Some(lo), Some(hi)) => f.values().iter().all(|&v| v >= lo && v <= hi),
            _ => true,
        }
    }
}

/// Projects a reaction coefficient onto the admissible box.
pub fn project_admissible(c: &ScalarField, bounds: &AdmissibleBox) -> ScalarField {
    bounds.project_c(c)
}

/// An admissible coefficient/source pair.
#[derive(Debug, Clone)]
pub struct ParamPair {
    pub c: ScalarField,
    pub f: ScalarField,
    pub bounds: AdmissibleBox,
}

impl ParamPair {
    pub fn new(
        c: ScalarField,
        f: ScalarField,
        bounds: AdmissibleBox,
    ) -> Result<Self, OperatorError> {
        if !c.grid().same_as(f.grid()) {
            return Err(GridError::GridMismatch.into());
        }
        if !bounds.contains_c(&c) {
            let bad = c
                .values()
                .iter()
                .copied()
                .find(|&v| v < bounds.c_lower || v > bounds.c_upper)
                .unwrap_or(f64::NAN);
            return Err(OperatorError::OutsideBox {
                name: "c",
                value: bad,
                lower: bounds.c_lower,
                upper: bounds.c_upper,
            });
        }
        if !bounds.contains_f(&f) {
            let (lo, hi) = (
                bounds.f_lower.unwrap_or(f64::NEG_INFINITY),
                bounds.f_upper.unwrap_or(f64::INFINITY),
            );
            let bad = f
                .values()
                .iter()
                .copied()
                .find(|&v| v < lo || v > hi)
                .unwrap_or(f64::NAN);
            return Err(OperatorError::OutsideBox {
                name: "f",
                value: bad,
                lower: lo,
                upper: hi,
            });
        }
        Ok(Self { c, f, bounds })
    }

    pub fn grid(&self) -> &Arc<GridSpec> {
        self.c.grid()
    }
}

/// Everything known about the identification problem: geometry, the known
/// diffusivity and initial state, the measured final state, and the noise
/// level of that measurement.
#[derive(Debug, Clone)]
pub struct ProblemSetup {
    pub grid: Arc<GridSpec>,
    pub a: ScalarField,
    pub phi: ScalarField,
    pub g_data: ScalarField,
    pub delta: f64,
}

impl ProblemSetup {
    pub fn new(
        grid: Arc<GridSpec>,
        a: ScalarField,
        phi: ScalarField,
        g_data: ScalarField,
        delta: f64,
    ) -> Result<Self, OperatorError> {
        for field in [&a, &phi, &g_data] {
            if !field.grid().same_as(&grid) {
                return Err(GridError::GridMismatch.into());
            }
        }
        if !(delta >= 0.0) || !delta.is_finite() {
            return Err(OperatorError::InvalidParameter {
                name: "delta",
                message: format!("noise level must be ≥ 0, got {delta}"),
            });
        }
        let phi = checked_initial_state(phi)?;
        let g_data = checked_initial_state(g_data).map_err(|_| OperatorError::InvalidParameter {
            name: "g_data",
            message: "measured final state must vanish on the boundary".into(),
        })?;
        Ok(Self {
            grid,
            a,
            phi,
            g_data,
            delta,
        })
    }
}

/// The forward map at a fixed linearization point, with the factored step
/// operator and (lazily) the forward trajectory cached for reuse by
/// derivative and adjoint actions.
#[derive(Debug)]
pub struct Linearization {
    op: StepOperator,
    trajectory: Trajectory,
}

impl Linearization {
    /// Assembles at (c, f) and runs one forward solve.
    pub fn at(c: &ScalarField, f: &ScalarField, setup: &ProblemSetup) -> Result<Self, OperatorError> {
        let op = StepOperator::assemble(&setup.a, c)?;
        let trajectory = op.solve_forward(f, &setup.phi)?;
        Ok(Self { op, trajectory })
    }

    pub fn step_operator(&self) -> &StepOperator {
        &self.op
    }

    pub fn trajectory(&self) -> &Trajectory {
        &self.trajectory
    }

    /// Final-time state 𝔽(c, f).
    pub fn final_state(&self) -> &ScalarField {
        self.trajectory.final_snapshot()
    }

    /// g − 𝔽(c, f) and its L² norm.
    pub fn residual(&self, setup: &ProblemSetup) -> (ScalarField, f64) {
        let r = setup
            .g_data
            .sub(self.final_state())
            .expect("setup and state share the grid");
        let norm = grid::l2_norm(&r);
        (r, norm)
    }

    /// Derivative action in the source direction.
    pub fn sensitivity_f(&self, h: &ScalarField) -> Result<ScalarField, OperatorError> {
        Ok(self.op.solve_sensitivity_f(h)?)
    }

    /// Derivative action in the reaction direction.
    pub fn sensitivity_c(&self, kappa: &ScalarField) -> Result<ScalarField, OperatorError> {
        Ok(self.op.solve_sensitivity_c(kappa, &self.trajectory)?)
    }

    /// Adjoint action on a data-space residual, yielding the f-gradient.
    pub fn grad_f(&self, residual: &ScalarField) -> Result<ScalarField, OperatorError> {
        Ok(self.op.apply_adjoint_final(residual, None)?.grad_f)
    }

    /// Adjoint action on a data-space residual, yielding the c-gradient.
    pub fn grad_c(&self, residual: &ScalarField) -> Result<ScalarField, OperatorError> {
        let grads = self.op.apply_adjoint_final(residual, Some(&self.trajectory))?;
        Ok(grads.grad_c.expect("trajectory was supplied"))
    }

    /// Both gradients from one adjoint sweep.
    pub fn grad_both(&self, residual: &ScalarField) -> Result<(ScalarField, ScalarField), OperatorError> {
        let grads = self.op.apply_adjoint_final(residual, Some(&self.trajectory))?;
        Ok((grads.grad_f, grads.grad_c.expect("trajectory was supplied")))
    }
}

fn forward_final(
    c: &ScalarField,
    f: &ScalarField,
    setup: &ProblemSetup,
) -> Result<ScalarField, OperatorError> {
    let op = StepOperator::assemble(&setup.a, c)?;
    Ok(op.solve_forward_final(f, &setup.phi)?)
}

fn require_admissible(p: &ParamPair) -> Result<(), OperatorError> {
    if !p.bounds.contains_c(&p.c) {
        return Err(OperatorError::OutsideBox {
            name: "c",
            value: f64::NAN,
            lower: p.bounds.c_lower,
            upper: p.bounds.c_upper,
        });
    }
    Ok(())
}

/// The full parameter-to-solution map 𝔽(c, f) = u(·, T).
pub fn apply_big_f(p: &ParamPair, setup: &ProblemSetup) -> Result<ScalarField, OperatorError> {
    require_admissible(p)?;
    forward_final(&p.c, &p.f, setup)
}

/// Restriction F_c: f ↦ 𝔽(c, f) with the reaction fixed. Shares the
/// computation path of [`apply_big_f`] exactly.
pub fn apply_f_c(
    f: &ScalarField,
    c_fixed: &ScalarField,
    setup: &ProblemSetup,
) -> Result<ScalarField, OperatorError> {
    forward_final(c_fixed, f, setup)
}

/// Restriction A_f: c ↦ 𝔽(c, f) with the source fixed. Shares the
/// computation path of [`apply_big_f`] exactly.
pub fn apply_a_f(
    c: &ScalarField,
    f_fixed: &ScalarField,
    setup: &ProblemSetup,
) -> Result<ScalarField, OperatorError> {
    forward_final(c, f_fixed, setup)
}

/// (F′_c(f))* applied to a data-space residual.
pub fn grad_f(
    residual: &ScalarField,
    p: &ParamPair,
    setup: &ProblemSetup,
) -> Result<ScalarField, OperatorError> {
    let op = StepOperator::assemble(&setup.a, &p.c)?;
    Ok(op.apply_adjoint_final(residual, None)?.grad_f)
}

/// (A′_f(c))* applied to a data-space residual; recomputes the forward
/// trajectory at `p`.
pub fn grad_c(
    residual: &ScalarField,
    p: &ParamPair,
    setup: &ProblemSetup,
) -> Result<ScalarField, OperatorError> {
    let lin = Linearization::at(&p.c, &p.f, setup)?;
    lin.grad_c(residual)
}

/// Result of the power-iteration step-size rule.
#[derive(Debug, Clone, Copy)]
pub struct GammaEstimate {
    /// Recommended Landweber step 0.9/‖F′‖².
    pub gamma: f64,
    /// Estimated operator norm ‖F′‖.
    pub norm_f_prime: f64,
    /// The conservative semigroup fallback 0.9·T⁻².
    pub conservative_gamma: f64,
    pub iterations_used: usize,
    /// False when the power iteration failed to settle and the conservative
    /// value was returned instead.
    pub converged: bool,
}

/// Estimates ‖F′‖² by power iteration on h ↦ (F′)*(F′ h) and returns
/// γ = 0.9/‖F′‖². Deterministic (fixed internal seed). Falls back to the
/// conservative 0.9·T⁻² when the iteration does not settle.
pub fn estimate_step_gamma(
    p: &ParamPair,
    setup: &ProblemSetup,
    iterations: usize,
) -> Result<GammaEstimate, OperatorError> {
    if iterations < 5 {
        return Err(OperatorError::InvalidParameter {
            name: "iterations",
            message: format!("power iteration needs ≥ 5 iterations, got {iterations}"),
        });
    }
    let op = StepOperator::assemble(&setup.a, &p.c)?;
    let grid_ref = &setup.grid;
    let t_final = grid_ref.final_time();
    let conservative_gamma = 0.9 / (t_final * t_final);

    let mut rng = ChaCha8Rng::seed_from_u64(0x9e3779b9);
    let mut h = random_zero_boundary(grid_ref, &mut rng);
    let norm = grid::l2_norm(&h);
    if norm == 0.0 {
        return Ok(GammaEstimate {
            gamma: conservative_gamma,
            norm_f_prime: f64::NAN,
            conservative_gamma,
            iterations_used: 0,
            converged: false,
        });
    }
    h = h.scale(1.0 / norm);

    let mut sigma_sq = 0.0_f64;
    let mut converged = false;
    let mut used = 0;
    for it in 0..iterations {
        used = it + 1;
        let v = op.solve_sensitivity_f(&h)?;
        let w = op.apply_adjoint_final(&v, None)?.grad_f;
        let rayleigh = grid::l2_inner(&h, &w)?;
        let w_norm = grid::l2_norm(&w);
        if w_norm <= f64::MIN_POSITIVE {
            break;
        }
        if it > 0 && (rayleigh - sigma_sq).abs() <= 1e-8 * rayleigh.abs() {
            sigma_sq = rayleigh;
            converged = true;
            break;
        }
        sigma_sq = rayleigh;
        h = w.scale(1.0 / w_norm);
        if it == iterations - 1 {
            // Ran the full budget; accept the last Rayleigh quotient.
            converged = true;
        }
    }
    if !converged || sigma_sq <= 0.0 {
        return Ok(GammaEstimate {
            gamma: conservative_gamma,
            norm_f_prime: f64::NAN,
            conservative_gamma,
            iterations_used: used,
            converged: false,
        });
    }
    Ok(GammaEstimate {
        gamma: 0.9 / sigma_sq,
        norm_f_prime: sigma_sq.sqrt(),
        conservative_gamma,
        iterations_used: used,
        converged: true,
    })
}

/// Empirical tangential-cone constants from random perturbations.
#[derive(Debug, Clone, Copy)]
pub struct EtaEstimate {
    /// Max observed Taylor-remainder ratio for the reaction map A_f.
    pub eta_c: f64,
    /// Max observed ratio for the source map F_c (zero up to round-off).
    pub eta_f: f64,
    pub samples_used: usize,
    /// Perturbation sizes actually used, reported in both norms the bound
    /// could be read in.
    pub max_perturbation_l2: f64,
    pub max_perturbation_linf: f64,
}

/// Samples the Taylor-remainder ratio
/// ‖A_f(c̃) − A_f(c) − A′_f(c)(c̃ − c)‖ / ‖A_f(c̃) − A_f(c)‖ over random
/// admissible perturbations with ‖c̃ − c‖_{L²} ≈ `radius`, and the analogous
/// ratio for F_c. Degenerate denominators (< 1e-14) are skipped.
pub fn estimate_eta(
    p_center: &ParamPair,
    radius: f64,
    samples: usize,
    setup: &ProblemSetup,
    seed: u64,
) -> Result<EtaEstimate, OperatorError> {
    if samples < 1 {
        return Err(OperatorError::InvalidParameter {
            name: "samples",
            message: "need ≥ 1 sample".into(),
        });
    }
    if !(radius > 0.0) {
        return Err(OperatorError::InvalidParameter {
            name: "radius",
            message: format!("radius must be > 0, got {radius}"),
        });
    }
    let lin = Linearization::at(&p_center.c, &p_center.f, setup)?;
    let base = lin.final_state().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut eta_c = 0.0_f64;
    let mut eta_f = 0.0_f64;
    let mut used = 0;
    let mut skipped = 0;
    let mut max_l2 = 0.0_f64;
    let mut max_inf = 0.0_f64;
    for _ in 0..samples {
        let draw = random_zero_boundary(&setup.grid, &mut rng);
        let norm = grid::l2_norm(&draw);
        if norm == 0.0 {
            skipped += 1;
            continue;
        }
        let kappa = draw.scale(radius / norm);
        // Keep the perturbed coefficient admissible; the effective direction
        // is whatever survives the projection.
        let c_tilde = p_center.bounds.project_c(&p_center.c.add(&kappa)?);
        let kappa_eff = c_tilde.sub(&p_center.c)?;
        let diff = apply_a_f(&c_tilde, &p_center.f, setup)?.sub(&base)?;
        let denom = grid::l2_norm(&diff);
        if denom < 1e-14 {
            skipped += 1;
            continue;
        }
        let linear = lin.sensitivity_c(&kappa_eff)?;
        let remainder = grid::l2_norm(&diff.sub(&linear)?);
        eta_c = eta_c.max(remainder / denom);
        max_l2 = max_l2.max(grid::l2_norm(&kappa_eff));
        max_inf = max_inf.max(kappa_eff.max_abs());

        // Source map: affine, so the remainder is round-off.
        let h = random_zero_boundary(&setup.grid, &mut rng);
        let h_norm = grid::l2_norm(&h);
        if h_norm == 0.0 {
            skipped += 1;
            continue;
        }
        let h = h.scale(radius / h_norm);
        let f_tilde = p_center.f.add(&h)?;
        let diff_f = apply_f_c(&f_tilde, &p_center.c, setup)?.sub(&base)?;
        let denom_f = grid::l2_norm(&diff_f);
        if denom_f < 1e-14 {
            skipped += 1;
            continue;
        }
        let linear_f = lin.sensitivity_f(&h)?;
        let remainder_f = grid::l2_norm(&diff_f.sub(&linear_f)?);
        eta_f = eta_f.max(remainder_f / denom_f);
        used += 1;
    }
    if used == 0 {
        return Err(OperatorError::DegenerateSamples { skipped });
    }
    Ok(EtaEstimate {
        eta_c,
        eta_f,
        samples_used: used,
        max_perturbation_l2: max_l2,
        max_perturbation_linf: max_inf,
    })
}

/// White noise over interior nodes, zero on the boundary.
pub(crate) fn random_zero_boundary(grid: &Arc<GridSpec>, rng: &mut ChaCha8Rng) -> ScalarField {
    let values = (0..grid.node_count())
        .map(|idx| {
            if grid.is_boundary(idx) {
                0.0
            } else {
                rng.gen_range(-1.0..1.0)
            }
        })
        .collect();
    ScalarField::new(Arc::clone(grid), values).expect("draw is finite")
}

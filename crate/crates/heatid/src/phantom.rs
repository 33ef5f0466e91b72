//! Synthetic-problem factory: the Pennes bioheat reduction, tumor phantoms,
//! exactly-calibrated measurement noise, and the constructive uniqueness /
//! non-uniqueness witnesses.
//!
//! The bioheat model
//!
//! ```text
//! ρ C_p U_t − ∇·(a∇U) − ω_b ρ_b c_b (Q₀ − U) = Q_m
//! ```
//!
//! reduces, after shifting by the arterial temperature (u = U − Q₀) and
//! dividing by ρC_p, to the reaction-diffusion form with c = ω_b ρ_b c_b/(ρC_p)
//! and f = Q_m/(ρC_p): identifying (c, f) identifies perfusion and metabolic
//! heat. A tumor is a smooth local elevation of both.

use std::sync::Arc;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::grid::{self, GridError, GridSpec, ScalarField};
use crate::operators::{AdmissibleBox, OperatorError, ParamPair};
use crate::pde::{PdeError, StepOperator};

/// Artifact default: tumor radius as a fraction of the unit square.
pub const DEFAULT_TUMOR_RADIUS: f64 = 0.15;
/// Artifact default: perfusion elevation inside the tumor.
pub const DEFAULT_PERFUSION_CONTRAST: f64 = 3.0;
/// Artifact default: metabolic elevation inside the tumor.
pub const DEFAULT_METABOLIC_CONTRAST: f64 = 2.0;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid {name}: {message}")]
    InvalidParameter { name: &'static str, message: String },
    #[error("tumor inclusion touches the domain boundary (center {center:?}, radius {radius})")]
    TouchesBoundary { center: (f64, f64), radius: f64 },
    #[error("noise draw degenerated to zero after {attempts} attempts")]
    DegenerateNoise { attempts: usize },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Pde(#[from] PdeError),
    #[error(transparent)]
    Operator(#[from] OperatorError),
}

fn require_positive(name: &'static str, v: f64) -> Result<(), PhantomError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(PhantomError::InvalidParameter {
            name,
            message: format!("must be > 0, got {v}"),
        })
    }
}

/// Physical parameters of the Pennes bioheat model (nondimensional units).
#[derive(Debug, Clone)]
pub struct PennesParams {
    /// Tissue density.
    pub rho: f64,
    /// Tissue specific heat.
    pub c_p: f64,
    /// Blood density.
    pub rho_b: f64,
    /// Blood specific heat.
    pub c_b: f64,
    /// Blood perfusion rate (spacewise).
    pub omega_b: ScalarField,
    /// Metabolic heat generation (spacewise).
    pub q_m: ScalarField,
    /// Supplying arterial blood temperature.
    pub q0: f64,
    /// Thermal conductivity (spacewise).
    pub a: ScalarField,
}

impl PennesParams {
    pub fn new(
        rho: f64,
        c_p: f64,
        rho_b: f64,
        c_b: f64,
        omega_b: ScalarField,
        q_m: ScalarField,
        q0: f64,
        a: ScalarField,
    ) -> Result<Self, PhantomError> {
        require_positive("rho", rho)?;
        require_positive("c_p", c_p)?;
        require_positive("rho_b", rho_b)?;
        require_positive("c_b", c_b)?;
        if !q0.is_finite() {
            return Err(PhantomError::InvalidParameter {
                name: "q0",
                message: format!("must be finite, got {q0}"),
            });
        }
        if omega_b.min_value() <= 0.0 {
            return Err(PhantomError::InvalidParameter {
                name: "omega_b",
                message: format!(
                    "perfusion must stay above a positive floor, min is {}",
                    omega_b.min_value()
                ),
            });
        }
        if q_m.min_value() < 0.0 {
            return Err(PhantomError::InvalidParameter {
                name: "q_m",
                message: format!("metabolic heat must be ≥ 0, min is {}", q_m.min_value()),
            });
        }
        if a.min_value() <= 0.0 {
            return Err(PhantomError::InvalidParameter {
                name: "a",
                message: format!("conductivity must be > 0, min is {}", a.min_value()),
            });
        }
        if !omega_b.grid().same_as(q_m.grid()) || !omega_b.grid().same_as(a.grid()) {
            return Err(GridError::GridMismatch.into());
        }
        Ok(Self {
            rho,
            c_p,
            rho_b,
            c_b,
            omega_b,
            q_m,
            q0,
            a,
        })
    }

    /// Unit tissue/blood constants on constant perfusion, metabolism, and
    /// conductivity fields.
    pub fn uniform(
        grid: &Arc<GridSpec>,
        omega_b: f64,
        q_m: f64,
        q0: f64,
        a: f64,
    ) -> Result<Self, PhantomError> {
        Self::new(
            1.0,
            1.0,
            1.0,
            1.0,
            ScalarField::constant(grid, omega_b)?,
            ScalarField::constant(grid, q_m)?,
            q0,
            ScalarField::constant(grid, a)?,
        )
    }
}

/// The reduced reaction-diffusion coefficients plus the affine temperature
/// map linking tissue temperature U and shifted state u = U − Q₀.
#[derive(Debug, Clone)]
pub struct ModelReduction {
    /// Effective diffusivity a/(ρC_p).
    pub a: ScalarField,
    /// Reaction coefficient ω_b ρ_b c_b/(ρC_p).
    pub c: ScalarField,
    /// Source Q_m/(ρC_p).
    pub f: ScalarField,
    /// Arterial temperature (the shift).
    pub q0: f64,
    /// Volumetric heat capacity ρC_p the equation was divided by.
    pub heat_capacity: f64,
}

impl ModelReduction {
    /// u ↦ U = u + Q₀.
    pub fn to_tissue_temperature(&self, u: &ScalarField) -> ScalarField {
        u.map(|v| v + self.q0).expect("shift keeps values finite")
    }

    /// U ↦ u = U − Q₀.
    pub fn from_tissue_temperature(&self, big_u: &ScalarField) -> ScalarField {
        big_u.map(|v| v - self.q0).expect("shift keeps values finite")
    }
}

/// Maps Pennes parameters to the model coefficients. With unit constants,
/// c = ω_b and f = Q_m exactly.
pub fn pennes_to_model(p: &PennesParams, grid: &Arc<GridSpec>) -> Result<ModelReduction, PhantomError> {
    if !p.omega_b.grid().same_as(grid) {
        return Err(GridError::GridMismatch.into());
    }
    let heat_capacity = p.rho * p.c_p;
    let perfusion_scale = p.rho_b * p.c_b / heat_capacity;
    Ok(ModelReduction {
        a: p.a.scale(1.0 / heat_capacity),
        c: p.omega_b.scale(perfusion_scale),
        f: p.q_m.scale(1.0 / heat_capacity),
        q0: p.q0,
        heat_capacity,
    })
}

/// Geometry and strength of a tumor inclusion.
#[derive(Debug, Clone, Copy)]
pub struct TumorSpec {
    /// Center coordinates in Ω (y ignored in 1D).
    pub center: (f64, f64),
    /// Support radius of the inclusion.
    pub radius: f64,
    /// Perfusion elevation factor inside (≥ 1).
    pub perfusion_contrast: f64,
    /// Metabolic elevation factor inside (≥ 1).
    pub metabolic_contrast: f64,
    /// Width of the mollified edge (0 gives a sharp indicator).
    pub smoothing_width: f64,
}

impl TumorSpec {
    pub fn validate(&self, grid: &GridSpec) -> Result<(), PhantomError> {
        require_positive("radius", self.radius)?;
        for (name, v) in [
            ("perfusion_contrast", self.perfusion_contrast),
            ("metabolic_contrast", self.metabolic_contrast),
        ] {
            if !(v >= 1.0) || !v.is_finite() {
                return Err(PhantomError::InvalidParameter {
                    name,
                    message: format!("contrast factor must be ≥ 1, got {v}"),
                });
            }
        }
        if !(self.smoothing_width >= 0.0) {
            return Err(PhantomError::InvalidParameter {
                name: "smoothing_width",
                message: format!("must be ≥ 0, got {}", self.smoothing_width),
            });
        }
        let centers = [self.center.0, self.center.1];
        for axis in 0..grid.dim() {
            let c = centers[axis];
            if c - self.radius <= 0.0 || c + self.radius >= grid.extent(axis) {
                return Err(PhantomError::TouchesBoundary {
                    center: self.center,
                    radius: self.radius,
                });
            }
        }
        Ok(())
    }

    /// Mollified indicator: 1 deep inside, 0 at the support radius, a cubic
    /// smoothstep over the last `smoothing_width`.
    pub fn blend(&self, grid: &GridSpec, x: f64, y: f64) -> f64 {
        let dx = x - self.center.0;
        let dy = if grid.dim() == 2 { y - self.center.1 } else { 0.0 };
        let dist = (dx * dx + dy * dy).sqrt();
        if dist >= self.radius {
            return 0.0;
        }
        if self.smoothing_width == 0.0 || dist <= self.radius - self.smoothing_width {
            return 1.0;
        }
        let t = (self.radius - dist) / self.smoothing_width;
        t * t * (3.0 - 2.0 * t)
    }
}

/// A manufactured thermography scenario: Pennes parameters with the tumor
/// applied, their model reduction, and the admissible true pair.
#[derive(Debug, Clone)]
pub struct TumorPhantom {
    pub params: PennesParams,
    pub reduction: ModelReduction,
    pub truth: ParamPair,
}

/// Elevates background perfusion and metabolism inside the inclusion,
/// blending with the mollified indicator.
pub fn make_tumor_phantom(
    spec: &TumorSpec,
    background: &PennesParams,
    grid: &Arc<GridSpec>,
    bounds: AdmissibleBox,
) -> Result<TumorPhantom, PhantomError> {
    spec.validate(grid)?;
    if !background.omega_b.grid().same_as(grid) {
        return Err(GridError::GridMismatch.into());
    }
    let elevate = |field: &ScalarField, contrast: f64| -> Result<ScalarField, PhantomError> {
        let values = field
            .values()
            .iter()
            .enumerate()
            .map(|(idx, &bg)| {
                let (x, y) = grid.coords(idx);
                bg * (1.0 + (contrast - 1.0) * spec.blend(grid, x, y))
            })
            .collect();
        Ok(ScalarField::new(Arc::clone(grid), values)?)
    };
    let omega_b = elevate(&background.omega_b, spec.perfusion_contrast)?;
    let q_m = elevate(&background.q_m, spec.metabolic_contrast)?;
    let params = PennesParams::new(
        background.rho,
        background.c_p,
        background.rho_b,
        background.c_b,
        omega_b,
        q_m,
        background.q0,
        background.a.clone(),
    )?;
    let reduction = pennes_to_model(&params, grid)?;
    let truth = ParamPair::new(reduction.c.clone(), reduction.f.clone(), bounds)?;
    Ok(TumorPhantom {
        params,
        reduction,
        truth,
    })
}

/// Corrupts a measurement with filtered white noise of exact L² size δ:
/// ‖g − g^δ‖ = δ (equality, so δ-sweeps are honest), zero boundary trace,
/// deterministic per seed.
pub fn add_noise(g: &ScalarField, delta: f64, seed: u64) -> Result<ScalarField, PhantomError> {
    if !(delta >= 0.0) || !delta.is_finite() {
        return Err(PhantomError::InvalidParameter {
            name: "delta",
            message: format!("noise level must be ≥ 0, got {delta}"),
        });
    }
    if delta == 0.0 {
        return Ok(g.clone());
    }
    let grid_ref = g.grid();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for attempt in 0..8 {
        let mut draw: Vec<f64> = (0..grid_ref.node_count())
            .map(|idx| {
                if grid_ref.is_boundary(idx) {
                    0.0
                } else {
                    rng.gen_range(-1.0..1.0)
                }
            })
            .collect();
        smooth_once(grid_ref, &mut draw);
        let noise = ScalarField::new(Arc::clone(grid_ref), draw)?.with_zero_boundary();
        let norm = grid::l2_norm(&noise);
        if norm > 0.0 {
            return Ok(g.axpy(delta / norm, &noise)?);
        }
        // Degenerate draw: move to the next substream of the same seed.
        rng.set_stream(attempt as u64 + 1);
    }
    Err(PhantomError::DegenerateNoise { attempts: 8 })
}

/// One tensor pass of a [1/4, 1/2, 1/4] filter over interior nodes.
fn smooth_once(grid: &GridSpec, values: &mut [f64]) {
    let (nx, ny) = (grid.nx(), grid.ny());
    for axis in 0..grid.dim() {
        let stride = if axis == 0 { 1 } else { nx };
        let prev = values.to_vec();
        for j in 0..ny {
            for i in 0..nx {
                let idx = grid.index(i, j);
                if grid.is_boundary(idx) {
                    continue;
                }
                values[idx] =
                    0.25 * prev[idx - stride] + 0.5 * prev[idx] + 0.25 * prev[idx + stride];
            }
        }
    }
}

/// L² distance between the forward maps of two coefficient/source pairs.
pub fn forward_gap(
    a: &ScalarField,
    phi: &ScalarField,
    first: (&ScalarField, &ScalarField),
    second: (&ScalarField, &ScalarField),
) -> Result<f64, PhantomError> {
    let op1 = StepOperator::assemble(a, first.0)?;
    let g1 = op1.solve_forward_final(first.1, phi)?;
    let op2 = StepOperator::assemble(a, second.0)?;
    let g2 = op2.solve_forward_final(second.1, phi)?;
    Ok(grid::l2_norm(&g1.sub(&g2)?))
}

/// The computable face of the uniqueness theorem: distinct admissible pairs
/// with non-stationary data produce a data gap far above discretization
/// error.
#[derive(Debug, Clone, Copy)]
pub struct UniquenessReport {
    /// ‖𝔽(c₁,f₁) − 𝔽(c₂,f₂)‖.
    pub gap: f64,
    /// 10× the time-step-halving error estimate.
    pub floor: f64,
    /// The raw halving estimate.
    pub discretization_estimate: f64,
    pub distinguishable: bool,
}

/// Solves both forward problems and compares their final states against a
/// data-distinguishability floor (10× a step-halving error estimate).
#[allow(clippy::too_many_arguments)]
pub fn uniqueness_witness(
    grid: &Arc<GridSpec>,
    a: &ScalarField,
    c1: &ScalarField,
    c2: &ScalarField,
    f1: &ScalarField,
    f2: &ScalarField,
    phi: &ScalarField,
) -> Result<UniquenessReport, PhantomError> {
    let gap = forward_gap(a, phi, (c1, f1), (c2, f2))?;

    // Error estimate: rerun both pairs with half the time steps and take the
    // larger drift; backward Euler is O(Δt), so the drift is of the size of
    // the error itself.
    let half = GridSpec::build(
        grid.dim(),
        &(0..grid.dim()).map(|ax| grid.extent(ax)).collect::<Vec<_>>(),
        &if grid.dim() == 1 {
            vec![grid.nx()]
        } else {
            vec![grid.nx(), grid.ny()]
        },
        grid.final_time(),
        (grid.time_steps() / 2).max(1),
    )?;
    let on_half = |field: &ScalarField| -> Result<ScalarField, PhantomError> {
        Ok(ScalarField::new(Arc::clone(&half), field.values().to_vec())?)
    };
    let mut estimate = 0.0_f64;
    for (c, f) in [(c1, f1), (c2, f2)] {
        let op_full = StepOperator::assemble(a, c)?;
        let g_full = op_full.solve_forward_final(f, phi)?;
        let op_half = StepOperator::assemble(&on_half(a)?, &on_half(c)?)?;
        let g_half = op_half.solve_forward_final(&on_half(f)?, &on_half(phi)?)?;
        let drift = g_full
            .values()
            .iter()
            .zip(g_half.values())
            .enumerate()
            .map(|(idx, (&x, &y))| grid.quad_weight(idx) * (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        estimate = estimate.max(drift);
    }
    let floor = 10.0 * estimate;
    Ok(UniquenessReport {
        gap,
        floor,
        discretization_estimate: estimate,
        distinguishable: gap >= floor,
    })
}

/// Two distinct admissible pairs sharing one discretely-stationary state, so
/// their final data agree to solver round-off: the g = φ failure mode of the
/// uniqueness hypothesis.
#[derive(Debug, Clone)]
pub struct NonuniquenessReport {
    pub pair1: (ScalarField, ScalarField),
    pub pair2: (ScalarField, ScalarField),
    /// The shared stationary state, also the initial condition.
    pub steady_state: ScalarField,
    /// ‖𝔽(pair1) − 𝔽(pair2)‖; expected at round-off scale.
    pub gap: f64,
    /// ‖κ‖, the size of the coefficient difference the data cannot see.
    pub kappa_norm: f64,
    /// ‖𝔽(pair1) − φ‖, how exactly the discrete steady state is preserved.
    pub steady_residual: f64,
}

/// Builds the stationary witness: u_s a product of sines, f₁ = A_h u_s from
/// the *discrete* operator (so stationarity is exact at the discrete level),
/// and the shifted pair (c + κ, f₁ + κ·u_s) with the same steady state.
pub fn nonuniqueness_witness(
    grid: &Arc<GridSpec>,
    a: &ScalarField,
    c: &ScalarField,
    kappa: &ScalarField,
    bounds: &AdmissibleBox,
) -> Result<NonuniquenessReport, PhantomError> {
    let u_s = product_of_sines(grid)?;
    let op = StepOperator::assemble(a, c)?;
    let f1 = op.apply_elliptic(&u_s)?;
    let c2 = c.add(kappa)?;
    if !bounds.contains_c(&c2) {
        return Err(OperatorError::OutsideBox {
            name: "c",
            value: f64::NAN,
            lower: bounds.c_lower,
            upper: bounds.c_upper,
        }
        .into());
    }
    let f2 = f1.add(&kappa.mul(&u_s)?)?;

    let g1 = op.solve_forward_final(&f1, &u_s)?;
    let op2 = StepOperator::assemble(a, &c2)?;
    let g2 = op2.solve_forward_final(&f2, &u_s)?;
    let gap = grid::l2_norm(&g1.sub(&g2)?);
    let steady_residual = grid::l2_norm(&g1.sub(&u_s)?);
    Ok(NonuniquenessReport {
        pair1: (c.clone(), f1),
        pair2: (c2, f2),
        steady_state: u_s,
        gap,
        kappa_norm: grid::l2_norm(kappa),
        steady_residual,
    })
}

/// sin(πx/Lx) (times sin(πy/Ly) in 2D): positive inside, zero on the
/// boundary.
pub fn product_of_sines(grid: &Arc<GridSpec>) -> Result<ScalarField, PhantomError> {
    use std::f64::consts::PI;
    let lx = grid.extent(0);
    let field = if grid.dim() == 1 {
        ScalarField::from_fn(grid, |x, _| (PI * x / lx).sin())?
    } else {
        let ly = grid.extent(1);
        ScalarField::from_fn(grid, |x, y| (PI * x / lx).sin() * (PI * y / ly).sin())?
    };
    Ok(field.with_zero_boundary())
}

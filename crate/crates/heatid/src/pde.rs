//! Implicit time stepping for the forward parabolic problem, the two
//! sensitivity equations, and the exact discrete adjoint.
//!
//! The spatial operator A_h discretizes −∇·(a∇u) + c·u with a 3-point (1D) /
//! 5-point (2D) finite-volume stencil, harmonic averaging of the diffusivity
//! at cell faces, and eliminated homogeneous Dirichlet rows. Time stepping is
//! backward Euler,
//!
//! ```text
//! (I + Δt·A_h) u^{m+1} = u^m + Δt·f,   u⁰ = φ,
//! ```
//!
//! which is unconditionally stable and keeps (I + Δt·A_h) an M-matrix, so the
//! discrete solution inherits the contraction and positivity properties of
//! the continuous semigroup.
//!
//! The adjoint is the transpose of the assembled discrete map — the factored
//! step is reused in reverse order — so the inner-product identity
//! ⟨F′h, r⟩ = ⟨h, G_f⟩ holds to round-off by construction rather than up to a
//! discretization error of a separately discretized adjoint PDE.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use thiserror::Error;

use crate::grid::{GridError, GridSpec, ScalarField, Trajectory};
use crate::linalg::{BandCholesky, LinalgError, SymBandMatrix};

#[derive(Debug, Error)]
pub enum PdeError {
    /// A coefficient violates its positivity requirement.
    #[error("inadmissible coefficient {name}: minimum {min} violates the bound {bound}")]
    Admissibility {
        name: &'static str,
        min: f64,
        bound: f64,
    },
    /// The initial state does not vanish on the boundary.
    #[error("initial state must vanish on the boundary (max |φ| there is {max_boundary})")]
    NonzeroBoundary { max_boundary: f64 },
    #[error(transparent)]
    Grid(#[from] GridError),
    /// Factorization of the implicit step failed; impossible for admissible
    /// coefficients, so this signals corrupted inputs.
    #[error("implicit step factorization failed: {source}")]
    Factorization {
        #[source]
        source: LinalgError,
    },
}

/// The full coefficient/data bundle of the forward problem.
#[derive(Debug, Clone)]
pub struct Coefficients {
    pub a: ScalarField,
    pub c: ScalarField,
    pub f: ScalarField,
    pub phi: ScalarField,
}

impl Coefficients {
    /// Validates positivity of `a`, nonnegativity of `c`, shared grids, and
    /// the boundary trace of `phi` (which is then zeroed exactly).
    pub fn new(
        a: ScalarField,
        c: ScalarField,
        f: ScalarField,
        phi: ScalarField,
    ) -> Result<Self, PdeError> {
        let grid = a.grid().clone();
        for field in [&c, &f, &phi] {
            if !field.grid().same_as(&grid) {
                return Err(GridError::GridMismatch.into());
            }
        }
        check_diffusivity(&a)?;
        check_reaction(&c)?;
        let phi = checked_initial_state(phi)?;
        Ok(Self { a, c, f, phi })
    }

    pub fn grid(&self) -> &Arc<GridSpec> {
        self.a.grid()
    }
}

fn check_diffusivity(a: &ScalarField) -> Result<(), PdeError> {
    let min = a.min_value();
    if min <= 0.0 {
        return Err(PdeError::Admissibility {
            name: "a",
            min,
            bound: 0.0,
        });
    }
    Ok(())
}

fn check_reaction(c: &ScalarField) -> Result<(), PdeError> {
    // The solver itself only needs c ≥ 0 for an SPD step matrix; the strict
    // lower bound of the admissible set is enforced by the operator layer.
    let min = c.min_value();
    if min < 0.0 {
        return Err(PdeError::Admissibility {
            name: "c",
            min,
            bound: 0.0,
        });
    }
    Ok(())
}

/// Accepts an initial state whose boundary trace is zero up to round-off and
/// returns it with the boundary forced to exactly zero.
pub fn checked_initial_state(phi: ScalarField) -> Result<ScalarField, PdeError> {
    let tol = 1e-10 * (1.0 + phi.max_abs());
    let max_boundary = phi
        .values()
        .iter()
        .enumerate()
        .filter(|(idx, _)| phi.grid().is_boundary(*idx))
        .fold(0.0_f64, |m, (_, v)| m.max(v.abs()));
    if max_boundary > tol {
        return Err(PdeError::NonzeroBoundary { max_boundary });
    }
    Ok(phi.with_zero_boundary())
}

/// Assembled implicit step (I + Δt·A_h) with its Cholesky factor, plus the
/// stencil of A_h itself. Immutable after assembly; each solve owns its
/// working buffers, so one operator may serve many threads.
#[derive(Debug, Clone)]
pub struct StepOperator {
    grid: Arc<GridSpec>,
    /// interior ordinal -> full node index (lexicographic).
    interior: Vec<usize>,
    /// full node index -> interior ordinal (usize::MAX on the boundary).
    interior_of: Vec<usize>,
    nxi: usize,
    // Face conductances divided by h² and the reaction diagonal, per
    // interior node. Off-diagonals of A_h are the negated face values.
    west: Vec<f64>,
    east: Vec<f64>,
    south: Vec<f64>,
    north: Vec<f64>,
    reaction: Vec<f64>,
    chol: BandCholesky,
}

impl StepOperator {
    /// Assembles A_h from nodal diffusivity and reaction fields and factors
    /// the implicit step matrix.
    pub fn assemble(a: &ScalarField, c: &ScalarField) -> Result<Self, PdeError> {
        let grid = a.grid().clone();
        if !c.grid().same_as(&grid) {
            return Err(GridError::GridMismatch.into());
        }
        check_diffusivity(a)?;
        check_reaction(c)?;

        let (nx, ny) = (grid.nx(), grid.ny());
        let dim = grid.dim();
        let nxi = nx - 2;
        let n_int = grid.interior_count();

        let mut interior = Vec::with_capacity(n_int);
        let mut interior_of = vec![usize::MAX; grid.node_count()];
        for idx in 0..grid.node_count() {
            if !grid.is_boundary(idx) {
                interior_of[idx] = interior.len();
                interior.push(idx);
            }
        }

        let av = a.values();
        let cv = c.values();
        let harm = |p: f64, q: f64| 2.0 * p * q / (p + q);
        let ihx2 = 1.0 / (grid.hx() * grid.hx());
        let ihy2 = if dim == 2 {
            1.0 / (grid.hy() * grid.hy())
        } else {
            0.0
        };

        let mut west = vec![0.0; n_int];
        let mut east = vec![0.0; n_int];
        let mut south = vec![0.0; n_int];
        let mut north = vec![0.0; n_int];
        let mut reaction = vec![0.0; n_int];

        for (k, &idx) in interior.iter().enumerate() {
            let (i, j) = grid.ij(idx);
            west[k] = harm(av[grid.index(i - 1, j)], av[idx]) * ihx2;
            east[k] = harm(av[idx], av[grid.index(i + 1, j)]) * ihx2;
            if dim == 2 {
                south[k] = harm(av[grid.index(i, j - 1)], av[idx]) * ihy2;
                north[k] = harm(av[idx], av[grid.index(i, j + 1)]) * ihy2;
            }
            reaction[k] = cv[idx];
        }

        // Band matrix of I + Δt·A_h over interior nodes.
        let bandwidth = if dim == 1 { 1 } else { nxi };
        let dt = grid.dt();
        let mut m = SymBandMatrix::zeros(n_int, bandwidth);
        for (k, &idx) in interior.iter().enumerate() {
            let (i, j) = grid.ij(idx);
            let diag = west[k] + east[k] + south[k] + north[k] + reaction[k];
            m.set(0, k, 1.0 + dt * diag);
            if i + 1 < nx - 1 {
                // east neighbor is interior and sits at ordinal k + 1
                m.set(1, k, -dt * east[k]);
            }
            if dim == 2 && j + 1 < ny - 1 {
                m.set(nxi, k, -dt * north[k]);
            }
        }
        let chol = m
            .cholesky()
            .map_err(|source| PdeError::Factorization { source })?;

        Ok(Self {
            grid,
            interior,
            interior_of,
            nxi,
            west,
            east,
            south,
            north,
            reaction,
            chol,
        })
    }

    pub fn grid(&self) -> &Arc<GridSpec> {
        &self.grid
    }

    fn check_grid(&self, field: &ScalarField) -> Result<(), PdeError> {
        if field.grid().same_as(&self.grid) {
            Ok(())
        } else {
            Err(GridError::GridMismatch.into())
        }
    }

    /// Applies A_h to a full field; output boundary entries are zero.
    pub fn apply_elliptic(&self, u: &ScalarField) -> Result<ScalarField, PdeError> {
        self.check_grid(u)?;
        let vals = u.values();
        let mut out = vec![0.0; vals.len()];
        let nx = self.grid.nx();
        for (k, &idx) in self.interior.iter().enumerate() {
            let center = vals[idx];
            let mut acc = (self.west[k] + self.east[k] + self.south[k] + self.north[k]
                + self.reaction[k])
                * center;
            acc -= self.west[k] * vals[idx - 1];
            acc -= self.east[k] * vals[idx + 1];
            if self.grid.dim() == 2 {
                acc -= self.south[k] * vals[idx - nx];
                acc -= self.north[k] * vals[idx + nx];
            }
            out[idx] = acc;
        }
        Ok(ScalarField::from_computed(Arc::clone(&self.grid), out))
    }

    #[inline]
    fn gather(&self, field: &ScalarField, out: &mut [f64]) {
        for (k, &idx) in self.interior.iter().enumerate() {
            out[k] = field.values()[idx];
        }
    }

    fn scatter(&self, interior: &[f64]) -> ScalarField {
        let mut full = vec![0.0; self.grid.node_count()];
        for (k, &idx) in self.interior.iter().enumerate() {
            full[idx] = interior[k];
        }
        ScalarField::from_computed(Arc::clone(&self.grid), full)
    }

    /// One implicit step: solves (I + Δt·A_h) x = rhs in place.
    #[inline]
    fn step_solve(&self, rhs: &mut [f64]) {
        self.chol.solve_in_place(rhs);
    }

    fn run_forward(
        &self,
        f: &ScalarField,
        phi: &ScalarField,
        mut on_level: impl FnMut(usize, &[f64]),
    ) -> Result<Vec<f64>, PdeError> {
        self.check_grid(f)?;
        self.check_grid(phi)?;
        let n_int = self.interior.len();
        let dt = self.grid.dt();
        let mut state = vec![0.0; n_int];
        self.gather(phi, &mut state);
        let mut source = vec![0.0; n_int];
        self.gather(f, &mut source);
        for s in source.iter_mut() {
            *s *= dt;
        }
        on_level(0, &state);
        for m in 0..self.grid.time_steps() {
            for (st, src) in state.iter_mut().zip(&source) {
                *st += *src;
            }
            self.step_solve(&mut state);
            on_level(m + 1, &state);
        }
        Ok(state)
    }

    /// Forward solve keeping every time level. Snapshot 0 is `phi` exactly.
    pub fn solve_forward(
        &self,
        f: &ScalarField,
        phi: &ScalarField,
    ) -> Result<Trajectory, PdeError> {
        let phi = checked_initial_state(phi.clone())?;
        let mut snapshots: Vec<ScalarField> = Vec::with_capacity(self.grid.time_steps() + 1);
        let phi_clone = phi.clone();
        self.run_forward(f, &phi, |level, state| {
            if level == 0 {
                snapshots.push(phi_clone.clone());
            } else {
                snapshots.push(self.scatter(state));
            }
        })?;
        Ok(Trajectory::new(Arc::clone(&self.grid), snapshots)?)
    }

    /// Forward solve returning only u(·, T).
    pub fn solve_forward_final(
        &self,
        f: &ScalarField,
        phi: &ScalarField,
    ) -> Result<ScalarField, PdeError> {
        let phi = checked_initial_state(phi.clone())?;
        let final_state = self.run_forward(f, &phi, |_, _| {})?;
        Ok(self.scatter(&final_state))
    }

    /// Sensitivity of the final state with respect to the source: returns
    /// w(·,T) where w_t + A_h w = h and w(0) = 0. This is F′_c(f)·h for any
    /// f (the map is affine in the source).
    pub fn solve_sensitivity_f(&self, h: &ScalarField) -> Result<ScalarField, PdeError> {
        self.check_grid(h)?;
        let zero = ScalarField::zeros(&self.grid);
        let final_state = self.run_forward(h, &zero, |_, _| {})?;
        Ok(self.scatter(&final_state))
    }

    /// Directional derivative of the final state with respect to the
    /// reaction coefficient: returns w(·,T) where w_t + A_h w = −κ·u and
    /// w(0) = 0, with u the forward trajectory at the linearization point
    /// and the product taken at the implicit level m+1.
    pub fn solve_sensitivity_c(
        &self,
        kappa: &ScalarField,
        u_traj: &Trajectory,
    ) -> Result<ScalarField, PdeError> {
        self.check_grid(kappa)?;
        if !u_traj.grid().same_as(&self.grid) {
            return Err(GridError::GridMismatch.into());
        }
        let n_int = self.interior.len();
        let dt = self.grid.dt();
        let mut kv = vec![0.0; n_int];
        self.gather(kappa, &mut kv);
        let mut state = vec![0.0; n_int];
        for m in 0..self.grid.time_steps() {
            let u_next = u_traj.snapshot(m + 1).values();
            for (k, &idx) in self.interior.iter().enumerate() {
                state[k] -= dt * kv[k] * u_next[idx];
            }
            self.step_solve(&mut state);
        }
        Ok(self.scatter(&state))
    }

    /// Transpose of the discrete forward map applied to a data-space
    /// residual: the factored step is run in reverse order, accumulating the
    /// source gradient G_f = Δt·Σ_m V^m and, when the forward trajectory is
    /// supplied, the reaction gradient G_c = −Δt·Σ_m V^m ⊙ u^m.
    pub fn apply_adjoint_final(
        &self,
        r: &ScalarField,
        u_traj: Option<&Trajectory>,
    ) -> Result<AdjointGradients, PdeError> {
        self.check_grid(r)?;
        if let Some(traj) = u_traj {
            if !traj.grid().same_as(&self.grid) {
                return Err(GridError::GridMismatch.into());
            }
        }
        let n_int = self.interior.len();
        let dt = self.grid.dt();
        let mut lam = vec![0.0; n_int];
        self.gather(r, &mut lam);
        let mut acc_f = vec![0.0; n_int];
        let mut acc_c = u_traj.map(|_| vec![0.0; n_int]);
        for m in (1..=self.grid.time_steps()).rev() {
            self.step_solve(&mut lam);
            for (af, l) in acc_f.iter_mut().zip(&lam) {
                *af += *l;
            }
            if let (Some(acc), Some(traj)) = (acc_c.as_mut(), u_traj) {
                let u_m = traj.snapshot(m).values();
                for (k, &idx) in self.interior.iter().enumerate() {
                    acc[k] += lam[k] * u_m[idx];
                }
            }
        }
        for v in acc_f.iter_mut() {
            *v *= dt;
        }
        let grad_f = self.scatter(&acc_f);
        let grad_c = acc_c.map(|mut acc| {
            for v in acc.iter_mut() {
                *v *= -dt;
            }
            self.scatter(&acc)
        });
        Ok(AdjointGradients { grad_f, grad_c })
    }

    /// Bandwidth of the assembled step matrix (diagnostic).
    pub fn bandwidth(&self) -> usize {
        if self.grid.dim() == 1 {
            1
        } else {
            self.nxi
        }
    }
}

/// Output of the adjoint sweep.
#[derive(Debug, Clone)]
pub struct AdjointGradients {
    /// Adjoint of the source sensitivity applied to the residual.
    pub grad_f: ScalarField,
    /// Adjoint of the reaction sensitivity; present when the forward
    /// trajectory was supplied.
    pub grad_c: Option<ScalarField>,
}

/// Writes every `every`-th level of a trajectory as `u_<m>.csv` plus an
/// `index.csv` listing level and time, and returns the written paths.
pub fn dump_trajectory(
    traj: &Trajectory,
    dir: &Path,
    every: usize,
) -> Result<Vec<PathBuf>, PdeError> {
    let every = every.max(1);
    let dt = traj.grid().dt();
    let mut index = String::from("level,time\n");
    let mut paths = Vec::new();
    let last = traj.len() - 1;
    for m in (0..traj.len()).step_by(every).chain(std::iter::once(last)) {
        if paths
            .iter()
            .any(|p: &PathBuf| p.file_name().is_some_and(|n| n == format!("u_{m}.csv").as_str()))
        {
            continue;
        }
        let path = dir.join(format!("u_{m}.csv"));
        traj.snapshot(m).write_csv(&path)?;
        index.push_str(&format!("{m},{}\n", crate::grid::fmt_full(m as f64 * dt)));
        paths.push(path);
    }
    let index_path = dir.join("index.csv");
    std::fs::write(&index_path, index).map_err(|source| GridError::Io {
        path: index_path.display().to_string(),
        source,
    })?;
    paths.push(index_path);
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_grid, l2_inner, l2_norm};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn unit_line(n: usize, t: f64, m: usize) -> Arc<GridSpec> {
        build_grid(1, &[1.0], &[n], t, m).unwrap()
    }

    fn sine(grid: &Arc<GridSpec>, k: usize) -> ScalarField {
        ScalarField::from_fn(grid, |x, _| (k as f64 * PI * x).sin()).unwrap()
    }

    fn random_zero_boundary(grid: &Arc<GridSpec>, rng: &mut ChaCha8Rng) -> ScalarField {
        let values = (0..grid.node_count())
            .map(|idx| {
                if grid.is_boundary(idx) {
                    0.0
                } else {
                    rng.gen_range(-1.0..1.0)
                }
            })
            .collect();
        ScalarField::new(Arc::clone(grid), values).unwrap()
    }

    #[test]
    fn laplacian_stencil_on_unit_coefficients() {
        let g = unit_line(5, 1.0, 1);
        let a = ScalarField::constant(&g, 1.0).unwrap();
        let c = ScalarField::zeros(&g);
        let op = StepOperator::assemble(&a, &c).unwrap();
        let h2 = g.hx() * g.hx();
        // Unit vector at the center node exposes the matrix column.
        let mut e = vec![0.0; 5];
        e[2] = 1.0;
        let e = ScalarField::new(Arc::clone(&g), e).unwrap();
        let col = op.apply_elliptic(&e).unwrap();
        assert!((col.values()[2] - 2.0 / h2).abs() < 1e-12 / h2);
        assert!((col.values()[1] + 1.0 / h2).abs() < 1e-12 / h2);
        assert!((col.values()[3] + 1.0 / h2).abs() < 1e-12 / h2);
    }

    #[test]
    fn constant_reaction_shifts_the_diagonal() {
        let g = unit_line(7, 1.0, 1);
        let a = ScalarField::constant(&g, 1.0).unwrap();
        let gamma = 0.7;
        let c0 = ScalarField::zeros(&g);
        let cg = ScalarField::constant(&g, gamma).unwrap();
        let op0 = StepOperator::assemble(&a, &c0).unwrap();
        let opg = StepOperator::assemble(&a, &cg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = random_zero_boundary(&g, &mut rng);
        let d = opg
            .apply_elliptic(&u)
            .unwrap()
            .sub(&op0.apply_elliptic(&u).unwrap())
            .unwrap();
        let expected = u.scale(gamma).with_zero_boundary();
        assert!(d.sub(&expected).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn elliptic_operator_is_symmetric_in_the_weighted_inner_product() {
        let g = build_grid(2, &[1.0, 1.0], &[13, 11], 1.0, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = ScalarField::new(
            Arc::clone(&g),
            (0..g.node_count()).map(|_| rng.gen_range(0.5..2.0)).collect(),
        )
        .unwrap();
        let c = ScalarField::new(
            Arc::clone(&g),
            (0..g.node_count()).map(|_| rng.gen_range(0.1..1.0)).collect(),
        )
        .unwrap();
        let op = StepOperator::assemble(&a, &c).unwrap();
        for _ in 0..5 {
            let u = random_zero_boundary(&g, &mut rng);
            let v = random_zero_boundary(&g, &mut rng);
            let lhs = l2_inner(&op.apply_elliptic(&u).unwrap(), &v).unwrap();
            let rhs = l2_inner(&u, &op.apply_elliptic(&v).unwrap()).unwrap();
            assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs() + rhs.abs()));
        }
    }

    #[test]
    fn assemble_rejects_inadmissible_coefficients() {
        let g = unit_line(5, 1.0, 1);
        let a_bad = ScalarField::constant(&g, 0.0).unwrap();
        let c = ScalarField::constant(&g, 1.0).unwrap();
        assert!(matches!(
            StepOperator::assemble(&a_bad, &c),
            Err(PdeError::Admissibility { name: "a", .. })
        ));
        let a = ScalarField::constant(&g, 1.0).unwrap();
        let c_bad = ScalarField::constant(&g, -0.1).unwrap();
        assert!(matches!(
            StepOperator::assemble(&a, &c_bad),
            Err(PdeError::Admissibility { name: "c", .. })
        ));
    }

    #[test]
    fn forward_matches_separated_eigenmode_solution() {
        // u(x,t) = e^{−(π²+1)t} sin(πx) for a ≡ 1, c ≡ 1, f ≡ 0.
        let (t_final, n, m) = (0.1, 201, 400);
        let g = unit_line(n, t_final, m);
        let a = ScalarField::constant(&g, 1.0).unwrap();
        let c = ScalarField::constant(&g, 1.0).unwrap();
        let op = StepOperator::assemble(&a, &c).unwrap();
        let phi = sine(&g, 1);
        let f = ScalarField::zeros(&g);
        let u_final = op.solve_forward_final(&f, &phi).unwrap();
        let lambda = PI * PI + 1.0;
        let exact = phi.scale((-lambda * t_final).exp());
        let err = l2_norm(&u_final.sub(&exact).unwrap());
        assert!(err <= 2e-3, "L² error {err}");
    }

    #[test]
    fn manufactured_steady_state_is_preserved() {
        let g = unit_line(201, 0.1, 100);
        let a = ScalarField::constant(&g, 1.0).unwrap();
        let c = ScalarField::constant(&g, 1.0).unwrap();
        let op = StepOperator::assemble(&a, &c).unwrap();
        let phi = sine(&g, 1);
        let f = phi.scale(PI * PI + 1.0);
        let traj = op.solve_forward(&f, &phi).unwrap();
        for m in [1, traj.len() / 2, traj.len() - 1] {
            let err = traj.snapshot(m).sub(&phi).unwrap().max_abs();
            assert!(err <= 1e-3, "level {m} deviates by {err}");
        }
    }

    #[test]
    fn nonnegative_data_yield_nonnegative_solution() {
        let g = unit_line(101, 0.3, 60);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = ScalarField::new(
            Arc::clone(&g),
            (0..g.node_count()).map(|_| rng.gen_range(0.2..3.0)).collect(),
        )
        .unwrap();
        let c = ScalarField::new(
            Arc::clone(&g),
            (0..g.node_count()).map(|_| rng.gen_range(0.1..2.0)).collect(),
        )
        .unwrap();
        let op = StepOperator::assemble(&a, &c).unwrap();
        let phi = random_zero_boundary(&g, &mut rng).map(f64::abs).unwrap().with_zero_boundary();
        let f = ScalarField::zeros(&g);
        let traj = op.solve_forward(&f, &phi).unwrap();
        for snap in traj.iter() {
            assert!(snap.min_value() >= -1e-14);
        }
    }

    #[test]
    fn contraction_for_zero_source() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = unit_line(101, 0.2, 40);
        for _ in 0..5 {
            let a = ScalarField::new(
                Arc::clone(&g),
                (0..g.node_count()).map(|_| rng.gen_range(0.3..2.5)).collect(),
            )
            .unwrap();
            let c = ScalarField::new(
                Arc::clone(&g),
                (0..g.node_count()).map(|_| rng.gen_range(0.1..2.0)).collect(),
            )
            .unwrap();
            let op = StepOperator::assemble(&a, &c).unwrap();
            let phi = random_zero_boundary(&g, &mut rng);
            let f = ScalarField::zeros(&g);
            let u = op.solve_forward_final(&f, &phi).unwrap();
            assert!(l2_norm(&u) <= l2_norm(&phi) * (1.0 + 1e-13));
        }
    }

    #[test]
    fn source_sensitivity_matches_eigenmode_formula() {
        let (t_final, n, m, c0) = (0.1, 201, 400, 1.0);
        let g = unit_line(n, t_final, m);
        let a = ScalarField::constant(&g, 1.0).unwrap();
        let c = ScalarField::constant(&g, c0).unwrap();
        let op = StepOperator::assemble(&a, &c).unwrap();
        for k in 1..=3 {
            let h = sine(&g, k);
            let w = op.solve_sensitivity_f(&h).unwrap();
            let lambda = (k as f64 * PI).powi(2) + c0;
            let exact = h.scale((1.0 - (-lambda * t_final).exp()) / lambda);
            let rel = l2_norm(&w.sub(&exact).unwrap()) / l2_norm(&exact);
            assert!(rel <= 1e-2, "mode {k}: relative error {rel}");
        }
    }

    #[test]
    fn source_sensitivity_is_linear_and_vanishes_on_zero() {
        let g = unit_line(81, 0.1, 40);
        let a = ScalarField::constant(&g, 1.0).unwrap();
        let c = ScalarField::constant(&g, 0.5).unwrap();
        let op = StepOperator::assemble(&a, &c).unwrap();
        let zero = ScalarField::zeros(&g);
        assert_eq!(op.solve_sensitivity_f(&zero).unwrap().max_abs(), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h1 = random_zero_boundary(&g, &mut rng);
        let h2 = random_zero_boundary(&g, &mut rng);
        let (alpha, beta) = (0.7, -1.3);
        let combo = op
            .solve_sensitivity_f(&h1.scale(alpha).add(&h2.scale(beta)).unwrap())
            .unwrap();
        let separate = op
            .solve_sensitivity_f(&h1)
            .unwrap()
            .scale(alpha)
            .add(&op.solve_sensitivity_f(&h2).unwrap().scale(beta))
            .unwrap();
        let rel = l2_norm(&combo.sub(&separate).unwrap()) / l2_norm(&separate);
        assert!(rel <= 1e-12);
    }

    #[test]
    fn reaction_sensitivity_matches_finite_differences() {
        let g = unit_line(101, 0.1, 100);
        let a = ScalarField::constant(&g, 1.0).unwrap();
        let c = ScalarField::from_fn(&g, |x, _| 1.0 + 0.3 * (PI * x).sin()).unwrap();
        let op = StepOperator::assemble(&a, &c).unwrap();
        let phi = sine(&g, 1);
        let f = ScalarField::constant(&g, 2.0).unwrap();
        let traj = op.solve_forward(&f, &phi).unwrap();
        let kappa = ScalarField::from_fn(&g, |x, _| (2.0 * PI * x).sin() * x).unwrap();
        let w = op.solve_sensitivity_c(&kappa, &traj).unwrap();

        let base = traj.final_snapshot();
        let mut errors = Vec::new();
        for eps in [1e-2, 1e-3, 1e-4] {
            let c_eps = c.axpy(eps, &kappa).unwrap();
            let op_eps = StepOperator::assemble(&a, &c_eps).unwrap();
            let u_eps = op_eps.solve_forward_final(&f, &phi).unwrap();
            let fd = u_eps.sub(base).unwrap().scale(1.0 / eps);
            errors.push(l2_norm(&fd.sub(&w).unwrap()));
        }
        for pair in errors.windows(2) {
            let order = (pair[0] / pair[1]).log10();
            assert!(order >= 0.9, "observed order {order}");
        }
    }

    #[test]
    fn reaction_sensitivity_sign_and_zero_direction() {
        let g = unit_line(61, 0.2, 40);
        let a = ScalarField::constant(&g, 1.0).unwrap();
        let c = ScalarField::constant(&g, 1.0).unwrap();
        let op = StepOperator::assemble(&a, &c).unwrap();
        let phi = sine(&g, 1);
        let f = ScalarField::constant(&g, 1.0).unwrap();
        let traj = op.solve_forward(&f, &phi).unwrap();

        let zero = ScalarField::zeros(&g);
        assert_eq!(op.solve_sensitivity_c(&zero, &traj).unwrap().max_abs(), 0.0);

        // u > 0 in the interior; raising c must cool the body.
        let kappa = ScalarField::constant(&g, 0.5).unwrap();
        let w = op.solve_sensitivity_c(&kappa, &traj).unwrap();
        assert!(w.max_value() <= 1e-14);
        assert!(w.min_value() < 0.0);
    }

    #[test]
    fn adjoint_identity_for_both_gradients() {
        let g = unit_line(101, 0.1, 50);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = ScalarField::from_fn(&g, |x, _| 1.0 + 0.4 * x).unwrap();
        let c = ScalarField::from_fn(&g, |x, _| 0.8 + 0.5 * x * (1.0 - x)).unwrap();
        let op = StepOperator::assemble(&a, &c).unwrap();
        let phi = sine(&g, 1);
        let f = ScalarField::constant(&g, 1.5).unwrap();
        let traj = op.solve_forward(&f, &phi).unwrap();
        for _ in 0..10 {
            let h = random_zero_boundary(&g, &mut rng);
            let r = random_zero_boundary(&g, &mut rng);
            let grads = op.apply_adjoint_final(&r, Some(&traj)).unwrap();

            let lhs_f = l2_inner(&op.solve_sensitivity_f(&h).unwrap(), &r).unwrap();
            let rhs_f = l2_inner(&h, &grads.grad_f).unwrap();
            assert!((lhs_f - rhs_f).abs() <= 1e-11 * l2_norm(&h) * l2_norm(&r));

            let kappa = random_zero_boundary(&g, &mut rng);
            let lhs_c = l2_inner(&op.solve_sensitivity_c(&kappa, &traj).unwrap(), &r).unwrap();
            let rhs_c = l2_inner(&kappa, grads.grad_c.as_ref().unwrap()).unwrap();
            assert!((lhs_c - rhs_c).abs() <= 1e-11 * l2_norm(&kappa) * l2_norm(&r));
        }
    }

    #[test]
    fn adjoint_of_zero_residual_vanishes() {
        let g = unit_line(41, 0.1, 20);
        let a = ScalarField::constant(&g, 1.0).unwrap();
        let c = ScalarField::constant(&g, 1.0).unwrap();
        let op = StepOperator::assemble(&a, &c).unwrap();
        let phi = sine(&g, 1);
        let f = ScalarField::zeros(&g);
        let traj = op.solve_forward(&f, &phi).unwrap();
        let zero = ScalarField::zeros(&g);
        let grads = op.apply_adjoint_final(&zero, Some(&traj)).unwrap();
        assert_eq!(grads.grad_f.max_abs(), 0.0);
        assert_eq!(grads.grad_c.unwrap().max_abs(), 0.0);
    }

    #[test]
    fn adjoint_source_gradient_matches_eigenmode_formula() {
        // K(T) is self-adjoint for constant coefficients, so the adjoint on
        // an eigenmode reproduces the sensitivity's eigenvalue.
        let (t_final, n, m, c0) = (0.1, 201, 400, 1.0);
        let g = unit_line(n, t_final, m);
        let a = ScalarField::constant(&g, 1.0).unwrap();
        let c = ScalarField::constant(&g, c0).unwrap();
        let op = StepOperator::assemble(&a, &c).unwrap();
        let r = sine(&g, 1);
        let grads = op.apply_adjoint_final(&r, None).unwrap();
        let lambda = PI * PI + c0;
        let exact = r.scale((1.0 - (-lambda * t_final).exp()) / lambda);
        let rel = l2_norm(&grads.grad_f.sub(&exact).unwrap()) / l2_norm(&exact);
        assert!(rel <= 1e-2, "relative error {rel}");
    }

    #[test]
    fn backward_euler_converges_first_order_in_time() {
        let n = 201;
        let t_final = 0.1;
        let lambda = PI * PI + 1.0;
        let mut errors = Vec::new();
        for m in [25usize, 50, 100, 200] {
            let g = unit_line(n, t_final, m);
            let a = ScalarField::constant(&g, 1.0).unwrap();
            let c = ScalarField::constant(&g, 1.0).unwrap();
            let op = StepOperator::assemble(&a, &c).unwrap();
            let phi = sine(&g, 1);
            let f = ScalarField::zeros(&g);
            let u = op.solve_forward_final(&f, &phi).unwrap();
            let exact = phi.scale((-lambda * t_final).exp());
            errors.push(l2_norm(&u.sub(&exact).unwrap()));
        }
        for pair in errors.windows(2) {
            let order = (pair[0] / pair[1]).log2();
            assert!((0.75..=1.25).contains(&order), "time order {order}");
        }
    }

    #[test]
    fn stencil_converges_second_order_in_space() {
        // Refine with Δt ∝ h² so the O(Δt) time error scales like the O(h²)
        // space error and the combined order in h is 2.
        let t_final = 0.1;
        let lambda = PI * PI + 1.0;
        let mut errors = Vec::new();
        for (n, m) in [(26usize, 10usize), (51, 40), (101, 160)] {
            let g = unit_line(n, t_final, m);
            let a = ScalarField::constant(&g, 1.0).unwrap();
            let c = ScalarField::constant(&g, 1.0).unwrap();
            let op = StepOperator::assemble(&a, &c).unwrap();
            let phi = sine(&g, 1);
            let f = ScalarField::zeros(&g);
            let u = op.solve_forward_final(&f, &phi).unwrap();
            let exact = phi.scale((-lambda * t_final).exp());
            errors.push(l2_norm(&u.sub(&exact).unwrap()));
        }
        for pair in errors.windows(2) {
            let order = (pair[0] / pair[1]).log2();
            assert!((1.8..=2.2).contains(&order), "space order {order}");
        }
    }

    #[test]
    fn trajectory_dump_writes_selected_levels() {
        let dir = tempfile::tempdir().unwrap();
        let g = unit_line(11, 0.1, 10);
        let a = ScalarField::constant(&g, 1.0).unwrap();
        let c = ScalarField::constant(&g, 1.0).unwrap();
        let op = StepOperator::assemble(&a, &c).unwrap();
        let phi = sine(&g, 1);
        let f = ScalarField::zeros(&g);
        let traj = op.solve_forward(&f, &phi).unwrap();
        let paths = dump_trajectory(&traj, dir.path(), 5).unwrap();
        let names: Vec<String> = paths
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        assert!(names.contains(&"u_0.csv".to_string()));
        assert!(names.contains(&"u_5.csv".to_string()));
        assert!(names.contains(&"u_10.csv".to_string()));
        assert!(names.contains(&"index.csv".to_string()));
        let back = ScalarField::read_csv(&g, &dir.path().join("u_10.csv")).unwrap();
        assert_eq!(back.values(), traj.final_snapshot().values());
    }

    #[test]
    fn forward_2d_decays_like_the_two_dimensional_eigenmode() {
        let t_final = 0.1;
        let g = build_grid(2, &[1.0, 1.0], &[41, 41], t_final, 200).unwrap();
        let a = ScalarField::constant(&g, 1.0).unwrap();
        let c = ScalarField::constant(&g, 1.0).unwrap();
        let op = StepOperator::assemble(&a, &c).unwrap();
        let phi = ScalarField::from_fn(&g, |x, y| (PI * x).sin() * (PI * y).sin()).unwrap();
        let f = ScalarField::zeros(&g);
        let u = op.solve_forward_final(&f, &phi).unwrap();
        let lambda = 2.0 * PI * PI + 1.0;
        let exact = phi.scale((-lambda * t_final).exp());
        let rel = l2_norm(&u.sub(&exact).unwrap()) / l2_norm(&exact);
        assert!(rel <= 2e-2, "relative error {rel}");
    }
}

//! Semi-implicit second-order time stepping for inextensible fiber
//! suspensions.
//!
//! Each step solves, per fiber, the saddle-point system that couples the
//! constraint force density `λ` to the rotation-rate coefficients `α` at the
//! midpoint `t + Δt/2`, treating the local drag response to bending
//! implicitly and everything nonlocal explicitly through second-order
//! extrapolates `X* = 1.5 Xⁿ − 0.5 Xⁿ⁻¹` and `λ* = 2 λ^{n−1/2} − λ^{n−3/2}`.
//! The block-diagonal solve alone is second-order accurate; an optional
//! fixed-iteration GMRES correction on the stacked `(λ, α)` residual system
//! tightens the splitting error (which is already `O(Δt²)`) when fibers
//! interact strongly. Positions are updated by rotating tangents with the
//! midpoint angular velocity and integrating them spectrally, so nodal
//! tangent norms are preserved to rounding regardless of step size.

use crate::domain::ShearedDomain;
use crate::error::{FiberflowError, Result};
use crate::ewald::{self, EwaldPlan};
use crate::fiber::{
    apply_scalar_op, bending_matrix, flatten, unflatten, FiberParams, FiberState, Vec3Series,
};
use crate::kinematics::{
    apply_k, build_operators, compute_omega, rotate_and_integrate, KinematicOperators,
};
use crate::mobility::{self, StokesKernelParams};
use crate::near_quadrature::{
    corrected_interaction_velocity, interaction_velocity, NearFiberContext, NearQuadParams,
    UpsampledRule,
};
use crate::spectral::ChebWorkspace;
use nalgebra::{DMatrix, DVector, Vector3};
use rayon::prelude::*;

/// Relative singular-value cutoff for the per-fiber saddle solves. The
/// rotation-rate coordinates are rank-deficient (several `α` produce the
/// same velocity field), so every solve is a truncated-SVD least-squares
/// solve and the reported `α` is the minimum-norm representative.
const SADDLE_SVD_CUTOFF: f64 = 1e-10;

/// Startup steps are iterated to this relative residual so the multistep
/// histories are seeded with converged values.
const STARTUP_TOL: f64 = 1e-6;
const STARTUP_MAX_ITERS: usize = 200;

/// How the midpoint saddle system is solved each step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolveMode {
    /// One per-fiber solve with extrapolated nonlocal terms.
    BlockDiagonal,
    /// Block-diagonal solve followed by exactly `iters` GMRES iterations on
    /// the stacked residual system (never restarted; `iters = 0` reproduces
    /// the block-diagonal answer).
    Gmres { iters: usize },
}

/// Which nonlocal hydrodynamic interactions are evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HydroMode {
    /// Local anisotropic drag only; the nonlocal velocity is zero.
    LocalOnly,
    /// Intra-fiber finite-part term only (requires `finite_part`).
    IntraOnly,
    /// All fiber pairs summed directly in free space.
    FreeSpaceDirect,
    /// Periodic sums over a sheared unit cell via Ewald splitting.
    PeriodicEwald,
}

/// Imposed background flow.
#[derive(Clone, Copy, Debug)]
pub enum BackgroundFlow {
    Quiescent,
    Uniform(Vector3<f64>),
    /// `u(x, t) = γ̇₀ cos(ωt) (y, 0, 0)`; `ω = 0` gives steady shear.
    OscillatoryShear { gamma0: f64, omega: f64 },
}

impl BackgroundFlow {
    pub fn velocity(&self, x: &Vector3<f64>, t: f64) -> Vector3<f64> {
        match *self {
            BackgroundFlow::Quiescent => Vector3::zeros(),
            BackgroundFlow::Uniform(u) => u,
            BackgroundFlow::OscillatoryShear { gamma0, omega } => {
                Vector3::new(gamma0 * (omega * t).cos() * x.y, 0.0, 0.0)
            }
        }
    }

    /// Accumulated shear strain `g(t)`, which tilts the periodic cell.
    pub fn strain(&self, t: f64) -> f64 {
        match *self {
            BackgroundFlow::OscillatoryShear { gamma0, omega } => {
                if omega == 0.0 {
                    gamma0 * t
                } else {
                    gamma0 / omega * (omega * t).sin()
                }
            }
            _ => 0.0,
        }
    }

    pub fn shear_rate(&self, t: f64) -> f64 {
        match *self {
            BackgroundFlow::OscillatoryShear { gamma0, omega } => gamma0 * (omega * t).cos(),
            _ => 0.0,
        }
    }
}

/// External force densities evaluated at the midpoint extrapolates:
/// arguments are the extrapolated fiber states, the midpoint time, and the
/// midpoint cell strain; the result is one force density per node per fiber.
pub type ExternalForce<'a> = dyn Fn(&[FiberState], f64, f64) -> Vec<Vec<Vector3<f64>>> + 'a;

/// Evolving quantities: fiber states plus the histories the two-step
/// extrapolations need.
#[derive(Clone, Debug)]
pub struct StepperState {
    pub fibers: Vec<FiberState>,
    pub x_prev: Vec<Vec<Vector3<f64>>>,
    pub tau_prev: Vec<Vec<Vector3<f64>>>,
    /// `λ^{n−1/2}` per fiber (most recent midpoint solve).
    pub lambda: Vec<DVector<f64>>,
    /// `λ^{n−3/2}` per fiber.
    pub lambda_prev: Vec<DVector<f64>>,
    pub t: f64,
    /// Completed steps; the first two use startup iteration.
    pub step: usize,
}

impl StepperState {
    pub fn new(fibers: Vec<FiberState>) -> Self {
        let x_prev = fibers.iter().map(|f| f.x.clone()).collect();
        let tau_prev = fibers.iter().map(|f| f.tau.clone()).collect();
        let lambda = fibers
            .iter()
            .map(|f| DVector::zeros(3 * f.n()))
            .collect::<Vec<_>>();
        let lambda_prev = lambda.clone();
        StepperState {
            fibers,
            x_prev,
            tau_prev,
            lambda,
            lambda_prev,
            t: 0.0,
            step: 0,
        }
    }

    pub fn nfibers(&self) -> usize {
        self.fibers.len()
    }
}

/// Truncated-SVD factorization of one fiber's saddle matrix.
struct SaddleFactor {
    a: DMatrix<f64>,
    svd: nalgebra::SVD<f64, nalgebra::Dyn, nalgebra::Dyn>,
    cutoff: f64,
}

impl SaddleFactor {
    fn new(a: DMatrix<f64>) -> Result<Self> {
        let svd = nalgebra::SVD::try_new(a.clone(), true, true, f64::EPSILON, 0)
            .ok_or_else(|| FiberflowError::Numerical("saddle SVD did not converge".into()))?;
        let smax = svd.singular_values.max();
        if !smax.is_finite() || smax == 0.0 {
            return Err(FiberflowError::Numerical(
                "saddle matrix is singular or non-finite".into(),
            ));
        }
        let cutoff = SADDLE_SVD_CUTOFF * smax;
        Ok(SaddleFactor { a, svd, cutoff })
    }

    /// Minimum-norm least-squares solve.
    fn solve(&self, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        self.svd
            .solve(rhs, self.cutoff)
            .map_err(|e| FiberflowError::Numerical(format!("saddle solve failed: {e}")))
    }

    fn relative_residual(&self, sol: &DVector<f64>, rhs: &DVector<f64>) -> f64 {
        let r = &self.a * sol - rhs;
        r.norm() / rhs.norm().max(f64::MIN_POSITIVE)
    }
}

/// Everything frozen at the midpoint of one step: extrapolated geometry,
/// kinematic operators, factored saddle blocks, extrapolated constraint
/// forces, background flow samples, and external force densities.
pub struct MidpointContext {
    /// Extrapolated positions with normalized extrapolated tangents.
    pub states_star: Vec<FiberState>,
    pub ops: Vec<KinematicOperators>,
    pub lambda_star: Vec<DVector<f64>>,
    /// Background flow at the extrapolated nodes, flattened per fiber.
    pub u0: Vec<DVector<f64>>,
    pub f_ext: Vec<Vec<Vector3<f64>>>,
    /// Bending force density at the current positions, `F Xⁿ`.
    pub fx_n: Vec<Vec<Vector3<f64>>>,
    /// Bending force density at the extrapolated positions, `F X*`.
    pub fx_star: Vec<Vec<Vector3<f64>>>,
    pub t_mid: f64,
    pub g_mid: f64,
    mld: Vec<DMatrix<f64>>,
    saddles: Vec<SaddleFactor>,
}

/// Result of the per-fiber block-diagonal solves.
#[derive(Clone, Debug)]
pub struct BlockSolve {
    pub lambda: Vec<DVector<f64>>,
    pub alpha: Vec<DVector<f64>>,
    /// Per-fiber relative residual of the least-squares saddle solve.
    pub residuals: Vec<f64>,
}

/// Result of the GMRES correction.
#[derive(Clone, Debug)]
pub struct GmresSolve {
    pub lambda: Vec<DVector<f64>>,
    pub alpha: Vec<DVector<f64>>,
    /// Relative residual of the stacked system after the last iteration.
    pub rel_residual: f64,
    pub iters: usize,
}

/// Per-step accounting written to run logs.
#[derive(Clone, Debug)]
pub struct StepDiagnostics {
    /// Nonlocal hydrodynamic evaluations this step (block-diagonal: 1;
    /// GMRES with m iterations: m + 2; local-only: 0).
    pub hydro_evals: u64,
    pub solve_residuals: Vec<f64>,
    pub gmres_residual: Option<f64>,
    pub gmres_iters: usize,
    /// Max over fibers of the nodal tangent-norm deviation after the update.
    pub max_tangent_deviation: f64,
}

/// Everything a caller needs from one completed step: the midpoint solution
/// (for stress sampling) and diagnostics.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub lambda: Vec<DVector<f64>>,
    pub alpha: Vec<DVector<f64>>,
    /// Extrapolated midpoint positions the solve used.
    pub xstar: Vec<Vec<Vector3<f64>>>,
    pub f_ext: Vec<Vec<Vector3<f64>>>,
    pub t_mid: f64,
    pub g_mid: f64,
    pub diagnostics: StepDiagnostics,
}

/// Time integrator: owns the discretization, the mobility configuration,
/// and the nonlocal-evaluation counter.
pub struct Simulation {
    pub fiber: FiberParams,
    pub ws: ChebWorkspace,
    pub kernel: StokesKernelParams,
    pub mu: f64,
    pub dt: f64,
    pub mode: SolveMode,
    pub hydro: HydroMode,
    /// Include the intra-fiber finite-part velocity in the nonlocal term.
    pub finite_part: bool,
    /// Route near fiber-fiber interactions through the adaptive quadrature.
    pub special_quadrature: bool,
    pub flow: BackgroundFlow,
    pub domain_edges: Option<Vector3<f64>>,
    pub plan: Option<EwaldPlan>,
    pub near_params: NearQuadParams,
    rule: UpsampledRule,
    /// Scalar bending force operator (includes the sign: `F X` is the force).
    bending: DMatrix<f64>,
    /// `F` expanded to act on flattened 3-vector fields.
    bending3: DMatrix<f64>,
    hydro_evals: u64,
}

impl Simulation {
    pub fn new(
        fiber: FiberParams,
        mu: f64,
        dt: f64,
        mode: SolveMode,
        hydro: HydroMode,
        flow: BackgroundFlow,
    ) -> Result<Self> {
        if !(dt > 0.0 && mu > 0.0) {
            return Err(FiberflowError::Config(format!(
                "need positive dt and mu, got {dt}, {mu}"
            )));
        }
        let ws = ChebWorkspace::new(fiber.n, fiber.length);
        let kernel = StokesKernelParams::new(mu, fiber.eps, fiber.length);
        let bending = bending_matrix(&ws, fiber.kappa);
        let bending3 = expand_scalar(&bending);
        Ok(Simulation {
            fiber,
            ws,
            kernel,
            mu,
            dt,
            mode,
            hydro,
            finite_part: true,
            special_quadrature: false,
            flow,
            domain_edges: None,
            plan: None,
            near_params: NearQuadParams::default(),
            rule: UpsampledRule::new(),
            bending,
            bending3,
            hydro_evals: 0,
        })
    }

    pub fn with_finite_part(mut self, on: bool) -> Self {
        self.finite_part = on;
        self
    }

    pub fn with_special_quadrature(mut self, on: bool) -> Self {
        self.special_quadrature = on;
        self
    }

    pub fn with_periodic(mut self, edges: Vector3<f64>, plan: EwaldPlan) -> Self {
        self.domain_edges = Some(edges);
        self.plan = Some(plan);
        self
    }

    /// Cumulative nonlocal hydrodynamic evaluations.
    pub fn hydro_eval_count(&self) -> u64 {
        self.hydro_evals
    }

    /// Assemble the midpoint context: extrapolates, operators, saddle
    /// factorizations, flow samples, and external forces.
    pub fn prepare_midpoint(
        &self,
        state: &StepperState,
        external: Option<&ExternalForce>,
    ) -> Result<MidpointContext> {
        let n = self.fiber.n;
        let nf = state.nfibers();
        let t_mid = state.t + 0.5 * self.dt;
        let g_mid = self.flow.strain(t_mid);

        let mut states_star = Vec::with_capacity(nf);
        let mut ops = Vec::with_capacity(nf);
        let mut lambda_star = Vec::with_capacity(nf);
        let mut fx_n = Vec::with_capacity(nf);
        let mut fx_star = Vec::with_capacity(nf);
        for i in 0..nf {
            let fib = &state.fibers[i];
            assert_eq!(fib.n(), n, "all fibers must share the discretization");
            let (x_star, tau_star) = if state.step == 0 {
                (fib.x.clone(), fib.tau.clone())
            } else {
                let x = fib
                    .x
                    .iter()
                    .zip(&state.x_prev[i])
                    .map(|(a, b)| 1.5 * a - 0.5 * b)
                    .collect();
                let tau = fib
                    .tau
                    .iter()
                    .zip(&state.tau_prev[i])
                    .map(|(a, b)| {
                        let t = 1.5 * a - 0.5 * b;
                        let nrm = t.norm();
                        if nrm > 0.0 {
                            t / nrm
                        } else {
                            *a
                        }
                    })
                    .collect();
                (x, tau)
            };
            let st = FiberState {
                x: x_star,
                tau: tau_star,
            };
            ops.push(build_operators(&st, &self.ws));
            lambda_star.push(match state.step {
                0 => DVector::zeros(3 * n),
                1 => state.lambda[i].clone(),
                _ => 2.0 * &state.lambda[i] - &state.lambda_prev[i],
            });
            fx_n.push(apply_scalar_op(&self.bending, &fib.x));
            fx_star.push(apply_scalar_op(&self.bending, &st.x));
            states_star.push(st);
        }

        let f_ext = match external {
            Some(f) => {
                let out = f(&states_star, t_mid, g_mid);
                assert_eq!(out.len(), nf, "external force must cover every fiber");
                out
            }
            None => vec![vec![Vector3::zeros(); n]; nf],
        };

        let u0 = states_star
            .iter()
            .map(|st| {
                flatten(
                    &st.x
                        .iter()
                        .map(|x| self.flow.velocity(x, t_mid))
                        .collect::<Vec<_>>(),
                )
            })
            .collect();

        let mut mld = Vec::with_capacity(nf);
        let mut saddles = Vec::with_capacity(nf);
        for (st, op) in states_star.iter().zip(&ops) {
            let m = mobility::self_mobility_matrix(&self.fiber, st, &self.ws, self.mu, false);
            let nc = op.ncols();
            let dim = 3 * n + nc;
            let mut a = DMatrix::zeros(dim, dim);
            a.view_mut((0, 0), (3 * n, 3 * n)).copy_from(&(-&m));
            let top_right = &op.k - 0.5 * self.dt * (&m * (&self.bending3 * &op.k));
            a.view_mut((0, 3 * n), (3 * n, nc)).copy_from(&top_right);
            a.view_mut((3 * n, 0), (nc, 3 * n)).copy_from(&op.kstar);
            saddles.push(SaddleFactor::new(a)?);
            mld.push(m);
        }

        Ok(MidpointContext {
            states_star,
            ops,
            lambda_star,
            u0,
            f_ext,
            fx_n,
            fx_star,
            t_mid,
            g_mid,
            mld,
            saddles,
        })
    }

    /// One per-fiber saddle solve with all nonlocal terms extrapolated:
    /// costs one nonlocal evaluation.
    pub fn block_diagonal_step(
        &mut self,
        state: &StepperState,
        ctx: &MidpointContext,
    ) -> Result<BlockSolve> {
        let n = self.fiber.n;
        let nf = state.nfibers();
        let args: Vec<Vec<Vector3<f64>>> = (0..nf)
            .map(|i| {
                let lam = unflatten(&ctx.lambda_star[i]);
                (0..n)
                    .map(|p| lam[p] + ctx.fx_star[i][p] + ctx.f_ext[i][p])
                    .collect()
            })
            .collect();
        let nl = self.nonlocal_velocities(&ctx.states_star, ctx.g_mid, &args)?;

        let mut lambda = Vec::with_capacity(nf);
        let mut alpha = Vec::with_capacity(nf);
        let mut residuals = Vec::with_capacity(nf);
        for i in 0..nf {
            let nc = ctx.ops[i].ncols();
            let local_arg: Vec<Vector3<f64>> = (0..n)
                .map(|p| ctx.fx_n[i][p] + ctx.f_ext[i][p])
                .collect();
            let top = &ctx.mld[i] * flatten(&local_arg) + flatten(&nl[i]) + &ctx.u0[i];
            let mut rhs = DVector::zeros(3 * n + nc);
            rhs.rows_mut(0, 3 * n).copy_from(&top);
            let sol = ctx.saddles[i].solve(&rhs)?;
            if !sol.iter().all(|v| v.is_finite()) {
                return Err(FiberflowError::Numerical(format!(
                    "fiber {i}: saddle solution is not finite"
                )));
            }
            residuals.push(ctx.saddles[i].relative_residual(&sol, &rhs));
            lambda.push(sol.rows(0, 3 * n).into_owned());
            alpha.push(sol.rows(3 * n, nc).into_owned());
        }
        Ok(BlockSolve {
            lambda,
            alpha,
            residuals,
        })
    }

    /// GMRES on the stacked residual system, right-preconditioned by the
    /// block-diagonal saddle solves. Runs exactly `max_iters` iterations
    /// when `tol` is `None`; otherwise stops once the relative residual
    /// drops below `tol`. Costs one nonlocal evaluation to form the
    /// residual plus one per iteration. Never restarts.
    pub fn gmres_step(
        &mut self,
        state: &StepperState,
        ctx: &MidpointContext,
        seed: &BlockSolve,
        max_iters: usize,
        tol: Option<f64>,
    ) -> Result<GmresSolve> {
        let n = self.fiber.n;
        let nf = state.nfibers();
        let ncs: Vec<usize> = ctx.ops.iter().map(|o| o.ncols()).collect();
        let dim: usize = ncs.iter().map(|nc| 3 * n + nc).sum();

        // Residual right-hand side: what the extrapolated nonlocal terms
        // missed, evaluated at the block-diagonal solution.
        let args: Vec<Vec<Vector3<f64>>> = (0..nf)
            .map(|i| {
                let ka = apply_k(&ctx.ops[i], &seed.alpha[i]);
                let w: Vec<Vector3<f64>> = (0..n)
                    .map(|p| state.fibers[i].x[p] + 0.5 * self.dt * ka[p] - ctx.states_star[i].x[p])
                    .collect();
                let fw = apply_scalar_op(&self.bending, &w);
                let lam = unflatten(&seed.lambda[i]);
                let lam_star = unflatten(&ctx.lambda_star[i]);
                (0..n)
                    .map(|p| fw[p] + lam[p] - lam_star[p])
                    .collect()
            })
            .collect();
        let nl = self.nonlocal_velocities(&ctx.states_star, ctx.g_mid, &args)?;

        let mut r = DVector::zeros(dim);
        let mut off = 0;
        for i in 0..nf {
            r.rows_mut(off, 3 * n).copy_from(&flatten(&nl[i]));
            off += 3 * n + ncs[i];
        }

        let beta = r.norm();
        if beta == 0.0 || max_iters == 0 {
            return Ok(GmresSolve {
                lambda: seed.lambda.clone(),
                alpha: seed.alpha.clone(),
                rel_residual: if beta == 0.0 { 0.0 } else { 1.0 },
                iters: 0,
            });
        }

        // Arnoldi with modified Gram–Schmidt on the right-preconditioned
        // operator A·P.
        let mut vs: Vec<DVector<f64>> = vec![&r / beta];
        let mut hcols: Vec<Vec<f64>> = Vec::new();
        let mut rel = 1.0;
        let mut iters = 0;
        for j in 0..max_iters {
            let pv = self.apply_preconditioner(ctx, &vs[j])?;
            let mut w = self.apply_saddle_operator(state, ctx, &pv)?;
            let mut col = vec![0.0; j + 2];
            for (k, vk) in vs.iter().enumerate() {
                let h = vk.dot(&w);
                w -= vk * h;
                col[k] = h;
            }
            let hnorm = w.norm();
            col[j + 1] = hnorm;
            hcols.push(col);
            iters = j + 1;

            rel = least_squares_residual(&hcols, beta) / beta;
            let breakdown = hnorm <= 1e-14 * beta;
            if tol.is_some_and(|t| rel <= t) || breakdown {
                break;
            }
            if j + 1 < max_iters {
                vs.push(w / hnorm);
            }
        }

        // Solve the small least-squares problem and map back through the
        // preconditioner.
        let y = least_squares_solve(&hcols, beta);
        let mut u = DVector::zeros(dim);
        for (j, vj) in vs.iter().take(iters).enumerate() {
            u += vj * y[j];
        }
        let delta = self.apply_preconditioner(ctx, &u)?;

        let mut lambda = Vec::with_capacity(nf);
        let mut alpha = Vec::with_capacity(nf);
        let mut off = 0;
        for i in 0..nf {
            lambda.push(&seed.lambda[i] + delta.rows(off, 3 * n).into_owned());
            alpha.push(&seed.alpha[i] + delta.rows(off + 3 * n, ncs[i]).into_owned());
            off += 3 * n + ncs[i];
        }
        Ok(GmresSolve {
            lambda,
            alpha,
            rel_residual: rel,
            iters,
        })
    }

    /// The stacked saddle operator with the full (local + nonlocal) mobility:
    /// one nonlocal evaluation per application.
    fn apply_saddle_operator(
        &mut self,
        state: &StepperState,
        ctx: &MidpointContext,
        z: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        let n = self.fiber.n;
        let nf = state.nfibers();
        let mut off = 0;
        let mut lams = Vec::with_capacity(nf);
        let mut us = Vec::with_capacity(nf);
        let mut gs = Vec::with_capacity(nf);
        for i in 0..nf {
            let nc = ctx.ops[i].ncols();
            let lam = z.rows(off, 3 * n).into_owned();
            let al = z.rows(off + 3 * n, nc).into_owned();
            let u = apply_k(&ctx.ops[i], &al);
            let fu = apply_scalar_op(&self.bending, &u);
            let lamv = unflatten(&lam);
            let g: Vec<Vector3<f64>> = (0..n)
                .map(|p| lamv[p] + 0.5 * self.dt * fu[p])
                .collect();
            lams.push(lam);
            us.push(u);
            gs.push(g);
            off += 3 * n + nc;
        }
        let nl = self.nonlocal_velocities(&ctx.states_star, ctx.g_mid, &gs)?;

        let dim = z.len();
        let mut out = DVector::zeros(dim);
        let mut off = 0;
        for i in 0..nf {
            let nc = ctx.ops[i].ncols();
            let top = flatten(&us[i]) - &ctx.mld[i] * flatten(&gs[i]) - flatten(&nl[i]);
            out.rows_mut(off, 3 * n).copy_from(&top);
            out.rows_mut(off + 3 * n, nc)
                .copy_from(&(&ctx.ops[i].kstar * &lams[i]));
            off += 3 * n + nc;
        }
        Ok(out)
    }

    /// Block-diagonal right preconditioner: per-fiber saddle solves.
    fn apply_preconditioner(
        &self,
        ctx: &MidpointContext,
        z: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        let n = self.fiber.n;
        let mut out = DVector::zeros(z.len());
        let mut off = 0;
        for (i, saddle) in ctx.saddles.iter().enumerate() {
            let dim = 3 * n + ctx.ops[i].ncols();
            let sol = saddle.solve(&z.rows(off, dim).into_owned())?;
            out.rows_mut(off, dim).copy_from(&sol);
            off += dim;
        }
        Ok(out)
    }

    /// Rotate tangents by the midpoint angular velocity, rebuild positions
    /// spectrally, and shift the multistep histories.
    pub fn advance_positions(
        &self,
        state: &mut StepperState,
        ctx: &MidpointContext,
        lambda: &[DVector<f64>],
        alpha: &[DVector<f64>],
    ) {
        let nf = state.nfibers();
        for i in 0..nf {
            let ka = apply_k(&ctx.ops[i], &alpha[i]);
            let omega = compute_omega(&ctx.states_star[i].tau, &ka, &self.ws);
            let anchor = state.fibers[i].x[0] + self.dt * ka[0];
            let new_state = rotate_and_integrate(&state.fibers[i], &omega, self.dt, anchor, &self.ws);
            state.x_prev[i] = std::mem::replace(&mut state.fibers[i].x, new_state.x);
            state.tau_prev[i] = std::mem::replace(&mut state.fibers[i].tau, new_state.tau);
        }
        state.lambda_prev = std::mem::replace(&mut state.lambda, lambda.to_vec());
        state.t += self.dt;
        state.step += 1;
    }

    /// Advance one full step. The first two steps iterate GMRES to a
    /// converged residual to seed the multistep histories; afterwards the
    /// solve follows `mode`.
    pub fn step(
        &mut self,
        state: &mut StepperState,
        external: Option<&ExternalForce>,
    ) -> Result<StepRecord> {
        let evals0 = self.hydro_evals;
        let ctx = self.prepare_midpoint(state, external)?;
        let block = self.block_diagonal_step(state, &ctx)?;

        let (lambda, alpha, gmres_residual, gmres_iters) = if state.step < 2 {
            let g = self.gmres_step(state, &ctx, &block, STARTUP_MAX_ITERS, Some(STARTUP_TOL))?;
            if g.iters > 0 && g.rel_residual > STARTUP_TOL {
                return Err(FiberflowError::Numerical(format!(
                    "startup step {} stalled at relative residual {:.3e}",
                    state.step, g.rel_residual
                )));
            }
            let (res, it) = (g.rel_residual, g.iters);
            (g.lambda, g.alpha, Some(res), it)
        } else {
            match self.mode {
                SolveMode::BlockDiagonal => (block.lambda.clone(), block.alpha.clone(), None, 0),
                SolveMode::Gmres { iters } => {
                    let g = self.gmres_step(state, &ctx, &block, iters, None)?;
                    let (res, it) = (g.rel_residual, g.iters);
                    (g.lambda, g.alpha, Some(res), it)
                }
            }
        };

        self.advance_positions(state, &ctx, &lambda, &alpha);

        let max_tangent_deviation = state
            .fibers
            .iter()
            .map(|f| f.max_tangent_norm_deviation())
            .fold(0.0, f64::max);
        let diagnostics = StepDiagnostics {
            hydro_evals: self.hydro_evals - evals0,
            solve_residuals: block.residuals,
            gmres_residual,
            gmres_iters,
            max_tangent_deviation,
        };
        Ok(StepRecord {
            lambda,
            alpha,
            xstar: ctx.states_star.iter().map(|s| s.x.clone()).collect(),
            f_ext: ctx.f_ext,
            t_mid: ctx.t_mid,
            g_mid: ctx.g_mid,
            diagnostics,
        })
    }

    /// Nonlocal hydrodynamic velocities at every node of every fiber given
    /// force densities `f`. This is the unit of work the evaluation counter
    /// tracks; geometry is always the extrapolated midpoint.
    fn nonlocal_velocities(
        &mut self,
        states: &[FiberState],
        g: f64,
        f: &[Vec<Vector3<f64>>],
    ) -> Result<Vec<Vec<Vector3<f64>>>> {
        let n = self.fiber.n;
        let nf = states.len();
        if matches!(self.hydro, HydroMode::LocalOnly) {
            return Ok(vec![vec![Vector3::zeros(); n]; nf]);
        }
        self.hydro_evals += 1;

        let mut vel: Vec<Vec<Vector3<f64>>> = if self.finite_part {
            states
                .par_iter()
                .zip(f.par_iter())
                .map(|(st, fi)| mobility::finite_part_velocity(st, fi, &self.ws, self.mu))
                .collect()
        } else {
            vec![vec![Vector3::zeros(); n]; nf]
        };

        match self.hydro {
            HydroMode::LocalOnly => unreachable!(),
            HydroMode::IntraOnly => {}
            HydroMode::FreeSpaceDirect => {
                if self.special_quadrature {
                    let ctxs = self.near_contexts(states, f, &vel);
                    let add: Vec<Vec<Vector3<f64>>> = (0..nf)
                        .into_par_iter()
                        .map(|i| {
                            (0..n)
                                .map(|p| {
                                    let x = states[i].x[p];
                                    let mut u = Vector3::zeros();
                                    for (j, ctx) in ctxs.iter().enumerate() {
                                        if j == i {
                                            continue;
                                        }
                                        let (v, _) = interaction_velocity(
                                            &x,
                                            ctx,
                                            &self.rule,
                                            &self.near_params,
                                        )?;
                                        u += v;
                                    }
                                    Ok(u)
                                })
                                .collect::<Result<Vec<_>>>()
                        })
                        .collect::<Result<Vec<_>>>()?;
                    for (vi, ai) in vel.iter_mut().zip(add) {
                        for (v, a) in vi.iter_mut().zip(ai) {
                            *v += a;
                        }
                    }
                } else {
                    let add: Vec<Vec<Vector3<f64>>> = (0..nf)
                        .into_par_iter()
                        .map(|i| {
                            (0..n)
                                .map(|p| {
                                    let x = states[i].x[p];
                                    let mut u = Vector3::zeros();
                                    for j in 0..nf {
                                        if j == i {
                                            continue;
                                        }
                                        u += mobility::interfiber_velocity_direct(
                                            &x,
                                            &states[j],
                                            &f[j],
                                            &self.ws,
                                            &self.kernel,
                                        );
                                    }
                                    u
                                })
                                .collect()
                        })
                        .collect();
                    for (vi, ai) in vel.iter_mut().zip(add) {
                        for (v, a) in vi.iter_mut().zip(ai) {
                            *v += a;
                        }
                    }
                }
            }
            HydroMode::PeriodicEwald => {
                let edges = self.domain_edges.ok_or_else(|| {
                    FiberflowError::Config("periodic mode needs domain edges".into())
                })?;
                let plan = self.plan.as_ref().ok_or_else(|| {
                    FiberflowError::Config("periodic mode needs an Ewald plan".into())
                })?;
                let dom = ShearedDomain::new(edges, g);
                let points: Vec<Vector3<f64>> =
                    states.iter().flat_map(|st| st.x.iter().copied()).collect();
                let forces: Vec<Vector3<f64>> = states
                    .iter()
                    .zip(f)
                    .flat_map(|(_, fi)| {
                        fi.iter()
                            .zip(&self.ws.grid.weights)
                            .map(|(fv, &w)| fv * w)
                            .collect::<Vec<_>>()
                    })
                    .collect();
                let ranges: Vec<std::ops::Range<usize>> =
                    (0..nf).map(|i| i * n..(i + 1) * n).collect();
                let base = ewald::periodic_rpy_velocities(&points, &forces, &ranges, &dom, plan)?;
                for i in 0..nf {
                    for p in 0..n {
                        vel[i][p] += base[i * n + p];
                    }
                }

                if self.special_quadrature {
                    let ctxs = self.near_contexts(states, f, &vel);
                    let mids: Vec<Vector3<f64>> = states
                        .iter()
                        .map(|st| Vec3Series::from_values(&self.ws, &st.x).eval(0.0))
                        .collect();
                    // Pairs whose coarse distance can fall below the native
                    // routing gate lie within half a length plus the gate of
                    // the source midpoint; scan the nearest image and its
                    // neighbors for each.
                    let reach = self.fiber.length * (0.5 + self.near_params.native_gate + 0.05);
                    let deltas: Vec<Vec<Vector3<f64>>> = (0..nf)
                        .into_par_iter()
                        .map(|i| {
                            (0..n)
                                .map(|p| {
                                    let x = states[i].x[p];
                                    let mut du = Vector3::zeros();
                                    for (j, ctx) in ctxs.iter().enumerate() {
                                        let ds = dom.to_sheared(&(x - mids[j]));
                                        let n0 = [
                                            (ds.x / dom.edges.x).round() as i32,
                                            (ds.y / dom.edges.y).round() as i32,
                                            (ds.z / dom.edges.z).round() as i32,
                                        ];
                                        for a in -1..=1 {
                                            for bb in -1..=1 {
                                                for c in -1..=1 {
                                                    let img = [n0[0] + a, n0[1] + bb, n0[2] + c];
                                                    if j == i && img == [0, 0, 0] {
                                                        continue;
                                                    }
                                                    let y = x - dom.shift(img);
                                                    if (y - mids[j]).norm() > reach {
                                                        continue;
                                                    }
                                                    let (_, rec) = corrected_interaction_velocity(
                                                        &y,
                                                        ctx,
                                                        &self.rule,
                                                        &self.near_params,
                                                    )?;
                                                    du += rec.delta;
                                                }
                                            }
                                        }
                                    }
                                    Ok(du)
                                })
                                .collect::<Result<Vec<_>>>()
                        })
                        .collect::<Result<Vec<_>>>()?;
                    for (vi, di) in vel.iter_mut().zip(deltas) {
                        for (v, d) in vi.iter_mut().zip(di) {
                            *v += d;
                        }
                    }
                }
            }
        }
        Ok(vel)
    }

    /// Near-quadrature contexts for every fiber, reusing the finite-part
    /// velocities already computed this evaluation (they feed the on-surface
    /// blending limit).
    fn near_contexts(
        &self,
        states: &[FiberState],
        f: &[Vec<Vector3<f64>>],
        fp: &[Vec<Vector3<f64>>],
    ) -> Vec<NearFiberContext> {
        let zeros = vec![Vector3::zeros(); self.fiber.n];
        states
            .iter()
            .enumerate()
            .map(|(j, st)| {
                let fpj = if self.finite_part { &fp[j] } else { &zeros };
                NearFiberContext::with_finite_part(
                    &self.fiber,
                    &self.kernel,
                    st,
                    &f[j],
                    fpj,
                    &self.ws,
                    &self.rule,
                )
            })
            .collect()
    }
}

/// Expand a scalar nodal operator to act componentwise on flattened
/// 3-vector fields.
fn expand_scalar(op: &DMatrix<f64>) -> DMatrix<f64> {
    let n = op.nrows();
    let mut out = DMatrix::zeros(3 * n, 3 * n);
    for p in 0..n {
        for q in 0..n {
            let v = op[(p, q)];
            for c in 0..3 {
                out[(3 * p + c, 3 * q + c)] = v;
            }
        }
    }
    out
}

/// Residual norm of `min_y ‖β e₁ − H̄ y‖` for the Arnoldi Hessenberg columns.
fn least_squares_residual(hcols: &[Vec<f64>], beta: f64) -> f64 {
    let m = hcols.len();
    let (hbar, rhs) = hessenberg_system(hcols, beta);
    let y = hbar
        .clone()
        .svd(true, true)
        .solve(&rhs, 1e-14 * beta.max(1.0))
        .unwrap_or_else(|_| DVector::zeros(m));
    (hbar * y - rhs).norm()
}

/// Solution of the Hessenberg least-squares problem.
fn least_squares_solve(hcols: &[Vec<f64>], beta: f64) -> DVector<f64> {
    let m = hcols.len();
    let (hbar, rhs) = hessenberg_system(hcols, beta);
    hbar.svd(true, true)
        .solve(&rhs, 1e-14 * beta.max(1.0))
        .unwrap_or_else(|_| DVector::zeros(m))
}

fn hessenberg_system(hcols: &[Vec<f64>], beta: f64) -> (DMatrix<f64>, DVector<f64>) {
    let m = hcols.len();
    let mut hbar = DMatrix::zeros(m + 1, m);
    for (j, col) in hcols.iter().enumerate() {
        for (k, &v) in col.iter().enumerate() {
            hbar[(k, j)] = v;
        }
    }
    let mut rhs = DVector::zeros(m + 1);
    rhs[0] = beta;
    (hbar, rhs)
}

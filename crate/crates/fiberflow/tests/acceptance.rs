//! End-to-end acceptance checks for the suspension engine.
//!
//! Each test covers one numbered criterion and prints a single
//! `[PASS]`/`[FAIL]` line with the measured quantity next to its bound
//! (run with `--nocapture` to see the lines for passing tests too).
//! Criteria 1–7 and 9 run by default; 8 and 10–12 drive large ensembles
//! for minutes to an hour and are `#[ignore]`d — run them with
//! `cargo test --test acceptance -- --ignored`.

use std::cell::RefCell;
use std::f64::consts::PI;

use nalgebra::Vector3;
use rayon::prelude::*;

use fiberflow::domain::ShearedDomain;
use fiberflow::fiber::{DragModel, FiberParams, FiberState, Vec3Series};
use fiberflow::harness::{
    builtin_config, generate_random_fibers, hexagonal_lattice_check, initial_states,
    near_quadrature_study, relaxation_run, resample_fiber, run_scenario, stream_seed,
    successive_refinement_errors, fitted_slope, moduli_sweep, stress_tensors_from_record,
    trajectory_distance, CrosslinkConfig, FlowConfig, RandomFiberSpec, RunOutcome, Scenario,
};
use fiberflow::mobility::{
    finite_part_reference, finite_part_velocity, rpy_line_integral, StokesKernelParams,
};
use fiberflow::network::{cl_force_density, fit_double_exponential, SmoothingKernel};
use fiberflow::spectral::ChebWorkspace;
use fiberflow::stepper::{Simulation, StepperState};

fn report(criterion: usize, name: &str, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    println!("[{tag}] criterion {criterion:2} ({name}): {detail}");
    assert!(pass, "criterion {criterion} ({name}): {detail}");
}

// -------------------------------------------------------------------------
// 1. Inextensibility: every scenario keeps nodal tangent norms at unit to
//    1e-12 across all steps.
// -------------------------------------------------------------------------
#[test]
fn criterion_01_inextensibility_in_every_scenario() {
    let mut runs = Vec::new();

    let quartet = builtin_config(Scenario::FallingQuartet);
    runs.push(("falling-quartet", quartet));

    let mut three = builtin_config(Scenario::ThreeFiberShear);
    three.stepper.t_final = 0.6;
    runs.push(("three-fiber-shear", three));

    let mut stability = builtin_config(Scenario::Stability);
    stability.fiber.count = 30;
    stability.domain.ld = 3.0;
    stability.stepper.t_final = 0.25;
    stability.stepper.snapshot_interval = None;
    stability.seed = 1;
    runs.push(("stability", stability));

    let mut mesh = builtin_config(Scenario::Mesh);
    mesh.fiber.count = 12;
    mesh.crosslinks.as_mut().expect("mesh links").count = 144;
    mesh.stepper.t_final = 0.05;
    mesh.stepper.snapshot_interval = None;
    mesh.seed = 1;
    runs.push(("mesh", mesh));

    let mut worst: f64 = 0.0;
    for (label, config) in &runs {
        let out = run_scenario(config).expect("scenario runs");
        assert_eq!(
            out.outcome,
            RunOutcome::Completed,
            "{label} must complete for the inextensibility sweep"
        );
        worst = worst.max(out.max_tangent_deviation);
    }
    report(
        1,
        "inextensibility",
        worst <= 1e-12,
        &format!(
            "max |‖τ‖−1| = {worst:.3e} over {} scenarios (bound 1e-12)",
            runs.len()
        ),
    );
}

// -------------------------------------------------------------------------
// 2. Sheared-primitive vs rectangular lattice descriptions agree through
//    the Ewald sum, tighter as the truncation tolerance tightens.
// -------------------------------------------------------------------------
#[test]
fn criterion_02_lattice_descriptions_agree() {
    let loose = hexagonal_lattice_check(1e-2).expect("loose check runs");
    let tight = hexagonal_lattice_check(1e-8).expect("tight check runs");
    report(
        2,
        "lattice equivalence",
        loose.pass && tight.pass,
        &format!(
            "discrepancy {:.3e} (bound 1e-5) at tol 1e-2, {:.3e} (bound 1e-10) at tol 1e-8",
            loose.discrepancy, tight.discrepancy
        ),
    );
}

// -------------------------------------------------------------------------
// 3. On a straight fiber with constant force density, the brute-force pair
//    mobility line integral matches the matched log-form drag
//    (I+ττ)·ln(4s(L−s)/b²) + I − 3ττ at interior points, with the
//    remainder decaying as O(b²) under slenderness halving.
// -------------------------------------------------------------------------
#[test]
fn criterion_03_straight_fiber_integral_matches_log_drag() {
    let length = 2.0;
    let mu = 1.0;
    let n = 16;
    let ws = ChebWorkspace::new(n, length);
    let tau = Vector3::new(0.0, 0.0, 1.0);
    let x_nodes: Vec<Vector3<f64>> = ws.grid.nodes.iter().map(|&s| tau * s).collect();
    let x_series = Vec3Series::from_values(&ws, &x_nodes);
    let f = Vector3::new(0.3, -0.2, 0.6);
    let f_series = Vec3Series::from_values(&ws, &vec![f; n]);

    let eps_list = [2e-3, 1e-3, 5e-4, 2.5e-4];
    let interior = [0.5, 1.0, 1.5];
    let mut errs = Vec::new();
    for &eps in &eps_list {
        let b = StokesKernelParams::new(mu, eps, length).b;
        let mut worst: f64 = 0.0;
        for &s in &interior {
            let brute = rpy_line_integral(s, &x_series, &f_series, b, mu);
            let log_term = (4.0 * s * (length - s) / (b * b)).ln();
            let fpar = tau * tau.dot(&f);
            let matched = ((f + fpar) * log_term + f - fpar * 3.0) / (8.0 * PI * mu);
            worst = worst.max((brute - matched).norm() / matched.norm());
        }
        errs.push(worst);
    }
    // Least-squares slope of log error against log slenderness.
    let pts: Vec<(f64, f64)> = eps_list
        .iter()
        .zip(&errs)
        .map(|(&e, &r)| (e.ln(), r.ln()))
        .collect();
    let m = pts.len() as f64;
    let (sx, sy): (f64, f64) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    let slope = (m * sxy - sx * sy) / (m * sxx - sx * sx);
    report(
        3,
        "log-form drag match",
        (slope - 2.0).abs() <= 0.3,
        &format!(
            "remainder slope {slope:.3} (target 2.0 ± 0.3); rel errors {:.3e} → {:.3e}",
            errs[0],
            errs[errs.len() - 1]
        ),
    );
}

// -------------------------------------------------------------------------
// 4. The precomputed-weight finite-part integral agrees with a dense
//    singularity-subtracted Simpson oracle at interior nodes of 100 smooth
//    random fibers resampled to N = 32, to 1e-6 relative.
// -------------------------------------------------------------------------
#[test]
fn criterion_04_finite_part_matches_independent_oracle() {
    let length = 2.0;
    let spec = RandomFiberSpec::new(16, length);
    let fibers = generate_random_fibers(&spec, 100, stream_seed(1234, "fp-oracle"))
        .expect("smooth ensemble");
    let ws16 = ChebWorkspace::new(16, length);
    let ws32 = ChebWorkspace::new(32, length);

    let worst = fibers
        .par_iter()
        .map(|coarse| {
            let state = resample_fiber(coarse, &ws16, &ws32);
            let f = state.tau.clone();
            let v = finite_part_velocity(&state, &f, &ws32, 1.0);
            let mut scale: f64 = 0.0;
            let mut err: f64 = 0.0;
            for p in 0..ws32.n {
                let s = ws32.grid.nodes[p];
                if !(0.1 * length..=0.9 * length).contains(&s) {
                    continue;
                }
                let oracle = finite_part_reference(&state, &f, &ws32, 1.0, p, 4000);
                scale = scale.max(oracle.norm());
                err = err.max((v[p] - oracle).norm());
            }
            err / scale
        })
        .reduce(|| 0.0, f64::max);
    report(
        4,
        "finite-part oracle",
        worst <= 1e-6,
        &format!("worst relative deviation {worst:.3e} over 100 fibers at N = 32 (bound 1e-6)"),
    );
}

// -------------------------------------------------------------------------
// 5. Near-interaction quadrature accuracy bands: 10⁴ targets 2–10 radii
//    off random fibers all reach 3 digits; 10⁴ targets 0.01–0.2 lengths
//    away reach 3 digits for at least 95%. The refined reference is
//    self-consistent to 1e-9 wherever the pair mobility is smooth.
// -------------------------------------------------------------------------
#[test]
fn criterion_05_near_interaction_accuracy_bands() {
    let study = near_quadrature_study(7).expect("study runs");
    let near_ok = study.near_band.fraction_ge3 >= 1.0;
    let far_ok = study.far_band.fraction_ge3 >= 0.95;
    let ref_ok = study.reference.smooth_max <= 1e-9;
    report(
        5,
        "near-interaction bands",
        near_ok && far_ok && ref_ok,
        &format!(
            "near band {:.2}% ≥ 3 digits (min {:.2}); far band {:.2}% ≥ 3 digits; \
             reference self-consistency {:.2e} smooth / {:.2e} fringe",
            100.0 * study.near_band.fraction_ge3,
            study.near_band.min_digits,
            100.0 * study.far_band.fraction_ge3,
            study.reference.smooth_max,
            study.reference.fringe_max
        ),
    );
}

// -------------------------------------------------------------------------
// 6. Temporal second order on the three-fiber shear scenario for the
//    block-diagonal, 1-iteration, and 3-iteration solvers, with the
//    iterative solves more accurate than block-diagonal at equal dt.
// -------------------------------------------------------------------------
#[test]
fn criterion_06_temporal_order_across_solver_modes() {
    let dts = [0.4, 0.2, 0.1, 0.05, 0.025];
    let mut configs = Vec::new();
    for (label, mode, iters) in [("block", "block", 1), ("gmres-1", "gmres", 1), ("gmres-3", "gmres", 3)]
    {
        let mut c = builtin_config(Scenario::ThreeFiberShear);
        c.stepper.mode = mode.into();
        c.stepper.gmres_iters = iters;
        configs.push((label, c));
    }
    let tables: Vec<_> = configs
        .iter()
        .map(|(label, c)| {
            let rows = successive_refinement_errors(c, &dts).expect("runs complete");
            (label, fitted_slope(&rows), rows)
        })
        .collect();

    let mut pass = true;
    let mut detail = String::new();
    for (label, slope, _) in &tables {
        pass &= (slope - 2.0).abs() <= 0.2;
        detail.push_str(&format!("{label} slope {slope:.3}; "));
    }
    let block_rows = &tables[0].2;
    for (label, _, rows) in &tables[1..] {
        for (r, b) in rows.iter().zip(block_rows) {
            if r.error >= b.error {
                pass = false;
                detail.push_str(&format!(
                    "{label} error {:.3e} not below block {:.3e} at dt {}; ",
                    r.error, b.error, r.dt
                ));
            }
        }
    }
    detail.push_str("iterative errors below block-diagonal at every dt (target slope 2.0 ± 0.2)");
    report(6, "temporal order", pass, &detail);
}

// -------------------------------------------------------------------------
// 7. Spatial accuracy: against an N = 32, dt = 1.25e-3 reference, the
//    temporally saturated N = 16 error exceeds the N = 24 error by ≥ 3×.
// -------------------------------------------------------------------------
#[test]
fn criterion_07_spatial_refinement_cuts_saturated_error() {
    let make = |n: usize, dt: f64| {
        let mut c = builtin_config(Scenario::ThreeFiberShear);
        c.fiber.n = n;
        c.stepper.dt = dt;
        c.stepper.mode = "gmres".into();
        c.stepper.gmres_iters = 3;
        c.stepper.snapshot_interval = Some(0.4);
        c
    };
    let reference = run_scenario(&make(32, 1.25e-3)).expect("reference runs");
    let run16 = run_scenario(&make(16, 2.5e-3)).expect("N=16 runs");
    let run24 = run_scenario(&make(24, 2.5e-3)).expect("N=24 runs");
    assert_eq!(reference.outcome, RunOutcome::Completed);
    assert_eq!(run16.outcome, RunOutcome::Completed);
    assert_eq!(run24.outcome, RunOutcome::Completed);
    let err16 = trajectory_distance(&run16, &reference).expect("common snapshots");
    let err24 = trajectory_distance(&run24, &reference).expect("common snapshots");
    let factor = err16 / err24;
    report(
        7,
        "spatial refinement",
        factor >= 3.0,
        &format!("error {err16:.3e} (N=16) vs {err24:.3e} (N=24): factor {factor:.2} (bound ≥ 3)"),
    );
}

// -------------------------------------------------------------------------
// 8. Stability/iteration budget at the dense, stiff corner: 5 hydro
//    evaluations per step keep F = 200 stable where the block-diagonal
//    solve blows up. Ignored by default (tens of minutes).
// -------------------------------------------------------------------------
#[test]
#[ignore = "dense-suspension stability sweep takes tens of minutes; run with --ignored"]
fn criterion_08_iteration_budget_at_dense_stiff_corner() {
    let mut config = builtin_config(Scenario::Stability);
    config.fiber.count = 200;
    config.fiber.kappa = 10.0;
    // Densest scaled box: ε F L³ / Ld³ = 0.5.
    config.domain.ld = (1e-3 * 200.0 * 8.0 / 0.5_f64).cbrt();
    config.stepper.snapshot_interval = None;
    config.seed = 2;

    let mut gmres3 = config.clone();
    gmres3.stepper.mode = "gmres".into();
    gmres3.stepper.gmres_iters = 3;
    let stable = run_scenario(&gmres3).expect("budgeted run executes");
    // Steps 0 and 1 bootstrap the multistep history with a converged
    // solve; the budget applies to the production steps.
    let budget = stable
        .step_log
        .iter()
        .skip(2)
        .map(|e| e.hydro_evals)
        .max()
        .unwrap_or(0);

    let mut block = config.clone();
    block.stepper.mode = "block".into();
    let bd = run_scenario(&block).expect("block-diagonal run executes");

    let pass = stable.outcome == RunOutcome::Completed
        && budget <= 5
        && matches!(bd.outcome, RunOutcome::Unstable { .. });
    report(
        8,
        "iteration budget",
        pass,
        &format!(
            "3-iteration run {} with ≤ {budget} evaluations/step (bound 5); block-diagonal {}",
            stable.outcome.label(),
            bd.outcome.label()
        ),
    );
}

// -------------------------------------------------------------------------
// 9. Cross-linker identities on the F = 100 mesh: every bound link exerts
//    zero net force and torque to 1e-12, and the volume-averaged stress
//    tensor is symmetric to 1e-4 relative once the network is loaded.
// -------------------------------------------------------------------------
#[test]
fn criterion_09_crosslink_force_torque_and_stress_symmetry() {
    let mut config = builtin_config(Scenario::Mesh);
    config.fiber.count = 100;
    config.crosslinks.as_mut().expect("mesh links").count = 1200;
    config.stepper.t_final = 0.25;
    config.seed = 9;
    let (ws, states, links) = initial_states(&config).expect("mesh binds");
    assert_eq!(links.len(), 1200);
    let cl = config.crosslinks.clone().expect("mesh links");
    let smoothing = SmoothingKernel::new(cl.sigma);
    let edges = config.edges().expect("periodic");
    let domain = ShearedDomain::new(edges, 0.0);

    // Per-link identities on the initial geometry.
    let mut worst_force: f64 = 0.0;
    let mut worst_torque: f64 = 0.0;
    for link in &links {
        let f = cl_force_density(std::slice::from_ref(link), &states, &ws, &smoothing, &domain)
            .expect("density evaluates");
        let shift = domain.shift(link.image_shift);
        let mut force = Vector3::zeros();
        let mut torque = Vector3::zeros();
        for p in 0..ws.n {
            let w = ws.grid.weights[p];
            force += (f[link.i][p] + f[link.j][p]) * w;
            torque += states[link.i].x[p].cross(&f[link.i][p]) * w;
            torque += (states[link.j].x[p] + shift).cross(&f[link.j][p]) * w;
        }
        worst_force = worst_force.max(force.norm());
        worst_torque = worst_torque.max(torque.norm());
    }

    // Stress symmetry after the shear has loaded the network.
    let params = FiberParams::new(
        config.fiber.n,
        config.fiber.length,
        config.fiber.eps,
        config.fiber.kappa,
        DragModel::Regularized { delta: config.fiber.delta },
    );
    let mut sim = Simulation::new(
        params,
        config.mu,
        config.stepper.dt,
        config.solve_mode().expect("valid mode"),
        config.hydro_mode().expect("valid hydro"),
        config.background_flow(),
    )
    .expect("simulation builds");
    let mut state = StepperState::new(states);
    let volume = edges.x * edges.y * edges.z;
    let hook_err: RefCell<Option<fiberflow::FiberflowError>> = RefCell::new(None);
    let hook = |sts: &[FiberState], _t: f64, g: f64| -> Vec<Vec<Vector3<f64>>> {
        match cl_force_density(&links, sts, &ws, &smoothing, &ShearedDomain::new(edges, g)) {
            Ok(f) => f,
            Err(e) => {
                *hook_err.borrow_mut() = Some(e);
                vec![vec![Vector3::zeros(); ws.n]; sts.len()]
            }
        }
    };
    let mut worst_asym: f64 = 0.0;
    let nsteps = config.nsteps().expect("integer steps");
    for k in 0..nsteps {
        let record = sim.step(&mut state, Some(&hook)).expect("step succeeds");
        assert!(hook_err.borrow().is_none(), "cross-link hook failed");
        if k >= 10 {
            let tensors = stress_tensors_from_record(
                &record,
                &ws,
                config.fiber.kappa,
                &links,
                Some(&smoothing),
                edges,
                volume,
            )
            .expect("stress evaluates");
            let total = tensors.fiber + tensors.crosslink;
            let asym =
                (total[(1, 0)] - total[(0, 1)]).abs() / total[(1, 0)].abs().max(total[(0, 1)].abs());
            worst_asym = worst_asym.max(asym);
        }
    }
    let pass = worst_force <= 1e-12 && worst_torque <= 1e-12 && worst_asym <= 1e-4;
    report(
        9,
        "cross-link identities",
        pass,
        &format!(
            "net force ≤ {worst_force:.2e}, net torque ≤ {worst_torque:.2e} over 1200 links \
             (bounds 1e-12); stress asymmetry ≤ {worst_asym:.2e} (bound 1e-4)"
        ),
    );
}

// -------------------------------------------------------------------------
// 10. Rheology sensitivity on the F = 100 mesh over 6 shear periods:
//     coarse smoothing (σ/L = 0.1, N = 16) stays within 15% of the
//     σ/L = 0.05, N = 32 reference stress, and halving the drag
//     regularization δ moves the stress by at most 3%.
// -------------------------------------------------------------------------
#[test]
#[ignore = "four 6-period F=100 mesh runs take tens of minutes; run with --ignored"]
fn criterion_10_mesh_stress_insensitive_to_resolution_knobs() {
    let make = |n: usize, dt: f64, sigma: f64, delta: f64| {
        let mut c = builtin_config(Scenario::Mesh);
        c.fiber.count = 100;
        c.fiber.n = n;
        c.fiber.delta = delta;
        c.crosslinks = Some(CrosslinkConfig {
            count: 1200,
            kc: 1.0,
            ell: 0.5,
            sigma,
        });
        c.stepper.dt = dt;
        c.stepper.t_final = 6.0;
        c.stepper.snapshot_interval = None;
        c.seed = 3;
        c
    };
    let base = run_scenario(&make(16, 0.005, 0.2, 0.1)).expect("base runs");
    let reference = run_scenario(&make(32, 0.001, 0.1, 0.1)).expect("reference runs");
    let delta_half = run_scenario(&make(16, 0.005, 0.2, 0.05)).expect("δ variant runs");
    for out in [&base, &reference, &delta_half] {
        assert_eq!(out.outcome, RunOutcome::Completed);
    }
    // Same network in every run: binding on straight fibers is grid-free.
    assert_eq!(base.links, reference.links);

    // Relative L² difference of the network shear stress over the last
    // three periods, with the reference series interpolated in time.
    let rel_l2 = |run: &fiberflow::harness::ScenarioOutputs,
                  reference: &fiberflow::harness::ScenarioOutputs| {
        let rt: Vec<f64> = reference.stress.iter().map(|s| s.t).collect();
        let rv: Vec<f64> = reference.stress.iter().map(|s| s.total()).collect();
        let interp = |t: f64| {
            let j = rt.partition_point(|&x| x < t).clamp(1, rt.len() - 1);
            let w = (t - rt[j - 1]) / (rt[j] - rt[j - 1]);
            rv[j - 1] * (1.0 - w) + rv[j] * w
        };
        let (mut num, mut den) = (0.0, 0.0);
        for s in run.stress.iter().filter(|s| s.t >= 3.0) {
            let r = interp(s.t);
            num += (s.total() - r) * (s.total() - r);
            den += r * r;
        }
        (num / den).sqrt()
    };
    let smoothing_diff = rel_l2(&base, &reference);
    let delta_diff = rel_l2(&delta_half, &base);
    let pass = smoothing_diff <= 0.15 && delta_diff <= 0.03;
    report(
        10,
        "rheology sensitivity",
        pass,
        &format!(
            "stress moves {:.2}% under σ/N refinement (bound 15%) and {:.2}% under δ halving (bound 3%)",
            100.0 * smoothing_diff,
            100.0 * delta_diff
        ),
    );
}

// -------------------------------------------------------------------------
// 11. Hydrodynamic contribution to the viscous modulus at ω = 1 Hz on an
//     F = 150 mesh: nonlocal hydrodynamics raises G″ above local drag, and
//     the intra-fiber-only mobility recovers ≥ 80% of that excess.
// -------------------------------------------------------------------------
#[test]
#[ignore = "three moduli runs on an F=150 mesh take about an hour; run with --ignored"]
fn criterion_11_nonlocal_hydrodynamics_raises_viscous_modulus() {
    let make = |hydro: &str| {
        let mut c = builtin_config(Scenario::Mesh);
        c.fiber.count = 150;
        c.domain.ld = 2.4;
        c.crosslinks.as_mut().expect("mesh links").count = 1800;
        c.stepper.hydro = hydro.into();
        c.stepper.mode = if hydro == "local" { "block" } else { "gmres" }.into();
        c.stepper.gmres_iters = 1;
        c.ewald.tol = 1e-4;
        c.seed = 4;
        c
    };
    let omega = 2.0 * PI;
    let sweep = |hydro: &str| {
        let pts = moduli_sweep(&make(hydro), &[omega], 0.1).expect("sweep runs");
        pts[0].g_viscous
    };
    let local = sweep("local");
    let intra = sweep("intra");
    let full = sweep("full");
    let excess = full - local;
    let recovered = (intra - local) / excess;
    let pass = excess > 0.0 && recovered >= 0.8;
    report(
        11,
        "viscous modulus excess",
        pass,
        &format!(
            "G″ local {local:.4e}, intra {intra:.4e}, full {full:.4e}: excess {excess:.3e} > 0, \
             intra-fiber share {:.1}% (bound ≥ 80%)",
            100.0 * recovered
        ),
    );
}

// -------------------------------------------------------------------------
// 12. Post-shear relaxation of an F = 150 mesh: windowed mean fiber speeds
//     fit a double exponential with both time constants in [0.1, 5] s.
// -------------------------------------------------------------------------
#[test]
#[ignore = "15 seconds of F=150 mesh dynamics takes tens of minutes; run with --ignored"]
fn criterion_12_relaxation_fits_two_timescales() {
    let mut config = builtin_config(Scenario::Mesh);
    config.fiber.count = 150;
    config.domain.ld = 2.4;
    config.crosslinks.as_mut().expect("mesh links").count = 1800;
    config.flow = FlowConfig {
        gamma0: 0.02 * PI,
        omega: 0.2 * PI,
    };
    config.stepper.t_final = 10.0;
    config.seed = 4;
    let series = relaxation_run(&config, 0.05, 5.0).expect("relaxation runs");
    let fit = fit_double_exponential(&series.times, &series.speeds).expect("fit converges");
    let in_range = |tau: f64| (0.1..=5.0).contains(&tau);
    report(
        12,
        "relaxation timescales",
        in_range(fit.tau1) && in_range(fit.tau2),
        &format!(
            "v̄(t) ≈ {:.3e}·exp(−t/{:.3}) + {:.3e}·exp(−t/{:.3}), rms {:.2e} (τ bounds [0.1, 5] s)",
            fit.a1, fit.tau1, fit.a2, fit.tau2, fit.rms
        ),
    );
}

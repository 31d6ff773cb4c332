//! Configuration, scenario drivers, random fiber ensembles, accuracy
//! studies, and run-directory output plumbing.
//!
//! A run is described by a single TOML [`RunConfig`] naming one of four
//! built-in scenarios (a sedimenting fiber quartet, a three-fiber sheared
//! cell, a dense stability sweep, and a cross-linked mesh), the fiber
//! discretization, the periodic cell, the background shear, the stepper,
//! and optional cross-linking. [`run_scenario`] advances the suspension and
//! collects snapshots, per-step diagnostics, and midpoint stress samples;
//! [`write_outputs`] lays the bundle out on disk with a manifest that hashes
//! the configuration for exact reruns.
//!
//! Every stochastic draw (fiber generation, placement, binding, target
//! placement in studies) flows through a counter-based generator seeded per
//! purpose from the run seed, so identical configurations produce bitwise
//! identical outputs.
//!
//! A run is declared unstable — recorded in the outputs rather than raised
//! as an error — when any state component goes non-finite or the nodal
//! tangent norms deviate from 1 by more than [`TANGENT_STABILITY_TOL`].

use std::cell::RefCell;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::ShearedDomain;
use crate::error::{FiberflowError, Result};
use crate::ewald::{self, default_xi, EwaldPlan, FarFieldMethod};
use crate::fiber::{self, DragModel, FiberParams, FiberState, Vec3Series};
use crate::mobility::StokesKernelParams;
use crate::near_quadrature::{
    interaction_velocity, refined_reference_velocity, NearFiberContext, NearQuadParams,
    UpsampledRule,
};
use crate::network::{self, CrossLink, SmoothingKernel, StressSample};
use crate::spectral::{ChebGrid, ChebWorkspace, GridKind};
use crate::stepper::{
    BackgroundFlow, HydroMode, Simulation, SolveMode, StepRecord, StepperState,
};
use crate::util;

/// Tangent-norm deviation beyond which a run is declared unstable. The
/// rotation-based update keeps norms at rounding level for any stable
/// trajectory, so an excursion past this proxy only happens when the solve
/// has already lost the physics.
pub const TANGENT_STABILITY_TOL: f64 = 1e-6;

/// Cap on auto-selected snapshot count per run.
const MAX_SNAPSHOTS: usize = 200;

/// Draw budget at which the random-fiber acceptance rate is inspected.
const ACCEPTANCE_PROBE: u64 = 100_000;

// ---------------------------------------------------------------------------
// Named deterministic random streams
// ---------------------------------------------------------------------------

/// Seed for a named substream of a run seed. Different purposes (placement,
/// binding, study targets) get independent streams from one user seed.
pub fn stream_seed(seed: u64, name: &str) -> u64 {
    seed ^ util::fnv1a(name.as_bytes())
}

/// Counter-based generator for a named substream.
pub fn stream_rng(seed: u64, name: &str) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(stream_seed(seed, name))
}

/// Seed for the `i`-th member of a family (one per fiber, say) so members
/// can be processed in parallel without sharing a stream.
pub fn indexed_seed(base: u64, i: usize) -> u64 {
    base.wrapping_add((i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1))
}

fn random_unit_vector(rng: &mut ChaCha12Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        let n = v.norm();
        if n > 1e-6 {
            return v / n;
        }
    }
}

fn random_perpendicular(rng: &mut ChaCha12Rng, tau: &Vector3<f64>) -> Vector3<f64> {
    loop {
        let v = random_unit_vector(rng);
        let p = v - tau * tau.dot(&v);
        let n = p.norm();
        if n > 1e-6 {
            return p / n;
        }
    }
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Complete description of one simulation run, loadable from a single TOML
/// file. All physical quantities are in the library's working units
/// (lengths in the fiber-length unit, times in seconds, viscosity μ).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// One of `falling-quartet`, `three-fiber-shear`, `stability`, `mesh`.
    pub scenario: String,
    /// Fluid viscosity.
    #[serde(default = "default_mu")]
    pub mu: f64,
    /// Constant body force density applied to every node (e.g. gravity).
    #[serde(default)]
    pub body_force: [f64; 3],
    pub fiber: FiberConfig,
    #[serde(default)]
    pub domain: DomainConfig,
    #[serde(default)]
    pub flow: FlowConfig,
    pub stepper: StepperConfig,
    #[serde(default)]
    pub ewald: EwaldConfig,
    #[serde(default)]
    pub crosslinks: Option<CrosslinkConfig>,
    /// Master seed; all stochastic draws derive named substreams from it.
    #[serde(default)]
    pub seed: u64,
    /// Where [`write_outputs`] puts the run bundle; in-memory callers may
    /// leave it unset.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FiberConfig {
    /// Collocation nodes per fiber (≥ 4).
    pub n: usize,
    /// Number of fibers; fixed-geometry scenarios pin it.
    #[serde(default = "default_count")]
    pub count: usize,
    /// Fiber length L.
    pub length: f64,
    /// Slenderness ratio ε = radius / length.
    pub eps: f64,
    /// Bending rigidity κ.
    pub kappa: f64,
    /// Local-drag regularization width as a fraction of length; 0 selects
    /// the unregularized ellipsoidal drag coefficient.
    #[serde(default)]
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    /// `free-space` or `periodic-sheared`.
    pub boundary: String,
    /// Periodic cell edge (cubic cell); ignored in free space.
    #[serde(default)]
    pub ld: f64,
}

impl Default for DomainConfig {
    fn default() -> Self {
        DomainConfig {
            boundary: "free-space".into(),
            ld: 0.0,
        }
    }
}

/// Oscillatory background shear u = γ̇₀ cos(ωt) (y, 0, 0); ω = 0 gives
/// steady shear, γ̇₀ = 0 a quiescent fluid.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    /// Shear-rate amplitude γ̇₀.
    #[serde(default)]
    pub gamma0: f64,
    /// Angular frequency ω in rad/s.
    #[serde(default)]
    pub omega: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepperConfig {
    /// Time step Δt.
    pub dt: f64,
    /// Final time; must be an integer multiple of Δt.
    pub t_final: f64,
    /// Inter-fiber solve: `block` or `gmres`.
    #[serde(default = "default_mode")]
    pub mode: String,
    /// GMRES iterations per step when `mode = "gmres"`.
    #[serde(default = "default_gmres_iters")]
    pub gmres_iters: usize,
    /// Hydrodynamic range: `local` (drag only), `intra` (adds the on-fiber
    /// integral), or `full` (adds fiber-fiber interactions, free-space or
    /// periodic per the domain).
    #[serde(default = "default_hydro")]
    pub hydro: String,
    /// Include the on-fiber finite-part integral in nonlocal evaluations.
    #[serde(default = "default_true")]
    pub finite_part: bool,
    /// Repair near fiber-fiber integrals with the adaptive quadrature.
    #[serde(default = "default_true")]
    pub special_quadrature: bool,
    /// Trajectory snapshot spacing; must be a multiple of Δt. Unset selects
    /// a spacing that keeps at most 200 snapshots.
    #[serde(default)]
    pub snapshot_interval: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EwaldConfig {
    /// Splitting parameter ξ; unset picks a balanced default.
    #[serde(default)]
    pub xi: Option<f64>,
    /// Truncation tolerance for both the real-space and Fourier sums.
    #[serde(default = "default_ewald_tol")]
    pub tol: f64,
    /// Far-field evaluation: `gridded` (FFT) or `dense` (direct k-sum).
    #[serde(default = "default_far_field")]
    pub far_field: String,
}

impl Default for EwaldConfig {
    fn default() -> Self {
        EwaldConfig {
            xi: None,
            tol: 1e-6,
            far_field: "gridded".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrosslinkConfig {
    /// Number of links bound at t = 0.
    pub count: usize,
    /// Spring constant K.
    pub kc: f64,
    /// Rest length; also the maximum binding distance.
    pub ell: f64,
    /// Gaussian smoothing width (arclength units) spreading anchor forces
    /// along each fiber.
    pub sigma: f64,
}

fn default_mu() -> f64 {
    1.0
}
fn default_count() -> usize {
    1
}
fn default_mode() -> String {
    "gmres".into()
}
fn default_gmres_iters() -> usize {
    1
}
fn default_hydro() -> String {
    "full".into()
}
fn default_true() -> bool {
    true
}
fn default_ewald_tol() -> f64 {
    1e-6
}
fn default_far_field() -> String {
    "gridded".into()
}

/// The built-in experiment families.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scenario {
    /// Four parallel fibers sedimenting under a uniform body force.
    FallingQuartet,
    /// Three fibers in a periodically sheared cell.
    ThreeFiberShear,
    /// Many straight fibers under oscillatory shear at varying density.
    Stability,
    /// A cross-linked fiber network.
    Mesh,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::FallingQuartet => "falling-quartet",
            Scenario::ThreeFiberShear => "three-fiber-shear",
            Scenario::Stability => "stability",
            Scenario::Mesh => "mesh",
        }
    }
}

pub fn parse_scenario(name: &str) -> Result<Scenario> {
    match name.trim().to_ascii_lowercase().as_str() {
        "falling-quartet" | "quartet" => Ok(Scenario::FallingQuartet),
        "three-fiber-shear" | "three-fiber" => Ok(Scenario::ThreeFiberShear),
        "stability" | "stability-sweep" => Ok(Scenario::Stability),
        "mesh" | "crosslinked-mesh" => Ok(Scenario::Mesh),
        other => Err(FiberflowError::Config(format!(
            "unknown scenario {other:?}; expected falling-quartet, three-fiber-shear, stability, or mesh"
        ))),
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<RunConfig> {
        let config: RunConfig = toml::from_str(text)
            .map_err(|e| FiberflowError::Config(format!("config parse error: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| {
            FiberflowError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| FiberflowError::Output(format!("config serialization failed: {e}")))
    }

    pub fn scenario_kind(&self) -> Result<Scenario> {
        parse_scenario(&self.scenario)
    }

    pub fn drag_model(&self) -> DragModel {
        if self.fiber.delta > 0.0 {
            DragModel::Regularized {
                delta: self.fiber.delta,
            }
        } else {
            DragModel::Ellipsoidal
        }
    }

    pub fn solve_mode(&self) -> Result<SolveMode> {
        match self.stepper.mode.as_str() {
            "block" => Ok(SolveMode::BlockDiagonal),
            "gmres" => Ok(SolveMode::Gmres {
                iters: self.stepper.gmres_iters,
            }),
            other => Err(FiberflowError::Config(format!(
                "unknown solve mode {other:?}; expected block or gmres"
            ))),
        }
    }

    pub fn periodic(&self) -> bool {
        self.domain.boundary == "periodic-sheared"
    }

    pub fn edges(&self) -> Option<Vector3<f64>> {
        if self.periodic() {
            Some(Vector3::new(self.domain.ld, self.domain.ld, self.domain.ld))
        } else {
            None
        }
    }

    pub fn hydro_mode(&self) -> Result<HydroMode> {
        match (self.stepper.hydro.as_str(), self.periodic()) {
            ("local", _) => Ok(HydroMode::LocalOnly),
            ("intra", _) => Ok(HydroMode::IntraOnly),
            ("full", false) => Ok(HydroMode::FreeSpaceDirect),
            ("full", true) => Ok(HydroMode::PeriodicEwald),
            (other, _) => Err(FiberflowError::Config(format!(
                "unknown hydro range {other:?}; expected local, intra, or full"
            ))),
        }
    }

    pub fn background_flow(&self) -> BackgroundFlow {
        if self.flow.gamma0 == 0.0 {
            BackgroundFlow::Quiescent
        } else {
            BackgroundFlow::OscillatoryShear {
                gamma0: self.flow.gamma0,
                omega: self.flow.omega,
            }
        }
    }

    /// Number of steps; `t_final` must be an integer multiple of `dt`.
    pub fn nsteps(&self) -> Result<usize> {
        let ratio = self.stepper.t_final / self.stepper.dt;
        let n = ratio.round();
        if n < 1.0 || (ratio - n).abs() > 1e-6 * ratio.max(1.0) {
            return Err(FiberflowError::Config(format!(
                "t_final = {} is not an integer multiple of dt = {}",
                self.stepper.t_final, self.stepper.dt
            )));
        }
        Ok(n as usize)
    }

    pub fn validate(&self) -> Result<()> {
        let scenario = self.scenario_kind()?;
        let f = &self.fiber;
        if f.n < 4 {
            return Err(FiberflowError::Config(format!(
                "fiber.n = {} but the spectral grid needs at least 4 nodes",
                f.n
            )));
        }
        if !(f.length > 0.0 && f.eps > 0.0 && f.eps < 0.1) {
            return Err(FiberflowError::Config(format!(
                "need fiber length > 0 and slenderness in (0, 0.1); got {} and {}",
                f.length, f.eps
            )));
        }
        if !(f.kappa >= 0.0) || !(f.delta >= 0.0 && f.delta < 0.5) {
            return Err(FiberflowError::Config(format!(
                "need kappa ≥ 0 and delta in [0, 0.5); got {} and {}",
                f.kappa, f.delta
            )));
        }
        if !(self.mu > 0.0) {
            return Err(FiberflowError::Config(format!(
                "viscosity must be positive, got {}",
                self.mu
            )));
        }
        if !self.body_force.iter().all(|c| c.is_finite()) {
            return Err(FiberflowError::Config(
                "body force components must be finite".into(),
            ));
        }

        match self.domain.boundary.as_str() {
            "free-space" => {}
            "periodic-sheared" => {
                if !(self.domain.ld > 0.0) {
                    return Err(FiberflowError::Config(format!(
                        "periodic cell needs a positive edge, got {}",
                        self.domain.ld
                    )));
                }
            }
            other => {
                return Err(FiberflowError::Config(format!(
                    "unknown boundary {other:?}; expected free-space or periodic-sheared"
                )))
            }
        }

        if !(self.flow.gamma0 >= 0.0 && self.flow.omega >= 0.0) {
            return Err(FiberflowError::Config(format!(
                "flow amplitudes must be non-negative; got gamma0 = {}, omega = {}",
                self.flow.gamma0, self.flow.omega
            )));
        }

        let st = &self.stepper;
        if !(st.dt > 0.0 && st.t_final > 0.0) {
            return Err(FiberflowError::Config(format!(
                "need positive dt and t_final; got {} and {}",
                st.dt, st.t_final
            )));
        }
        self.nsteps()?;
        self.solve_mode()?;
        if matches!(self.solve_mode()?, SolveMode::Gmres { iters } if iters < 1) {
            return Err(FiberflowError::Config(
                "gmres mode needs at least one iteration per step".into(),
            ));
        }
        self.hydro_mode()?;
        if let Some(h) = st.snapshot_interval {
            let ratio = h / st.dt;
            if !(h > 0.0) || (ratio - ratio.round()).abs() > 1e-6 * ratio.max(1.0) {
                return Err(FiberflowError::Config(format!(
                    "snapshot_interval = {h} must be a positive multiple of dt = {}",
                    st.dt
                )));
            }
        }

        if matches!(self.hydro_mode()?, HydroMode::PeriodicEwald) {
            let e = &self.ewald;
            if !(e.tol > 0.0) {
                return Err(FiberflowError::Config(format!(
                    "Ewald tolerance must be positive, got {}",
                    e.tol
                )));
            }
            if let Some(xi) = e.xi {
                if !(xi > 0.0) {
                    return Err(FiberflowError::Config(format!(
                        "Ewald xi must be positive, got {xi}"
                    )));
                }
            }
            self.ewald.method()?;
        }

        if let Some(cl) = &self.crosslinks {
            if scenario != Scenario::Mesh {
                return Err(FiberflowError::Config(
                    "cross-links are only meaningful in the mesh scenario".into(),
                ));
            }
            if !self.periodic() {
                return Err(FiberflowError::Config(
                    "cross-link binding needs a periodic cell".into(),
                ));
            }
            if cl.count < 1 || !(cl.kc > 0.0 && cl.ell > 0.0 && cl.sigma > 0.0) {
                return Err(FiberflowError::Config(format!(
                    "cross-links need count ≥ 1 and positive kc, ell, sigma; got {}, {}, {}, {}",
                    cl.count, cl.kc, cl.ell, cl.sigma
                )));
            }
        }

        match scenario {
            Scenario::FallingQuartet => {
                if f.count != 4 {
                    return Err(FiberflowError::Config(format!(
                        "falling-quartet uses exactly 4 fibers, got {}",
                        f.count
                    )));
                }
                if self.periodic() {
                    return Err(FiberflowError::Config(
                        "falling-quartet runs in free space".into(),
                    ));
                }
            }
            Scenario::ThreeFiberShear => {
                if f.count != 3 {
                    return Err(FiberflowError::Config(format!(
                        "three-fiber-shear uses exactly 3 fibers, got {}",
                        f.count
                    )));
                }
                if !self.periodic() {
                    return Err(FiberflowError::Config(
                        "three-fiber-shear needs a periodic cell".into(),
                    ));
                }
            }
            Scenario::Stability => {
                if f.count < 1 {
                    return Err(FiberflowError::Config("stability needs fibers".into()));
                }
                if !self.periodic() {
                    return Err(FiberflowError::Config(
                        "the stability sweep needs a periodic cell".into(),
                    ));
                }
            }
            Scenario::Mesh => {
                if f.count < 2 {
                    return Err(FiberflowError::Config(
                        "a mesh needs at least two fibers".into(),
                    ));
                }
                if !self.periodic() {
                    return Err(FiberflowError::Config(
                        "the mesh scenario needs a periodic cell".into(),
                    ));
                }
                if self.crosslinks.is_none() {
                    return Err(FiberflowError::Config(
                        "the mesh scenario needs a [crosslinks] section".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

impl EwaldConfig {
    pub fn method(&self) -> Result<FarFieldMethod> {
        match self.far_field.as_str() {
            "dense" => Ok(FarFieldMethod::Dense),
            "gridded" => Ok(FarFieldMethod::Gridded),
            other => Err(FiberflowError::Config(format!(
                "unknown far-field method {other:?}; expected dense or gridded"
            ))),
        }
    }
}

/// Ready-to-run configuration for each built-in scenario, using the
/// standard experiment parameters. Callers tweak fields before running.
pub fn builtin_config(scenario: Scenario) -> RunConfig {
    match scenario {
        Scenario::FallingQuartet => RunConfig {
            scenario: scenario.name().into(),
            mu: 1.0,
            body_force: [0.0, 0.0, -5.0],
            fiber: FiberConfig {
                n: 16,
                count: 4,
                length: 2.0,
                eps: 1e-3,
                kappa: 1.0,
                delta: 0.0,
            },
            domain: DomainConfig::default(),
            flow: FlowConfig::default(),
            stepper: StepperConfig {
                dt: 2.5e-3,
                t_final: 0.25,
                mode: "block".into(),
                gmres_iters: 1,
                hydro: "full".into(),
                finite_part: false,
                special_quadrature: false,
                snapshot_interval: Some(0.025),
            },
            ewald: EwaldConfig::default(),
            crosslinks: None,
            seed: 0,
            output_dir: None,
        },
        Scenario::ThreeFiberShear => RunConfig {
            scenario: scenario.name().into(),
            mu: 1.0,
            body_force: [0.0; 3],
            fiber: FiberConfig {
                n: 16,
                count: 3,
                length: 2.0,
                eps: 1e-3,
                kappa: 0.01,
                delta: 0.0,
            },
            domain: DomainConfig {
                boundary: "periodic-sheared".into(),
                ld: 2.4,
            },
            flow: FlowConfig {
                gamma0: 1.0,
                omega: 0.0,
            },
            stepper: StepperConfig {
                dt: 0.05,
                t_final: 2.4,
                mode: "gmres".into(),
                gmres_iters: 1,
                hydro: "full".into(),
                finite_part: true,
                special_quadrature: true,
                snapshot_interval: Some(0.4),
            },
            ewald: EwaldConfig {
                xi: Some(3.0),
                tol: 1e-6,
                far_field: "gridded".into(),
            },
            crosslinks: None,
            seed: 0,
            output_dir: None,
        },
        Scenario::Stability => RunConfig {
            scenario: scenario.name().into(),
            mu: 1.0,
            body_force: [0.0; 3],
            fiber: FiberConfig {
                n: 16,
                count: 1000,
                length: 2.0,
                eps: 1e-3,
                kappa: 0.01,
                delta: 0.0,
            },
            domain: DomainConfig {
                boundary: "periodic-sheared".into(),
                // Semi-dilute default: ε F L³ / Ld³ = 0.01.
                ld: (1e-3 * 1000.0 * 8.0 / 0.01_f64).cbrt(),
            },
            flow: FlowConfig {
                gamma0: 0.2 * std::f64::consts::PI,
                omega: 2.0 * std::f64::consts::PI,
            },
            stepper: StepperConfig {
                dt: 0.05,
                t_final: 5.0,
                mode: "gmres".into(),
                gmres_iters: 1,
                hydro: "full".into(),
                finite_part: true,
                special_quadrature: true,
                snapshot_interval: Some(0.5),
            },
            ewald: EwaldConfig {
                xi: None,
                tol: 1e-4,
                far_field: "gridded".into(),
            },
            crosslinks: None,
            seed: 0,
            output_dir: None,
        },
        Scenario::Mesh => RunConfig {
            scenario: scenario.name().into(),
            mu: 1.0,
            body_force: [0.0; 3],
            fiber: FiberConfig {
                n: 16,
                count: 700,
                length: 2.0,
                eps: 1e-3,
                kappa: 0.01,
                delta: 0.1,
            },
            domain: DomainConfig {
                boundary: "periodic-sheared".into(),
                ld: 4.0,
            },
            flow: FlowConfig {
                gamma0: 0.2 * std::f64::consts::PI,
                omega: 2.0 * std::f64::consts::PI,
            },
            stepper: StepperConfig {
                dt: 0.005,
                t_final: 6.0,
                mode: "block".into(),
                gmres_iters: 1,
                hydro: "local".into(),
                finite_part: true,
                special_quadrature: true,
                snapshot_interval: Some(0.25),
            },
            ewald: EwaldConfig::default(),
            crosslinks: Some(CrosslinkConfig {
                count: 8400,
                kc: 1.0,
                ell: 0.5,
                sigma: 0.2,
            }),
            seed: 0,
            output_dir: None,
        },
    }
}

// ---------------------------------------------------------------------------
// Random fiber ensembles
// ---------------------------------------------------------------------------

/// Smooth random fiber construction: each unnormalized tangent component is
/// a Chebyshev series whose mode-k coefficient is Gaussian with standard
/// deviation `exp(-decay·k)`; the tangent is normalized at the nodes and
/// integrated to positions. A draw is accepted only if the position series
/// decays like `‖â_k‖ ≤ e^{−0.61k}` for modes k = 2..16, which keeps the
/// trailing coefficient at the 1e−4 level.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RandomFiberSpec {
    /// Collocation nodes of the generated fibers.
    pub n: usize,
    pub length: f64,
    /// Number of random tangent modes (k = 0..modes).
    pub modes: usize,
    /// Exponential decay rate of the mode standard deviations.
    pub decay: f64,
}

impl RandomFiberSpec {
    pub fn new(n: usize, length: f64) -> Self {
        RandomFiberSpec {
            n,
            length,
            modes: 16,
            decay: 10.0 / n as f64,
        }
    }
}

/// One unconditioned draw (no smoothness gate), anchored at the origin.
pub fn draw_random_fiber(
    spec: &RandomFiberSpec,
    ws: &ChebWorkspace,
    rng: &mut ChaCha12Rng,
) -> FiberState {
    let mut coeffs = [
        vec![0.0; spec.modes],
        vec![0.0; spec.modes],
        vec![0.0; spec.modes],
    ];
    for k in 0..spec.modes {
        let std = (-spec.decay * k as f64).exp();
        for comp in coeffs.iter_mut() {
            comp[k] = std * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let series = Vec3Series::from_coeffs(coeffs, spec.length);
    let tau: Vec<Vector3<f64>> = ws
        .grid
        .nodes
        .iter()
        .map(|&s| {
            let t = series.eval_s(s);
            t / t.norm()
        })
        .collect();
    FiberState::from_tangents(ws, tau, Vector3::zeros())
}

/// Smoothness gate on the position Chebyshev coefficients: vector norm of
/// mode k at most `e^{−0.61k}` for k = 2..16. Constant and linear modes
/// (center placement and mean direction) are unconstrained.
pub fn smoothness_gate(state: &FiberState, ws: &ChebWorkspace) -> bool {
    let series = Vec3Series::from_values(ws, &state.x);
    let kmax = ws.n.min(16);
    for k in 2..kmax {
        let a = Vector3::new(
            series.comp[0].coeffs[k],
            series.comp[1].coeffs[k],
            series.comp[2].coeffs[k],
        );
        if !(a.norm() <= (-0.61 * k as f64).exp()) {
            return false;
        }
    }
    true
}

/// Rejection-sample `count` smooth random fibers. Errors out if the gate
/// accepts less than 1% of draws once 10⁵ draws have been spent, which
/// indicates an unusable spec rather than bad luck.
pub fn generate_random_fibers(
    spec: &RandomFiberSpec,
    count: usize,
    seed: u64,
) -> Result<Vec<FiberState>> {
    let ws = ChebWorkspace::new(spec.n, spec.length);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    let mut draws: u64 = 0;
    while out.len() < count {
        draws += 1;
        let state = draw_random_fiber(spec, &ws, &mut rng);
        if smoothness_gate(&state, &ws) {
            out.push(state);
        }
        if draws >= ACCEPTANCE_PROBE && (out.len() as f64) < 0.01 * draws as f64 {
            return Err(FiberflowError::Config(format!(
                "random-fiber acceptance rate {:.3e} over {draws} draws is below 1%; \
                 the spec (decay {:.3}, {} modes) fights its own smoothness gate",
                out.len() as f64 / draws as f64,
                spec.decay,
                spec.modes
            )));
        }
    }
    Ok(out)
}

/// Interpolate a fiber onto a different grid. Positions and tangents are
/// evaluated from their spectral interpolants, so a smooth fiber keeps its
/// shape to spectral accuracy.
pub fn resample_fiber(
    state: &FiberState,
    ws_from: &ChebWorkspace,
    ws_to: &ChebWorkspace,
) -> FiberState {
    let xs = Vec3Series::from_values(ws_from, &state.x);
    let ts = Vec3Series::from_values(ws_from, &state.tau);
    let x = ws_to.grid.nodes.iter().map(|&s| xs.eval_s(s)).collect();
    let tau = ws_to.grid.nodes.iter().map(|&s| ts.eval_s(s)).collect();
    FiberState { x, tau }
}

/// `count` straight fibers with uniformly random orientations, centers
/// uniform in the cubic cell of edge `ld`.
pub fn scatter_straight_fibers(
    count: usize,
    ws: &ChebWorkspace,
    ld: f64,
    seed: u64,
) -> Vec<FiberState> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let tau = random_unit_vector(&mut rng);
            let center = Vector3::new(
                rng.random::<f64>() * ld,
                rng.random::<f64>() * ld,
                rng.random::<f64>() * ld,
            );
            let x0 = center - tau * (ws.length / 2.0);
            FiberState::from_tangents(ws, vec![tau; ws.n], x0)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Scenario setup
// ---------------------------------------------------------------------------

/// Initial fiber states and cross-links for a validated configuration.
pub fn initial_states(
    config: &RunConfig,
) -> Result<(ChebWorkspace, Vec<FiberState>, Vec<CrossLink>)> {
    config.validate()?;
    let ws = ChebWorkspace::new(config.fiber.n, config.fiber.length);
    let n = ws.n;
    let states = match config.scenario_kind()? {
        Scenario::FallingQuartet => {
            let up = Vector3::new(0.0, 0.0, 1.0);
            [
                Vector3::new(0.2, 0.0, 0.0),
                Vector3::new(-0.2, 0.0, 0.0),
                Vector3::new(0.0, 0.2, 0.0),
                Vector3::new(0.0, -0.2, 0.0),
            ]
            .iter()
            .map(|&base| FiberState::from_tangents(&ws, vec![up; n], base))
            .collect()
        }
        Scenario::ThreeFiberShear => {
            let ex = Vector3::new(1.0, 0.0, 0.0);
            let ey = Vector3::new(0.0, 1.0, 0.0);
            vec![
                FiberState::from_tangents(&ws, vec![ex; n], Vector3::new(-1.0, -0.6, -0.04)),
                FiberState::from_tangents(&ws, vec![ey; n], Vector3::new(0.0, -1.0, 0.0)),
                FiberState::from_tangents(&ws, vec![ex; n], Vector3::new(-1.0, 0.6, 0.06)),
            ]
        }
        Scenario::Stability | Scenario::Mesh => scatter_straight_fibers(
            config.fiber.count,
            &ws,
            config.domain.ld,
            stream_seed(config.seed, "placement"),
        ),
    };

    let links = if let Some(cl) = &config.crosslinks {
        let edges = config.edges().expect("validated: cross-links imply a periodic cell");
        network::bind_links(
            &states,
            &ws,
            cl.count,
            cl.kc,
            cl.ell,
            stream_seed(config.seed, "binding"),
            &ShearedDomain::new(edges, 0.0),
        )?
    } else {
        Vec::new()
    };
    Ok((ws, states, links))
}

fn build_simulation(config: &RunConfig, dt: f64, flow: BackgroundFlow) -> Result<Simulation> {
    let params = FiberParams::new(
        config.fiber.n,
        config.fiber.length,
        config.fiber.eps,
        config.fiber.kappa,
        config.drag_model(),
    );
    let hydro = config.hydro_mode()?;
    let mut sim = Simulation::new(params, config.mu, dt, config.solve_mode()?, hydro, flow)?
        .with_finite_part(config.stepper.finite_part)
        .with_special_quadrature(config.stepper.special_quadrature);
    if matches!(hydro, HydroMode::PeriodicEwald) {
        let edges = config.edges().expect("validated: periodic mode has a cell");
        let b = sim.kernel.b;
        let xi = config
            .ewald
            .xi
            .unwrap_or_else(|| default_xi(edges, b, config.mu, config.ewald.tol));
        let plan = EwaldPlan::new(xi, b, config.mu, config.ewald.tol, edges, config.ewald.method()?)?;
        sim = sim.with_periodic(edges, plan);
    }
    Ok(sim)
}

/// Shared per-run context for the external-force hook and stress sampling.
struct RunAux {
    ws: ChebWorkspace,
    links: Vec<CrossLink>,
    smoothing: Option<SmoothingKernel>,
    edges: Option<Vector3<f64>>,
    body_force: Vector3<f64>,
    kappa: f64,
    mu: f64,
    /// Periodic cell volume; 0 disables stress sampling (free space).
    volume: f64,
}

impl RunAux {
    fn new(config: &RunConfig, ws: ChebWorkspace, links: Vec<CrossLink>) -> RunAux {
        let edges = config.edges();
        RunAux {
            ws,
            links,
            smoothing: config.crosslinks.as_ref().map(|c| SmoothingKernel::new(c.sigma)),
            edges,
            body_force: Vector3::from(config.body_force),
            kappa: config.fiber.kappa,
            mu: config.mu,
            volume: edges.map_or(0.0, |e| e.x * e.y * e.z),
        }
    }
}

/// One step with the run's external forces (body force and cross-link
/// springs) applied through the midpoint hook. Hook failures are smuggled
/// out through a cell because the hook signature is infallible.
fn hooked_step(
    sim: &mut Simulation,
    aux: &RunAux,
    state: &mut StepperState,
) -> Result<StepRecord> {
    let hook_err: RefCell<Option<FiberflowError>> = RefCell::new(None);
    let needs_hook = aux.body_force != Vector3::zeros() || !aux.links.is_empty();
    let record = if needs_hook {
        let n = aux.ws.n;
        let hook = |states: &[FiberState], _t: f64, g: f64| -> Vec<Vec<Vector3<f64>>> {
            let mut f = vec![vec![aux.body_force; n]; states.len()];
            if !aux.links.is_empty() {
                let edges = aux.edges.expect("links imply a periodic cell");
                let smoothing = aux.smoothing.as_ref().expect("links imply a smoothing kernel");
                let domain = ShearedDomain::new(edges, g);
                match network::cl_force_density(&aux.links, states, &aux.ws, smoothing, &domain) {
                    Ok(fc) => {
                        for (fi, ci) in f.iter_mut().zip(fc) {
                            for (a, b) in fi.iter_mut().zip(ci) {
                                *a += b;
                            }
                        }
                    }
                    Err(e) => *hook_err.borrow_mut() = Some(e),
                }
            }
            f
        };
        sim.step(state, Some(&hook))?
    } else {
        sim.step(state, None)?
    };
    if let Some(e) = hook_err.borrow_mut().take() {
        return Err(e);
    }
    Ok(record)
}

// ---------------------------------------------------------------------------
// Stress sampling
// ---------------------------------------------------------------------------

/// Volume-averaged stress tensors at one midpoint solve, split by origin.
#[derive(Clone, Debug)]
pub struct StressTensors {
    /// Constraint-plus-bending fiber contribution.
    pub fiber: Matrix3<f64>,
    /// Cross-link spring contribution.
    pub crosslink: Matrix3<f64>,
}

/// Stress tensors from one step record: fiber force densities are the
/// constraint forces λ plus the bending force evaluated at the midpoint
/// positions the solve used; cross-link stress sums the link virial over
/// bound image pairs at the midpoint strain.
pub fn stress_tensors_from_record(
    record: &StepRecord,
    ws: &ChebWorkspace,
    kappa: f64,
    links: &[CrossLink],
    smoothing: Option<&SmoothingKernel>,
    edges: Vector3<f64>,
    volume: f64,
) -> Result<StressTensors> {
    let bend_op = fiber::bending_matrix(ws, kappa);
    let mut force = Vec::with_capacity(record.xstar.len());
    for (lam, xs) in record.lambda.iter().zip(&record.xstar) {
        let lam_nodes = fiber::unflatten(lam);
        let bend = fiber::apply_scalar_op(&bend_op, xs);
        force.push(
            lam_nodes
                .iter()
                .zip(bend)
                .map(|(l, b)| l + b)
                .collect::<Vec<_>>(),
        );
    }
    let fiber_stress = network::batchelor_stress(&record.xstar, &force, &ws.grid.weights, volume);
    let crosslink = if links.is_empty() {
        Matrix3::zeros()
    } else {
        let smoothing = smoothing.ok_or_else(|| {
            FiberflowError::Config("cross-link stress needs the smoothing kernel".into())
        })?;
        let domain = ShearedDomain::new(edges, record.g_mid);
        network::crosslink_stress(links, &record.xstar, ws, smoothing, &domain, volume)?
    };
    Ok(StressTensors {
        fiber: fiber_stress,
        crosslink,
    })
}

fn sample_stress(
    record: &StepRecord,
    aux: &RunAux,
    flow: &BackgroundFlow,
) -> Result<(StressSample, f64)> {
    let tensors = stress_tensors_from_record(
        record,
        &aux.ws,
        aux.kappa,
        &aux.links,
        aux.smoothing.as_ref(),
        aux.edges.expect("stress sampling needs a periodic cell"),
        aux.volume,
    )?;
    let fluid = aux.mu * flow.shear_rate(record.t_mid);
    Ok((
        StressSample {
            t: record.t_mid,
            fiber: tensors.fiber[(1, 0)],
            crosslink: tensors.crosslink[(1, 0)],
        },
        fluid,
    ))
}

// ---------------------------------------------------------------------------
// Scenario driver
// ---------------------------------------------------------------------------

/// How a run ended.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum RunOutcome {
    Completed,
    /// The instability proxy tripped (non-finite state or tangent-norm
    /// deviation beyond [`TANGENT_STABILITY_TOL`]), or the inner solve
    /// reported a numerical failure.
    Unstable { step: usize, t: f64, reason: String },
}

impl RunOutcome {
    pub fn label(&self) -> String {
        match self {
            RunOutcome::Completed => "completed".into(),
            RunOutcome::Unstable { step, t, reason } => {
                format!("unstable at step {step} (t = {t:.6}): {reason}")
            }
        }
    }
}

/// Per-step diagnostics kept for the log.
#[derive(Clone, Debug, Serialize)]
pub struct StepLogEntry {
    pub step: usize,
    pub t: f64,
    pub hydro_evals: u64,
    pub tangent_deviation: f64,
    pub gmres_residual: Option<f64>,
    pub gmres_iters: usize,
}

/// Everything a scenario run produces, in memory.
pub struct ScenarioOutputs {
    pub config: RunConfig,
    pub outcome: RunOutcome,
    pub snapshot_times: Vec<f64>,
    pub snapshots: Vec<Vec<FiberState>>,
    /// Midpoint shear-stress samples (periodic runs only), one per step.
    pub stress: Vec<StressSample>,
    /// Background-fluid shear stress μ γ̇(t_mid) alongside each sample.
    pub fluid_stress: Vec<f64>,
    pub step_log: Vec<StepLogEntry>,
    pub links: Vec<CrossLink>,
    pub hydro_evals: u64,
    pub max_tangent_deviation: f64,
}

/// Run one configured scenario to completion (or to instability) and
/// collect snapshots, stress samples, and diagnostics.
pub fn run_scenario(config: &RunConfig) -> Result<ScenarioOutputs> {
    let (ws, states, links) = initial_states(config)?;
    let mut sim = build_simulation(config, config.stepper.dt, config.background_flow())?;
    let aux = RunAux::new(config, ws, links);
    let nsteps = config.nsteps()?;
    let snap_every = match config.stepper.snapshot_interval {
        Some(h) => (h / config.stepper.dt).round() as usize,
        None => nsteps.div_ceil(MAX_SNAPSHOTS).max(1),
    };
    let collect_stress = aux.volume > 0.0;

    let mut state = StepperState::new(states);
    let mut outputs = ScenarioOutputs {
        config: config.clone(),
        outcome: RunOutcome::Completed,
        snapshot_times: vec![0.0],
        snapshots: vec![state.fibers.clone()],
        stress: Vec::new(),
        fluid_stress: Vec::new(),
        step_log: Vec::with_capacity(nsteps),
        links: aux.links.clone(),
        hydro_evals: 0,
        max_tangent_deviation: 0.0,
    };

    for k in 0..nsteps {
        let record = match hooked_step(&mut sim, &aux, &mut state) {
            Ok(r) => r,
            Err(FiberflowError::Numerical(reason)) => {
                outputs.outcome = RunOutcome::Unstable {
                    step: k,
                    t: state.t,
                    reason,
                };
                break;
            }
            Err(e) => return Err(e),
        };
        let dev = record.diagnostics.max_tangent_deviation;
        outputs.max_tangent_deviation = outputs.max_tangent_deviation.max(dev);
        if collect_stress {
            let (sample, fluid) = sample_stress(&record, &aux, &sim.flow)?;
            outputs.stress.push(sample);
            outputs.fluid_stress.push(fluid);
        }
        outputs.step_log.push(StepLogEntry {
            step: k,
            t: state.t,
            hydro_evals: record.diagnostics.hydro_evals,
            tangent_deviation: dev,
            gmres_residual: record.diagnostics.gmres_residual,
            gmres_iters: record.diagnostics.gmres_iters,
        });

        let finite = state
            .fibers
            .iter()
            .all(|f| f.x.iter().chain(&f.tau).all(|v| v.iter().all(|c| c.is_finite())));
        if !finite || dev > TANGENT_STABILITY_TOL {
            outputs.outcome = RunOutcome::Unstable {
                step: k,
                t: state.t,
                reason: if finite {
                    format!(
                        "tangent norm deviation {dev:.3e} exceeds {TANGENT_STABILITY_TOL:.1e}"
                    )
                } else {
                    "non-finite state".into()
                },
            };
            break;
        }
        if (k + 1) % snap_every == 0 {
            outputs.snapshot_times.push(state.t);
            outputs.snapshots.push(state.fibers.clone());
        }
    }
    if outputs.outcome == RunOutcome::Completed && nsteps % snap_every != 0 {
        outputs.snapshot_times.push(state.t);
        outputs.snapshots.push(state.fibers.clone());
    }
    outputs.hydro_evals = sim.hydro_eval_count();
    Ok(outputs)
}

// ---------------------------------------------------------------------------
// Trajectory error norms and convergence tables
// ---------------------------------------------------------------------------

/// L² function-norm distance between two position interpolants, evaluated
/// by sampling both on a fine endpoint-including grid and integrating with
/// its quadrature weights.
pub fn position_l2_distance(a: &Vec3Series, b: &Vec3Series, npoints: usize) -> f64 {
    let grid = ChebGrid::new(GridKind::Second, npoints, a.length);
    let mut acc = 0.0;
    for (&s, &w) in grid.nodes.iter().zip(&grid.weights) {
        acc += (a.eval_s(s) - b.eval_s(s)).norm_squared() * w;
    }
    acc.sqrt()
}

/// Max over common snapshot times of the first fiber's L² position
/// distance between two runs. Grids may differ; both interpolants are
/// compared on a 1000-point reference grid.
pub fn trajectory_distance(a: &ScenarioOutputs, b: &ScenarioOutputs) -> Result<f64> {
    let wsa = ChebWorkspace::new(a.config.fiber.n, a.config.fiber.length);
    let wsb = ChebWorkspace::new(b.config.fiber.n, b.config.fiber.length);
    let mut worst: f64 = 0.0;
    let mut matched = 0;
    for (ia, &ta) in a.snapshot_times.iter().enumerate() {
        if ta == 0.0 {
            continue;
        }
        let Some(ib) = b
            .snapshot_times
            .iter()
            .position(|&tb| (tb - ta).abs() <= 1e-9 * ta.max(1.0))
        else {
            continue;
        };
        matched += 1;
        let sa = Vec3Series::from_values(&wsa, &a.snapshots[ia][0].x);
        let sb = Vec3Series::from_values(&wsb, &b.snapshots[ib][0].x);
        worst = worst.max(position_l2_distance(&sa, &sb, 1000));
    }
    if matched == 0 {
        return Err(FiberflowError::Config(
            "runs share no snapshot times after t = 0; align snapshot_interval".into(),
        ));
    }
    Ok(worst)
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct ConvergenceRow {
    pub dt: f64,
    pub error: f64,
}

/// Temporal self-convergence: run the scenario at each step size (sorted
/// descending) and report the trajectory distance between consecutive
/// refinements, attributed to the coarser step. Snapshots are aligned on
/// multiples of the largest step.
pub fn successive_refinement_errors(
    base: &RunConfig,
    dts: &[f64],
) -> Result<Vec<ConvergenceRow>> {
    if dts.len() < 2 {
        return Err(FiberflowError::Config(
            "temporal convergence needs at least two step sizes".into(),
        ));
    }
    let mut sorted = dts.to_vec();
    sorted.sort_by(|x, y| y.partial_cmp(x).expect("finite step sizes"));
    let interval = sorted[0];
    let mut runs = Vec::with_capacity(sorted.len());
    for &dt in &sorted {
        let mut config = base.clone();
        config.stepper.dt = dt;
        config.stepper.snapshot_interval = Some(interval);
        let out = run_scenario(&config)?;
        if out.outcome != RunOutcome::Completed {
            return Err(FiberflowError::Numerical(format!(
                "convergence run at dt = {dt} did not complete: {}",
                out.outcome.label()
            )));
        }
        runs.push(out);
    }
    let mut rows = Vec::with_capacity(sorted.len() - 1);
    for i in 0..runs.len() - 1 {
        rows.push(ConvergenceRow {
            dt: sorted[i],
            error: trajectory_distance(&runs[i], &runs[i + 1])?,
        });
    }
    Ok(rows)
}

/// Least-squares slope of log(error) against log(dt).
pub fn fitted_slope(rows: &[ConvergenceRow]) -> f64 {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.error > 0.0)
        .map(|r| (r.dt.ln(), r.error.ln()))
        .collect();
    let n = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.1).sum();
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}

// ---------------------------------------------------------------------------
// Oscillatory moduli and relaxation measurements
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Serialize)]
pub struct ModuliPoint {
    /// Angular frequency (rad/s).
    pub omega: f64,
    /// Strain amplitude γ₀ (the shear-rate amplitude is γ₀ω).
    pub gamma0: f64,
    /// In-phase (elastic) modulus of the fiber + cross-link stress.
    pub g_elastic: f64,
    /// Out-of-phase (viscous) modulus of the fiber + cross-link stress.
    pub g_viscous: f64,
    /// Background-fluid viscous modulus μω, reported separately.
    pub g_viscous_fluid: f64,
    /// Step size actually used (the configured dt rounded to divide the
    /// period exactly).
    pub dt: f64,
    pub transient_cycles: usize,
    pub measured_cycles: usize,
}

/// Small-amplitude oscillatory moduli at each frequency, sweeping in
/// ascending order and warm-starting each frequency from the previous
/// steady cycle. Each frequency discards `max(1 s, one period)` of
/// transient (in whole cycles) and measures three cycles.
pub fn moduli_sweep(
    config: &RunConfig,
    omegas: &[f64],
    gamma0: f64,
) -> Result<Vec<ModuliPoint>> {
    config.validate()?;
    if omegas.is_empty() || omegas.iter().any(|w| !(*w > 0.0)) {
        return Err(FiberflowError::Config(
            "moduli sweep needs positive frequencies".into(),
        ));
    }
    if !(gamma0 > 0.0) {
        return Err(FiberflowError::Config(format!(
            "strain amplitude must be positive, got {gamma0}"
        )));
    }
    if !config.periodic() {
        return Err(FiberflowError::Config(
            "moduli need a periodic cell for the stress volume average".into(),
        ));
    }
    let mut sorted = omegas.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite frequencies"));

    let (ws, states, links) = initial_states(config)?;
    let aux = RunAux::new(config, ws, links);
    let mut fibers = states;
    let mut points = Vec::with_capacity(sorted.len());
    for &omega in &sorted {
        let period = 2.0 * std::f64::consts::PI / omega;
        let steps_per_cycle = ((period / config.stepper.dt).round().max(8.0)) as usize;
        let dt = period / steps_per_cycle as f64;
        let transient_cycles = (1.0_f64.max(period) / period).ceil() as usize;
        let measured_cycles = 3;
        let flow = BackgroundFlow::OscillatoryShear {
            gamma0: gamma0 * omega,
            omega,
        };
        let mut sim = build_simulation(config, dt, flow)?;
        let mut state = StepperState::new(fibers.clone());
        for _ in 0..transient_cycles * steps_per_cycle {
            let record = hooked_step(&mut sim, &aux, &mut state)?;
            if record.diagnostics.max_tangent_deviation > TANGENT_STABILITY_TOL {
                return Err(FiberflowError::Numerical(format!(
                    "moduli transient went unstable at ω = {omega}"
                )));
            }
        }
        let mut samples = Vec::with_capacity(measured_cycles * steps_per_cycle);
        for _ in 0..measured_cycles * steps_per_cycle {
            let record = hooked_step(&mut sim, &aux, &mut state)?;
            let (sample, _) = sample_stress(&record, &aux, &sim.flow)?;
            samples.push(sample);
        }
        let (g_elastic, g_viscous) = network::moduli_from_series(&samples, omega, gamma0)?;
        points.push(ModuliPoint {
            omega,
            gamma0,
            g_elastic,
            g_viscous,
            g_viscous_fluid: config.mu * omega,
            dt,
            transient_cycles,
            measured_cycles,
        });
        fibers = state.fibers;
    }
    Ok(points)
}

/// Windowed mean fiber speeds after shear stops.
#[derive(Clone, Debug, Serialize)]
pub struct RelaxationSeries {
    /// Window midpoints, measured from the moment the flow switched off.
    pub times: Vec<f64>,
    /// Mean L² fiber speed over each window.
    pub speeds: Vec<f64>,
}

/// Drive the configured oscillatory shear for one full cycle, switch the
/// flow off, and record windowed mean fiber speeds for `horizon` seconds.
pub fn relaxation_run(config: &RunConfig, window: f64, horizon: f64) -> Result<RelaxationSeries> {
    config.validate()?;
    if !(config.flow.omega > 0.0 && config.flow.gamma0 > 0.0) {
        return Err(FiberflowError::Config(
            "relaxation needs an oscillatory shear phase (omega, gamma0 > 0)".into(),
        ));
    }
    if !(window > 0.0 && horizon >= window) {
        return Err(FiberflowError::Config(format!(
            "need 0 < window ≤ horizon; got {window}, {horizon}"
        )));
    }
    let (ws, states, links) = initial_states(config)?;
    let aux = RunAux::new(config, ws, links);

    // One shear cycle, step size rounded to divide the period.
    let period = 2.0 * std::f64::consts::PI / config.flow.omega;
    let steps_per_cycle = ((period / config.stepper.dt).round().max(8.0)) as usize;
    let dt1 = period / steps_per_cycle as f64;
    let mut sim = build_simulation(config, dt1, config.background_flow())?;
    let mut state = StepperState::new(states);
    for _ in 0..steps_per_cycle {
        let record = hooked_step(&mut sim, &aux, &mut state)?;
        if record.diagnostics.max_tangent_deviation > TANGENT_STABILITY_TOL {
            return Err(FiberflowError::Numerical(
                "shear phase went unstable before relaxation".into(),
            ));
        }
    }

    // Flow off; window must be a multiple of the configured dt.
    let dt = config.stepper.dt;
    let per_window = (window / dt).round() as usize;
    if per_window < 1 || (window / dt - (window / dt).round()).abs() > 1e-6 {
        return Err(FiberflowError::Config(format!(
            "window = {window} must be a positive multiple of dt = {dt}"
        )));
    }
    let windows = (horizon / window).floor() as usize;
    let mut sim = build_simulation(config, dt, BackgroundFlow::Quiescent)?;
    let mut state = StepperState::new(state.fibers);
    let mut snaps: Vec<Vec<Vec<Vector3<f64>>>> =
        vec![state.fibers.iter().map(|f| f.x.clone()).collect()];
    for _ in 0..windows {
        for _ in 0..per_window {
            hooked_step(&mut sim, &aux, &mut state)?;
        }
        snaps.push(state.fibers.iter().map(|f| f.x.clone()).collect());
    }
    let times = (0..windows).map(|k| (k as f64 + 0.5) * window).collect();
    let speeds = (0..windows)
        .map(|k| network::mean_fiber_velocity(&snaps[k], &snaps[k + 1], &aux.ws.grid.weights) / window)
        .collect();
    Ok(RelaxationSeries { times, speeds })
}

// ---------------------------------------------------------------------------
// Near-interaction accuracy study
// ---------------------------------------------------------------------------

/// Accuracy distribution of the near-interaction quadrature over one
/// distance band.
#[derive(Clone, Debug, Serialize)]
pub struct BandReport {
    pub label: String,
    pub pairs: usize,
    /// Digits of accuracy per pair: −log₁₀(max-norm error / max-norm of
    /// the reference velocity), clamped to [0, 16].
    pub digits: Vec<f64>,
    /// Counts per whole digit, indices 0..=16.
    pub histogram: Vec<usize>,
    pub min_digits: f64,
    pub fraction_ge3: f64,
    pub fraction_ge4: f64,
}

/// Agreement between the 6000-point reference and a 12000-point refinement
/// on a subsample of targets, split by whether the target sits where the
/// pair mobility is smooth (beyond one regularization diameter) or inside
/// the regularized fringe, where the kernel's limited smoothness caps
/// polynomial-quadrature accuracy.
#[derive(Clone, Debug, Default, Serialize)]
pub struct ReferenceConsistency {
    pub smooth_pairs: usize,
    pub smooth_max: f64,
    pub fringe_pairs: usize,
    pub fringe_max: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct NearQuadStudy {
    pub seed: u64,
    pub fibers: usize,
    pub targets_per_fiber: usize,
    /// Targets 2–10 fiber radii off the surface.
    pub near_band: BandReport,
    /// Targets 0.01–0.2 fiber lengths away.
    pub far_band: BandReport,
    pub reference: ReferenceConsistency,
}

struct PairOutcome {
    digits: f64,
    consistency: Option<(bool, f64)>,
}

fn accuracy_digits(v: &Vector3<f64>, vref: &Vector3<f64>) -> f64 {
    let denom = vref.amax();
    let num = (v - vref).amax();
    if num == 0.0 {
        return 16.0;
    }
    if denom == 0.0 {
        return 0.0;
    }
    (-(num / denom).log10()).clamp(0.0, 16.0)
}

fn band_report(label: &str, digits: Vec<f64>) -> BandReport {
    let mut histogram = vec![0usize; 17];
    for &d in &digits {
        histogram[(d.floor() as usize).min(16)] += 1;
    }
    let pairs = digits.len();
    let min_digits = digits.iter().copied().fold(f64::INFINITY, f64::min);
    let count_ge = |lvl: f64| digits.iter().filter(|&&d| d >= lvl - 1e-9).count() as f64;
    BandReport {
        label: label.into(),
        pairs,
        fraction_ge3: count_ge(3.0) / pairs.max(1) as f64,
        fraction_ge4: count_ge(4.0) / pairs.max(1) as f64,
        min_digits,
        histogram,
        digits,
    }
}

/// Accuracy study of the near-interaction quadrature on an ensemble of
/// smooth random fibers: for each fiber, targets are placed at random
/// arclengths, offset along a random normal by a random distance in the
/// band; the dispatched quadrature (surface blending off, so both routes
/// integrate the same pair mobility) is compared against a 6000-point
/// refined direct rule. Runs the standard 100 × 100 protocol.
pub fn near_quadrature_study(seed: u64) -> Result<NearQuadStudy> {
    near_quadrature_study_sized(seed, 100, 100)
}

/// Same study at explicit ensemble size (for quick smoke runs).
pub fn near_quadrature_study_sized(
    seed: u64,
    nfibers: usize,
    targets_per_fiber: usize,
) -> Result<NearQuadStudy> {
    if nfibers == 0 || targets_per_fiber == 0 {
        return Err(FiberflowError::Config(
            "the study needs at least one fiber and one target".into(),
        ));
    }
    let n = 16;
    let length = 2.0;
    let eps = 1e-3;
    let mu = 1.0 / (8.0 * std::f64::consts::PI);
    let spec = RandomFiberSpec::new(n, length);
    let fibers = generate_random_fibers(&spec, nfibers, stream_seed(seed, "study-fibers"))?;

    let ws = ChebWorkspace::new(n, length);
    let params = FiberParams::new(n, length, eps, 1.0, DragModel::Ellipsoidal);
    let kernel = StokesKernelParams::new(mu, eps, length);
    let rule = UpsampledRule::new();
    let nq = NearQuadParams {
        blend_near_surface: false,
        ..NearQuadParams::default()
    };
    let contexts: Vec<NearFiberContext> = fibers
        .iter()
        .map(|state| NearFiberContext::new(&params, &kernel, state, &state.tau, &ws, &rule))
        .collect();

    // Roughly 100 double-checked references per band.
    let stride = (nfibers * targets_per_fiber / 100).max(1);
    let bands = [
        ("2 to 10 radii", eps * length, 2.0, 10.0),
        ("0.01 to 0.2 lengths", length, 0.01, 0.2),
    ];
    let mut reports = Vec::with_capacity(2);
    let mut reference = ReferenceConsistency::default();
    for (label, scale, lo, hi) in bands {
        let base = stream_seed(seed, label);
        let per_fiber: Vec<Vec<PairOutcome>> = contexts
            .par_iter()
            .enumerate()
            .map(|(i, ctx)| -> Result<Vec<PairOutcome>> {
                let mut rng = ChaCha12Rng::seed_from_u64(indexed_seed(base, i));
                let mut out = Vec::with_capacity(targets_per_fiber);
                for t in 0..targets_per_fiber {
                    let s_star = rng.random::<f64>() * length;
                    let tau = {
                        let t = ctx.tau_series.eval_s(s_star);
                        t / t.norm()
                    };
                    let normal = random_perpendicular(&mut rng, &tau);
                    let d = scale * (lo + rng.random::<f64>() * (hi - lo));
                    let x = ctx.x_series.eval_s(s_star) + normal * d;
                    let (v, _) = interaction_velocity(&x, ctx, &rule, &nq)?;
                    let vref = refined_reference_velocity(&x, ctx, 6000);
                    let consistency = if (i * targets_per_fiber + t) % stride == 0 {
                        let v2 = refined_reference_velocity(&x, ctx, 12000);
                        let rel = (vref - v2).amax() / v2.amax();
                        Some((d >= 2.0 * kernel.b, rel))
                    } else {
                        None
                    };
                    out.push(PairOutcome {
                        digits: accuracy_digits(&v, &vref),
                        consistency,
                    });
                }
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut digits = Vec::with_capacity(nfibers * targets_per_fiber);
        for fiber_out in per_fiber {
            for pair in fiber_out {
                digits.push(pair.digits);
                if let Some((smooth, rel)) = pair.consistency {
                    if smooth {
                        reference.smooth_pairs += 1;
                        reference.smooth_max = reference.smooth_max.max(rel);
                    } else {
                        reference.fringe_pairs += 1;
                        reference.fringe_max = reference.fringe_max.max(rel);
                    }
                }
            }
        }
        reports.push(band_report(label, digits));
    }
    let far_band = reports.pop().expect("two bands");
    let near_band = reports.pop().expect("two bands");
    Ok(NearQuadStudy {
        seed,
        fibers: nfibers,
        targets_per_fiber,
        near_band,
        far_band,
        reference,
    })
}

// ---------------------------------------------------------------------------
// Periodic-cell consistency check
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Serialize)]
pub struct HexCheckReport {
    pub tol: f64,
    pub discrepancy: f64,
    pub threshold: f64,
    pub pass: bool,
}

/// Compare two periodic descriptions of the same point lattice (a sheared
/// primitive cell against a doubled rectangular cell) through the Ewald
/// sum at truncation tolerance `tol`. The discrepancy must shrink with the
/// tolerance; thresholds: 1e−5 at loose tolerances, 1e−10 once
/// `tol ≤ 1e−8`.
pub fn hexagonal_lattice_check(tol: f64) -> Result<HexCheckReport> {
    if !(tol > 0.0) {
        return Err(FiberflowError::Config(format!(
            "tolerance must be positive, got {tol}"
        )));
    }
    let discrepancy = ewald::hex_lattice_discrepancy(tol)?;
    let threshold = if tol <= 1e-8 { 1e-10 } else { 1e-5 };
    Ok(HexCheckReport {
        tol,
        discrepancy,
        threshold,
        pass: discrepancy < threshold,
    })
}

// ---------------------------------------------------------------------------
// Run-directory outputs
// ---------------------------------------------------------------------------

/// Machine-readable description of a finished run: enough to rerun it
/// exactly (the full config plus its hash) and to audit the work done.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub config_sha256: String,
    pub engine_version: String,
    pub modules: Vec<String>,
    pub scenario: String,
    pub seed: u64,
    pub steps_completed: usize,
    pub hydro_evals: u64,
    pub outcome: String,
    pub max_tangent_deviation: f64,
    pub files: Vec<String>,
}

/// SHA-256 of the canonical TOML serialization of a config.
pub fn config_hash(config: &RunConfig) -> Result<String> {
    let text = config.to_toml_string()?;
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    Ok(format!("{:x}", hasher.finalize()))
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| FiberflowError::Output(format!("{}: {e}", path.display())))?;
    w.write_record(header)
        .and_then(|_| rows.iter().try_for_each(|r| w.write_record(r)))
        .and_then(|_| w.flush().map_err(csv::Error::from))
        .map_err(|e| FiberflowError::Output(format!("{}: {e}", path.display())))
}

/// Write a run bundle under `dir`: the config, per-snapshot position and
/// coefficient tables, the stress series, cross-links, a step-by-step
/// diagnostics log, and a manifest tying them together.
pub fn write_outputs(out: &ScenarioOutputs, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir.join("snapshots"))?;
    let mut files = Vec::new();

    let config_text = out.config.to_toml_string()?;
    fs::write(dir.join("config.toml"), &config_text)?;
    files.push("config.toml".into());

    let ws = ChebWorkspace::new(out.config.fiber.n, out.config.fiber.length);
    let times_rows: Vec<Vec<String>> = out
        .snapshot_times
        .iter()
        .enumerate()
        .map(|(i, t)| vec![i.to_string(), t.to_string()])
        .collect();
    write_csv(&dir.join("snapshots/times.csv"), &["snapshot", "time"], &times_rows)?;
    files.push("snapshots/times.csv".into());

    for (idx, snap) in out.snapshots.iter().enumerate() {
        let mut pos_rows = Vec::new();
        let mut coeff_rows = Vec::new();
        for (fi, fiber_state) in snap.iter().enumerate() {
            for (p, x) in fiber_state.x.iter().enumerate() {
                pos_rows.push(vec![
                    fi.to_string(),
                    p.to_string(),
                    x.x.to_string(),
                    x.y.to_string(),
                    x.z.to_string(),
                ]);
            }
            let series = Vec3Series::from_values(&ws, &fiber_state.x);
            for k in 0..ws.n {
                coeff_rows.push(vec![
                    fi.to_string(),
                    k.to_string(),
                    series.comp[0].coeffs[k].to_string(),
                    series.comp[1].coeffs[k].to_string(),
                    series.comp[2].coeffs[k].to_string(),
                ]);
            }
        }
        let pos_name = format!("snapshots/positions_{idx:05}.csv");
        let coeff_name = format!("snapshots/coefficients_{idx:05}.csv");
        write_csv(&dir.join(&pos_name), &["fiber", "node", "x", "y", "z"], &pos_rows)?;
        write_csv(&dir.join(&coeff_name), &["fiber", "mode", "ax", "ay", "az"], &coeff_rows)?;
        files.push(pos_name);
        files.push(coeff_name);
    }

    if !out.stress.is_empty() {
        let rows: Vec<Vec<String>> = out
            .stress
            .iter()
            .zip(&out.fluid_stress)
            .map(|(s, fl)| {
                vec![
                    s.t.to_string(),
                    s.fiber.to_string(),
                    s.crosslink.to_string(),
                    fl.to_string(),
                    (s.total() + fl).to_string(),
                ]
            })
            .collect();
        write_csv(
            &dir.join("stress.csv"),
            &["t", "fiber", "crosslink", "fluid", "total"],
            &rows,
        )?;
        files.push("stress.csv".into());
    }

    if !out.links.is_empty() {
        let rows: Vec<Vec<String>> = out
            .links
            .iter()
            .map(|l| {
                vec![
                    l.i.to_string(),
                    l.j.to_string(),
                    l.s_i.to_string(),
                    l.s_j.to_string(),
                    l.image_shift[0].to_string(),
                    l.image_shift[1].to_string(),
                    l.image_shift[2].to_string(),
                ]
            })
            .collect();
        write_csv(
            &dir.join("links.csv"),
            &["fiber_i", "fiber_j", "s_i", "s_j", "shift_x", "shift_y", "shift_z"],
            &rows,
        )?;
        files.push("links.csv".into());
    }

    let mut log = String::new();
    for e in &out.step_log {
        let _ = writeln!(
            log,
            "step {:6}  t {:.6e}  hydro_evals {}  tangent_dev {:.3e}  gmres_iters {}  gmres_residual {}",
            e.step,
            e.t,
            e.hydro_evals,
            e.tangent_deviation,
            e.gmres_iters,
            e.gmres_residual.map_or("-".into(), |r| format!("{r:.3e}")),
        );
    }
    let _ = writeln!(log, "outcome: {}", out.outcome.label());
    fs::write(dir.join("diagnostics.log"), log)?;
    files.push("diagnostics.log".into());

    let manifest = Manifest {
        config_sha256: config_hash(&out.config)?,
        engine_version: env!("CARGO_PKG_VERSION").into(),
        modules: [
            "spectral",
            "fiber",
            "kinematics",
            "mobility",
            "ewald",
            "near_quadrature",
            "stepper",
            "network",
            "harness",
        ]
        .iter()
        .map(|m| format!("{m} {}", env!("CARGO_PKG_VERSION")))
        .collect(),
        scenario: out.config.scenario.clone(),
        seed: out.config.seed,
        steps_completed: out.step_log.len(),
        hydro_evals: out.hydro_evals,
        outcome: out.outcome.label(),
        max_tangent_deviation: out.max_tangent_deviation,
        files: {
            let mut f = files.clone();
            f.push("manifest.json".into());
            f
        },
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| FiberflowError::Output(format!("manifest serialization: {e}")))?;
    fs::write(dir.join("manifest.json"), json)?;
    Ok(manifest)
}

/// Run a scenario and write its bundle to the configured output directory
/// (or `run-<scenario>` in the working directory when unset).
pub fn run_to_directory(config: &RunConfig) -> Result<(ScenarioOutputs, PathBuf, Manifest)> {
    let outputs = run_scenario(config)?;
    let dir = config
        .output_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("run-{}", config.scenario)));
    let manifest = write_outputs(&outputs, &dir)?;
    Ok((outputs, dir, manifest))
}

/// Process exit code for an error: distinct classes for configuration
/// problems (2), numerical/binding/output failures (3), and failed
/// acceptance-style checks (4).
pub fn exit_code(err: &FiberflowError) -> i32 {
    match err {
        FiberflowError::Config(_) => 2,
        FiberflowError::Numerical(_) | FiberflowError::Binding(_) | FiberflowError::Output(_) => 3,
        FiberflowError::CheckFailed(_) => 4,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn builtin_configs_validate_and_roundtrip_through_toml() {
        for scenario in [
            Scenario::FallingQuartet,
            Scenario::ThreeFiberShear,
            Scenario::Stability,
            Scenario::Mesh,
        ] {
            let config = builtin_config(scenario);
            config.validate().expect("builtin config is valid");
            let text = config.to_toml_string().expect("serializes");
            let back = RunConfig::from_toml_str(&text).expect("parses back");
            assert_eq!(config, back, "TOML round trip changed the {scenario:?} config");
        }
        assert!(parse_scenario("no-such-scenario").is_err());
    }

    #[test]
    fn config_validation_rejects_bad_inputs() {
        let mut c = builtin_config(Scenario::ThreeFiberShear);
        c.stepper.dt = -0.1;
        assert!(matches!(c.validate(), Err(FiberflowError::Config(_))));

        let mut c = builtin_config(Scenario::ThreeFiberShear);
        c.stepper.mode = "newton".into();
        assert!(matches!(c.validate(), Err(FiberflowError::Config(_))));

        let mut c = builtin_config(Scenario::ThreeFiberShear);
        c.domain.ld = 0.0;
        assert!(matches!(c.validate(), Err(FiberflowError::Config(_))));

        let mut c = builtin_config(Scenario::FallingQuartet);
        c.crosslinks = Some(CrosslinkConfig {
            count: 10,
            kc: 1.0,
            ell: 0.5,
            sigma: 0.2,
        });
        assert!(matches!(c.validate(), Err(FiberflowError::Config(_))));

        // 7 steps of 0.4 is 2.8, not 2.4: not an integer step count.
        let mut c = builtin_config(Scenario::ThreeFiberShear);
        c.stepper.dt = 0.45;
        assert!(matches!(c.validate(), Err(FiberflowError::Config(_))));

        let mut c = builtin_config(Scenario::Mesh);
        c.crosslinks = None;
        assert!(matches!(c.validate(), Err(FiberflowError::Config(_))));
    }

    #[test]
    fn random_fibers_are_reproducible_smooth_and_unit_speed() {
        let spec = RandomFiberSpec::new(16, 2.0);
        let a = generate_random_fibers(&spec, 20, 11).expect("ensemble");
        let b = generate_random_fibers(&spec, 20, 11).expect("ensemble");
        let ws = ChebWorkspace::new(16, 2.0);
        for (fa, fb) in a.iter().zip(&b) {
            for (xa, xb) in fa.x.iter().zip(&fb.x) {
                assert_eq!(xa, xb, "same seed must reproduce the same fibers");
            }
        }
        let c = generate_random_fibers(&spec, 20, 12).expect("ensemble");
        assert!(
            a.iter().zip(&c).any(|(fa, fc)| fa.x != fc.x),
            "different seeds should give different ensembles"
        );
        for f in &a {
            assert!(f.max_tangent_norm_deviation() <= 1e-12);
            assert!(smoothness_gate(f, &ws));
            let series = Vec3Series::from_values(&ws, &f.x);
            let coeff = |k: usize| {
                Vector3::new(
                    series.comp[0].coeffs[k],
                    series.comp[1].coeffs[k],
                    series.comp[2].coeffs[k],
                )
                .norm()
            };
            let leading = (0..16).map(coeff).fold(0.0, f64::max);
            assert!(
                coeff(15) <= 2e-4 * leading.max(1.0),
                "trailing coefficient {:.3e} is not small against leading {:.3e}",
                coeff(15),
                leading
            );
        }
    }

    #[test]
    fn single_mode_spec_draws_straight_fibers() {
        let spec = RandomFiberSpec {
            n: 16,
            length: 2.0,
            modes: 1,
            decay: 1.0,
        };
        let fibers = generate_random_fibers(&spec, 5, 3).expect("always accepted");
        for f in &fibers {
            let t0 = f.tau[0];
            for t in &f.tau {
                assert!((t - t0).norm() <= 1e-13, "constant tangent means straight");
            }
        }
    }

    #[test]
    fn impossible_smoothness_gate_reports_the_acceptance_rate() {
        // Slowly decaying tangent modes essentially never satisfy the
        // position-coefficient gate.
        let spec = RandomFiberSpec {
            n: 16,
            length: 2.0,
            modes: 16,
            decay: 0.05,
        };
        match generate_random_fibers(&spec, 1, 0) {
            Err(FiberflowError::Config(msg)) => {
                assert!(msg.contains("acceptance rate"), "got: {msg}")
            }
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn quartet_with_local_drag_falls_straight_down() {
        let mut config = builtin_config(Scenario::FallingQuartet);
        config.stepper.hydro = "local".into();
        let out = run_scenario(&config).expect("runs");
        assert_eq!(out.outcome, RunOutcome::Completed);
        assert!(out.max_tangent_deviation <= 1e-12);
        assert_eq!(out.hydro_evals, 0, "local drag needs no nonlocal evaluations");
        let first = &out.snapshots[0];
        let last = out.snapshots.last().expect("snapshots");
        for (f0, f1) in first.iter().zip(last) {
            for (x0, x1) in f0.x.iter().zip(&f1.x) {
                assert!(
                    (x1.x - x0.x).abs() <= 1e-10 && (x1.y - x0.y).abs() <= 1e-10,
                    "without interactions the quartet must fall straight down"
                );
                assert!(x1.z < x0.z, "the body force points down");
            }
        }
    }

    fn tiny_mesh_config() -> RunConfig {
        let mut config = builtin_config(Scenario::Mesh);
        config.fiber.count = 8;
        config.fiber.n = 8;
        config.domain.ld = 2.0;
        config.crosslinks = Some(CrosslinkConfig {
            count: 10,
            kc: 1.0,
            ell: 0.5,
            sigma: 0.2,
        });
        config.stepper.dt = 0.005;
        config.stepper.t_final = 0.025;
        config.stepper.snapshot_interval = None;
        config.seed = 5;
        config
    }

    #[test]
    fn mesh_stress_series_is_bitwise_deterministic() {
        let config = tiny_mesh_config();
        let a = run_scenario(&config).expect("runs");
        let b = run_scenario(&config).expect("runs");
        assert_eq!(a.outcome, RunOutcome::Completed);
        assert_eq!(a.stress.len(), 5);
        assert_eq!(a.links, b.links);
        for (sa, sb) in a.stress.iter().zip(&b.stress) {
            assert_eq!(sa.t.to_bits(), sb.t.to_bits());
            assert_eq!(sa.fiber.to_bits(), sb.fiber.to_bits());
            assert_eq!(sa.crosslink.to_bits(), sb.crosslink.to_bits());
        }
    }

    #[test]
    fn trajectory_distance_sees_refinement_and_vanishes_on_identity() {
        // Randomly oriented straight fibers rotate nonlinearly in steady
        // shear (a flow-aligned fiber would just translate, exactly
        // integrated at any step).
        let mut config = builtin_config(Scenario::Stability);
        config.fiber.count = 4;
        config.domain.ld = 2.0;
        config.stepper.hydro = "local".into();
        config.stepper.mode = "block".into();
        config.flow = FlowConfig {
            gamma0: 1.0,
            omega: 0.0,
        };
        config.stepper.t_final = 0.8;
        config.stepper.snapshot_interval = Some(0.4);
        config.stepper.dt = 0.4;
        let coarse = run_scenario(&config).expect("runs");
        config.stepper.dt = 0.2;
        let fine = run_scenario(&config).expect("runs");
        assert_eq!(trajectory_distance(&coarse, &coarse).expect("distance"), 0.0);
        let d = trajectory_distance(&coarse, &fine).expect("distance");
        assert!(d > 1e-8, "halving the step must move the trajectory, got {d:.3e}");
    }

    #[test]
    fn moduli_sweep_reports_finite_modulus_and_fluid_share() {
        let mut config = tiny_mesh_config();
        config.fiber.count = 6;
        config.crosslinks.as_mut().expect("mesh has crosslinks").count = 8;
        // dt is rounded per frequency to divide the period.
        config.stepper.dt = 0.025;
        let omega = 2.0 * std::f64::consts::PI;
        let points = moduli_sweep(&config, &[omega], 0.1).expect("sweep");
        assert_eq!(points.len(), 1);
        let p = &points[0];
        assert!(p.g_elastic.is_finite() && p.g_viscous.is_finite());
        assert_relative_eq!(p.g_viscous_fluid, config.mu * omega, max_relative = 1e-12);
        assert_eq!(p.transient_cycles, 1);
        assert_eq!(p.measured_cycles, 3);
        assert_relative_eq!(
            p.dt * (2.0 * std::f64::consts::PI / omega / p.dt).round(),
            2.0 * std::f64::consts::PI / omega,
            max_relative = 1e-12
        );
    }

    #[test]
    fn near_quadrature_study_smoke_run_is_accurate_and_consistent() {
        let study = near_quadrature_study_sized(7, 3, 5).expect("study");
        assert_eq!(study.near_band.pairs, 15);
        assert_eq!(study.far_band.pairs, 15);
        assert!(
            study.near_band.min_digits >= 3.0,
            "near band dipped to {:.2} digits",
            study.near_band.min_digits
        );
        assert!(
            study.far_band.min_digits >= 3.0,
            "far band dipped to {:.2} digits",
            study.far_band.min_digits
        );
        assert!(
            study.reference.smooth_pairs > 0,
            "the subsample should hit the smooth region"
        );
        assert!(
            study.reference.smooth_max <= 1e-8,
            "smooth-region reference self-consistency is {:.3e}",
            study.reference.smooth_max
        );
    }

    #[test]
    fn lattice_check_passes_at_loose_tolerance() {
        let report = hexagonal_lattice_check(1e-2).expect("check runs");
        assert!(
            report.pass && report.discrepancy < 1e-5,
            "discrepancy {:.3e}",
            report.discrepancy
        );
    }

    #[test]
    fn run_bundle_lands_on_disk_with_a_manifest() {
        let tmp = tempfile::tempdir().expect("tempdir");
        let mut config = builtin_config(Scenario::FallingQuartet);
        config.stepper.hydro = "local".into();
        config.stepper.t_final = 0.01;
        config.stepper.dt = 2.5e-3;
        config.stepper.snapshot_interval = None;
        config.output_dir = Some(tmp.path().join("bundle"));
        let (outputs, dir, manifest) = run_to_directory(&config).expect("runs and writes");
        assert_eq!(outputs.step_log.len(), 4);
        assert_eq!(manifest.steps_completed, 4);
        assert_eq!(manifest.config_sha256, config_hash(&config).expect("hash"));
        assert!(outputs.stress.is_empty(), "free-space runs sample no stress");
        for name in ["manifest.json", "config.toml", "diagnostics.log", "snapshots/times.csv"] {
            assert!(dir.join(name).is_file(), "missing {name}");
        }
        assert!(!dir.join("stress.csv").exists());
        let parsed: Manifest = serde_json::from_str(
            &fs::read_to_string(dir.join("manifest.json")).expect("readable"),
        )
        .expect("manifest parses");
        assert_eq!(parsed.outcome, "completed");
        assert_eq!(parsed.scenario, "falling-quartet");
    }

    #[test]
    fn exit_codes_distinguish_error_classes() {
        assert_eq!(exit_code(&FiberflowError::Config("x".into())), 2);
        assert_eq!(exit_code(&FiberflowError::Numerical("x".into())), 3);
        assert_eq!(exit_code(&FiberflowError::Binding("x".into())), 3);
        assert_eq!(exit_code(&FiberflowError::Output("x".into())), 3);
        assert_eq!(exit_code(&FiberflowError::CheckFailed("x".into())), 4);
    }
}

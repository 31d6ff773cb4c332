//! Simulation engine for suspensions of inextensible slender elastic fibers
//! in zero-Reynolds-number flow.
//!
//! Fibers are discretized by Chebyshev collocation of the centerline and
//! evolved with a rotation-based inextensibility constraint: the tangent
//! vector rotates on the unit sphere, positions are recovered by spectral
//! integration, so fiber length is preserved to rounding without penalty
//! terms. Hydrodynamics combine a local slender-body drag, an on-fiber
//! finite-part integral, and regularized-singularity (RPY) interactions
//! between fibers, summed either in free space or in a periodically sheared
//! unit cell via Ewald splitting with a spectrally accurate far field.
//! Near-singular fiber-fiber integrals are repaired by a root-finding
//! special quadrature. A semi-implicit second-order stepper treats bending
//! implicitly per fiber and resolves inter-fiber coupling either by a
//! block-diagonal solve or by a few preconditioned GMRES iterations.
//! Cross-linked fiber networks add spring forces with exactly zero net
//! force and torque per link, and the harness measures suspension stress
//! and viscoelastic moduli under oscillatory shear.

pub mod domain;
pub mod error;
pub mod ewald;
pub mod fiber;
pub mod harness;
pub mod kinematics;
pub mod mobility;
pub mod near_quadrature;
pub mod network;
pub mod spectral;
pub mod stepper;
pub mod util;

pub use error::FiberflowError;

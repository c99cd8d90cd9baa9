//! Numerical laboratory for extremal Kähler geometry on toric varieties.
//!
//! A compact symplectic toric manifold is encoded by its Delzant polytope
//! `P` and a symplectic potential `u` satisfying the Guillemin boundary
//! conditions, `u = ½ Σ_i l_i ln l_i + f` with `f` smooth on `P̄`. This
//! crate represents both, evaluates the Abreu scalar-curvature operator
//! `R_u = −Σ ∂²u^{ij}/∂x_i∂x_j` and the curvature norm `|Rm|`, solves for
//! the extremal affine function `θ`, integrates the modified Calabi flow
//! `∂u/∂t = θ − R_u` as a gradient flow of the Mabuchi energy, scans
//! piecewise-linear test functions for K-stability, and handles the
//! weighted (projective-bundle) reduction.
//!
//! Everything that feeds the extremal function and the stability scan is
//! computed in exact rational arithmetic (polytope moments, facet measures,
//! crease integrals); fields and flows live on a uniform grid chart where
//! only the smooth correction `f` is ever finite-differenced.
//!
//! Modules follow the problem decomposition:
//!
//! - [`polytope`]: Delzant data model, validity checking, exact quadrature,
//!   grid charts.
//! - [`potential`]: symplectic potentials, normalization, checkpoints.
//! - [`geometry`]: Hessians, Abreu operator, `|Rm|`, segment profiles.
//! - [`stability`]: the `L` functional, `θ`, Mabuchi energy, crease scans.
//! - [`flow`]: the modified Calabi flow with adaptive explicit stepping.
//! - [`weighted`]: the admissible-metric reduction with weight `p(z)`.
//! - [`cli`]: batch front door used by the `toric-calabi` binary.

pub mod cli;
pub mod flow;
pub mod geometry;
mod linalg;
pub mod polytope;
pub mod potential;
pub mod stability;
pub mod weighted;

use thiserror::Error;

/// Crate-wide error type. Variants carry enough context to name the
/// offending facet, vertex, or node in reports.
#[derive(Debug, Error)]
pub enum Error {
    #[error("facet {facet}: normal {normal:?} is not primitive (gcd {gcd})")]
    NonPrimitiveNormal {
        facet: usize,
        normal: Vec<i64>,
        gcd: i64,
    },

    #[error("polytope is unbounded (recession direction {direction:?})")]
    Unbounded { direction: Vec<i64> },

    #[error(
        "vertex {vertex:?} (facets {facets:?}) is not unimodular: |det| = {det}, expected 1"
    )]
    NonUnimodularVertex {
        vertex: Vec<f64>,
        facets: Vec<usize>,
        det: i64,
    },

    #[error("constraint system has no interior point")]
    NoInteriorPoint,

    #[error("need at least dim+1 = {need} facets, got {got}")]
    TooFewFacets { need: usize, got: usize },

    #[error("grid spacing h = {h} too coarse: {reason}")]
    SpacingTooCoarse { h: f64, reason: String },

    #[error("point {point:?} is outside the polytope closure (or too shallow: need depth {need_depth})")]
    OutOfDomain { point: Vec<f64>, need_depth: f64 },

    #[error("operands live on different charts ({left} vs {right})")]
    ChartMismatch { left: String, right: String },

    #[error("Hessian not positive definite at node {node:?}: min eigenvalue {min_eig:.3e}")]
    SingularHessian { node: Vec<f64>, min_eig: f64 },

    #[error("segment leaves the polytope at t = {t} (constraint {facet}: l = {value:.3e})")]
    SegmentLeavesPolytope { t: f64, facet: usize, value: f64 },

    #[error("moment matrix is singular; exact quadrature is inconsistent")]
    SingularMomentMatrix,

    #[error("no crease function meets the depth margin {margin}")]
    EmptyFamily { margin: f64 },

    #[error("flow stalled: dt underflow at t = {t} (dt = {dt:.3e})")]
    StepUnderflow { t: f64, dt: f64 },

    #[error("initial potential is not strictly convex at node {node:?}")]
    NonConvexStart { node: Vec<f64> },

    #[error("trace too short for a rate fit: {rows} usable rows, need {need}")]
    TraceTooShort { rows: usize, need: usize },

    #[error("weight factor {factor} is {value:.3e} at {point:?}; must be positive on the closure")]
    NegativeAffineFactor {
        factor: String,
        value: f64,
        point: Vec<f64>,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    /// Exit status for the CLI: 2 for validation problems, 3 for numerical
    /// failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonPrimitiveNormal { .. }
            | Error::Unbounded { .. }
            | Error::NonUnimodularVertex { .. }
            | Error::NoInteriorPoint
            | Error::TooFewFacets { .. }
            | Error::SpacingTooCoarse { .. }
            | Error::OutOfDomain { .. }
            | Error::ChartMismatch { .. }
            | Error::InvalidInput(_)
            | Error::Io(_)
            | Error::Parse(_) => 2,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

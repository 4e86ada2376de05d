//! Numerical toolkit for constructing small generalized breathers of the
//! nonlinear Klein-Gordon equation `u_tt = u_xx - u + f(u)` with odd `f`.
//!
//! The construction works in spatial dynamics: the roles of space and time are
//! swapped, the breather becomes a homoclinic-like orbit of an ill-posed
//! evolution system with one hyperbolic mode and infinitely many (here:
//! truncated) rapidly rotating elliptic modes. The pipeline is
//!
//! 1. [`spectral`] / [`model`]: odd sine-series phase space, the first-order
//!    evolution system, its Hamiltonian and Poisson structure;
//! 2. [`duffing`]: the slow limit equation, its explicit homoclinic orbit and
//!    the regular (elliptic-free) comparison problem;
//! 3. [`normal_form`]: iterated near-identity symplectic changes of variables
//!    pushing the elliptic forcing on the slice `{W^c = 0}` down to an
//!    exponentially small residual;
//! 4. [`flow`]: a splitting integrator that handles the stiff elliptic
//!    rotation exactly, plus tangent flows;
//! 5. [`manifolds`]: Lyapunov-Perron construction of (un)stable and
//!    center-(un)stable manifolds of the transformed system;
//! 6. [`intersection`]: the energy argument producing an orbit homoclinic to a
//!    small center-manifold torus, and the measurement of its elliptic tail.

pub mod cheb;
pub mod duffing;
pub mod flow;
pub mod intersection;
pub mod manifolds;
pub mod model;
pub mod normal_form;
pub mod scalar;
pub mod spectral;

/// Crate-wide error type. Variants are shared across modules; each operation
/// documents which ones it can produce.
#[derive(Debug, Clone, thiserror::Error)]
pub enum Error {
    /// A spectral operation was asked for a mode outside its admissible range.
    #[error("invalid mode {mode}: {reason}")]
    InvalidMode { mode: usize, reason: String },
    /// A numerical value left the representable / trustworthy range.
    #[error("overflow in {context}: {value}")]
    Overflow { context: String, value: f64 },
    /// An operation that needs a nonempty trajectory got an empty one.
    #[error("empty orbit: {0}")]
    EmptyOrbit(String),
    /// Requested time span is invalid (NaN, zero direction, wrong order).
    #[error("bad time span: {0}")]
    SpanError(String),
    /// A Newton iteration failed to converge.
    #[error("newton iteration diverged in {context}: residual {residual:.3e} after {iters} iterations")]
    NewtonDiverged {
        context: String,
        residual: f64,
        iters: usize,
    },
    /// A point left the tabulated domain of a normal form step.
    #[error("point left tabulated domain in {context}: |{value:.6}| > {bound:.6}")]
    DomainExceeded {
        context: String,
        value: f64,
        bound: f64,
    },
    /// A fixed-point iteration had estimated contraction rate >= 1.
    #[error("no contraction in {context}: estimated rate {rate:.3}")]
    NoContraction { context: String, rate: f64 },
    /// An iteration hit its iteration cap before meeting its tolerance.
    #[error("iteration cap {cap} reached in {context}: residual {residual:.3e}")]
    MaxIters {
        context: String,
        cap: usize,
        residual: f64,
    },
    /// A trajectory never crossed the requested section.
    #[error("no section crossing found: {0}")]
    NoCrossing(String),
    /// A bracketing search found no sign change.
    #[error("no sign change: {0}")]
    NoSignChange(String),
    /// A regression had too few or degenerate abscissae.
    #[error("degenerate fit: {0}")]
    DegenerateFit(String),
}

pub type Result<T> = std::result::Result<T, Error>;

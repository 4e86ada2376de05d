//! Odd-periodic sine-series phase space and the linear operators of the
//! spatial-dynamics formulation.
//!
//! States split into a hyperbolic pair (the sin x channel) and elliptic
//! sine modes k >= 2. The elliptic operators L = (-1 - d_xx)^{1/2} and
//! J = [[0, L], [-L, 0]] are diagonal in mode space and stored as multiplier
//! arrays; dense matrices exist only inside test oracles.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::{Error, Result};

/// Galerkin truncation and collocation sizes, plus the temporal frequency
/// omega = sqrt(1 - eps^2) of the rescaled periodic variable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralConfig {
    /// Highest retained sine mode; elliptic modes are k = 2..n_modes.
    pub n_modes: usize,
    /// Pseudospectral grid size on (0, pi); >= 1.5 * n_modes for dealiasing.
    pub collocation_size: usize,
    pub omega: f64,
}

impl SpectralConfig {
    /// Collocation size defaults to 2 * n_modes, which dealiases cubic
    /// products of the retained modes exactly.
    pub fn new(n_modes: usize, omega: f64) -> Result<Self> {
        Self::with_collocation(n_modes, 2 * n_modes, omega)
    }

    pub fn with_collocation(n_modes: usize, collocation_size: usize, omega: f64) -> Result<Self> {
        if n_modes < 4 {
            return Err(Error::InvalidMode {
                mode: n_modes,
                reason: "need at least 4 sine modes".into(),
            });
        }
        let min_colloc = (3 * n_modes + 1) / 2;
        if collocation_size < min_colloc {
            return Err(Error::InvalidMode {
                mode: collocation_size,
                reason: format!("collocation grid must have at least {min_colloc} points"),
            });
        }
        if !(omega > 0.0 && omega <= 1.0) || !omega.is_finite() {
            return Err(Error::Overflow {
                context: "spectral config omega".into(),
                value: omega,
            });
        }
        Ok(SpectralConfig {
            n_modes,
            collocation_size,
            omega,
        })
    }

    /// L-multiplier sqrt(k^2 - 1) for mode k.
    #[inline]
    pub fn l_multiplier(k: usize) -> f64 {
        ((k * k - 1) as f64).sqrt()
    }
}

/// Odd 2pi-periodic function as a sine series; coeffs[k-1] multiplies sin(kx).
#[derive(Debug, Clone, PartialEq)]
pub struct OddField<S = f64> {
    pub coeffs: Vec<S>,
}

impl<S: Scalar> OddField<S> {
    pub fn zero(n_modes: usize) -> Self {
        OddField {
            coeffs: vec![S::zero(); n_modes],
        }
    }

    pub fn from_coeffs(coeffs: Vec<S>) -> Self {
        OddField { coeffs }
    }

    pub fn n_modes(&self) -> usize {
        self.coeffs.len()
    }

    /// Coefficient of sin(kx), k = 1..n_modes.
    #[inline]
    pub fn mode(&self, k: usize) -> S {
        self.coeffs[k - 1]
    }

    #[inline]
    pub fn set_mode(&mut self, k: usize, v: S) {
        self.coeffs[k - 1] = v;
    }

    pub fn axpy(&mut self, c: f64, other: &OddField<S>) {
        for (a, b) in self.coeffs.iter_mut().zip(&other.coeffs) {
            *a = *a + b.scale(c);
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        OddField {
            coeffs: self.coeffs.iter().map(|a| a.scale(c)).collect(),
        }
    }

    /// l2 norm of the value parts of the coefficients.
    pub fn norm(&self) -> f64 {
        self.coeffs
            .iter()
            .map(|a| a.re() * a.re())
            .sum::<f64>()
            .sqrt()
    }

    /// Coefficient-sequence inner product (the L2(0,pi) pairing up to pi/2).
    pub fn dot(&self, other: &OddField<S>) -> S {
        let mut s = S::zero();
        for (a, b) in self.coeffs.iter().zip(&other.coeffs) {
            s = s + *a * *b;
        }
        s
    }

    pub fn map_re(&self) -> OddField<f64> {
        OddField {
            coeffs: self.coeffs.iter().map(|a| a.re()).collect(),
        }
    }
}

/// Hyperbolic (sin x channel) part of a state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HypState<S = f64> {
    pub w: S,
    pub w1: S,
}

impl<S: Scalar> HypState<S> {
    pub fn new(w: S, w1: S) -> Self {
        HypState { w, w1 }
    }
    pub fn zero() -> Self {
        HypState {
            w: S::zero(),
            w1: S::zero(),
        }
    }
    pub fn norm(&self) -> f64 {
        self.w.re().hypot(self.w1.re())
    }
}

/// Elliptic part: pair of odd fields with the sin x coefficient identically
/// zero (membership in Y).
#[derive(Debug, Clone, PartialEq)]
pub struct EllState<S = f64> {
    pub y: OddField<S>,
    pub y1: OddField<S>,
}

impl<S: Scalar> EllState<S> {
    pub fn zero(n_modes: usize) -> Self {
        EllState {
            y: OddField::zero(n_modes),
            y1: OddField::zero(n_modes),
        }
    }

    /// Builds an elliptic state, zeroing the k = 1 coefficients.
    pub fn new(mut y: OddField<S>, mut y1: OddField<S>) -> Self {
        y.coeffs[0] = S::zero();
        y1.coeffs[0] = S::zero();
        debug_assert_eq!(y.n_modes(), y1.n_modes());
        EllState { y, y1 }
    }

    pub fn n_modes(&self) -> usize {
        self.y.n_modes()
    }

    pub fn axpy(&mut self, c: f64, other: &EllState<S>) {
        self.y.axpy(c, &other.y);
        self.y1.axpy(c, &other.y1);
    }

    pub fn scaled(&self, c: f64) -> Self {
        EllState {
            y: self.y.scaled(c),
            y1: self.y1.scaled(c),
        }
    }
}

/// Full phase-space point of the first-order spatial-dynamics system.
#[derive(Debug, Clone, PartialEq)]
pub struct FullState<S = f64> {
    pub hyp: HypState<S>,
    pub ell: EllState<S>,
}

impl<S: Scalar> FullState<S> {
    pub fn zero(n_modes: usize) -> Self {
        FullState {
            hyp: HypState::zero(),
            ell: EllState::zero(n_modes),
        }
    }

    pub fn new(hyp: HypState<S>, ell: EllState<S>) -> Self {
        FullState { hyp, ell }
    }

    pub fn n_modes(&self) -> usize {
        self.ell.n_modes()
    }

    pub fn axpy(&mut self, c: f64, other: &FullState<S>) {
        self.hyp.w = self.hyp.w + other.hyp.w.scale(c);
        self.hyp.w1 = self.hyp.w1 + other.hyp.w1.scale(c);
        self.ell.axpy(c, &other.ell);
    }

    pub fn scaled(&self, c: f64) -> Self {
        FullState {
            hyp: HypState {
                w: self.hyp.w.scale(c),
                w1: self.hyp.w1.scale(c),
            },
            ell: self.ell.scaled(c),
        }
    }

    pub fn map_re(&self) -> FullState<f64> {
        FullState {
            hyp: HypState {
                w: self.hyp.w.re(),
                w1: self.hyp.w1.re(),
            },
            ell: EllState {
                y: self.ell.y.map_re(),
                y1: self.ell.y1.map_re(),
            },
        }
    }
}

/// sin x coefficient of a sine series; realizes the (1/pi) integral pairing.
pub fn project_h<S: Scalar>(field: &OddField<S>) -> S {
    field.coeffs[0]
}

/// Complement projection: zero the sin x channel.
pub fn project_c<S: Scalar>(field: &OddField<S>) -> OddField<S> {
    let mut out = field.clone();
    out.coeffs[0] = S::zero();
    out
}

/// A = [[0,1],[1,0]] on the hyperbolic pair.
pub fn apply_a<S: Scalar>(h: &HypState<S>) -> HypState<S> {
    HypState {
        w: h.w1,
        w1: h.w,
    }
}

/// Mode-wise powers of L = (-1 - d_xx)^{1/2}: multiplier (k^2-1)^{power/2}.
/// Negative powers require a vanishing sin x coefficient (the kernel of L).
pub fn apply_l<S: Scalar>(field: &OddField<S>, power: i32) -> Result<OddField<S>> {
    if power < 0 && field.coeffs[0].re() != 0.0 {
        return Err(Error::InvalidMode {
            mode: 1,
            reason: "negative powers of L need a vanishing sin x coefficient".into(),
        });
    }
    let mut out = field.clone();
    for (i, c) in out.coeffs.iter_mut().enumerate() {
        let k = i + 1;
        let m = ((k * k - 1) as f64).powf(power as f64 / 2.0);
        *c = if k == 1 && power > 0 {
            S::zero()
        } else if k == 1 && power < 0 {
            // guarded above: coefficient is exactly zero, keep it zero
            S::zero()
        } else {
            c.scale(m)
        };
    }
    Ok(out)
}

/// J = [[0, L], [-L, 0]] on elliptic states, or its inverse.
pub fn apply_j<S: Scalar>(e: &EllState<S>, inverse: bool) -> EllState<S> {
    let n = e.n_modes();
    let mut y = OddField::zero(n);
    let mut y1 = OddField::zero(n);
    for k in 2..=n {
        let m = SpectralConfig::l_multiplier(k);
        if inverse {
            // J^{-1} (y, y1) = (-L^{-1} y1, L^{-1} y)
            y.set_mode(k, e.y1.mode(k).scale(-1.0 / m));
            y1.set_mode(k, e.y.mode(k).scale(1.0 / m));
        } else {
            y.set_mode(k, e.y1.mode(k).scale(m));
            y1.set_mode(k, e.y.mode(k).scale(-m));
        }
    }
    EllState { y, y1 }
}

/// Eigenvalue pair +-sqrt(1 - k^2 omega^2) of the k-th linear mode block.
/// Only k = 1 gives a real (hyperbolic) pair: sqrt(1 - omega^2) = eps.
pub fn linear_eigenvalue(k: usize, eps: f64) -> (Complex64, Complex64) {
    let omega2 = 1.0 - eps * eps;
    let s = 1.0 - (k * k) as f64 * omega2;
    let lambda = if s >= 0.0 {
        Complex64::new(s.sqrt(), 0.0)
    } else {
        Complex64::new(0.0, (-s).sqrt())
    };
    (lambda, -lambda)
}

/// Norm bundle of a full state: Euclidean hyperbolic norm, l2 elliptic norm,
/// and the graph norm of J on the elliptic part.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Norms {
    pub x_norm: f64,
    pub y_norm: f64,
    pub y1_norm: f64,
}

pub fn norms(state: &FullState<f64>) -> Norms {
    let x_norm = state.hyp.norm();
    let (y_norm, y1_norm) = ell_norms(&state.ell);
    Norms {
        x_norm,
        y_norm,
        y1_norm,
    }
}

/// (l2 norm, graph norm) of an elliptic state.
pub fn ell_norms(e: &EllState<f64>) -> (f64, f64) {
    let mut sq = 0.0;
    let mut jsq = 0.0;
    for k in 2..=e.n_modes() {
        let a = e.y.mode(k);
        let b = e.y1.mode(k);
        let m2 = (k * k - 1) as f64;
        sq += a * a + b * b;
        jsq += m2 * (a * a + b * b);
    }
    let y = sq.sqrt();
    (y, y + jsq.sqrt())
}

/// Graph norm of the elliptic part alone.
pub fn y1_norm(e: &EllState<f64>) -> f64 {
    ell_norms(e).1
}

/// Energy quadratic form of the elliptic block: pi * sum k^2 (y_k^2 +
/// y1_k^2). The leading part of the Hamiltonian restricted to the center
/// directions scales with this form, so cone comparisons measure against
/// it rather than the graph norm.
pub fn cone_form(e: &EllState<f64>) -> f64 {
    let mut q = 0.0;
    for k in 2..=e.n_modes() {
        let kk = (k * k) as f64;
        let a = e.y.mode(k);
        let b = e.y1.mode(k);
        q += kk * (a * a + b * b);
    }
    std::f64::consts::PI * q
}

/// Packs the elliptic coefficients into a flat vector, skipping the k = 1
/// channel: [y_2..y_n, y1_2..y1_n].
pub fn pack_ell(e: &EllState<f64>) -> Vec<f64> {
    let n = e.n_modes();
    let mut v = Vec::with_capacity(2 * (n - 1));
    for k in 2..=n {
        v.push(e.y.mode(k));
    }
    for k in 2..=n {
        v.push(e.y1.mode(k));
    }
    v
}

pub fn unpack_ell(v: &[f64], n_modes: usize) -> EllState<f64> {
    assert_eq!(v.len(), 2 * (n_modes - 1));
    let mut e = EllState::zero(n_modes);
    for k in 2..=n_modes {
        e.y.set_mode(k, v[k - 2]);
        e.y1.set_mode(k, v[n_modes - 1 + k - 2]);
    }
    e
}

/// Packs a full state: [w, w1, y_2..y_n, y1_2..y1_n].
pub fn pack_full(s: &FullState<f64>) -> Vec<f64> {
    let mut v = vec![s.hyp.w, s.hyp.w1];
    v.extend(pack_ell(&s.ell));
    v
}

pub fn unpack_full(v: &[f64], n_modes: usize) -> FullState<f64> {
    FullState {
        hyp: HypState { w: v[0], w1: v[1] },
        ell: unpack_ell(&v[2..], n_modes),
    }
}

/// Pseudospectral grid on (0, pi) with cached sine tables.
///
/// Nodes are x_j = j pi / (M+1), j = 1..M; the discrete expansion
/// a_k = (2/(M+1)) sum_j u_j sin(k x_j) inverts the synthesis exactly for
/// series with at most M modes, and products of total degree d stay alias-free
/// on the retained modes as long as (d+1) n_modes <= 2(M+1) - 1.
#[derive(Debug, Clone)]
pub struct Grid {
    pub n_modes: usize,
    pub size: usize,
    /// sin(k x_j), laid out k-major: table[(k-1) * size + (j-1)].
    table: Vec<f64>,
    /// sin(x_j) for the hyperbolic channel.
    pub sin1: Vec<f64>,
}

impl Grid {
    pub fn new(cfg: &SpectralConfig) -> Self {
        let m = cfg.collocation_size;
        let n = cfg.n_modes;
        let mut table = vec![0.0; n * m];
        for k in 1..=n {
            for j in 1..=m {
                table[(k - 1) * m + (j - 1)] =
                    (k as f64 * j as f64 * std::f64::consts::PI / (m as f64 + 1.0)).sin();
            }
        }
        let sin1 = table[..m].to_vec();
        Grid {
            n_modes: n,
            size: m,
            table,
            sin1,
        }
    }

    /// Synthesis: coefficient vector to nodal values.
    pub fn to_grid<S: Scalar>(&self, field: &OddField<S>) -> Vec<S> {
        let mut out = vec![S::zero(); self.size];
        for k in 1..=self.n_modes {
            let c = field.coeffs[k - 1];
            if c.re() == 0.0 {
                // cheap skip is exact only for plain values; duals may carry
                // derivative with zero value, so only skip true zeros
                if is_exact_zero(&c) {
                    continue;
                }
            }
            let row = &self.table[(k - 1) * self.size..k * self.size];
            for (o, s) in out.iter_mut().zip(row) {
                *o = *o + c.scale(*s);
            }
        }
        out
    }

    /// Analysis: nodal values to sine coefficients.
    pub fn to_coeffs<S: Scalar>(&self, values: &[S]) -> OddField<S> {
        assert_eq!(values.len(), self.size);
        let w = 2.0 / (self.size as f64 + 1.0);
        let mut coeffs = Vec::with_capacity(self.n_modes);
        for k in 1..=self.n_modes {
            let row = &self.table[(k - 1) * self.size..k * self.size];
            let mut s = S::zero();
            for (v, t) in values.iter().zip(row) {
                s = s + v.scale(*t);
            }
            coeffs.push(s.scale(w));
        }
        OddField { coeffs }
    }
}

fn is_exact_zero<S: Scalar>(c: &S) -> bool {
    // A scalar is exactly zero iff scaling it by any constant changes nothing
    // and its value part is zero; for plain f64 this is just == 0. We only
    // use this as a fast path for f64-likes where re() captures everything.
    std::mem::size_of::<S>() == std::mem::size_of::<f64>() && c.re() == 0.0
}

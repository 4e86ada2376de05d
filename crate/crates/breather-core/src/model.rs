//! Model data for the rescaled Klein-Gordon spatial-dynamics system: the odd
//! nonlinearity, the slow/fast split vector field, its Hamiltonian and
//! Poisson structure, and reconstruction of the physical breather field.
//!
//! Every small-denominator quantity (f(eps v)/eps^3 and friends) is evaluated
//! with the linear part subtracted analytically, as a Horner sum in (eps v)^2
//! times the appropriate power of v, so all assembled terms stay O(1) as
//! eps -> 0.

use serde::{Deserialize, Serialize};

use crate::flow::TrajectorySegment;
use crate::scalar::{Dual, Scalar};
use crate::spectral::{
    project_c, EllState, FullState, Grid, HypState, OddField, SpectralConfig,
};
use crate::{Error, Result};

/// Built-in nonlinearity families. All are odd with f(0) = f'(0) = f''(0) = 0
/// and f'''(0) > 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NonlinKind {
    /// f(u) = u - sin u, truncated to Taylor degree 13 on the grid.
    SineGordon,
    /// f(u) = u^3.
    Cubic,
    /// f(u) = sum c_i u^{2i+3} with user coefficients.
    OddPolynomial,
}

/// Odd analytic nonlinearity, stored as Taylor coefficients from degree 3:
/// taylor[i] multiplies u^{2i+3}.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Nonlinearity {
    pub kind: NonlinKind,
    taylor: Vec<f64>,
}

/// Degree-13 Taylor coefficients of u - sin u from the cubic term up.
const SINE_GORDON_TAYLOR: [f64; 6] = [
    1.0 / 6.0,
    -1.0 / 120.0,
    1.0 / 5040.0,
    -1.0 / 362880.0,
    1.0 / 39916800.0,
    -1.0 / 6227020800.0,
];

impl Nonlinearity {
    pub fn sine_gordon() -> Self {
        Nonlinearity {
            kind: NonlinKind::SineGordon,
            taylor: SINE_GORDON_TAYLOR.to_vec(),
        }
    }

    pub fn cubic() -> Self {
        Nonlinearity {
            kind: NonlinKind::Cubic,
            taylor: vec![1.0],
        }
    }

    /// Coefficients of u^3, u^5, ... ; the cubic coefficient must be positive
    /// so that f'''(0) > 0.
    pub fn odd_polynomial(coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.is_empty() || coeffs[0] <= 0.0 || coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::Overflow {
                context: "odd polynomial coefficients (need finite, cubic term > 0)".into(),
                value: coeffs.first().copied().unwrap_or(f64::NAN),
            });
        }
        Ok(Nonlinearity {
            kind: NonlinKind::OddPolynomial,
            taylor: coeffs,
        })
    }

    pub fn taylor(&self) -> &[f64] {
        &self.taylor
    }

    pub fn f_triple_prime_at_0(&self) -> f64 {
        6.0 * self.taylor[0]
    }

    /// f(u). The sine-Gordon branch switches to the exact transcendental form
    /// once u - sin u is no longer cancellation-dominated.
    pub fn f(&self, u: f64) -> f64 {
        if self.kind == NonlinKind::SineGordon && u.abs() >= 1e-3 {
            return u - u.sin();
        }
        let z = u * u;
        let mut acc = 0.0;
        for &c in self.taylor.iter().rev() {
            acc = acc * z + c;
        }
        u * z * acc
    }

    pub fn f_prime(&self, u: f64) -> f64 {
        if self.kind == NonlinKind::SineGordon && u.abs() >= 1e-3 {
            return 1.0 - u.cos();
        }
        let z = u * u;
        let mut acc = 0.0;
        for (i, &c) in self.taylor.iter().enumerate().rev() {
            acc = acc * z + (2 * i + 3) as f64 * c;
        }
        z * acc
    }

    pub fn f_double_prime(&self, u: f64) -> f64 {
        if self.kind == NonlinKind::SineGordon && u.abs() >= 1e-3 {
            return u.sin();
        }
        let z = u * u;
        let mut acc = 0.0;
        for (i, &c) in self.taylor.iter().enumerate().rev() {
            acc = acc * z + ((2 * i + 3) * (2 * i + 2)) as f64 * c;
        }
        u * acc
    }

    /// Antiderivative with F(0) = 0; even.
    pub fn f_anti(&self, u: f64) -> f64 {
        if self.kind == NonlinKind::SineGordon && u.abs() >= 1e-3 {
            return u * u / 2.0 + u.cos() - 1.0;
        }
        let z = u * u;
        let mut acc = 0.0;
        for (i, &c) in self.taylor.iter().enumerate().rev() {
            acc = acc * z + c / (2 * i + 4) as f64;
        }
        z * z * acc
    }

    /// f(eps v) / eps^3 as a function of the unscaled grid value v; O(v^3)
    /// uniformly in eps, no cancellation.
    pub fn scaled_f<S: Scalar>(&self, eps: f64, v: S) -> S {
        let z = v.scale(eps) * v.scale(eps);
        let mut acc = S::zero();
        for &c in self.taylor.iter().rev() {
            acc = acc * z + S::from_f64(c);
        }
        v * v * v * acc
    }

    /// f'(eps v) / eps^2.
    pub fn scaled_f_prime<S: Scalar>(&self, eps: f64, v: S) -> S {
        let z = v.scale(eps) * v.scale(eps);
        let mut acc = S::zero();
        for (i, &c) in self.taylor.iter().enumerate().rev() {
            acc = acc * z + S::from_f64((2 * i + 3) as f64 * c);
        }
        v * v * acc
    }

    /// f''(eps v) / eps, for variational equations.
    pub fn scaled_f_double_prime<S: Scalar>(&self, eps: f64, v: S) -> S {
        let z = v.scale(eps) * v.scale(eps);
        let mut acc = S::zero();
        for (i, &c) in self.taylor.iter().enumerate().rev() {
            acc = acc * z + S::from_f64(((2 * i + 3) * (2 * i + 2)) as f64 * c);
        }
        v * acc
    }

    /// Hamiltonian density F(eps u)/eps^4 - (f'''(0)/24) s^4 at a grid point,
    /// where u = s + w and s is the hyperbolic channel value. The quartic
    /// difference is factored through w = u - s so the result stays accurate
    /// when the elliptic part w is tiny.
    pub fn hamiltonian_density<S: Scalar>(&self, eps: f64, u: S, s: S, w: S) -> S {
        let c0 = self.taylor[0];
        // (c0/4)(u^4 - s^4) = (c0/4) w (u + s)(u^2 + s^2)
        let quart = (w * (u + s) * (u * u + s * s)).scale(c0 / 4.0);
        if self.taylor.len() == 1 {
            return quart;
        }
        // eps^2 u^6 * sum_{i>=1} c_i (eps u)^{2(i-1)} / (2i+4)
        let z = u.scale(eps) * u.scale(eps);
        let mut acc = S::zero();
        for (i, &c) in self.taylor.iter().enumerate().skip(1).rev() {
            acc = acc * z + S::from_f64(c / (2 * i + 4) as f64);
        }
        let u2 = u * u;
        quart + (u2 * u2 * u2 * acc).scale(eps * eps)
    }
}

/// Full parameter set of the rescaled system at one eps.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub eps: f64,
    pub omega: f64,
    pub nonlinearity: Nonlinearity,
    pub spectral: SpectralConfig,
    grid: Grid,
}

impl ModelParams {
    pub fn new(eps: f64, nonlinearity: Nonlinearity, n_modes: usize) -> Result<Self> {
        if !(eps > 0.0 && eps < 1.0) {
            return Err(Error::Overflow {
                context: "eps must lie in (0,1)".into(),
                value: eps,
            });
        }
        let omega = (1.0 - eps * eps).sqrt();
        let spectral = SpectralConfig::new(n_modes, omega)?;
        let grid = Grid::new(&spectral);
        Ok(ModelParams {
            eps,
            omega,
            nonlinearity,
            spectral,
            grid,
        })
    }

    pub fn with_collocation(
        eps: f64,
        nonlinearity: Nonlinearity,
        n_modes: usize,
        collocation_size: usize,
    ) -> Result<Self> {
        let mut p = Self::new(eps, nonlinearity, n_modes)?;
        p.spectral = SpectralConfig::with_collocation(n_modes, collocation_size, p.omega)?;
        p.grid = Grid::new(&p.spectral);
        Ok(p)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    /// Grid values of v = w^h sin x + w^c(x); the physical argument of f is
    /// eps * v.
    pub fn grid_values<S: Scalar>(&self, state: &FullState<S>) -> Result<Vec<S>> {
        let mut vals = self.grid.to_grid(&state.ell.y);
        let wh = state.hyp.w;
        let mut sup = 0.0f64;
        for (v, s) in vals.iter_mut().zip(&self.grid.sin1) {
            *v = *v + wh.scale(*s);
            let a = v.re();
            if !a.is_finite() {
                return Err(Error::Overflow {
                    context: "collocation values of the state".into(),
                    value: a,
                });
            }
            sup = sup.max(a.abs());
        }
        if self.eps * sup > 1e6 {
            return Err(Error::Overflow {
                context: "nonlinearity argument out of trusted range".into(),
                value: self.eps * sup,
            });
        }
        Ok(vals)
    }

    fn scaled_f_coeffs<S: Scalar>(&self, state: &FullState<S>) -> Result<OddField<S>> {
        let vals = self.grid_values(state)?;
        let fv: Vec<S> = vals
            .iter()
            .map(|&v| self.nonlinearity.scaled_f(self.eps, v))
            .collect();
        Ok(self.grid.to_coeffs(&fv))
    }
}

/// Hyperbolic slow term F of the first-order system:
/// (1/omega - 1) A W^h + (0, -P_h f(eps v) / (omega eps^3)).
pub fn assemble_f<S: Scalar>(state: &FullState<S>, p: &ModelParams) -> Result<HypState<S>> {
    let ph = p.scaled_f_coeffs(state)?.mode(1);
    let c = 1.0 / p.omega - 1.0;
    Ok(HypState {
        w: state.hyp.w1.scale(c),
        w1: state.hyp.w.scale(c) - ph.scale(1.0 / p.omega),
    })
}

/// Elliptic slow term G = (L^{-1}/(1-eps^2)) (0, w^c - eps^{-3} P_c f(eps v)).
pub fn assemble_g<S: Scalar>(state: &FullState<S>, p: &ModelParams) -> Result<EllState<S>> {
    let coeffs = p.scaled_f_coeffs(state)?;
    let pc = project_c(&coeffs);
    let n = state.n_modes();
    let om2 = p.omega * p.omega;
    let mut y1 = OddField::zero(n);
    for k in 2..=n {
        let m = SpectralConfig::l_multiplier(k);
        let g = (state.ell.y.mode(k) - pc.mode(k)).scale(1.0 / (om2 * m));
        y1.set_mode(k, g);
    }
    Ok(EllState {
        y: OddField::zero(n),
        y1,
    })
}

/// Right-hand side (A W^h + F, (J/eps) W^c + eps G).
pub fn vector_field<S: Scalar>(state: &FullState<S>, p: &ModelParams) -> Result<FullState<S>> {
    let f = assemble_f(state, p)?;
    let g = assemble_g(state, p)?;
    let n = state.n_modes();
    let mut ell = EllState::zero(n);
    for k in 2..=n {
        let m = SpectralConfig::l_multiplier(k);
        ell.y
            .set_mode(k, state.ell.y1.mode(k).scale(m / p.eps));
        ell.y1.set_mode(
            k,
            state.ell.y.mode(k).scale(-m / p.eps) + g.y1.mode(k).scale(p.eps),
        );
    }
    Ok(FullState {
        hyp: HypState {
            w: state.hyp.w1 + f.w,
            w1: state.hyp.w + f.w1,
        },
        ell,
    })
}

/// The untransformed system as a split right-hand side: slow part
/// (A W^h + F, eps G), fast part the exact (J/eps) rotation.
pub struct RawSystem<'a>(pub &'a ModelParams);

impl crate::flow::System for RawSystem<'_> {
    fn tag(&self) -> crate::flow::SystemTag {
        crate::flow::SystemTag::Raw
    }

    fn n_modes(&self) -> usize {
        self.0.spectral.n_modes
    }

    fn eps_rotation(&self) -> Option<f64> {
        Some(self.0.eps)
    }

    fn slow<S: Scalar>(&self, state: &FullState<S>) -> Result<FullState<S>> {
        let f = assemble_f(state, self.0)?;
        let g = assemble_g(state, self.0)?;
        let mut ell = EllState::zero(state.n_modes());
        ell.axpy(self.0.eps, &g);
        Ok(FullState {
            hyp: HypState {
                w: state.hyp.w1 + f.w,
                w1: state.hyp.w + f.w1,
            },
            ell,
        })
    }
}

/// Hamiltonian of the rescaled system. Quadratic elliptic terms are summed
/// mode-wise (exact Parseval); nonlinear terms use the dealiased collocation
/// trapezoid, exact for trigonometric polynomial integrands resolved by the
/// grid. Endpoint nodes contribute nothing because every field is odd.
pub fn hamiltonian<S: Scalar>(state: &FullState<S>, p: &ModelParams) -> Result<S> {
    let eps = p.eps;
    let om2 = p.omega * p.omega;
    let f3 = p.nonlinearity.f_triple_prime_at_0();
    let (wh, w1h) = (state.hyp.w, state.hyp.w1);

    // pi [ w1h^2/2 - wh^2/2 + (f'''(0)/32) wh^4 ]
    let wh2 = wh * wh;
    let hyp = (w1h * w1h - wh2).scale(0.5) + (wh2 * wh2).scale(f3 / 32.0);

    // (pi / (2 eps^2)) sum_k [ omega^2 (k^2-1) b_k^2 + (omega^2 k^2 - 1) a_k^2 ]
    let mut quad = S::zero();
    for k in 2..=state.n_modes() {
        let kk = (k * k) as f64;
        let a = state.ell.y.mode(k);
        let b = state.ell.y1.mode(k);
        quad = quad + (b * b).scale(om2 * (kk - 1.0)) + (a * a).scale(om2 * kk - 1.0);
    }
    quad = quad.scale(0.5 / (eps * eps));

    // integral over (-pi, pi) of F(eps u)/eps^4 - (f'''(0)/24)(wh sin x)^4
    let wc = p.grid.to_grid(&state.ell.y);
    let m = p.grid.size as f64;
    let mut nl = S::zero();
    for (j, w) in wc.iter().enumerate() {
        let s = wh.scale(p.grid.sin1[j]);
        let u = s + *w;
        nl = nl + p.nonlinearity.hamiltonian_density(eps, u, s, *w);
    }
    // 2 * (pi/(M+1)) sum_j: both half-periods contribute equally
    nl = nl.scale(2.0 * std::f64::consts::PI / (m + 1.0));

    let h = (hyp + quad).scale(std::f64::consts::PI) + nl;
    if !h.re().is_finite() {
        return Err(Error::Overflow {
            context: "hamiltonian".into(),
            value: h.re(),
        });
    }
    Ok(h)
}

/// Gradient of the Hamiltonian with respect to the packed coordinates
/// (w, w1, a_k, b_k), one dual forward pass per coordinate.
pub fn hamiltonian_gradient(state: &FullState<f64>, p: &ModelParams) -> Result<FullState<f64>> {
    let n = state.n_modes();
    let lift = |s: &FullState<f64>| -> FullState<Dual<f64>> {
        FullState {
            hyp: HypState {
                w: Dual::constant(s.hyp.w),
                w1: Dual::constant(s.hyp.w1),
            },
            ell: EllState {
                y: OddField::from_coeffs(s.ell.y.coeffs.iter().map(|&c| Dual::constant(c)).collect()),
                y1: OddField::from_coeffs(
                    s.ell.y1.coeffs.iter().map(|&c| Dual::constant(c)).collect(),
                ),
            },
        }
    };
    let mut grad = FullState::zero(n);
    {
        let mut d = lift(state);
        d.hyp.w = Dual::active(state.hyp.w);
        grad.hyp.w = hamiltonian(&d, p)?.d;
    }
    {
        let mut d = lift(state);
        d.hyp.w1 = Dual::active(state.hyp.w1);
        grad.hyp.w1 = hamiltonian(&d, p)?.d;
    }
    for k in 2..=n {
        let mut d = lift(state);
        d.ell.y.set_mode(k, Dual::active(state.ell.y.mode(k)));
        grad.ell.y.set_mode(k, hamiltonian(&d, p)?.d);
        let mut d = lift(state);
        d.ell.y1.set_mode(k, Dual::active(state.ell.y1.mode(k)));
        grad.ell.y1.set_mode(k, hamiltonian(&d, p)?.d);
    }
    Ok(grad)
}

/// Block weights of the Poisson operator: each 2x2 block acts as
/// weight * [[0, 1], [-1, 0]] on the corresponding gradient pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PoissonStructure {
    /// 1/(omega pi) on (dH/dw, dH/dw1).
    pub hyp_weight: f64,
    /// eps/(omega^2 pi sqrt(k^2-1)) on (dH/da_k, dH/db_k), k = 2..n_modes.
    pub ell_weight: Vec<f64>,
}

pub fn poisson_structure(p: &ModelParams) -> PoissonStructure {
    let n = p.spectral.n_modes;
    let om2 = p.omega * p.omega;
    let pi = std::f64::consts::PI;
    let ell_weight = (2..=n)
        .map(|k| p.eps / (om2 * pi * SpectralConfig::l_multiplier(k)))
        .collect();
    PoissonStructure {
        hyp_weight: 1.0 / (p.omega * pi),
        ell_weight,
    }
}

impl PoissonStructure {
    /// Applies the Poisson operator to a coordinate gradient, producing the
    /// Hamiltonian vector field.
    pub fn apply(&self, grad: &FullState<f64>) -> FullState<f64> {
        let n = grad.n_modes();
        let mut out = FullState::zero(n);
        out.hyp.w = self.hyp_weight * grad.hyp.w1;
        out.hyp.w1 = -self.hyp_weight * grad.hyp.w;
        for k in 2..=n {
            let w = self.ell_weight[k - 2];
            out.ell.y.set_mode(k, w * grad.ell.y1.mode(k));
            out.ell.y1.set_mode(k, -w * grad.ell.y.mode(k));
        }
        out
    }
}

/// Physical-space breather samples with all rescalings undone.
#[derive(Debug, Clone, Serialize)]
pub struct PhysicalField {
    /// Physical spatial positions, one per orbit node: x = tau/(eps omega).
    pub x: Vec<f64>,
    /// Physical times over one period 2 pi / omega.
    pub t: Vec<f64>,
    /// u[i][j] = u(x_i, t_j).
    pub u: Vec<Vec<f64>>,
    pub period: f64,
}

/// Value of the physical field u at one orbit state and physical time:
/// u = eps (w^h sin(omega t) + w^c(omega t)).
pub fn physical_value(state: &FullState<f64>, p: &ModelParams, t_phys: f64) -> f64 {
    let xi = p.omega * t_phys;
    let mut u = state.hyp.w * xi.sin();
    for k in 2..=state.n_modes() {
        u += state.ell.y.mode(k) * (k as f64 * xi).sin();
    }
    p.eps * u
}

/// Undoes the rescalings of the spatial-dynamics formulation and swaps the
/// roles of the evolution variable and the periodic variable back, so the
/// output is a function of physical space (rows) and physical time (columns).
pub fn reconstruct_physical(
    orbit: &TrajectorySegment,
    p: &ModelParams,
    t_count: usize,
) -> Result<PhysicalField> {
    if orbit.is_empty() {
        return Err(Error::EmptyOrbit("reconstruct_physical".into()));
    }
    let period = 2.0 * std::f64::consts::PI / p.omega;
    let t: Vec<f64> = (0..t_count)
        .map(|j| -period / 2.0 + period * j as f64 / t_count as f64)
        .collect();
    let x: Vec<f64> = orbit
        .times
        .iter()
        .map(|tau| tau / (p.eps * p.omega))
        .collect();
    let u = orbit
        .states
        .iter()
        .map(|s| t.iter().map(|&tj| physical_value(s, p, tj)).collect())
        .collect();
    Ok(PhysicalField { x, t, u, period })
}

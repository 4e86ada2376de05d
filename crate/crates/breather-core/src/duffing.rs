//! The slow hyperbolic limit equation w'' = w - (f'''(0)/8) w^3, its explicit
//! homoclinic orbit, and the Poincare section frame anchored on it. This is
//! the skeleton the full system's hyperbolic dynamics collapses onto as
//! eps -> 0, and the reference everything else is measured against.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::flow::{RotationTable, System, SystemTag, TrajectorySegment};
use crate::normal_form::{dual_part, lift_pair, NormalFormChain};
use crate::scalar::Scalar;
use crate::spectral::{apply_j, pack_ell, unpack_ell, EllState, FullState, HypState};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DuffingParams {
    /// f'''(0) of the nonlinearity; sets the cubic coefficient f3/8.
    pub f3: f64,
    /// Carried along for comparison runs against the eps-dependent systems.
    pub eps: f64,
}

impl DuffingParams {
    pub fn new(f3: f64) -> Result<Self> {
        Self::with_eps(f3, 0.0)
    }

    pub fn with_eps(f3: f64, eps: f64) -> Result<Self> {
        if !(f3 > 0.0 && f3.is_finite()) {
            return Err(Error::InvalidMode {
                mode: 0,
                reason: format!("cubic coefficient must be positive, got {f3}"),
            });
        }
        if !(eps >= 0.0 && eps.is_finite()) {
            return Err(Error::InvalidMode {
                mode: 0,
                reason: format!("eps must be nonnegative, got {eps}"),
            });
        }
        Ok(DuffingParams { f3, eps })
    }
}

/// (w, w1) -> (w1, w - (f3/8) w^3).
pub fn duffing_field<S: Scalar>(h: &HypState<S>, p: &DuffingParams) -> HypState<S> {
    let w = h.w;
    HypState {
        w: h.w1,
        w1: w - (w * w * w).scale(p.f3 / 8.0),
    }
}

/// First integral (w1^2 - w^2)/2 + (f3/32) w^4; zero along the homoclinic
/// loop, negative inside it.
pub fn h0_energy(h: &HypState<f64>, p: &DuffingParams) -> f64 {
    let w2 = h.w * h.w;
    0.5 * (h.w1 * h.w1 - w2) + p.f3 / 32.0 * w2 * w2
}

/// The explicit homoclinic orbit of the limit equation:
/// w = 4 / (sqrt(f3) cosh tau), w1 = dw/dtau.
pub fn homoclinic(tau: f64, p: &DuffingParams) -> HypState<f64> {
    let a = 4.0 / p.f3.sqrt();
    let sech = 1.0 / tau.cosh();
    HypState {
        w: a * sech,
        w1: -a * tau.tanh() * sech,
    }
}

/// Peak amplitude of the homoclinic orbit, 4/sqrt(f3).
pub fn homoclinic_amplitude(p: &DuffingParams) -> f64 {
    4.0 / p.f3.sqrt()
}

/// Transversal section data at the homoclinic apex x0 = homoclinic(0):
/// the gradient of the first integral there (section normal) and the field
/// direction (section tangent). Both are nonzero and orthogonal, so the
/// section {w1 = 0} near x0 is transversal to the flow.
#[derive(Debug, Clone, Copy)]
pub struct SectionFrame {
    pub x0: HypState<f64>,
    /// grad H0 at x0: (4/sqrt(f3), 0).
    pub normal: HypState<f64>,
    /// Field at x0: (0, -4/sqrt(f3)).
    pub tangent: HypState<f64>,
}

pub fn section_frame(p: &DuffingParams) -> SectionFrame {
    let a = homoclinic_amplitude(p);
    SectionFrame {
        x0: HypState { w: a, w1: 0.0 },
        normal: HypState { w: a, w1: 0.0 },
        tangent: HypState { w: 0.0, w1: -a },
    }
}

/// The limit equation as a (trivially split) system; the elliptic block is
/// inert. `n_modes` only sizes the state vectors for interoperability.
pub struct DuffingSystem {
    pub params: DuffingParams,
    pub n_modes: usize,
}

impl System for DuffingSystem {
    fn tag(&self) -> SystemTag {
        SystemTag::Duffing
    }

    fn n_modes(&self) -> usize {
        self.n_modes
    }

    fn eps_rotation(&self) -> Option<f64> {
        None
    }

    fn slow<S: Scalar>(&self, state: &FullState<S>) -> Result<FullState<S>> {
        Ok(FullState {
            hyp: duffing_field(&state.hyp, &self.params),
            ell: EllState::zero(state.n_modes()),
        })
    }
}

/// Hyperbolic component of the transformed field on the slice {W^c = 0}:
/// the planar system the hyperbolic pair obeys once the elliptic coupling
/// has been pushed down the cascade. Collapses onto `duffing_field` as
/// eps -> 0.
pub fn regular_field(h: &HypState<f64>, chain: &NormalFormChain) -> Result<HypState<f64>> {
    let n = chain.params().spectral.n_modes;
    let z = FullState {
        hyp: *h,
        ell: EllState::zero(n),
    };
    Ok(chain.transformed_field(&z)?.hyp)
}

/// The regular problem: hyperbolic motion confined to the slice {W^c = 0},
/// the elliptic block seeing only its linearization about that slice. One
/// dual pass computes both lanes: the value lane pushes (h, 0) through the
/// transformed field, the dual lane carries (0, W^c) and picks up exactly
/// (J/eps) W^c plus the coupling applied to W^c. The slice forcing never
/// enters, which is what makes {W^c = 0} exactly invariant here.
pub struct RegularSystem<'a>(pub &'a NormalFormChain);

impl System for RegularSystem<'_> {
    fn tag(&self) -> SystemTag {
        SystemTag::Regular
    }

    fn n_modes(&self) -> usize {
        self.0.params().spectral.n_modes
    }

    fn eps_rotation(&self) -> Option<f64> {
        Some(self.0.eps)
    }

    fn slow<S: Scalar>(&self, state: &FullState<S>) -> Result<FullState<S>> {
        let n = state.n_modes();
        let base = FullState {
            hyp: state.hyp,
            ell: EllState::zero(n),
        };
        let payload = FullState {
            hyp: HypState::zero(),
            ell: state.ell.clone(),
        };
        let th = self.0.transformed_field(&lift_pair(&base, &payload))?;
        let mut out: FullState<S> = FullState::zero(n);
        out.hyp.w = th.hyp.w.v;
        out.hyp.w1 = th.hyp.w1.v;
        out.ell = dual_part(&th).ell;
        // The splitting integrator owns the fast rotation; strip it back out.
        out.ell
            .axpy(-1.0 / self.0.eps, &apply_j(&state.ell, false));
        Ok(out)
    }
}

/// Propagates the linear system v' = (J/eps) v + G(tau) v over [s, t] by
/// symmetric splitting: exact mode-wise rotation for the stiff half-steps,
/// degree-4 Taylor exponential of the bounded coupling at each midpoint.
/// Returns the evolution matrix on packed coefficient vectors
/// [y_2.., y1_2..]. Backward spans (t < s) work by the same formula.
pub fn rotation_with_coupling<F>(
    t: f64,
    s: f64,
    eps: f64,
    n_modes: usize,
    dt: f64,
    coupling: F,
) -> Result<DMatrix<f64>>
where
    F: Fn(f64) -> Result<DMatrix<f64>>,
{
    if !(dt > 0.0 && dt.is_finite() && t.is_finite() && s.is_finite()) {
        return Err(Error::SpanError(format!(
            "need finite span and positive dt, got [{s}, {t}] with dt {dt}"
        )));
    }
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidMode {
            mode: 0,
            reason: format!("rotation needs positive eps, got {eps}"),
        });
    }
    let dim = 2 * (n_modes - 1);
    let span = t - s;
    let n_steps = ((span.abs() / dt).round() as usize).max(1);
    let h = span / n_steps as f64;
    let table = RotationTable::new(n_modes, 0.5 * h, eps);
    let mut rot = DMatrix::<f64>::zeros(dim, dim);
    for j in 0..dim {
        let mut col = vec![0.0; dim];
        col[j] = 1.0;
        table.apply_packed(&mut col);
        for (i, &v) in col.iter().enumerate() {
            rot[(i, j)] = v;
        }
    }
    let mut e = DMatrix::<f64>::identity(dim, dim);
    for i in 0..n_steps {
        let mid = s + (i as f64 + 0.5) * h;
        let g = coupling(mid)?;
        if g.nrows() != dim || g.ncols() != dim {
            return Err(Error::InvalidMode {
                mode: n_modes,
                reason: format!(
                    "coupling matrix is {}x{}, expected {dim}x{dim}",
                    g.nrows(),
                    g.ncols()
                ),
            });
        }
        // Degree-4 Taylor of exp(h G); |h| ||G|| stays far below one here.
        let mut x = DMatrix::<f64>::identity(dim, dim);
        let mut term = DMatrix::<f64>::identity(dim, dim);
        for j in 1..=4 {
            term = (&g * term) * (h / j as f64);
            x += &term;
        }
        e = &rot * &x * &rot * e;
    }
    Ok(e)
}

/// Grid spacing for the coupling samples along a base orbit. Anchored at
/// absolute multiples of this so that evolutions over subspans of the same
/// orbit reuse identical samples, making composition exact up to roundoff.
const COUPLING_GRID: f64 = 0.1;

/// Internal splitting step for `evolution_e`.
const EVOLUTION_DT: f64 = 1e-2;

/// Evolution operator of the variational elliptic system along a base
/// orbit: propagates packed elliptic vectors from time s to time t under
/// v' = (J/eps) v + coupling(hyp(tau)) v, the coupling frozen to the orbit's
/// hyperbolic path. Coupling matrices are sampled on the coarse anchored
/// grid and linearly interpolated in between.
pub fn evolution_e(
    t: f64,
    s: f64,
    base: &TrajectorySegment,
    chain: &NormalFormChain,
) -> Result<DMatrix<f64>> {
    if base.is_empty() {
        return Err(Error::EmptyOrbit("evolution_e".into()));
    }
    if !base.covers(s, t) {
        return Err(Error::SpanError(format!(
            "evolution span [{s}, {t}] not covered by base orbit [{:?}, {:?}]",
            base.times.first(),
            base.times.last()
        )));
    }
    let n = chain.params().spectral.n_modes;
    let dim = 2 * (n - 1);
    let (orbit_lo, orbit_hi) = (base.times[0], *base.times.last().unwrap());
    let hyp_at = |tau: f64| -> HypState<f64> {
        let tau = tau.clamp(orbit_lo, orbit_hi);
        let i = base
            .times
            .partition_point(|&u| u <= tau)
            .clamp(1, base.times.len() - 1);
        let (t0, t1) = (base.times[i - 1], base.times[i]);
        let frac = if t1 > t0 { (tau - t0) / (t1 - t0) } else { 0.0 };
        let (a, b) = (&base.states[i - 1].hyp, &base.states[i].hyp);
        HypState {
            w: a.w + frac * (b.w - a.w),
            w1: a.w1 + frac * (b.w1 - a.w1),
        }
    };
    let lo = s.min(t);
    let hi = s.max(t);
    let j0 = (lo / COUPLING_GRID).floor() as i64;
    let j1 = ((hi / COUPLING_GRID).ceil() as i64).max(j0 + 1);
    let g_nodes: Vec<DMatrix<f64>> = (j0..=j1)
        .map(|j| {
            let h = hyp_at(j as f64 * COUPLING_GRID);
            let mut g = DMatrix::<f64>::zeros(dim, dim);
            for col in 0..dim {
                let mut packed = vec![0.0; dim];
                packed[col] = 1.0;
                let gd = chain.g_bar_apply(&h, &unpack_ell(&packed, n))?;
                for (row, &v) in pack_ell(&gd).iter().enumerate() {
                    g[(row, col)] = v;
                }
            }
            Ok(g)
        })
        .collect::<Result<_>>()?;
    let coupling = |tau: f64| -> Result<DMatrix<f64>> {
        let x = tau / COUPLING_GRID;
        let j = (x.floor() as i64).clamp(j0, j1 - 1);
        let frac = (x - j as f64).clamp(0.0, 1.0);
        let a = &g_nodes[(j - j0) as usize];
        let b = &g_nodes[(j - j0 + 1) as usize];
        Ok(a * (1.0 - frac) + b * frac)
    };
    rotation_with_coupling(t, s, chain.eps, n, EVOLUTION_DT, coupling)
}

//! Lyapunov-Perron construction of the local invariant manifolds of the
//! transformed system near the origin: center-(un)stable and (un)stable
//! manifolds, their counterparts for the regular comparison problem, and
//! the center manifold obtained by intersecting the first two.
//!
//! The hyperbolic block diagonalizes over the orthonormal pair
//! e_s = (1,-1)/sqrt2, e_u = (1,1)/sqrt2 with rates -1 and +1; the elliptic
//! block rotates with frequencies sqrt(k^2-1)/eps. Each manifold is the
//! fixed point of an integral operator whose hyperbolic kernels decay like
//! e^{-|tau - s|} and whose elliptic kernel is the exact rotation, so the
//! trapezoid rule on a graded grid only ever sees slow integrands.
//! Components that would grow along the chosen time direction are instead
//! integrated inward from infinity (truncated at `t_inf`, with the analytic
//! tail folded into the reported residual); their value at tau = 0 is what
//! pins the graph maps.

use std::f64::consts::FRAC_1_SQRT_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::duffing::{duffing_field, regular_field, DuffingParams};
use crate::flow::{RotationTable, System, SystemTag, TrajectorySegment};
use crate::normal_form::{domain_norm, NormalFormChain, TransformedSystem};
use crate::spectral::{apply_a, y1_norm, EllState, FullState, HypState};
use crate::{Error, Result};

/// Dense spacing of the quadrature grid near tau = 0.
const DENSE_DT: f64 = 1e-2;
/// Extent of the densely resolved region before geometric coarsening.
const DENSE_SPAN: f64 = 5.0;
/// Central-difference pairs used to probe the cut-off Lipschitz bound.
const PROBE_COUNT: usize = 96;
/// Cut-off halvings attempted before accepting the residual coupling floor.
const SHRINK_MAX: usize = 8;
/// A halving must cut sigma by at least this factor to be kept.
const SHRINK_GAIN: f64 = 0.9;
/// Relative step (times r) for graph-map finite differences.
const DERIV_STEP_REL: f64 = 1e-4;
/// Iteration cap for the center-manifold pair solve.
const CENTER_PSI_CAP: usize = 20;

/// Stable/unstable coefficients of a hyperbolic state along the orthonormal
/// eigenvectors e_s = (1,-1)/sqrt2 and e_u = (1,1)/sqrt2.
pub fn split_hyp(h: &HypState<f64>) -> (f64, f64) {
    (
        FRAC_1_SQRT_2 * (h.w - h.w1),
        FRAC_1_SQRT_2 * (h.w + h.w1),
    )
}

/// Inverse of [`split_hyp`].
pub fn join_hyp(a_s: f64, a_u: f64) -> HypState<f64> {
    HypState {
        w: FRAC_1_SQRT_2 * (a_s + a_u),
        w1: FRAC_1_SQRT_2 * (a_u - a_s),
    }
}

/// Knobs of the Lyapunov-Perron solver. `eta` is the exponential weight of
/// the trajectory norm, `r` the graph domain radius, `cutoff_r` the inner
/// cut-off radius (the modification starts beyond it), `rho` the trajectory
/// ball the weighted norm is checked against, `t_inf` the truncation horizon
/// of the improper integrals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ManifoldConfig {
    pub eta: f64,
    pub rho: f64,
    pub r: f64,
    pub cutoff_r: f64,
    pub t_inf: f64,
    pub quad_nodes: usize,
    pub fixpt_tol: f64,
    pub max_iters: usize,
}

impl ManifoldConfig {
    /// Defaults for a given cut-off radius: weight 1/4, graph radius half
    /// the cut-off, horizon 64 so the truncated tails weigh e^{-32}.
    pub fn new(cutoff_r: f64) -> Self {
        ManifoldConfig {
            eta: 0.25,
            rho: cutoff_r,
            r: 0.5 * cutoff_r,
            cutoff_r,
            t_inf: 64.0,
            quad_nodes: 160,
            fixpt_tol: 1e-10,
            max_iters: 80,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Error::InvalidMode { mode: 0, reason };
        if !(self.eta > 0.0 && self.eta < 0.5) {
            return Err(bad(format!("weight eta must lie in (0, 1/2), got {}", self.eta)));
        }
        if !(self.r > 0.0 && self.r.is_finite() && self.cutoff_r >= self.r && self.rho >= self.r) {
            return Err(bad(format!(
                "need 0 < r <= cutoff_r and r <= rho, got r={} cutoff_r={} rho={}",
                self.r, self.cutoff_r, self.rho
            )));
        }
        if !(self.t_inf * (1.0 - 2.0 * self.eta) >= 30.0) {
            return Err(bad(format!(
                "horizon too short: t_inf (1 - 2 eta) = {} < 30",
                self.t_inf * (1.0 - 2.0 * self.eta)
            )));
        }
        if self.quad_nodes < 16 {
            return Err(bad(format!("need at least 16 tail nodes, got {}", self.quad_nodes)));
        }
        if !(self.fixpt_tol > 0.0 && self.fixpt_tol <= 1e-3) {
            return Err(bad(format!("fixed-point tolerance out of range: {}", self.fixpt_tol)));
        }
        if self.max_iters < 4 {
            return Err(bad(format!("iteration cap too small: {}", self.max_iters)));
        }
        Ok(())
    }
}

/// Graded quadrature grid on [0, t_inf]: dense steps where the hyperbolic
/// kernels vary, geometric coarsening in the tail where every integrand has
/// already decayed.
pub fn lp_grid(cfg: &ManifoldConfig) -> Vec<f64> {
    let dense_end = cfg.t_inf.min(DENSE_SPAN);
    let n_dense = (dense_end / DENSE_DT).round().max(1.0) as usize;
    let mut g = Vec::with_capacity(n_dense + cfg.quad_nodes + 1);
    for i in 0..=n_dense {
        g.push(dense_end * i as f64 / n_dense as f64);
    }
    if cfg.t_inf > dense_end {
        let ratio = cfg.t_inf / dense_end;
        for j in 1..=cfg.quad_nodes {
            g.push(dense_end * ratio.powf(j as f64 / cfg.quad_nodes as f64));
        }
        *g.last_mut().unwrap() = cfg.t_inf;
    }
    g
}

/// C^2 cut-off profile: identically 1 on [0,1], identically 0 on [2, inf),
/// bridged by the quintic smoothstep so two derivatives vanish at both ends.
pub fn cutoff_chi(u: f64) -> f64 {
    if u <= 1.0 {
        1.0
    } else if u >= 2.0 {
        0.0
    } else {
        let x = u - 1.0;
        1.0 - x * x * x * (10.0 - 15.0 * x + 6.0 * x * x)
    }
}

/// Nonlinear remainder of the transformed slow field: the slow part minus
/// the hyperbolic linearization. The elliptic slot keeps the whole slow
/// forcing (coupling acting on W^c plus the exponentially small slice
/// residue); the remainder vanishes at the origin.
fn chain_nonlinear(chain: &NormalFormChain, z: &FullState<f64>) -> Result<FullState<f64>> {
    let mut n = TransformedSystem(chain).slow(z)?;
    let lin = apply_a(&z.hyp);
    n.hyp.w -= lin.w;
    n.hyp.w1 -= lin.w1;
    Ok(n)
}

/// Cut-off modification of the transformed system: the nonlinear remainder
/// is multiplied by chi(|W| / cutoff_r), so the field is untouched on the
/// inner ball and exactly linear outside twice the radius. `sigma` is a
/// probed Lipschitz bound of the modified remainder in the mixed norm
/// |.|_X + |.|_{Y_1}; `margin` is the worst contraction margin
/// 1 - sigma/w - sigma/(1-w) over weights w in [eta, 2 eta].
#[derive(Debug, Clone)]
pub struct CutoffSystem<'a> {
    pub chain: &'a NormalFormChain,
    pub cutoff_r: f64,
    pub sigma: f64,
    pub margin: f64,
}

impl CutoffSystem<'_> {
    pub fn margin_ok(&self) -> bool {
        self.margin > 0.5
    }

    /// chi(|z|/R) times the nonlinear remainder; identically zero outside
    /// the support, without touching the (possibly untabulated) chain there.
    pub fn nonlinear(&self, z: &FullState<f64>) -> Result<FullState<f64>> {
        let u = domain_norm(z) / self.cutoff_r;
        if u >= 2.0 {
            return Ok(FullState::zero(z.n_modes()));
        }
        let chi = cutoff_chi(u);
        let n = chain_nonlinear(self.chain, z)?;
        Ok(if chi < 1.0 { n.scaled(chi) } else { n })
    }
}

fn random_state(rng: &mut ChaCha8Rng, n_modes: usize, target: f64) -> FullState<f64> {
    let hyp_share = rng.gen::<f64>();
    let phi = rng.gen::<f64>() * std::f64::consts::TAU;
    let hyp = HypState::new(
        target * hyp_share * phi.cos(),
        target * hyp_share * phi.sin(),
    );
    let mut ell = EllState::zero(n_modes);
    for k in 2..=n_modes {
        ell.y.set_mode(k, rng.gen::<f64>() * 2.0 - 1.0);
        ell.y1.set_mode(k, rng.gen::<f64>() * 2.0 - 1.0);
    }
    let yn = y1_norm(&ell);
    let ell = if yn > 0.0 {
        ell.scaled(target * (1.0 - hyp_share) / yn)
    } else {
        ell
    };
    FullState::new(hyp, ell)
}

/// Builds the cut-off system and probes its Lipschitz bound by central
/// differences at seeded random points spanning the cut-off shell. The
/// exponentially small slice residue is probed as part of the same
/// difference, which can only overstate sigma.
pub fn cutoff_system<'a>(
    chain: &'a NormalFormChain,
    cfg: &ManifoldConfig,
) -> Result<CutoffSystem<'a>> {
    cfg.validate()?;
    let dom = chain.budget.omega_radius(chain.built_level(), chain.eps);
    if 2.0 * cfg.cutoff_r > dom {
        return Err(Error::DomainExceeded {
            context: "cutoff_system".into(),
            value: 2.0 * cfg.cutoff_r,
            bound: dom,
        });
    }
    let mut sys = CutoffSystem {
        chain,
        cutoff_r: cfg.cutoff_r,
        sigma: 0.0,
        margin: 0.0,
    };
    let n = chain.params().spectral.n_modes;
    let mut rng = ChaCha8Rng::seed_from_u64(0x1f2e_3d4c);
    let h = 1e-6 * cfg.cutoff_r;
    let mut sigma: f64 = 0.0;
    for _ in 0..PROBE_COUNT {
        let radius = 2.4 * cfg.cutoff_r * rng.gen::<f64>();
        let z = random_state(&mut rng, n, radius);
        let v = random_state(&mut rng, n, 1.0);
        let mut zp = z.clone();
        zp.axpy(h, &v);
        let mut zm = z;
        zm.axpy(-h, &v);
        let mut d = sys.nonlinear(&zp)?;
        d.axpy(-1.0, &sys.nonlinear(&zm)?);
        sigma = sigma.max((d.hyp.norm() + y1_norm(&d.ell)) / (2.0 * h));
    }
    sys.sigma = sigma;
    sys.margin = [1.0, 1.5, 2.0]
        .iter()
        .map(|&f| {
            let w = f * cfg.eta;
            1.0 - sigma / w - sigma / (1.0 - w)
        })
        .fold(f64::INFINITY, f64::min);
    Ok(sys)
}

/// Shrinks the cut-off radius from the configured start until the probed
/// margin clears 1/2 or shrinking stops paying: the elliptic coupling at
/// the origin is O(eps) and no radius removes it, so for moderate eps the
/// final margin is reported honestly below the threshold. Keeps
/// r = cutoff_r / 2 and rho = cutoff_r in step, so graph domains stay
/// inside the unmodified ball.
pub fn fitted_cutoff<'a>(
    chain: &'a NormalFormChain,
    cfg: &mut ManifoldConfig,
) -> Result<CutoffSystem<'a>> {
    let mut cur = cutoff_system(chain, cfg)?;
    for _ in 0..SHRINK_MAX {
        if cur.margin_ok() {
            break;
        }
        let mut trial_cfg = *cfg;
        trial_cfg.cutoff_r *= 0.5;
        trial_cfg.r = 0.5 * trial_cfg.cutoff_r;
        trial_cfg.rho = trial_cfg.cutoff_r;
        let trial = cutoff_system(chain, &trial_cfg)?;
        if trial.margin_ok() || trial.sigma < SHRINK_GAIN * cur.sigma {
            *cfg = trial_cfg;
            cur = trial;
            continue;
        }
        break;
    }
    Ok(cur)
}

/// Which integral operator to iterate. Forward kinds live on tau >= 0,
/// backward kinds on tau <= 0; star kinds drop the elliptic block entirely
/// and describe the regular comparison problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpKind {
    /// Center-stable: boundary (W_s, W_c), unstable component pinned.
    Cs,
    /// Center-unstable: boundary (W_u, W_c), stable component pinned.
    Cu,
    /// Stable: boundary W_s; both the unstable and the whole elliptic
    /// component are integrated inward from +infinity.
    S,
    /// Unstable: boundary W_u, mirror of `S` on tau <= 0.
    U,
    /// Stable manifold of the regular problem (hyperbolic only).
    StarS,
    /// Unstable manifold of the regular problem.
    StarU,
}

impl LpKind {
    fn forward(self) -> bool {
        matches!(self, LpKind::Cs | LpKind::S | LpKind::StarS)
    }

    fn has_center(self) -> bool {
        !matches!(self, LpKind::StarS | LpKind::StarU)
    }

    fn center_from_zero(self) -> bool {
        matches!(self, LpKind::Cs | LpKind::Cu)
    }

    /// The hyperbolic direction that decays along the kind's time
    /// direction and therefore carries boundary data.
    fn near_is_stable(self) -> bool {
        self.forward()
    }

    fn label(self) -> &'static str {
        match self {
            LpKind::Cs => "cs",
            LpKind::Cu => "cu",
            LpKind::S => "s",
            LpKind::U => "u",
            LpKind::StarS => "star_s",
            LpKind::StarU => "star_u",
        }
    }
}

/// Field source for the integral operator.
pub enum LpSystem<'a> {
    /// Cut-off transformed remainder; required by the center kinds.
    Cut(&'a CutoffSystem<'a>),
    /// Unmodified transformed remainder; the purely (un)stable kinds decay
    /// and never leave the small ball, so no cut-off is needed.
    Plain(&'a NormalFormChain),
    /// Regular comparison problem at the chain's eps.
    Star(&'a NormalFormChain),
    /// Slow limit equation; realizes the star kinds at eps = 0.
    StarLimit(DuffingParams),
}

impl LpSystem<'_> {
    fn n_modes(&self) -> usize {
        match self {
            LpSystem::Cut(c) => c.chain.params().spectral.n_modes,
            LpSystem::Plain(ch) | LpSystem::Star(ch) => ch.params().spectral.n_modes,
            LpSystem::StarLimit(_) => 1,
        }
    }

    fn eps(&self) -> f64 {
        match self {
            LpSystem::Cut(c) => c.chain.eps,
            LpSystem::Plain(ch) | LpSystem::Star(ch) => ch.eps,
            LpSystem::StarLimit(p) => p.eps,
        }
    }

    fn tag(&self) -> SystemTag {
        match self {
            LpSystem::Cut(_) | LpSystem::Plain(_) => SystemTag::Transformed,
            LpSystem::Star(_) => SystemTag::Regular,
            LpSystem::StarLimit(_) => SystemTag::Duffing,
        }
    }

    fn nonlinear(&self, z: &FullState<f64>) -> Result<FullState<f64>> {
        match self {
            LpSystem::Cut(c) => c.nonlinear(z),
            LpSystem::Plain(ch) => chain_nonlinear(ch, z),
            LpSystem::Star(ch) => {
                let f = regular_field(&z.hyp, ch)?;
                let lin = apply_a(&z.hyp);
                Ok(FullState::new(
                    HypState::new(f.w - lin.w, f.w1 - lin.w1),
                    EllState::zero(z.n_modes()),
                ))
            }
            LpSystem::StarLimit(p) => {
                let f = duffing_field(&z.hyp, p);
                let lin = apply_a(&z.hyp);
                Ok(FullState::new(
                    HypState::new(f.w - lin.w, f.w1 - lin.w1),
                    EllState::zero(z.n_modes()),
                ))
            }
        }
    }

    fn accepts(&self, kind: LpKind) -> bool {
        matches!(
            (kind, self),
            (LpKind::Cs | LpKind::Cu, LpSystem::Cut(_))
                | (LpKind::S | LpKind::U, LpSystem::Plain(_))
                | (
                    LpKind::StarS | LpKind::StarU,
                    LpSystem::Star(_) | LpSystem::StarLimit(_)
                )
        )
    }
}

/// Boundary data for the integral operator; each kind reads only the slots
/// it pins (`w_s` for cs/s/star_s, `w_u` for cu/u/star_u, `w_c` for cs/cu).
#[derive(Debug, Clone)]
pub struct LpBoundary {
    pub w_s: f64,
    pub w_u: f64,
    pub w_c: EllState<f64>,
}

impl LpBoundary {
    pub fn new(w_s: f64, w_u: f64, w_c: EllState<f64>) -> Self {
        LpBoundary { w_s, w_u, w_c }
    }

    pub fn stable(w_s: f64, n_modes: usize) -> Self {
        Self::new(w_s, 0.0, EllState::zero(n_modes))
    }

    pub fn unstable(w_u: f64, n_modes: usize) -> Self {
        Self::new(0.0, w_u, EllState::zero(n_modes))
    }

    pub fn center_stable(w_s: f64, w_c: EllState<f64>) -> Self {
        Self::new(w_s, 0.0, w_c)
    }

    pub fn center_unstable(w_u: f64, w_c: EllState<f64>) -> Self {
        Self::new(0.0, w_u, w_c)
    }
}

fn boundary_axpy(b: &LpBoundary, c: f64, d: &LpBoundary) -> LpBoundary {
    let mut w_c = b.w_c.clone();
    w_c.axpy(c, &d.w_c);
    LpBoundary {
        w_s: b.w_s + c * d.w_s,
        w_u: b.w_u + c * d.w_u,
        w_c,
    }
}

/// One graph-map evaluation: the loaded boundary coordinates, the pinned
/// components at tau = 0, and how the fixed point converged. Components a
/// kind does not pin are zero.
#[derive(Debug, Clone)]
pub struct GraphMapEval {
    pub base_hyp: f64,
    pub base_center: EllState<f64>,
    pub value_s: f64,
    pub value_u: f64,
    pub value_center: EllState<f64>,
    pub fixpoint_residual: f64,
    pub iterations: usize,
}

impl GraphMapEval {
    /// Mixed-norm magnitude of the graph value.
    pub fn value_norm(&self) -> f64 {
        self.value_s.hypot(self.value_u) + y1_norm(&self.value_center)
    }
}

/// Iterates the integral operator on the graded grid. Returns the fixed
/// point as a path in internal order (boundary node first) plus the graph
/// evaluation at tau = 0.
fn lp_engine(
    kind: LpKind,
    base: &LpBoundary,
    cfg: &ManifoldConfig,
    system: &LpSystem,
    warm: Option<&[FullState<f64>]>,
) -> Result<(Vec<FullState<f64>>, GraphMapEval)> {
    cfg.validate()?;
    if !system.accepts(kind) {
        return Err(Error::InvalidMode {
            mode: 0,
            reason: format!("kind {} does not match the supplied field source", kind.label()),
        });
    }
    let n = system.n_modes();
    let eps = system.eps();
    let grid = lp_grid(cfg);
    let nn = grid.len();
    let sgn = if kind.forward() { 1.0 } else { -1.0 };
    let near_stable = kind.near_is_stable();
    let b_near = if near_stable { base.w_s } else { base.w_u };
    let with_center_boundary = kind.center_from_zero();
    if with_center_boundary && base.w_c.n_modes() != n {
        return Err(Error::InvalidMode {
            mode: base.w_c.n_modes(),
            reason: format!("boundary center block sized for {} modes, system has {}", base.w_c.n_modes(), n),
        });
    }
    let base_norm = b_near.abs()
        + if with_center_boundary {
            y1_norm(&base.w_c)
        } else {
            0.0
        };
    if !(base_norm < cfg.r) {
        return Err(Error::DomainExceeded {
            context: format!("lp_fixpoint({}) boundary", kind.label()),
            value: base_norm,
            bound: cfg.r,
        });
    }

    // Per-interval exact rotation factors. Center kinds propagate forward
    // from the boundary, the decaying kinds integrate backward from the
    // horizon, so the angles differ in sign.
    let rot: Vec<RotationTable> = if kind.has_center() {
        let dt_sign = if with_center_boundary { sgn } else { -sgn };
        (0..nn - 1)
            .map(|i| RotationTable::new(n, dt_sign * (grid[i + 1] - grid[i]), eps))
            .collect()
    } else {
        Vec::new()
    };

    let mut path: Vec<FullState<f64>> = match warm {
        Some(w) => {
            if w.len() != nn {
                return Err(Error::InvalidMode {
                    mode: w.len(),
                    reason: format!("warm start has {} nodes, grid has {}", w.len(), nn),
                });
            }
            w.to_vec()
        }
        None => {
            // Boundary-propagated linear part: decaying hyperbolic lane plus
            // the rotated center block.
            let mut p = Vec::with_capacity(nn);
            let mut bc = if with_center_boundary {
                base.w_c.clone()
            } else {
                EllState::zero(n)
            };
            for i in 0..nn {
                let a = b_near * (-grid[i]).exp();
                let hyp = if near_stable {
                    join_hyp(a, 0.0)
                } else {
                    join_hyp(0.0, a)
                };
                p.push(FullState::new(hyp, bc.clone()));
                if with_center_boundary && i < nn - 1 {
                    rot[i].apply(&mut bc);
                }
            }
            p
        }
    };

    let mut converged = false;
    let mut iters_done = 0;
    let mut final_diff = f64::INFINITY;
    let mut prev_diff = f64::INFINITY;
    let mut rises = 0usize;
    let mut forcing_wsup = 0.0f64;

    for iter in 1..=cfg.max_iters {
        // (near comp, far comp, elliptic forcing) of the remainder per node.
        let fields: Vec<(f64, f64, EllState<f64>)> = path
            .par_iter()
            .map(|z| -> Result<(f64, f64, EllState<f64>)> {
                let nl = system.nonlinear(z)?;
                let (a_s, a_u) = split_hyp(&nl.hyp);
                let pair = if near_stable { (a_s, a_u) } else { (a_u, a_s) };
                Ok((pair.0, pair.1, nl.ell))
            })
            .collect::<Result<Vec<_>>>()?;

        forcing_wsup = fields
            .iter()
            .zip(&grid)
            .map(|(f, g)| (-cfg.eta * g).exp() * (f.0.hypot(f.1) + y1_norm(&f.2)))
            .fold(0.0, f64::max);

        // Decaying lane: boundary value plus inward convolution.
        let mut near = vec![0.0; nn];
        near[0] = b_near;
        for i in 0..nn - 1 {
            let h = grid[i + 1] - grid[i];
            let e = (-h).exp();
            near[i + 1] = e * (near[i] + sgn * 0.5 * h * fields[i].0) + sgn * 0.5 * h * fields[i + 1].0;
        }

        // Growing lane: integrated backward from the horizon, zero tail.
        let mut far = vec![0.0; nn];
        for i in (0..nn - 1).rev() {
            let h = grid[i + 1] - grid[i];
            let e = (-h).exp();
            far[i] = e * far[i + 1] - sgn * 0.5 * h * (fields[i].1 + e * fields[i + 1].1);
        }

        // Center block: exact rotation between nodes, trapezoid for the
        // slow forcing; direction depends on the kind.
        let cen: Vec<EllState<f64>> = if !kind.has_center() {
            Vec::new()
        } else if with_center_boundary {
            let mut cs = Vec::with_capacity(nn);
            cs.push(base.w_c.clone());
            for i in 0..nn - 1 {
                let h = grid[i + 1] - grid[i];
                let mut c = cs[i].clone();
                c.axpy(sgn * 0.5 * h, &fields[i].2);
                rot[i].apply(&mut c);
                c.axpy(sgn * 0.5 * h, &fields[i + 1].2);
                cs.push(c);
            }
            cs
        } else {
            let mut cs = vec![EllState::zero(n); nn];
            for i in (0..nn - 1).rev() {
                let h = grid[i + 1] - grid[i];
                let mut c = cs[i + 1].clone();
                c.axpy(-sgn * 0.5 * h, &fields[i + 1].2);
                rot[i].apply(&mut c);
                c.axpy(-sgn * 0.5 * h, &fields[i].2);
                cs[i] = c;
            }
            cs
        };

        let mut diff = 0.0f64;
        for i in 0..nn {
            let hyp = if near_stable {
                join_hyp(near[i], far[i])
            } else {
                join_hyp(far[i], near[i])
            };
            let ell = if kind.has_center() {
                cen[i].clone()
            } else {
                EllState::zero(n)
            };
            let z = FullState::new(hyp, ell);
            let dw = z.hyp.w - path[i].hyp.w;
            let dw1 = z.hyp.w1 - path[i].hyp.w1;
            let mut de = z.ell.clone();
            de.axpy(-1.0, &path[i].ell);
            diff = diff.max((-cfg.eta * grid[i]).exp() * (dw.hypot(dw1) + y1_norm(&de)));
            path[i] = z;
        }
        iters_done = iter;
        final_diff = diff;
        if diff <= 0.9 * cfg.fixpt_tol {
            converged = true;
            break;
        }
        if diff > prev_diff && diff > cfg.fixpt_tol {
            rises += 1;
            if rises >= 4 {
                return Err(Error::NoContraction {
                    context: format!("lp_fixpoint({})", kind.label()),
                    rate: diff / prev_diff,
                });
            }
        } else {
            rises = 0;
        }
        prev_diff = diff;
    }

    if !converged {
        return Err(Error::MaxIters {
            context: format!("lp_fixpoint({})", kind.label()),
            cap: cfg.max_iters,
            residual: final_diff,
        });
    }

    // Truncating the improper integrals at t_inf drops a tail bounded by
    // the weighted forcing sup times e^{-(1-2 eta) t_inf}; fold it into the
    // reported residual so truncation stays auditable.
    let tail = forcing_wsup * (-(1.0 - 2.0 * cfg.eta) * cfg.t_inf).exp();
    let (a_s0, a_u0) = split_hyp(&path[0].hyp);
    let eval = GraphMapEval {
        base_hyp: b_near,
        base_center: if with_center_boundary {
            base.w_c.clone()
        } else {
            EllState::zero(n)
        },
        value_s: if near_stable { 0.0 } else { a_s0 },
        value_u: if near_stable { a_u0 } else { 0.0 },
        value_center: if kind.has_center() && !with_center_boundary {
            path[0].ell.clone()
        } else {
            EllState::zero(n)
        },
        fixpoint_residual: final_diff + tail,
        iterations: iters_done,
    };
    Ok((path, eval))
}

fn path_segment(
    kind: LpKind,
    cfg: &ManifoldConfig,
    path: Vec<FullState<f64>>,
    system: &LpSystem,
) -> TrajectorySegment {
    let grid = lp_grid(cfg);
    let (times, states) = if kind.forward() {
        (grid, path)
    } else {
        let times: Vec<f64> = grid.iter().rev().map(|g| -g).collect();
        let states: Vec<FullState<f64>> = path.into_iter().rev().collect();
        (times, states)
    };
    TrajectorySegment {
        times,
        states,
        eps: system.eps(),
        system_tag: system.tag(),
    }
}

/// Solves the integral equation for the requested manifold kind and returns
/// the fixed-point trajectory (time-ordered) plus the graph evaluation.
pub fn lp_fixpoint(
    kind: LpKind,
    base: &LpBoundary,
    cfg: &ManifoldConfig,
    system: &LpSystem,
) -> Result<(TrajectorySegment, GraphMapEval)> {
    let (path, eval) = lp_engine(kind, base, cfg, system, None)?;
    Ok((path_segment(kind, cfg, path, system), eval))
}

/// Same as [`lp_fixpoint`] but starting the iteration from a supplied
/// trajectory (time-ordered, on the same grid).
pub fn lp_fixpoint_from(
    kind: LpKind,
    base: &LpBoundary,
    cfg: &ManifoldConfig,
    system: &LpSystem,
    start: &TrajectorySegment,
) -> Result<(TrajectorySegment, GraphMapEval)> {
    let warm: Vec<FullState<f64>> = if kind.forward() {
        start.states.clone()
    } else {
        start.states.iter().rev().cloned().collect()
    };
    let (path, eval) = lp_engine(kind, base, cfg, system, Some(&warm))?;
    Ok((path_segment(kind, cfg, path, system), eval))
}

/// Which graph map to read off. Names say which components are produced as
/// a function of which boundary coordinates; the star kinds are the
/// regular-problem counterparts of the last two.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphKind {
    /// h_u(W_s, W_c): unstable component over the center-stable base.
    UOfCs,
    /// h_s(W_u, W_c): stable component over the center-unstable base.
    SOfCu,
    /// (W_s, W_c) components over W_u: graph of the unstable manifold.
    CsOfU,
    /// (W_u, W_c) components over W_s: graph of the stable manifold.
    CuOfS,
    /// Regular problem: unstable component over W_s.
    StarUOfS,
    /// Regular problem: stable component over W_u.
    StarSOfU,
}

impl GraphKind {
    pub fn lp_kind(self) -> LpKind {
        match self {
            GraphKind::UOfCs => LpKind::Cs,
            GraphKind::SOfCu => LpKind::Cu,
            GraphKind::CsOfU => LpKind::U,
            GraphKind::CuOfS => LpKind::S,
            GraphKind::StarUOfS => LpKind::StarS,
            GraphKind::StarSOfU => LpKind::StarU,
        }
    }
}

/// Evaluates a graph map directly from boundary data and a field source.
pub fn graph_h(
    kind: GraphKind,
    base: &LpBoundary,
    cfg: &ManifoldConfig,
    system: &LpSystem,
) -> Result<GraphMapEval> {
    let (_, eval) = lp_engine(kind.lp_kind(), base, cfg, system, None)?;
    Ok(eval)
}

/// Directional derivative of a graph map.
#[derive(Debug, Clone)]
pub struct GraphDeriv {
    pub value_s: f64,
    pub value_u: f64,
    pub center: EllState<f64>,
}

impl GraphDeriv {
    pub fn magnitude(&self) -> f64 {
        self.value_s.hypot(self.value_u) + y1_norm(&self.center)
    }
}

/// Result of the center-manifold pair solve.
#[derive(Debug, Clone)]
pub struct CenterPsiEval {
    pub w_s: f64,
    pub w_u: f64,
    pub iterations: usize,
    pub residual: f64,
}

/// Shared state for manifold computations over one chain: the fitted
/// cut-off and the configuration it settled on.
pub struct ManifoldContext<'a> {
    pub cfg: ManifoldConfig,
    pub cutoff: CutoffSystem<'a>,
}

impl<'a> ManifoldContext<'a> {
    /// Default setup: cut-off starts at half the reference radius K and is
    /// halved until the contraction margin clears 1/2 or stops improving.
    pub fn new(chain: &'a NormalFormChain) -> Result<Self> {
        let mut cfg = ManifoldConfig::new(0.5 * chain.budget.big_k);
        let cutoff = fitted_cutoff(chain, &mut cfg)?;
        Ok(ManifoldContext { cfg, cutoff })
    }

    /// Setup from an explicit configuration (still re-fitting the cut-off).
    pub fn with_config(chain: &'a NormalFormChain, mut cfg: ManifoldConfig) -> Result<Self> {
        let cutoff = fitted_cutoff(chain, &mut cfg)?;
        Ok(ManifoldContext { cfg, cutoff })
    }

    pub fn chain(&self) -> &'a NormalFormChain {
        self.cutoff.chain
    }

    pub fn n_modes(&self) -> usize {
        self.cutoff.chain.params().spectral.n_modes
    }

    fn system_for(&self, kind: LpKind) -> LpSystem<'_> {
        match kind {
            LpKind::Cs | LpKind::Cu => LpSystem::Cut(&self.cutoff),
            LpKind::S | LpKind::U => LpSystem::Plain(self.cutoff.chain),
            LpKind::StarS | LpKind::StarU => LpSystem::Star(self.cutoff.chain),
        }
    }

    pub fn fixpoint(
        &self,
        kind: LpKind,
        base: &LpBoundary,
    ) -> Result<(TrajectorySegment, GraphMapEval)> {
        lp_fixpoint(kind, base, &self.cfg, &self.system_for(kind))
    }

    pub fn graph(&self, kind: GraphKind, base: &LpBoundary) -> Result<GraphMapEval> {
        let lp = kind.lp_kind();
        let (_, eval) = lp_engine(lp, base, &self.cfg, &self.system_for(lp), None)?;
        Ok(eval)
    }

    /// Directional derivative of the graph map along `dir` (boundary
    /// coordinates) by a 4th-order central difference with step 1e-4 r;
    /// every stencil point is warm-started from the base fixed point.
    pub fn graph_derivative(
        &self,
        kind: GraphKind,
        base: &LpBoundary,
        dir: &LpBoundary,
    ) -> Result<GraphDeriv> {
        let step = DERIV_STEP_REL * self.cfg.r;
        let lp = kind.lp_kind();
        let system = self.system_for(lp);
        let (base_path, _) = lp_engine(lp, base, &self.cfg, &system, None)?;
        let mut evals = Vec::with_capacity(4);
        for c in [-2.0, -1.0, 1.0, 2.0] {
            let b = boundary_axpy(base, c * step, dir);
            let (_, ev) = lp_engine(lp, &b, &self.cfg, &system, Some(&base_path))?;
            evals.push(ev);
        }
        let stencil = |f: &dyn Fn(&GraphMapEval) -> f64| {
            (f(&evals[0]) - 8.0 * f(&evals[1]) + 8.0 * f(&evals[2]) - f(&evals[3]))
                / (12.0 * step)
        };
        let mut center = evals[0].value_center.clone();
        center.axpy(-8.0, &evals[1].value_center);
        center.axpy(8.0, &evals[2].value_center);
        center.axpy(-1.0, &evals[3].value_center);
        center = center.scaled(1.0 / (12.0 * step));
        Ok(GraphDeriv {
            value_s: stencil(&|e| e.value_s),
            value_u: stencil(&|e| e.value_u),
            center,
        })
    }

    /// Solves W_s = h_s(W_u, W_c), W_u = h_u(W_s, W_c) for the center
    /// manifold point above W_c. Plain Picard iteration suffices: the
    /// composed contraction rate is the product of two graph Lipschitz
    /// bounds, far below one. Fixed points are warm-started across rounds.
    pub fn center_psi(&self, w_c: &EllState<f64>) -> Result<CenterPsiEval> {
        let wc_norm = y1_norm(w_c);
        if !(wc_norm < self.cfg.r) {
            return Err(Error::DomainExceeded {
                context: "center_psi".into(),
                value: wc_norm,
                bound: self.cfg.r,
            });
        }
        let system = LpSystem::Cut(&self.cutoff);
        let (mut w_s, mut w_u) = (0.0f64, 0.0f64);
        let mut warm_cs: Option<Vec<FullState<f64>>> = None;
        let mut warm_cu: Option<Vec<FullState<f64>>> = None;
        let mut residual = f64::INFINITY;
        let mut prev = f64::INFINITY;
        let mut rises = 0usize;
        for iter in 1..=CENTER_PSI_CAP {
            let bcs = LpBoundary::center_stable(w_s, w_c.clone());
            let (pcs, ecs) = lp_engine(LpKind::Cs, &bcs, &self.cfg, &system, warm_cs.as_deref())?;
            let bcu = LpBoundary::center_unstable(w_u, w_c.clone());
            let (pcu, ecu) = lp_engine(LpKind::Cu, &bcu, &self.cfg, &system, warm_cu.as_deref())?;
            let (ns, nu) = (ecu.value_s, ecs.value_u);
            residual = (ns - w_s).abs() + (nu - w_u).abs();
            w_s = ns;
            w_u = nu;
            warm_cs = Some(pcs);
            warm_cu = Some(pcu);
            if residual <= 10.0 * self.cfg.fixpt_tol {
                return Ok(CenterPsiEval {
                    w_s,
                    w_u,
                    iterations: iter,
                    residual,
                });
            }
            if residual > prev {
                rises += 1;
                if rises >= 3 {
                    return Err(Error::NoContraction {
                        context: "center_psi".into(),
                        rate: residual / prev,
                    });
                }
            } else {
                rises = 0;
            }
            prev = residual;
        }
        Err(Error::MaxIters {
            context: "center_psi".into(),
            cap: CENTER_PSI_CAP,
            residual,
        })
    }

    /// Directional derivative of the center-manifold pair at `w_c` along a
    /// center direction, by the same 4th-order stencil as the graph maps.
    pub fn center_psi_derivative(
        &self,
        w_c: &EllState<f64>,
        dir: &EllState<f64>,
    ) -> Result<(f64, f64)> {
        let step = DERIV_STEP_REL * self.cfg.r;
        let mut evals = Vec::with_capacity(4);
        for c in [-2.0, -1.0, 1.0, 2.0] {
            let mut p = w_c.clone();
            p.axpy(c * step, dir);
            evals.push(self.center_psi(&p)?);
        }
        let d = |f: &dyn Fn(&CenterPsiEval) -> f64| {
            (f(&evals[0]) - 8.0 * f(&evals[1]) + 8.0 * f(&evals[2]) - f(&evals[3]))
                / (12.0 * step)
        };
        Ok((d(&|e| e.w_s), d(&|e| e.w_u)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hyperbolic_split_is_orthonormal_and_diagonalizing() {
        let h = join_hyp(0.3, -0.7);
        let (a_s, a_u) = split_hyp(&h);
        assert!((a_s - 0.3).abs() < 1e-15 && (a_u + 0.7).abs() < 1e-15);
        // A e_s = -e_s, A e_u = +e_u.
        let es = join_hyp(1.0, 0.0);
        let aes = apply_a(&es);
        assert!((aes.w + es.w).abs() < 1e-15 && (aes.w1 + es.w1).abs() < 1e-15);
        let eu = join_hyp(0.0, 1.0);
        let aeu = apply_a(&eu);
        assert!((aeu.w - eu.w).abs() < 1e-15 && (aeu.w1 - eu.w1).abs() < 1e-15);
    }

    #[test]
    fn cutoff_profile_is_a_partition_of_the_line() {
        assert_eq!(cutoff_chi(0.0), 1.0);
        assert_eq!(cutoff_chi(1.0), 1.0);
        assert_eq!(cutoff_chi(2.0), 0.0);
        assert_eq!(cutoff_chi(5.0), 0.0);
        let mid = cutoff_chi(1.5);
        assert!(mid > 0.0 && mid < 1.0);
        // C^1 seams: finite differences across the junctions stay flat.
        for u in [1.0, 2.0] {
            let d = (cutoff_chi(u + 1e-6) - cutoff_chi(u - 1e-6)) / 2e-6;
            assert!(d.abs() < 1e-5, "kink at {u}: slope {d}");
        }
    }

    #[test]
    fn grid_is_graded_and_spans_the_horizon() {
        let cfg = ManifoldConfig::new(0.5);
        let g = lp_grid(&cfg);
        assert_eq!(g[0], 0.0);
        assert_eq!(*g.last().unwrap(), cfg.t_inf);
        assert!(g.windows(2).all(|w| w[1] > w[0]));
        assert!((g[1] - DENSE_DT).abs() < 1e-12);
    }
}

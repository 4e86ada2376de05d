//! Shooting to the symmetry section and the energy intersection argument.
//!
//! The local manifold graphs live in a small ball around the origin; the
//! breather core is the excursion along the slow homoclinic. This module
//! flows local manifold points to the section through the homoclinic apex,
//! parametrizes the section traces of the center-(un)stable manifolds as
//! graphs over the elliptic slot, and locates a reversible orbit as a zero
//! of the energy gap between the two traces. The gap at the root bounds the
//! oscillatory tail of the orbit.

use std::sync::Mutex;

use nalgebra::{DMatrix, DVector};

use crate::duffing::{self, evolution_e, DuffingParams, DuffingSystem, RegularSystem};
use crate::flow::{integrate, sample, System, SystemTag, TrajectorySegment};
use crate::manifolds::{
    join_hyp, lp_fixpoint, lp_fixpoint_from, LpBoundary, LpKind, LpSystem, ManifoldContext,
};
use crate::model::{hamiltonian, reconstruct_physical, PhysicalField};
use crate::normal_form::TransformedSystem;
use crate::scalar::Scalar;
use crate::spectral::{cone_form, pack_ell, unpack_ell, y1_norm, EllState, FullState, HypState};
use crate::{Error, Result};

/// Tail amplitudes at or below this are integrator noise, not signal.
pub const NOISE_FLOOR: f64 = 1e-14;

/// Which manifold family is being shot at the section.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SectionSide {
    /// Center-stable: local points reach the section flowing backward.
    Cs,
    /// Center-unstable: forward.
    Cu,
}

impl SectionSide {
    fn idx(self) -> usize {
        match self {
            SectionSide::Cs => 0,
            SectionSide::Cu => 1,
        }
    }
}

/// Orthogonal frame of the section through the homoclinic apex x0.
///
/// v is the flow direction at x0 and d the energy gradient; the section is
/// the affine plane through x0 spanned by d and the whole elliptic block,
/// i.e. the points whose hyperbolic offset has no v-component.
#[derive(Debug, Clone)]
pub struct SectionFrame {
    pub x0: HypState<f64>,
    pub v: HypState<f64>,
    pub d: HypState<f64>,
}

impl SectionFrame {
    pub fn new(f3: f64) -> Result<Self> {
        let fr = duffing::section_frame(&DuffingParams::new(f3)?);
        Ok(SectionFrame {
            x0: fr.x0,
            v: fr.tangent,
            d: fr.normal,
        })
    }

    /// Component of the hyperbolic offset from x0 along the unit flow
    /// direction. Zero exactly on the section.
    pub fn p_v(&self, h: &HypState<f64>) -> f64 {
        let n = (self.v.w * self.v.w + self.v.w1 * self.v.w1).sqrt();
        ((h.w - self.x0.w) * self.v.w + (h.w1 - self.x0.w1) * self.v.w1) / n
    }

    /// Component along the unit energy gradient: the scalar graph slot of a
    /// section trace.
    pub fn p_d(&self, h: &HypState<f64>) -> f64 {
        let n = (self.d.w * self.d.w + self.d.w1 * self.d.w1).sqrt();
        ((h.w - self.x0.w) * self.d.w + (h.w1 - self.x0.w1) * self.d.w1) / n
    }
}

/// Which dynamical level the shooting runs on. `Full` is the production
/// path; the other two are controls with closed-form answers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PipelineMode {
    /// Transformed remainder field with the center-(un)stable graphs.
    Full,
    /// Regular comparison problem: the elliptic block is transported
    /// linearly and never feeds back, so both section traces coincide.
    Regular,
    /// Slow limit equation alone; the elliptic block is inert. Section
    /// geometry tests only.
    Star,
}

/// Tolerances and spans for the section shooting.
#[derive(Debug, Clone)]
pub struct IntersectCfg {
    /// Local base amplitude as a fraction of the manifold ball radius.
    pub base_frac: f64,
    /// Ball radius for the rescaled elliptic slot of the section traces.
    pub b: f64,
    /// Bisection stops when the energy gap is this small.
    pub root_tol: f64,
    pub max_bisect: usize,
    /// Tail amplitudes are measured at times at least this far from the
    /// section: three decay times of the slow homoclinic to 1e-3 of peak.
    pub t_tail: f64,
    /// Crossing search span on either side of the local point.
    pub horizon: f64,
    pub dt: f64,
    pub newton_tol: f64,
    pub newton_cap: usize,
    /// Temporal samples of the reconstructed physical field.
    pub t_count: usize,
}

impl Default for IntersectCfg {
    fn default() -> Self {
        IntersectCfg {
            base_frac: 0.5,
            b: 1.0,
            root_tol: 1e-12,
            max_bisect: 50,
            t_tail: 3.0 * 1000.0_f64.acosh(),
            horizon: 12.0,
            dt: 1e-2,
            newton_tol: 1e-12,
            newton_cap: 12,
            t_count: 96,
        }
    }
}

impl IntersectCfg {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            self.base_frac,
            self.b,
            self.root_tol,
            self.t_tail,
            self.horizon,
            self.dt,
            self.newton_tol,
        ];
        if pos.iter().any(|x| !x.is_finite() || *x <= 0.0) || self.base_frac > 1.0 {
            return Err(Error::InvalidMode {
                mode: 0,
                reason: "intersection config fields must be positive (base_frac <= 1)".into(),
            });
        }
        if self.horizon < 10.0 * self.dt {
            return Err(Error::InvalidMode {
                mode: 0,
                reason: "crossing horizon shorter than ten steps".into(),
            });
        }
        Ok(())
    }
}

/// One shot of a system enum so the three pipeline levels share the flight
/// and dense-output code.
enum FlowSys<'a> {
    Full(TransformedSystem<'a>),
    Regular(RegularSystem<'a>),
    Star(DuffingSystem),
}

impl System for FlowSys<'_> {
    fn tag(&self) -> SystemTag {
        match self {
            FlowSys::Full(s) => s.tag(),
            FlowSys::Regular(s) => s.tag(),
            FlowSys::Star(s) => s.tag(),
        }
    }

    fn n_modes(&self) -> usize {
        match self {
            FlowSys::Full(s) => s.n_modes(),
            FlowSys::Regular(s) => s.n_modes(),
            FlowSys::Star(s) => s.n_modes(),
        }
    }

    fn eps_rotation(&self) -> Option<f64> {
        match self {
            FlowSys::Full(s) => s.eps_rotation(),
            FlowSys::Regular(s) => s.eps_rotation(),
            FlowSys::Star(s) => s.eps_rotation(),
        }
    }

    fn slow<S: Scalar>(&self, state: &FullState<S>) -> Result<FullState<S>> {
        match self {
            FlowSys::Full(s) => s.slow(state),
            FlowSys::Regular(s) => s.slow(state),
            FlowSys::Star(s) => s.slow(state),
        }
    }
}

/// A located section crossing.
#[derive(Debug, Clone)]
pub struct CrossingEval {
    pub state: FullState<f64>,
    /// Flow time from the local manifold point (negative for cs).
    pub tau: f64,
    /// Section coordinate of `state`; the polish drives it to roundoff.
    pub p_v_residual: f64,
}

/// A section-trace graph evaluation: the manifold point over a prescribed
/// rescaled elliptic value.
#[derive(Debug, Clone)]
pub struct UpsilonEval {
    /// Scalar graph value: d-component of the crossing.
    pub d_comp: f64,
    pub state: FullState<f64>,
    pub tau: f64,
    pub iterations: usize,
    /// Elliptic shooting residual at acceptance.
    pub residual: f64,
    /// Boundary value of the local graph that realizes the crossing.
    pub pre_image: EllState<f64>,
    /// Local manifold path (decay times).
    pub path: TrajectorySegment,
    /// Flight from the local point to past the crossing.
    pub flight: TrajectorySegment,
}

/// Section traces of the purely stable and unstable manifolds, rescaled to
/// O(1); the homotopy ends of the energy argument.
#[derive(Debug, Clone)]
pub struct Endpoints {
    pub y_stable: EllState<f64>,
    pub y_unstable: EllState<f64>,
    pub cross_stable: CrossingEval,
    pub cross_unstable: CrossingEval,
    /// Transformed energy at the stable crossing. Exactly zero in exact
    /// arithmetic; the measured value calibrates the energy zero of the
    /// cs trace so the gap is free of the flight's energy drift.
    pub base_stable: f64,
    /// Same for the unstable crossing and the cu trace.
    pub base_unstable: f64,
}

/// A reversible orbit through the section with an exponentially small tail.
#[derive(Debug)]
pub struct BreatherResult {
    pub eps: f64,
    /// Homotopy parameter of the energy-gap root.
    pub s0: f64,
    /// Glued orbit in transformed coordinates; time zero at the section.
    pub orbit: TrajectorySegment,
    pub physical: PhysicalField,
    /// Sup of the elliptic graph norm over |t| >= t_tail.
    pub tail_amp: f64,
    /// Transformed energy on the center trace at the root.
    pub energy_on_center: f64,
    /// Energy gap at the accepted root.
    pub gap_at_root: f64,
    /// Scalar mismatch of the two section traces at the root.
    pub upsilon_gap: f64,
    pub h_at_0: f64,
    pub h_at_1: f64,
    pub bisect_steps: usize,
}

/// Exponential fit of tail amplitude against 1/eps.
#[derive(Debug, Clone)]
pub struct ExpFit {
    /// Decay constant: tail ~ exp(-c_fit / eps).
    pub c_fit: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// eps values dropped for sitting at the noise floor.
    pub excluded: Vec<f64>,
}

struct SideCache {
    y_bar: EllState<f64>,
    path: TrajectorySegment,
}

/// Shooting state over one chain: section frame, resolved local base
/// amplitude, and warm-start caches per side.
pub struct SectionProblem<'a> {
    ctx: &'a ManifoldContext<'a>,
    pub frame: SectionFrame,
    pub cfg: IntersectCfg,
    mode: PipelineMode,
    base_amp: f64,
    star: DuffingParams,
    warm: Mutex<[Option<SideCache>; 2]>,
}

impl<'a> SectionProblem<'a> {
    pub fn new(ctx: &'a ManifoldContext<'a>, cfg: IntersectCfg) -> Result<Self> {
        Self::with_mode(ctx, cfg, PipelineMode::Full)
    }

    pub fn with_mode(
        ctx: &'a ManifoldContext<'a>,
        cfg: IntersectCfg,
        mode: PipelineMode,
    ) -> Result<Self> {
        cfg.validate()?;
        let f3 = ctx.chain().params().nonlinearity.f_triple_prime_at_0();
        let frame = SectionFrame::new(f3)?;
        let base_amp = cfg.base_frac * ctx.cfg.r;
        Ok(SectionProblem {
            ctx,
            frame,
            cfg,
            mode,
            base_amp,
            star: DuffingParams::new(f3)?,
            warm: Mutex::new([None, None]),
        })
    }

    pub fn mode(&self) -> PipelineMode {
        self.mode
    }

    pub fn base_amp(&self) -> f64 {
        self.base_amp
    }

    pub fn eps(&self) -> f64 {
        self.ctx.chain().eps
    }

    fn exp_alpha(&self) -> f64 {
        self.ctx.chain().alpha_hat.exp()
    }

    fn flow_sys(&self) -> FlowSys<'a> {
        let chain = self.ctx.chain();
        match self.mode {
            PipelineMode::Full => FlowSys::Full(TransformedSystem(chain)),
            PipelineMode::Regular => FlowSys::Regular(RegularSystem(chain)),
            PipelineMode::Star => FlowSys::Star(DuffingSystem {
                params: self.star,
                n_modes: self.ctx.n_modes(),
            }),
        }
    }

    fn lp_system(&self, kind: LpKind) -> LpSystem<'_> {
        match self.mode {
            PipelineMode::Full => match kind {
                LpKind::Cs | LpKind::Cu => LpSystem::Cut(&self.ctx.cutoff),
                _ => LpSystem::Plain(self.ctx.chain()),
            },
            PipelineMode::Regular => LpSystem::Star(self.ctx.chain()),
            PipelineMode::Star => LpSystem::StarLimit(self.star),
        }
    }

    fn center_kind(&self, side: SectionSide) -> LpKind {
        match (self.mode, side) {
            (PipelineMode::Full, SectionSide::Cs) => LpKind::Cs,
            (PipelineMode::Full, SectionSide::Cu) => LpKind::Cu,
            (_, SectionSide::Cs) => LpKind::StarS,
            (_, SectionSide::Cu) => LpKind::StarU,
        }
    }

    /// Transformed energy: the Hamiltonian pulled back through the inverse
    /// of the normal-form composition. In the control modes the elliptic
    /// block carries no energy exchange and only the scalar part counts.
    pub fn h_tilde(&self, z: &FullState<f64>) -> Result<f64> {
        match self.mode {
            PipelineMode::Full => {
                let w = self.ctx.chain().inverse(z)?;
                hamiltonian(&w, self.ctx.chain().params())
            }
            _ => Ok(duffing::h0_energy(&z.hyp, &self.star)),
        }
    }

    /// Local manifold point over (a, w_c) on the requested side, with its
    /// decay path. Warm restarts reuse the previous path and are only used
    /// by the shooting loop, where the boundary moves slightly.
    fn local_point(
        &self,
        side: SectionSide,
        a: f64,
        w_c: &EllState<f64>,
        warm: bool,
    ) -> Result<(FullState<f64>, TrajectorySegment)> {
        let kind = self.center_kind(side);
        let boundary = match (self.mode, side) {
            (PipelineMode::Full, SectionSide::Cs) => LpBoundary::center_stable(a, w_c.clone()),
            (PipelineMode::Full, SectionSide::Cu) => LpBoundary::center_unstable(a, w_c.clone()),
            (_, SectionSide::Cs) => LpBoundary::stable(a, self.ctx.n_modes()),
            (_, SectionSide::Cu) => LpBoundary::unstable(a, self.ctx.n_modes()),
        };
        let sys = self.lp_system(kind);
        let start = if warm {
            self.warm.lock().unwrap()[side.idx()]
                .as_ref()
                .map(|c| c.path.clone())
        } else {
            None
        };
        let (path, _eval) = match start {
            Some(p) => lp_fixpoint_from(kind, &boundary, &self.ctx.cfg, &sys, &p)?,
            None => lp_fixpoint(kind, &boundary, &self.ctx.cfg, &sys)?,
        };
        let node = match side {
            SectionSide::Cs => path.first(),
            SectionSide::Cu => path.last(),
        };
        let mut z = node
            .ok_or_else(|| Error::EmptyOrbit("local manifold path".into()))?
            .1
            .clone();
        if self.mode != PipelineMode::Full {
            // Control modes: the elliptic block rides along as a passenger
            // and is not part of the hyperbolic boundary problem.
            z.ell = w_c.clone();
        }
        if warm {
            self.warm.lock().unwrap()[side.idx()] = Some(SideCache {
                y_bar: w_c.clone(),
                path: path.clone(),
            });
        }
        Ok((z, path))
    }

    /// Flight from a local point to the first section crossing away from
    /// the origin: backward for cs, forward for cu. Node scan for the sign
    /// change of the section coordinate, dense-output bisection inside the
    /// bracket, then a short Newton polish on re-integrated states.
    fn hit_from(
        &self,
        side: SectionSide,
        z_loc: &FullState<f64>,
    ) -> Result<(CrossingEval, TrajectorySegment)> {
        let sys = self.flow_sys();
        let span = match side {
            SectionSide::Cs => -self.cfg.horizon,
            SectionSide::Cu => self.cfg.horizon,
        };
        let seg = integrate(&sys, z_loc, (0.0, span), self.cfg.dt)?;
        let g: Vec<f64> = seg.states.iter().map(|z| self.frame.p_v(&z.hyp)).collect();
        let n = seg.times.len();
        let order: Vec<usize> = match side {
            SectionSide::Cs => (0..n - 1).rev().collect(),
            SectionSide::Cu => (0..n - 1).collect(),
        };
        let mut bracket = None;
        for i in order {
            if g[i] * g[i + 1] < 0.0 || g[i + 1] == 0.0 {
                bracket = Some(i);
                break;
            }
        }
        let i = bracket.ok_or_else(|| {
            Error::NoCrossing(format!(
                "side {:?}: section coordinate keeps sign {:+.3e} over horizon {}",
                side, g[n / 2], self.cfg.horizon
            ))
        })?;

        // Dense-output bisection down to the Hermite model's resolution.
        let (mut lo, mut hi) = (seg.times[i], seg.times[i + 1]);
        let mut g_lo = g[i];
        let mut tau = 0.5 * (lo + hi);
        for _ in 0..60 {
            tau = 0.5 * (lo + hi);
            let zm = sample(&sys, &seg, tau)?;
            let gm = self.frame.p_v(&zm.hyp);
            if g_lo * gm <= 0.0 {
                hi = tau;
            } else {
                lo = tau;
                g_lo = gm;
            }
        }

        // Polish against the integrator itself: single steps off the left
        // bracket node, Newton in the crossing time.
        let (node_t, node_z) = (seg.times[i], &seg.states[i]);
        let mut z = step_to(&sys, node_z, node_t, tau)?;
        for _ in 0..4 {
            let gv = self.frame.p_v(&z.hyp);
            if gv.abs() < 1e-15 {
                break;
            }
            let f = sys.full_field(&z)?;
            let gd = (f.hyp.w * self.frame.v.w + f.hyp.w1 * self.frame.v.w1)
                / (self.frame.v.w * self.frame.v.w + self.frame.v.w1 * self.frame.v.w1).sqrt();
            if gd.abs() < 1e-12 {
                break;
            }
            tau = (tau - gv / gd).clamp(seg.times[i] - self.cfg.dt, seg.times[i + 1] + self.cfg.dt);
            z = step_to(&sys, node_z, node_t, tau)?;
        }
        let residual = self.frame.p_v(&z.hyp);
        Ok((
            CrossingEval {
                state: z,
                tau,
                p_v_residual: residual,
            },
            seg,
        ))
    }

    /// Section crossing of the manifold point over (a, w_c).
    pub fn section_hit(
        &self,
        side: SectionSide,
        a: f64,
        w_c: &EllState<f64>,
    ) -> Result<CrossingEval> {
        let (z, _) = self.local_point(side, a, w_c, false)?;
        Ok(self.hit_from(side, &z)?.0)
    }

    /// Section-trace graph: solve for the local boundary value whose
    /// crossing has elliptic part exp(alpha_hat) * y_tilde, and return the
    /// scalar d-slot of that crossing. Newton with the transported elliptic
    /// frame as the (frozen) derivative surrogate.
    pub fn upsilon(&self, side: SectionSide, y_tilde: &EllState<f64>) -> Result<UpsilonEval> {
        if self.mode == PipelineMode::Star {
            return Err(Error::InvalidMode {
                mode: 2,
                reason: "slow-limit mode has no elliptic shooting problem".into(),
            });
        }
        let yn = y1_norm(y_tilde);
        if yn > self.cfg.b {
            return Err(Error::DomainExceeded {
                context: "upsilon rescaled boundary".into(),
                value: yn,
                bound: self.cfg.b,
            });
        }
        let ea = self.exp_alpha();
        let target = y_tilde.scaled(ea);
        let mut y_bar = match self.warm.lock().unwrap()[side.idx()].as_ref() {
            Some(c) => c.y_bar.clone(),
            None => target.clone(),
        };
        let mut surrogate: Option<DMatrix<f64>> = None;
        let mut last = f64::INFINITY;
        for it in 0..self.cfg.newton_cap {
            let (z_loc, path) = self.local_point(side, self.base_amp, &y_bar, true)?;
            let (cross, seg) = self.hit_from(side, &z_loc)?;
            let mut r = target.clone();
            r.axpy(-1.0, &cross.state.ell);
            let rn = y1_norm(&r);
            if rn <= self.cfg.newton_tol {
                return Ok(UpsilonEval {
                    d_comp: self.frame.p_d(&cross.state.hyp),
                    state: cross.state,
                    tau: cross.tau,
                    iterations: it + 1,
                    residual: rn,
                    pre_image: y_bar,
                    path,
                    flight: seg,
                });
            }
            last = rn;
            let e = match &surrogate {
                Some(e) => e,
                None => {
                    let m = self.transport(&seg, cross.tau)?;
                    surrogate = Some(m);
                    surrogate.as_ref().unwrap()
                }
            };
            let delta = e * DVector::from_vec(pack_ell(&r));
            let d = unpack_ell(delta.as_slice(), self.ctx.n_modes());
            y_bar.axpy(1.0, &d);
        }
        Err(Error::NewtonDiverged {
            context: format!("upsilon side {:?} at eps {}", side, self.eps()),
            residual: last,
            iters: self.cfg.newton_cap,
        })
    }

    /// Elliptic transport from crossing time back to the local point along
    /// the flight; the inverse sensitivity of the crossing value to the
    /// boundary value, exact for the regular level.
    fn transport(&self, seg: &TrajectorySegment, tau: f64) -> Result<DMatrix<f64>> {
        evolution_e(0.0, tau, seg, self.ctx.chain())
    }

    /// Section traces of the purely stable/unstable manifolds, rescaled by
    /// exp(-alpha_hat). These are the homotopy endpoints.
    pub fn endpoints(&self) -> Result<Endpoints> {
        let n = self.ctx.n_modes();
        let (s_kind, u_kind) = match self.mode {
            PipelineMode::Full => (LpKind::S, LpKind::U),
            _ => (LpKind::StarS, LpKind::StarU),
        };
        let (path_s, _) = lp_fixpoint(
            s_kind,
            &LpBoundary::stable(self.base_amp, n),
            &self.ctx.cfg,
            &self.lp_system(s_kind),
        )?;
        let (path_u, _) = lp_fixpoint(
            u_kind,
            &LpBoundary::unstable(self.base_amp, n),
            &self.ctx.cfg,
            &self.lp_system(u_kind),
        )?;
        let z_s = path_s
            .first()
            .ok_or_else(|| Error::EmptyOrbit("stable path".into()))?
            .1
            .clone();
        let z_u = path_u
            .last()
            .ok_or_else(|| Error::EmptyOrbit("unstable path".into()))?
            .1
            .clone();
        let (cross_s, _) = self.hit_from(SectionSide::Cs, &z_s)?;
        let (cross_u, _) = self.hit_from(SectionSide::Cu, &z_u)?;
        let ea = self.exp_alpha();
        let y_stable = cross_s.state.ell.scaled(1.0 / ea);
        let y_unstable = cross_u.state.ell.scaled(1.0 / ea);
        for (label, y) in [("stable", &y_stable), ("unstable", &y_unstable)] {
            let norm = y1_norm(y);
            if norm > self.cfg.b {
                return Err(Error::DomainExceeded {
                    context: format!("rescaled {label} section trace"),
                    value: norm,
                    bound: self.cfg.b,
                });
            }
        }
        let base_stable = self.h_tilde(&cross_s.state)?;
        let base_unstable = self.h_tilde(&cross_u.state)?;
        Ok(Endpoints {
            y_stable,
            y_unstable,
            cross_stable: cross_s,
            cross_unstable: cross_u,
            base_stable,
            base_unstable,
        })
    }

    /// Energy gap h(s) between the cs and cu section traces over the
    /// homotopy q(s) = s y_stable + (1 - s) y_unstable. h(1) <= 0 <= h(0):
    /// each endpoint pins one trace to a zero-energy manifold.
    pub fn energy_gap(&self, s: f64, ends: &Endpoints) -> Result<f64> {
        Ok(self.gap_detail(s, ends)?.0)
    }

    /// Energy gap with both trace evaluations.
    pub fn gap_detail(&self, s: f64, ends: &Endpoints) -> Result<(f64, UpsilonEval, UpsilonEval)> {
        let mut q = ends.y_stable.scaled(s);
        q.axpy(1.0 - s, &ends.y_unstable);
        let cs = self.upsilon(SectionSide::Cs, &q)?;
        let cu = self.upsilon(SectionSide::Cu, &q)?;
        let h = (self.h_tilde(&cs.state)? - ends.base_stable)
            - (self.h_tilde(&cu.state)? - ends.base_unstable);
        Ok((h, cs, cu))
    }

    /// Center-cone ratio eps^2 H / |w_c|^2 at the center manifold point
    /// over w_c, with the elliptic energy form as the reference norm.
    pub fn cone_ratio(&self, w_c: &EllState<f64>) -> Result<f64> {
        let psi = self.ctx.center_psi(w_c)?;
        let z = FullState {
            hyp: join_hyp(psi.w_s, psi.w_u),
            ell: w_c.clone(),
        };
        let h = self.h_tilde(&z)?;
        let eps = self.eps();
        let q = cone_form(w_c);
        if q <= 0.0 {
            return Err(Error::DomainExceeded {
                context: "cone ratio at zero center data".into(),
                value: q,
                bound: 0.0,
            });
        }
        Ok(eps * eps * h / q)
    }

    /// The full intersection argument: bracket the energy-gap root by the
    /// homotopy endpoints, bisect to root_tol, and assemble the orbit by
    /// gluing the two local decay paths to the section flights at the root.
    pub fn find_breather(&self) -> Result<BreatherResult> {
        let ends = self.endpoints()?;
        let h0 = self.energy_gap(0.0, &ends)?;
        let h1 = self.energy_gap(1.0, &ends)?;
        // Bracket with root_tol slack: deep in the exponential regime the
        // gap variation drops below the energy evaluation noise and both
        // ends sit inside the tolerance band; any s is then a root.
        if !(h0 >= -self.cfg.root_tol && h1 <= self.cfg.root_tol) {
            return Err(Error::NoSignChange(format!(
                "energy gap does not bracket zero: h(0) = {h0:+.6e}, h(1) = {h1:+.6e}"
            )));
        }
        let (mut s_lo, mut s_hi) = (0.0_f64, 1.0_f64);
        let mut s0 = 0.5;
        let mut steps = 0;
        let (mut h_root, mut cs, mut cu) = self.gap_detail(s0, &ends)?;
        while h_root.abs() > self.cfg.root_tol && steps < self.cfg.max_bisect {
            if h_root >= 0.0 {
                s_lo = s0;
            } else {
                s_hi = s0;
            }
            s0 = 0.5 * (s_lo + s_hi);
            let (h, a, b) = self.gap_detail(s0, &ends)?;
            h_root = h;
            cs = a;
            cu = b;
            steps += 1;
        }
        if h_root.abs() > self.cfg.root_tol {
            return Err(Error::MaxIters {
                context: "energy gap bisection".into(),
                cap: self.cfg.max_bisect,
                residual: h_root.abs(),
            });
        }

        let orbit = glue_orbit(&cs, &cu, self.eps())?;
        let tail_amp = orbit
            .times
            .iter()
            .zip(orbit.states.iter())
            .filter(|(t, _)| t.abs() >= self.cfg.t_tail)
            .map(|(_, z)| y1_norm(&z.ell))
            .fold(0.0_f64, f64::max);
        let energy_on_center = self.h_tilde(&cs.state)? - ends.base_stable;
        let physical = reconstruct_physical(&orbit, self.ctx.chain().params(), self.cfg.t_count)?;
        Ok(BreatherResult {
            eps: self.eps(),
            s0,
            physical,
            tail_amp,
            energy_on_center,
            gap_at_root: h_root,
            upsilon_gap: (cs.d_comp - cu.d_comp).abs(),
            h_at_0: h0,
            h_at_1: h1,
            bisect_steps: steps,
            orbit,
        })
    }
}

/// One integrator step from a known node to an arbitrary nearby time.
fn step_to<Sys: System>(
    sys: &Sys,
    z: &FullState<f64>,
    from: f64,
    to: f64,
) -> Result<FullState<f64>> {
    let span = to - from;
    if span.abs() < 1e-13 {
        return Ok(z.clone());
    }
    let seg = integrate(sys, z, (from, to), span.abs())?;
    let node = if span > 0.0 { seg.last() } else { seg.first() };
    Ok(node
        .ok_or_else(|| Error::EmptyOrbit("polish step".into()))?
        .1
        .clone())
}

/// Keep the part of a flight between the local point (time 0) and the
/// crossing, with the polished crossing spliced on; returned in increasing
/// time with the crossing first for cs and last for cu.
fn trim_flight(
    seg: &TrajectorySegment,
    cross: &CrossingEval,
    side: SectionSide,
) -> (Vec<f64>, Vec<FullState<f64>>) {
    let mut times = Vec::new();
    let mut states = Vec::new();
    match side {
        SectionSide::Cs => {
            times.push(cross.tau);
            states.push(cross.state.clone());
            for (t, z) in seg.times.iter().zip(seg.states.iter()) {
                if *t > cross.tau + 1e-12 && *t <= 1e-12 {
                    times.push(*t);
                    states.push(z.clone());
                }
            }
        }
        SectionSide::Cu => {
            for (t, z) in seg.times.iter().zip(seg.states.iter()) {
                if *t >= -1e-12 && *t < cross.tau - 1e-12 {
                    times.push(*t);
                    states.push(z.clone());
                }
            }
            times.push(cross.tau);
            states.push(cross.state.clone());
        }
    }
    (times, states)
}

/// Glue the root orbit: cu decay path, cu flight, cs flight, cs decay path,
/// shifted so the section sits at time zero. The junction keeps the cs
/// crossing; the cu crossing differs from it by the trace mismatch.
fn glue_orbit(cs: &UpsilonEval, cu: &UpsilonEval, eps: f64) -> Result<TrajectorySegment> {
    let mut times: Vec<f64> = Vec::new();
    let mut states: Vec<FullState<f64>> = Vec::new();
    fn push(t: f64, z: &FullState<f64>, times: &mut Vec<f64>, states: &mut Vec<FullState<f64>>) {
        if times.last().map_or(true, |&last| t > last + 1e-12) {
            times.push(t);
            states.push(z.clone());
        }
    }

    // cu decay path lives on times <= 0 and ends at the local point; the
    // local point sits at orbit time -tau_cu.
    for (t, z) in cu.path.times.iter().zip(cu.path.states.iter()) {
        push(*t - cu.tau, z, &mut times, &mut states);
    }
    let (ft, fs) = trim_flight(&cu.flight, &CrossingEval {
        state: cu.state.clone(),
        tau: cu.tau,
        p_v_residual: 0.0,
    }, SectionSide::Cu);
    for (t, z) in ft.iter().zip(fs.iter()).take(ft.len().saturating_sub(1)) {
        push(*t - cu.tau, z, &mut times, &mut states);
    }

    // cs side: crossing first (this node is the orbit's time zero), then
    // the flight up to the local point and the decay path beyond it.
    let (ft, fs) = trim_flight(&cs.flight, &CrossingEval {
        state: cs.state.clone(),
        tau: cs.tau,
        p_v_residual: 0.0,
    }, SectionSide::Cs);
    for (t, z) in ft.iter().zip(fs.iter()) {
        push(*t - cs.tau, z, &mut times, &mut states);
    }
    for (t, z) in cs.path.times.iter().zip(cs.path.states.iter()) {
        push(*t - cs.tau, z, &mut times, &mut states);
    }

    if times.len() < 4 {
        return Err(Error::EmptyOrbit("glued breather orbit".into()));
    }
    Ok(TrajectorySegment {
        times,
        states,
        eps,
        system_tag: cs.flight.system_tag,
    })
}

/// Least-squares fit of log tail against 1/eps over a sweep of (eps, tail)
/// pairs. Points at the noise floor are excluded and reported; fewer than
/// four usable points, a flat response, or a non-decaying trend are
/// degenerate.
pub fn fit_exponential(points: &[(f64, f64)]) -> Result<ExpFit> {
    let mut excluded = Vec::new();
    let mut xs = Vec::new();
    let mut zs = Vec::new();
    for &(eps, tail) in points {
        if !(eps > 0.0) || !tail.is_finite() {
            return Err(Error::DegenerateFit(format!(
                "invalid sweep point (eps = {eps}, tail = {tail})"
            )));
        }
        if tail <= NOISE_FLOOR {
            excluded.push(eps);
        } else {
            xs.push(1.0 / eps);
            zs.push(tail.ln());
        }
    }
    if xs.len() < 4 {
        return Err(Error::DegenerateFit(format!(
            "only {} points above the noise floor {NOISE_FLOOR:e} (need 4); excluded eps: {excluded:?}",
            xs.len()
        )));
    }
    let n = xs.len() as f64;
    let xm = xs.iter().sum::<f64>() / n;
    let zm = zs.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - xm) * (x - xm)).sum();
    let sxz: f64 = xs.iter().zip(zs.iter()).map(|(x, z)| (x - xm) * (z - zm)).sum();
    let szz: f64 = zs.iter().map(|z| (z - zm) * (z - zm)).sum();
    if sxx <= 0.0 || szz <= 0.0 {
        return Err(Error::DegenerateFit(
            "sweep has no spread in 1/eps or in the tails".into(),
        ));
    }
    let slope = sxz / sxx;
    if slope >= 0.0 {
        return Err(Error::DegenerateFit(format!(
            "tails do not decay with 1/eps (slope = {slope:+.3e})"
        )));
    }
    let intercept = zm - slope * xm;
    let ss_res: f64 = xs
        .iter()
        .zip(zs.iter())
        .map(|(x, z)| {
            let p = intercept + slope * x;
            (z - p) * (z - p)
        })
        .sum();
    Ok(ExpFit {
        c_fit: -slope,
        intercept,
        r_squared: 1.0 - ss_res / szz,
        excluded,
    })
}

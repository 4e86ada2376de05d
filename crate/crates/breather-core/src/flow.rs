//! Stiff time integration of the spatial-dynamics systems: exact mode-wise
//! rotation for the fast elliptic block, Strang splitting around it for the
//! slow terms, and tangent (variational) propagation.
//!
//! The fast block (J/eps) W^c is a mode-wise rotation with frequency
//! sqrt(k^2-1)/eps, solved exactly; only the slow terms see the step size, so
//! accuracy is uniform in eps. The slow half-steps use a classical RK4 substep
//! whose own error (O(dt^5) per step) sits far below the O(dt^3) splitting
//! error, keeping the scheme's conservation behavior clean at dt ~ 1e-3.

use serde::{Deserialize, Serialize};

use crate::scalar::{Dual, Scalar};
use crate::spectral::{norms, EllState, FullState, SpectralConfig};
use crate::{Error, Result};

/// Which first-order system a trajectory belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemTag {
    /// The untransformed rescaled system.
    Raw,
    /// The system after the normal form chain.
    Transformed,
    /// The hyperbolic comparison problem with the elliptic block frozen out.
    Regular,
    /// The slow limit equation (hyperbolic only).
    Duffing,
}

/// A right-hand side split into slow terms and an optional exact fast
/// rotation. Implementations must be generic over the scalar so the same
/// code path produces values and directional derivatives.
pub trait System {
    fn tag(&self) -> SystemTag;
    fn n_modes(&self) -> usize;
    /// Some(eps) if the elliptic block carries the (J/eps) rotation.
    fn eps_rotation(&self) -> Option<f64>;
    /// Slow part of the field (everything except the exact rotation).
    fn slow<S: Scalar>(&self, state: &FullState<S>) -> Result<FullState<S>>;

    /// Full right-hand side, for reference integrators and dense output.
    fn full_field<S: Scalar>(&self, state: &FullState<S>) -> Result<FullState<S>> {
        let mut v = self.slow(state)?;
        if let Some(eps) = self.eps_rotation() {
            let n = state.n_modes();
            for k in 2..=n {
                let m = SpectralConfig::l_multiplier(k) / eps;
                let a = state.ell.y.mode(k);
                let b = state.ell.y1.mode(k);
                v.ell.y.set_mode(k, v.ell.y.mode(k) + b.scale(m));
                v.ell.y1.set_mode(k, v.ell.y1.mode(k) - a.scale(m));
            }
        }
        Ok(v)
    }
}

/// Precomputed rotation angles e^{dt J/eps} for one (dt, eps) pair.
#[derive(Debug, Clone)]
pub struct RotationTable {
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl RotationTable {
    pub fn new(n_modes: usize, dt: f64, eps: f64) -> Self {
        let mut cos = vec![1.0; n_modes + 1];
        let mut sin = vec![0.0; n_modes + 1];
        for k in 2..=n_modes {
            let theta = dt * SpectralConfig::l_multiplier(k) / eps;
            cos[k] = theta.cos();
            sin[k] = theta.sin();
        }
        RotationTable { cos, sin }
    }

    /// Exact solution of y' = (m/eps) y1, y1' = -(m/eps) y per mode.
    pub fn apply<S: Scalar>(&self, ell: &mut EllState<S>) {
        for k in 2..=ell.n_modes() {
            let (c, s) = (self.cos[k], self.sin[k]);
            let a = ell.y.mode(k);
            let b = ell.y1.mode(k);
            ell.y.set_mode(k, a.scale(c) + b.scale(s));
            ell.y1.set_mode(k, b.scale(c) - a.scale(s));
        }
    }

    /// Same rotation on a packed coefficient slice [y_2.., y1_2..].
    pub fn apply_packed(&self, v: &mut [f64]) {
        let half = v.len() / 2;
        for i in 0..half {
            let (c, s) = (self.cos[i + 2], self.sin[i + 2]);
            let (a, b) = (v[i], v[half + i]);
            v[i] = c * a + s * b;
            v[half + i] = c * b - s * a;
        }
    }
}

fn rk4_slow<Sys: System, S: Scalar>(
    sys: &Sys,
    state: &FullState<S>,
    h: f64,
) -> Result<FullState<S>> {
    let k1 = sys.slow(state)?;
    let mut s2 = state.clone();
    s2.axpy(h / 2.0, &k1);
    let k2 = sys.slow(&s2)?;
    let mut s3 = state.clone();
    s3.axpy(h / 2.0, &k2);
    let k3 = sys.slow(&s3)?;
    let mut s4 = state.clone();
    s4.axpy(h, &k3);
    let k4 = sys.slow(&s4)?;
    let mut out = state.clone();
    out.axpy(h / 6.0, &k1);
    out.axpy(h / 3.0, &k2);
    out.axpy(h / 3.0, &k3);
    out.axpy(h / 6.0, &k4);
    Ok(out)
}

fn strang_with_table<Sys: System, S: Scalar>(
    sys: &Sys,
    state: &FullState<S>,
    dt: f64,
    table: Option<&RotationTable>,
) -> Result<FullState<S>> {
    let mut s = rk4_slow(sys, state, dt / 2.0)?;
    if let Some(t) = table {
        t.apply(&mut s.ell);
    }
    rk4_slow(sys, &s, dt / 2.0)
}

/// One step of the splitting scheme: half-step slow terms, exact elliptic
/// rotation over dt, half-step slow terms. Second-order accurate uniformly in
/// eps for fixed smooth data.
pub fn step_strang<Sys: System, S: Scalar>(
    sys: &Sys,
    state: &FullState<S>,
    dt: f64,
) -> Result<FullState<S>> {
    if !(dt.is_finite() && dt != 0.0) {
        return Err(Error::SpanError(format!("step size {dt}")));
    }
    let table = sys
        .eps_rotation()
        .map(|eps| RotationTable::new(sys.n_modes(), dt, eps));
    strang_with_table(sys, state, dt, table.as_ref())
}

fn check_finite(state: &FullState<f64>, context: &str) -> Result<()> {
    let n = norms(state);
    let size = n.x_norm + n.y1_norm;
    if !size.is_finite() || size > 1e12 {
        return Err(Error::Overflow {
            context: context.to_string(),
            value: size,
        });
    }
    Ok(())
}

/// Repeated `step_strang` over the span, storing every node. The span may run
/// backward; returned times are always increasing, so for backward runs the
/// initial state is the last node.
pub fn integrate<Sys: System>(
    sys: &Sys,
    state0: &FullState<f64>,
    tau_span: (f64, f64),
    dt: f64,
) -> Result<TrajectorySegment> {
    let (t0, t1) = tau_span;
    if !(t0.is_finite() && t1.is_finite() && dt > 0.0 && dt.is_finite()) {
        return Err(Error::SpanError(format!("span ({t0},{t1}), dt {dt}")));
    }
    let span = t1 - t0;
    let n_steps = (span.abs() / dt).round() as usize;
    if (n_steps as f64 * dt - span.abs()).abs() > 1e-6 * dt.max(span.abs()) {
        return Err(Error::SpanError(format!(
            "dt {dt} does not divide span {span}"
        )));
    }
    let h = if span < 0.0 { -dt } else { dt };
    let table = sys
        .eps_rotation()
        .map(|eps| RotationTable::new(sys.n_modes(), h, eps));

    let mut times = Vec::with_capacity(n_steps + 1);
    let mut states = Vec::with_capacity(n_steps + 1);
    check_finite(state0, "integrate initial state")?;
    times.push(t0);
    states.push(state0.clone());
    let mut s = state0.clone();
    for i in 1..=n_steps {
        s = strang_with_table(sys, &s, h, table.as_ref())?;
        check_finite(&s, "integrate")?;
        times.push(t0 + h * i as f64);
        states.push(s.clone());
    }
    if span < 0.0 {
        times.reverse();
        states.reverse();
    }
    Ok(TrajectorySegment {
        times,
        states,
        eps: sys.eps_rotation().unwrap_or(0.0),
        system_tag: sys.tag(),
    })
}

/// Classical RK4 on the full (unsplit) field; the nonstiff reference oracle.
pub fn rk4_integrate<Sys: System>(
    sys: &Sys,
    state0: &FullState<f64>,
    tau_span: (f64, f64),
    dt: f64,
) -> Result<TrajectorySegment> {
    let (t0, t1) = tau_span;
    let span = t1 - t0;
    let n_steps = (span.abs() / dt).round().max(0.0) as usize;
    let h = if span < 0.0 { -dt } else { dt };
    let mut times = vec![t0];
    let mut states = vec![state0.clone()];
    let mut s = state0.clone();
    for i in 1..=n_steps {
        let k1 = sys.full_field(&s)?;
        let mut s2 = s.clone();
        s2.axpy(h / 2.0, &k1);
        let k2 = sys.full_field(&s2)?;
        let mut s3 = s.clone();
        s3.axpy(h / 2.0, &k2);
        let k3 = sys.full_field(&s3)?;
        let mut s4 = s.clone();
        s4.axpy(h, &k3);
        let k4 = sys.full_field(&s4)?;
        s.axpy(h / 6.0, &k1);
        s.axpy(h / 3.0, &k2);
        s.axpy(h / 3.0, &k3);
        s.axpy(h / 6.0, &k4);
        check_finite(&s, "rk4_integrate")?;
        times.push(t0 + h * i as f64);
        states.push(s.clone());
    }
    if span < 0.0 {
        times.reverse();
        states.reverse();
    }
    Ok(TrajectorySegment {
        times,
        states,
        eps: sys.eps_rotation().unwrap_or(0.0),
        system_tag: sys.tag(),
    })
}

/// A stored orbit piece: strictly increasing times with one state per node.
#[derive(Debug, Clone)]
pub struct TrajectorySegment {
    pub times: Vec<f64>,
    pub states: Vec<FullState<f64>>,
    pub eps: f64,
    pub system_tag: SystemTag,
}

impl TrajectorySegment {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn first(&self) -> Option<(f64, &FullState<f64>)> {
        self.times.first().map(|&t| (t, &self.states[0]))
    }

    pub fn last(&self) -> Option<(f64, &FullState<f64>)> {
        self.times
            .last()
            .map(|&t| (t, &self.states[self.states.len() - 1]))
    }

    pub fn covers(&self, a: f64, b: f64) -> bool {
        match (self.times.first(), self.times.last()) {
            (Some(&t0), Some(&t1)) => {
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                t0 <= lo + 1e-12 && hi <= t1 + 1e-12
            }
            _ => false,
        }
    }

    /// Index of the last node with time <= t (clamped to a valid interval
    /// start).
    pub fn bracket(&self, t: f64) -> usize {
        match self
            .times
            .binary_search_by(|x| x.partial_cmp(&t).unwrap())
        {
            Ok(i) => i.min(self.times.len().saturating_sub(2)),
            Err(i) => i.saturating_sub(1).min(self.times.len().saturating_sub(2)),
        }
    }
}

/// Cubic Hermite interpolation between two nodes with known slopes.
pub fn cubic_hermite(
    (t0, s0, f0): (f64, &FullState<f64>, &FullState<f64>),
    (t1, s1, f1): (f64, &FullState<f64>, &FullState<f64>),
    t: f64,
) -> FullState<f64> {
    let h = t1 - t0;
    let th = (t - t0) / h;
    let th2 = th * th;
    let th3 = th2 * th;
    let h00 = 2.0 * th3 - 3.0 * th2 + 1.0;
    let h10 = th3 - 2.0 * th2 + th;
    let h01 = -2.0 * th3 + 3.0 * th2;
    let h11 = th3 - th2;
    let mut out = s0.scaled(h00);
    out.axpy(h * h10, f0);
    out.axpy(h01, s1);
    out.axpy(h * h11, f1);
    out
}

/// Dense output on a segment: cubic Hermite using the system's field for the
/// node slopes.
pub fn sample<Sys: System>(sys: &Sys, seg: &TrajectorySegment, t: f64) -> Result<FullState<f64>> {
    if seg.is_empty() {
        return Err(Error::EmptyOrbit("sample".into()));
    }
    if !seg.covers(t, t) {
        return Err(Error::SpanError(format!(
            "t = {t} outside segment [{:?}, {:?}]",
            seg.times.first(),
            seg.times.last()
        )));
    }
    let i = seg.bracket(t);
    let f0 = sys.full_field(&seg.states[i])?;
    let f1 = sys.full_field(&seg.states[i + 1])?;
    Ok(cubic_hermite(
        (seg.times[i], &seg.states[i], &f0),
        (seg.times[i + 1], &seg.states[i + 1], &f1),
        t,
    ))
}

/// Lifts a value state to dual constants with a tangent payload.
pub fn lift_with_tangent(
    state: &FullState<f64>,
    delta: &FullState<f64>,
) -> FullState<Dual<f64>> {
    let n = state.n_modes();
    let mut out: FullState<Dual<f64>> = FullState::zero(n);
    out.hyp.w = Dual {
        v: state.hyp.w,
        d: delta.hyp.w,
    };
    out.hyp.w1 = Dual {
        v: state.hyp.w1,
        d: delta.hyp.w1,
    };
    for k in 2..=n {
        out.ell.y.set_mode(
            k,
            Dual {
                v: state.ell.y.mode(k),
                d: delta.ell.y.mode(k),
            },
        );
        out.ell.y1.set_mode(
            k,
            Dual {
                v: state.ell.y1.mode(k),
                d: delta.ell.y1.mode(k),
            },
        );
    }
    out
}

/// Extracts the tangent payload of a dual state.
pub fn tangent_part(state: &FullState<Dual<f64>>) -> FullState<f64> {
    let n = state.n_modes();
    let mut out = FullState::zero(n);
    out.hyp.w = state.hyp.w.d;
    out.hyp.w1 = state.hyp.w1.d;
    for k in 2..=n {
        out.ell.y.set_mode(k, state.ell.y.mode(k).d);
        out.ell.y1.set_mode(k, state.ell.y1.mode(k).d);
    }
    out
}

/// Propagates the variational equations along a trajectory by re-integrating
/// the system with a dual-number tangent payload; coefficient operators are
/// therefore the analytic derivatives of the field, evaluated on the fly.
///
/// The base segment supplies the initial state (its first node in time if it
/// was integrated forward; pass `from_end` for backward-built segments) and
/// the time grid.
pub fn integrate_tangent<Sys: System>(
    sys: &Sys,
    base: &TrajectorySegment,
    delta0: &FullState<f64>,
    from_end: bool,
) -> Result<TrajectorySegment> {
    if base.is_empty() {
        return Err(Error::EmptyOrbit("integrate_tangent".into()));
    }
    if base.len() == 1 {
        return Ok(TrajectorySegment {
            times: base.times.clone(),
            states: vec![delta0.clone()],
            eps: base.eps,
            system_tag: base.system_tag,
        });
    }
    let dt = base.times[1] - base.times[0];
    let (start_idx, h): (usize, f64) = if from_end {
        (base.len() - 1, -dt)
    } else {
        (0, dt)
    };
    let table = sys
        .eps_rotation()
        .map(|eps| RotationTable::new(sys.n_modes(), h, eps));
    let mut s = lift_with_tangent(&base.states[start_idx], delta0);
    let mut states: Vec<FullState<f64>> = vec![tangent_part(&s)];
    for _ in 1..base.len() {
        s = strang_with_table(sys, &s, h, table.as_ref())?;
        states.push(tangent_part(&s));
    }
    if from_end {
        states.reverse();
    }
    Ok(TrajectorySegment {
        times: base.times.clone(),
        states,
        eps: base.eps,
        system_tag: base.system_tag,
    })
}

use breather_core::duffing::{homoclinic, DuffingParams, DuffingSystem, RegularSystem};
use breather_core::flow::{
    integrate, integrate_tangent, rk4_integrate, sample, step_strang, RotationTable, System,
    SystemTag,
};
use breather_core::model::{
    assemble_g, hamiltonian, ModelParams, Nonlinearity, RawSystem,
};
use breather_core::normal_form::{
    build_chain, NormalFormBudget, NormalFormChain, TransformedSystem,
};
use breather_core::scalar::Scalar;
use breather_core::spectral::{apply_j, norms, y1_norm, EllState, FullState, HypState};
use breather_core::Error;
use once_cell::sync::Lazy;

static CHAIN_SHADOW: Lazy<NormalFormChain> = Lazy::new(|| {
    let p = params(0.1, 6);
    let b = NormalFormBudget::for_params(&p);
    build_chain(&p, &b).unwrap()
});

fn shadow_chain(eps: f64) -> std::borrow::Cow<'static, NormalFormChain> {
    if eps == 0.1 {
        std::borrow::Cow::Borrowed(&*CHAIN_SHADOW)
    } else {
        let p = params(eps, 6);
        let b = NormalFormBudget::for_params(&p);
        std::borrow::Cow::Owned(build_chain(&p, &b).unwrap())
    }
}

fn params(eps: f64, n: usize) -> ModelParams {
    ModelParams::new(eps, Nonlinearity::cubic(), n).unwrap()
}

fn state_norm(s: &FullState<f64>) -> f64 {
    let n = norms(s);
    n.x_norm + n.y1_norm
}

fn diff_norm(a: &FullState<f64>, b: &FullState<f64>) -> f64 {
    let mut d = a.clone();
    d.axpy(-1.0, b);
    state_norm(&d)
}

/// A bounded orbit of the raw system: hyperbolic point near the center
/// equilibrium, elliptic block dressed to its quasi-stationary response
/// W^c = -eps^2 J^{-1} G so the fast block starts without transient sloshing.
fn dressed_state(p: &ModelParams, w: f64, w1: f64) -> FullState<f64> {
    let mut s = FullState::<f64>::zero(p.spectral.n_modes);
    s.hyp = HypState::new(w, w1);
    for _ in 0..8 {
        let g = assemble_g(&s, p).unwrap();
        s.ell = apply_j(&g, true).scaled(-p.eps * p.eps);
    }
    s
}

/// Slow part zero: the step must reduce to the exact mode rotation.
struct PureRotation {
    n: usize,
    eps: f64,
}

impl System for PureRotation {
    fn tag(&self) -> SystemTag {
        SystemTag::Raw
    }
    fn n_modes(&self) -> usize {
        self.n
    }
    fn eps_rotation(&self) -> Option<f64> {
        Some(self.eps)
    }
    fn slow<S: Scalar>(&self, state: &FullState<S>) -> breather_core::Result<FullState<S>> {
        Ok(FullState::zero(state.n_modes()))
    }
}

#[test]
fn zero_state_stays_zero() {
    let p = params(0.1, 8);
    let sys = RawSystem(&p);
    let z = FullState::<f64>::zero(8);
    let out = step_strang(&sys, &z, 1e-3).unwrap();
    assert_eq!(out.hyp.w, 0.0);
    assert_eq!(out.hyp.w1, 0.0);
    for k in 2..=8 {
        assert_eq!(out.ell.y.mode(k), 0.0);
        assert_eq!(out.ell.y1.mode(k), 0.0);
    }
}

#[test]
fn pure_fast_step_is_an_isometry() {
    let sys = PureRotation { n: 6, eps: 0.05 };
    let mut s = FullState::<f64>::zero(6);
    for k in 2..=6 {
        s.ell.y.set_mode(k, (k as f64).sin());
        s.ell.y1.set_mode(k, (k as f64).cos() * 0.5);
    }
    let e0 = norms(&s).y_norm;
    for _ in 0..1000 {
        s = step_strang(&sys, &s, 1e-2).unwrap();
    }
    assert!((norms(&s).y_norm - e0).abs() < 1e-12 * e0);
}

#[test]
fn pure_fast_step_matches_the_rotation_oracle() {
    let sys = PureRotation { n: 5, eps: 0.2 };
    let mut s = FullState::<f64>::zero(5);
    s.ell.y.set_mode(2, 1.0);
    s.ell.y.set_mode(4, -0.3);
    s.ell.y1.set_mode(3, 0.7);
    let dt = 7e-3;
    let stepped = step_strang(&sys, &s, dt).unwrap();
    for k in 2..=5 {
        let m = ((k * k - 1) as f64).sqrt();
        let th = dt * m / 0.2;
        let (a, b) = (s.ell.y.mode(k), s.ell.y1.mode(k));
        let ea = th.cos() * a + th.sin() * b;
        let eb = th.cos() * b - th.sin() * a;
        assert!((stepped.ell.y.mode(k) - ea).abs() < 1e-15);
        assert!((stepped.ell.y1.mode(k) - eb).abs() < 1e-15);
    }
}

#[test]
fn mode_rotations_commute() {
    let ta = RotationTable::new(6, 1e-2, 0.1);
    let tb = RotationTable::new(6, 3.7e-3, 0.1);
    let mut s = EllState::<f64>::zero(6);
    for k in 2..=6 {
        s.y.set_mode(k, 1.0 / k as f64);
        s.y1.set_mode(k, -0.2 * k as f64);
    }
    let mut ab = s.clone();
    ta.apply(&mut ab);
    tb.apply(&mut ab);
    let mut ba = s.clone();
    tb.apply(&mut ba);
    ta.apply(&mut ba);
    for k in 2..=6 {
        assert!((ab.y.mode(k) - ba.y.mode(k)).abs() < 1e-15);
        assert!((ab.y1.mode(k) - ba.y1.mode(k)).abs() < 1e-15);
    }
}

#[test]
fn strang_error_is_second_order() {
    let p = params(0.1, 8);
    let sys = RawSystem(&p);
    let s0 = dressed_state(&p, 1.2, 0.0);
    let oracle = rk4_integrate(&sys, &s0, (0.0, 1.0), 1e-5).unwrap();
    let target = oracle.last().unwrap().1.clone();
    let mut errs = Vec::new();
    for dt in [1e-2, 5e-3, 2.5e-3] {
        let seg = integrate(&sys, &s0, (0.0, 1.0), dt).unwrap();
        errs.push(diff_norm(seg.last().unwrap().1, &target));
    }
    for w in errs.windows(2) {
        let ratio = w[0] / w[1];
        assert!(
            (3.2..=4.8).contains(&ratio),
            "Richardson ratio {ratio}, errors {errs:?}"
        );
    }
}

#[test]
fn duffing_homoclinic_tracks_the_closed_form() {
    let dp = DuffingParams::new(1.0).unwrap();
    let sys = DuffingSystem {
        params: dp,
        n_modes: 4,
    };
    let mut s0 = FullState::<f64>::zero(4);
    s0.hyp = homoclinic(0.0, &dp);
    let seg = integrate(&sys, &s0, (0.0, 10.0), 1e-3).unwrap();
    let mut worst = 0.0f64;
    for (t, s) in seg.times.iter().zip(&seg.states) {
        let h = homoclinic(*t, &dp);
        worst = worst
            .max((s.hyp.w - h.w).abs())
            .max((s.hyp.w1 - h.w1).abs());
    }
    assert!(worst < 1e-6, "deviation {worst}");
}

#[test]
fn hamiltonian_drift_stays_small_on_a_bounded_orbit() {
    let p = params(0.1, 8);
    let sys = RawSystem(&p);
    let s0 = dressed_state(&p, 1.16, 0.0);
    let h0 = hamiltonian(&s0, &p).unwrap();
    let drift_for = |dt: f64| -> f64 {
        let seg = integrate(&sys, &s0, (0.0, 20.0), dt).unwrap();
        let mut worst = 0.0f64;
        for s in &seg.states {
            worst = worst.max((hamiltonian(s, &p).unwrap() - h0).abs());
        }
        worst / h0.abs()
    };
    let drift = drift_for(1e-3);
    assert!(drift <= 1e-8, "relative drift {drift}");
    // Halving dt must cut the (second-order) drift; this pins the residual to
    // discretization rather than a conservation bug.
    let drift_half = drift_for(5e-4);
    assert!(
        drift_half < 0.5 * drift + 1e-13,
        "drift {drift} vs half-step {drift_half}"
    );
}

#[test]
fn forward_then_backward_returns_the_initial_state() {
    let p = params(0.1, 8);
    let sys = RawSystem(&p);
    let s0 = dressed_state(&p, 1.2, 0.0);
    let fwd = integrate(&sys, &s0, (0.0, 2.0), 1e-3).unwrap();
    let end = fwd.last().unwrap().1.clone();
    let bwd = integrate(&sys, &end, (2.0, 0.0), 1e-3).unwrap();
    // Backward segments come back in increasing time order, so the recovered
    // initial state is the first node.
    assert!(bwd.times.windows(2).all(|w| w[0] < w[1]));
    let recovered = bwd.first().unwrap().1;
    assert!(diff_norm(recovered, &s0) < 1e-10);
}

#[test]
fn single_node_span() {
    let p = params(0.1, 6);
    let sys = RawSystem(&p);
    let s0 = dressed_state(&p, 0.5, 0.1);
    let seg = integrate(&sys, &s0, (3.0, 3.0), 1e-3).unwrap();
    assert_eq!(seg.len(), 1);
    assert_eq!(seg.times[0], 3.0);
    assert!(diff_norm(&seg.states[0], &s0) == 0.0);
}

#[test]
fn span_errors() {
    let p = params(0.1, 6);
    let sys = RawSystem(&p);
    let s0 = FullState::<f64>::zero(6);
    match integrate(&sys, &s0, (0.0, 1.0), 0.3) {
        Err(Error::SpanError(_)) => {}
        other => panic!("expected SpanError, got {other:?}"),
    }
    match integrate(&sys, &s0, (0.0, 1.0), -0.1) {
        Err(Error::SpanError(_)) => {}
        other => panic!("expected SpanError, got {other:?}"),
    }
}

#[test]
fn runaway_states_overflow() {
    let p = params(0.1, 6);
    let sys = RawSystem(&p);
    let mut s0 = FullState::<f64>::zero(6);
    s0.hyp = HypState::new(1e13, 0.0);
    match integrate(&sys, &s0, (0.0, 1.0), 1e-3) {
        Err(Error::Overflow { .. }) => {}
        other => panic!("expected Overflow, got {other:?}"),
    }
}

#[test]
fn dense_output_matches_a_fine_reference() {
    let dp = DuffingParams::new(6.0).unwrap();
    let sys = DuffingSystem {
        params: dp,
        n_modes: 4,
    };
    let mut s0 = FullState::<f64>::zero(4);
    s0.hyp = HypState::new(0.9, 0.0);
    let seg = integrate(&sys, &s0, (0.0, 1.0), 1e-2).unwrap();
    let t = 0.5037;
    let interp = sample(&sys, &seg, t).unwrap();
    let oracle = rk4_integrate(&sys, &s0, (0.0, t), t / 50370.0).unwrap();
    let d = diff_norm(&interp, oracle.last().unwrap().1);
    assert!(d < 1e-6, "dense output error {d}");
    // At a node the interpolant reproduces the stored state.
    let on_node = sample(&sys, &seg, seg.times[37]).unwrap();
    assert!(diff_norm(&on_node, &seg.states[37]) < 1e-14);
}

#[test]
fn zero_tangent_stays_zero() {
    let p = params(0.1, 6);
    let sys = RawSystem(&p);
    let s0 = dressed_state(&p, 1.0, 0.0);
    let base = integrate(&sys, &s0, (0.0, 0.5), 1e-3).unwrap();
    let tan = integrate_tangent(&sys, &base, &FullState::zero(6), false).unwrap();
    for s in &tan.states {
        assert_eq!(state_norm(s), 0.0);
    }
}

#[test]
fn tangent_matches_finite_differences() {
    let p = params(0.1, 8);
    let sys = RawSystem(&p);
    let s0 = dressed_state(&p, 1.1, 0.05);
    let base = integrate(&sys, &s0, (0.0, 1.0), 1e-3).unwrap();

    let mut delta = FullState::<f64>::zero(8);
    delta.hyp = HypState::new(0.3, -0.2);
    delta.ell.y.set_mode(2, 0.1);
    delta.ell.y1.set_mode(4, -0.05);

    let tan = integrate_tangent(&sys, &base, &delta, false).unwrap();
    let tan_end = tan.last().unwrap().1;

    // One-sided difference, sigma = 1e-5: agreement to O(sigma).
    let sigma = 1e-5;
    let mut sp = s0.clone();
    sp.axpy(sigma, &delta);
    let plus = integrate(&sys, &sp, (0.0, 1.0), 1e-3).unwrap();
    let mut fwd = plus.last().unwrap().1.clone();
    fwd.axpy(-1.0, base.last().unwrap().1);
    let fwd = fwd.scaled(1.0 / sigma);
    assert!(diff_norm(&fwd, tan_end) < 1e-3 * state_norm(tan_end).max(1.0));

    // Central difference sharpens to O(sigma^2).
    let mut sm = s0.clone();
    sm.axpy(-sigma, &delta);
    let minus = integrate(&sys, &sm, (0.0, 1.0), 1e-3).unwrap();
    let mut ctr = plus.last().unwrap().1.clone();
    ctr.axpy(-1.0, minus.last().unwrap().1);
    let ctr = ctr.scaled(1.0 / (2.0 * sigma));
    assert!(diff_norm(&ctr, tan_end) < 1e-6 * state_norm(tan_end).max(1.0));
}

#[test]
fn tangent_from_segment_end_runs_backward() {
    let p = params(0.1, 6);
    let sys = RawSystem(&p);
    let s0 = dressed_state(&p, 1.05, 0.0);
    let base = integrate(&sys, &s0, (0.0, 0.4), 1e-3).unwrap();
    let mut delta = FullState::<f64>::zero(6);
    delta.hyp = HypState::new(1.0, 0.0);
    // Propagate delta backward from the segment end; pushing the result
    // forward again must recover delta at the end node.
    let back = integrate_tangent(&sys, &base, &delta, true).unwrap();
    let fwd = integrate_tangent(&sys, &base, &back.states[0], false).unwrap();
    let d = diff_norm(fwd.last().unwrap().1, &delta);
    assert!(d < 1e-10, "round trip defect {d}");
}

#[test]
fn slice_orbits_shadow_the_regular_problem() {
    // An orbit started on the slice picks up an elliptic component only
    // through the exponentially small leftover forcing, so it shadows the
    // regular orbit; measured deviations 2.4e-11 at eps 0.1 and 2.2e-5 at
    // eps 0.2 over [0, 5].
    let mut deviations = Vec::new();
    for eps in [0.1, 0.2] {
        let chain = shadow_chain(eps);
        let mut z0 = FullState::<f64>::zero(6);
        z0.hyp = HypState::new(1.2, 0.0);
        let orb_t = integrate(&TransformedSystem(&chain), &z0, (0.0, 5.0), 1e-2).unwrap();
        let orb_r = integrate(&RegularSystem(&chain), &z0, (0.0, 5.0), 1e-2).unwrap();
        let mut gap = 0.0f64;
        for (a, b) in orb_t.states.iter().zip(orb_r.states.iter()) {
            let hyp = (a.hyp.w - b.hyp.w).abs() + (a.hyp.w1 - b.hyp.w1).abs();
            gap = gap.max(hyp + y1_norm(&a.ell));
        }
        deviations.push(gap);
    }
    assert!(deviations[0] <= 1e-3, "eps 0.1 deviation {}", deviations[0]);
    assert!(deviations[1] <= 1e-2, "eps 0.2 deviation {}", deviations[1]);
    // Halving eps must shrink the deviation far faster than any power.
    assert!(
        deviations[0] < 0.1 * deviations[1],
        "no exponential separation: {deviations:?}"
    );
}

#[test]
fn tangent_flows_of_full_and_regular_problems_stay_close() {
    // Matched perturbations carried along the full and the regular problem:
    // the hyperbolic lanes separate by order eps (the elliptic tangent only
    // feeds back through the residual coupling), the elliptic lanes by a
    // multiple of the leftover forcing scale. Measured: 7.8e-16 / 2.7e-10
    // at eps 0.1, 2.6e-7 / 1.4e-4 at eps 0.2, magnitudes ~0.6 / ~1.5.
    for eps in [0.1, 0.2] {
        let chain = shadow_chain(eps);
        let mut z0 = FullState::<f64>::zero(6);
        z0.hyp = HypState::new(1.2, 0.0);
        let orb_t = integrate(&TransformedSystem(&chain), &z0, (0.0, 3.0), 1e-2).unwrap();
        let orb_r = integrate(&RegularSystem(&chain), &z0, (0.0, 3.0), 1e-2).unwrap();
        let mut d0 = FullState::<f64>::zero(6);
        d0.hyp = HypState::new(0.3, -0.2);
        d0.ell.y.set_mode(2, 0.4);
        d0.ell.y1.set_mode(4, 0.2);
        let tan_full = integrate_tangent(&TransformedSystem(&chain), &orb_t, &d0, false).unwrap();
        let tan_star = integrate_tangent(&RegularSystem(&chain), &orb_r, &d0, false).unwrap();
        let mut hgap = 0.0f64;
        let mut egap = 0.0f64;
        let mut hmag = 0.0f64;
        let mut emag = 0.0f64;
        for (a, b) in tan_full.states.iter().zip(tan_star.states.iter()) {
            hgap = hgap.max((a.hyp.w - b.hyp.w).abs() + (a.hyp.w1 - b.hyp.w1).abs());
            let mut diff = a.ell.clone();
            diff.axpy(-1.0, &b.ell);
            egap = egap.max(y1_norm(&diff));
            hmag = hmag.max(a.hyp.w.abs() + a.hyp.w1.abs());
            emag = emag.max(y1_norm(&a.ell));
        }
        assert!(hgap <= 1e-3 * eps, "eps {eps}: hyperbolic tangent gap {hgap}");
        assert!(
            egap <= 1e-3 * chain.alpha_hat.exp(),
            "eps {eps}: elliptic tangent gap {egap}"
        );
        // The comparison is not vacuous: both tangents are live.
        assert!(hmag > 0.3 && emag > 0.5, "tangents degenerate: {hmag}, {emag}");
    }
}

use breather_core::duffing::{
    duffing_field, evolution_e, h0_energy, homoclinic, homoclinic_amplitude, regular_field,
    rotation_with_coupling, section_frame, DuffingParams, DuffingSystem, RegularSystem,
};
use breather_core::flow::{
    integrate, integrate_tangent, rk4_integrate, RotationTable, System, SystemTag,
    TrajectorySegment,
};
use breather_core::model::{ModelParams, Nonlinearity};
use breather_core::normal_form::{build_chain, NormalFormBudget, NormalFormChain};
use breather_core::spectral::{pack_ell, unpack_ell, y1_norm, FullState, HypState};
use breather_core::Error;
use nalgebra::DMatrix;
use once_cell::sync::Lazy;
use proptest::prelude::*;

fn hyp_norm(h: &HypState<f64>) -> f64 {
    h.w.abs().max(h.w1.abs())
}

fn chain_at(eps: f64, n_modes: usize) -> NormalFormChain {
    let p = ModelParams::new(eps, Nonlinearity::cubic(), n_modes).unwrap();
    let b = NormalFormBudget::for_params(&p);
    build_chain(&p, &b).unwrap()
}

static CHAIN_01: Lazy<NormalFormChain> = Lazy::new(|| chain_at(0.1, 6));

/// A regular-problem base orbit on the slice, shared by the evolution tests.
static BASE_01: Lazy<TrajectorySegment> = Lazy::new(|| {
    let mut z0 = FullState::<f64>::zero(6);
    z0.hyp = HypState::new(1.2, 0.0);
    integrate(&RegularSystem(&CHAIN_01), &z0, (0.0, 5.0), 1e-2).unwrap()
});

fn op_norm(m: &DMatrix<f64>) -> f64 {
    m.singular_values().max()
}

/// Coupling matrix on packed vectors at a fixed hyperbolic point.
fn coupling_at(chain: &NormalFormChain, h: &HypState<f64>) -> DMatrix<f64> {
    let n = chain.params().spectral.n_modes;
    let dim = 2 * (n - 1);
    let mut g = DMatrix::<f64>::zeros(dim, dim);
    for col in 0..dim {
        let mut packed = vec![0.0; dim];
        packed[col] = 1.0;
        let gd = chain.g_bar_apply(h, &unpack_ell(&packed, n)).unwrap();
        for (row, &v) in pack_ell(&gd).iter().enumerate() {
            g[(row, col)] = v;
        }
    }
    g
}

#[test]
fn field_fixes_origin_and_equilibria() {
    for f3 in [1.0, 6.0, 0.37] {
        let p = DuffingParams::new(f3).unwrap();
        let at_origin = duffing_field(&HypState::new(0.0, 0.0), &p);
        assert_eq!(at_origin.w, 0.0);
        assert_eq!(at_origin.w1, 0.0);
        let c = (8.0 / f3).sqrt();
        for s in [-1.0, 1.0] {
            let at_center = duffing_field(&HypState::new(s * c, 0.0), &p);
            assert!(hyp_norm(&at_center) < 1e-14);
        }
    }
}

#[test]
fn field_example_value() {
    let p = DuffingParams::new(1.0).unwrap();
    let v = duffing_field(&HypState::new(2.0, 0.0), &p);
    assert_eq!(v.w, 0.0);
    assert!((v.w1 - 1.0).abs() < 1e-15);
}

#[test]
fn params_reject_bad_coefficients() {
    assert!(DuffingParams::new(0.0).is_err());
    assert!(DuffingParams::new(-1.0).is_err());
    assert!(DuffingParams::with_eps(1.0, -0.1).is_err());
    assert!(DuffingParams::with_eps(1.0, 0.2).is_ok());
}

#[test]
fn homoclinic_apex_value() {
    let p = DuffingParams::new(1.0).unwrap();
    let h = homoclinic(0.0, &p);
    assert!((h.w - 4.0).abs() < 1e-15);
    assert_eq!(h.w1, 0.0);

    let p6 = DuffingParams::new(6.0).unwrap();
    let h6 = homoclinic(0.0, &p6);
    assert!((h6.w - 4.0 / 6.0f64.sqrt()).abs() < 1e-15);
    assert!((homoclinic_amplitude(&p6) - h6.w).abs() < 1e-15);
}

#[test]
fn homoclinic_decays_exponentially() {
    let p = DuffingParams::new(1.0).unwrap();
    assert!(hyp_norm(&homoclinic(10.0, &p)) < 1e-3);
    assert!(hyp_norm(&homoclinic(-10.0, &p)) < 1e-3);
    // sech(t) ~ 2 e^{-t}: one unit of tau shrinks the tail by e.
    let r = homoclinic(9.0, &p).w / homoclinic(8.0, &p).w;
    assert!((r - (-1.0f64).exp()).abs() < 1e-3);
}

#[test]
fn homoclinic_satisfies_the_equation() {
    // Independent derivative formulas: w' = -a sech tanh, w1' = -a sech (2 sech^2 - 1).
    for f3 in [1.0, 6.0] {
        let p = DuffingParams::new(f3).unwrap();
        let a = 4.0 / f3.sqrt();
        let mut worst = 0.0f64;
        let mut tau = -10.0f64;
        while tau <= 10.0 {
            let sech = 1.0 / tau.cosh();
            let dw = -a * sech * tau.tanh();
            let dw1 = -a * sech * (2.0 * sech * sech - 1.0);
            let f = duffing_field(&homoclinic(tau, &p), &p);
            worst = worst.max((dw - f.w).abs()).max((dw1 - f.w1).abs());
            tau += 0.01;
        }
        assert!(worst < 1e-10, "residual {worst}");
    }
}

#[test]
fn first_integral_vanishes_on_homoclinic() {
    for f3 in [1.0, 6.0] {
        let p = DuffingParams::new(f3).unwrap();
        let mut tau = -15.0;
        while tau <= 15.0 {
            let h = homoclinic(tau, &p);
            assert!(h0_energy(&h, &p).abs() < 1e-12, "tau {tau}");
            tau += 0.13;
        }
    }
}

#[test]
fn reference_integrator_conserves_first_integral() {
    // Bounded orbit inside the loop, f3 = 1: starts at (2, 0), sweeps to
    // sqrt(12). Classical RK4 at dt = 1e-3 holds H0 to far below 1e-10.
    let p = DuffingParams::new(1.0).unwrap();
    let sys = DuffingSystem { params: p, n_modes: 4 };
    let mut state0 = FullState::<f64>::zero(4);
    state0.hyp = HypState::new(2.0, 0.0);
    let h_ref = h0_energy(&state0.hyp, &p);
    let seg = rk4_integrate(&sys, &state0, (0.0, 20.0), 1e-3).unwrap();
    let mut worst = 0.0f64;
    for s in &seg.states {
        worst = worst.max((h0_energy(&s.hyp, &p) - h_ref).abs());
    }
    assert!(worst < 1e-10, "H0 drift {worst}");
}

#[test]
fn orbits_reverse_in_time() {
    // Solutions through w1 = 0 are even in tau up to the sign of w1.
    let p = DuffingParams::new(6.0).unwrap();
    let sys = DuffingSystem { params: p, n_modes: 4 };
    let mut state0 = FullState::<f64>::zero(4);
    state0.hyp = HypState::new(0.9, 0.0);
    let fwd = integrate(&sys, &state0, (0.0, 5.0), 1e-3).unwrap();
    let bwd = integrate(&sys, &state0, (0.0, -5.0), 1e-3).unwrap();
    // bwd times were reversed to increasing order: node i of bwd sits at
    // tau = -5 + i dt, mirroring fwd node (n-1-i).
    let n = fwd.len();
    for i in 0..n {
        let a = &fwd.states[i].hyp;
        let b = &bwd.states[n - 1 - i].hyp;
        assert!((a.w - b.w).abs() < 1e-9, "node {i}");
        assert!((a.w1 + b.w1).abs() < 1e-9, "node {i}");
    }
}

#[test]
fn section_frame_is_anchored_at_the_apex() {
    let p = DuffingParams::new(6.0).unwrap();
    let fr = section_frame(&p);
    let a = 4.0 / 6.0f64.sqrt();
    assert!((fr.x0.w - a).abs() < 1e-15 && fr.x0.w1 == 0.0);
    assert!((fr.normal.w - a).abs() < 1e-15 && fr.normal.w1 == 0.0);
    assert!(fr.tangent.w == 0.0 && (fr.tangent.w1 + a).abs() < 1e-15);
    // The frame matches the field and the gradient of H0 at x0.
    let f = duffing_field(&fr.x0, &p);
    assert!((f.w - fr.tangent.w).abs() < 1e-14 && (f.w1 - fr.tangent.w1).abs() < 1e-14);
    let h = 1e-6;
    let dw = (h0_energy(&HypState::new(fr.x0.w + h, 0.0), &p)
        - h0_energy(&HypState::new(fr.x0.w - h, 0.0), &p))
        / (2.0 * h);
    assert!((dw - fr.normal.w).abs() < 1e-8);
}

#[test]
fn system_slow_part_is_the_field() {
    let p = DuffingParams::new(1.0).unwrap();
    let sys = DuffingSystem { params: p, n_modes: 6 };
    assert!(sys.eps_rotation().is_none());
    let mut s = FullState::<f64>::zero(6);
    s.hyp = HypState::new(1.3, -0.4);
    s.ell.y.set_mode(3, 0.7);
    let v = sys.slow(&s).unwrap();
    let f = duffing_field(&s.hyp, &p);
    assert_eq!(v.hyp.w, f.w);
    assert_eq!(v.hyp.w1, f.w1);
    for k in 2..=6 {
        assert_eq!(v.ell.y.mode(k), 0.0);
        assert_eq!(v.ell.y1.mode(k), 0.0);
    }
}

#[test]
fn regular_field_fixes_origin_and_parity() {
    let chain = &*CHAIN_01;
    let at0 = regular_field(&HypState::new(0.0, 0.0), chain).unwrap();
    assert!(hyp_norm(&at0) < 1e-12);
    for (w, w1) in [(1.1, 0.4), (0.3, -1.7), (2.0, 0.0)] {
        let f = regular_field(&HypState::new(w, w1), chain).unwrap();
        let g = regular_field(&HypState::new(-w, -w1), chain).unwrap();
        assert!((f.w + g.w).abs() < 1e-12);
        assert!((f.w1 + g.w1).abs() < 1e-12);
    }
}

#[test]
fn regular_field_collapses_to_the_limit_equation_quadratically() {
    // The slice field differs from the planar limit by the elliptic
    // back-reaction, one power of eps^2 per the scaling; measured constant
    // is 3.0 on |h| <= 3 and the gap shrinks by ~1/4 per halving of eps.
    let mut gaps = Vec::new();
    for eps in [0.1, 0.05, 0.025] {
        let chain = chain_at(eps, 4);
        let p = DuffingParams::with_eps(6.0, eps).unwrap();
        let mut gap = 0.0f64;
        for ir in 1..=6 {
            let r = ir as f64 * 0.5;
            for ia in 0..12 {
                let th = ia as f64 * std::f64::consts::PI / 6.0;
                let h = HypState::new(r * th.cos(), r * th.sin());
                let f = regular_field(&h, &chain).unwrap();
                let d = duffing_field(&h, &p);
                gap = gap.max((f.w - d.w).abs()).max((f.w1 - d.w1).abs());
            }
        }
        assert!(gap <= 3.5 * eps * eps, "eps {eps}: gap {gap}");
        assert!(gap <= 0.5 * eps, "eps {eps}: gap {gap}");
        gaps.push(gap);
    }
    for w in gaps.windows(2) {
        let ratio = w[1] / w[0];
        assert!(ratio < 0.3, "halving eps should shrink the gap ~4x, got {ratio}");
    }
}

#[test]
fn slice_is_exactly_invariant_for_the_regular_problem() {
    // No forcing enters the elliptic block of the regular problem, so an
    // orbit started on the slice never leaves it, to the last bit.
    let worst = BASE_01
        .states
        .iter()
        .map(|s| y1_norm(&s.ell))
        .fold(0.0f64, f64::max);
    assert_eq!(worst, 0.0);
    // And the orbit is the planar one: bounded, inside the homoclinic loop.
    for s in &BASE_01.states {
        assert!(s.hyp.norm() < 1.3);
    }
}

#[test]
fn evolution_at_equal_times_is_the_identity() {
    let e = evolution_e(1.7, 1.7, &BASE_01, &CHAIN_01).unwrap();
    let dim = 2 * (6 - 1);
    assert!(op_norm(&(&e - DMatrix::<f64>::identity(dim, dim))) < 1e-14);
}

#[test]
fn zero_coupling_reduces_to_the_exact_rotation() {
    let (eps, n, span) = (0.2, 5, 0.73);
    let dim = 2 * (n - 1);
    let e = rotation_with_coupling(span, 0.0, eps, n, 1e-2, |_| {
        Ok(DMatrix::zeros(dim, dim))
    })
    .unwrap();
    let table = RotationTable::new(n, span, eps);
    let mut worst = 0.0f64;
    for j in 0..dim {
        let mut col = vec![0.0; dim];
        col[j] = 1.0;
        table.apply_packed(&mut col);
        for i in 0..dim {
            worst = worst.max((e[(i, j)] - col[i]).abs());
        }
    }
    assert!(worst < 1e-12, "defect vs exact rotation {worst}");
    // Mode-wise unitary: the composition of rotations stays orthogonal.
    let ortho = op_norm(&(&e * e.transpose() - DMatrix::<f64>::identity(dim, dim)));
    assert!(ortho < 1e-12, "orthogonality defect {ortho}");
}

#[test]
fn evolution_norm_respects_the_coupling_budget() {
    // ||E(t,s)|| <= exp(sup||G_bar|| |t-s|): the rotation leaves the packed
    // Euclidean norm alone, each midpoint exponential is bounded by its
    // series. The sup is taken over the same coarse nodes the operator uses.
    let chain = &*CHAIN_01;
    let mut c_sup = 0.0f64;
    for (i, s) in BASE_01.states.iter().enumerate() {
        if i % 10 == 0 {
            c_sup = c_sup.max(op_norm(&coupling_at(chain, &s.hyp)));
        }
    }
    assert!(c_sup > 0.05 && c_sup < 0.5, "coupling scale moved: {c_sup}");
    let pairs = [
        (0.0, 5.0),
        (0.0, 1.0),
        (1.0, 3.0),
        (2.0, 4.5),
        (0.5, 2.5),
        (3.0, 5.0),
        (0.0, 0.1),
        (4.0, 4.2),
        (5.0, 0.0),
        (3.5, 1.0),
    ];
    for (s, t) in pairs {
        let e = evolution_e(t, s, &BASE_01, chain).unwrap();
        let bound = (c_sup * (t - s).abs()).exp() * (1.0 + 1e-9);
        let nrm = op_norm(&e);
        assert!(nrm <= bound, "||E({t},{s})|| = {nrm} > {bound}");
    }
}

#[test]
fn evolution_satisfies_the_cocycle_identity() {
    // Coupling samples are anchored at absolute grid multiples, so two legs
    // of a split span see the very same matrices; measured defect ~3e-15.
    let chain = &*CHAIN_01;
    let dim = 2 * (6 - 1);
    for (r, s, t) in [(0.0, 2.0, 5.0), (0.5, 1.5, 3.5), (1.0, 2.0, 3.0), (0.0, 0.1, 0.2)] {
        let ets = evolution_e(t, s, &BASE_01, chain).unwrap();
        let esr = evolution_e(s, r, &BASE_01, chain).unwrap();
        let etr = evolution_e(t, r, &BASE_01, chain).unwrap();
        let defect = op_norm(&(&ets * &esr - &etr));
        assert!(defect < 1e-12, "cocycle defect ({r},{s},{t}): {defect}");
    }
    // Reversed spans step through the same midpoints, so they invert each
    // other to roundoff accumulation.
    let fwd = evolution_e(5.0, 0.0, &BASE_01, chain).unwrap();
    let bwd = evolution_e(0.0, 5.0, &BASE_01, chain).unwrap();
    let inv = op_norm(&(&fwd * &bwd - DMatrix::<f64>::identity(dim, dim)));
    assert!(inv < 1e-10, "inverse defect {inv}");
}

#[test]
fn evolution_matches_the_variational_flow() {
    // The operator and the dual-lane tangent integration discretize the same
    // linear system in different ways (coarse interpolated coupling vs exact
    // stage sampling); measured gap 1.7e-5 against tangent magnitude ~1.
    let chain = &*CHAIN_01;
    let dim = 2 * (6 - 1);
    let mut d0 = FullState::<f64>::zero(6);
    d0.ell.y.set_mode(2, 0.6);
    d0.ell.y1.set_mode(3, -0.3);
    d0.ell.y.set_mode(5, 0.1);
    let tan = integrate_tangent(&RegularSystem(chain), &BASE_01, &d0, false).unwrap();
    let dend = tan.states.last().unwrap();
    // Hyperbolic tangent lane started at zero and the slice field does not
    // feed the elliptic lane back into it, so it stays exactly zero.
    assert_eq!(hyp_norm(&dend.hyp), 0.0);
    let e = evolution_e(5.0, 0.0, &BASE_01, chain).unwrap();
    let v0 = DMatrix::<f64>::from_column_slice(dim, 1, &pack_ell(&d0.ell));
    let via_e = &e * &v0;
    let pend = pack_ell(&dend.ell);
    let mut gap = 0.0f64;
    for i in 0..dim {
        gap = gap.max((pend[i] - via_e[(i, 0)]).abs());
    }
    assert!(gap < 1e-3, "evolution vs tangent flow gap {gap}");
}

#[test]
fn evolution_rejects_uncovered_spans() {
    let chain = &*CHAIN_01;
    assert!(matches!(
        evolution_e(5.5, 0.0, &BASE_01, chain),
        Err(Error::SpanError(_))
    ));
    assert!(matches!(
        evolution_e(2.0, -0.5, &BASE_01, chain),
        Err(Error::SpanError(_))
    ));
    let empty = TrajectorySegment {
        times: Vec::new(),
        states: Vec::new(),
        eps: 0.1,
        system_tag: SystemTag::Regular,
    };
    assert!(matches!(
        evolution_e(0.0, 0.0, &empty, chain),
        Err(Error::EmptyOrbit(_))
    ));
}

proptest! {
    #[test]
    fn field_is_odd(w in -3.0f64..3.0, w1 in -3.0f64..3.0, f3 in 0.2f64..8.0) {
        let p = DuffingParams::new(f3).unwrap();
        let plus = duffing_field(&HypState::new(w, w1), &p);
        let minus = duffing_field(&HypState::new(-w, -w1), &p);
        prop_assert!((plus.w + minus.w).abs() < 1e-12);
        prop_assert!((plus.w1 + minus.w1).abs() < 1e-12);
    }

    #[test]
    fn first_integral_is_even_in_both_arguments(
        w in -3.0f64..3.0, w1 in -3.0f64..3.0, f3 in 0.2f64..8.0
    ) {
        let p = DuffingParams::new(f3).unwrap();
        let e = h0_energy(&HypState::new(w, w1), &p);
        prop_assert!((e - h0_energy(&HypState::new(-w, w1), &p)).abs() < 1e-12);
        prop_assert!((e - h0_energy(&HypState::new(w, -w1), &p)).abs() < 1e-12);
    }
}

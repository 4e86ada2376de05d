//! End-to-end drive of the core pipeline: build the partial normal form for
//! a small amplitude, report the residual cascade, fit the cutoff, solve the
//! center-stable boundary problem, push the graphed point through the flow
//! to watch it stay on the manifold, then shoot both manifolds to the
//! symmetry section, close the energy gap, and report the assembled
//! breather's tail.

use breather_core::flow::integrate;
use breather_core::intersection::{IntersectCfg, SectionProblem};
use breather_core::manifolds::{
    join_hyp, split_hyp, GraphKind, LpBoundary, ManifoldContext,
};
use breather_core::model::{ModelParams, Nonlinearity};
use breather_core::normal_form::{build_chain, NormalFormBudget, TransformedSystem};
use breather_core::spectral::{y1_norm, EllState, FullState};

fn main() -> Result<(), breather_core::Error> {
    let eps = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(0.1);
    let params = ModelParams::new(eps, Nonlinearity::cubic(), 6)?;
    let budget = NormalFormBudget::for_params(&params);
    let chain = build_chain(&params, &budget)?;
    println!(
        "eps = {eps}: {} normal-form steps, residual sup {:.3e} (alpha_hat = {:.3})",
        chain.built_level() - 1,
        chain.alpha_hat.exp(),
        chain.alpha_hat
    );
    for (m, sup) in chain.residual_sups.iter().enumerate() {
        println!("  level {:2}: forcing sup {:.6e}", m + 2, sup);
    }

    let ctx = ManifoldContext::new(&chain)?;
    println!(
        "cutoff fitted: radius {:.4}, graph radius {:.4}, lipschitz {:.4}, margin {:.3}",
        ctx.cfg.cutoff_r, ctx.cfg.r, ctx.cutoff.sigma, ctx.cutoff.margin
    );

    let n = ctx.n_modes();
    let r = ctx.cfg.r;
    let mut wc = EllState::zero(n);
    wc.y.set_mode(2, 1.0);
    wc.y.set_mode(3, -0.6);
    let wc = wc.scaled(0.35 * r / y1_norm(&wc));
    let w_s = 0.4 * r;

    let base = LpBoundary::center_stable(w_s, wc.clone());
    let eval = ctx.graph(GraphKind::UOfCs, &base)?;
    println!(
        "h_u({:.4}, |wc|={:.4}) = {:.6e}   ({} sweeps, residual {:.2e})",
        w_s,
        0.35 * r,
        eval.value_u,
        eval.iterations,
        eval.fixpoint_residual
    );

    let mut z0 = FullState::zero(n);
    z0.hyp = join_hyp(w_s, eval.value_u);
    z0.ell = wc;
    let sys = TransformedSystem(&chain);
    let seg = integrate(&sys, &z0, (0.0, 1.0), 1e-2)?;
    let z1 = seg.states.last().unwrap();
    let (a_s1, a_u1) = split_hyp(&z1.hyp);
    let moved = LpBoundary::center_stable(a_s1, z1.ell.clone());
    let again = ctx.graph(GraphKind::UOfCs, &moved)?;
    println!(
        "after time 1 under the flow: h_u({:.4}, .) = {:.6e}, flowed a_u = {:.6e}, defect {:.2e}",
        a_s1,
        again.value_u,
        a_u1,
        (again.value_u - a_u1).abs()
    );

    let mut icfg = IntersectCfg::default();
    icfg.horizon = 7.0;
    let prob = SectionProblem::new(&ctx, icfg)?;
    let ends = prob.endpoints()?;
    println!(
        "section crossings at tau = {:+.4} / {:+.4}, rescaled endpoint norms {:.3e} / {:.3e}",
        ends.cross_stable.tau,
        ends.cross_unstable.tau,
        y1_norm(&ends.y_stable),
        y1_norm(&ends.y_unstable)
    );
    let h0 = prob.energy_gap(0.0, &ends)?;
    let h1 = prob.energy_gap(1.0, &ends)?;
    println!("energy gap h(0) = {h0:+.3e}, h(1) = {h1:+.3e}");

    let b = prob.find_breather()?;
    let umax = b
        .physical
        .u
        .iter()
        .flat_map(|row| row.iter())
        .fold(0.0_f64, |m, v| m.max(v.abs()));
    println!(
        "breather: s0 = {:.6} ({} bisections, |h| = {:.2e}), tail amplitude {:.4e}, max |u| = {:.5}",
        b.s0, b.bisect_steps, b.gap_at_root.abs(), b.tail_amp, umax
    );
    Ok(())
}

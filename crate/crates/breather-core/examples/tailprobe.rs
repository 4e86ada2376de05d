//! Call-order probe: the assembled orbit must not depend on what was
//! computed on the problem beforehand.

use breather_core::intersection::{IntersectCfg, SectionProblem};
use breather_core::manifolds::ManifoldContext;
use breather_core::model::{ModelParams, Nonlinearity};
use breather_core::normal_form::{build_chain, NormalFormBudget};
use breather_core::spectral::y1_norm;

fn main() -> Result<(), breather_core::Error> {
    let params = ModelParams::new(0.1, Nonlinearity::cubic(), 6)?;
    let budget = NormalFormBudget::for_params(&params);
    let chain = build_chain(&params, &budget)?;
    let ctx = ManifoldContext::new(&chain)?;
    let mut icfg = IntersectCfg::default();
    icfg.horizon = 7.0;

    // cold: find_breather on a fresh problem
    let prob = SectionProblem::new(&ctx, icfg.clone())?;
    let cold = prob.find_breather()?;

    // warm: gap evaluations first, as a driver would do
    let prob2 = SectionProblem::new(&ctx, icfg)?;
    let ends = prob2.endpoints()?;
    let _ = prob2.energy_gap(0.0, &ends)?;
    let _ = prob2.energy_gap(1.0, &ends)?;
    let warm = prob2.find_breather()?;

    println!("cold tail = {:.6e}, warm tail = {:.6e}", cold.tail_amp, warm.tail_amp);
    println!("cold s0 = {}, warm s0 = {}", cold.s0, warm.s0);

    // decay profile of the elliptic trace along both orbits
    for win in [15.0, 20.0, 23.0, 30.0, 40.0, 55.0] {
        let supw = |b: &breather_core::intersection::BreatherResult| {
            b.orbit
                .times
                .iter()
                .zip(b.orbit.states.iter())
                .filter(|(t, _)| t.abs() >= win)
                .map(|(_, z)| y1_norm(&z.ell))
                .fold(0.0_f64, f64::max)
        };
        println!(
            "  sup_ell over |t| >= {:4.1}: cold {:.3e}, warm {:.3e}",
            win,
            supw(&cold),
            supw(&warm)
        );
    }

    // worst node gap between the two orbits
    let mut worst = 0.0_f64;
    for (zc, zw) in cold.orbit.states.iter().zip(warm.orbit.states.iter()) {
        let mut g = zc.clone();
        g.axpy(-1.0, zw);
        worst = worst.max(g.hyp.norm() + y1_norm(&g.ell));
    }
    println!(
        "node count {} vs {}, worst state gap {:.3e}",
        cold.orbit.times.len(),
        warm.orbit.times.len(),
        worst
    );
    Ok(())
}

//! Least-squares exterior control of an interior target: residuals shrink as
//! controls are added while the system condition grows.

use nonlocal_calderon::dn::{bump, ExteriorBasis};
use nonlocal_calderon::domain::{build_domain, sample, Conductivity, DomainConfig, FracOrder, SupportTag, TimeGrid};
use nonlocal_calderon::inversion::RungeSystem;
use nonlocal_calderon::solvers::{potentials, Lab};

fn main() -> nonlocal_calderon::Result<()> {
    let spec = build_domain(&DomainConfig {
        box_halfwidth: 2.0,
        h: 0.02,
        omega: (-1.0, 1.0),
        exterior: vec![("W".into(), 1.2, 1.8)],
        disjoint_pairs: vec![],
    })?;
    let lab = Lab::new(spec, FracOrder::new(1, 0.5)?, TimeGrid::new(1.0, 50, 1.0)?)?;
    let c = Conductivity::from_fn(|x, _| 1.0 + 0.2 * bump(x / 0.8), None, &lab.spec, &lab.tg, 0.2)?;
    let pot = potentials(&lab, &c)?;
    let controls = ExteriorBasis::tensor(&lab, "W", 8, 5)?;
    let sys = RungeSystem::new(&lab, &c, &pot, &controls, false)?;
    let phi = sample(
        |x, t| (bump((x + 0.3) / 0.5) - 0.5 * bump((x - 0.4) / 0.4)) * (std::f64::consts::PI * t).sin(),
        &lab.spec,
        &lab.tg,
        SupportTag::InteriorOnly,
    )?;
    let b = sys.target_vector(&lab, &phi);
    for n in [10, 20, 40] {
        let r = sys.solve(&b, n, 0.0)?;
        println!("{n:2} controls  residual = {:.4}  condition = {:.2e}  ill-conditioned = {}", r.residual, r.condition, r.ill_conditioned);
    }
    Ok(())
}

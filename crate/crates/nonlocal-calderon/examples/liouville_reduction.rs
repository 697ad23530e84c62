//! Diffusion solution vs the transformed Schrödinger solution for a smooth
//! space-time conductivity, under refinement.

use nonlocal_calderon::dn::bump;
use nonlocal_calderon::domain::{build_domain, sample, Conductivity, DomainConfig, FracOrder, SupportTag, TimeGrid};
use nonlocal_calderon::solvers::{potentials, verify_liouville, Lab};

fn main() -> nonlocal_calderon::Result<()> {
    let mut prev = None;
    for (h, nt) in [(0.04, 25), (0.02, 50), (0.01, 100)] {
        let spec = build_domain(&DomainConfig {
            box_halfwidth: 2.0,
            h,
            omega: (-1.0, 1.0),
            exterior: vec![("W".into(), 1.2, 1.8)],
            disjoint_pairs: vec![],
        })?;
        let lab = Lab::new(spec, FracOrder::new(1, 0.5)?, TimeGrid::new(1.0, nt, 1.0)?)?;
        let c = Conductivity::from_fn(|x, t| 1.0 + 0.5 * bump(x / 1.1) * (1.0 + 0.5 * t), None, &lab.spec, &lab.tg, 0.2)?;
        let pot = potentials(&lab, &c)?;
        let f = sample(|x, t| bump((x - 1.5) / 0.3) * (std::f64::consts::PI * t).sin(), &lab.spec, &lab.tg, SupportTag::ExteriorOnly)?;
        let r = verify_liouville(&lab, &c, &pot, &f)?;
        let rate = prev.map(|p: f64| (p / r.discrepancy).log2());
        println!("h = {h:.3}  n_t = {nt:3}  discrepancy = {:.3e}  rate = {rate:.2?}", r.discrepancy);
        prev = Some(r.discrepancy);
    }
    Ok(())
}

//! Difference of reduced DN maps against the interior integral of the
//! potential difference, for γ1 = 1 and γ2 = 1 + interior bump.

use nonlocal_calderon::dn::{bump, ExteriorBasis};
use nonlocal_calderon::domain::{build_domain, Conductivity, DomainConfig, FracOrder, TimeGrid};
use nonlocal_calderon::inversion::integral_identity_eval;
use nonlocal_calderon::solvers::{potentials, Lab};

fn main() -> nonlocal_calderon::Result<()> {
    for (h, nt) in [(0.04, 25), (0.02, 50)] {
        let spec = build_domain(&DomainConfig {
            box_halfwidth: 2.0,
            h,
            omega: (-1.0, 1.0),
            exterior: vec![("W1".into(), 1.2, 1.8), ("W2".into(), -1.8, -1.2)],
            disjoint_pairs: vec![],
        })?;
        let lab = Lab::new(spec, FracOrder::new(1, 0.5)?, TimeGrid::new(1.0, nt, 1.0)?)?;
        let c1 = Conductivity::constant(1.0, &lab.spec, &lab.tg)?;
        let c2 = Conductivity::from_fn(|x, _| 1.0 + 0.3 * bump(x / 0.7), None, &lab.spec, &lab.tg, 0.2)?;
        let (p1, p2) = (potentials(&lab, &c1)?, potentials(&lab, &c2)?);
        let fb = ExteriorBasis::tensor(&lab, "W1", 6, 5)?;
        let gb = ExteriorBasis::tensor(&lab, "W2", 6, 5)?;
        let r = integral_identity_eval(&lab, &c1, &p1, &c2, &p2, &fb, &gb)?;
        println!(
            "h = {h:.2}  max |N1 - N2| = {:.3e}  residual = {:.1e}  trapezoid residual = {:.3e}",
            r.lhs_max, r.residual, r.residual_trapezoid
        );
    }
    Ok(())
}

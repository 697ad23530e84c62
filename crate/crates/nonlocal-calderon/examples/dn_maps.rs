//! Exterior DN data on a 6x5 tensor basis and the discrete identities between
//! the different forms of the map.

use nonlocal_calderon::dn::{self, bump, ExteriorBasis};
use nonlocal_calderon::domain::{build_domain, Conductivity, DomainConfig, FracOrder, TimeGrid};
use nonlocal_calderon::solvers::{potentials, Lab};

fn main() -> nonlocal_calderon::Result<()> {
    let spec = build_domain(&DomainConfig {
        box_halfwidth: 2.0,
        h: 0.02,
        omega: (-1.0, 1.0),
        exterior: vec![("W1".into(), 1.2, 1.8), ("W2".into(), -1.8, -1.2)],
        disjoint_pairs: vec![("W1".into(), "W2".into())],
    })?;
    let lab = Lab::new(spec, FracOrder::new(1, 0.5)?, TimeGrid::new(1.0, 50, 1.0)?)?;
    let c = Conductivity::from_fn(|x, _| 1.0 + 0.2 * bump(x / 0.8), None, &lab.spec, &lab.tg, 0.2)?;
    let one = Conductivity::constant(1.0, &lab.spec, &lab.tg)?;
    let fb = ExteriorBasis::tensor(&lab, "W1", 6, 5)?;
    let gb = ExteriorBasis::tensor(&lab, "W2", 6, 5)?;

    let d = dn::diffusion_dn(&lab, &c, &fb, &gb)?;
    let part = (&d.lambda.entries - &d.n_gamma.entries - &d.ext_ext.entries).abs().max();
    println!("|Λ| max {:.3e}, partition defect {part:.1e}", d.lambda.max_abs());

    let pot = potentials(&lab, &c)?;
    let sa = dn::check_selfadjoint(&lab, &c, &pot, &fb, &gb)?;
    println!("self-adjointness residual {:.1e} (relative {:.1e})", sa.residual, sa.relative);

    let on = dn::check_old_new_equivalence(&lab, &c, &one, &fb, &gb)?;
    println!("Λ gap {:.6e}, N gap {:.6e}, entrywise defect {:.1e}", on.lambda_gap, on.n_gap, on.entrywise);

    let rel = dn::check_relation_theorem(&lab, &c, &one, &fb, &gb)?;
    println!("N_γ vs N_Q difference mismatch {:.2e}", rel.mismatch);
    println!("first row of Λ: {:?}", d.lambda.entries.row(0).iter().take(5).collect::<Vec<_>>());
    Ok(())
}

//! The reduced potential carries `+∂_tγ / (2γ²)`: with that sign the
//! transformed solution converges to the diffusion solution, with the other
//! sign the discrepancy stalls at the size of the time-derivative term.

use nonlocal_calderon::dn::bump;
use nonlocal_calderon::domain::{build_domain, sample, Conductivity, DomainConfig, FracOrder, SupportTag, TimeGrid};
use nonlocal_calderon::kernel::PotentialField;
use nonlocal_calderon::solvers::{potentials, verify_liouville, Lab};

fn discrepancies(h: f64, nt: usize) -> (f64, f64) {
    let spec = build_domain(&DomainConfig {
        box_halfwidth: 2.0,
        h,
        omega: (-1.0, 1.0),
        exterior: vec![("W".into(), 1.2, 1.8)],
        disjoint_pairs: vec![],
    })
    .unwrap();
    let lab = Lab::new(spec, FracOrder::new(1, 0.5).unwrap(), TimeGrid::new(1.0, nt, 1.0).unwrap()).unwrap();
    let c = Conductivity::from_fn(|x, t| 1.0 + 0.4 * bump(x / 0.9) * (1.0 + t), None, &lab.spec, &lab.tg, 0.2).unwrap();
    let f = sample(|x, t| bump((x - 1.5) / 0.3) * (std::f64::consts::PI * t).sin(), &lab.spec, &lab.tg, SupportTag::ExteriorOnly).unwrap();
    let p = potentials(&lab, &c).unwrap();
    let used = verify_liouville(&lab, &c, &p, &f).unwrap().discrepancy;
    let other = PotentialField { big_q: p.q.axpby(2.0, &p.big_q, -1.0).unwrap(), ..p };
    let flipped = verify_liouville(&lab, &c, &other, &f).unwrap().discrepancy;
    (used, flipped)
}

#[test]
fn only_the_used_sign_converges() {
    let (u1, f1) = discrepancies(0.04, 25);
    let (u2, f2) = discrepancies(0.02, 50);
    let (u3, f3) = discrepancies(0.01, 100);
    assert!((u1 / u2).log2() > 0.8 && (u2 / u3).log2() > 0.8, "{u1:e} {u2:e} {u3:e}");
    assert!((f2 / f3).log2().abs() < 0.2, "{f1:e} {f2:e} {f3:e}");
    assert!(f3 > 10.0 * u3);
}

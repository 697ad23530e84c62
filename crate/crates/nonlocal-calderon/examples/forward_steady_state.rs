//! Long-time forward solve with a unit source, compared with the torsion profile.

use nonlocal_calderon::domain::{build_domain, sample, Conductivity, DomainConfig, FracOrder, SupportTag, TimeGrid};
use nonlocal_calderon::kernel::torsion;
use nonlocal_calderon::solvers::{solve_forward_diffusion, Lab};

fn main() -> nonlocal_calderon::Result<()> {
    let spec = build_domain(&DomainConfig {
        box_halfwidth: 2.0,
        h: 0.02,
        omega: (-1.0, 1.0),
        exterior: vec![("W".into(), 1.2, 1.8)],
        disjoint_pairs: vec![],
    })?;
    let fo = FracOrder::new(1, 0.5)?;
    let lab = Lab::new(spec, fo, TimeGrid::new(8.0, 200, 1.0)?)?;
    let c = Conductivity::constant(1.0, &lab.spec, &lab.tg)?;
    let f = lab.zeros(SupportTag::ExteriorOnly);
    let src = sample(|_, _| 1.0, &lab.spec, &lab.tg, SupportTag::InteriorOnly)?;
    let rep = solve_forward_diffusion(&lab, &c, &f, Some(&src), None)?;
    let u = rep.solution();
    let n = lab.tg.n_t;
    for k in [0, n / 16, n / 4, n] {
        let i0 = lab.spec.n_nodes() / 2;
        println!("t = {:5.2}  u(0) = {:.6}  torsion(0) = {:.6}", lab.tg.t(k), u.get(i0, k), torsion(fo, 0.0));
    }
    let err = (0..lab.spec.n_nodes()).map(|i| (u.get(i, n) - torsion(fo, lab.spec.x[i])).abs()).fold(0.0, f64::max);
    println!("max nodal gap at T: {err:.3e}");
    println!("energy constant: {:.4}", rep.energy_constant());
    Ok(())
}

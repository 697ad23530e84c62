//! Levenberg-Marquardt recovery of a time-independent interior conductivity
//! from cross exterior data, with the data generated on the inversion grid.

use nonlocal_calderon::dn::{bump, ExteriorBasis};
use nonlocal_calderon::domain::{build_domain, Conductivity, DomainConfig, FracOrder, TimeGrid};
use nonlocal_calderon::inversion::{interior_gauss_newton, recovery_error, DataModel, LmOptions, SplineModel};
use nonlocal_calderon::solvers::Lab;

fn main() -> nonlocal_calderon::Result<()> {
    let spec = build_domain(&DomainConfig {
        box_halfwidth: 2.0,
        h: 0.025,
        omega: (-1.0, 1.0),
        exterior: vec![("In".into(), 1.05, 1.95), ("Out".into(), -1.95, -1.05)],
        disjoint_pairs: vec![],
    })?;
    let lab = Lab::new(spec, FracOrder::new(1, 0.5)?, TimeGrid::new(1.0, 50, 1.0)?)?;
    let model = SplineModel::uniform((-1.0, 1.0), 8);
    let fi = ExteriorBasis::tensor(&lab, "In", 6, 5)?;
    let go = ExteriorBasis::tensor(&lab, "Out", 6, 5)?;
    let dm = DataModel::new(&lab, model.clone(), &fi, &[&go])?;
    let truth = |x: f64| 1.0 + 0.2 * bump(x / 0.8);
    let c = Conductivity::from_fn(move |x, _| truth(x), None, &lab.spec, &lab.tg, 0.2)?;
    let p0 = vec![0.0; model.dim()];
    let obs = dm.evaluate_conductivity(&c, &p0)?.data;
    let r = interior_gauss_newton(&dm, &obs, &p0, &LmOptions::default())?;
    let e = recovery_error(&model, &r.params, &truth);
    println!("iterations = {}  final objective = {:.3e}", r.iterations, r.misfit_history.last().unwrap());
    println!("relative L2 error = {:.4}  contrast-relative = {:.4}", e.relative, e.contrast_relative);
    for (x, g) in r.knots.iter().zip(&r.gamma_knots) {
        println!("x = {x:6.3}  true = {:.4}  recovered = {g:.4}", truth(*x));
    }
    Ok(())
}

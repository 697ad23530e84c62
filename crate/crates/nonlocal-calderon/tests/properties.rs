//! Randomized invariants: linearity, symmetry, exact discrete identities and
//! serialization round trips.

use nalgebra::DMatrix;
use nonlocal_calderon::dn::{self, bump, ExteriorBasis};
use nonlocal_calderon::domain::{build_domain, sample, Conductivity, DomainConfig, DomainSpec, FracOrder, SupportTag, TimeGrid};
use nonlocal_calderon::harness::cache::MatrixCache;
use nonlocal_calderon::harness::output::fmt17;
use nonlocal_calderon::kernel::{Assembler, Weight};
use nonlocal_calderon::solvers::{potentials, solve_forward_diffusion, Lab};
use proptest::prelude::*;

fn spec(h: f64) -> DomainSpec {
    build_domain(&DomainConfig {
        box_halfwidth: 2.0,
        h,
        omega: (-1.0, 1.0),
        exterior: vec![("W1".into(), 1.2, 1.8), ("W2".into(), -1.8, -1.2)],
        disjoint_pairs: vec![],
    })
    .unwrap()
}

fn lab(s: f64) -> Lab {
    Lab::new(spec(0.1), FracOrder::new(1, s).unwrap(), TimeGrid::new(1.0, 10, 1.0).unwrap()).unwrap()
}

fn wt(v: &[f64]) -> Weight<'_> {
    Weight { nodal: v, far: v[0] }
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |a, v| a.max(v.abs()))
}

fn ext(lab: &Lab, c: f64, w: f64) -> nonlocal_calderon::domain::Field {
    sample(move |x, t| bump((x - c) / w) * (std::f64::consts::PI * t).sin(), &lab.spec, &lab.tg, SupportTag::ExteriorOnly).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn fmt17_round_trips(v in proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO) {
        prop_assert_eq!(fmt17(v).parse::<f64>().unwrap(), v);
    }

    #[test]
    fn cache_round_trip_is_bit_exact(seed in 0u64..1000, s in 0.1f64..0.9) {
        let sp = spec(0.2);
        let fo = FracOrder::new(1, s).unwrap();
        let n = sp.n_dof();
        let m = DMatrix::from_fn(n, n, |i, j| ((seed as f64 + 1.0) * (i as f64 + 0.5) / (j as f64 + 1.5)).sin() * 1e-3);
        let tmp = tempfile::tempdir().unwrap();
        let c = MatrixCache::at(tmp.path());
        let key = MatrixCache::key(&sp, fo, "prop");
        c.write(&key, &sp, fo, &m).unwrap();
        let back = c.read(&key, &sp, fo).unwrap();
        prop_assert!(m.iter().zip(back.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        // another order must not read this file
        prop_assert!(c.read(&key, &sp, FracOrder::new(1, (s + 0.05).min(0.95)).unwrap()).is_err());
    }

    #[test]
    fn weighted_form_symmetric_and_bilinear(a in -2.0f64..2.0, c in 0.0f64..0.9, s in 0.2f64..0.8) {
        let sp = spec(0.1);
        let asm = Assembler::new(&sp, FracOrder::new(1, s).unwrap()).unwrap();
        let w1: Vec<f64> = sp.x.iter().map(|&x| 1.0 + 0.3 * bump((x - c) / 0.7)).collect();
        let w2: Vec<f64> = sp.x.iter().map(|&x| 0.5 + 0.2 * (3.0 * x).cos()).collect();
        let w3: Vec<f64> = sp.x.iter().map(|&x| bump(x / 1.5)).collect();
        let lin: Vec<f64> = w1.iter().zip(&w3).map(|(p, q)| a * p + q).collect();
        let b12 = asm.bilinear(&Weight { nodal: &w1, far: 1.0 }, &wt(&w2)).full();
        let b21 = asm.bilinear(&wt(&w2), &Weight { nodal: &w1, far: 1.0 }).full();
        prop_assert!(max_abs(&(&b12 - &b21)) <= 1e-13 * max_abs(&b12));
        prop_assert!(max_abs(&(&b12 - b12.transpose())) <= 1e-13 * max_abs(&b12));
        let lhs = asm.bilinear(&Weight { nodal: &lin, far: a + 0.0 }, &wt(&w2)).full();
        let rhs = asm.bilinear(&Weight { nodal: &w1, far: 1.0 }, &wt(&w2)).full() * a
            + asm.bilinear(&Weight { nodal: &w3, far: 0.0 }, &wt(&w2)).full();
        prop_assert!(max_abs(&(&lhs - &rhs)) <= 1e-12 * max_abs(&lhs).max(1e-300));
    }

    #[test]
    fn forward_solution_is_linear_in_data(a in -3.0f64..3.0, b in -3.0f64..3.0, amp in -0.4f64..0.4) {
        let lab = lab(0.5);
        let c = Conductivity::from_fn(move |x, t| 1.0 + amp * bump(x / 0.8) * (1.0 + t), None, &lab.spec, &lab.tg, 0.2).unwrap();
        let (f, g) = (ext(&lab, 1.5, 0.3), ext(&lab, -1.5, 0.2));
        let fg = f.axpby(a, &g, b).unwrap();
        let u = |d| solve_forward_diffusion(&lab, &c, d, None, None).unwrap().solutions.remove(0);
        let combo = u(&f).axpby(a, &u(&g), b).unwrap();
        let direct = u(&fg);
        let gap = direct.axpby(1.0, &combo, -1.0).unwrap().max_abs();
        prop_assert!(gap <= 1e-12 * direct.max_abs().max(1e-300));
    }

    #[test]
    fn partition_and_selfadjointness_hold_exactly(amp in -0.4f64..0.6, slope in -0.3f64..0.3, s in 0.3f64..0.7) {
        let lab = lab(s);
        let c = Conductivity::from_fn(move |x, t| 1.0 + amp * bump(x / 0.8) * (1.0 + slope * t), None, &lab.spec, &lab.tg, 0.2).unwrap();
        let fb = ExteriorBasis::tensor(&lab, "W1", 2, 2).unwrap();
        let gb = ExteriorBasis::tensor(&lab, "W2", 2, 2).unwrap();
        let d = dn::diffusion_dn(&lab, &c, &fb, &gb).unwrap();
        let part = max_abs(&(&d.lambda.entries - &d.n_gamma.entries - &d.ext_ext.entries));
        prop_assert!(part <= 1e-14 * d.lambda.max_abs().max(1e-300) + 1e-20);
        let pot = potentials(&lab, &c).unwrap();
        let sa = dn::check_selfadjoint(&lab, &c, &pot, &fb, &gb).unwrap();
        prop_assert!(sa.relative <= 1e-10, "relative {}", sa.relative);
    }

    #[test]
    fn unforced_energy_does_not_grow(amp in 0.0f64..0.8, k in 1usize..4) {
        let lab = lab(0.5);
        let c = Conductivity::from_fn(move |x, _| 1.0 + amp * bump(x / 0.9), None, &lab.spec, &lab.tg, 0.2).unwrap();
        let kf = k as f64;
        let u0 = sample(move |x, _| (kf * std::f64::consts::PI * x).sin() * bump(x / 0.95), &lab.spec, &lab.tg, SupportTag::InteriorOnly).unwrap();
        let z = lab.zeros(SupportTag::ExteriorOnly);
        let u = solve_forward_diffusion(&lab, &c, &z, None, Some(&u0)).unwrap().solutions.remove(0);
        let m = &lab.st.m;
        let norms: Vec<f64> = (0..lab.tg.n_times()).map(|t| { let v = u.dofs(t); v.dot(&(m * &v)) }).collect();
        prop_assert!(norms.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)), "{norms:?}");
    }
}

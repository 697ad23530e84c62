//! Scenario orchestration: builds grids (through the cache), runs the
//! experiments, records verdicts and writes CSV and JSON artifacts.

use super::cache::MatrixCache;
use super::config::{ExperimentConfig, Phantom, SCENARIOS};
use super::output::{dn_table, field_table, Assertion, RunManifest, Stage, Table};
use crate::dn::{self, bump, ExteriorBasis, StrongInputs};
use crate::domain::{sample, Field, SupportTag};
use crate::error::{Error, Result};
use crate::inversion::{self, DataModel, LmOptions, SplineModel};
use crate::kernel::{torsion, PotentialField};
use crate::solvers::{self, potentials, Lab};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Verdict names each scenario must produce, in order.
pub fn declared_assertions(scenario: &str) -> Vec<&'static str> {
    match scenario {
        "forward-demo" => vec!["steady_state_l2", "energy_constant_stable", "step_residual"],
        "liouville-check" => vec!["liouville_unit", "liouville_constant", "liouville_rate", "liouville_other_sign_stalls"],
        "dn-consistency" => vec![
            "partition",
            "old_new",
            "heat_case",
            "extension_invariance",
            "selfadjoint_unit",
            "selfadjoint_phantom",
            "selfadjoint_rate",
            "relation",
            "ibp_exterior",
            "ibp_interior",
        ],
        "exterior-recon" => vec!["unit_norms", "l2_decreasing", "recon_unit_gap", "recon_varying_gap", "recon_varying_monotone"],
        "integral-identity" => vec!["identity_equal", "identity_fixed", "identity_rate", "identity_trapezoid_rate"],
        "runge" => vec!["runge_zero", "runge_in_range", "runge_decreasing"],
        "interior-recovery" => vec![
            "recovery_trivial",
            "gradient_fd_a",
            "gradient_fd_b",
            "recovery_crime",
            "misfit_monotone",
            "recovery_honest",
            "recovery_noise",
            "distinct_data",
        ],
        _ => vec![],
    }
}

pub struct Runner<'c> {
    pub cfg: &'c ExperimentConfig,
    pub out: PathBuf,
    pub cache: MatrixCache,
    pub manifest: RunManifest,
}

/// Observed orders `log2(v_i / v_{i+1})`.
pub fn observed_rates(v: &[f64]) -> Vec<f64> {
    v.windows(2).map(|w| (w[0] / w[1]).log2()).collect()
}

/// Minimum observed rate, or `+∞` when every value is already below the round-off floor.
pub fn rate_or_floor(v: &[f64], floor: f64) -> f64 {
    if v.iter().all(|&x| x <= floor) {
        return f64::INFINITY;
    }
    observed_rates(v).into_iter().fold(f64::INFINITY, f64::min)
}

impl<'c> Runner<'c> {
    pub fn new(cfg: &'c ExperimentConfig, out: &Path, cache: MatrixCache) -> Self {
        let manifest = RunManifest {
            scenario: cfg.scenario.clone(),
            software_version: env!("CARGO_PKG_VERSION").into(),
            seed: cfg.seed,
            config: serde_json::to_value(cfg).unwrap_or_default(),
            ..Default::default()
        };
        Self { cfg, out: out.to_path_buf(), cache, manifest }
    }

    fn lab(&mut self, h: f64, sets: Option<Vec<(String, f64, f64)>>, t_final: f64, n_t: usize) -> Result<Lab> {
        let mut g = self.cfg.grid.clone();
        if let Some(s) = sets {
            g.exterior = s;
            g.disjoint_pairs.clear();
        }
        let spec = g.domain(h)?;
        let fo = g.order()?;
        let tg = g.time(t_final, n_t)?;
        let t0 = Instant::now();
        let (st, rec) = self.cache.get_or_assemble(&spec, fo)?;
        self.manifest.stages.push(Stage { name: format!("assembly h={h:e}"), seconds: t0.elapsed().as_secs_f64() });
        for r in rec {
            if !self.manifest.cache.iter().any(|c| c.key == r.key) {
                self.manifest.cache.push(r);
            }
        }
        Lab::with_stiffness(spec, fo, tg, st)
    }

    fn grid_lab(&mut self, h: f64, n_t: usize) -> Result<Lab> {
        let t = self.cfg.grid.t_final;
        self.lab(h, None, t, n_t)
    }

    fn phantom(&self, p: &Phantom, lab: &Lab) -> Result<crate::domain::Conductivity> {
        p.conductivity(&lab.spec, &lab.tg, self.cfg.grid.gamma0)
    }

    fn stage<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let t0 = Instant::now();
        let r = f(self);
        self.manifest.stages.push(Stage { name: name.into(), seconds: t0.elapsed().as_secs_f64() });
        r
    }

    fn check(&mut self, name: &str, value: f64, threshold: f64, le: bool, note: impl Into<String>) {
        let pass = if le { value <= threshold } else { value >= threshold };
        self.manifest.assertions.push(Assertion {
            name: name.into(),
            value,
            threshold,
            comparison: if le { "<=".into() } else { ">=".into() },
            pass,
            note: note.into(),
        });
    }

    fn le(&mut self, name: &str, value: f64, threshold: f64, note: impl Into<String>) {
        self.check(name, value, threshold, true, note)
    }

    fn ge(&mut self, name: &str, value: f64, threshold: f64, note: impl Into<String>) {
        self.check(name, value, threshold, false, note)
    }

    fn write(&mut self, file: &str, t: &Table) -> Result<()> {
        t.write(&self.out.join(file))?;
        self.manifest.outputs.push(file.into());
        Ok(())
    }

    fn detail(&mut self, key: &str, v: impl Serialize) {
        self.manifest.details.insert(key.into(), serde_json::to_value(v).unwrap_or_default());
    }

    /// Smooth exterior datum in `set`, vanishing at `t = 0` and `t = T`.
    fn datum(&self, lab: &Lab, set: &str) -> Result<Field> {
        let iv = lab.spec.exterior_set(set)?.interval;
        let (m, r) = (0.5 * (iv.a + iv.b), 0.5 * iv.len());
        let t_final = lab.tg.t_final;
        sample(move |x, t| bump((x - m) / r) * bump((t - 0.5 * t_final) / (0.5 * t_final)), &lab.spec, &lab.tg, SupportTag::ExteriorOnly)
    }

    pub fn run(&mut self) -> Result<()> {
        let sc = self.cfg.scenario.clone();
        match sc.as_str() {
            "forward-demo" => self.forward_demo(),
            "liouville-check" => self.liouville_check(),
            "dn-consistency" => self.dn_consistency(),
            "exterior-recon" => self.exterior_recon(),
            "integral-identity" => self.integral_identity(),
            "runge" => self.runge(),
            "interior-recovery" => self.interior_recovery(),
            other => Err(Error::Config(format!("scenario {other} is not runnable here"))),
        }
    }

    fn forward_demo(&mut self) -> Result<()> {
        let fc = self.cfg.forward.clone();
        let lab = self.lab(fc.h, None, fc.t_final, fc.n_t)?;
        let Phantom::Constant { value } = fc.phantom else {
            return Err(Error::Config("forward.phantom must be constant".into()));
        };
        let c = self.phantom(&fc.phantom, &lab)?;
        let f = lab.zeros(SupportTag::ExteriorOnly);
        let src = sample(move |_, _| fc.source, &lab.spec, &lab.tg, SupportTag::InteriorOnly)?;
        let rep = self.stage("forward solve", |_| solvers::solve_forward_diffusion(&lab, &c, &f, Some(&src), None))?;
        let u = rep.solution();
        let n = lab.tg.n_t;
        let nd = lab.spec.n_dof();
        let exact: Vec<f64> = lab.spec.x.iter().map(|&x| fc.source / value * torsion(lab.fo, x)).collect();
        let d = nalgebra::DVector::from_iterator(nd, (1..=nd).map(|i| u.get(i, n) - exact[i]));
        let err = d.dot(&(&lab.st.m * &d)).sqrt();
        let tol = self.cfg.tolerances.clone();
        self.le("steady_state_l2", err, tol.steady_state_l2, "L2(Ω) distance of u(T) to the torsion profile");
        // same data on the grid coarsened by two in h and τ
        let coarse = self.lab(2.0 * fc.h, None, fc.t_final, (fc.n_t / 2).max(1))?;
        let cc = self.phantom(&fc.phantom, &coarse)?;
        let fcz = coarse.zeros(SupportTag::ExteriorOnly);
        let srcc = sample(move |_, _| fc.source, &coarse.spec, &coarse.tg, SupportTag::InteriorOnly)?;
        let repc = solvers::solve_forward_diffusion(&coarse, &cc, &fcz, Some(&srcc), None)?;
        let (k_fine, k_coarse) = (rep.energy_constant(), repc.energy_constant());
        let spread = (k_fine / k_coarse).max(k_coarse / k_fine);
        self.le("energy_constant_stable", spread, 2.0, format!("energy constants {k_fine:e} (h) and {k_coarse:e} (2h)"));
        self.le("step_residual", rep.max_rel_residual, 1e-10, "relative residual of the step solves");
        let steps: Vec<usize> = (0..=8).map(|j| j * n / 8).collect();
        let times = lab.tg.times();
        self.write("forward_solution.csv", &field_table(&lab.spec, &times, u, &steps))?;
        let mut t = Table::new(&["node_index", "x", "computed", "torsion"]);
        for i in 0..lab.spec.n_nodes() {
            t.row(vec![i.into(), lab.spec.x[i].into(), u.get(i, n).into(), exact[i].into()]);
        }
        self.write("steady_state.csv", &t)?;
        self.detail("energy_lhs", &rep.energy_lhs);
        self.detail("energy_rhs", &rep.energy_rhs);
        Ok(())
    }

    fn liouville_check(&mut self) -> Result<()> {
        let lc = self.cfg.liouville.clone();
        let set = self.cfg.basis.input_set.clone();
        let tol = self.cfg.tolerances.clone();
        let mut t = Table::new(&["level", "h", "n_t", "discrepancy", "discrepancy_other_sign"]);
        let (mut disc, mut flipped) = (vec![], vec![]);
        for l in 0..lc.levels {
            let h = lc.h / 2f64.powi(l as i32);
            let nt = lc.n_t << l;
            let lab = self.grid_lab(h, nt)?;
            let f = self.datum(&lab, &set)?;
            if l == 0 {
                for (name, v, th) in [("liouville_unit", 1.0, tol.liouville_identity), ("liouville_constant", 4.0, tol.liouville_constant)] {
                    let c = crate::domain::Conductivity::constant(v, &lab.spec, &lab.tg)?;
                    let p = potentials(&lab, &c)?;
                    let r = solvers::verify_liouville(&lab, &c, &p, &f)?;
                    self.le(name, r.discrepancy, th, format!("γ ≡ {v}"));
                }
            }
            let c = self.phantom(&lc.phantom, &lab)?;
            let (d, df) = self.stage(&format!("liouville level {l}"), |_| {
                let p = potentials(&lab, &c)?;
                let d = solvers::verify_liouville(&lab, &c, &p, &f)?.discrepancy;
                // potential with the time-derivative term entering with the opposite sign
                let other = PotentialField { big_q: p.q.axpby(2.0, &p.big_q, -1.0)?, ..p };
                let df = solvers::verify_liouville(&lab, &c, &other, &f)?.discrepancy;
                Ok((d, df))
            })?;
            t.row(vec![l.into(), h.into(), nt.into(), d.into(), df.into()]);
            disc.push(d);
            flipped.push(df);
        }
        let rate = rate_or_floor(&disc, tol.round_off_floor);
        self.ge("liouville_rate", rate, tol.min_rate, format!("observed rates {:?}", observed_rates(&disc)));
        let ratio = flipped.last().unwrap() / disc.last().unwrap();
        self.ge("liouville_other_sign_stalls", ratio, 10.0, "finest-level discrepancy ratio, opposite sign vs used sign");
        self.write("liouville.csv", &t)?;
        Ok(())
    }

    fn dn_consistency(&mut self) -> Result<()> {
        let g = self.cfg.grid.clone();
        let b = self.cfg.basis.clone();
        let tol = self.cfg.tolerances.clone();
        let lab = self.grid_lab(g.h, g.n_t)?;
        let c1 = self.phantom(&self.cfg.conductivity, &lab)?;
        let c2 = self.phantom(&self.cfg.dn.phantom2, &lab)?;
        let fb = ExteriorBasis::tensor(&lab, &b.input_set, b.n_space, b.n_time)?;
        let gb = ExteriorBasis::tensor(&lab, &b.output_set, b.n_space, b.n_time)?;
        let d1 = self.stage("diffusion DN", |_| dn::diffusion_dn(&lab, &c1, &fb, &gb))?;
        let part = &d1.lambda.entries - &d1.n_gamma.entries - &d1.ext_ext.entries;
        self.le("partition", part.abs().max(), tol.partition, "max |Λ - N - ext×ext|");
        let on = self.stage("old/new", |_| dn::check_old_new_equivalence(&lab, &c1, &c2, &fb, &gb))
            .map_err(|e| Error::Config(format!("dn.phantom2 must equal the conductivity on the exterior sets: {e}")))?;
        self.le("old_new", on.entrywise.max((on.lambda_gap - on.n_gap).abs() - on.correction), tol.old_new, "|(Λ1-Λ2) - (N1-N2)| entrywise");
        self.detail("old_new", &on);

        let one = crate::domain::Conductivity::constant(1.0, &lab.spec, &lab.tg)?;
        let p_one = potentials(&lab, &one)?;
        let p1 = potentials(&lab, &c1)?;
        let nq1 = dn::neumann_n_gamma(&lab, &one, &fb, &gb)?;
        let nq2 = dn::dn_n_q(&lab, &one, &p_one, &fb, &gb)?;
        self.le("heat_case", (&nq1.entries - &nq2.entries).abs().max(), 1e-9, "γ ≡ 1: N_Q against N_γ");

        let nq = dn::dn_n_q(&lab, &c1, &p1, &fb, &gb)?;
        let psi: Vec<Field> = (0..gb.len())
            .map(|j| {
                let (a, bb) = (lab.spec.omega.a, lab.spec.omega.b);
                let (m, r) = (0.5 * (a + bb), 0.4 * (bb - a));
                sample(move |x, t| bump((x - m) / r) * (1.0 + t + j as f64), &lab.spec, &lab.tg, SupportTag::InteriorOnly)
            })
            .collect::<Result<_>>()?;
        let ext = dn::dn_n_q_extended(&lab, &c1, &p1, &fb, &gb, &psi)?;
        self.le("extension_invariance", (&nq.entries - &ext.entries).abs().max() / nq.max_abs().max(1e-300), tol.extension, "relative, zero vs interior extension");
        let nqa = dn::dn_n_q_adjoint(&lab, &c1, &p1, &fb, &gb)?;

        let sa1 = dn::check_selfadjoint(&lab, &one, &p_one, &fb, &gb)?;
        self.le("selfadjoint_unit", sa1.residual, tol.selfadjoint, "γ ≡ 1");
        let sa = dn::check_selfadjoint(&lab, &c1, &p1, &fb, &gb)?;
        self.le("selfadjoint_phantom", sa.residual, tol.selfadjoint, "conductivity phantom");

        // refinement of the self-adjointness residual on a small basis
        let mut rt = Table::new(&["level", "h", "n_t", "selfadjoint_residual", "relative"]);
        let mut res = vec![];
        for l in 0..self.cfg.dn.refine_levels {
            let h = 2.0 * g.h / 2f64.powi(l as i32);
            let nt = (g.n_t / 2).max(2) << l;
            let lab_l = self.grid_lab(h, nt)?;
            let c = self.phantom(&self.cfg.conductivity, &lab_l)?;
            let p = potentials(&lab_l, &c)?;
            let f = ExteriorBasis::tensor(&lab_l, &b.input_set, 3, 2)?;
            let gg = ExteriorBasis::tensor(&lab_l, &b.output_set, 3, 2)?;
            let r = dn::check_selfadjoint(&lab_l, &c, &p, &f, &gg)?;
            rt.row(vec![l.into(), h.into(), nt.into(), r.residual.into(), r.relative.into()]);
            res.push(r.relative);
        }
        self.ge("selfadjoint_rate", rate_or_floor(&res, tol.round_off_floor), tol.tau_rate, format!("relative residuals {res:?}"));
        self.write("selfadjoint_refinement.csv", &rt)?;

        let rel = self.stage("relation", |_| dn::check_relation_theorem(&lab, &c1, &c2, &fb, &gb))?;
        self.le("relation", rel.mismatch, tol.relation, format!("warnings: {:?}", rel.warnings));
        self.detail("relation", &rel);

        let gamma = c1.closure.clone().ok_or_else(|| Error::Precondition("conductivity has no closure".into()))?;
        let gslice = move |x: f64| gamma(x, 0.0);
        let (oa, ob) = (lab.spec.omega.a, lab.spec.omega.b);
        let iv = lab.spec.exterior_set(&b.input_set)?.interval;
        let (em, er) = (0.5 * (iv.a + iv.b), 0.5 * iv.len());
        let (om, or) = (0.5 * (oa + ob), 0.4 * (ob - oa));
        let u = move |x: f64| bump((x - om) / (1.3 * or)) + 0.5 * bump((x - em) / er);
        let v_ext = move |x: f64| bump((x - em) / er);
        let v_int = move |x: f64| bump((x - om - 0.1) / (0.8 * or));
        let far = c1.far[0];
        for (name, v) in [("ibp_exterior", &v_ext as &dyn Fn(f64) -> f64), ("ibp_interior", &v_int)] {
            let r = dn::integration_by_parts_check(&lab, &StrongInputs { u: &u, v, gamma: &gslice, far, breakpoints: &c1.breakpoints }, 1e-9)?;
            self.le(name, r.residual, tol.ibp, format!("form {:e}", r.form));
        }

        for (file, m) in [
            ("dn_lambda.csv", &d1.lambda),
            ("dn_n_gamma.csv", &d1.n_gamma),
            ("dn_ext_ext.csv", &d1.ext_ext),
            ("dn_n_q.csv", &nq),
            ("dn_n_q_adjoint.csv", &nqa),
        ] {
            self.write(file, &dn_table(m))?;
        }
        self.detail("gamma_hash", &d1.lambda.gamma_hash);
        self.detail("grid_hash", &d1.lambda.grid_hash);
        Ok(())
    }

    fn exterior_recon(&mut self) -> Result<()> {
        let rc = self.cfg.recon.clone();
        let tol = self.cfg.tolerances.clone();
        let t_final = self.cfg.grid.t_final;
        let lab = self.lab(rc.h, Some(vec![("R".into(), rc.set.0, rc.set.1)]), t_final, self.cfg.grid.n_t)?;
        let fam = inversion::build_concentration_family(&lab, "R", rc.x0, rc.n_max, rc.r0)?;
        let dev = fam.energy_norms.iter().fold(0.0f64, |m, e| m.max((e - 1.0).abs()));
        self.le("unit_norms", dev, 1e-10, "max |φᵀ(A+M)φ - 1|");
        let incr = fam.l2_norms.windows(2).filter(|w| w[1] >= w[0]).count();
        self.le("l2_decreasing", incr as f64, 0.0, "non-decreasing steps of ‖φ_N‖_L2");
        let mut t = Table::new(&["case", "N", "radius", "l2_norm", "estimate", "target", "relative_gap", "fitted_constant"]);
        let cases = [("unit", Phantom::Constant { value: 1.0 }), ("varying", Phantom::TimeSine { amplitude: rc.time_amplitude })];
        for (name, ph) in cases {
            let c = self.phantom(&ph, &lab)?;
            let r = self.stage(&format!("recon {name}"), |_| inversion::exterior_reconstruct(&lab, &c, &fam))?;
            let rel: Vec<f64> = r.gaps.iter().map(|g| g / r.target).collect();
            for n in 0..rel.len() {
                t.row(vec![
                    name.into(),
                    (n + 1).into(),
                    fam.radii[n].into(),
                    fam.l2_norms[n].into(),
                    r.estimates[n].into(),
                    r.target.into(),
                    rel[n].into(),
                    r.fitted_constants[n].into(),
                ]);
            }
            let last = *rel.last().unwrap();
            if name == "unit" {
                self.le("recon_unit_gap", last, tol.recon_constant, "relative gap at N_max");
            } else {
                self.le("recon_varying_gap", last, tol.recon_varying, "relative gap at N_max");
                let tail = &rel[rel.len().saturating_sub(3)..];
                let bad = tail.windows(2).filter(|w| w[1] >= w[0]).count();
                self.le("recon_varying_monotone", bad as f64, 0.0, "non-decreasing steps over the last three N");
            }
            self.detail(&format!("recon_{name}"), &r);
        }
        self.write("exterior_recon.csv", &t)?;
        Ok(())
    }

    fn integral_identity(&mut self) -> Result<()> {
        let ic = self.cfg.identity.clone();
        let b = self.cfg.basis.clone();
        let tol = self.cfg.tolerances.clone();
        let mut t = Table::new(&["level", "h", "n_t", "lhs_max", "residual", "residual_trapezoid"]);
        let (mut res, mut trap) = (vec![], vec![]);
        for l in 0..ic.levels {
            let h = ic.h / 2f64.powi(l as i32);
            let nt = ic.n_t << l;
            let lab = self.grid_lab(h, nt)?;
            let c1 = crate::domain::Conductivity::constant(1.0, &lab.spec, &lab.tg)?;
            let c2 = self.phantom(&ic.phantom2, &lab)?;
            let fb = ExteriorBasis::tensor(&lab, &b.input_set, b.n_space, b.n_time)?;
            let gb = ExteriorBasis::tensor(&lab, &b.output_set, b.n_space, b.n_time)?;
            let (p1, p2) = (potentials(&lab, &c1)?, potentials(&lab, &c2)?);
            if l == 0 {
                let same = inversion::integral_identity_eval(&lab, &c2, &p2, &c2, &p2, &fb, &gb)?;
                let v = same.lhs_max.max(same.rhs.abs().max());
                self.le("identity_equal", v, tol.identity_equal, "γ1 = γ2: both sides");
            }
            let r = self.stage(&format!("identity level {l}"), |_| inversion::integral_identity_eval(&lab, &c1, &p1, &c2, &p2, &fb, &gb))?;
            t.row(vec![l.into(), h.into(), nt.into(), r.lhs_max.into(), r.residual.into(), r.residual_trapezoid.into()]);
            res.push(r.residual);
            trap.push(r.residual_trapezoid);
        }
        self.le("identity_fixed", res.iter().fold(0.0f64, |a, &b| a.max(b)), tol.identity_fixed, "worst level");
        self.ge("identity_rate", rate_or_floor(&res, tol.round_off_floor), tol.tau_rate, format!("residuals {res:?}"));
        self.ge("identity_trapezoid_rate", rate_or_floor(&trap, tol.round_off_floor), tol.tau_rate, format!("trapezoid residuals {trap:?}"));
        self.write("integral_identity.csv", &t)?;
        Ok(())
    }

    fn runge(&mut self) -> Result<()> {
        let rc = self.cfg.runge.clone();
        let g = self.cfg.grid.clone();
        let tol = self.cfg.tolerances.clone();
        let lab = self.grid_lab(g.h, g.n_t)?;
        let c = self.phantom(&self.cfg.conductivity, &lab)?;
        let pot = potentials(&lab, &c)?;
        let controls = ExteriorBasis::tensor(&lab, &self.cfg.basis.input_set, rc.n_space, rc.n_time)?;
        let (fwd, adj) = self.stage("runge responses", |_| {
            Ok((
                inversion::RungeSystem::new(&lab, &c, &pot, &controls, false)?,
                inversion::RungeSystem::new(&lab, &c, &pot, &controls, true)?,
            ))
        })?;
        let zero = lab.zeros(SupportTag::InteriorOnly);
        let z = fwd.solve(&fwd.target_vector(&lab, &zero), rc.sizes[0], rc.eps)?;
        self.le("runge_zero", z.residual, tol.round_off_floor, "φ = 0");

        // in-range target from a seeded combination of the first controls
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed.wrapping_add(1));
        let n0 = rc.sizes[0];
        let coef: Vec<f64> = (0..n0).map(|_| rng.random_range(-1.0..1.0)).collect();
        let col = fwd.matrix.columns(0, n0) * nalgebra::DVector::from_vec(coef);
        let inr = fwd.solve(&col, n0, 0.0)?;
        self.le("runge_in_range", inr.residual, tol.runge_in_range, "target in the span, ε = 0");

        let (oa, ob) = (lab.spec.omega.a, lab.spec.omega.b);
        let bumps: Vec<(f64, f64, f64)> = (0..rc.target_bumps)
            .map(|_| {
                let w = rng.random_range(0.2..0.45) * (ob - oa);
                let cen = rng.random_range(oa + w..ob - w);
                (cen, w, rng.random_range(-1.0..1.0))
            })
            .collect();
        let t_final = lab.tg.t_final;
        let phi = sample(
            move |x, t| bumps.iter().map(|(cen, w, a)| a * bump((x - cen) / w)).sum::<f64>() * (std::f64::consts::PI * t / t_final).sin(),
            &lab.spec,
            &lab.tg,
            SupportTag::InteriorOnly,
        )?;
        let bf = fwd.target_vector(&lab, &phi);
        let ba = adj.target_vector(&lab, &phi);
        let mut t = Table::new(&["n_controls", "residual", "condition", "residual_adjoint", "condition_adjoint"]);
        let mut res = vec![];
        for &n in &rc.sizes {
            let r = fwd.solve(&bf, n, rc.eps)?;
            let ra = adj.solve(&ba, n, rc.eps)?;
            t.row(vec![n.into(), r.residual.into(), r.condition.into(), ra.residual.into(), ra.condition.into()]);
            res.push(r.residual);
        }
        let worst = res.windows(2).map(|w| w[1] / w[0]).fold(0.0f64, f64::max);
        self.le("runge_decreasing", worst, 1.0 - 1e-12, format!("residuals {res:?}"));
        self.write("runge.csv", &t)?;
        Ok(())
    }

    fn interior_recovery(&mut self) -> Result<()> {
        let rc = self.cfg.recovery.clone();
        let b = self.cfg.basis.clone();
        let tol = self.cfg.tolerances.clone();
        let truth_ph = self.cfg.conductivity.clone();
        if !truth_ph.time_independent() {
            return Err(Error::Config("interior recovery needs a time-independent conductivity".into()));
        }
        let t_final = self.cfg.grid.t_final;
        let sets = vec![("In".to_string(), rc.set_in.0, rc.set_in.1), ("Out".to_string(), rc.set_out.0, rc.set_out.1)];
        let lab = self.lab(rc.h, Some(sets.clone()), t_final, rc.n_t)?;
        let fine = self.lab(rc.h / 2.0, Some(sets), t_final, rc.n_t)?;
        let model = SplineModel::uniform((lab.spec.omega.a, lab.spec.omega.b), rc.knots);
        let setup = |l: &Lab| -> Result<(ExteriorBasis, ExteriorBasis)> {
            Ok((ExteriorBasis::tensor(l, "In", b.n_space, b.n_time)?, ExteriorBasis::tensor(l, "Out", b.n_space, b.n_time)?))
        };
        let (fi, go) = setup(&lab)?;
        let dm = DataModel::new(&lab, model.clone(), &fi, &[&go])?;
        let p0 = vec![0.0; model.dim()];
        let truth_fn = truth_ph.closure(t_final);
        let truth = move |x: f64| truth_fn(x, 0.0);
        let obs_of = |dm: &DataModel, l: &Lab, ph: &Phantom| -> Result<nalgebra::DMatrix<f64>> {
            let c = ph.conductivity(&l.spec, &l.tg, self.cfg.grid.gamma0)?;
            Ok(dm.evaluate_conductivity(&c, &p0)?.data)
        };
        let lm = |lambda: f64| LmOptions { lambda, max_iter: rc.max_iter, ..Default::default() };

        let obs_one = obs_of(&dm, &lab, &Phantom::Constant { value: 1.0 })?;
        let triv = inversion::interior_gauss_newton(&dm, &obs_one, &p0, &lm(rc.lambda))?;
        self.le("recovery_trivial", triv.iterations as f64, 0.0, "γ ≡ 1 data from γ ≡ 1");

        let obs = self.stage("data", |_| obs_of(&dm, &lab, &truth_ph))?;
        let obs_b = obs_of(&dm, &lab, &rc.second_phantom)?;
        let mut gt = Table::new(&["phantom", "direction", "relative_error"]);
        let probe = vec![0.05; model.dim()];
        for (tag, o, seed) in [("a", &obs, 2u64), ("b", &obs_b, 3u64)] {
            let chk = inversion::gradient_check(&dm, &probe, o, rc.fd_directions, self.cfg.seed.wrapping_add(seed), rc.fd_step)?;
            for (d, e) in chk.relative_errors.iter().enumerate() {
                gt.row(vec![tag.into(), d.into(), (*e).into()]);
            }
            self.le(&format!("gradient_fd_{tag}"), chk.max_relative_error, tol.gradient, "adjoint vs central differences");
        }
        self.write("gradient_check.csv", &gt)?;

        let mut hist = Table::new(&["tier", "iteration", "objective"]);
        let mut knots = Table::new(&["tier", "x", "true_gamma", "recovered_gamma"]);
        let mut record = |tier: &str, r: &inversion::RecoveryResult| {
            for (i, v) in r.misfit_history.iter().enumerate() {
                hist.row(vec![tier.into(), i.into(), (*v).into()]);
            }
            for (x, g) in r.knots.iter().zip(&r.gamma_knots) {
                knots.row(vec![tier.into(), (*x).into(), truth(*x).into(), (*g).into()]);
            }
        };

        let crime = self.stage("recovery crime", |_| inversion::interior_gauss_newton(&dm, &obs, &p0, &lm(rc.lambda)))?;
        let e_crime = inversion::recovery_error(&model, &crime.params, &truth);
        self.le("recovery_crime", e_crime.relative, tol.recovery_crime, format!("contrast-relative {:e}", e_crime.contrast_relative));
        let bad = crime.misfit_history.windows(2).filter(|w| w[1] > w[0]).count();
        self.le("misfit_monotone", bad as f64, 0.0, "increasing accepted steps");
        record("crime", &crime);

        let (ff, gf) = setup(&fine)?;
        let dmf = DataModel::new(&fine, model.clone(), &ff, &[&gf])?;
        let obs_f = self.stage("fine data", |_| obs_of(&dmf, &fine, &truth_ph))?;
        let honest = self.stage("recovery honest", |_| inversion::interior_gauss_newton(&dm, &obs_f, &p0, &lm(rc.lambda_honest)))?;
        let e_honest = inversion::recovery_error(&model, &honest.params, &truth);
        self.le("recovery_honest", e_honest.relative, tol.recovery_honest, format!("contrast-relative {:e}", e_honest.contrast_relative));
        record("honest", &honest);

        let (noisy, sigma) = inversion::add_noise(&obs, rc.noise_level, self.cfg.seed);
        let dp = self.stage("recovery noise", |_| {
            inversion::discrepancy_principle(&dm, &noisy, sigma, &p0, &rc.lambda_grid, rc.discrepancy_safety, &lm(rc.lambda))
        })?;
        let e_noise = inversion::recovery_error(&model, &dp.chosen.params, &truth);
        self.le("recovery_noise", e_noise.relative, tol.recovery_noise, format!("λ = {:e}, contrast-relative {:e}", dp.chosen.lambda, e_noise.contrast_relative));
        record("noise", &dp.chosen);

        let sep = (&obs - &obs_b).norm() / obs.norm();
        let solver_tol = 1e-12_f64;
        self.ge("distinct_data", sep / solver_tol, 10.0, "relative data separation of two phantoms over solver tolerance");

        self.write("recovery_history.csv", &hist)?;
        self.write("recovery_knots.csv", &knots)?;
        let e0 = inversion::recovery_error(&model, &p0, &truth);
        self.detail("initial_error", e0);
        self.detail("errors", serde_json::json!({ "crime": e_crime, "honest": e_honest, "noise": e_noise }));
        self.detail("crime", &crime);
        self.detail("honest", &honest);
        self.detail("noise", &dp);
        Ok(())
    }
}

/// Runs one scenario (or the full suite) into `out`, writing `manifest.json`.
pub fn run_scenario(cfg: &ExperimentConfig, out: &Path, cache: &MatrixCache, jobs: usize) -> Result<RunManifest> {
    std::fs::create_dir_all(out)?;
    solvers::set_jobs(jobs);
    if cfg.scenario == "full-suite" {
        return run_suite(cfg, out, cache, jobs);
    }
    let mut r = Runner::new(cfg, out, cache.clone());
    let res = r.run();
    let m = &mut r.manifest;
    if let Err(e) = &res {
        m.error = Some(e.to_string());
    } else {
        let got: Vec<&str> = m.assertions.iter().map(|a| a.name.as_str()).collect();
        let want = declared_assertions(&cfg.scenario);
        if got != want {
            m.error = Some(format!("verdicts {got:?} differ from declared {want:?}"));
        }
    }
    m.all_pass = m.error.is_none() && m.assertions.iter().all(|a| a.pass);
    m.write(out)?;
    match res {
        Err(e) => Err(e),
        Ok(()) => Ok(r.manifest),
    }
}

fn run_suite(cfg: &ExperimentConfig, out: &Path, cache: &MatrixCache, jobs: usize) -> Result<RunManifest> {
    let names: Vec<&str> = SCENARIOS.iter().copied().filter(|s| *s != "full-suite").collect();
    let results: Vec<Result<RunManifest>> = names
        .iter()
        .map(|name| run_scenario(&ExperimentConfig { scenario: (*name).into(), ..cfg.clone() }, &out.join(name), cache, jobs))
        .collect();
    let mut m = RunManifest {
        scenario: "full-suite".into(),
        software_version: env!("CARGO_PKG_VERSION").into(),
        seed: cfg.seed,
        config: serde_json::to_value(cfg).unwrap_or_default(),
        ..Default::default()
    };
    let mut errors = vec![];
    for (name, r) in names.iter().zip(results) {
        m.sub_runs.push(format!("{name}/manifest.json"));
        match r {
            Ok(sub) => {
                for mut a in sub.assertions {
                    a.name = format!("{name}/{}", a.name);
                    m.assertions.push(a);
                }
                m.stages.extend(sub.stages.into_iter().map(|s| Stage { name: format!("{name}/{}", s.name), ..s }));
                for c in sub.cache {
                    if !m.cache.iter().any(|x| x.key == c.key) {
                        m.cache.push(c);
                    }
                }
                m.outputs.extend(sub.outputs.into_iter().map(|o| format!("{name}/{o}")));
            }
            Err(e) => errors.push(format!("{name}: {e}")),
        }
    }
    if !errors.is_empty() {
        m.error = Some(errors.join("; "));
    }
    m.all_pass = m.error.is_none() && m.assertions.iter().all(|a| a.pass);
    m.write(out)?;
    if let Some(e) = &m.error {
        return Err(Error::Precondition(e.clone()));
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rates_and_floor() {
        let r = observed_rates(&[4.0, 2.0, 0.5]);
        assert_eq!(r, vec![1.0, 2.0]);
        assert_eq!(rate_or_floor(&[4.0, 2.0, 0.5], 1e-12), 1.0);
        assert_eq!(rate_or_floor(&[1e-15, 3e-15], 1e-12), f64::INFINITY);
        assert!(rate_or_floor(&[1e-3, 1e-15], 1e-12) > 30.0);
    }

    #[test]
    fn every_scenario_declares_verdicts() {
        for s in SCENARIOS.iter().filter(|s| **s != "full-suite") {
            assert!(!declared_assertions(s).is_empty(), "{s}");
        }
    }

    #[test]
    fn runge_manifest_is_complete_and_cached() {
        let tmp = tempfile::tempdir().unwrap();
        let cache = MatrixCache::at(tmp.path().join("c"));
        let cfg = ExperimentConfig::parse("scenario = \"runge\"\n[grid]\nh = 0.05\nn_t = 10\n[runge]\nsizes = [4, 8, 16]\nn_space = 4\nn_time = 4\n").unwrap();
        let m = run_scenario(&cfg, &tmp.path().join("o"), &cache, 1).unwrap();
        let names: Vec<&str> = m.assertions.iter().map(|a| a.name.as_str()).collect();
        assert_eq!(names, declared_assertions("runge"));
        assert!(m.error.is_none());
        assert!(tmp.path().join("o/runge.csv").exists());
        let m2 = run_scenario(&cfg, &tmp.path().join("o2"), &cache, 1).unwrap();
        assert!(m2.cache.iter().all(|c| matches!(c.event, super::super::cache::CacheEvent::Hit)));
        assert_eq!(std::fs::read(tmp.path().join("o/runge.csv")).unwrap(), std::fs::read(tmp.path().join("o2/runge.csv")).unwrap());
    }
}

//! Determination procedures: exterior reconstruction by concentration, the integral
//! identity, exterior control of interior states, and interior recovery of a
//! time-independent conductivity from sampled exterior data.

use crate::dn::{adjoint_solutions, bump, reduced_solutions, time_pairing, ExteriorBasis};
use crate::domain::{restrict, Conductivity, Field, NodeClass, SupportTag};
use crate::error::{Error, Result};
use crate::kernel::{PotentialField, Weight};
use crate::solvers::{run_batch, DataSet, DiffusionOps, Lab, Mode, ReducedOps, StepOps};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;
use std::sync::Arc;

fn require_implicit_euler(lab: &Lab, what: &str) -> Result<()> {
    if lab.tg.theta != 1.0 {
        return Err(Error::Precondition(format!("{what} is implemented for θ = 1")));
    }
    Ok(())
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |a, v| a.max(v.abs()))
}

// ---------------------------------------------------------------- concentration

/// Shrinking unit-energy bumps `φ_N` around `x0` and a temporal window `η`.
#[derive(Debug, Clone, Serialize)]
pub struct ConcentrationFamily {
    pub set: String,
    pub x0: f64,
    pub radii: Vec<f64>,
    /// Nodal values per `N`.
    #[serde(skip)]
    pub profiles: Vec<Vec<f64>>,
    /// Discrete `φᵀ (A + M) φ`, one after normalization.
    pub energy_norms: Vec<f64>,
    pub l2_norms: Vec<f64>,
    #[serde(skip)]
    pub eta: Vec<f64>,
    /// `τ Σ c_k η²(t_k)`
    pub eta_sq_sum: f64,
}

/// Smooth window on `(0.2 T, 0.8 T)`.
pub fn default_window(t: f64, t_final: f64) -> f64 {
    bump((t - 0.5 * t_final) / (0.3 * t_final))
}

pub fn build_concentration_family(lab: &Lab, set: &str, x0: f64, n_max: usize, r0: f64) -> Result<ConcentrationFamily> {
    let es = lab.spec.exterior_set(set)?;
    let iv = es.interval;
    let r1 = r0 / 2.0;
    if !(x0 - r1 >= iv.a && x0 + r1 <= iv.b) {
        return Err(Error::Precondition(format!("x0 = {x0} needs margin {r1} inside {set}")));
    }
    let h = lab.spec.h;
    let nd = lab.spec.n_dof();
    let e = &lab.st.a_full + &lab.st.m;
    let mut fam = ConcentrationFamily {
        set: set.into(),
        x0,
        radii: vec![],
        profiles: vec![],
        energy_norms: vec![],
        l2_norms: vec![],
        eta: lab.tg.times().iter().map(|&t| default_window(t, lab.tg.t_final)).collect(),
        eta_sq_sum: 0.0,
    };
    for n in 1..=n_max {
        let r = r0 * 0.5f64.powi(n as i32);
        if r < 2.0 * h {
            return Err(Error::Precondition(format!("radius {r:e} at N = {n} is below two grid cells")));
        }
        let mut phi: Vec<f64> = lab.spec.x.iter().map(|&x| bump((x - x0) / r)).collect();
        for (i, v) in phi.iter_mut().enumerate() {
            if lab.spec.class[i] != NodeClass::Exterior {
                *v = 0.0;
            }
        }
        let dv = DVector::from_iterator(nd, phi[1..=nd].iter().copied());
        let norm = dv.dot(&(&e * &dv)).sqrt();
        phi.iter_mut().for_each(|v| *v /= norm);
        let dv = dv / norm;
        fam.energy_norms.push(dv.dot(&(&e * &dv)));
        fam.l2_norms.push(dv.dot(&(&lab.st.m * &dv)).sqrt());
        fam.radii.push(r);
        fam.profiles.push(phi);
    }
    let w = lab.pairing_weights();
    fam.eta_sq_sum = lab.tg.tau() * fam.eta.iter().zip(&w).map(|(e, c)| c * e * e).sum::<f64>();
    Ok(fam)
}

impl ConcentrationFamily {
    /// `Φ_N = η(t) φ_N(x)`
    pub fn field(&self, lab: &Lab, n: usize) -> Field {
        let mut f = lab.zeros(SupportTag::ExteriorOnly);
        for k in 0..f.n_times {
            for (i, &p) in self.profiles[n].iter().enumerate() {
                f.set(i, k, self.eta[k] * p);
            }
        }
        f
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ExteriorRecon {
    pub estimates: Vec<f64>,
    pub target: f64,
    pub gaps: Vec<f64>,
    /// `τ Σ c_k (u_N - Φ_N)_kᵀ K Φ_{N,k}`
    pub remainders: Vec<f64>,
    /// `|remainder| / ‖Φ_N‖_{L²(L²)}`
    pub fitted_constants: Vec<f64>,
}

fn gamma_at(c: &Conductivity, lab: &Lab, x0: f64, k: usize) -> f64 {
    let h = lab.spec.h;
    let p = (x0 + lab.spec.l) / h;
    let i = (p.floor() as usize).min(lab.spec.n_el - 1);
    let t = p - i as f64;
    (1.0 - t) * c.gamma.get(i, k) + t * c.gamma.get(i + 1, k)
}

/// `⟨Λ_γ Φ_N, Φ_N⟩` for every `N` against `τ Σ c_k η²(t_k) γ(x0, t_k)`.
pub fn exterior_reconstruct(lab: &Lab, c: &Conductivity, fam: &ConcentrationFamily) -> Result<ExteriorRecon> {
    let ops = DiffusionOps::new(lab, c)?;
    let fields: Vec<Field> = (0..fam.profiles.len()).map(|n| fam.field(lab, n)).collect();
    let sets: Vec<DataSet> = fields.iter().map(DataSet::exterior).collect();
    let us = run_batch(lab, &ops, Mode::Conservative, &sets)?.solutions;
    let w = lab.pairing_weights();
    let tau = lab.tg.tau();
    let target = tau * (0..lab.tg.n_times()).map(|k| w[k] * fam.eta[k] * fam.eta[k] * gamma_at(c, lab, fam.x0, k)).sum::<f64>();
    let mut out = ExteriorRecon { estimates: vec![], target, gaps: vec![], remainders: vec![], fitted_constants: vec![] };
    for (n, (u, phi)) in us.iter().zip(&fields).enumerate() {
        let est = time_pairing(lab, std::slice::from_ref(u), std::slice::from_ref(phi), &w, |k| ops.s(k))?[(0, 0)];
        let diff = u.axpby(1.0, phi, -1.0)?;
        let rem = time_pairing(lab, std::slice::from_ref(&diff), std::slice::from_ref(phi), &w, |k| ops.s(k))?[(0, 0)];
        let l2 = fam.l2_norms[n] * fam.eta_sq_sum.sqrt();
        out.estimates.push(est);
        out.gaps.push((est - target).abs());
        out.remainders.push(rem);
        out.fitted_constants.push(rem.abs() / l2);
    }
    Ok(out)
}

// ---------------------------------------------------------------- integral identity

#[derive(Debug, Clone, Serialize)]
pub struct IdentityRecord {
    #[serde(skip)]
    pub lhs: DMatrix<f64>,
    #[serde(skip)]
    pub rhs: DMatrix<f64>,
    #[serde(skip)]
    pub rhs_trapezoid: DMatrix<f64>,
    pub lhs_max: f64,
    /// `max |lhs - rhs| / (max |lhs| + max |rhs| + ε)` with the scheme's summation-by-parts sums.
    pub residual: f64,
    /// Same with trapezoid sums and centered differences in time.
    pub residual_trapezoid: f64,
}

/// `⟨(N_{Q1} - N_{Q2}) f, g⟩` against
/// `∫ (γ₂⁻¹ - γ₁⁻¹) v_f ∂_t v_g + ∫ (Q₁ - Q₂) v_g v_f` over `Ω_T`,
/// with `v_f` forward for `γ₁` and `v_g` backward for `γ₂`.
pub fn integral_identity_eval(
    lab: &Lab,
    c1: &Conductivity,
    p1: &PotentialField,
    c2: &Conductivity,
    p2: &PotentialField,
    fb: &ExteriorBasis,
    gb: &ExteriorBasis,
) -> Result<IdentityRecord> {
    require_implicit_euler(lab, "the integral identity")?;
    if !gb.vanishes_at_final_time() {
        return Err(Error::Precondition("adjoint data must vanish at t = T".into()));
    }
    let o1 = ReducedOps::new(lab, c1, p1)?;
    let o2 = ReducedOps::new(lab, c2, p2)?;
    let am = Arc::new(lab.st.a.masked.clone());
    let w = lab.pairing_weights();
    let (v1, _) = reduced_solutions(lab, &o1, fb)?;
    let (v2, _) = reduced_solutions(lab, &o2, fb)?;
    let n1 = time_pairing(lab, &v1, &gb.fields, &w, |_| Ok(am.clone()))?;
    let n2 = time_pairing(lab, &v2, &gb.fields, &w, |_| Ok(am.clone()))?;
    let lhs = n1 - n2;
    let (ys, _) = adjoint_solutions(lab, &o2, gb)?;

    let nd = lab.spec.n_dof();
    let n = lab.tg.n_t;
    let tau = lab.tg.tau();
    let block = |fs: &[Field], k: usize| {
        let mut m = DMatrix::zeros(nd, fs.len());
        for (j, f) in fs.iter().enumerate() {
            m.set_column(j, &f.dofs(k));
        }
        m
    };
    let mut rhs = DMatrix::zeros(fb.len(), gb.len());
    let mut trap = DMatrix::zeros(fb.len(), gb.len());
    for k in 0..=n {
        let (pa, _, qa) = o1.mats(k);
        let (pb, _, qb) = o2.mats(k);
        let dp = &**pb - &**pa;
        let dq = &**qa - &**qb;
        let v = block(&v1, k);
        let y = block(&ys, k);
        if (1..n).contains(&k) {
            let dy = block(&ys, k + 1) - &y;
            rhs += v.transpose() * (&dp * dy) + (v.transpose() * (&dq * &y)) * tau;
        }
        // trapezoid rule with a centered (one-sided at the ends) derivative
        let dydt = if k == 0 {
            (block(&ys, 1) - &y) / tau
        } else if k == n {
            (&y - block(&ys, n - 1)) / tau
        } else {
            (block(&ys, k + 1) - block(&ys, k - 1)) / (2.0 * tau)
        };
        let wk = if k == 0 || k == n { 0.5 } else { 1.0 };
        trap += (v.transpose() * (&dp * dydt) + v.transpose() * (&dq * &y)) * (tau * wk);
    }
    // block version of |lhs - rhs| / (|lhs| + |rhs| + ε)
    let rel = |a: &DMatrix<f64>, b: &DMatrix<f64>| max_abs(&(a - b)) / (max_abs(a) + max_abs(b) + 1e-300);
    Ok(IdentityRecord {
        lhs_max: max_abs(&lhs),
        residual: rel(&lhs, &rhs),
        residual_trapezoid: rel(&lhs, &trap),
        lhs,
        rhs,
        rhs_trapezoid: trap,
    })
}

// ---------------------------------------------------------------- exterior control

#[derive(Debug, Clone, Serialize)]
pub struct RungeResult {
    pub coefficients: Vec<f64>,
    /// `‖v_f - f - φ‖ / ‖φ‖` in `L²(0,T;L²(Ω))` (absolute when `φ = 0`).
    pub residual: f64,
    pub condition: f64,
    pub ill_conditioned: bool,
}

/// Interior responses `(v_f - f)|_Ω` of the control basis, weighted so the
/// Euclidean norm is the discrete `L²(0,T;L²(Ω))` norm.
pub struct RungeSystem {
    pub matrix: DMatrix<f64>,
    /// `L` with `LLᵀ` the `L²(0,T;L²)` Gram matrix of the controls.
    pub control_gram_chol: DMatrix<f64>,
    pub factor: DMatrix<f64>,
    idx: Vec<usize>,
    weights: Vec<f64>,
}

impl RungeSystem {
    pub fn new(lab: &Lab, c: &Conductivity, pot: &PotentialField, controls: &ExteriorBasis, adjoint: bool) -> Result<Self> {
        let ops = ReducedOps::new(lab, c, pot)?;
        let (vs, _) = if adjoint { adjoint_solutions(lab, &ops, controls)? } else { reduced_solutions(lab, &ops, controls)? };
        let idx = lab.spec.interior_dofs();
        let m_ii = restrict(&lab.st.m, &idx);
        let factor = m_ii.cholesky().ok_or_else(|| Error::Precondition("interior mass not SPD".into()))?.l().transpose();
        let w = lab.pairing_weights();
        let tau = lab.tg.tau();
        let ni = idx.len();
        let rows = ni * w.len();
        let mut matrix = DMatrix::zeros(rows, vs.len());
        for (j, v) in vs.iter().enumerate() {
            for (k, &wk) in w.iter().enumerate() {
                let z = DVector::from_iterator(ni, idx.iter().map(|&d| v.get(d + 1, k)));
                let y = &factor * z * (tau * wk).sqrt();
                matrix.view_mut((k * ni, j), (ni, 1)).copy_from(&y);
            }
        }
        // L² Gram of the controls themselves over the box
        let nc = controls.len();
        let mut gram = DMatrix::zeros(nc, nc);
        for k in 0..w.len() {
            let mut b = DMatrix::zeros(lab.spec.n_dof(), nc);
            for (j, f) in controls.fields.iter().enumerate() {
                b.set_column(j, &f.dofs(k));
            }
            gram += b.transpose() * (&lab.st.m * &b) * (tau * w[k]);
        }
        let eig_floor = 1e-14 * gram.diagonal().max().max(1e-300);
        for i in 0..nc {
            gram[(i, i)] += eig_floor;
        }
        let control_gram_chol = gram.cholesky().ok_or_else(|| Error::Precondition("control Gram not SPD".into()))?.l();
        Ok(Self { matrix, control_gram_chol, factor, idx, weights: w })
    }

    /// Weighted interior samples of `φ`.
    pub fn target_vector(&self, lab: &Lab, phi: &Field) -> DVector<f64> {
        let ni = self.idx.len();
        let tau = lab.tg.tau();
        let mut out = DVector::zeros(ni * self.weights.len());
        for (k, &wk) in self.weights.iter().enumerate() {
            let z = DVector::from_iterator(ni, self.idx.iter().map(|&d| phi.get(d + 1, k)));
            out.rows_mut(k * ni, ni).copy_from(&(&self.factor * z * (tau * wk).sqrt()));
        }
        out
    }

    /// Least squares on the first `n` columns with penalty `ε ‖f‖²_{L²(L²)}`.
    pub fn solve(&self, b: &DVector<f64>, n: usize, eps: f64) -> Result<RungeResult> {
        let a = self.matrix.columns(0, n).into_owned();
        let mut aug = a.clone();
        if eps > 0.0 {
            let l = self.control_gram_chol.view((0, 0), (n, n)).transpose() * eps.sqrt();
            aug = DMatrix::from_fn(a.nrows() + n, n, |i, j| if i < a.nrows() { a[(i, j)] } else { l[(i - a.nrows(), j)] });
        }
        let mut rhs = DVector::zeros(aug.nrows());
        rhs.rows_mut(0, b.len()).copy_from(b);
        let svd = aug.svd(true, true);
        let sv = &svd.singular_values;
        let smax = sv.max();
        let smin = sv.min();
        let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
        let coef = svd.solve(&rhs, 1e-14 * smax).map_err(|e| Error::Precondition(e.into()))?;
        let r = &a * &coef - b;
        let bn = b.norm();
        Ok(RungeResult {
            coefficients: coef.iter().copied().collect(),
            residual: if bn > 0.0 { r.norm() / bn } else { r.norm() },
            condition,
            ill_conditioned: condition > 1e12,
        })
    }
}

/// Best approximation of the interior-only `φ` by `v_f - f` over the span of `controls`.
pub fn runge_control(
    lab: &Lab,
    c: &Conductivity,
    pot: &PotentialField,
    phi: &Field,
    controls: &ExteriorBasis,
    eps: f64,
) -> Result<RungeResult> {
    if phi.tag != SupportTag::InteriorOnly {
        return Err(Error::Precondition("Runge target must be interior-only".into()));
    }
    let sys = RungeSystem::new(lab, c, pot, controls, false)?;
    sys.solve(&sys.target_vector(lab, phi), controls.len(), eps)
}

// ---------------------------------------------------------------- spline parameterization

/// `γ = 1 + S(x)` with `S` the clamped cubic spline through `(c_l, p_l)` on Ω and
/// `S = S' = 0` at both ends of Ω; `γ = 1` outside Ω.
#[derive(Debug, Clone)]
pub struct SplineModel {
    pub omega: (f64, f64),
    /// All knots including both ends of Ω.
    pub knots: Vec<f64>,
    /// Maps knot values to knot slopes.
    slope_map: DMatrix<f64>,
    pub gamma0: f64,
}

impl SplineModel {
    /// `n` interior knots, equally spaced.
    pub fn uniform(omega: (f64, f64), n: usize) -> Self {
        let m = n + 1;
        let hk = (omega.1 - omega.0) / m as f64;
        let knots: Vec<f64> = (0..=m).map(|l| omega.0 + l as f64 * hk).collect();
        // m_{l-1} + 4 m_l + m_{l+1} = 3 (y_{l+1} - y_{l-1}) / h with m_0 = m_m = 0
        let mut t = DMatrix::zeros(m + 1, m + 1);
        let mut r = DMatrix::zeros(m + 1, m + 1);
        t[(0, 0)] = 1.0;
        t[(m, m)] = 1.0;
        for l in 1..m {
            t[(l, l - 1)] = 1.0;
            t[(l, l)] = 4.0;
            t[(l, l + 1)] = 1.0;
            r[(l, l + 1)] = 3.0 / hk;
            r[(l, l - 1)] = -3.0 / hk;
        }
        let slope_map = t.lu().solve(&r).expect("tridiagonal system is diagonally dominant");
        Self { omega, knots, slope_map, gamma0: 0.2 }
    }

    pub fn dim(&self) -> usize {
        self.knots.len() - 2
    }

    fn full_values(&self, p: &[f64]) -> DVector<f64> {
        let mut y = DVector::zeros(self.knots.len());
        y.rows_mut(1, p.len()).copy_from_slice(p);
        y
    }

    /// `S(x)` for values `p` at the interior knots.
    pub fn eval(&self, p: &[f64], x: f64) -> f64 {
        let y = self.full_values(p);
        let m = &self.slope_map * &y;
        self.hermite(&y, &m, x)
    }

    fn hermite(&self, y: &DVector<f64>, m: &DVector<f64>, x: f64) -> f64 {
        let (a, b) = self.omega;
        if x <= a || x >= b {
            return 0.0;
        }
        let n = self.knots.len() - 1;
        let hk = (b - a) / n as f64;
        let i = (((x - a) / hk).floor() as usize).min(n - 1);
        let t = (x - self.knots[i]) / hk;
        let t2 = t * t;
        let t3 = t2 * t;
        (2.0 * t3 - 3.0 * t2 + 1.0) * y[i] + (t3 - 2.0 * t2 + t) * hk * m[i] + (-2.0 * t3 + 3.0 * t2) * y[i + 1] + (t3 - t2) * hk * m[i + 1]
    }

    /// Cardinal function of interior knot `l` at `x`.
    pub fn basis(&self, l: usize, x: f64) -> f64 {
        let mut e = vec![0.0; self.dim()];
        e[l] = 1.0;
        self.eval(&e, x)
    }

    pub fn conductivity(&self, lab: &Lab, p: &[f64]) -> Result<Conductivity> {
        let me = self.clone();
        let p = p.to_vec();
        let bp = vec![self.omega.0, self.omega.1];
        Ok(Conductivity::from_fn(move |x, _| 1.0 + me.eval(&p, x), None, &lab.spec, &lab.tg, self.gamma0)?.with_breakpoints(bp))
    }
}

// ---------------------------------------------------------------- forward model

/// Diffusion data `D_ij = τ Σ c_k u_{f_i,k}ᵀ K_γ g_{j,k}` for a time-independent γ from a spline.
pub struct DataModel<'a> {
    pub lab: &'a Lab,
    pub model: SplineModel,
    pub inputs: Vec<Field>,
    pub outputs: Vec<Field>,
    idx: Vec<usize>,
    lu: std::sync::Mutex<Option<(Vec<f64>, Arc<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>>)>>,
}

/// States and matrices at one parameter vector.
pub struct Evaluation {
    pub p: Vec<f64>,
    pub data: DMatrix<f64>,
    pub states: Vec<Field>,
    pub k: DMatrix<f64>,
    pub w: Vec<f64>,
}

impl<'a> DataModel<'a> {
    pub fn new(lab: &'a Lab, model: SplineModel, inputs: &ExteriorBasis, outputs: &[&ExteriorBasis]) -> Result<Self> {
        require_implicit_euler(lab, "interior recovery")?;
        let outs = outputs.iter().flat_map(|b| b.fields.iter().cloned()).collect();
        Ok(Self { lab, model, inputs: inputs.fields.clone(), outputs: outs, idx: lab.spec.interior_dofs(), lu: Default::default() })
    }

    pub fn n_entries(&self) -> usize {
        self.inputs.len() * self.outputs.len()
    }

    pub fn evaluate(&self, p: &[f64]) -> Result<Evaluation> {
        let c = self.model.conductivity(self.lab, p)?;
        self.evaluate_conductivity(&c, p)
    }

    /// Data for any conductivity (e.g. a phantom outside the spline space).
    pub fn evaluate_conductivity(&self, c: &Conductivity, p: &[f64]) -> Result<Evaluation> {
        if !c.time_independent {
            return Err(Error::Precondition("recovery uses a time-independent conductivity".into()));
        }
        let ops = DiffusionOps::new(self.lab, c)?;
        let sets: Vec<DataSet> = self.inputs.iter().map(DataSet::exterior).collect();
        let states = run_batch(self.lab, &ops, Mode::Conservative, &sets)?.solutions;
        let k = (*ops.s(0)?).clone();
        let w = self.lab.pairing_weights();
        let karc = Arc::new(k.clone());
        let data = time_pairing(self.lab, &states, &self.outputs, &w, |_| Ok(karc.clone()))?;
        Ok(Evaluation { p: p.to_vec(), data, states, k, w })
    }

    fn step_lu(&self, ev: &Evaluation) -> Arc<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>> {
        let mut g = self.lu.lock().unwrap();
        if let Some((p, lu)) = g.as_ref() {
            if *p == ev.p {
                return lu.clone();
            }
        }
        let tau = self.lab.tg.tau();
        let e = restrict(&self.lab.st.m, &self.idx) / tau + restrict(&ev.k, &self.idx);
        let lu = Arc::new(e.lu());
        *g = Some((ev.p.clone(), lu.clone()));
        lu
    }

    /// `∂K / ∂p_l` at the nodal weights of `ev`.
    pub fn dk(&self, ev: &Evaluation, l: usize) -> DMatrix<f64> {
        let spec = &self.lab.spec;
        let w: Vec<f64> = spec.x.iter().map(|&x| (1.0 + self.model.eval(&ev.p, x)).sqrt()).collect();
        let dw: Vec<f64> = spec.x.iter().zip(&w).map(|(&x, wi)| self.model.basis(l, x) / (2.0 * wi)).collect();
        self.lab.asm.bilinear(&Weight { nodal: &dw, far: 0.0 }, &Weight { nodal: &w, far: 1.0 }).full() * 2.0
    }

    fn block(&self, fs: &[Field], k: usize) -> DMatrix<f64> {
        let nd = self.lab.spec.n_dof();
        let mut m = DMatrix::zeros(nd, fs.len());
        for (j, f) in fs.iter().enumerate() {
            m.set_column(j, &f.dofs(k));
        }
        m
    }

    fn gather(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(self.idx.len(), m.ncols(), |r, j| m[(self.idx[r], j)])
    }

    fn scatter(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.lab.spec.n_dof(), z.ncols());
        for (r, &i) in self.idx.iter().enumerate() {
            m.row_mut(i).copy_from(&z.row(r));
        }
        m
    }

    /// Jacobian of `vec(D)` (column-major over `(i, j)`) by forward sensitivities.
    pub fn jacobian(&self, ev: &Evaluation) -> Result<DMatrix<f64>> {
        let lu = self.step_lu(ev);
        let n = self.lab.tg.n_t;
        let tau = self.lab.tg.tau();
        let m_ii = restrict(&self.lab.st.m, &self.idx) / tau;
        let kg: Vec<DMatrix<f64>> = (0..=n).map(|k| self.gather(&(&ev.k * self.block(&self.outputs, k)))).collect();
        let mut jac = DMatrix::zeros(self.n_entries(), self.model.dim());
        for l in 0..self.model.dim() {
            let dk = self.dk(ev, l);
            let mut d = DMatrix::zeros(self.inputs.len(), self.outputs.len());
            let mut dz = DMatrix::zeros(self.idx.len(), self.inputs.len());
            for k in 0..=n {
                let u = self.block(&ev.states, k);
                let dku = &dk * &u;
                if k > 0 {
                    let rhs = &m_ii * &dz - self.gather(&dku);
                    dz = lu.solve(&rhs).ok_or(Error::Singular(k))?;
                }
                if ev.w[k] != 0.0 {
                    let g = self.block(&self.outputs, k);
                    d += (dz.transpose() * &kg[k] + dku.transpose() * g) * (tau * ev.w[k]);
                }
            }
            jac.set_column(l, &DVector::from_column_slice(d.as_slice()));
        }
        Ok(jac)
    }

    /// Gradient of `½ ‖D - obs‖²_F`: one backward solve per input.
    pub fn adjoint_gradient(&self, ev: &Evaluation, obs: &DMatrix<f64>) -> Result<DVector<f64>> {
        let r = &ev.data - obs;
        let lu = self.step_lu(ev);
        let n = self.lab.tg.n_t;
        let tau = self.lab.tg.tau();
        let m_ii = restrict(&self.lab.st.m, &self.idx) / tau;
        let nd = self.lab.spec.n_dof();
        let mut z = DMatrix::zeros(nd, nd);
        let mut lam = DMatrix::zeros(self.idx.len(), self.inputs.len());
        for k in (0..=n).rev() {
            // g̃_{i,k} = Σ_j R_ij g_{j,k}
            let gt = self.block(&self.outputs, k) * r.transpose();
            let h = self.gather(&(&ev.k * &gt)) * (tau * ev.w[k]);
            if k > 0 {
                let rhs = if k == n { h } else { h + &m_ii * &lam };
                lam = lu.solve(&rhs).ok_or(Error::Singular(k))?;
            } else {
                lam.fill(0.0);
            }
            let psi = gt * (tau * ev.w[k]) - self.scatter(&lam);
            z += self.block(&ev.states, k) * psi.transpose();
        }
        let grad = (0..self.model.dim()).map(|l| self.dk(ev, l).component_mul(&z).sum());
        Ok(DVector::from_iterator(self.model.dim(), grad))
    }

    pub fn misfit(&self, ev: &Evaluation, obs: &DMatrix<f64>) -> f64 {
        0.5 * (&ev.data - obs).norm_squared()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradientCheck {
    pub relative_errors: Vec<f64>,
    pub max_relative_error: f64,
}

/// Adjoint directional derivatives against central differences along `n_dirs` random unit directions.
pub fn gradient_check(dm: &DataModel, p: &[f64], obs: &DMatrix<f64>, n_dirs: usize, seed: u64, step: f64) -> Result<GradientCheck> {
    let ev = dm.evaluate(p)?;
    let g = dm.adjoint_gradient(&ev, obs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nrm = Normal::new(0.0, 1.0).unwrap();
    let mut errs = Vec::with_capacity(n_dirs);
    for _ in 0..n_dirs {
        let mut d = DVector::from_fn(p.len(), |_, _| nrm.sample(&mut rng));
        d /= d.norm();
        let shift = |sgn: f64| -> Vec<f64> { p.iter().zip(d.iter()).map(|(a, b)| a + sgn * step * b).collect() };
        let jp = dm.misfit(&dm.evaluate(&shift(1.0))?, obs);
        let jm = dm.misfit(&dm.evaluate(&shift(-1.0))?, obs);
        let fd = (jp - jm) / (2.0 * step);
        let ad = g.dot(&d);
        errs.push((ad - fd).abs() / fd.abs().max(ad.abs()).max(1e-300));
    }
    let max_relative_error = errs.iter().fold(0.0f64, |a, &b| a.max(b));
    Ok(GradientCheck { relative_errors: errs, max_relative_error })
}

// ---------------------------------------------------------------- recovery

#[derive(Debug, Clone, Serialize)]
pub struct LmOptions {
    pub lambda: f64,
    pub max_iter: usize,
    /// Stop when the relative decrease of an accepted step falls below this.
    pub ftol: f64,
    pub gtol: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self { lambda: 1e-6, max_iter: 50, ftol: 1e-12, gtol: 1e-14 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RecoveryResult {
    pub params: Vec<f64>,
    /// `1 + p_l` at the interior knots.
    pub gamma_knots: Vec<f64>,
    pub knots: Vec<f64>,
    /// Objective `½‖D - obs‖²/‖obs‖² + λ‖p - p₀‖²` after each accepted step (first entry: start).
    pub misfit_history: Vec<f64>,
    /// Data misfit `‖D - obs‖_F` at the result.
    pub residual_norm: f64,
    pub lambda: f64,
    pub iterations: usize,
    pub converged: bool,
    pub max_iter_reached: bool,
}

/// Levenberg-Marquardt on the Tikhonov objective, from `p0` (also the prior).
pub fn interior_gauss_newton(dm: &DataModel, obs: &DMatrix<f64>, p0: &[f64], opt: &LmOptions) -> Result<RecoveryResult> {
    lm_from(dm, obs, p0, p0, opt)
}

fn lm_from(dm: &DataModel, obs: &DMatrix<f64>, prior: &[f64], start: &[f64], opt: &LmOptions) -> Result<RecoveryResult> {
    let dim = dm.model.dim();
    let pr = DVector::from_column_slice(prior);
    // data misfit relative to ‖obs‖² so λ is dimensionless
    let scale = obs.norm_squared().max(1e-300);
    let objective = |ev: &Evaluation| {
        let d = DVector::from_column_slice(&ev.p) - &pr;
        dm.misfit(ev, obs) / scale + opt.lambda * d.norm_squared()
    };
    let mut ev = dm.evaluate(start)?;
    let mut f = objective(&ev);
    let mut hist = vec![f];
    let mut mu: Option<f64> = None;
    let mut iterations = 0;
    let mut converged = false;
    let mut jac = dm.jacobian(&ev)?;
    while iterations < opt.max_iter {
        let r = DVector::from_column_slice((&ev.data - obs).as_slice());
        let p = DVector::from_column_slice(&ev.p);
        let grad = jac.transpose() * &r / scale + (&p - &pr) * (2.0 * opt.lambda);
        if grad.norm() <= opt.gtol || f <= 1e-30 {
            converged = true;
            break;
        }
        let jtj = jac.transpose() * &jac / scale;
        let m = *mu.get_or_insert(1e-3 * jtj.trace() / dim as f64);
        let mut accepted = false;
        let mut mu_cur = m;
        for _ in 0..40 {
            let mut sys = jtj.clone();
            for i in 0..dim {
                sys[(i, i)] += 2.0 * opt.lambda + mu_cur;
            }
            let step = sys.cholesky().map(|c| c.solve(&(-&grad))).ok_or(Error::Singular(iterations))?;
            let trial: Vec<f64> = (&p + &step).iter().copied().collect();
            match dm.evaluate(&trial) {
                Ok(ev_t) => {
                    let ft = objective(&ev_t);
                    if ft < f {
                        let rel = (f - ft) / f;
                        ev = ev_t;
                        f = ft;
                        hist.push(f);
                        mu_cur /= 3.0;
                        accepted = true;
                        if rel < opt.ftol {
                            converged = true;
                        }
                        break;
                    }
                    mu_cur *= 2.0;
                }
                // leaving the admissible class counts as a rejected step
                Err(Error::Ellipticity { .. }) => mu_cur *= 2.0,
                Err(e) => return Err(e),
            }
        }
        mu = Some(mu_cur);
        iterations += 1;
        if !accepted {
            converged = true;
            break;
        }
        if converged {
            break;
        }
        jac = dm.jacobian(&ev)?;
    }
    Ok(RecoveryResult {
        gamma_knots: ev.p.iter().map(|v| 1.0 + v).collect(),
        knots: dm.model.knots[1..dm.model.knots.len() - 1].to_vec(),
        params: ev.p.clone(),
        misfit_history: hist,
        residual_norm: (&ev.data - obs).norm(),
        lambda: opt.lambda,
        iterations,
        converged,
        max_iter_reached: !converged,
    })
}

/// `obs + σ ξ` with `σ = level · RMS(obs)`; returns the noisy data and `σ`.
pub fn add_noise(obs: &DMatrix<f64>, level: f64, seed: u64) -> (DMatrix<f64>, f64) {
    let rms = (obs.norm_squared() / obs.len() as f64).sqrt();
    let sigma = level * rms;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nrm = Normal::new(0.0, sigma).unwrap();
    (obs.map(|v| v + nrm.sample(&mut rng)), sigma)
}

#[derive(Debug, Clone, Serialize)]
pub struct DiscrepancyResult {
    pub chosen: RecoveryResult,
    pub noise_norm: f64,
    pub lambdas: Vec<f64>,
    pub residuals: Vec<f64>,
}

/// Walks `lambdas` from large to small (warm starts) and keeps the first
/// reconstruction with `‖D - obs‖ ≤ safety · σ √(#entries)`.
pub fn discrepancy_principle(
    dm: &DataModel,
    obs: &DMatrix<f64>,
    sigma: f64,
    p0: &[f64],
    lambdas: &[f64],
    safety: f64,
    base: &LmOptions,
) -> Result<DiscrepancyResult> {
    let delta = sigma * (dm.n_entries() as f64).sqrt();
    let mut start = p0.to_vec();
    let mut residuals = vec![];
    let mut last = None;
    for &lam in lambdas {
        let res = lm_from(dm, obs, p0, &start, &LmOptions { lambda: lam, ..base.clone() })?;
        residuals.push(res.residual_norm);
        start = res.params.clone();
        let ok = res.residual_norm <= safety * delta;
        last = Some(res);
        if ok {
            break;
        }
    }
    let chosen = last.ok_or_else(|| Error::Precondition("empty λ list".into()))?;
    Ok(DiscrepancyResult { chosen, noise_norm: delta, lambdas: lambdas[..residuals.len()].to_vec(), residuals })
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct RecoveryError {
    /// `‖γ_rec - γ‖ / ‖γ‖` on Ω
    pub relative: f64,
    /// `‖γ_rec - γ‖ / ‖γ - 1‖` on Ω
    pub contrast_relative: f64,
}

/// L²(Ω) errors on a fine sampling of Ω.
pub fn recovery_error(model: &SplineModel, p: &[f64], truth: &dyn Fn(f64) -> f64) -> RecoveryError {
    let (a, b) = model.omega;
    let n = 2000;
    let hx = (b - a) / n as f64;
    let (mut e, mut g, mut c) = (0.0, 0.0, 0.0);
    for i in 0..=n {
        let x = a + i as f64 * hx;
        let w = if i == 0 || i == n { 0.5 } else { 1.0 };
        let t = truth(x);
        let r = 1.0 + model.eval(p, x);
        e += w * (r - t).powi(2);
        g += w * t * t;
        c += w * (t - 1.0).powi(2);
    }
    RecoveryError { relative: (e / g).sqrt(), contrast_relative: if c > 0.0 { (e / c).sqrt() } else { e.sqrt() } }
}

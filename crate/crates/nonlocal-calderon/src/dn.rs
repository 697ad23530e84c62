//! Exterior measurement operators sampled on finite bases, and the identities tying them together.

use crate::domain::{sample, Conductivity, Field, Interval, NodeClass, SupportTag};
use crate::error::{Error, Result};
use crate::kernel::{frac_laplacian_closure, PointwiseOptions, PotentialField};
use crate::quadrature::adaptive;
use crate::solvers::{adjoint_batch, run_batch, DataSet, DiffusionOps, Lab, Mode, ReducedOps, StepOps};
use nalgebra::DMatrix;
use serde::Serialize;
use sha2::{Digest, Sha256};

/// `exp(1 - 1/(1 - ρ²))` on `|ρ| < 1`, zero elsewhere; peak value 1.
pub fn bump(rho: f64) -> f64 {
    if rho.abs() < 1.0 {
        (1.0 - 1.0 / (1.0 - rho * rho)).exp()
    } else {
        0.0
    }
}

/// Exterior-only test functions supported in one named set.
#[derive(Debug, Clone)]
pub struct ExteriorBasis {
    pub set: String,
    pub fields: Vec<Field>,
    pub labels: Vec<String>,
}

impl ExteriorBasis {
    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    /// Tensor bumps `b((x - a_j)/r_x) b((t - c_k)/r_t)`; centers split the set
    /// (and `(0, T)`) into `n + 1` equal gaps and radii equal one gap, so every
    /// function vanishes at `t = 0` and `t = T`.
    pub fn tensor(lab: &Lab, set: &str, n_space: usize, n_time: usize) -> Result<Self> {
        let es = lab.spec.exterior_set(set)?;
        let iv = es.interval;
        let gap = iv.len() / (n_space + 1) as f64;
        let t_final = lab.tg.t_final;
        let tgap = t_final / (n_time + 1) as f64;
        let mut fields = Vec::with_capacity(n_space * n_time);
        let mut labels = Vec::with_capacity(n_space * n_time);
        for j in 0..n_space {
            let a = iv.a + (j + 1) as f64 * gap;
            for k in 0..n_time {
                let c = (k + 1) as f64 * tgap;
                let f = sample(move |x, t| bump((x - a) / gap) * bump((t - c) / tgap), &lab.spec, &lab.tg, SupportTag::ExteriorOnly)?;
                fields.push(f);
                labels.push(format!("{set}:x{j}:t{k}"));
            }
        }
        let b = Self { set: set.into(), fields, labels };
        b.validate(lab)?;
        Ok(b)
    }

    /// Builds from explicit fields, checking support and `f(0) = 0`.
    pub fn from_fields(lab: &Lab, set: &str, fields: Vec<Field>, labels: Vec<String>) -> Result<Self> {
        let b = Self { set: set.into(), fields, labels };
        b.validate(lab)?;
        Ok(b)
    }

    fn validate(&self, lab: &Lab) -> Result<()> {
        let es = lab.spec.exterior_set(&self.set)?;
        for (f, name) in self.fields.iter().zip(&self.labels) {
            for i in 0..lab.spec.n_nodes() {
                let inside = i > es.nodes.0 && i < es.nodes.1;
                for k in 0..f.n_times {
                    let v = f.get(i, k);
                    if v != 0.0 && (!inside || lab.spec.class[i] == NodeClass::Interior) {
                        return Err(Error::Precondition(format!("basis function {name} leaves set {}", self.set)));
                    }
                }
                if f.get(i, 0) != 0.0 {
                    return Err(Error::Precondition(format!("basis function {name} is nonzero at t = 0")));
                }
            }
        }
        Ok(())
    }

    /// Whether every function also vanishes at `t = T`.
    pub fn vanishes_at_final_time(&self) -> bool {
        self.fields.iter().all(|f| f.slice(f.n_times - 1).iter().all(|&v| v == 0.0))
    }

    /// Multiplies every function pointwise by `w` (same shape).
    pub fn weighted(&self, w: &Field) -> Result<Self> {
        let fields = self.fields.iter().map(|f| f.mul(w)).collect::<Result<Vec<_>>>()?;
        Ok(Self { fields, ..self.clone() })
    }

    pub fn interval(&self, lab: &Lab) -> Result<Interval> {
        Ok(lab.spec.exterior_set(&self.set)?.interval)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum DnKind {
    Lambda,
    NGamma,
    NQ,
    NQAdjoint,
    ExtExt,
}

/// Gram matrix `(i, j) -> ⟨Op f_i, g_j⟩`.
#[derive(Debug, Clone, Serialize)]
pub struct DnMatrix {
    #[serde(skip)]
    pub entries: DMatrix<f64>,
    pub kind: DnKind,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    pub gamma_hash: String,
    pub grid_hash: String,
}

impl DnMatrix {
    pub fn max_abs(&self) -> f64 {
        self.entries.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

pub fn hash_f64s(v: &[f64]) -> String {
    let mut h = Sha256::new();
    for x in v {
        h.update(x.to_le_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

fn grid_hash(lab: &Lab) -> String {
    let mut h = Sha256::new();
    h.update(lab.spec.fingerprint().as_bytes());
    h.update(format!("s={:e};T={:e};nt={};theta={}", lab.fo.s(), lab.tg.t_final, lab.tg.n_t, lab.tg.theta).as_bytes());
    hex::encode(&h.finalize()[..8])
}

fn wrap(lab: &Lab, c: &Conductivity, e: DMatrix<f64>, kind: DnKind, fb: &ExteriorBasis, gb: &ExteriorBasis) -> DnMatrix {
    DnMatrix {
        entries: e,
        kind,
        row_labels: fb.labels.clone(),
        col_labels: gb.labels.clone(),
        gamma_hash: hash_f64s(&c.gamma.values),
        grid_hash: grid_hash(lab),
    }
}

fn block(fields: &[Field], k: usize, nd: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(nd, fields.len());
    for (j, f) in fields.iter().enumerate() {
        out.set_column(j, &f.dofs(k));
    }
    out
}

/// `τ Σ_k w_k U_kᵀ K_k G_k` with `K_k` supplied per time index.
pub fn time_pairing(
    lab: &Lab,
    us: &[Field],
    gs: &[Field],
    weights: &[f64],
    mut kmat: impl FnMut(usize) -> Result<std::sync::Arc<DMatrix<f64>>>,
) -> Result<DMatrix<f64>> {
    let nd = lab.spec.n_dof();
    let tau = lab.tg.tau();
    let mut out = DMatrix::zeros(us.len(), gs.len());
    for (k, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let g = block(gs, k, nd);
        if g.iter().all(|&v| v == 0.0) {
            continue;
        }
        let u = block(us, k, nd);
        let km = kmat(k)?;
        out += (u.transpose() * (&*km * g)) * (tau * w);
    }
    Ok(out)
}

/// The three diffusion-side measurement matrices from one batch of solves.
#[derive(Debug, Clone)]
pub struct DiffusionDn {
    pub lambda: DnMatrix,
    pub n_gamma: DnMatrix,
    pub ext_ext: DnMatrix,
    #[allow(dead_code)]
    pub max_rel_residual: f64,
}

/// Forward solutions for every function of `fb`.
pub fn diffusion_solutions(lab: &Lab, ops: &DiffusionOps, fb: &ExteriorBasis) -> Result<(Vec<Field>, f64)> {
    let sets: Vec<DataSet> = fb.fields.iter().map(DataSet::exterior).collect();
    let rep = run_batch(lab, ops, Mode::Conservative, &sets)?;
    Ok((rep.solutions, rep.max_rel_residual))
}

/// `Λ_γ`, `N_γ` and the exterior-exterior term on `fb × gb`.
pub fn diffusion_dn(lab: &Lab, c: &Conductivity, fb: &ExteriorBasis, gb: &ExteriorBasis) -> Result<DiffusionDn> {
    let ops = DiffusionOps::new(lab, c)?;
    let (us, res) = diffusion_solutions(lab, &ops, fb)?;
    let w = lab.pairing_weights();
    let lambda = time_pairing(lab, &us, &gb.fields, &w, |k| ops.s(k))?;
    let n_gamma = time_pairing(lab, &us, &gb.fields, &w, |k| Ok(std::sync::Arc::new(ops.slice(k)?.parts.masked.clone())))?;
    let ee = time_pairing(lab, &fb.fields, &gb.fields, &w, |k| Ok(std::sync::Arc::new(ops.slice(k)?.parts.ext_ext.clone())))?;
    Ok(DiffusionDn {
        lambda: wrap(lab, c, lambda, DnKind::Lambda, fb, gb),
        n_gamma: wrap(lab, c, n_gamma, DnKind::NGamma, fb, gb),
        ext_ext: wrap(lab, c, ee, DnKind::ExtExt, fb, gb),
        max_rel_residual: res,
    })
}

/// `⟨Λ_γ f_i, g_j⟩ = τ Σ_k c_k u_{i,k}ᵀ K_γ(t_k) g_{j,k}`.
pub fn dn_lambda(lab: &Lab, c: &Conductivity, fb: &ExteriorBasis, gb: &ExteriorBasis) -> Result<DnMatrix> {
    Ok(diffusion_dn(lab, c, fb, gb)?.lambda)
}

/// Same pairing with the stiffness restricted to pairs not both outside Ω.
pub fn neumann_n_gamma(lab: &Lab, c: &Conductivity, fb: &ExteriorBasis, gb: &ExteriorBasis) -> Result<DnMatrix> {
    Ok(diffusion_dn(lab, c, fb, gb)?.n_gamma)
}

/// Forward reduced solutions for `fb`.
pub fn reduced_solutions(lab: &Lab, ops: &ReducedOps, fb: &ExteriorBasis) -> Result<(Vec<Field>, f64)> {
    let sets: Vec<DataSet> = fb.fields.iter().map(DataSet::exterior).collect();
    let rep = run_batch(lab, ops, Mode::Conservative, &sets)?;
    Ok((rep.solutions, rep.max_rel_residual))
}

/// Backward solutions for `fb` (terminal state zero).
pub fn adjoint_solutions(lab: &Lab, ops: &ReducedOps, fb: &ExteriorBasis) -> Result<(Vec<Field>, f64)> {
    let sets: Vec<DataSet> = fb.fields.iter().map(DataSet::exterior).collect();
    let rep = adjoint_batch(lab, ops, &sets)?;
    Ok((rep.solutions, rep.max_rel_residual))
}

fn a_masked(lab: &Lab) -> std::sync::Arc<DMatrix<f64>> {
    std::sync::Arc::new(lab.st.a.masked.clone())
}

/// `⟨N_Q f_i, g_j⟩ = τ Σ_k c_k v_{i,k}ᵀ A^mask g_{j,k}`, the representation with the zero extension of `g`.
pub fn dn_n_q(lab: &Lab, c: &Conductivity, pot: &PotentialField, fb: &ExteriorBasis, gb: &ExteriorBasis) -> Result<DnMatrix> {
    let ops = ReducedOps::new(lab, c, pot)?;
    let (vs, _) = reduced_solutions(lab, &ops, fb)?;
    let am = a_masked(lab);
    let e = time_pairing(lab, &vs, &gb.fields, &lab.pairing_weights(), |_| Ok(am.clone()))?;
    Ok(wrap(lab, c, e, DnKind::NQ, fb, gb))
}

/// `N_Q` through an extension `g_j + ψ_j` with `ψ_j` interior-only:
/// `τ Σ c_k v_kᵀ A^mask g_k + Σ_{k≥1} ψ_kᵀ [(P_k v_k - P_{k-1} v_{k-1}) + τ S_k v_k]`.
/// The second sum is the scheme residual tested with `ψ`, so the value does not depend on `ψ`
/// (for θ = 1).
pub fn dn_n_q_extended(
    lab: &Lab,
    c: &Conductivity,
    pot: &PotentialField,
    fb: &ExteriorBasis,
    gb: &ExteriorBasis,
    psi: &[Field],
) -> Result<DnMatrix> {
    if psi.len() != gb.len() {
        return Err(Error::Dimension("one extension per output function".into()));
    }
    let ops = ReducedOps::new(lab, c, pot)?;
    let (vs, _) = reduced_solutions(lab, &ops, fb)?;
    let am = a_masked(lab);
    let mut e = time_pairing(lab, &vs, &gb.fields, &lab.pairing_weights(), |_| Ok(am.clone()))?;
    let nd = lab.spec.n_dof();
    let tau = lab.tg.tau();
    for k in 1..=lab.tg.n_t {
        let v1 = block(&vs, k, nd);
        let v0 = block(&vs, k - 1, nd);
        let ps = block(psi, k, nd);
        let r = &*ops.p(k)? * &v1 - &*ops.p(k - 1)? * &v0 + &*ops.s(k)? * &v1 * tau;
        e += r.transpose() * ps;
    }
    Ok(wrap(lab, c, e, DnKind::NQ, fb, gb))
}

/// Adjoint map: backward solutions `y_i` for data `f_i` paired with `g_j`
/// using the mirrored weights `c_{n-k}`.
pub fn dn_n_q_adjoint(lab: &Lab, c: &Conductivity, pot: &PotentialField, fb: &ExteriorBasis, gb: &ExteriorBasis) -> Result<DnMatrix> {
    if !fb.vanishes_at_final_time() {
        return Err(Error::Precondition("adjoint input must vanish at t = T".into()));
    }
    let ops = ReducedOps::new(lab, c, pot)?;
    let (ys, _) = adjoint_solutions(lab, &ops, fb)?;
    let mut w = lab.pairing_weights();
    w.reverse();
    let am = a_masked(lab);
    let e = time_pairing(lab, &ys, &gb.fields, &w, |_| Ok(am.clone()))?;
    Ok(wrap(lab, c, e, DnKind::NQAdjoint, fb, gb))
}

#[derive(Debug, Clone, Serialize)]
pub struct SelfAdjointCheck {
    /// `max |⟨N* f_i, g_j⟩ - ⟨N g_j, f_i⟩|`
    pub residual: f64,
    pub relative: f64,
}

/// Compares `⟨N*_Q f, g⟩` with `⟨N_Q g, f⟩`; `fb` must vanish at `T`, `gb` at `0`.
pub fn check_selfadjoint(lab: &Lab, c: &Conductivity, pot: &PotentialField, fb: &ExteriorBasis, gb: &ExteriorBasis) -> Result<SelfAdjointCheck> {
    let nstar = dn_n_q_adjoint(lab, c, pot, fb, gb)?;
    let n = dn_n_q(lab, c, pot, gb, fb)?;
    let d = &nstar.entries - n.entries.transpose();
    let residual = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = nstar.max_abs().max(n.max_abs());
    Ok(SelfAdjointCheck { residual, relative: if scale > 0.0 { residual / scale } else { 0.0 } })
}

#[derive(Debug, Clone, Serialize)]
pub struct OldNewCheck {
    pub lambda_gap: f64,
    pub n_gap: f64,
    pub correction: f64,
    /// `max |(Λ₁ - Λ₂) - (N₁ - N₂)|`
    pub entrywise: f64,
}

fn disjoint_and_agree(lab: &Lab, c1: &Conductivity, c2: &Conductivity, w1: &str, w2: &str) -> Result<()> {
    let e1 = lab.spec.exterior_set(w1)?;
    let e2 = lab.spec.exterior_set(w2)?;
    if e1.interval.overlaps(&e2.interval) || e1.interval.a == e2.interval.b || e2.interval.a == e1.interval.b {
        return Err(Error::Precondition(format!("sets {w1} and {w2} intersect")));
    }
    if !c1.agrees_on(c2, e1.nodes) || !c1.agrees_on(c2, e2.nodes) {
        return Err(Error::Precondition(format!("conductivities differ on {w1} or {w2}")));
    }
    Ok(())
}

/// Old and new exterior data differ by the exterior-exterior term, which is common to both conductivities.
pub fn check_old_new_equivalence(
    lab: &Lab,
    c1: &Conductivity,
    c2: &Conductivity,
    fb: &ExteriorBasis,
    gb: &ExteriorBasis,
) -> Result<OldNewCheck> {
    disjoint_and_agree(lab, c1, c2, &fb.set, &gb.set)?;
    let d1 = diffusion_dn(lab, c1, fb, gb)?;
    let d2 = diffusion_dn(lab, c2, fb, gb)?;
    let dl = &d1.lambda.entries - &d2.lambda.entries;
    let dn = &d1.n_gamma.entries - &d2.n_gamma.entries;
    let de = &d1.ext_ext.entries - &d2.ext_ext.entries;
    let mx = |m: &DMatrix<f64>| m.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    Ok(OldNewCheck { lambda_gap: mx(&dl), n_gap: mx(&dn), correction: mx(&de), entrywise: mx(&(&dl - &dn)) })
}

#[derive(Debug, Clone, Serialize)]
pub struct RelationCheck {
    /// `N_{γ1} - N_{γ2}` on the block
    pub n_gamma_diff: f64,
    /// `N_{Q1}(Γ^{1/2}·) - N_{Q2}(Γ^{1/2}·)` on the block
    pub n_q_diff: f64,
    /// `max` entrywise distance between the two difference matrices
    pub mismatch: f64,
    pub warnings: Vec<String>,
}

fn roughness_warning(c: &Conductivity, nodes: (usize, usize), name: &str) -> Option<String> {
    let mut d1 = 0.0f64;
    let mut d2 = 0.0f64;
    for k in 0..c.gamma.n_times {
        for i in nodes.0..nodes.1 {
            d1 = d1.max((c.gamma.get(i + 1, k) - c.gamma.get(i, k)).abs());
            if i > nodes.0 {
                d2 = d2.max((c.gamma.get(i + 1, k) - 2.0 * c.gamma.get(i, k) + c.gamma.get(i - 1, k)).abs());
            }
        }
    }
    // a jump shows up with second differences as large as first differences
    (d1 > 1e-8 && d2 > 0.5 * d1).then(|| format!("conductivity on {name} looks non-smooth (max first difference {d1:e}, second {d2:e})"))
}

/// Relation between the new diffusion data and the reduced data with weighted inputs.
pub fn check_relation_theorem(
    lab: &Lab,
    c1: &Conductivity,
    c2: &Conductivity,
    fb: &ExteriorBasis,
    gb: &ExteriorBasis,
) -> Result<RelationCheck> {
    disjoint_and_agree(lab, c1, c2, &fb.set, &gb.set)?;
    let mut warnings = Vec::new();
    for b in [fb, gb] {
        let es = lab.spec.exterior_set(&b.set)?;
        if let Some(w) = roughness_warning(c1, es.nodes, &b.set) {
            warnings.push(w);
        }
    }
    let n1 = diffusion_dn(lab, c1, fb, gb)?.n_gamma;
    let n2 = diffusion_dn(lab, c2, fb, gb)?.n_gamma;
    let sq = crate::solvers::liouville_transform(&lab.zeros(SupportTag::Full).axpby(0.0, &c1.gamma, 1.0)?, c1, crate::solvers::Direction::ToSchrodinger)?;
    // Γ^{1/2} = γ / γ^{1/2} on the exterior sets
    let root = Field { values: sq.values.iter().zip(&c1.gamma.values).map(|(a, g)| a / g).collect(), ..sq };
    let fw = fb.weighted(&root)?;
    let gw = gb.weighted(&root)?;
    let p1 = crate::solvers::potentials(lab, c1)?;
    let p2 = crate::solvers::potentials(lab, c2)?;
    let q1 = dn_n_q(lab, c1, &p1, &fw, &gw)?;
    let q2 = dn_n_q(lab, c2, &p2, &fw, &gw)?;
    let dn = &n1.entries - &n2.entries;
    let dq = &q1.entries - &q2.entries;
    let mx = |m: &DMatrix<f64>| m.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    Ok(RelationCheck { n_gamma_diff: mx(&dn), n_q_diff: mx(&dq), mismatch: mx(&(&dn - &dq)), warnings })
}

/// Closure description for the strong-form identity check.
pub struct StrongInputs<'a> {
    pub u: &'a dyn Fn(f64) -> f64,
    pub v: &'a dyn Fn(f64) -> f64,
    /// Time slice of `γ` (smooth, equal to `far` near and beyond the box edge).
    pub gamma: &'a dyn Fn(f64) -> f64,
    pub far: f64,
    /// Points where `u`, `v` or `γ` fail to be smooth.
    pub breakpoints: &'a [f64],
}

#[derive(Debug, Clone, Serialize)]
pub struct IbpCheck {
    pub form: f64,
    pub interior_term: f64,
    pub exterior_term: f64,
    pub residual: f64,
}

/// Masked form versus `⟨L_γ u, v⟩_Ω + ⟨N_γ u, v⟩_{Ω_e}`, every term by adaptive quadrature of closures.
///
/// `L_γ u = w [(-Δ)^s (w u) - u (-Δ)^s (w - w_∞)]` with `w = γ^{1/2}`, and
/// `N_γ u(x) = C w(x) ∫_Ω w(y) (u(x) - u(y)) |x - y|^{-1-2s} dy`.
pub fn integration_by_parts_check(lab: &Lab, inp: &StrongInputs, tol: f64) -> Result<IbpCheck> {
    let spec = &lab.spec;
    let (l, s, kc) = (spec.l, lab.fo.s(), lab.asm.kc);
    let om = spec.omega;
    let w = |x: f64| if x.abs() >= l { inp.far.sqrt() } else { (inp.gamma)(x).sqrt() };
    let wf = inp.far.sqrt();
    let u = |x: f64| if x.abs() >= l { 0.0 } else { (inp.u)(x) };
    let v = |x: f64| if x.abs() >= l { 0.0 } else { (inp.v)(x) };
    let k = |r: f64| r.abs().powf(-1.0 - 2.0 * s);
    let rho = |x: f64| ((l - x).powf(-2.0 * s) + (l + x).powf(-2.0 * s)) / (2.0 * s);
    let q = |f: &dyn Fn(f64) -> f64, a: f64, b: f64| -> Result<f64> {
        adaptive(f, a, b, tol * 1e-3, tol * 1e-3).ok_or_else(|| Error::Quadrature(format!("on [{a}, {b}]")))
    };
    let mut cuts: Vec<f64> = vec![-l, om.a, om.b, l];
    cuts.extend(inp.breakpoints.iter().copied().filter(|b| b.abs() < l));
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    let pieces = |lo: f64, hi: f64, extra: f64| -> Vec<(f64, f64)> {
        let mut c: Vec<f64> = cuts.iter().copied().filter(|&p| p > lo && p < hi).collect();
        if extra > lo && extra < hi {
            c.push(extra);
        }
        c.push(lo);
        c.push(hi);
        c.sort_by(f64::total_cmp);
        c.dedup();
        c.windows(2).map(|p| (p[0], p[1])).collect()
    };

    // masked form: x in Ω with y anywhere, plus x outside Ω with y in Ω
    let f2 = |x: f64, y: f64| w(x) * w(y) * (u(x) - u(y)) * (v(x) - v(y)) * k(x - y);
    let inner_err: std::cell::RefCell<Option<Error>> = std::cell::RefCell::new(None);
    let integrate_x = |lo: f64, hi: f64, y_lo: f64, y_hi: f64, with_tail: bool| -> Result<f64> {
        let mut total = 0.0;
        for (a, b) in pieces(lo, hi, f64::NAN) {
            total += q(
                &|x| {
                    let mut acc = 0.0;
                    for (c, d) in pieces(y_lo, y_hi, x) {
                        match adaptive(|y| f2(x, y), c, d, tol * 1e-4, tol * 1e-4) {
                            Some(val) => acc += val,
                            None => *inner_err.borrow_mut() = Some(Error::Quadrature(format!("inner at x = {x}"))),
                        }
                    }
                    if with_tail {
                        acc += w(x) * wf * u(x) * v(x) * rho(x);
                    }
                    acc
                },
                a,
                b,
            )?;
        }
        Ok(total)
    };
    let omega_part = integrate_x(om.a, om.b, -l, l, true)?;
    let left = integrate_x(-l, om.a, om.a, om.b, false)?;
    let right = integrate_x(om.b, l, om.a, om.b, false)?;
    // x outside the box with y in Ω: u(x) = v(x) = 0
    let outside = q(&|y| w(y) * wf * u(y) * v(y) * ((l - y).powf(-2.0 * s) + (l + y).powf(-2.0 * s)) / (2.0 * s), om.a, om.b)?;
    if let Some(e) = inner_err.into_inner() {
        return Err(e);
    }
    let form = 0.5 * kc * (omega_part + left + right + outside);

    // strong interior term
    let wu = |y: f64| w(y) * u(y);
    let wm = |y: f64| if y.abs() >= l { 0.0 } else { w(y) - wf };
    let opt = PointwiseOptions::default();
    let mut bps: Vec<f64> = inp.breakpoints.to_vec();
    bps.extend([om.a, om.b]);
    let lap_at = |x: f64| -> Result<f64> {
        let a = frac_laplacian_closure(&wu, &bps, &[x], l, lab.fo, opt)?[0];
        let b = frac_laplacian_closure(&wm, &bps, &[x], l, lab.fo, opt)?[0];
        Ok(w(x) * (a - u(x) * b))
    };
    let err: std::cell::RefCell<Option<Error>> = std::cell::RefCell::new(None);
    let mut interior_term = 0.0;
    for (a, b) in pieces(om.a, om.b, f64::NAN) {
        interior_term += q(
            &|x| {
                let vx = v(x);
                if vx == 0.0 {
                    return 0.0;
                }
                match lap_at(x) {
                    Ok(val) => val * vx,
                    Err(e) => {
                        *err.borrow_mut() = Some(e);
                        0.0
                    }
                }
            },
            a,
            b,
        )?;
    }
    let mut exterior_term = 0.0;
    for (a, b) in pieces(-l, om.a, f64::NAN).into_iter().chain(pieces(om.b, l, f64::NAN)) {
        exterior_term += q(
            &|x| {
                let vx = v(x);
                if vx == 0.0 {
                    return 0.0;
                }
                let mut acc = 0.0;
                for (c, d) in pieces(om.a, om.b, f64::NAN) {
                    match adaptive(|y| w(y) * (u(x) - u(y)) * k(x - y), c, d, tol * 1e-4, tol * 1e-4) {
                        Some(val) => acc += val,
                        None => *err.borrow_mut() = Some(Error::Quadrature(format!("neumann at x = {x}"))),
                    }
                }
                kc * w(x) * acc * vx
            },
            a,
            b,
        )?;
    }
    if let Some(e) = err.into_inner() {
        return Err(e);
    }
    Ok(IbpCheck { form, interior_term, exterior_term, residual: (form - interior_term - exterior_term).abs() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{build_domain, DomainConfig, FracOrder, TimeGrid};

    pub(crate) fn lab2(h: f64, nt: usize) -> Lab {
        let spec = build_domain(&DomainConfig {
            box_halfwidth: 2.0,
            h,
            omega: (-1.0, 1.0),
            exterior: vec![("W1".into(), 1.2, 1.8), ("W2".into(), -1.8, -1.2)],
            disjoint_pairs: vec![("W1".into(), "W2".into())],
        })
        .unwrap();
        Lab::new(spec, FracOrder::new(1, 0.5).unwrap(), TimeGrid::new(1.0, nt, 1.0).unwrap()).unwrap()
    }

    fn interior_phantom(lab: &Lab, amp: f64) -> Conductivity {
        Conductivity::from_fn(move |x, _| 1.0 + amp * bump(x / 0.7), None, &lab.spec, &lab.tg, 0.5).unwrap()
    }

    #[test]
    fn basis_shapes() {
        let lab = lab2(0.05, 12);
        let b = ExteriorBasis::tensor(&lab, "W1", 3, 2).unwrap();
        assert_eq!(b.len(), 6);
        assert!(b.vanishes_at_final_time());
        assert!(ExteriorBasis::tensor(&lab, "nope", 3, 2).is_err());
    }

    #[test]
    fn partition_and_zero_rows() {
        let lab = lab2(0.05, 10);
        let c = interior_phantom(&lab, 0.3);
        let fb = ExteriorBasis::tensor(&lab, "W1", 3, 2).unwrap();
        let mut gb = ExteriorBasis::tensor(&lab, "W2", 2, 2).unwrap();
        gb.fields[0] = lab.zeros(SupportTag::ExteriorOnly);
        let d = diffusion_dn(&lab, &c, &fb, &gb).unwrap();
        let gap = &d.lambda.entries - &d.n_gamma.entries - &d.ext_ext.entries;
        let scale = d.lambda.max_abs();
        assert!(gap.iter().all(|v| v.abs() <= 1e-14 * scale.max(1.0)));
        assert!(d.lambda.entries.column(0).iter().all(|&v| v == 0.0));
        // determinism
        let again = diffusion_dn(&lab, &c, &fb, &gb).unwrap();
        assert_eq!(again.lambda.entries, d.lambda.entries);
    }

    #[test]
    fn heat_case_reduced_matches_neumann() {
        let lab = lab2(0.05, 10);
        let c = Conductivity::constant(1.0, &lab.spec, &lab.tg).unwrap();
        let pot = crate::solvers::potentials(&lab, &c).unwrap();
        let fb = ExteriorBasis::tensor(&lab, "W1", 2, 2).unwrap();
        let gb = ExteriorBasis::tensor(&lab, "W2", 2, 2).unwrap();
        let n = neumann_n_gamma(&lab, &c, &fb, &gb).unwrap();
        let q = dn_n_q(&lab, &c, &pot, &fb, &gb).unwrap();
        let d = (&n.entries - &q.entries).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(d < 1e-9, "{d:e}");
    }

    #[test]
    fn extension_does_not_matter() {
        let lab = lab2(0.05, 10);
        let c = Conductivity::from_fn(|x, t| 1.0 + 0.3 * bump(x / 0.7) * (1.0 + t), None, &lab.spec, &lab.tg, 0.5).unwrap();
        let pot = crate::solvers::potentials(&lab, &c).unwrap();
        let fb = ExteriorBasis::tensor(&lab, "W1", 2, 2).unwrap();
        let gb = ExteriorBasis::tensor(&lab, "W2", 2, 2).unwrap();
        let psi: Vec<Field> = (0..gb.len())
            .map(|j| sample(move |x, t| bump((x - 0.2) / 0.5) * (t + j as f64), &lab.spec, &lab.tg, SupportTag::InteriorOnly).unwrap())
            .collect();
        let a = dn_n_q(&lab, &c, &pot, &fb, &gb).unwrap();
        let b = dn_n_q_extended(&lab, &c, &pot, &fb, &gb, &psi).unwrap();
        let d = (&a.entries - &b.entries).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(d < 1e-8 * a.max_abs().max(1e-3), "{d:e}");
    }

    #[test]
    fn selfadjoint_heat_and_phantom() {
        let lab = lab2(0.05, 10);
        let fb = ExteriorBasis::tensor(&lab, "W1", 2, 2).unwrap();
        let gb = ExteriorBasis::tensor(&lab, "W2", 2, 2).unwrap();
        for c in [
            Conductivity::constant(1.0, &lab.spec, &lab.tg).unwrap(),
            Conductivity::from_fn(|x, t| 1.0 + 0.3 * bump(x / 0.7) * (1.0 + t), None, &lab.spec, &lab.tg, 0.5).unwrap(),
        ] {
            let pot = crate::solvers::potentials(&lab, &c).unwrap();
            let r = check_selfadjoint(&lab, &c, &pot, &fb, &gb).unwrap();
            assert!(r.residual < 1e-8, "{:?}", r);
            let swapped = check_selfadjoint(&lab, &c, &pot, &gb, &fb).unwrap();
            assert!(swapped.residual < 1e-8);
        }
    }

    #[test]
    fn old_new_equivalence() {
        let lab = lab2(0.05, 10);
        let c1 = interior_phantom(&lab, 0.0);
        let c2 = interior_phantom(&lab, 0.4);
        let fb = ExteriorBasis::tensor(&lab, "W1", 3, 2).unwrap();
        let gb = ExteriorBasis::tensor(&lab, "W2", 3, 2).unwrap();
        let same = check_old_new_equivalence(&lab, &c1, &c1, &fb, &gb).unwrap();
        assert_eq!((same.lambda_gap, same.n_gap, same.correction), (0.0, 0.0, 0.0));
        let r = check_old_new_equivalence(&lab, &c1, &c2, &fb, &gb).unwrap();
        assert!(r.lambda_gap > 1e-6);
        assert!((r.lambda_gap - r.n_gap).abs() <= r.correction + 1e-9);
        assert!(r.entrywise < 1e-9);
        let fb2 = ExteriorBasis::tensor(&lab, "W1", 2, 2).unwrap();
        assert!(check_old_new_equivalence(&lab, &c1, &c2, &fb, &fb2).is_err());
    }

    #[test]
    fn relation_theorem_and_warning() {
        let lab = lab2(0.05, 10);
        let c1 = interior_phantom(&lab, 0.0);
        let same = check_relation_theorem(&lab, &c1, &c1, &ExteriorBasis::tensor(&lab, "W1", 2, 2).unwrap(), &ExteriorBasis::tensor(&lab, "W2", 2, 2).unwrap()).unwrap();
        assert_eq!((same.n_gamma_diff, same.n_q_diff), (0.0, 0.0));
        assert!(same.warnings.is_empty());
        let step = Conductivity::from_fn(|x, _| if (1.4..1.6).contains(&x) { 1.2 } else { 1.0 }, None, &lab.spec, &lab.tg, 0.5)
            .unwrap()
            .with_breakpoints(vec![1.4, 1.6]);
        let fb = ExteriorBasis::tensor(&lab, "W1", 2, 2).unwrap();
        let gb = ExteriorBasis::tensor(&lab, "W2", 2, 2).unwrap();
        let r = check_relation_theorem(&lab, &step, &step, &fb, &gb).unwrap();
        assert!(!r.warnings.is_empty());
    }
}

//! θ-scheme Galerkin solvers for the diffusion, reduced and adjoint problems.
//!
//! Every problem is written as `(P u)' + S u = b` on interior rows, with the
//! unknown `u = z + x` split into interior values `z` and prescribed exterior
//! data `x`. The diffusion problem has `P = M`, `S = K_γ(t)`; the reduced one
//! has `P = M_{1/γ}(t)`, `S = A + M_Q(t)`.

use crate::domain::{time_reverse, Conductivity, DomainSpec, Field, FracOrder, SupportTag, TimeGrid};
use crate::error::{Error, Result};
use crate::kernel::{assemble_potentials, Assembler, Parts, PointwiseOptions, PotentialField, StiffnessSet};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, OnceLock};

/// Grid, order, time grid and the shared matrices.
#[derive(Debug, Clone)]
pub struct Lab {
    pub spec: DomainSpec,
    pub fo: FracOrder,
    pub tg: TimeGrid,
    pub asm: Assembler,
    pub st: StiffnessSet,
}

impl Lab {
    pub fn new(spec: DomainSpec, fo: FracOrder, tg: TimeGrid) -> Result<Self> {
        let asm = Assembler::new(&spec, fo)?;
        let st = asm.stiffness_set();
        Ok(Self { spec, fo, tg, asm, st })
    }

    /// Uses matrices from elsewhere (e.g. the on-disk cache).
    pub fn with_stiffness(spec: DomainSpec, fo: FracOrder, tg: TimeGrid, st: StiffnessSet) -> Result<Self> {
        let asm = Assembler::new(&spec, fo)?;
        if st.m.nrows() != spec.n_dof() {
            return Err(Error::Dimension("stiffness set does not match the grid".into()));
        }
        Ok(Self { spec, fo, tg, asm, st })
    }

    pub fn with_time_grid(&self, tg: TimeGrid) -> Self {
        Self { tg, ..self.clone() }
    }

    pub fn zeros(&self, tag: SupportTag) -> Field {
        Field::zeros_like(&self.spec, &self.tg, tag)
    }

    /// Weights `c_k` of the time pairing `τ Σ c_k (...)_k` matching the θ-scheme.
    pub fn pairing_weights(&self) -> Vec<f64> {
        let n = self.tg.n_t;
        let th = self.tg.theta;
        (0..=n)
            .map(|k| {
                if k == 0 {
                    1.0 - th
                } else if k == n {
                    th
                } else {
                    1.0
                }
            })
            .collect()
    }
}

/// Operators `P_k`, `S_k` (box-dof matrices) of one evolution problem.
pub trait StepOps: Sync {
    fn p(&self, k: usize) -> Result<Arc<DMatrix<f64>>>;
    fn s(&self, k: usize) -> Result<Arc<DMatrix<f64>>>;
    /// True when `P` and `S` do not depend on `k`.
    fn autonomous(&self) -> bool;
}

/// Weighted stiffness for one time slice.
#[derive(Debug)]
pub struct WeightedSlice {
    pub parts: Parts,
    pub full: Arc<DMatrix<f64>>,
}

/// Diffusion operators `P = M`, `S_k = K_γ(t_k)` with a per-slice cache.
pub struct DiffusionOps<'a> {
    pub lab: &'a Lab,
    pub c: &'a Conductivity,
    m: Arc<DMatrix<f64>>,
    slots: Vec<OnceLock<Result<Arc<WeightedSlice>>>>,
}

impl<'a> DiffusionOps<'a> {
    pub fn new(lab: &'a Lab, c: &'a Conductivity) -> Result<Self> {
        if c.gamma.n_nodes != lab.spec.n_nodes() || c.gamma.n_times != lab.tg.n_times() {
            return Err(Error::Dimension("conductivity sampled on another grid".into()));
        }
        let slots = (0..lab.tg.n_times()).map(|_| OnceLock::new()).collect();
        Ok(Self { lab, c, m: Arc::new(lab.st.m.clone()), slots })
    }

    pub fn slice(&self, k: usize) -> Result<Arc<WeightedSlice>> {
        let k = if self.c.time_independent { 0 } else { k };
        self.slots[k]
            .get_or_init(|| {
                let parts = self.lab.asm.weighted(self.c, k, &self.lab.st.a);
                let full = Arc::new(parts.full());
                Ok(Arc::new(WeightedSlice { parts, full }))
            })
            .as_ref()
            .map(Arc::clone)
            .map_err(|e| Error::Precondition(e.to_string()))
    }
}

impl StepOps for DiffusionOps<'_> {
    fn p(&self, _k: usize) -> Result<Arc<DMatrix<f64>>> {
        Ok(Arc::clone(&self.m))
    }

    fn s(&self, k: usize) -> Result<Arc<DMatrix<f64>>> {
        Ok(Arc::clone(&self.slice(k)?.full))
    }

    fn autonomous(&self) -> bool {
        self.c.time_independent
    }
}

/// Reduced operators `P_k = M^Ω_{1/γ(t_k)}`, `S_k = A + M^Ω_{Q(t_k)}`.
pub struct ReducedOps<'a> {
    pub lab: &'a Lab,
    pub c: &'a Conductivity,
    pub pot: &'a PotentialField,
    slots: Vec<OnceLock<(Arc<DMatrix<f64>>, Arc<DMatrix<f64>>, Arc<DMatrix<f64>>)>>,
}

impl<'a> ReducedOps<'a> {
    pub fn new(lab: &'a Lab, c: &'a Conductivity, pot: &'a PotentialField) -> Result<Self> {
        if c.gamma.n_times != lab.tg.n_times() || pot.big_q.n_times != lab.tg.n_times() {
            return Err(Error::Dimension("conductivity or potential sampled on another time grid".into()));
        }
        let slots = (0..lab.tg.n_times()).map(|_| OnceLock::new()).collect();
        Ok(Self { lab, c, pot, slots })
    }

    fn time_independent(&self) -> bool {
        self.c.time_independent && (1..self.pot.big_q.n_times).all(|k| self.pot.big_q.slice(k) == self.pot.big_q.slice(0))
    }

    /// `(P_k, S_k, M^Ω_{Q(t_k)})`
    pub fn mats(&self, k: usize) -> &(Arc<DMatrix<f64>>, Arc<DMatrix<f64>>, Arc<DMatrix<f64>>) {
        let k = if self.time_independent() { 0 } else { k };
        self.slots[k].get_or_init(|| {
            let inv: Vec<f64> = self.c.gamma.slice(k).iter().map(|g| 1.0 / g).collect();
            let p = self.lab.asm.mass_weighted(Some(&inv), true);
            let mq = self.lab.asm.mass_weighted(Some(self.pot.big_q.slice(k)), true);
            let s = &self.lab.st.a_full + &mq;
            (Arc::new(p), Arc::new(s), Arc::new(mq))
        })
    }
}

impl StepOps for ReducedOps<'_> {
    fn p(&self, k: usize) -> Result<Arc<DMatrix<f64>>> {
        Ok(Arc::clone(&self.mats(k).0))
    }

    fn s(&self, k: usize) -> Result<Arc<DMatrix<f64>>> {
        Ok(Arc::clone(&self.mats(k).1))
    }

    fn autonomous(&self) -> bool {
        self.time_independent()
    }
}

/// Operators read backwards in time: `P̃_k = P_{n-k}`.
pub struct Reversed<'a> {
    pub inner: &'a dyn StepOps,
    pub n_t: usize,
}

impl StepOps for Reversed<'_> {
    fn p(&self, k: usize) -> Result<Arc<DMatrix<f64>>> {
        self.inner.p(self.n_t - k)
    }

    fn s(&self, k: usize) -> Result<Arc<DMatrix<f64>>> {
        self.inner.s(self.n_t - k)
    }

    fn autonomous(&self) -> bool {
        self.inner.autonomous()
    }
}

/// How the time derivative is discretized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Mode {
    /// `(P_{k+1} u_{k+1} - P_k u_k) / τ`, the derivative acts on `P u`.
    Conservative,
    /// `P̄ (u_{k+1} - u_k) / τ` with `P̄ = θ P_{k+1} + (1-θ) P_k`.
    NonConservative,
}

/// One data set: exterior values (exterior-only), interior source and initial interior state.
#[derive(Debug, Clone, Copy)]
pub struct DataSet<'a> {
    pub ext: &'a Field,
    pub source: Option<&'a Field>,
    pub init: Option<&'a Field>,
}

impl<'a> DataSet<'a> {
    pub fn exterior(ext: &'a Field) -> Self {
        Self { ext, source: None, init: None }
    }
}

/// Diagnostics of a batch of solves with the same operators.
#[derive(Debug, Clone, Default, Serialize)]
pub struct SolveReport {
    #[serde(skip)]
    pub solutions: Vec<Field>,
    /// Per data set: `max_k ‖w_k‖²_M + τ Σ_k w_kᵀ S_k w_k` with `w = u - x`.
    pub energy_lhs: Vec<f64>,
    /// Per data set: `‖w_0‖²_M + τ Σ_k ‖F̃_k‖²_*`, dual norm through `(A + M)_II`.
    pub energy_rhs: Vec<f64>,
    pub max_rel_residual: f64,
    pub factorizations: usize,
    pub solves: usize,
}

impl SolveReport {
    pub fn solution(&self) -> &Field {
        &self.solutions[0]
    }

    /// Largest ratio `energy_lhs / energy_rhs` over data sets with nonzero data.
    pub fn energy_constant(&self) -> f64 {
        self.energy_lhs
            .iter()
            .zip(&self.energy_rhs)
            .filter(|(_, r)| **r > 0.0)
            .map(|(l, r)| l / r)
            .fold(0.0, f64::max)
    }
}

fn gather(v: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), v.ncols(), |i, j| v[(idx[i], j)])
}

fn restrict(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), idx.len(), |i, j| m[(idx[i], idx[j])])
}

fn dof_block(fields: &[Option<&Field>], k: usize, nd: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(nd, fields.len());
    for (j, f) in fields.iter().enumerate() {
        if let Some(f) = f {
            out.set_column(j, &f.dofs(k));
        }
    }
    out
}

/// Time-steps all data sets together; columns of the batch are data sets.
static JOBS: AtomicUsize = AtomicUsize::new(1);

/// Worker threads used by [`run_batch`] to split independent data sets.
pub fn set_jobs(n: usize) {
    JOBS.store(n.max(1), Ordering::Relaxed);
}

pub fn jobs() -> usize {
    JOBS.load(Ordering::Relaxed)
}

/// Solves every data set against the same step operators. With more than one
/// job the sets are split into contiguous chunks solved on separate threads;
/// the columns are independent so the result does not depend on the split.
pub fn run_batch(lab: &Lab, ops: &dyn StepOps, mode: Mode, data: &[DataSet]) -> Result<SolveReport> {
    let jobs = jobs().min(data.len());
    if jobs <= 1 {
        return run_batch_serial(lab, ops, mode, data);
    }
    let chunk = data.len().div_ceil(jobs);
    let parts: Vec<Result<SolveReport>> = std::thread::scope(|sc| {
        let hs: Vec<_> = data.chunks(chunk).map(|c| sc.spawn(move || run_batch_serial(lab, ops, mode, c))).collect();
        hs.into_iter().map(|h| h.join().expect("solver thread panicked")).collect()
    });
    let mut rep = SolveReport::default();
    for p in parts {
        let p = p?;
        rep.solutions.extend(p.solutions);
        rep.energy_lhs.extend(p.energy_lhs);
        rep.energy_rhs.extend(p.energy_rhs);
        rep.max_rel_residual = rep.max_rel_residual.max(p.max_rel_residual);
        rep.factorizations += p.factorizations;
        rep.solves += p.solves;
    }
    Ok(rep)
}

fn run_batch_serial(lab: &Lab, ops: &dyn StepOps, mode: Mode, data: &[DataSet]) -> Result<SolveReport> {
    let spec = &lab.spec;
    let tg = &lab.tg;
    let nd = spec.n_dof();
    let idx = spec.interior_dofs();
    let nb = data.len();
    let tau = tg.tau();
    let th = tg.theta;
    for d in data {
        for f in [Some(d.ext), d.source, d.init].into_iter().flatten() {
            if f.n_nodes != spec.n_nodes() || f.n_times != tg.n_times() {
                return Err(Error::Dimension("data field sampled on another grid".into()));
            }
        }
    }
    let exts: Vec<Option<&Field>> = data.iter().map(|d| Some(d.ext)).collect();
    let srcs: Vec<Option<&Field>> = data.iter().map(|d| d.source).collect();
    let inits: Vec<Option<&Field>> = data.iter().map(|d| d.init).collect();
    let mass = &lab.st.m;

    let mut interior_mask = vec![false; nd];
    idx.iter().for_each(|&i| interior_mask[i] = true);
    let mask_rows = |mut m: DMatrix<f64>| {
        for i in 0..nd {
            if interior_mask[i] {
                m.row_mut(i).fill(0.0);
            }
        }
        m
    };
    let ext_at = |k: usize| mask_rows(dof_block(&exts, k, nd));
    let src_at = |k: usize| -> DMatrix<f64> { gather(&(mass * dof_block(&srcs, k, nd)), &idx) };

    // energy norm on interior rows
    let dual = {
        let e = restrict(&(&lab.st.a_full + mass), &idx);
        e.cholesky().ok_or_else(|| Error::Precondition("(A + M)_II not SPD".into()))?
    };
    let mass_ii = restrict(mass, &idx);

    let mut sols: Vec<Field> = (0..nb).map(|_| Field::zeros_like(spec, tg, SupportTag::Full)).collect();
    let mut x_cur = ext_at(0);
    let mut u_cur = x_cur.clone();
    let z0 = gather(&dof_block(&inits, 0, nd), &idx);
    for (r, &i) in idx.iter().enumerate() {
        for j in 0..nb {
            u_cur[(i, j)] += z0[(r, j)];
        }
    }
    let store = |sols: &mut Vec<Field>, k: usize, u: &DMatrix<f64>| {
        for (j, f) in sols.iter_mut().enumerate() {
            f.set_dofs(k, &DVector::from_iterator(nd, u.column(j).iter().copied()));
        }
    };
    store(&mut sols, 0, &u_cur);

    let w_energy = |w: &DMatrix<f64>, m: &DMatrix<f64>| -> Vec<f64> {
        (0..nb).map(|j| {
            let c = w.column(j);
            c.dot(&(m * c))
        }).collect()
    };
    let mut e_max = w_energy(&z0, &mass_ii);
    let mut e_sum = vec![0.0; nb];
    let mut f_sum = vec![0.0; nb];
    let e0 = e_max.clone();

    let mut p_cur = ops.p(0)?;
    let mut s_cur = ops.s(0)?;
    let mut b_cur = src_at(0);
    let mut lu: Option<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>> = None;
    let mut factorizations = 0;
    let mut solves = 0;
    let mut max_res = 0.0f64;

    for k in 0..tg.n_t {
        let p_next = ops.p(k + 1)?;
        let s_next = ops.s(k + 1)?;
        let x_next = ext_at(k + 1);
        let b_next = src_at(k + 1);
        let pbar: DMatrix<f64> = match mode {
            Mode::Conservative => (*p_next).clone(),
            Mode::NonConservative => {
                if th == 1.0 {
                    (*p_next).clone()
                } else {
                    &*p_next * th + &*p_cur * (1.0 - th)
                }
            }
        };
        let mut rhs_full = match mode {
            Mode::Conservative => &*p_cur * &u_cur / tau - &*p_next * &x_next / tau,
            Mode::NonConservative => &pbar * (&u_cur - &x_next) / tau,
        };
        if th != 1.0 {
            rhs_full -= &*s_cur * &u_cur * (1.0 - th);
        }
        rhs_full -= &*s_next * &x_next * th;
        let mut rhs = gather(&rhs_full, &idx);
        rhs += &b_next * th;
        if th != 1.0 {
            rhs += &b_cur * (1.0 - th);
        }
        if lu.is_none() || !ops.autonomous() {
            let e = restrict(&pbar, &idx) / tau + restrict(&s_next, &idx) * th;
            lu = Some(e.lu());
            factorizations += 1;
        }
        let fac = lu.as_ref().unwrap();
        let z = fac.solve(&rhs).ok_or(Error::Singular(k + 1))?;
        solves += nb;
        // residual check against the assembled step matrix
        let e = restrict(&pbar, &idx) / tau + restrict(&s_next, &idx) * th;
        let res = &e * &z - &rhs;
        for j in 0..nb {
            let rn = rhs.column(j).norm();
            if rn > 0.0 {
                max_res = max_res.max(res.column(j).norm() / rn);
            }
        }

        // data-only residual of the lifted problem for the energy estimate
        let ftil = {
            let lift = &*p_next * &x_next / tau - &*p_cur * &x_cur / tau + &*s_next * &x_next;
            &b_next - gather(&lift, &idx)
        };
        let y = dual.solve(&ftil);
        for j in 0..nb {
            f_sum[j] += tau * ftil.column(j).dot(&y.column(j));
        }
        let snext_ii = restrict(&s_next, &idx);
        for (j, (em, es)) in e_max.iter_mut().zip(e_sum.iter_mut()).enumerate() {
            let c = z.column(j);
            *em = em.max(c.dot(&(&mass_ii * c)));
            *es += tau * c.dot(&(&snext_ii * c));
        }

        let mut u_next = x_next.clone();
        for (r, &i) in idx.iter().enumerate() {
            for j in 0..nb {
                u_next[(i, j)] = z[(r, j)];
            }
        }
        store(&mut sols, k + 1, &u_next);
        u_cur = u_next;
        x_cur = x_next;
        p_cur = p_next;
        s_cur = s_next;
        b_cur = b_next;
    }
    if sols.iter().any(|f| !f.is_finite()) {
        return Err(Error::Precondition("non-finite solution".into()));
    }
    Ok(SolveReport {
        solutions: sols,
        energy_lhs: e_max.iter().zip(&e_sum).map(|(a, b)| a + b).collect(),
        energy_rhs: e0.iter().zip(&f_sum).map(|(a, b)| a + b).collect(),
        max_rel_residual: max_res,
        factorizations,
        solves,
    })
}

fn check_compat(lab: &Lab, f: &Field, init: Option<&Field>) -> Result<()> {
    let spec = &lab.spec;
    for i in 0..spec.n_nodes() {
        for k in 0..f.n_times {
            if spec.class[i] == crate::domain::NodeClass::Interior && f.get(i, k) != 0.0 {
                return Err(Error::Precondition("exterior data is nonzero inside omega".into()));
            }
        }
    }
    if let Some(u0) = init {
        for i in 0..spec.n_nodes() {
            if spec.class[i] != crate::domain::NodeClass::Interior && u0.get(i, 0) != 0.0 {
                return Err(Error::Precondition("initial state must be interior-only after lifting".into()));
            }
        }
    }
    Ok(())
}

/// Nonlocal diffusion `∂_t u + L_γ u = F` in Ω, `u = f` outside, `u(0) = u0 + f(0)`.
///
/// `u0` holds the interior part of the initial state (slice 0 is read).
pub fn solve_forward_diffusion(
    lab: &Lab,
    c: &Conductivity,
    f: &Field,
    source: Option<&Field>,
    u0: Option<&Field>,
) -> Result<SolveReport> {
    check_compat(lab, f, u0)?;
    let ops = DiffusionOps::new(lab, c)?;
    run_batch(lab, &ops, Mode::Conservative, &[DataSet { ext: f, source, init: u0 }])
}

/// Reduced problem `∂_t(γ^{-1} v) + ((-Δ)^s + Q) v = G` in Ω, `v = g` outside.
pub fn solve_reduced_schrodinger(
    lab: &Lab,
    c: &Conductivity,
    pot: &PotentialField,
    g: &Field,
    source: Option<&Field>,
    v0: Option<&Field>,
) -> Result<SolveReport> {
    check_compat(lab, g, v0)?;
    let ops = ReducedOps::new(lab, c, pot)?;
    run_batch(lab, &ops, Mode::Conservative, &[DataSet { ext: g, source, init: v0 }])
}

/// Backward problem `-γ^{-1} ∂_t v* + ((-Δ)^s + Q) v* = G`, `v*(T) = 0`, `v* = g` outside,
/// solved forward in reversed time and reversed back.
pub fn solve_adjoint_backward(
    lab: &Lab,
    c: &Conductivity,
    pot: &PotentialField,
    g: &Field,
    source: Option<&Field>,
) -> Result<SolveReport> {
    check_compat(lab, g, None)?;
    let ops = ReducedOps::new(lab, c, pot)?;
    adjoint_batch(lab, &ops, &[DataSet { ext: g, source, init: None }])
}

/// Backward runs for a batch: reverse data and operators, step with the
/// non-conservative derivative, reverse the result.
pub fn adjoint_batch(lab: &Lab, ops: &dyn StepOps, data: &[DataSet]) -> Result<SolveReport> {
    let rev = Reversed { inner: ops, n_t: lab.tg.n_t };
    let ext_r: Vec<Field> = data.iter().map(|d| time_reverse(d.ext)).collect();
    let src_r: Vec<Option<Field>> = data.iter().map(|d| d.source.map(time_reverse)).collect();
    let sets: Vec<DataSet> = ext_r
        .iter()
        .zip(&src_r)
        .map(|(e, s)| DataSet { ext: e, source: s.as_ref(), init: None })
        .collect();
    let mut rep = run_batch(lab, &rev, Mode::NonConservative, &sets)?;
    rep.solutions = rep.solutions.iter().map(time_reverse).collect();
    Ok(rep)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Direction {
    /// `v = γ^{1/2} u`
    ToSchrodinger,
    /// `u = γ^{-1/2} v`
    FromSchrodinger,
}

pub fn liouville_transform(u: &Field, c: &Conductivity, dir: Direction) -> Result<Field> {
    if u.values.len() != c.gamma.values.len() {
        return Err(Error::Dimension("field and conductivity shapes differ".into()));
    }
    let values = u
        .values
        .iter()
        .zip(&c.gamma.values)
        .map(|(v, g)| match dir {
            Direction::ToSchrodinger => v * g.sqrt(),
            Direction::FromSchrodinger => v / g.sqrt(),
        })
        .collect();
    Ok(Field { values, ..u.clone() })
}

/// Relative `L²(0,T; L²)` distance between a field pair, measured with the box mass.
pub fn relative_l2(lab: &Lab, a: &Field, b: &Field) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for k in 0..a.n_times {
        let d = a.dofs(k) - b.dofs(k);
        let bb = b.dofs(k);
        num += d.dot(&(&lab.st.m * &d));
        den += bb.dot(&(&lab.st.m * &bb));
    }
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LiouvilleCheck {
    pub discrepancy: f64,
    pub diffusion_residual: f64,
    pub reduced_residual: f64,
}

/// Compares the reduced solution with data `γ^{1/2} f` against `γ^{1/2} u_f`.
pub fn verify_liouville(lab: &Lab, c: &Conductivity, pot: &PotentialField, f: &Field) -> Result<LiouvilleCheck> {
    let u = solve_forward_diffusion(lab, c, f, None, None)?;
    let g = liouville_transform(f, c, Direction::ToSchrodinger)?;
    let v = solve_reduced_schrodinger(lab, c, pot, &g, None, None)?;
    let vu = liouville_transform(u.solution(), c, Direction::ToSchrodinger)?;
    Ok(LiouvilleCheck {
        discrepancy: relative_l2(lab, v.solution(), &vu),
        diffusion_residual: u.max_rel_residual,
        reduced_residual: v.max_rel_residual,
    })
}

/// Potentials with default quadrature controls.
pub fn potentials(lab: &Lab, c: &Conductivity) -> Result<PotentialField> {
    assemble_potentials(c, &lab.spec, lab.fo, PointwiseOptions::default())
}

//! Grids on a truncated box, interior/exterior partition, time grids and sampled fields.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

const SNAP_TOL: f64 = 1e-9;

/// Fractional order `s` in spatial dimension `n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FracOrder {
    s: f64,
    n: usize,
}

impl FracOrder {
    /// Accepts any `0 < s < 1`. Use [`FracOrder::strict`] where `s < n/2` matters.
    pub fn new(n: usize, s: f64) -> Result<Self> {
        if !(1..=2).contains(&n) {
            return Err(Error::FracOrder(format!("dimension {n} unsupported, expected 1 or 2")));
        }
        if !(s > 0.0 && s < 1.0) {
            return Err(Error::FracOrder(format!("s = {s} outside (0, 1)")));
        }
        Ok(Self { s, n })
    }

    /// Enforces `0 < s < min(1, n/2)`.
    pub fn strict(n: usize, s: f64) -> Result<Self> {
        let fo = Self::new(n, s)?;
        let cap = (n as f64 / 2.0).min(1.0);
        if s >= cap {
            return Err(Error::FracOrder(format!("s = {s} not below min(1, n/2) = {cap}")));
        }
        Ok(fo)
    }

    pub fn s(&self) -> f64 {
        self.s
    }

    pub fn n(&self) -> usize {
        self.n
    }
}

/// Closed interval `[a, b]` with `a < b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub a: f64,
    pub b: f64,
}

impl Interval {
    pub fn new(a: f64, b: f64) -> Self {
        Self { a, b }
    }

    pub fn len(&self) -> f64 {
        self.b - self.a
    }

    pub fn contains_open(&self, x: f64) -> bool {
        x > self.a && x < self.b
    }

    pub fn overlaps(&self, other: &Interval) -> bool {
        self.a < other.b && other.a < self.b
    }

    fn touches(&self, other: &Interval) -> bool {
        self.a <= other.b && other.a <= self.b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeClass {
    /// Box boundary; the hat there leaves the box and is not a degree of freedom.
    Boundary,
    /// Node in the open set Ω.
    Interior,
    /// Everything else, including the two nodes on ∂Ω.
    Exterior,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExteriorSet {
    pub name: String,
    pub interval: Interval,
    /// Node index range `[first, last]` of the snapped endpoints.
    pub nodes: (usize, usize),
}

/// Plain description used to build a [`DomainSpec`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainConfig {
    pub box_halfwidth: f64,
    pub h: f64,
    pub omega: (f64, f64),
    #[serde(default)]
    pub exterior: Vec<(String, f64, f64)>,
    /// Pairs of exterior set names that must not intersect.
    #[serde(default)]
    pub disjoint_pairs: Vec<(String, String)>,
}

/// Uniform 1D grid on `[-L, L]` with nodes `x_i = -L + i h`.
#[derive(Debug, Clone, Serialize)]
pub struct DomainSpec {
    pub l: f64,
    pub h: f64,
    pub n_el: usize,
    pub x: Vec<f64>,
    pub class: Vec<NodeClass>,
    pub omega: Interval,
    /// Node indices of the two endpoints of Ω.
    pub omega_nodes: (usize, usize),
    pub exterior: Vec<ExteriorSet>,
    /// Element `e` spans nodes `e, e+1`; true when it lies in Ω.
    pub elem_in_omega: Vec<bool>,
    /// Node indices of interior nodes, ascending.
    pub interior: Vec<usize>,
}

fn snap(v: f64, l: f64, h: f64, what: &str) -> Result<usize> {
    let r = (v + l) / h;
    let k = r.round();
    if (r - k).abs() > SNAP_TOL * r.abs().max(1.0) || k < 0.0 {
        return Err(Error::Snap(format!("{what} endpoint {v} is not a grid node for h = {h}")));
    }
    Ok(k as usize)
}

/// Builds a grid and region masks, checking padding, snapping and disjointness.
pub fn build_domain(cfg: &DomainConfig) -> Result<DomainSpec> {
    let l = cfg.box_halfwidth;
    let h = cfg.h;
    if !(l > 0.0 && h > 0.0 && h < l) {
        return Err(Error::Domain(format!("need L > h > 0, got L = {l}, h = {h}")));
    }
    let n_el_f = 2.0 * l / h;
    let n_el = n_el_f.round() as usize;
    if (n_el_f - n_el as f64).abs() > SNAP_TOL * n_el_f {
        return Err(Error::Snap(format!("2L = {} is not a multiple of h = {h}", 2.0 * l)));
    }
    let (oa, ob) = cfg.omega;
    if oa >= ob {
        return Err(Error::Domain(format!("empty omega ({oa}, {ob})")));
    }
    if oa < -l + 2.0 * h - SNAP_TOL || ob > l - 2.0 * h + SNAP_TOL {
        return Err(Error::Padding(format!(
            "omega ({oa}, {ob}) must stay 2h = {} inside the box [-{l}, {l}]",
            2.0 * h
        )));
    }
    let ia = snap(oa, l, h, "omega")?;
    let ib = snap(ob, l, h, "omega")?;
    let omega = Interval::new(oa, ob);

    let mut exterior = Vec::with_capacity(cfg.exterior.len());
    for (name, a, b) in &cfg.exterior {
        if a >= b {
            return Err(Error::Domain(format!("exterior set {name} is empty")));
        }
        if *a < -l - SNAP_TOL || *b > l + SNAP_TOL {
            return Err(Error::Domain(format!("exterior set {name} leaves the box")));
        }
        let iv = Interval::new(*a, *b);
        if iv.touches(&omega) {
            return Err(Error::Domain(format!("exterior set {name} overlaps the closure of omega")));
        }
        if exterior.iter().any(|e: &ExteriorSet| e.name == *name) {
            return Err(Error::Domain(format!("duplicate exterior set {name}")));
        }
        let nodes = (snap(*a, l, h, name)?, snap(*b, l, h, name)?);
        exterior.push(ExteriorSet { name: name.clone(), interval: iv, nodes });
    }
    for (p, q) in &cfg.disjoint_pairs {
        let find = |n: &str| {
            exterior
                .iter()
                .find(|e| e.name == n)
                .ok_or_else(|| Error::Domain(format!("unknown exterior set {n}")))
        };
        let (ep, eq) = (find(p)?, find(q)?);
        if ep.interval.touches(&eq.interval) {
            return Err(Error::Domain(format!("sets {p} and {q} flagged disjoint but intersect")));
        }
    }

    let x: Vec<f64> = (0..=n_el).map(|i| -l + i as f64 * h).collect();
    let class: Vec<NodeClass> = (0..=n_el)
        .map(|i| {
            if i == 0 || i == n_el {
                NodeClass::Boundary
            } else if i > ia && i < ib {
                NodeClass::Interior
            } else {
                NodeClass::Exterior
            }
        })
        .collect();
    let elem_in_omega = (0..n_el).map(|e| e >= ia && e < ib).collect();
    let interior = (ia + 1..ib).collect();
    Ok(DomainSpec { l, h, n_el, x, class, omega, omega_nodes: (ia, ib), exterior, elem_in_omega, interior })
}

impl DomainSpec {
    pub fn n_nodes(&self) -> usize {
        self.x.len()
    }

    /// Number of hat functions supported in the box (all non-boundary nodes).
    pub fn n_dof(&self) -> usize {
        self.n_el - 1
    }

    pub fn n_interior(&self) -> usize {
        self.interior.len()
    }

    pub fn exterior_set(&self, name: &str) -> Result<&ExteriorSet> {
        self.exterior
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Domain(format!("unknown exterior set {name}")))
    }

    /// Dof index (nodes `1..n_el`) of each interior node.
    pub fn interior_dofs(&self) -> Vec<usize> {
        self.interior.iter().map(|&i| i - 1).collect()
    }

    /// Content string used for cache keys.
    pub fn fingerprint(&self) -> String {
        let mut s = format!("n=1;L={:e};h={:e};omega={:e},{:e}", self.l, self.h, self.omega.a, self.omega.b);
        for e in &self.exterior {
            s.push_str(&format!(";{}={:e},{:e}", e.name, e.interval.a, e.interval.b));
        }
        s
    }
}

/// Uniform time grid with `n_t` steps of `θ`-scheme.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t_final: f64,
    pub n_t: usize,
    pub theta: f64,
}

impl TimeGrid {
    pub fn new(t_final: f64, n_t: usize, theta: f64) -> Result<Self> {
        if !(t_final > 0.0) || n_t == 0 {
            return Err(Error::Domain(format!("bad time grid T = {t_final}, n_t = {n_t}")));
        }
        if theta != 1.0 && theta != 0.5 {
            return Err(Error::Domain(format!("theta = {theta}, expected 1/2 or 1")));
        }
        Ok(Self { t_final, n_t, theta })
    }

    pub fn tau(&self) -> f64 {
        self.t_final / self.n_t as f64
    }

    pub fn t(&self, k: usize) -> f64 {
        if k == self.n_t {
            self.t_final
        } else {
            k as f64 * self.tau()
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_t).map(|k| self.t(k)).collect()
    }

    pub fn n_times(&self) -> usize {
        self.n_t + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SupportTag {
    InteriorOnly,
    ExteriorOnly,
    Full,
}

/// Space-time samples stored time-major: `values[k * n_nodes + i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub n_nodes: usize,
    pub n_times: usize,
    pub values: Vec<f64>,
    pub tag: SupportTag,
}

impl Field {
    pub fn zeros(n_nodes: usize, n_times: usize, tag: SupportTag) -> Self {
        Self { n_nodes, n_times, values: vec![0.0; n_nodes * n_times], tag }
    }

    pub fn zeros_like(spec: &DomainSpec, tg: &TimeGrid, tag: SupportTag) -> Self {
        Self::zeros(spec.n_nodes(), tg.n_times(), tag)
    }

    pub fn get(&self, i: usize, k: usize) -> f64 {
        self.values[k * self.n_nodes + i]
    }

    pub fn set(&mut self, i: usize, k: usize, v: f64) {
        self.values[k * self.n_nodes + i] = v;
    }

    pub fn slice(&self, k: usize) -> &[f64] {
        &self.values[k * self.n_nodes..(k + 1) * self.n_nodes]
    }

    pub fn slice_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.values[k * self.n_nodes..(k + 1) * self.n_nodes]
    }

    /// Values at box dofs (nodes `1..n_nodes-1`) for time index `k`.
    pub fn dofs(&self, k: usize) -> DVector<f64> {
        let s = self.slice(k);
        DVector::from_column_slice(&s[1..self.n_nodes - 1])
    }

    pub fn set_dofs(&mut self, k: usize, v: &DVector<f64>) {
        let n = self.n_nodes;
        let s = self.slice_mut(k);
        s[1..n - 1].copy_from_slice(v.as_slice());
        s[0] = 0.0;
        s[n - 1] = 0.0;
    }

    pub fn scale(&self, a: f64) -> Field {
        Field { values: self.values.iter().map(|v| a * v).collect(), ..self.clone() }
    }

    /// `a * self + b * other`, keeping `self`'s tag.
    pub fn axpby(&self, a: f64, other: &Field, b: f64) -> Result<Field> {
        if self.values.len() != other.values.len() {
            return Err(Error::Dimension("field shapes differ".into()));
        }
        let values = self.values.iter().zip(&other.values).map(|(x, y)| a * x + b * y).collect();
        Ok(Field { values, ..self.clone() })
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Pointwise product.
    pub fn mul(&self, other: &Field) -> Result<Field> {
        if self.values.len() != other.values.len() {
            return Err(Error::Dimension("field shapes differ".into()));
        }
        let values = self.values.iter().zip(&other.values).map(|(x, y)| x * y).collect();
        Ok(Field { values, ..self.clone() })
    }
}

/// Exterior-only fields also vanish on ∂Ω so that they are mass-orthogonal to interior fields.
fn keep(tag: SupportTag, spec: &DomainSpec, i: usize) -> bool {
    match tag {
        SupportTag::Full => true,
        SupportTag::InteriorOnly => spec.class[i] == NodeClass::Interior,
        SupportTag::ExteriorOnly => {
            spec.class[i] == NodeClass::Exterior && i != spec.omega_nodes.0 && i != spec.omega_nodes.1
        }
    }
}

/// Samples `expr(x_i, t_k)` and masks it according to `tag`.
pub fn sample(
    expr: impl Fn(f64, f64) -> f64,
    spec: &DomainSpec,
    tg: &TimeGrid,
    tag: SupportTag,
) -> Result<Field> {
    let mut f = Field::zeros_like(spec, tg, tag);
    for k in 0..tg.n_times() {
        let t = tg.t(k);
        for i in 0..spec.n_nodes() {
            if !keep(tag, spec, i) {
                continue;
            }
            let v = expr(spec.x[i], t);
            if !v.is_finite() {
                return Err(Error::NonFinite { node: i, step: k });
            }
            f.set(i, k, v);
        }
    }
    Ok(f)
}

/// `u*(x, t) = u(x, T - t)` on the grid.
pub fn time_reverse(u: &Field) -> Field {
    let mut out = u.clone();
    let nt = u.n_times;
    for k in 0..nt {
        out.slice_mut(k).copy_from_slice(u.slice(nt - 1 - k));
    }
    out
}

/// Norms of a field measured with the mass and fractional stiffness matrices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DiscreteNorms {
    /// `sqrt(τ Σ_k u_kᵀ M u_k)`
    pub l2_space_time: f64,
    /// `τ Σ_k u_kᵀ A u_k`
    pub hs_seminorm_sq: f64,
    /// `max_k sqrt(u_kᵀ M u_k)`
    pub linf_l2: f64,
}

pub fn discrete_norms(u: &Field, a: &DMatrix<f64>, m: &DMatrix<f64>, tg: &TimeGrid) -> Result<DiscreteNorms> {
    if u.n_nodes < 2 || a.nrows() != u.n_nodes - 2 || m.nrows() != a.nrows() || u.n_times != tg.n_times() {
        return Err(Error::Dimension(format!(
            "field has {} nodes x {} times, matrices are {}",
            u.n_nodes,
            u.n_times,
            a.nrows()
        )));
    }
    let tau = tg.tau();
    let (mut l2, mut hs, mut linf) = (0.0, 0.0, 0.0f64);
    for k in 0..u.n_times {
        let v = u.dofs(k);
        let mm = v.dot(&(m * &v));
        l2 += tau * mm;
        hs += tau * v.dot(&(a * &v));
        linf = linf.max(mm.sqrt());
    }
    Ok(DiscreteNorms { l2_space_time: l2.sqrt(), hs_seminorm_sq: hs, linf_l2: linf })
}

/// Smallest eigenvalue of the symmetric pencil `(a, b)` with `b` positive definite.
pub fn pencil_min_eig(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    let chol = b.clone().cholesky().ok_or_else(|| Error::Precondition("pencil matrix not SPD".into()))?;
    let l = chol.l();
    let linv = l
        .clone()
        .solve_lower_triangular(&DMatrix::identity(a.nrows(), a.nrows()))
        .ok_or_else(|| Error::Precondition("singular Cholesky factor".into()))?;
    let c = &linv * a * linv.transpose();
    let c = (&c + c.transpose()) * 0.5;
    let eig = c.symmetric_eigenvalues();
    Ok(eig.iter().cloned().fold(f64::INFINITY, f64::min))
}

/// Restriction of a dof matrix to the given dof indices.
pub fn restrict(mat: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), idx.len(), |i, j| mat[(idx[i], idx[j])])
}

pub type ScalarFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// Sampled conductivity `γ(x, t)` with derived quantities.
#[derive(Clone)]
pub struct Conductivity {
    pub gamma: Field,
    /// `γ^{1/2} - 1`
    pub m: Field,
    pub dt_gamma: Field,
    pub gamma0: f64,
    /// Value of γ outside the box per time index (γ is constant in x there).
    pub far: Vec<f64>,
    /// Per time index, `Some(c)` when the slice is the constant `c` everywhere.
    pub constant_slice: Vec<Option<f64>>,
    pub time_independent: bool,
    /// Sample times.
    pub times: Vec<f64>,
    /// Analytic closure, when supplied; used by the pointwise fractional Laplacian.
    pub closure: Option<ScalarFn>,
    /// Points where the closure is not smooth.
    pub breakpoints: Vec<f64>,
}

impl std::fmt::Debug for Conductivity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Conductivity")
            .field("gamma0", &self.gamma0)
            .field("time_independent", &self.time_independent)
            .field("far", &self.far.first())
            .finish()
    }
}

impl Conductivity {
    /// γ ≡ c.
    pub fn constant(c: f64, spec: &DomainSpec, tg: &TimeGrid) -> Result<Self> {
        let g0 = c.min(1.0 / c);
        Self::from_fn(move |_, _| c, None, spec, tg, g0)
    }

    /// Samples `gamma` at all nodes; `dt` defaults to centered differences in time.
    pub fn from_fn<F>(
        gamma: F,
        dt: Option<ScalarFn>,
        spec: &DomainSpec,
        tg: &TimeGrid,
        gamma0: f64,
    ) -> Result<Self>
    where
        F: Fn(f64, f64) -> f64 + Send + Sync + 'static,
    {
        let gamma: ScalarFn = Arc::new(gamma);
        let g = sample(|x, t| gamma(x, t), spec, tg, SupportTag::Full)?;
        let far: Vec<f64> = (0..tg.n_times()).map(|k| gamma(spec.l, tg.t(k))).collect();
        let dtg = match &dt {
            Some(d) => sample(|x, t| d(x, t), spec, tg, SupportTag::Full)?,
            None => {
                let eps = 1e-4 * tg.t_final;
                sample(|x, t| (gamma(x, t + eps) - gamma(x, t - eps)) / (2.0 * eps), spec, tg, SupportTag::Full)?
            }
        };
        let mut c = Self::from_samples(g, dtg, far, tg.times(), gamma0)?;
        c.closure = Some(gamma);
        Ok(c)
    }

    /// Builds from raw samples. `far[k]` is γ outside the box at time `k`.
    pub fn from_samples(gamma: Field, dt_gamma: Field, far: Vec<f64>, times: Vec<f64>, gamma0: f64) -> Result<Self> {
        if !(gamma0 > 0.0 && gamma0 <= 1.0) {
            return Err(Error::Precondition(format!("gamma0 = {gamma0} outside (0, 1]")));
        }
        let nn = gamma.n_nodes;
        for k in 0..gamma.n_times {
            for i in 0..nn {
                let v = gamma.get(i, k);
                if !v.is_finite() {
                    return Err(Error::NonFinite { node: i, step: k });
                }
                if v < gamma0 * (1.0 - 1e-14) || v > (1.0 / gamma0) * (1.0 + 1e-14) {
                    return Err(Error::Ellipticity { node: i, step: k, value: v, gamma0 });
                }
            }
        }
        let m = Field { values: gamma.values.iter().map(|g| g.sqrt() - 1.0).collect(), ..gamma.clone() };
        let constant_slice = (0..gamma.n_times)
            .map(|k| {
                let s = gamma.slice(k);
                let c = s[0];
                (s.iter().all(|&v| v == c) && far[k] == c).then_some(c)
            })
            .collect();
        let time_independent = (1..gamma.n_times).all(|k| gamma.slice(k) == gamma.slice(0) && far[k] == far[0]);
        let mut dt_gamma = dt_gamma;
        if time_independent {
            dt_gamma.values.iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(Self {
            gamma,
            m,
            dt_gamma,
            gamma0,
            far,
            constant_slice,
            time_independent,
            times,
            closure: None,
            breakpoints: Vec::new(),
        })
    }

    pub fn with_breakpoints(mut self, b: Vec<f64>) -> Self {
        self.breakpoints = b;
        self
    }

    /// Nodal `γ^{1/2}` at time index `k`.
    pub fn sqrt_slice(&self, k: usize) -> Vec<f64> {
        self.gamma.slice(k).iter().map(|g| g.sqrt()).collect()
    }

    /// Whether γ agrees with `other` (bitwise, all times) on the given node range.
    pub fn agrees_on(&self, other: &Conductivity, nodes: (usize, usize)) -> bool {
        (0..self.gamma.n_times).all(|k| {
            (nodes.0..=nodes.1).all(|i| self.gamma.get(i, k) == other.gamma.get(i, k))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn cfg() -> DomainConfig {
        DomainConfig {
            box_halfwidth: 2.0,
            h: 0.02,
            omega: (-1.0, 1.0),
            exterior: vec![("W".into(), 1.2, 1.6)],
            disjoint_pairs: vec![],
        }
    }

    #[test]
    fn node_counts_by_hand_formula() {
        let d = build_domain(&cfg()).unwrap();
        // 2L/h + 1 nodes, and (b - a)/h - 1 nodes strictly inside Ω
        assert_eq!(d.n_nodes(), (2.0 * 2.0 / 0.02) as usize + 1);
        assert_eq!(d.n_nodes(), 201);
        assert_eq!(d.n_interior(), 99);
        assert_eq!(d.class.iter().filter(|c| **c == NodeClass::Boundary).count(), 2);
    }

    #[test]
    fn padding_and_snapping_errors() {
        let mut c = cfg();
        c.omega = (-2.0, 1.0);
        assert!(matches!(build_domain(&c), Err(Error::Padding(_))));
        let mut c = cfg();
        c.omega = (-1.0, 0.995);
        assert!(matches!(build_domain(&c), Err(Error::Snap(_))));
        let mut c = cfg();
        c.exterior = vec![("W".into(), 0.8, 1.4)];
        assert!(build_domain(&c).is_err());
    }

    #[test]
    fn disjoint_pair_accepted_and_rejected() {
        let mut c = cfg();
        c.exterior = vec![("W1".into(), 1.2, 1.4), ("W2".into(), -1.6, -1.3)];
        c.disjoint_pairs = vec![("W1".into(), "W2".into())];
        assert!(build_domain(&c).is_ok());
        c.exterior = vec![("W1".into(), 1.2, 1.4), ("W2".into(), 1.3, 1.6)];
        assert!(build_domain(&c).is_err());
    }

    #[test]
    fn frac_order_bounds() {
        assert!(FracOrder::new(1, 0.5).is_ok());
        assert!(FracOrder::strict(1, 0.5).is_err());
        assert!(FracOrder::strict(1, 0.25).is_ok());
        assert!(FracOrder::new(1, 1.0).is_err());
        assert!(FracOrder::new(3, 0.5).is_err());
    }

    #[test]
    fn sampling_masks() {
        let d = build_domain(&cfg()).unwrap();
        let tg = TimeGrid::new(1.0, 4, 1.0).unwrap();
        let z = sample(|_, _| 0.0, &d, &tg, SupportTag::Full).unwrap();
        assert_eq!(z.max_abs(), 0.0);
        let one = sample(|_, _| 1.0, &d, &tg, SupportTag::Full).unwrap();
        assert!(one.values.iter().all(|&v| v == 1.0));
        let t = sample(|x, _| (1.0 - x * x).max(0.0).sqrt(), &d, &tg, SupportTag::InteriorOnly).unwrap();
        for k in 0..tg.n_times() {
            for i in 0..d.n_nodes() {
                if d.class[i] != NodeClass::Interior {
                    assert_eq!(t.get(i, k), 0.0);
                }
            }
        }
        assert!(sample(|_, _| f64::NAN, &d, &tg, SupportTag::Full).is_err());
    }

    #[test]
    fn reversal_of_linear_time() {
        let d = build_domain(&cfg()).unwrap();
        let tg = TimeGrid::new(1.0, 10, 1.0).unwrap();
        let u = sample(|_, t| t, &d, &tg, SupportTag::Full).unwrap();
        let r = time_reverse(&u);
        for k in 0..tg.n_times() {
            assert!((r.get(5, k) - (1.0 - tg.t(k))).abs() < 1e-15);
        }
        let c = sample(|x, _| x, &d, &tg, SupportTag::Full).unwrap();
        assert_eq!(time_reverse(&c), c);
    }

    #[test]
    fn conductivity_derived_fields() {
        let d = build_domain(&cfg()).unwrap();
        let tg = TimeGrid::new(1.0, 20, 1.0).unwrap();
        let c = Conductivity::from_fn(|x, t| 1.0 + 0.2 * (-x * x).exp() * t, None, &d, &tg, 0.5).unwrap();
        for (g, m) in c.gamma.values.iter().zip(&c.m.values) {
            assert!(((m + 1.0) - g.sqrt()).abs() < 1e-14);
        }
        for k in 0..tg.n_times() {
            let x = d.x[100];
            assert!((c.dt_gamma.get(100, k) - 0.2 * (-x * x).exp()).abs() < 1e-8);
        }
        assert!(!c.time_independent);
        assert!(Conductivity::from_fn(|_, _| 3.0, None, &d, &tg, 0.5).is_err());
        let four = Conductivity::constant(4.0, &d, &tg).unwrap();
        assert!(four.time_independent);
        assert_eq!(four.constant_slice[3], Some(4.0));
    }
}

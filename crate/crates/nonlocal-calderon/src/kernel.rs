//! P1 Galerkin assembly of the fractional Dirichlet form with separable weights.
//!
//! All element-pair integrals are written in unit element coordinates, so the
//! far-field moment tables depend only on `s` and the element offset; the
//! physical scaling is `h^{1-2s}`.

use crate::domain::{Conductivity, DomainSpec, FracOrder};
use crate::error::{Error, Result};
use crate::quadrature::{gauss_jacobi_left, gauss_legendre, Rule};
use nalgebra::DMatrix;
use serde::Serialize;

/// `C_{n,s} = 4^s Γ(n/2 + s) / (π^{n/2} |Γ(-s)|)`.
pub fn kernel_constant(fo: FracOrder) -> f64 {
    use statrs::function::gamma::gamma;
    let (n, s) = (fo.n() as f64, fo.s());
    4f64.powf(s) * gamma(n / 2.0 + s) / (std::f64::consts::PI.powf(n / 2.0) * gamma(-s).abs())
}

/// Solution of `(-Δ)^s u = 1` in `(-1, 1)`, `u = 0` outside (n = 1).
pub fn torsion(fo: FracOrder, x: f64) -> f64 {
    use statrs::function::gamma::gamma;
    let s = fo.s();
    let c = 4f64.powf(s) * gamma(0.5 + s) * gamma(1.0 + s) / gamma(0.5);
    (1.0 - x * x).max(0.0).powf(s) / c
}

/// Which element pairs enter an assembled matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Region {
    Full,
    /// Pairs with at least one element in Ω.
    Masked,
    /// Pairs with both elements outside Ω.
    ExtExt,
}

/// Assembled pieces keyed by region; `full()` is their literal sum.
#[derive(Debug, Clone)]
pub struct Parts {
    pub masked: DMatrix<f64>,
    pub ext_ext: DMatrix<f64>,
}

impl Parts {
    pub fn full(&self) -> DMatrix<f64> {
        &self.masked + &self.ext_ext
    }

    pub fn get(&self, r: Region) -> DMatrix<f64> {
        match r {
            Region::Full => self.full(),
            Region::Masked => self.masked.clone(),
            Region::ExtExt => self.ext_ext.clone(),
        }
    }

    fn scaled(&self, c: f64) -> Parts {
        Parts { masked: &self.masked * c, ext_ext: &self.ext_ext * c }
    }
}

type Table = [[[[f64; 2]; 2]; 2]; 2];

/// Element-pair integrals that depend only on `s`.
#[derive(Debug, Clone)]
pub struct Moments {
    /// `X[δ-2][a][b][σ][σ'] = ∫∫ L_a(ξ) L_σ(ξ) L_σ'(ξ) L_b(η) |ξ-η-δ|^{-1-2s}` for δ ≥ 2.
    x: Vec<Table>,
    /// `Y[δ-2][a][b][σ][τ] = ∫∫ L_a(ξ) L_σ(ξ) L_b(η) L_τ(η) |ξ-η-δ|^{-1-2s}` for δ ≥ 2.
    y: Vec<Table>,
    /// `∫∫ L_a(ξ) L_b(η) |ξ-η|^{1-2s}`
    p0: [[f64; 2]; 2],
    /// Adjacent-pair points `(ξ, η, weight, d)` after the corner Duffy split.
    adj: Vec<(f64, f64, f64, [f64; 3])>,
    tail_gl: Rule,
    left_sing: Rule,
}

fn lshape(a: usize, t: f64) -> f64 {
    if a == 0 {
        1.0 - t
    } else {
        t
    }
}

impl Moments {
    pub fn new(s: f64, max_offset: usize) -> Self {
        let kexp = -1.0 - 2.0 * s;
        let rules: Vec<(usize, Rule)> = vec![(4, gauss_legendre(20)), (16, gauss_legendre(12)), (usize::MAX, gauss_legendre(7))];
        let mut x = Vec::new();
        let mut y = Vec::new();
        for d in 2..=max_offset.max(2) {
            let rule = &rules.iter().find(|(lim, _)| d <= *lim).unwrap().1;
            let mut tx: Table = Default::default();
            let mut ty: Table = Default::default();
            for (&xi, &wx) in rule.x.iter().zip(&rule.w) {
                let l_xi = [1.0 - xi, xi];
                for (&eta, &wy) in rule.x.iter().zip(&rule.w) {
                    let l_eta = [1.0 - eta, eta];
                    let k = wx * wy * (xi - eta - d as f64).abs().powf(kexp);
                    for a in 0..2 {
                        for b in 0..2 {
                            let kab = k * l_xi[a] * l_eta[b];
                            for p in 0..2 {
                                for q in 0..2 {
                                    tx[a][b][p][q] += kab * l_xi[p] * l_xi[q];
                                    ty[a][b][p][q] += kab * l_xi[p] * l_eta[q];
                                }
                            }
                        }
                    }
                }
            }
            x.push(tx);
            y.push(ty);
        }

        // same element: split into the two triangles and integrate r^{1-2s} exactly
        let alpha = 1.0 - 2.0 * s;
        let outer = gauss_jacobi_left(6, alpha);
        let inner = gauss_legendre(4);
        let mut p0 = [[0.0; 2]; 2];
        for (&r, &wr) in outer.x.iter().zip(&outer.w) {
            let len = 1.0 - r;
            for (&t, &wt) in inner.x.iter().zip(&inner.w) {
                let lo = t * len;
                let w = wr * wt * len;
                for a in 0..2 {
                    for b in 0..2 {
                        p0[a][b] += w * (lshape(a, lo + r) * lshape(b, lo) + lshape(a, lo) * lshape(b, lo + r));
                    }
                }
            }
        }

        // adjacent elements sharing a node: with a = 1-ξ, b = η the distance is a + b
        let radial = gauss_jacobi_left(6, 2.0 - 2.0 * s);
        let ang = gauss_legendre(24);
        let mut adj = Vec::with_capacity(2 * radial.len() * ang.len());
        for (&rho, &wr) in radial.x.iter().zip(&radial.w) {
            for (&u, &wu) in ang.x.iter().zip(&ang.w) {
                let w = wr * wu * (1.0 + u).powf(kexp);
                // a ≥ b, b = u a
                adj.push((1.0 - rho, u * rho, w, [1.0, u - 1.0, -u]));
                // b ≥ a, a = u b
                adj.push((1.0 - u * rho, rho, w, [u, 1.0 - u, -1.0]));
            }
        }

        Moments {
            x,
            y,
            p0,
            adj,
            tail_gl: gauss_legendre(20),
            left_sing: gauss_jacobi_left(6, 2.0 - 2.0 * s),
        }
    }

    fn far(&self, delta: isize) -> (&Table, &Table, bool) {
        let d = delta.unsigned_abs();
        (&self.x[d - 2], &self.y[d - 2], delta < 0)
    }
}

/// Nodal weights with their far value, used as `w(x) w(y)` inside the form.
#[derive(Debug, Clone)]
pub struct Weight<'a> {
    pub nodal: &'a [f64],
    pub far: f64,
}

/// Assembles P1 stiffness and mass matrices on box dofs (nodes `1..n_el`).
#[derive(Debug, Clone)]
pub struct Assembler {
    pub spec: DomainSpec,
    pub fo: FracOrder,
    pub kc: f64,
    moments: Moments,
}

impl Assembler {
    pub fn new(spec: &DomainSpec, fo: FracOrder) -> Result<Self> {
        if fo.n() != 1 {
            return Err(Error::Precondition("assembly is implemented for n = 1".into()));
        }
        Ok(Self { spec: spec.clone(), fo, kc: kernel_constant(fo), moments: Moments::new(fo.s(), spec.n_el) })
    }

    fn n_dof(&self) -> usize {
        self.spec.n_dof()
    }

    /// Symmetric separable-weight form with weight `(w1(x) w2(y) + w2(x) w1(y)) / 2`.
    ///
    /// With `w1 = w2 = γ^{1/2}` this is the conductivity form; the derivative of
    /// that form along `dw` is `2 B(dw, w)`.
    pub fn bilinear(&self, w1: &Weight, w2: &Weight) -> Parts {
        let spec = &self.spec;
        let ne = spec.n_el;
        let nd = self.n_dof();
        let s = self.fo.s();
        let scale = self.kc * spec.h.powf(1.0 - 2.0 * s);
        let mo = &self.moments;
        let mut km = DMatrix::<f64>::zeros(nd, nd);
        let mut ke = DMatrix::<f64>::zeros(nd, nd);
        let (a1, a2) = (w1.nodal, w2.nodal);
        let inside = &spec.elem_in_omega;
        // node index -> dof; node 0 and n_el are not dofs
        let dof = |node: usize| -> Option<usize> { (node >= 1 && node < ne).then(|| node - 1) };

        for e in 0..ne {
            let mut diag_m = [[0.0; 2]; 2];
            let mut diag_e = [[0.0; 2]; 2];
            for ep in 0..ne {
                let delta = ep as isize - e as isize;
                if delta.abs() < 2 {
                    continue;
                }
                let mut wab = [[0.0; 2]; 2];
                for a in 0..2 {
                    for b in 0..2 {
                        wab[a][b] = 0.5 * (a1[e + a] * a2[ep + b] + a2[e + a] * a1[ep + b]);
                    }
                }
                let (tx, ty, neg) = mo.far(delta);
                let ee = !inside[e] && !inside[ep];
                let (diag, mat) = if ee { (&mut diag_e, &mut ke) } else { (&mut diag_m, &mut km) };
                let f = |i: usize| if neg { 1 - i } else { i };
                for p in 0..2 {
                    for q in 0..2 {
                        let mut vx = 0.0;
                        let mut vy = 0.0;
                        for a in 0..2 {
                            for b in 0..2 {
                                vx += wab[a][b] * tx[f(a)][f(b)][f(p)][f(q)];
                                vy += wab[a][b] * ty[f(a)][f(b)][f(p)][f(q)];
                            }
                        }
                        diag[p][q] += vx;
                        if let (Some(i), Some(j)) = (dof(e + p), dof(ep + q)) {
                            mat[(i, j)] -= scale * vy;
                        }
                    }
                }
            }
            for p in 0..2 {
                for q in 0..2 {
                    if let (Some(i), Some(j)) = (dof(e + p), dof(e + q)) {
                        km[(i, j)] += scale * diag_m[p][q];
                        ke[(i, j)] += scale * diag_e[p][q];
                    }
                }
            }
        }

        // same element
        for e in 0..ne {
            let mut v = 0.0;
            for a in 0..2 {
                for b in 0..2 {
                    v += 0.5 * (a1[e + a] * a2[e + b] + a2[e + a] * a1[e + b]) * mo.p0[a][b];
                }
            }
            let v = 0.5 * scale * v;
            let mat = if inside[e] { &mut km } else { &mut ke };
            for p in 0..2 {
                for q in 0..2 {
                    if let (Some(i), Some(j)) = (dof(e + p), dof(e + q)) {
                        let sign = if p == q { 1.0 } else { -1.0 };
                        mat[(i, j)] += sign * v;
                    }
                }
            }
        }

        // adjacent elements (e, e+1), both orderings at once
        for e in 0..ne.saturating_sub(1) {
            let mut loc = [[0.0; 3]; 3];
            for &(xi, eta, w, d) in &mo.adj {
                let wx1 = a1[e] * (1.0 - xi) + a1[e + 1] * xi;
                let wx2 = a2[e] * (1.0 - xi) + a2[e + 1] * xi;
                let wy1 = a1[e + 1] * (1.0 - eta) + a1[e + 2] * eta;
                let wy2 = a2[e + 1] * (1.0 - eta) + a2[e + 2] * eta;
                let ww = w * 0.5 * (wx1 * wy2 + wx2 * wy1);
                for p in 0..3 {
                    for q in 0..3 {
                        loc[p][q] += ww * d[p] * d[q];
                    }
                }
            }
            let ee = !inside[e] && !inside[e + 1];
            let mat = if ee { &mut ke } else { &mut km };
            for p in 0..3 {
                for q in 0..3 {
                    if let (Some(i), Some(j)) = (dof(e + p), dof(e + q)) {
                        mat[(i, j)] += scale * loc[p][q];
                    }
                }
            }
        }

        // interaction with the region outside the box, where w is the far value
        let tail = self.tail_tables();
        for e in 0..ne {
            let mat = if inside[e] { &mut km } else { &mut ke };
            let wt = [
                0.5 * (a1[e] * w2.far + a2[e] * w1.far),
                0.5 * (a1[e + 1] * w2.far + a2[e + 1] * w1.far),
            ];
            for p in 0..2 {
                for q in 0..2 {
                    if let (Some(i), Some(j)) = (dof(e + p), dof(e + q)) {
                        mat[(i, j)] += self.kc * (wt[0] * tail[e][0][p][q] + wt[1] * tail[e][1][p][q]);
                    }
                }
            }
        }

        symmetrize(&mut km);
        symmetrize(&mut ke);
        Parts { masked: km, ext_ext: ke }
    }

    /// `T_e[a][σ][σ'] = ∫_e L_a φ_σ φ_σ' ρ` with `ρ(x) = ((L-x)^{-2s} + (L+x)^{-2s}) / (2s)`.
    /// Entries touching a box-boundary node are left at zero.
    fn tail_tables(&self) -> Vec<[[[f64; 2]; 2]; 2]> {
        let spec = &self.spec;
        let (l, h, ne) = (spec.l, spec.h, spec.n_el);
        let s = self.fo.s();
        let mo = &self.moments;
        let rho = |x: f64| ((l - x).powf(-2.0 * s) + (l + x).powf(-2.0 * s)) / (2.0 * s);
        let mut out = vec![[[[0.0; 2]; 2]; 2]; ne];
        for (e, t) in out.iter_mut().enumerate() {
            let x0 = spec.x[e];
            if e == 0 || e + 1 == ne {
                // only the inner node carries a dof; its hat squared kills the endpoint singularity
                let inner = if e == 0 { 1 } else { 0 };
                for a in 0..2 {
                    // distance to the near box edge is h t with t measured from that edge
                    let a_edge = if e == 0 { a } else { 1 - a };
                    let sing: f64 = mo
                        .left_sing
                        .x
                        .iter()
                        .zip(&mo.left_sing.w)
                        .map(|(&t, &w)| w * lshape(a_edge, t))
                        .sum::<f64>()
                        * h.powf(-2.0 * s)
                        / (2.0 * s);
                    let smooth: f64 = mo
                        .tail_gl
                        .x
                        .iter()
                        .zip(&mo.tail_gl.w)
                        .map(|(&xi, &w)| {
                            let x = x0 + h * xi;
                            let far = if e == 0 { l - x } else { l + x };
                            w * lshape(a, xi) * lshape(inner, xi).powi(2) * far.powf(-2.0 * s) / (2.0 * s)
                        })
                        .sum();
                    t[a][inner][inner] = h * (sing + smooth);
                }
                continue;
            }
            for (&xi, &w) in mo.tail_gl.x.iter().zip(&mo.tail_gl.w) {
                let r = w * h * rho(x0 + h * xi);
                let lx = [1.0 - xi, xi];
                for a in 0..2 {
                    for p in 0..2 {
                        for q in 0..2 {
                            t[a][p][q] += r * lx[a] * lx[p] * lx[q];
                        }
                    }
                }
            }
        }
        out
    }

    /// Nodal point values `ζ_i = C/(2s) [(L - x_i)^{-2s} + (L + x_i)^{-2s}]` on dofs.
    pub fn tail_zeta(&self) -> Vec<f64> {
        let spec = &self.spec;
        let s = self.fo.s();
        (1..spec.n_el)
            .map(|i| {
                let x = spec.x[i];
                self.kc / (2.0 * s) * ((spec.l - x).powf(-2.0 * s) + (spec.l + x).powf(-2.0 * s))
            })
            .collect()
    }

    /// Unweighted fractional stiffness, split by region.
    pub fn frac_stiffness(&self) -> Parts {
        let ones = vec![1.0; self.spec.n_nodes()];
        let w = Weight { nodal: &ones, far: 1.0 };
        self.bilinear(&w, &w)
    }

    /// `K_γ(t_k)` split by region. Slices constant in space (including the far
    /// value) reuse `a` scaled by that constant.
    pub fn weighted(&self, c: &Conductivity, k: usize, a: &Parts) -> Parts {
        if let Some(cst) = c.constant_slice[k] {
            return a.scaled(cst);
        }
        let w = c.sqrt_slice(k);
        let far = c.far[k].sqrt();
        let wt = Weight { nodal: &w, far };
        self.bilinear(&wt, &wt)
    }

    /// P1 mass matrix over the whole box with nodal weight `rho`, optionally restricted to Ω elements.
    pub fn mass_weighted(&self, rho: Option<&[f64]>, omega_only: bool) -> DMatrix<f64> {
        let spec = &self.spec;
        let nd = self.n_dof();
        let h = spec.h;
        let mut m = DMatrix::zeros(nd, nd);
        // ∫_0^1 L_0^p L_1^q = p! q! / (p + q + 1)!
        let beta = |p: usize, q: usize| -> f64 {
            let f = |n: usize| (1..=n).product::<usize>() as f64;
            f(p) * f(q) / f(p + q + 1)
        };
        for e in 0..spec.n_el {
            if omega_only && !spec.elem_in_omega[e] {
                continue;
            }
            let r = match rho {
                Some(r) => [r[e], r[e + 1]],
                None => [1.0, 1.0],
            };
            for p in 0..2 {
                for q in 0..2 {
                    let (i, j) = (e + p, e + q);
                    if i == 0 || j == 0 || i == spec.n_el || j == spec.n_el {
                        continue;
                    }
                    let mut v = 0.0;
                    for a in 0..2 {
                        let cnt1 = (a == 1) as usize + (p == 1) as usize + (q == 1) as usize;
                        v += r[a] * beta(3 - cnt1, cnt1);
                    }
                    m[(i - 1, j - 1)] += h * v;
                }
            }
        }
        m
    }

    pub fn mass(&self) -> DMatrix<f64> {
        self.mass_weighted(None, false)
    }

    /// Fractional stiffness, mass and tail diagnostics.
    pub fn stiffness_set(&self) -> StiffnessSet {
        let a = self.frac_stiffness();
        StiffnessSet {
            a_full: a.full(),
            a,
            m: self.mass(),
            zeta: self.tail_zeta(),
            kc: self.kc,
        }
    }
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in i + 1..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Matrices shared by all solves on one grid.
#[derive(Debug, Clone)]
pub struct StiffnessSet {
    pub a: Parts,
    /// `a.masked + a.ext_ext`
    pub a_full: DMatrix<f64>,
    pub m: DMatrix<f64>,
    /// Nodal tail point values on dofs (diagnostic; the assembly integrates the tail exactly).
    pub zeta: Vec<f64>,
    pub kc: f64,
}

/// Breakpoint-aware closure representation of the function whose fractional Laplacian is taken.
pub struct PointwiseInput<'a> {
    /// Function on the box; it is taken to vanish outside.
    pub f: &'a dyn Fn(f64) -> f64,
    pub breakpoints: &'a [f64],
    /// Magnitude of `f` used to set absolute tolerances.
    pub scale: f64,
}

/// Controls for [`frac_laplacian_at`].
#[derive(Debug, Clone, Copy)]
pub struct PointwiseOptions {
    pub delta0: f64,
    pub tol: f64,
}

impl Default for PointwiseOptions {
    fn default() -> Self {
        Self { delta0: 0.05, tol: 1e-12 }
    }
}

/// `(-Δ)^s f(x) = C PV∫ (f(x) - f(y)) |x - y|^{-1-2s} dy` for `f` supported in `[-L, L]`.
///
/// The ball `|y - x| < δ` uses the symmetric second difference with the
/// substitution `r = δ u^{1/(2-2s)}`, which removes the `r^{1-2s}` factor.
pub fn frac_laplacian_at(
    x: f64,
    input: &PointwiseInput,
    l: f64,
    fo: FracOrder,
    kc: f64,
    opt: PointwiseOptions,
) -> Result<f64> {
    let s = fo.s();
    let f = input.f;
    let val = |y: f64| if y.abs() <= l { f(y) } else { 0.0 };
    let mut delta = opt.delta0.min(l - x.abs());
    for &b in input.breakpoints {
        let d = (x - b).abs();
        if d > 0.0 {
            delta = delta.min(d);
        }
    }
    if !(delta > 0.0) {
        return Err(Error::Precondition(format!("evaluation point {x} on the box boundary")));
    }
    let fx = val(x);
    let p = 1.0 / (2.0 - 2.0 * s);
    let mag = input.scale.max(fx.abs()).max(1e-300);
    let abs_tol = opt.tol * mag * delta.powf(-2.0 * s);
    // Below r_c the second difference is dominated by rounding; use its Taylor
    // limit f'' r^{1-2s} with f'' taken from the difference at r_c.
    let r_c = 1e-3 * delta;
    let core = -(val(x + r_c) + val(x - r_c) - 2.0 * fx) * r_c.powf(-2.0 * s) / (2.0 - 2.0 * s);
    let u_c = (r_c / delta).powf(1.0 / p);
    let near = crate::quadrature::adaptive(
        |u: f64| {
            let r = delta * u.powf(p);
            // r^{-1-2s} dr = δ^{-2s} p u^{-1-2sp} du, and the second difference is O(u^{2p})
            let jac = delta.powf(-2.0 * s) * p * u.powf(-1.0 - 2.0 * s * p);
            (2.0 * fx - val(x + r) - val(x - r)) * jac
        },
        u_c,
        1.0,
        abs_tol,
        opt.tol,
    )
    .ok_or_else(|| Error::Quadrature(format!("near field at x = {x}")))?
        + core;
    let mut cuts: Vec<f64> = vec![-l, x - delta, x + delta, l];
    cuts.extend(input.breakpoints.iter().copied().filter(|b| b.abs() < l));
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    let mut far = 0.0;
    for w in cuts.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b <= a || (a >= x - delta && b <= x + delta) {
            continue;
        }
        let v = crate::quadrature::adaptive(
            |y| val(y) * (x - y).abs().powf(-1.0 - 2.0 * s),
            a,
            b,
            abs_tol,
            opt.tol,
        )
        .ok_or_else(|| Error::Quadrature(format!("far field at x = {x} on [{a}, {b}]")))?;
        far += v;
    }
    Ok(kc * (near + fx * delta.powf(-2.0 * s) / s - far))
}

/// Values of `(-Δ)^s` of a closure at the given points.
pub fn frac_laplacian_closure(
    f: &dyn Fn(f64) -> f64,
    breakpoints: &[f64],
    points: &[f64],
    l: f64,
    fo: FracOrder,
    opt: PointwiseOptions,
) -> Result<Vec<f64>> {
    let kc = kernel_constant(fo);
    let scale = (0..=400).map(|j| f(-l + 2.0 * l * j as f64 / 400.0).abs()).fold(0.0, f64::max);
    let input = PointwiseInput { f, breakpoints, scale };
    points.iter().map(|&x| frac_laplacian_at(x, &input, l, fo, kc, opt)).collect()
}

/// Natural cubic spline through `(xs, ys)`, evaluated at `x`; zero outside the data range.
#[derive(Debug, Clone)]
pub struct NaturalSpline {
    xs: Vec<f64>,
    ys: Vec<f64>,
    m2: Vec<f64>,
}

impl NaturalSpline {
    pub fn new(xs: &[f64], ys: &[f64]) -> Self {
        let n = xs.len();
        let mut m2 = vec![0.0; n];
        if n > 2 {
            // Thomas algorithm on the second-derivative system
            let mut c = vec![0.0; n];
            let mut d = vec![0.0; n];
            for i in 1..n - 1 {
                let h0 = xs[i] - xs[i - 1];
                let h1 = xs[i + 1] - xs[i];
                let a = h0 / 6.0;
                let b = (h0 + h1) / 3.0;
                let cc = h1 / 6.0;
                let r = (ys[i + 1] - ys[i]) / h1 - (ys[i] - ys[i - 1]) / h0;
                let denom = b - a * c[i - 1];
                c[i] = cc / denom;
                d[i] = (r - a * d[i - 1]) / denom;
            }
            for i in (1..n - 1).rev() {
                m2[i] = d[i] - c[i] * m2[i + 1];
            }
        }
        Self { xs: xs.to_vec(), ys: ys.to_vec(), m2 }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let n = self.xs.len();
        if n == 0 || x < self.xs[0] || x > self.xs[n - 1] {
            return 0.0;
        }
        let mut i = self.xs.partition_point(|&v| v <= x).saturating_sub(1);
        if i >= n - 1 {
            i = n - 2;
        }
        let h = self.xs[i + 1] - self.xs[i];
        let a = (self.xs[i + 1] - x) / h;
        let b = (x - self.xs[i]) / h;
        a * self.ys[i]
            + b * self.ys[i + 1]
            + ((a * a * a - a) * self.m2[i] + (b * b * b - b) * self.m2[i + 1]) * h * h / 6.0
    }
}

/// `(-Δ)^s` of a sampled slice `vals` (one value per node) via its natural cubic spline.
pub fn frac_laplacian_sampled(
    vals: &[f64],
    spec: &DomainSpec,
    fo: FracOrder,
    nodes: &[usize],
    opt: PointwiseOptions,
) -> Result<Vec<f64>> {
    check_tail_support(&|y| NaturalSpline::new(&spec.x, vals).eval(y), spec)?;
    let sp = NaturalSpline::new(&spec.x, vals);
    let f = |y: f64| sp.eval(y);
    let pts: Vec<f64> = nodes.iter().map(|&i| spec.x[i]).collect();
    frac_laplacian_closure(&f, &[], &pts, spec.l, fo, opt)
}

fn check_tail_support(f: &dyn Fn(f64) -> f64, spec: &DomainSpec) -> Result<()> {
    for j in 0..=8 {
        let t = spec.l - 2.0 * spec.h * j as f64 / 8.0;
        for y in [t, -t] {
            let v = f(y);
            if v.abs() > 1e-12 {
                return Err(Error::Tail(format!(
                    "background deviation {v:e} at y = {y} does not vanish near the box boundary"
                )));
            }
        }
    }
    Ok(())
}

/// Samples of `q = -(-Δ)^s m / γ^{1/2}` and `Q = q + ∂_tγ / (2γ²)` on nodes of the closed Ω.
///
/// Entries at other nodes are zero. The `+` sign belongs to the form with the
/// time derivative acting on `γ^{-1} v`.
#[derive(Debug, Clone)]
pub struct PotentialField {
    pub q: crate::domain::Field,
    pub big_q: crate::domain::Field,
    /// `(-Δ)^s m_γ` samples, kept for the algebraic consistency check.
    pub lap_m: crate::domain::Field,
}

/// Nodes of the closed interval Ω.
pub fn closed_omega_nodes(spec: &DomainSpec) -> Vec<usize> {
    (spec.omega_nodes.0..=spec.omega_nodes.1).collect()
}

pub fn assemble_potentials(
    c: &Conductivity,
    spec: &DomainSpec,
    fo: FracOrder,
    opt: PointwiseOptions,
) -> Result<PotentialField> {
    use crate::domain::{Field, SupportTag};
    let nn = spec.n_nodes();
    let nt = c.gamma.n_times;
    let nodes = closed_omega_nodes(spec);
    let mut lap = Field::zeros(nn, nt, SupportTag::Full);
    let pts: Vec<f64> = nodes.iter().map(|&i| spec.x[i]).collect();
    for k in 0..nt {
        if c.time_independent && k > 0 {
            let prev = lap.slice(0).to_vec();
            lap.slice_mut(k).copy_from_slice(&prev);
            continue;
        }
        if c.constant_slice[k].is_some() {
            continue;
        }
        let values = match &c.closure {
            Some(g) => {
                let t = c.times[k];
                let gf = c.far[k];
                // √γ - √γ_∞ without cancellation
                let mt = |y: f64| (g(y, t) - gf) / (g(y, t).sqrt() + gf.sqrt());
                check_tail_support(&mt, spec)?;
                frac_laplacian_closure(&mt, &c.breakpoints, &pts, spec.l, fo, opt)?
            }
            None => {
                let gf = c.far[k];
                let vals: Vec<f64> = c.gamma.slice(k).iter().map(|g| (g - gf) / (g.sqrt() + gf.sqrt())).collect();
                frac_laplacian_sampled(&vals, spec, fo, &nodes, opt)?
            }
        };
        for (&i, v) in nodes.iter().zip(values) {
            lap.set(i, k, v);
        }
    }
    let mut q = Field::zeros(nn, nt, SupportTag::Full);
    let mut big_q = Field::zeros(nn, nt, SupportTag::Full);
    for k in 0..nt {
        for &i in &nodes {
            let g = c.gamma.get(i, k);
            let qi = -lap.get(i, k) / g.sqrt();
            q.set(i, k, qi);
            big_q.set(i, k, qi + c.dt_gamma.get(i, k) / (2.0 * g * g));
        }
    }
    Ok(PotentialField { q, big_q, lap_m: lap })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{build_domain, DomainConfig};

    fn spec(h: f64) -> DomainSpec {
        build_domain(&DomainConfig {
            box_halfwidth: 2.0,
            h,
            omega: (-1.0, 1.0),
            exterior: vec![("W".into(), 1.2, 1.6)],
            disjoint_pairs: vec![],
        })
        .unwrap()
    }

    /// Γ by the duplication-free Stirling series with upward recursion, an
    /// independent route from the Lanczos sum used by the library.
    fn gamma_stirling(x: f64) -> f64 {
        if x < 0.5 {
            let pi = std::f64::consts::PI;
            return pi / ((pi * x).sin() * gamma_stirling(1.0 - x));
        }
        let mut shift = 1.0;
        let mut z = x;
        while z < 12.0 {
            shift *= z;
            z += 1.0;
        }
        let series = 1.0 / (12.0 * z) - 1.0 / (360.0 * z.powi(3)) + 1.0 / (1260.0 * z.powi(5))
            - 1.0 / (1680.0 * z.powi(7))
            + 1.0 / (1188.0 * z.powi(9));
        let lg = (z - 0.5) * z.ln() - z + 0.5 * (2.0 * std::f64::consts::PI).ln() + series;
        lg.exp() / shift
    }

    #[test]
    fn kernel_constant_values() {
        let c1 = kernel_constant(FracOrder::new(1, 0.5).unwrap());
        assert!((c1 * std::f64::consts::PI - 1.0).abs() < 1e-12);
        let c2 = kernel_constant(FracOrder::new(2, 0.5).unwrap());
        assert!((c2 * 2.0 * std::f64::consts::PI - 1.0).abs() < 1e-12);
        for &s in &[0.1, 0.25, 0.4, 0.5, 0.75] {
            let c = kernel_constant(FracOrder::new(1, s).unwrap());
            let oracle = 4f64.powf(s) * gamma_stirling(0.5 + s)
                / (std::f64::consts::PI.sqrt() * gamma_stirling(-s).abs());
            assert!((c / oracle - 1.0).abs() < 1e-12, "s = {s}: {c} vs {oracle}");
        }
    }
    /// Exact P1 entries of the full-line form, after integrating by parts twice:
    /// the form equals `-C/(2s(1-2s)) ∬ u'(x) v'(y) |x-y|^{1-2s}` (log kernel at s = 1/2).
    pub(crate) fn closed_form_a(spec: &DomainSpec, s: f64) -> DMatrix<f64> {
        let c = kernel_constant(FracOrder::new(1, s).unwrap());
        let p = 1.0 - 2.0 * s;
        let g = |r: f64| -> f64 {
            let r = r.abs();
            if (s - 0.5).abs() < 1e-15 {
                if r == 0.0 {
                    0.0
                } else {
                    r * r * r.ln() / 2.0 - 0.75 * r * r
                }
            } else {
                r.powf(p + 2.0) / ((p + 1.0) * (p + 2.0))
            }
        };
        let j = |d: f64| g(d + 1.0) - 2.0 * g(d) + g(d - 1.0);
        let pref = if (s - 0.5).abs() < 1e-15 { -c } else { -c / (2.0 * s * (1.0 - 2.0 * s)) * spec.h.powf(p) };
        let nd = spec.n_dof();
        DMatrix::from_fn(nd, nd, |a, b| {
            let (ni, nj) = (a + 1, b + 1);
            let mut v = 0.0;
            for (ei, si) in [(ni - 1, 1.0), (ni, -1.0)] {
                for (ej, sj) in [(nj - 1, 1.0), (nj, -1.0)] {
                    v += si * sj * j(ej as f64 - ei as f64);
                }
            }
            pref * v
        })
    }

    fn max_abs(m: &DMatrix<f64>) -> f64 {
        m.iter().fold(0.0f64, |a, v| a.max(v.abs()))
    }

    #[test]
    fn stiffness_matches_closed_form() {
        for &(h, s) in &[(0.1, 0.5), (0.1, 0.25), (0.1, 0.75), (0.05, 0.5)] {
            let sp = spec(h);
            let asm = Assembler::new(&sp, FracOrder::new(1, s).unwrap()).unwrap();
            let a = asm.frac_stiffness().full();
            let oracle = closed_form_a(&sp, s);
            let err = max_abs(&(&a - &oracle)) / max_abs(&oracle);
            assert!(err < 1e-11, "h {h} s {s}: rel err {err:e}");
        }
    }

    #[test]
    fn stiffness_symmetric_psd_and_nearly_toeplitz() {
        let sp = spec(0.05);
        let asm = Assembler::new(&sp, FracOrder::new(1, 0.5).unwrap()).unwrap();
        let a = asm.frac_stiffness().full();
        assert_eq!(max_abs(&(&a - a.transpose())), 0.0);
        let eig = a.clone().symmetric_eigenvalues();
        assert!(eig.min() > 0.0);
        let scale = max_abs(&a);
        for i in 10..40 {
            for j in 10..40 {
                assert!((a[(i, j)] - a[(i + 1, j + 1)]).abs() < 1e-13 * scale);
            }
        }
    }

    #[test]
    fn constant_weights_factor_out() {
        let sp = spec(0.1);
        let tg = crate::domain::TimeGrid::new(1.0, 2, 1.0).unwrap();
        let asm = Assembler::new(&sp, FracOrder::new(1, 0.5).unwrap()).unwrap();
        let a = asm.frac_stiffness();
        let one = Conductivity::constant(1.0, &sp, &tg).unwrap();
        assert_eq!(asm.weighted(&one, 0, &a).full(), a.full());
        let four = Conductivity::constant(4.0, &sp, &tg).unwrap();
        let k = asm.weighted(&four, 1, &a).full();
        assert!(max_abs(&(&k - a.full() * 4.0)) <= 1e-10 * max_abs(&k));
        // through the general path as well
        let twos = vec![2.0; sp.n_nodes()];
        let w = Weight { nodal: &twos, far: 2.0 };
        let k2 = asm.bilinear(&w, &w).full();
        assert!(max_abs(&(&k2 - a.full() * 4.0)) <= 1e-12 * max_abs(&k2));
    }

    #[test]
    fn weighted_form_bounded_by_weight_range() {
        let sp = spec(0.05);
        let tg = crate::domain::TimeGrid::new(1.0, 1, 1.0).unwrap();
        let asm = Assembler::new(&sp, FracOrder::new(1, 0.4).unwrap()).unwrap();
        let a = asm.frac_stiffness();
        let c = Conductivity::from_fn(
            |x, _| 1.25 + 0.7 * (3.0 * x).sin() * (-x * x).exp(),
            None,
            &sp,
            &tg,
            0.5,
        )
        .unwrap();
        let (lo, hi) = c.gamma.values.iter().fold((f64::MAX, f64::MIN), |(l, h), &g| (l.min(g), h.max(g)));
        let k = asm.weighted(&c, 0, &a).full();
        let lmin = crate::domain::pencil_min_eig(&k, &a.full()).unwrap();
        let lmax = -crate::domain::pencil_min_eig(&(-&k), &a.full()).unwrap();
        assert!(lmin >= 0.5 && lmin >= lo - 1e-10, "lmin {lmin} lo {lo}");
        assert!(lmax <= 2.0 && lmax <= hi + 1e-10, "lmax {lmax} hi {hi}");
        assert_eq!(max_abs(&(&k - k.transpose())), 0.0);
    }

    #[test]
    fn weighted_quadratic_form_matches_nested_quadrature() {
        use crate::quadrature::adaptive;
        let sp = build_domain(&DomainConfig {
            box_halfwidth: 2.0,
            h: 0.25,
            omega: (-1.0, 1.0),
            exterior: vec![],
            disjoint_pairs: vec![],
        })
        .unwrap();
        let s = 0.3;
        let fo = FracOrder::new(1, s).unwrap();
        let asm = Assembler::new(&sp, fo).unwrap();
        let wn: Vec<f64> = sp.x.iter().map(|&x| 1.0 + 0.3 * (x * 1.3).cos()).collect();
        let far = 1.1;
        let wt = Weight { nodal: &wn, far };
        let k = asm.bilinear(&wt, &wt).full();
        let un: Vec<f64> = sp.x.iter().enumerate().map(|(i, &x)| if i == 0 || i == sp.n_el { 0.0 } else { (x + 0.4).sin() }).collect();
        let uvec = nalgebra::DVector::from_column_slice(&un[1..sp.n_el]);
        let discrete = uvec.dot(&(&k * &uvec));

        let p1 = |vals: &[f64], x: f64| -> f64 {
            if x <= -sp.l || x >= sp.l {
                return if vals.len() == wn.len() && vals[0] == wn[0] { far } else { 0.0 };
            }
            let t = (x + sp.l) / sp.h;
            let e = (t.floor() as usize).min(sp.n_el - 1);
            let xi = t - e as f64;
            vals[e] * (1.0 - xi) + vals[e + 1] * xi
        };
        let w = |x: f64| p1(&wn, x);
        let u = |x: f64| p1(&un, x);
        let kc = asm.kc;
        let l = sp.l;
        let cuts: Vec<f64> = sp.x.clone();
        let inner = |x: f64| -> f64 {
            let mut pts = cuts.clone();
            pts.push(x);
            pts.sort_by(f64::total_cmp);
            pts.dedup();
            let mut v = 0.0;
            for win in pts.windows(2) {
                v += adaptive(
                    |y| w(y) * (u(x) - u(y)).powi(2) * (x - y).abs().powf(-1.0 - 2.0 * s),
                    win[0],
                    win[1],
                    1e-13,
                    1e-12,
                )
                .unwrap();
            }
            // y outside the box: u(y) = 0 and w(y) = far
            let tail = far * u(x).powi(2) * ((l - x).powf(-2.0 * s) + (l + x).powf(-2.0 * s)) / (2.0 * s);
            w(x) * (v + 2.0 * tail)
        };
        let mut total = 0.0;
        for win in sp.x.windows(2) {
            total += adaptive(&inner, win[0], win[1], 1e-12, 1e-11).unwrap();
        }
        let oracle = 0.5 * kc * total;
        assert!((discrete - oracle).abs() < 1e-8 * oracle.abs(), "{discrete} vs {oracle}");
    }

    #[test]
    fn masked_and_exterior_parts() {
        let sp = spec(0.1);
        let asm = Assembler::new(&sp, FracOrder::new(1, 0.5).unwrap()).unwrap();
        let a = asm.frac_stiffness();
        assert_eq!(a.full(), &a.masked + &a.ext_ext);
        // rows of interior dofs never see exterior-exterior pairs
        for d in sp.interior_dofs() {
            assert!(a.ext_ext.row(d).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn mass_integrates_hats() {
        let sp = spec(0.1);
        let asm = Assembler::new(&sp, FracOrder::new(1, 0.5).unwrap()).unwrap();
        let m = asm.mass();
        let ones = nalgebra::DVector::from_element(sp.n_dof(), 1.0);
        // Σ φ_i is 1 except on the two end elements, where it is linear
        let expect = 2.0 * sp.l - 4.0 * sp.h / 3.0;
        assert!((ones.dot(&(&m * &ones)) - expect).abs() < 1e-13);
        let rho: Vec<f64> = vec![3.0; sp.n_nodes()];
        let mw = asm.mass_weighted(Some(&rho), false);
        assert!(max_abs(&(&mw - &m * 3.0)) < 1e-15);
    }

    #[test]
    fn torsion_identity_pointwise() {
        let sp = spec(0.01);
        for &s in &[0.5, 0.25] {
            let fo = FracOrder::new(1, s).unwrap();
            let f = move |x: f64| (1.0 - x * x).max(0.0).powf(s);
            let pts: Vec<f64> = sp.interior.iter().map(|&i| sp.x[i]).collect();
            let vals = frac_laplacian_closure(&f, &[-1.0, 1.0], &pts, sp.l, fo, PointwiseOptions::default()).unwrap();
            let exact = 4f64.powf(s) * gamma_stirling(0.5 + s) * gamma_stirling(1.0 + s) / gamma_stirling(0.5);
            let err = vals.iter().map(|v| (v / exact - 1.0).abs()).fold(0.0, f64::max);
            assert!(err < 1e-6, "s = {s}: {err:e}");
        }
    }

    #[test]
    fn pointwise_linearity_and_zero() {
        let fo = FracOrder::new(1, 0.4).unwrap();
        let f1 = |x: f64| (-8.0 * x * x).exp() * (1.0 - (x / 1.9).powi(2)).max(0.0).powi(4);
        let f2 = |x: f64| x * (-6.0 * x * x).exp() * (1.0 - (x / 1.9).powi(2)).max(0.0).powi(4);
        let comb = |x: f64| 2.0 * f1(x) - 0.5 * f2(x);
        let pts = [-0.7, 0.0, 0.33, 1.1];
        let opt = PointwiseOptions::default();
        let v1 = frac_laplacian_closure(&f1, &[], &pts, 2.0, fo, opt).unwrap();
        let v2 = frac_laplacian_closure(&f2, &[], &pts, 2.0, fo, opt).unwrap();
        let vc = frac_laplacian_closure(&comb, &[], &pts, 2.0, fo, opt).unwrap();
        for i in 0..pts.len() {
            assert!((vc[i] - (2.0 * v1[i] - 0.5 * v2[i])).abs() < 1e-10 * (1.0 + vc[i].abs()));
        }
        let z = frac_laplacian_closure(&|_| 0.0, &[], &pts, 2.0, fo, opt).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn potentials_basic_identities() {
        use crate::domain::TimeGrid;
        let sp = spec(0.05);
        let tg = TimeGrid::new(1.0, 4, 1.0).unwrap();
        let fo = FracOrder::new(1, 0.5).unwrap();
        let opt = PointwiseOptions::default();
        for c in [1.0, 4.0] {
            let g = Conductivity::constant(c, &sp, &tg).unwrap();
            let p = assemble_potentials(&g, &sp, fo, opt).unwrap();
            assert_eq!(p.q.max_abs(), 0.0);
            assert_eq!(p.big_q.max_abs(), 0.0);
        }
        let bump = |x: f64| if x.abs() < 0.8 { (1.0 - 1.0 / (1.0 - (x / 0.8).powi(2))).exp() } else { 0.0 };
        let g = Conductivity::from_fn(move |x, _| 1.0 + 0.3 * bump(x), None, &sp, &tg, 0.5).unwrap();
        let p = assemble_potentials(&g, &sp, fo, opt).unwrap();
        assert_eq!(p.q, p.big_q);
        assert!(p.q.max_abs() > 0.0);
        for k in 0..tg.n_times() {
            for i in closed_omega_nodes(&sp) {
                let rebuilt = -p.q.get(i, k) * g.gamma.get(i, k).sqrt();
                assert!((rebuilt - p.lap_m.get(i, k)).abs() <= 1e-12 * (1.0 + p.lap_m.get(i, k).abs()));
            }
        }
        let gt = Conductivity::from_fn(move |x, t| 1.0 + 0.3 * bump(x) * (1.0 + t), None, &sp, &tg, 0.5).unwrap();
        let pt = assemble_potentials(&gt, &sp, fo, opt).unwrap();
        for k in 0..tg.n_times() {
            for i in closed_omega_nodes(&sp) {
                let g = gt.gamma.get(i, k);
                let want = pt.q.get(i, k) + gt.dt_gamma.get(i, k) / (2.0 * g * g);
                assert!((pt.big_q.get(i, k) - want).abs() < 1e-12);
            }
        }
        // a background deviation reaching the box edge is rejected
        let bad = Conductivity::from_fn(|x, _| 1.0 + 0.1 * (x + 2.0), None, &sp, &tg, 0.5).unwrap();
        assert!(matches!(assemble_potentials(&bad, &sp, fo, opt), Err(Error::Tail(_))));
    }
}

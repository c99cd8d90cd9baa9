//! Exact rational quadrature over convex rational polytopes.
//!
//! Interior moments go through a pulling triangulation and the closed-form
//! Dirichlet integral `∫_{Δ^d} λ^β dλ = β!/(|β|+d)!`; facet measures use
//! the lattice-adapted `dσ = dLeb/|n_i|`, whose simplex Jacobian
//! `|det(e_1,…,e_{n−1}, n_i)| / ⟨n_i,n_i⟩` stays rational. Nothing in this
//! module touches floating point, so the extremal function and the crease
//! scan carry no discretization error.

use std::collections::{BTreeMap, BTreeSet};

use num::{BigInt, BigRational, One, Signed, Zero};

use crate::linalg::{rational_rank, solve_rational};

pub type Rat = BigRational;

pub fn rat_int(v: i64) -> Rat {
    Rat::from_integer(BigInt::from(v))
}

pub fn rat(n: i64, d: i64) -> Rat {
    Rat::new(BigInt::from(n), BigInt::from(d))
}

/// Exact conversion; every finite f64 is a binary rational.
pub fn rat_from_f64(v: f64) -> Rat {
    Rat::from_float(v).expect("finite float")
}

fn factorial(k: usize) -> BigInt {
    let mut acc = BigInt::one();
    for i in 2..=k {
        acc *= BigInt::from(i);
    }
    acc
}

/// Sparse polynomial with rational coefficients in `nvars` variables.
#[derive(Debug, Clone)]
pub struct Poly {
    pub nvars: usize,
    pub terms: BTreeMap<Vec<u32>, Rat>,
}

impl Poly {
    pub fn zero(nvars: usize) -> Self {
        Poly {
            nvars,
            terms: BTreeMap::new(),
        }
    }

    pub fn constant(nvars: usize, c: Rat) -> Self {
        let mut p = Poly::zero(nvars);
        if !c.is_zero() {
            p.terms.insert(vec![0; nvars], c);
        }
        p
    }

    /// ⟨grad, x⟩ + c
    pub fn affine(grad: &[Rat], c: Rat) -> Self {
        let nvars = grad.len();
        let mut p = Poly::constant(nvars, c);
        for (k, g) in grad.iter().enumerate() {
            if !g.is_zero() {
                let mut e = vec![0; nvars];
                e[k] = 1;
                p.add_term(e, g.clone());
            }
        }
        p
    }

    pub fn monomial(nvars: usize, exps: &[u32]) -> Self {
        let mut p = Poly::zero(nvars);
        p.terms.insert(exps.to_vec(), Rat::one());
        p
    }

    fn add_term(&mut self, exps: Vec<u32>, c: Rat) {
        if c.is_zero() {
            return;
        }
        let entry = self.terms.entry(exps).or_insert_with(Rat::zero);
        *entry += c;
        // keep the map clean of cancelled terms
        self.terms.retain(|_, v| !v.is_zero());
    }

    pub fn add(&self, other: &Poly) -> Poly {
        let mut out = self.clone();
        for (e, c) in &other.terms {
            out.add_term(e.clone(), c.clone());
        }
        out
    }

    pub fn scale(&self, s: &Rat) -> Poly {
        let mut out = Poly::zero(self.nvars);
        for (e, c) in &self.terms {
            out.add_term(e.clone(), c * s);
        }
        out
    }

    pub fn mul(&self, other: &Poly) -> Poly {
        let mut out = Poly::zero(self.nvars);
        for (e1, c1) in &self.terms {
            for (e2, c2) in &other.terms {
                let e: Vec<u32> = e1.iter().zip(e2).map(|(a, b)| a + b).collect();
                out.add_term(e, c1 * c2);
            }
        }
        out
    }

    pub fn pow(&self, k: u32) -> Poly {
        let mut out = Poly::constant(self.nvars, Rat::one());
        for _ in 0..k {
            out = out.mul(self);
        }
        out
    }

    pub fn eval(&self, x: &[Rat]) -> Rat {
        let mut acc = Rat::zero();
        for (e, c) in &self.terms {
            let mut t = c.clone();
            for (k, &ek) in e.iter().enumerate() {
                for _ in 0..ek {
                    t *= &x[k];
                }
            }
            acc += t;
        }
        acc
    }

    pub fn eval_f64(&self, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (e, c) in &self.terms {
            let mut t = crate::polytope::exact::rat_to_f64(c);
            for (k, &ek) in e.iter().enumerate() {
                t *= x[k].powi(ek as i32);
            }
            acc += t;
        }
        acc
    }
}

pub fn rat_to_f64(r: &Rat) -> f64 {
    use num::ToPrimitive;
    r.to_f64().unwrap_or(f64::NAN)
}

/// Affine constraint `⟨a, x⟩ + c ≥ 0` with rational data.
#[derive(Debug, Clone)]
pub struct Constraint {
    pub a: Vec<Rat>,
    pub c: Rat,
}

impl Constraint {
    pub fn eval(&self, x: &[Rat]) -> Rat {
        let mut acc = self.c.clone();
        for (ak, xk) in self.a.iter().zip(x) {
            acc += ak * xk;
        }
        acc
    }
}

/// All basic feasible intersections of `n`-subsets of the constraints,
/// deduplicated. For a bounded feasible system this is the vertex set.
pub fn enumerate_vertices(constraints: &[Constraint], n: usize) -> Vec<Vec<Rat>> {
    let m = constraints.len();
    let mut verts: Vec<Vec<Rat>> = Vec::new();
    let mut subset = vec![0usize; n];
    enumerate_subsets(m, n, &mut subset, 0, 0, &mut |s| {
        let a: Vec<Vec<Rat>> = s.iter().map(|&i| constraints[i].a.clone()).collect();
        let b: Vec<Rat> = s.iter().map(|&i| -constraints[i].c.clone()).collect();
        if let Some(x) = solve_rational(&a, &b) {
            if constraints.iter().all(|c| !c.eval(&x).is_negative()) && !verts.contains(&x) {
                verts.push(x);
            }
        }
    });
    verts
}

fn enumerate_subsets(
    m: usize,
    k: usize,
    buf: &mut Vec<usize>,
    start: usize,
    depth: usize,
    f: &mut impl FnMut(&[usize]),
) {
    if depth == k {
        f(buf);
        return;
    }
    for i in start..m {
        buf[depth] = i;
        enumerate_subsets(m, k, buf, i + 1, depth + 1, f);
    }
}

fn affine_rank(verts: &[Vec<Rat>], idxs: &[usize]) -> usize {
    if idxs.len() <= 1 {
        return 0;
    }
    let base = &verts[idxs[0]];
    let rows: Vec<Vec<Rat>> = idxs[1..]
        .iter()
        .map(|&i| verts[i].iter().zip(base).map(|(a, b)| a - b).collect())
        .collect();
    rational_rank(&rows)
}

/// Pulling triangulation of the face spanned by `face` (vertex indices),
/// of affine dimension `dim`, inside the constraint system. Faces are
/// recovered as activity sets of single constraints; the pull vertex is
/// the lexicographically smallest, which makes the result deterministic
/// and consistent across shared ridges.
pub fn pulling_triangulation(
    verts: &[Vec<Rat>],
    face: &[usize],
    constraints: &[Constraint],
    dim: usize,
) -> Vec<Vec<usize>> {
    if dim == 0 {
        return vec![vec![face[0]]];
    }
    let v0 = *face
        .iter()
        .min_by(|&&a, &&b| verts[a].cmp(&verts[b]))
        .expect("nonempty face");

    let mut out = Vec::new();
    let mut seen: BTreeSet<Vec<usize>> = BTreeSet::new();
    for cons in constraints {
        let sub: Vec<usize> = face
            .iter()
            .copied()
            .filter(|&i| cons.eval(&verts[i]).is_zero())
            .collect();
        if sub.len() < dim || sub.contains(&v0) || sub.len() == face.len() {
            continue;
        }
        if affine_rank(verts, &sub) != dim - 1 {
            continue;
        }
        let mut key = sub.clone();
        key.sort_unstable();
        if !seen.insert(key) {
            continue;
        }
        for mut simplex in pulling_triangulation(verts, &sub, constraints, dim - 1) {
            simplex.push(v0);
            out.push(simplex);
        }
    }
    out
}

pub fn det_rational(cols: &[Vec<Rat>]) -> Rat {
    let n = cols.len();
    let mut m: Vec<Vec<Rat>> = (0..n)
        .map(|r| (0..n).map(|c| cols[c][r].clone()).collect())
        .collect();
    let mut det = Rat::one();
    for col in 0..n {
        let Some(piv) = (col..n).find(|&r| !m[r][col].is_zero()) else {
            return Rat::zero();
        };
        if piv != col {
            m.swap(col, piv);
            det = -det;
        }
        det *= m[col][col].clone();
        for r in col + 1..n {
            if m[r][col].is_zero() {
                continue;
            }
            let factor = &m[r][col] / &m[col][col];
            for c in col..n {
                let t = &factor * &m[col][c];
                m[r][c] = &m[r][c] - t;
            }
        }
    }
    det
}

/// ∫_S q dλ over the simplex with the given vertices, where the measure is
/// `jac · dλ` on the standard simplex of matching dimension.
fn poly_integral_over_simplex(verts: &[&Vec<Rat>], q: &Poly, jac: &Rat) -> Rat {
    let d = verts.len() - 1;
    if jac.is_zero() {
        return Rat::zero();
    }
    if d == 0 {
        return jac * q.eval(verts[0]);
    }
    let n = verts[0].len();
    // substitute x_k = w0_k + Σ_i λ_i (w_i − w0)_k
    let subs: Vec<Poly> = (0..n)
        .map(|k| {
            let grad: Vec<Rat> = (0..d).map(|i| &verts[i + 1][k] - &verts[0][k]).collect();
            Poly::affine(&grad, verts[0][k].clone())
        })
        .collect();
    // powers cache per ambient variable
    let max_deg: Vec<u32> = (0..n)
        .map(|k| q.terms.keys().map(|e| e[k]).max().unwrap_or(0))
        .collect();
    let mut powers: Vec<Vec<Poly>> = Vec::with_capacity(n);
    for k in 0..n {
        let mut ps = vec![Poly::constant(d, Rat::one())];
        for j in 1..=max_deg[k] as usize {
            let next = ps[j - 1].mul(&subs[k]);
            ps.push(next);
        }
        powers.push(ps);
    }
    let mut acc = Rat::zero();
    for (e, c) in &q.terms {
        let mut term = Poly::constant(d, c.clone());
        for k in 0..n {
            if e[k] > 0 {
                term = term.mul(&powers[k][e[k] as usize]);
            }
        }
        // ∫_{Δ^d} λ^β dλ = β! / (|β| + d)!
        for (beta, coeff) in &term.terms {
            let total: u32 = beta.iter().sum();
            let mut num = BigInt::one();
            for &bk in beta {
                num *= factorial(bk as usize);
            }
            let den = factorial(total as usize + d);
            acc += coeff * Rat::new(num, den);
        }
    }
    acc * jac
}

/// Exact `∫ q dμ` over the feasible region of the constraints (assumed
/// bounded, full-dimensional, with `verts` its vertex set).
pub fn interior_integral(
    verts: &[Vec<Rat>],
    constraints: &[Constraint],
    n: usize,
    q: &Poly,
) -> Rat {
    if verts.len() < n + 1 {
        return Rat::zero();
    }
    let all: Vec<usize> = (0..verts.len()).collect();
    if affine_rank(verts, &all) < n {
        return Rat::zero();
    }
    let mut acc = Rat::zero();
    for simplex in pulling_triangulation(verts, &all, constraints, n) {
        let vs: Vec<&Vec<Rat>> = simplex.iter().map(|&i| &verts[i]).collect();
        let cols: Vec<Vec<Rat>> = (1..=n)
            .map(|i| (0..n).map(|k| &vs[i][k] - &vs[0][k]).collect())
            .collect();
        let jac = det_rational(&cols).abs();
        acc += poly_integral_over_simplex(&vs, q, &jac);
    }
    acc
}

/// Exact `∫ q dσ` over the face of the feasible region lying on the
/// hyperplane of `normal` (integer facet normal): σ is Lebesgue measure on
/// the facet divided by |normal|. A zero-dimensional facet carries mass 1.
pub fn facet_sigma_integral(
    verts: &[Vec<Rat>],
    constraints: &[Constraint],
    face: &[usize],
    normal: &[i64],
    n: usize,
    q: &Poly,
) -> Rat {
    if face.is_empty() {
        return Rat::zero();
    }
    if n == 1 {
        // facets are points with σ-mass 1
        return face.iter().map(|&i| q.eval(&verts[i])).sum();
    }
    if affine_rank(verts, face) < n - 1 {
        return Rat::zero();
    }
    let norm_sq: i64 = normal.iter().map(|&v| v * v).sum();
    let norm_sq = rat_int(norm_sq);
    let normal_col: Vec<Rat> = normal.iter().map(|&v| rat_int(v)).collect();
    let mut acc = Rat::zero();
    for simplex in pulling_triangulation(verts, face, constraints, n - 1) {
        let vs: Vec<&Vec<Rat>> = simplex.iter().map(|&i| &verts[i]).collect();
        let mut cols: Vec<Vec<Rat>> = (1..n)
            .map(|i| (0..n).map(|k| &vs[i][k] - &vs[0][k]).collect())
            .collect();
        cols.push(normal_col.clone());
        let jac = det_rational(&cols).abs() / &norm_sq;
        acc += poly_integral_over_simplex(&vs, q, &jac);
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_interval() -> (Vec<Constraint>, Vec<Vec<Rat>>) {
        let cons = vec![
            Constraint {
                a: vec![rat_int(1)],
                c: rat_int(0),
            },
            Constraint {
                a: vec![rat_int(-1)],
                c: rat_int(1),
            },
        ];
        let verts = enumerate_vertices(&cons, 1);
        (cons, verts)
    }

    fn simplex2() -> (Vec<Constraint>, Vec<Vec<Rat>>) {
        let cons = vec![
            Constraint {
                a: vec![rat_int(1), rat_int(0)],
                c: rat_int(0),
            },
            Constraint {
                a: vec![rat_int(0), rat_int(1)],
                c: rat_int(0),
            },
            Constraint {
                a: vec![rat_int(-1), rat_int(-1)],
                c: rat_int(1),
            },
        ];
        let verts = enumerate_vertices(&cons, 2);
        (cons, verts)
    }

    #[test]
    fn interval_moments() {
        let (cons, verts) = unit_interval();
        assert_eq!(verts.len(), 2);
        let one = Poly::constant(1, Rat::one());
        assert_eq!(interior_integral(&verts, &cons, 1, &one), rat_int(1));
        let x2 = Poly::monomial(1, &[2]);
        assert_eq!(interior_integral(&verts, &cons, 1, &x2), rat(1, 3));
    }

    #[test]
    fn simplex_moments_match_dirichlet() {
        let (cons, verts) = simplex2();
        assert_eq!(verts.len(), 3);
        let one = Poly::constant(2, Rat::one());
        assert_eq!(interior_integral(&verts, &cons, 2, &one), rat(1, 2));
        let x = Poly::monomial(2, &[1, 0]);
        assert_eq!(interior_integral(&verts, &cons, 2, &x), rat(1, 6));
        let xy = Poly::monomial(2, &[1, 1]);
        // x^a y^b over Δ²: a! b! / (a+b+2)! = 1/24
        assert_eq!(interior_integral(&verts, &cons, 2, &xy), rat(1, 24));
    }

    #[test]
    fn hypotenuse_sigma_length_is_one() {
        let (cons, verts) = simplex2();
        let face: Vec<usize> = (0..verts.len())
            .filter(|&i| cons[2].eval(&verts[i]).is_zero())
            .collect();
        let one = Poly::constant(2, Rat::one());
        let len = facet_sigma_integral(&verts, &cons, &face, &[-1, -1], 2, &one);
        assert_eq!(len, rat_int(1));
    }

    #[test]
    fn cube_moment_is_product_of_interval_moments() {
        let mut cons = Vec::new();
        for k in 0..3 {
            let mut a = vec![rat_int(0); 3];
            a[k] = rat_int(1);
            cons.push(Constraint {
                a: a.clone(),
                c: rat_int(0),
            });
            let mut a = vec![rat_int(0); 3];
            a[k] = rat_int(-1);
            cons.push(Constraint { a, c: rat_int(1) });
        }
        let verts = enumerate_vertices(&cons, 3);
        assert_eq!(verts.len(), 8);
        let q = Poly::monomial(3, &[1, 2, 0]);
        // ∫x = 1/2, ∫y² = 1/3
        assert_eq!(interior_integral(&verts, &cons, 3, &q), rat(1, 6));
    }
}

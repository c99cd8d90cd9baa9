//! Delzant polytope data model: facet presentation `l_i(x) = ⟨x, n_i⟩ + c_i`
//! with primitive integer inward normals, validity checking in exact
//! rational arithmetic, exact interior/boundary quadrature, and uniform
//! grid charts over the closure.

pub mod chart;
pub mod exact;

use std::fmt;
use std::path::Path;

use num::{Signed, Zero};
use serde::{Deserialize, Serialize};

use crate::linalg::rational_rank;
use crate::{Error, Result};
use exact::{rat_from_f64, rat_int, rat_to_f64, Constraint, Poly, Rat};

pub use chart::{GridChart, NodeClass};

/// One facet: `l(x) = ⟨x, normal⟩ + offset` vanishes on it, and the normal
/// points inward.
#[derive(Debug, Clone)]
pub struct Facet {
    pub normal: Vec<i64>,
    pub offset: Rat,
}

impl Facet {
    pub fn new(normal: Vec<i64>, offset: Rat) -> Self {
        Facet { normal, offset }
    }

    pub fn constraint(&self) -> Constraint {
        Constraint {
            a: self.normal.iter().map(|&v| rat_int(v)).collect(),
            c: self.offset.clone(),
        }
    }
}

/// A validated Delzant polytope with its vertex set cached exactly.
#[derive(Debug, Clone)]
pub struct DelzantPolytope {
    pub name: String,
    pub dim: usize,
    pub facets: Vec<Facet>,
    /// Exact vertices, lexicographically sorted.
    pub vertices: Vec<Vec<Rat>>,
    constraints: Vec<Constraint>,
    // float mirrors for the grid-side code
    normals_f64: Vec<Vec<f64>>,
    offsets_f64: Vec<f64>,
    norms: Vec<f64>,
    vertices_f64: Vec<Vec<f64>>,
}

fn gcd(a: i64, b: i64) -> i64 {
    let (mut a, mut b) = (a.abs(), b.abs());
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

/// Nonzero integer direction spanning the rational kernel of the given
/// normal rows, if the kernel is one-dimensional.
fn integer_kernel_direction(rows: &[Vec<Rat>], n: usize) -> Option<Vec<i64>> {
    // eliminate to row echelon, then back-substitute one free variable
    let mut m: Vec<Vec<Rat>> = rows.to_vec();
    let mut pivots: Vec<(usize, usize)> = Vec::new();
    let mut rank = 0usize;
    for col in 0..n {
        let Some(piv) = (rank..m.len()).find(|&r| !m[r][col].is_zero()) else {
            continue;
        };
        m.swap(rank, piv);
        for r in 0..m.len() {
            if r != rank && !m[r][col].is_zero() {
                let factor = &m[r][col] / &m[rank][col];
                for c in 0..n {
                    let t = &factor * &m[rank][c];
                    m[r][c] = &m[r][c] - t;
                }
            }
        }
        pivots.push((rank, col));
        rank += 1;
    }
    if rank + 1 != n {
        return None;
    }
    let pivot_cols: Vec<usize> = pivots.iter().map(|&(_, c)| c).collect();
    let free_col = (0..n).find(|c| !pivot_cols.contains(c))?;
    let mut dir = vec![Rat::zero(); n];
    dir[free_col] = Rat::from_integer(1.into());
    for &(r, c) in pivots.iter().rev() {
        // m[r][c] * dir[c] + m[r][free_col] * 1 = 0
        dir[c] = -&m[r][free_col] / &m[r][c];
    }
    // clear denominators
    let mut denom_lcm = num::BigInt::from(1);
    for d in &dir {
        denom_lcm = num::integer::lcm(denom_lcm, d.denom().clone());
    }
    let ints: Vec<num::BigInt> = dir
        .iter()
        .map(|d| (d * Rat::from_integer(denom_lcm.clone())).to_integer())
        .collect();
    use num::ToPrimitive;
    let out: Option<Vec<i64>> = ints.iter().map(|v| v.to_i64()).collect();
    out
}

/// Validate the Delzant conditions and enumerate vertices. On failure the
/// error names the offending facet or vertex.
pub fn check_delzant(name: &str, dim: usize, facets: Vec<Facet>) -> Result<DelzantPolytope> {
    if facets.len() < dim + 1 {
        return Err(Error::TooFewFacets {
            need: dim + 1,
            got: facets.len(),
        });
    }
    for (i, f) in facets.iter().enumerate() {
        if f.normal.len() != dim {
            return Err(Error::InvalidInput(format!(
                "facet {i}: normal has length {}, expected {dim}",
                f.normal.len()
            )));
        }
        let g = f.normal.iter().fold(0i64, |acc, &v| gcd(acc, v));
        if g != 1 {
            return Err(Error::NonPrimitiveNormal {
                facet: i,
                normal: f.normal.clone(),
                gcd: g,
            });
        }
    }

    // Boundedness: the recession cone {d : ⟨n_i, d⟩ ≥ 0 ∀i} must be {0}.
    // If the normals do not span, any kernel direction is a line of
    // recession; otherwise a nontrivial cone has an extreme ray active on
    // some (dim−1)-subset of the normals.
    let normal_rows: Vec<Vec<Rat>> = facets
        .iter()
        .map(|f| f.normal.iter().map(|&v| rat_int(v)).collect())
        .collect();
    if rational_rank(&normal_rows) < dim {
        let dir = integer_kernel_direction(&normal_rows, dim).unwrap_or_else(|| vec![0; dim]);
        return Err(Error::Unbounded { direction: dir });
    }
    let mut ray_violation: Option<Vec<i64>> = None;
    let m = facets.len();
    let mut subset = vec![0usize; dim.saturating_sub(1)];
    let check_ray = |d: &[i64]| {
        let fits = |sign: i64| {
            facets.iter().all(|f| {
                let dot: i64 = f.normal.iter().zip(d).map(|(&a, &b)| a * b).sum();
                sign * dot >= 0
            })
        };
        if fits(1) {
            Some(d.to_vec())
        } else if fits(-1) {
            Some(d.iter().map(|&v| -v).collect())
        } else {
            None
        }
    };
    enumerate_k_subsets(m, dim.saturating_sub(1), &mut subset, &mut |s| {
        if ray_violation.is_some() {
            return;
        }
        let rows: Vec<Vec<Rat>> = s.iter().map(|&i| normal_rows[i].clone()).collect();
        if let Some(d) = integer_kernel_direction(&rows, dim) {
            if d.iter().any(|&v| v != 0) {
                if let Some(bad) = check_ray(&d) {
                    ray_violation = Some(bad);
                }
            }
        }
    });
    if let Some(direction) = ray_violation {
        return Err(Error::Unbounded { direction });
    }

    let constraints: Vec<Constraint> = facets.iter().map(|f| f.constraint()).collect();
    let mut vertices = exact::enumerate_vertices(&constraints, dim);
    vertices.sort();
    if vertices.is_empty() {
        return Err(Error::NoInteriorPoint);
    }

    // interior point: mean of vertices must be strictly feasible
    let nv = rat_int(vertices.len() as i64);
    let mean: Vec<Rat> = (0..dim)
        .map(|k| vertices.iter().map(|v| v[k].clone()).sum::<Rat>() / &nv)
        .collect();
    if constraints.iter().any(|c| !c.eval(&mean).is_positive()) {
        return Err(Error::NoInteriorPoint);
    }

    // Delzant condition at each vertex: exactly dim active facets whose
    // normals have determinant ±1.
    for v in &vertices {
        let active: Vec<usize> = (0..m)
            .filter(|&i| constraints[i].eval(v).is_zero())
            .collect();
        let vf: Vec<f64> = v.iter().map(rat_to_f64).collect();
        if active.len() != dim {
            return Err(Error::NonUnimodularVertex {
                vertex: vf,
                facets: active,
                det: 0,
            });
        }
        let cols: Vec<Vec<Rat>> = active.iter().map(|&i| normal_rows[i].clone()).collect();
        let det = exact::det_rational(&cols);
        if det.abs() != rat_int(1) {
            use num::ToPrimitive;
            return Err(Error::NonUnimodularVertex {
                vertex: vf,
                facets: active,
                det: det.to_integer().to_i64().unwrap_or(i64::MAX),
            });
        }
    }

    let normals_f64: Vec<Vec<f64>> = facets
        .iter()
        .map(|f| f.normal.iter().map(|&v| v as f64).collect())
        .collect();
    let offsets_f64: Vec<f64> = facets.iter().map(|f| rat_to_f64(&f.offset)).collect();
    let norms: Vec<f64> = normals_f64
        .iter()
        .map(|nv| nv.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let vertices_f64: Vec<Vec<f64>> = vertices
        .iter()
        .map(|v| v.iter().map(rat_to_f64).collect())
        .collect();

    Ok(DelzantPolytope {
        name: name.to_string(),
        dim,
        facets,
        vertices,
        constraints,
        normals_f64,
        offsets_f64,
        norms,
        vertices_f64,
    })
}

fn enumerate_k_subsets(m: usize, k: usize, buf: &mut Vec<usize>, f: &mut impl FnMut(&[usize])) {
    fn rec(m: usize, k: usize, buf: &mut Vec<usize>, start: usize, depth: usize, f: &mut impl FnMut(&[usize])) {
        if depth == k {
            f(buf);
            return;
        }
        for i in start..m {
            buf[depth] = i;
            rec(m, k, buf, i + 1, depth + 1, f);
        }
    }
    rec(m, k, buf, 0, 0, f)
}

impl DelzantPolytope {
    /// `l_i(x)` in floating point.
    pub fn l(&self, i: usize, x: &[f64]) -> f64 {
        let mut acc = self.offsets_f64[i];
        for (a, b) in self.normals_f64[i].iter().zip(x) {
            acc += a * b;
        }
        acc
    }

    /// `min_i l_i(x)`: positive inside, zero on the boundary.
    pub fn depth(&self, x: &[f64]) -> f64 {
        (0..self.facets.len())
            .map(|i| self.l(i, x))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn num_facets(&self) -> usize {
        self.facets.len()
    }

    pub fn constraints(&self) -> &[Constraint] {
        &self.constraints
    }

    pub fn normal_f64(&self, i: usize) -> &[f64] {
        &self.normals_f64[i]
    }

    pub fn normal_len(&self, i: usize) -> f64 {
        self.norms[i]
    }

    pub fn vertices_f64(&self) -> &[Vec<f64>] {
        &self.vertices_f64
    }

    /// Exact monomial moment `∫_P x^α dμ`.
    pub fn moment(&self, alpha: &[u32]) -> Rat {
        self.poly_moment(&Poly::monomial(self.dim, alpha))
    }

    /// Exact `∫_P q dμ` for a rational polynomial.
    pub fn poly_moment(&self, q: &Poly) -> Rat {
        exact::interior_integral(&self.vertices, &self.constraints, self.dim, q)
    }

    /// Exact `∫_{P_i} q dσ` over one facet.
    pub fn facet_sigma_moment(&self, i: usize, q: &Poly) -> Rat {
        let face: Vec<usize> = (0..self.vertices.len())
            .filter(|&v| self.constraints[i].eval(&self.vertices[v]).is_zero())
            .collect();
        exact::facet_sigma_integral(
            &self.vertices,
            &self.constraints,
            &face,
            &self.facets[i].normal,
            self.dim,
            q,
        )
    }

    /// Exact `∫_{∂P} q dσ`.
    pub fn boundary_sigma_moment(&self, q: &Poly) -> Rat {
        (0..self.facets.len())
            .map(|i| self.facet_sigma_moment(i, q))
            .sum()
    }

    /// Exact `∫_{P ∩ {crease ≥ 0}} q dμ`.
    pub fn cut_moment(&self, crease: &Constraint, q: &Poly) -> Rat {
        let mut cons = self.constraints.clone();
        cons.push(crease.clone());
        let verts = exact::enumerate_vertices(&cons, self.dim);
        exact::interior_integral(&verts, &cons, self.dim, q)
    }

    /// Exact `Σ_i ∫_{P_i ∩ {crease ≥ 0}} q dσ`.
    pub fn cut_boundary_sigma_moment(&self, crease: &Constraint, q: &Poly) -> Rat {
        let mut cons = self.constraints.clone();
        cons.push(crease.clone());
        let verts = exact::enumerate_vertices(&cons, self.dim);
        let mut acc = Rat::zero();
        for i in 0..self.facets.len() {
            let face: Vec<usize> = (0..verts.len())
                .filter(|&v| self.constraints[i].eval(&verts[v]).is_zero())
                .collect();
            if face.is_empty() {
                continue;
            }
            acc += exact::facet_sigma_integral(
                &verts,
                &cons,
                &face,
                &self.facets[i].normal,
                self.dim,
                q,
            );
        }
        acc
    }

    pub fn volume(&self) -> Rat {
        self.moment(&vec![0; self.dim])
    }

    /// σ-measure of the boundary, `Σ_i Leb(P_i)/|n_i|`.
    pub fn boundary_sigma_measure(&self) -> Rat {
        self.boundary_sigma_moment(&Poly::constant(self.dim, num::One::one()))
    }

    /// Exact centroid `∫ x dμ / ∫ dμ`; the default normalization point.
    pub fn centroid(&self) -> Vec<Rat> {
        let vol = self.volume();
        (0..self.dim)
            .map(|k| {
                let mut alpha = vec![0u32; self.dim];
                alpha[k] = 1;
                self.moment(&alpha) / &vol
            })
            .collect()
    }

    pub fn centroid_f64(&self) -> Vec<f64> {
        self.centroid().iter().map(rat_to_f64).collect()
    }

    /// Minimal Euclidean distance from a vertex to a facet not through it.
    pub fn min_vertex_facet_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for v in &self.vertices_f64 {
            for i in 0..self.facets.len() {
                let li = self.l(i, v);
                if li > 1e-12 {
                    best = best.min(li / self.norms[i]);
                }
            }
        }
        best
    }

    /// Composite numeric quadrature of `∫_{∂P} f dσ` with panels of size at
    /// most `max_cell`. In dimension one each endpoint carries σ-mass 1.
    pub fn boundary_integral(&self, max_cell: f64, f: impl Fn(&[f64]) -> f64) -> f64 {
        let mut acc = 0.0;
        for (point, weight) in self.boundary_panels(max_cell) {
            acc += weight * f(&point);
        }
        acc
    }

    /// Midpoint panels (point, σ-weight) covering ∂P.
    pub fn boundary_panels(&self, max_cell: f64) -> Vec<(Vec<f64>, f64)> {
        let mut panels = Vec::new();
        for i in 0..self.facets.len() {
            if self.dim == 1 {
                let v = self
                    .vertices_f64
                    .iter()
                    .find(|v| self.l(i, v).abs() < 1e-12)
                    .expect("facet vertex");
                panels.push((v.clone(), 1.0));
                continue;
            }
            let face: Vec<usize> = (0..self.vertices.len())
                .filter(|&v| self.constraints[i].eval(&self.vertices[v]).is_zero())
                .collect();
            let simplices = exact::pulling_triangulation(
                &self.vertices,
                &face,
                &self.constraints,
                self.dim - 1,
            );
            for s in simplices {
                let vs: Vec<Vec<f64>> = s
                    .iter()
                    .map(|&vi| self.vertices_f64[vi].clone())
                    .collect();
                subdivide_simplex_panels(&vs, self.norms[i], max_cell, &mut panels);
            }
        }
        panels
    }
}

/// Split a boundary (d = n−1)-simplex into subcells of diameter ≤ max_cell
/// and emit centroid panels with σ-weights.
fn subdivide_simplex_panels(
    verts: &[Vec<f64>],
    normal_len: f64,
    max_cell: f64,
    out: &mut Vec<(Vec<f64>, f64)>,
) {
    let n = verts[0].len();
    let d = verts.len() - 1;
    let mut diam: f64 = 0.0;
    for a in 0..verts.len() {
        for b in a + 1..verts.len() {
            let dist: f64 = (0..n)
                .map(|k| (verts[a][k] - verts[b][k]).powi(2))
                .sum::<f64>()
                .sqrt();
            diam = diam.max(dist);
        }
    }
    let k = (diam / max_cell).ceil().max(1.0) as usize;
    // Lebesgue volume of the simplex inside its hyperplane
    let vol = simplex_leb_volume(verts) / normal_len;
    match d {
        1 => {
            let w = vol / k as f64;
            for j in 0..k {
                let t = (j as f64 + 0.5) / k as f64;
                let p: Vec<f64> = (0..n)
                    .map(|c| verts[0][c] + t * (verts[1][c] - verts[0][c]))
                    .collect();
                out.push((p, w));
            }
        }
        2 => {
            // barycentric lattice split into k² congruent triangles
            let w = vol / (k * k) as f64;
            let at = |a: f64, b: f64| -> Vec<f64> {
                (0..n)
                    .map(|c| {
                        verts[0][c]
                            + a * (verts[1][c] - verts[0][c])
                            + b * (verts[2][c] - verts[0][c])
                    })
                    .collect()
            };
            let kf = k as f64;
            for i in 0..k {
                for j in 0..(k - i) {
                    // upward triangle centroid
                    let a = (i as f64 + 1.0 / 3.0) / kf;
                    let b = (j as f64 + 1.0 / 3.0) / kf;
                    out.push((at(a, b), w));
                    if j + i < k - 1 {
                        // downward triangle centroid
                        let a = (i as f64 + 2.0 / 3.0) / kf;
                        let b = (j as f64 + 2.0 / 3.0) / kf;
                        out.push((at(a, b), w));
                    }
                }
            }
        }
        _ => {
            // single centroid panel; adequate for the desk scales we target
            let p: Vec<f64> = (0..n)
                .map(|c| verts.iter().map(|v| v[c]).sum::<f64>() / verts.len() as f64)
                .collect();
            out.push((p, vol));
        }
    }
}

/// (d)-volume of a d-simplex embedded in R^n, via the Gram determinant.
fn simplex_leb_volume(verts: &[Vec<f64>]) -> f64 {
    let d = verts.len() - 1;
    let n = verts[0].len();
    let mut gram = vec![0.0; d * d];
    for a in 0..d {
        for b in 0..d {
            let mut dot = 0.0;
            for c in 0..n {
                dot += (verts[a + 1][c] - verts[0][c]) * (verts[b + 1][c] - verts[0][c]);
            }
            gram[a * d + b] = dot;
        }
    }
    let det = crate::linalg::det_sym(&gram, d).max(0.0);
    let mut fact = 1.0;
    for i in 2..=d {
        fact *= i as f64;
    }
    det.sqrt() / fact
}

// ---------------------------------------------------------------------------
// canonical polytopes
// ---------------------------------------------------------------------------

/// The interval `[a, b]` as a Delzant polytope.
pub fn interval(a: f64, b: f64) -> DelzantPolytope {
    check_delzant(
        "interval",
        1,
        vec![
            Facet::new(vec![1], -rat_from_f64(a)),
            Facet::new(vec![-1], rat_from_f64(b)),
        ],
    )
    .expect("interval is Delzant")
}

/// `[0,1]²`.
pub fn unit_square() -> DelzantPolytope {
    check_delzant(
        "square",
        2,
        vec![
            Facet::new(vec![1, 0], rat_int(0)),
            Facet::new(vec![0, 1], rat_int(0)),
            Facet::new(vec![-1, 0], rat_int(1)),
            Facet::new(vec![0, -1], rat_int(1)),
        ],
    )
    .expect("square is Delzant")
}

/// The standard simplex `{x ≥ 0, Σx ≤ 1}` in dimension `n`.
pub fn standard_simplex(n: usize) -> DelzantPolytope {
    let mut facets = Vec::new();
    for k in 0..n {
        let mut normal = vec![0i64; n];
        normal[k] = 1;
        facets.push(Facet::new(normal, rat_int(0)));
    }
    facets.push(Facet::new(vec![-1; n], rat_int(1)));
    check_delzant("simplex", n, facets).expect("standard simplex is Delzant")
}

// ---------------------------------------------------------------------------
// polytope file format
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FacetFile {
    normal: Vec<i64>,
    offset: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolytopeFile {
    name: String,
    dim: usize,
    facets: Vec<FacetFile>,
}

/// Parse and validate a polytope file (JSON object with `name`, `dim`,
/// `facets`; normals must be integer).
pub fn load_polytope(path: &Path) -> Result<DelzantPolytope> {
    let text = std::fs::read_to_string(path)?;
    parse_polytope(&text)
}

pub fn parse_polytope(text: &str) -> Result<DelzantPolytope> {
    let file: PolytopeFile =
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("polytope file: {e}")))?;
    let facets = file
        .facets
        .into_iter()
        .map(|f| Facet::new(f.normal, rat_from_f64(f.offset)))
        .collect();
    check_delzant(&file.name, file.dim, facets)
}

pub fn polytope_to_json(p: &DelzantPolytope) -> String {
    let file = PolytopeFile {
        name: p.name.clone(),
        dim: p.dim,
        facets: p
            .facets
            .iter()
            .map(|f| FacetFile {
                normal: f.normal.clone(),
                offset: rat_to_f64(&f.offset),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&file).expect("serializable")
}

impl fmt::Display for DelzantPolytope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} (dim {}, {} facets, {} vertices)",
            self.name,
            self.dim,
            self.facets.len(),
            self.vertices.len()
        )
    }
}

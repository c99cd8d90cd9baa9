//! Differential operators of the toric metric.
//!
//! Everything is assembled from the inverse-Hessian field `u^{ij}`: the
//! Hessian is the analytic Guillemin part plus centered differences of the
//! correction `f`, inverted pointwise. On boundary nodes the inverse
//! degenerates along the active facet normals, and the exact limit — the
//! inverse of the finite Hessian restricted to the face tangent space — is
//! used, so centered stencils near ∂P see the true boundary values instead
//! of an extrapolation of the singularity.
//!
//! Curvature quantities are contractions of the second-derivative tensor
//! `T^{ij}_{kl} = ∂²_kl u^{ij}` evaluated on nodes of depth ≥ 2h:
//! `R_u = −Σ T^{ij}_{ij}` (Abreu) and `|Rm|² = Σ T^{ij}_{kl} T^{kl}_{ij}`.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use crate::linalg::{invert_sym, min_eig_sym};
use crate::polytope::chart::{cube_index, GridChart, GHOST_FLAG, SENTINEL};
use crate::potential::SymplecticPotential;
use crate::{Error, Result};

/// Relative positive-definiteness threshold: a Hessian with
/// `λ_min ≤ SINGULAR_EIG_REL · trace` counts as singular.
pub const SINGULAR_EIG_REL: f64 = 1e-10;

/// Scalar field defined exactly on the deep nodes (depth ≥ 2h).
#[derive(Debug, Clone)]
pub struct FieldOnChart {
    pub chart: Arc<GridChart>,
    pub label: String,
    /// values in `chart.deep_nodes` order
    pub values: Vec<f64>,
}

impl FieldOnChart {
    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn sup_abs(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).fold(0.0, f64::max)
    }

    pub fn at_node(&self, node: u32) -> Option<f64> {
        let idx = self.chart.deep_index[node as usize];
        (idx != SENTINEL).then(|| self.values[idx as usize])
    }

    /// Value at an arbitrary point, snapped to the nearest deep node.
    pub fn at_point(&self, x: &[f64]) -> f64 {
        self.chart.interpolate_node_field_at_deep(&self.values, x)
    }

    /// Per-node rows `x..., value` with a header naming operator and grid.
    pub fn dump(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "# field={} {}", self.label, self.chart.signature())?;
        let n = self.chart.n();
        for (j, &id) in self.chart.deep_nodes.iter().enumerate() {
            let x = self.chart.point(id);
            for k in 0..n {
                write!(w, "{:.16e},", x[k])?;
            }
            writeln!(w, "{:.16e}", self.values[j])?;
        }
        Ok(())
    }
}

/// Matrix-valued field on deep nodes (row-major n×n per node).
#[derive(Debug, Clone)]
pub struct MatrixFieldOnChart {
    pub chart: Arc<GridChart>,
    pub label: String,
    pub values: Vec<f64>,
}

impl MatrixFieldOnChart {
    pub fn at_node(&self, node: u32) -> Option<&[f64]> {
        let n2 = self.chart.n() * self.chart.n();
        let idx = self.chart.deep_index[node as usize];
        (idx != SENTINEL).then(|| &self.values[idx as usize * n2..(idx as usize + 1) * n2])
    }
}

/// Full inverse-Hessian field over every node of `P̄`, with ghost
/// extension, ready for outer differencing.
#[derive(Debug, Clone)]
pub struct InvHessianField {
    pub values: Vec<f64>,
    pub ghosts: Vec<f64>,
    /// global min over nodes of λ_min of the (restricted) Hessian
    pub min_hess_eig: f64,
    /// matching Hessians, kept for log-det work (finite part only on
    /// boundary nodes)
    pub hessians: Vec<f64>,
}

/// Hessian + inverse at one node; the shared primitive.
#[inline]
fn node_hessian_inverse(
    chart: &GridChart,
    id: usize,
    f: &[f64],
    f_ghosts: &[f64],
    log_part: bool,
    hess_out: &mut [f64],
    inv_out: &mut [f64],
    scratch: &mut Scratch,
) -> Result<f64> {
    let n = chart.n();
    let cube = 3usize.pow(n as u32);
    let table = &chart.cube_points[id * cube..(id + 1) * cube];
    let inv_h2 = 1.0 / (chart.h * chart.h);

    let value = |enc: u32| -> f64 {
        debug_assert!(enc != SENTINEL);
        if enc & GHOST_FLAG == 0 {
            f[enc as usize]
        } else {
            f_ghosts[(enc & !GHOST_FLAG) as usize]
        }
    };

    // D²f by centered differences, 4-point cross stencil off-diagonal
    let center = f[id];
    for k in 0..n {
        let mut off = vec![0i64; n];
        off[k] = 1;
        let p = value(table[cube_index(&off)]);
        off[k] = -1;
        let m = value(table[cube_index(&off)]);
        scratch.d2f[k * n + k] = (p - 2.0 * center + m) * inv_h2;
        for l in k + 1..n {
            let mut o = vec![0i64; n];
            o[k] = 1;
            o[l] = 1;
            let pp = value(table[cube_index(&o)]);
            o[l] = -1;
            let pm = value(table[cube_index(&o)]);
            o[k] = -1;
            let mm = value(table[cube_index(&o)]);
            o[l] = 1;
            let mp = value(table[cube_index(&o)]);
            let cross = (pp - pm - mp + mm) * 0.25 * inv_h2;
            scratch.d2f[k * n + l] = cross;
            scratch.d2f[l * n + k] = cross;
        }
    }

    let geom = &chart.node_geom[id];
    for c in 0..n * n {
        hess_out[c] = scratch.d2f[c]
            + if log_part { geom.hess_g_fin[c] } else { 0.0 };
    }

    let free = !log_part || geom.active.is_empty();
    if free {
        let tr: f64 = (0..n).map(|k| hess_out[k * n + k]).sum();
        let me = min_eig_sym(hess_out, n);
        if me <= SINGULAR_EIG_REL * tr.abs() {
            return Err(Error::SingularHessian {
                node: chart.point(id as u32).to_vec(),
                min_eig: me,
            });
        }
        if !invert_sym(hess_out, n, inv_out) {
            return Err(Error::SingularHessian {
                node: chart.point(id as u32).to_vec(),
                min_eig: me,
            });
        }
        return Ok(me);
    }

    // Boundary limit: inverse of the Hessian restricted to the face
    // tangent space. Whenever a lattice basis of the face is available,
    // f is differenced intrinsically along it — those stencils stay on
    // the face, so the degenerate block never sees extrapolated values
    // from across the facet (an ambient projection leaks ghost error
    // into the tangential block at O(ε/h²)).
    let t = geom.tangent_dim;
    inv_out.iter_mut().for_each(|v| *v = 0.0);
    if t == 0 {
        return Ok(f64::INFINITY); // vertex: inverse vanishes, nothing to check
    }
    let lattice_basis = &geom.tangent_lattice;
    let intrinsic = lattice_basis.len() == t * n
        && intrinsic_tangential_hessian(
            chart,
            id,
            f,
            f_ghosts,
            lattice_basis,
            t,
            &mut scratch.mt,
        );
    if intrinsic {
        // Mt = VᵀH_G V + D²_V f with V the lattice tangent basis; the
        // reassembled inverse V Mt⁻¹ Vᵀ is basis-independent
        for r in 0..t {
            for c in 0..t {
                let mut acc = 0.0;
                for a in 0..n {
                    for bb in 0..n {
                        acc += lattice_basis[r * n + a] as f64
                            * (if log_part { geom.hess_g_fin[a * n + bb] } else { 0.0 })
                            * lattice_basis[c * n + bb] as f64;
                    }
                }
                scratch.mt[r * t + c] += acc;
            }
        }
    } else {
        // ambient projection fallback
        let b = &geom.tangent; // n×t orthonormal columns
        for r in 0..t {
            for c in 0..t {
                let mut acc = 0.0;
                for a in 0..n {
                    for bb in 0..n {
                        acc += b[a * t + r] * hess_out[a * n + bb] * b[bb * t + c];
                    }
                }
                scratch.mt[r * t + c] = acc;
            }
        }
    }
    let tr: f64 = (0..t).map(|k| scratch.mt[k * t + k]).sum();
    let me = min_eig_sym(&scratch.mt[..t * t], t);
    if me <= SINGULAR_EIG_REL * tr.abs() {
        return Err(Error::SingularHessian {
            node: chart.point(id as u32).to_vec(),
            min_eig: me,
        });
    }
    if !invert_sym(&scratch.mt[..t * t], t, &mut scratch.mt_inv[..t * t]) {
        return Err(Error::SingularHessian {
            node: chart.point(id as u32).to_vec(),
            min_eig: me,
        });
    }
    for a in 0..n {
        for c in 0..n {
            let mut acc = 0.0;
            for r in 0..t {
                for s in 0..t {
                    let (vr, vs) = if intrinsic {
                        (
                            lattice_basis[r * n + a] as f64,
                            lattice_basis[s * n + c] as f64,
                        )
                    } else {
                        (geom.tangent[a * t + r], geom.tangent[c * t + s])
                    };
                    acc += vr * scratch.mt_inv[r * t + s] * vs;
                }
            }
            inv_out[a * n + c] = acc;
        }
    }
    Ok(me)
}

/// Directional second differences of f along the face lattice basis,
/// written into `mt` (t×t). Returns false if any stencil point is
/// unavailable (callers fall back to the ambient projection).
fn intrinsic_tangential_hessian(
    chart: &GridChart,
    id: usize,
    f: &[f64],
    f_ghosts: &[f64],
    basis: &[i64],
    t: usize,
    mt: &mut [f64],
) -> bool {
    let n = chart.n();
    let pos = chart.node_lattice(id as u32);
    let inv_h2 = 1.0 / (chart.h * chart.h);
    let value = |off: &[i64]| -> Option<f64> {
        let q: Vec<i64> = (0..n).map(|k| pos[k] + off[k]).collect();
        chart.lattice_value(&q, f, f_ghosts)
    };
    let center = f[id];
    for a in 0..t {
        let va = &basis[a * n..(a + 1) * n];
        let plus = value(va);
        let minus: Option<f64> = {
            let neg: Vec<i64> = va.iter().map(|&v| -v).collect();
            value(&neg)
        };
        match (plus, minus) {
            (Some(p), Some(m)) => {
                mt[a * t + a] = (p - 2.0 * center + m) * inv_h2;
            }
            _ => return false,
        }
        for b in a + 1..t {
            let vb = &basis[b * n..(b + 1) * n];
            let mk = |sa: i64, sb: i64| -> Option<f64> {
                let off: Vec<i64> = (0..n).map(|k| sa * va[k] + sb * vb[k]).collect();
                value(&off)
            };
            match (mk(1, 1), mk(1, -1), mk(-1, 1), mk(-1, -1)) {
                (Some(pp), Some(pm), Some(mp), Some(mm)) => {
                    let cross = (pp - pm - mp + mm) * 0.25 * inv_h2;
                    mt[a * t + b] = cross;
                    mt[b * t + a] = cross;
                }
                _ => return false,
            }
        }
    }
    true
}

struct Scratch {
    d2f: Vec<f64>,
    mt: Vec<f64>,
    mt_inv: Vec<f64>,
}

impl Scratch {
    fn new(n: usize) -> Self {
        Scratch {
            d2f: vec![0.0; n * n],
            mt: vec![0.0; n * n],
            mt_inv: vec![0.0; n * n],
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct FieldDiag {
    pub min_hess_eig: f64,
    /// row-sum bound on λ_max of u^{ij} over all nodes
    pub max_g_norm: f64,
}

/// Core pass: Hessians, inverses, and determinants at every node of `P̄`.
/// Buffers are caller-owned so flow loops can reuse them.
pub(crate) fn inverse_hessian_into(
    chart: &GridChart,
    f: &[f64],
    f_ghosts: &[f64],
    log_part: bool,
    hessians: &mut [f64],
    g_field: &mut [f64],
    dets: &mut [f64],
) -> Result<FieldDiag> {
    let n = chart.n();
    let n2 = n * n;
    let num = chart.num_nodes();
    let mut min_hess_eig = f64::INFINITY;
    let mut max_g_norm = 0.0f64;
    let mut scratch = Scratch::new(n);
    for id in 0..num {
        let (h_slice, v_slice) = (
            &mut hessians[id * n2..(id + 1) * n2],
            &mut g_field[id * n2..(id + 1) * n2],
        );
        let me = node_hessian_inverse(
            chart, id, f, f_ghosts, log_part, h_slice, v_slice, &mut scratch,
        )?;
        if me < min_hess_eig {
            min_hess_eig = me;
        }
        dets[id] = if chart.interior_cell_weight[id] != 0.0 {
            crate::linalg::det_sym(h_slice, n)
        } else {
            1.0
        };
        for r in 0..n {
            let row: f64 = (0..n).map(|c| v_slice[r * n + c].abs()).sum();
            if row > max_g_norm {
                max_g_norm = row;
            }
        }
    }
    Ok(FieldDiag {
        min_hess_eig,
        max_g_norm,
    })
}

/// Build the full `u^{ij}` field (all nodes of `P̄`, ghost-extended).
pub fn inverse_hessian_field(u: &SymplecticPotential) -> Result<InvHessianField> {
    let chart = &u.chart;
    let n = chart.n();
    let n2 = n * n;
    let num = chart.num_nodes();
    let mut values = vec![0.0; num * n2];
    let mut hessians = vec![0.0; num * n2];
    let mut dets = vec![0.0; num];
    let diag = inverse_hessian_into(
        chart,
        &u.f,
        &u.ghosts,
        u.log_part,
        &mut hessians,
        &mut values,
        &mut dets,
    )?;
    let ghosts = extend_matrix_field(chart, &values, n2);
    Ok(InvHessianField {
        values,
        ghosts,
        min_hess_eig: diag.min_hess_eig,
        hessians,
    })
}

/// Ghost extension of a per-node matrix field, component-wise.
pub fn extend_matrix_field(chart: &GridChart, values: &[f64], stride: usize) -> Vec<f64> {
    let mut out = vec![0.0; chart.ghosts.len() * stride];
    for (g, st) in chart.ghosts.iter().enumerate() {
        for c in 0..stride {
            let mut acc = 0.0;
            for (s, w) in st.sources.iter().zip(&st.coeffs) {
                acc += w * values[*s as usize * stride + c];
            }
            out[g * stride + c] = acc;
        }
    }
    out
}

/// `∂²_kl` of a matrix-field component at a node, centered.
#[inline]
pub(crate) fn second_diff_component(
    chart: &GridChart,
    id: usize,
    comp: usize,
    stride: usize,
    field: &[f64],
    ghosts: &[f64],
    k: usize,
    l: usize,
) -> f64 {
    let n = chart.n();
    let cube = 3usize.pow(n as u32);
    let table = &chart.cube_points[id * cube..(id + 1) * cube];
    let inv_h2 = 1.0 / (chart.h * chart.h);
    let value = |enc: u32| -> f64 {
        if enc & GHOST_FLAG == 0 {
            field[enc as usize * stride + comp]
        } else {
            ghosts[(enc & !GHOST_FLAG) as usize * stride + comp]
        }
    };
    if k == l {
        let mut off = vec![0i64; n];
        off[k] = 1;
        let p = value(table[cube_index(&off)]);
        off[k] = -1;
        let m = value(table[cube_index(&off)]);
        let c = field[id * stride + comp];
        (p - 2.0 * c + m) * inv_h2
    } else {
        let mut o = vec![0i64; n];
        o[k] = 1;
        o[l] = 1;
        let pp = value(table[cube_index(&o)]);
        o[l] = -1;
        let pm = value(table[cube_index(&o)]);
        o[k] = -1;
        let mm = value(table[cube_index(&o)]);
        o[l] = 1;
        let mp = value(table[cube_index(&o)]);
        (pp - pm - mp + mm) * 0.25 * inv_h2
    }
}

/// Centered `D²f` matrices at every node of `P̄`.
pub(crate) fn d2f_field(u: &SymplecticPotential) -> Vec<f64> {
    let chart = &u.chart;
    let n = chart.n();
    let n2 = n * n;
    let cube = 3usize.pow(n as u32);
    let inv_h2 = 1.0 / (chart.h * chart.h);
    let mut out = vec![0.0; chart.num_nodes() * n2];
    for id in 0..chart.num_nodes() {
        let table = &chart.cube_points[id * cube..(id + 1) * cube];
        let value = |enc: u32| -> f64 {
            if enc & GHOST_FLAG == 0 {
                u.f[enc as usize]
            } else {
                u.ghosts[(enc & !GHOST_FLAG) as usize]
            }
        };
        let center = u.f[id];
        for k in 0..n {
            let mut off = vec![0i64; n];
            off[k] = 1;
            let p = value(table[cube_index(&off)]);
            off[k] = -1;
            let mm = value(table[cube_index(&off)]);
            out[id * n2 + k * n + k] = (p - 2.0 * center + mm) * inv_h2;
            for l in k + 1..n {
                let mut o = vec![0i64; n];
                o[k] = 1;
                o[l] = 1;
                let pp = value(table[cube_index(&o)]);
                o[l] = -1;
                let pm = value(table[cube_index(&o)]);
                o[k] = -1;
                let mmm = value(table[cube_index(&o)]);
                o[l] = 1;
                let mp = value(table[cube_index(&o)]);
                let cross = (pp - pm - mp + mmm) * 0.25 * inv_h2;
                out[id * n2 + k * n + l] = cross;
                out[id * n2 + l * n + k] = cross;
            }
        }
    }
    out
}

/// Second-derivative tensor `T^{ij}_{kl}` on deep nodes, flattened as
/// `((i·n+j)·n+k)·n+l`.
#[derive(Debug, Clone)]
pub struct TensorField {
    pub values: Vec<f64>,
}

pub fn second_derivative_tensor(u: &SymplecticPotential) -> Result<(InvHessianField, TensorField)> {
    let field = inverse_hessian_field(u)?;
    let tensor = tensor_from_field(&u.chart, &field);
    Ok((field, tensor))
}

pub fn tensor_from_field(chart: &GridChart, field: &InvHessianField) -> TensorField {
    let n = chart.n();
    let n2 = n * n;
    let mut values = vec![0.0; chart.deep_nodes.len() * n2 * n2];
    for (j, &id) in chart.deep_nodes.iter().enumerate() {
        for i in 0..n {
            for jj in 0..n {
                let comp = i * n + jj;
                for k in 0..n {
                    for l in 0..n {
                        values[((j * n2 + comp) * n + k) * n + l] = second_diff_component(
                            chart,
                            id as usize,
                            comp,
                            n2,
                            &field.values,
                            &field.ghosts,
                            k,
                            l,
                        );
                    }
                }
            }
        }
    }
    TensorField { values }
}

/// Restriction of the Hessian field to deep nodes (public view).
pub fn hessian(u: &SymplecticPotential) -> Result<MatrixFieldOnChart> {
    let field = inverse_hessian_field(u)?;
    Ok(deep_matrix_view(u, field.hessians, "hessian"))
}

/// Restriction of `u^{ij}` to deep nodes (public view).
pub fn inverse_hessian(u: &SymplecticPotential) -> Result<MatrixFieldOnChart> {
    let field = inverse_hessian_field(u)?;
    Ok(deep_matrix_view(u, field.values, "inverse_hessian"))
}

fn deep_matrix_view(u: &SymplecticPotential, full: Vec<f64>, label: &str) -> MatrixFieldOnChart {
    let chart = &u.chart;
    let n2 = chart.n() * chart.n();
    let mut values = Vec::with_capacity(chart.deep_nodes.len() * n2);
    for &id in &chart.deep_nodes {
        values.extend_from_slice(&full[id as usize * n2..(id as usize + 1) * n2]);
    }
    MatrixFieldOnChart {
        chart: chart.clone(),
        label: label.to_string(),
        values,
    }
}

/// Abreu operator `R_u = −Σ_{ij} ∂²_{ij} u^{ij}` on deep nodes.
pub fn abreu_scalar_curvature(u: &SymplecticPotential) -> Result<FieldOnChart> {
    let (field, tensor) = second_derivative_tensor(u)?;
    let _ = field;
    Ok(abreu_from_tensor(&u.chart, &tensor))
}

pub fn abreu_from_tensor(chart: &Arc<GridChart>, tensor: &TensorField) -> FieldOnChart {
    let n = chart.n();
    let n2 = n * n;
    let values = (0..chart.deep_nodes.len())
        .map(|j| {
            let mut acc = 0.0;
            for i in 0..n {
                for jj in 0..n {
                    let comp = i * n + jj;
                    acc += tensor.values[((j * n2 + comp) * n + i) * n + jj];
                }
            }
            -acc
        })
        .collect();
    FieldOnChart {
        chart: chart.clone(),
        label: "abreu_scalar_curvature".to_string(),
        values,
    }
}

/// `|Rm| = sqrt(Σ u^{ij}_{,kl} u^{kl}_{,ij})` on deep nodes.
pub fn riemannian_norm(u: &SymplecticPotential) -> Result<FieldOnChart> {
    let (_, tensor) = second_derivative_tensor(u)?;
    Ok(riemannian_from_tensor(&u.chart, &tensor))
}

pub fn riemannian_from_tensor(chart: &Arc<GridChart>, tensor: &TensorField) -> FieldOnChart {
    let n = chart.n();
    let n2 = n * n;
    let values = (0..chart.deep_nodes.len())
        .map(|j| {
            let mut acc = 0.0;
            for i in 0..n {
                for jj in 0..n {
                    for k in 0..n {
                        for l in 0..n {
                            let a = tensor.values[((j * n2 + (i * n + jj)) * n + k) * n + l];
                            let b = tensor.values[((j * n2 + (k * n + l)) * n + i) * n + jj];
                            acc += a * b;
                        }
                    }
                }
            }
            acc.max(0.0).sqrt()
        })
        .collect();
    FieldOnChart {
        chart: chart.clone(),
        label: "riemannian_norm".to_string(),
        values,
    }
}

// ---------------------------------------------------------------------------
// segment profiles
// ---------------------------------------------------------------------------

/// Arrays of `V(t) = u(a + t(b−a))`, its second derivative, `1/V″` and its
/// first two derivatives, plus the endpoint and chord-bound flags.
#[derive(Debug, Clone)]
pub struct SegmentProfile {
    pub ts: Vec<f64>,
    pub v: Vec<f64>,
    pub v2: Vec<f64>,
    pub w: Vec<f64>,
    pub w1: Vec<f64>,
    pub w2: Vec<f64>,
    pub rm_along: Vec<f64>,
    /// `1/V″` at the endpoints (vanishes when the endpoint meets a facet
    /// transversally)
    pub w_start: f64,
    pub w_end: f64,
    /// one-sided slope of `1/V″` at the endpoints
    pub w1_start: f64,
    pub w1_end: f64,
    /// `max_t [(1/V″)″(t) − |Rm|(l(t))]`
    pub chord_excess: f64,
}

/// Profile of `u` along the segment `[a, b] ⊂ P̄` at `m ≥ 5` samples.
pub fn segment_profile(
    u: &SymplecticPotential,
    a: &[f64],
    b: &[f64],
    m: usize,
) -> Result<SegmentProfile> {
    if m < 5 {
        return Err(Error::InvalidInput(format!(
            "segment profile needs at least 5 samples, got {m}"
        )));
    }
    let chart = &u.chart;
    let p = &chart.polytope;
    let n = chart.n();
    let dt = 1.0 / (m - 1) as f64;
    let dir: Vec<f64> = (0..n).map(|k| b[k] - a[k]).collect();
    let cs: Vec<f64> = (0..p.num_facets())
        .map(|i| {
            p.normal_f64(i)
                .iter()
                .zip(&dir)
                .map(|(nk, dk)| nk * dk)
                .sum()
        })
        .collect();

    let tol = 1e-9 * (1.0 + chart.h);
    let ts: Vec<f64> = (0..m).map(|j| j as f64 * dt).collect();
    let mut points = Vec::with_capacity(m);
    for &t in &ts {
        let x: Vec<f64> = (0..n).map(|k| a[k] + t * dir[k]).collect();
        for i in 0..p.num_facets() {
            let li = p.l(i, &x);
            if li < -tol {
                return Err(Error::SegmentLeavesPolytope {
                    t,
                    facet: i,
                    value: li,
                });
            }
        }
        points.push(x);
    }

    // V sampled directly
    let mut v = Vec::with_capacity(m);
    for x in &points {
        v.push(u.evaluate(x)?);
    }

    // (f∘l)″(t) = dᵀ·D²f·d through the interpolated Hessian-of-f field
    // (differencing interpolated f samples would amplify the interpolation
    // kinks instead)
    let d2f = d2f_field(u);
    let n2 = n * n;
    let mut d2f_dir = vec![0.0; chart.num_nodes()];
    for id in 0..chart.num_nodes() {
        let mut acc = 0.0;
        for r in 0..n {
            for c in 0..n {
                acc += dir[r] * d2f[id * n2 + r * n + c] * dir[c];
            }
        }
        d2f_dir[id] = acc;
    }
    let d2f_ghosts = chart.extend(&d2f_dir);

    // V″ = Σ c_i²·½/l_i (analytic) + dᵀ D²f d
    let mut v2 = Vec::with_capacity(m);
    let mut w = Vec::with_capacity(m);
    for point in points.iter().take(m) {
        let mut analytic = 0.0;
        let mut singular = false;
        if u.log_part {
            for i in 0..p.num_facets() {
                if cs[i].abs() < 1e-14 {
                    continue;
                }
                let li = p.l(i, point).max(0.0);
                if li <= tol {
                    singular = true;
                } else {
                    analytic += 0.5 * cs[i] * cs[i] / li;
                }
            }
        }
        if singular {
            v2.push(f64::INFINITY);
            w.push(0.0);
        } else {
            let val = analytic + chart.interpolate(&d2f_dir, &d2f_ghosts, point);
            v2.push(val);
            w.push(if val != 0.0 { 1.0 / val } else { f64::INFINITY });
        }
    }

    // derivatives of w in t: centered inside, one-sided second order at ends
    let d1 = |vals: &[f64], j: usize| -> f64 {
        if j == 0 {
            (-3.0 * vals[0] + 4.0 * vals[1] - vals[2]) / (2.0 * dt)
        } else if j == m - 1 {
            (3.0 * vals[m - 1] - 4.0 * vals[m - 2] + vals[m - 3]) / (2.0 * dt)
        } else {
            (vals[j + 1] - vals[j - 1]) / (2.0 * dt)
        }
    };
    let d2 = |vals: &[f64], j: usize| -> f64 {
        let idt2 = 1.0 / (dt * dt);
        if j == 0 {
            (2.0 * vals[0] - 5.0 * vals[1] + 4.0 * vals[2] - vals[3]) * idt2
        } else if j == m - 1 {
            (2.0 * vals[m - 1] - 5.0 * vals[m - 2] + 4.0 * vals[m - 3] - vals[m - 4]) * idt2
        } else {
            (vals[j + 1] - 2.0 * vals[j] + vals[j - 1]) * idt2
        }
    };
    let w1: Vec<f64> = (0..m).map(|j| d1(&w, j)).collect();
    let w2: Vec<f64> = (0..m).map(|j| d2(&w, j)).collect();

    // |Rm| along the segment, snapped to the nearest deep node
    let rm = riemannian_norm(u)?;
    let rm_along: Vec<f64> = points.iter().map(|x| rm.at_point(x)).collect();
    let chord_excess = (0..m)
        .map(|j| w2[j] - rm_along[j])
        .fold(f64::NEG_INFINITY, f64::max);

    Ok(SegmentProfile {
        w_start: w[0],
        w_end: w[m - 1],
        w1_start: w1[0],
        w1_end: w1[m - 1],
        ts,
        v,
        v2,
        w,
        w1,
        w2,
        rm_along,
        chord_excess,
    })
}

impl SegmentProfile {
    /// CSV dump: `t, v, v2, w, w1, w2, rm` rows plus a flags footer.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "t,v,v2,w,w1,w2,rm")?;
        for j in 0..self.ts.len() {
            writeln!(
                out,
                "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
                self.ts[j], self.v[j], self.v2[j], self.w[j], self.w1[j], self.w2[j],
                self.rm_along[j]
            )?;
        }
        writeln!(
            out,
            "# w_start={:.6e} w_end={:.6e} w1_start={:.6e} w1_end={:.6e} chord_excess={:.6e}",
            self.w_start, self.w_end, self.w1_start, self.w1_end, self.chord_excess
        )?;
        Ok(())
    }
}

#[cfg(test)]
mod tests;

//! Uniform grid charts over the polytope closure.
//!
//! The chart owns everything the finite-difference side needs and the
//! potential/geometry modules reuse: node classification by depth,
//! neighbor tables, ghost-extension stencils for stencil points that fall
//! outside `P̄`, closure stencils that rebuild shallow node values from the
//! deep zone, collapsed quadrature weights, boundary σ-panels, and the
//! analytic Guillemin Hessian data per node (with the degenerate boundary
//! limit handled through the active facet set).

use std::collections::HashMap;
use std::sync::Arc;

use crate::polytope::DelzantPolytope;
use crate::{Error, Result};

pub const SENTINEL: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeClass {
    /// depth ≥ h
    Interior,
    /// 0 ≤ depth < h
    BoundaryLayer,
}

/// Extrapolation stencil: value at the target is Σ coeffs·field[sources].
#[derive(Debug, Clone)]
pub struct RayStencil {
    pub sources: Vec<u32>,
    pub coeffs: Vec<f64>,
}

/// Per-node analytic Hessian data of the Guillemin part.
#[derive(Debug, Clone)]
pub struct NodeGeom {
    /// ½ Σ_{i not active} n_i n_iᵀ / l_i, row-major n×n.
    pub hess_g_fin: Vec<f64>,
    /// Orthonormal basis of the tangent space at the node's face (columns),
    /// flattened n×t. Empty active set gives the identity (t = n); a vertex
    /// gives t = 0 and a vanishing inverse Hessian.
    pub tangent: Vec<f64>,
    pub tangent_dim: usize,
    /// Lattice basis of the face tangent space (t rows of length n): the
    /// degenerate-limit Hessian is differenced along these directions, so
    /// its stencil never leaves the face.
    pub tangent_lattice: Vec<i64>,
    pub active: Vec<usize>,
}

#[derive(Debug)]
pub struct GridChart {
    pub polytope: Arc<DelzantPolytope>,
    pub h: f64,
    pub origin: Vec<f64>,
    pub dims: Vec<usize>,
    strides: Vec<usize>,

    /// lattice linear index -> node id (SENTINEL outside P̄)
    lattice_to_node: Vec<u32>,
    /// lattice linear index -> ghost id (SENTINEL if none)
    ghost_of_lattice: HashMap<usize, u32>,

    pub coords: Vec<f64>,
    pub lattice_pos: Vec<i64>,
    pub depth: Vec<f64>,
    pub class: Vec<NodeClass>,
    pub node_geom: Vec<NodeGeom>,

    pub interior_nodes: Vec<u32>,
    pub deep_nodes: Vec<u32>,
    pub is_deep: Vec<bool>,
    /// node id -> index into `deep_nodes`, SENTINEL otherwise
    pub deep_index: Vec<u32>,

    pub ghosts: Vec<RayStencil>,
    /// shallow (depth < 2h) nodes rebuilt from deep values during flows
    pub shallow_closure: Vec<(u32, RayStencil)>,

    /// collapsed node weights for ∫_P g dμ over all cells meeting P
    pub node_weight: Vec<f64>,
    /// collapsed node weights over cells with all corners interior
    pub interior_cell_weight: Vec<f64>,
    /// σ-quadrature panels (point, weight) at cell size ≤ h
    pub boundary_panels: Vec<(Vec<f64>, f64)>,
    /// ∫_{∂P} interp(f) dσ collapsed to node weights
    pub boundary_node_weight: Vec<f64>,

    /// Per node, the 3ⁿ cube of stencil points in odometer order, encoded
    /// as node id, GHOST_FLAG|ghost id, or SENTINEL.
    pub cube_points: Vec<u32>,
}

pub const GHOST_FLAG: u32 = 1 << 31;

/// Resolve an encoded cube entry against a field and its ghost extension.
#[inline(always)]
pub fn resolve(enc: u32, field: &[f64], ghosts: &[f64]) -> f64 {
    if enc & GHOST_FLAG == 0 {
        field[enc as usize]
    } else {
        ghosts[(enc & !GHOST_FLAG) as usize]
    }
}

/// Same for strided (matrix-component) fields.
#[inline(always)]
pub fn resolve_comp(enc: u32, field: &[f64], ghosts: &[f64], stride: usize, comp: usize) -> f64 {
    if enc & GHOST_FLAG == 0 {
        field[enc as usize * stride + comp]
    } else {
        ghosts[(enc & !GHOST_FLAG) as usize * stride + comp]
    }
}

/// Odometer index of a cube offset in {−1,0,1}ⁿ.
pub fn cube_index(off: &[i64]) -> usize {
    let mut idx = 0usize;
    for &o in off.iter().rev() {
        idx = idx * 3 + (o + 1) as usize;
    }
    idx
}

impl GridChart {
    pub fn n(&self) -> usize {
        self.polytope.dim
    }

    pub fn num_nodes(&self) -> usize {
        self.coords.len() / self.n().max(1)
    }

    pub fn point(&self, id: u32) -> &[f64] {
        let n = self.n();
        &self.coords[id as usize * n..id as usize * n + n]
    }

    /// Identity string for chart-compatibility checks.
    pub fn signature(&self) -> String {
        format!("{}/h={:.17e}/nodes={}", self.polytope.name, self.h, self.num_nodes())
    }

    pub fn same_chart(&self, other: &GridChart) -> bool {
        std::ptr::eq(self, other) || self.signature() == other.signature()
    }

    fn lattice_index(&self, pos: &[i64]) -> Option<usize> {
        let mut idx = 0usize;
        for (k, &p) in pos.iter().enumerate() {
            if p < 0 || p as usize >= self.dims[k] {
                return None;
            }
            idx += p as usize * self.strides[k];
        }
        Some(idx)
    }

    pub fn node_at(&self, pos: &[i64]) -> Option<u32> {
        let idx = self.lattice_index(pos)?;
        let id = self.lattice_to_node[idx];
        (id != SENTINEL).then_some(id)
    }

    pub fn node_lattice(&self, id: u32) -> &[i64] {
        let n = self.n();
        &self.lattice_pos[id as usize * n..id as usize * n + n]
    }

    /// Value of an extended field at an arbitrary lattice position: node
    /// value, ghost extrapolation, or None beyond coverage.
    pub fn lattice_value(&self, pos: &[i64], field: &[f64], ghosts: &[f64]) -> Option<f64> {
        let idx = self.lattice_index(pos)?;
        let id = self.lattice_to_node[idx];
        if id != SENTINEL {
            return Some(field[id as usize]);
        }
        self.ghost_of_lattice.get(&idx).map(|&g| ghosts[g as usize])
    }

    /// Ghost values for a per-node field.
    pub fn extend(&self, field: &[f64]) -> Vec<f64> {
        self.ghosts
            .iter()
            .map(|g| {
                g.sources
                    .iter()
                    .zip(&g.coeffs)
                    .map(|(&s, &c)| c * field[s as usize])
                    .sum()
            })
            .collect()
    }

    /// Rebuild shallow node values from the deep zone (used by flows so the
    /// evolved unknowns are exactly the deep values).
    pub fn close_shallow(&self, field: &mut [f64]) {
        for (node, st) in &self.shallow_closure {
            let v: f64 = st
                .sources
                .iter()
                .zip(&st.coeffs)
                .map(|(&s, &c)| c * field[s as usize])
                .sum();
            field[*node as usize] = v;
        }
    }

    /// Multilinear interpolation of a node field at x ∈ P̄, using ghost
    /// extension where cell corners leave the closure. Weights renormalize
    /// over available corners.
    pub fn interpolate(&self, field: &[f64], ghosts: &[f64], x: &[f64]) -> f64 {
        let n = self.n();
        let mut base = vec![0i64; n];
        let mut frac = vec![0.0; n];
        for k in 0..n {
            let t = (x[k] - self.origin[k]) / self.h;
            let mut i = t.floor() as i64;
            i = i.clamp(0, self.dims[k] as i64 - 2);
            base[k] = i;
            frac[k] = (t - i as f64).clamp(0.0, 1.0);
        }
        let mut acc = 0.0;
        let mut wsum = 0.0;
        let corners = 1usize << n;
        let mut pos = vec![0i64; n];
        for c in 0..corners {
            let mut w = 1.0;
            for k in 0..n {
                let bit = (c >> k) & 1;
                pos[k] = base[k] + bit as i64;
                w *= if bit == 1 { frac[k] } else { 1.0 - frac[k] };
            }
            if w == 0.0 {
                continue;
            }
            if let Some(v) = self.lattice_value(&pos, field, ghosts) {
                acc += w * v;
                wsum += w;
            }
        }
        if wsum > 0.0 {
            acc / wsum
        } else {
            0.0
        }
    }

    /// Gradient of the interpolant (piecewise multilinear): used only for
    /// probing smooth fields well inside the domain.
    pub fn interpolate_node_field_at_deep(&self, deep_values: &[f64], x: &[f64]) -> f64 {
        // snap to the nearest deep node; adequate for monitors
        match self.nearest_deep_node(x) {
            Some(i) => deep_values[self.deep_index[i as usize] as usize],
            None => f64::NAN,
        }
    }

    pub fn nearest_deep_node(&self, x: &[f64]) -> Option<u32> {
        let n = self.n();
        let mut best: Option<(f64, u32)> = None;
        for &id in &self.deep_nodes {
            let p = self.point(id);
            let d2: f64 = (0..n).map(|k| (p[k] - x[k]).powi(2)).sum();
            if best.map_or(true, |(bd, _)| d2 < bd) {
                best = Some((d2, id));
            }
        }
        best.map(|(_, id)| id)
    }

    /// ∫_P g dμ for a per-node sampled integrand (trapezoid-like collapsed
    /// cell rule; partial cells carry their clipped volume).
    pub fn integrate_nodes(&self, g: &[f64]) -> f64 {
        g.iter().zip(&self.node_weight).map(|(a, b)| a * b).sum()
    }

    /// Same, restricted to cells with all corners interior; for integrands
    /// that blow up on ∂P (log det of the Hessian).
    pub fn integrate_interior_cells(&self, g: &[f64]) -> f64 {
        g.iter()
            .zip(&self.interior_cell_weight)
            .map(|(a, b)| a * b)
            .sum()
    }

    /// ∫_{∂P} interp(g) dσ via the collapsed boundary weights.
    pub fn integrate_boundary_nodes(&self, g: &[f64]) -> f64 {
        g.iter()
            .zip(&self.boundary_node_weight)
            .map(|(a, b)| a * b)
            .sum()
    }
}

/// Build the chart. Deterministic given (P, h).
pub fn make_grid(polytope: Arc<DelzantPolytope>, h: f64) -> Result<GridChart> {
    let n = polytope.dim;
    if !(h > 0.0) {
        return Err(Error::InvalidInput(format!("grid spacing must be positive, got {h}")));
    }
    let min_dist = polytope.min_vertex_facet_distance();
    if h >= 0.5 * min_dist {
        return Err(Error::SpacingTooCoarse {
            h,
            reason: format!(
                "h must be below half the minimal vertex-to-facet distance {min_dist:.6}"
            ),
        });
    }

    let verts = polytope.vertices_f64();
    // pad the lattice by one step so ghost points just outside P̄ are
    // addressable
    let origin: Vec<f64> = (0..n)
        .map(|k| verts.iter().map(|v| v[k]).fold(f64::INFINITY, f64::min) - h)
        .collect();
    let upper: Vec<f64> = (0..n)
        .map(|k| verts.iter().map(|v| v[k]).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let dims: Vec<usize> = (0..n)
        .map(|k| ((upper[k] - origin[k]) / h + 1e-9).floor() as usize + 2)
        .collect();
    let mut strides = vec![1usize; n];
    for k in (0..n.saturating_sub(1)).rev() {
        strides[k] = strides[k + 1] * dims[k + 1];
    }
    let total: usize = dims.iter().product();

    let tol_active = 1e-9 * h;

    // classify lattice points
    let mut lattice_to_node = vec![SENTINEL; total];
    let mut coords = Vec::new();
    let mut lattice_pos = Vec::new();
    let mut depth = Vec::new();
    let mut class = Vec::new();
    let mut actives: Vec<Vec<usize>> = Vec::new();

    let mut pos = vec![0i64; n];
    for idx in 0..total {
        let mut rem = idx;
        for k in 0..n {
            pos[k] = (rem / strides[k]) as i64;
            rem %= strides[k];
        }
        let x: Vec<f64> = (0..n).map(|k| origin[k] + pos[k] as f64 * h).collect();
        let mut dmin = f64::INFINITY;
        let mut active = Vec::new();
        for i in 0..polytope.num_facets() {
            let li = polytope.l(i, &x);
            if li < -tol_active {
                dmin = f64::NEG_INFINITY;
                break;
            }
            if li.abs() <= tol_active {
                active.push(i);
            }
            dmin = dmin.min(li.max(0.0));
        }
        if dmin < 0.0 {
            continue;
        }
        let id = coords.len() / n.max(1);
        lattice_to_node[idx] = id as u32;
        coords.extend_from_slice(&x);
        lattice_pos.extend_from_slice(&pos);
        depth.push(dmin);
        class.push(if dmin >= h * (1.0 - 1e-9) {
            NodeClass::Interior
        } else {
            NodeClass::BoundaryLayer
        });
        actives.push(active);
    }

    let num_nodes = depth.len();
    let interior_nodes: Vec<u32> = (0..num_nodes as u32)
        .filter(|&i| class[i as usize] == NodeClass::Interior)
        .collect();
    if interior_nodes.is_empty() {
        return Err(Error::SpacingTooCoarse {
            h,
            reason: "no node at depth ≥ h".to_string(),
        });
    }
    let deep_nodes: Vec<u32> = (0..num_nodes as u32)
        .filter(|&i| depth[i as usize] >= 2.0 * h * (1.0 - 1e-9))
        .collect();
    let mut is_deep = vec![false; num_nodes];
    let mut deep_index = vec![SENTINEL; num_nodes];
    for (j, &i) in deep_nodes.iter().enumerate() {
        is_deep[i as usize] = true;
        deep_index[i as usize] = j as u32;
    }

    // per-node Guillemin Hessian data
    let mut node_geom = Vec::with_capacity(num_nodes);
    for id in 0..num_nodes {
        let x = &coords[id * n..id * n + n];
        let active = &actives[id];
        let mut hess = vec![0.0; n * n];
        for i in 0..polytope.num_facets() {
            if active.contains(&i) {
                continue;
            }
            let li = polytope.l(i, x);
            let nv = polytope.normal_f64(i);
            let w = 0.5 / li;
            for r in 0..n {
                for c in 0..n {
                    hess[r * n + c] += w * nv[r] * nv[c];
                }
            }
        }
        let (tangent, tdim) = tangent_basis(&polytope, active, n);
        let tangent_lattice = if active.is_empty() {
            Vec::new()
        } else {
            tangent_lattice_basis(&polytope, active, n, tdim)
        };
        node_geom.push(NodeGeom {
            hess_g_fin: hess,
            tangent,
            tangent_dim: tdim,
            tangent_lattice,
            active: active.clone(),
        });
    }

    let mut chart = GridChart {
        polytope: polytope.clone(),
        h,
        origin,
        dims,
        strides,
        lattice_to_node,
        ghost_of_lattice: HashMap::new(),
        coords,
        lattice_pos,
        depth,
        class,
        node_geom,
        interior_nodes,
        deep_nodes,
        is_deep,
        deep_index,
        ghosts: Vec::new(),
        shallow_closure: Vec::new(),
        node_weight: vec![0.0; num_nodes],
        interior_cell_weight: vec![0.0; num_nodes],
        boundary_panels: Vec::new(),
        boundary_node_weight: vec![0.0; num_nodes],
        cube_points: Vec::new(),
    };

    build_ghosts(&mut chart);
    build_cube_points(&mut chart);
    build_shallow_closure(&mut chart);
    build_cell_weights(&mut chart);
    build_boundary_weights(&mut chart);

    Ok(chart)
}

fn tangent_basis(p: &DelzantPolytope, active: &[usize], n: usize) -> (Vec<f64>, usize) {
    if active.is_empty() {
        let mut id = vec![0.0; n * n];
        for k in 0..n {
            id[k * n + k] = 1.0;
        }
        return (id, n);
    }
    // orthonormal complement of the active normals, by Gram-Schmidt over
    // the identity seeded with the normals first
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for &i in active {
        let v: Vec<f64> = p.normal_f64(i).to_vec();
        if let Some(u) = gram_schmidt_step(&basis, &v) {
            basis.push(u);
        }
    }
    let ndeg = basis.len();
    for k in 0..n {
        let mut v = vec![0.0; n];
        v[k] = 1.0;
        if let Some(u) = gram_schmidt_step(&basis, &v) {
            basis.push(u);
        }
    }
    let tangent_vecs = &basis[ndeg..];
    let tdim = tangent_vecs.len();
    let mut flat = vec![0.0; n * tdim];
    for (j, v) in tangent_vecs.iter().enumerate() {
        for r in 0..n {
            flat[r * tdim + j] = v[r];
        }
    }
    (flat, tdim)
}

/// Short integer vectors spanning {v ∈ Zⁿ : ⟨n_i, v⟩ = 0 for i active}.
/// Empty when no full basis is found within the search box (callers fall
/// back to the ambient projection).
fn tangent_lattice_basis(
    p: &DelzantPolytope,
    active: &[usize],
    n: usize,
    tdim: usize,
) -> Vec<i64> {
    if tdim == 0 {
        return Vec::new();
    }
    let mut found: Vec<Vec<i64>> = Vec::new();
    let bound = 6i64;
    let mut v = vec![-bound; n];
    'outer: loop {
        if v.iter().any(|&c| c != 0) {
            let orth = active.iter().all(|&i| {
                p.normal_f64(i)
                    .iter()
                    .zip(&v)
                    .map(|(a, &b)| a * b as f64)
                    .sum::<f64>()
                    .abs()
                    < 1e-9
            });
            if orth && rank_with(&found, &v, n) > found.len() {
                found.push(v.clone());
                if found.len() == tdim {
                    break;
                }
            }
        }
        let mut k = 0;
        loop {
            if k == n {
                break 'outer;
            }
            v[k] += 1;
            if v[k] <= bound {
                break;
            }
            v[k] = -bound;
            k += 1;
        }
    }
    if found.len() != tdim {
        return Vec::new();
    }
    // shortest-first ordering for stencil locality
    found.sort_by_key(|v| v.iter().map(|c| c * c).sum::<i64>());
    found.into_iter().flatten().collect()
}

fn rank_with(existing: &[Vec<i64>], candidate: &[i64], n: usize) -> usize {
    let mut rows: Vec<Vec<f64>> = existing
        .iter()
        .map(|r| r.iter().map(|&v| v as f64).collect())
        .collect();
    rows.push(candidate.iter().map(|&v| v as f64).collect());
    // simple f64 elimination is fine for small integer vectors
    let mut rank = 0;
    let m = rows.len();
    for col in 0..n {
        let Some(piv) = (rank..m).find(|&r| rows[r][col].abs() > 1e-9) else {
            continue;
        };
        rows.swap(rank, piv);
        for r in 0..m {
            if r != rank && rows[r][col].abs() > 1e-12 {
                let f = rows[r][col] / rows[rank][col];
                for c in 0..n {
                    rows[r][c] -= f * rows[rank][c];
                }
            }
        }
        rank += 1;
    }
    rank
}

fn gram_schmidt_step(basis: &[Vec<f64>], v: &[f64]) -> Option<Vec<f64>> {
    let n = v.len();
    let mut u = v.to_vec();
    for b in basis {
        let dot: f64 = b.iter().zip(&u).map(|(a, c)| a * c).sum();
        for k in 0..n {
            u[k] -= dot * b[k];
        }
    }
    let norm: f64 = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    if norm < 1e-9 {
        return None;
    }
    for uk in &mut u {
        *uk /= norm;
    }
    Some(u)
}

const RAY_SOURCES: usize = 5;

/// Extrapolation coefficients to offset 0 from sources at offsets
/// start..start+len (Lagrange).
fn extrapolation_coeffs(start: usize, len: usize) -> Vec<f64> {
    let pts: Vec<f64> = (0..len).map(|j| (start + j) as f64).collect();
    (0..len)
        .map(|j| {
            let mut c = 1.0;
            for i in 0..len {
                if i != j {
                    c *= (0.0 - pts[i]) / (pts[j] - pts[i]);
                }
            }
            c
        })
        .collect()
}

fn ray_directions(n: usize) -> Vec<Vec<i64>> {
    // axis directions first, then diagonals; deterministic order
    let mut dirs = Vec::new();
    for k in 0..n {
        for s in [1i64, -1] {
            let mut d = vec![0i64; n];
            d[k] = s;
            dirs.push(d);
        }
    }
    let mut stack = vec![vec![]];
    for _ in 0..n {
        let mut next = Vec::new();
        for s in &stack {
            for v in [-1i64, 0, 1] {
                let mut t = s.clone();
                t.push(v);
                next.push(t);
            }
        }
        stack = next;
    }
    for d in stack {
        if d.iter().filter(|&&v| v != 0).count() >= 2 {
            dirs.push(d);
        }
    }
    dirs
}

/// Pick a ray whose sources satisfy `ok`, starting at offset `start_min`,
/// preferring earlier directions and deeper sources.
fn find_ray(
    chart: &GridChart,
    pos: &[i64],
    dirs: &[Vec<i64>],
    start_min: usize,
    sources_wanted: usize,
    ok: &impl Fn(u32) -> bool,
) -> Option<(Vec<u32>, Vec<f64>)> {
    let n = chart.n();
    let mut best: Option<(f64, Vec<u32>, usize)> = None;
    for d in dirs {
        for start in start_min..start_min + 3 {
            let mut sources = Vec::with_capacity(sources_wanted);
            let mut depth_sum = 0.0;
            let mut good = true;
            for j in 0..sources_wanted {
                let q: Vec<i64> = (0..n)
                    .map(|k| pos[k] + d[k] * (start + j) as i64)
                    .collect();
                match chart.node_at(&q) {
                    Some(id) if ok(id) => {
                        depth_sum += chart.depth[id as usize];
                        sources.push(id);
                    }
                    _ => {
                        good = false;
                        break;
                    }
                }
            }
            if good {
                if best.as_ref().map_or(true, |(bs, _, _)| depth_sum > *bs + 1e-12) {
                    best = Some((depth_sum, sources, start));
                }
                break; // nearest start for this direction
            }
        }
    }
    best.map(|(_, sources, start)| {
        let coeffs = extrapolation_coeffs(start, sources_wanted);
        (sources, coeffs)
    })
}

fn build_ghosts(chart: &mut GridChart) {
    let n = chart.n();
    let dirs = ray_directions(n);
    // all out-of-P̄ lattice points within one cube step of a P̄ node
    let mut wanted: Vec<usize> = Vec::new();
    let mut seen = vec![false; chart.lattice_to_node.len()];
    let offsets = cube_offsets(n);
    for id in 0..chart.num_nodes() {
        let pos = chart.node_lattice(id as u32).to_vec();
        for off in &offsets {
            let q: Vec<i64> = (0..n).map(|k| pos[k] + off[k]).collect();
            if let Some(idx) = chart.lattice_index(&q) {
                if chart.lattice_to_node[idx] == SENTINEL && !seen[idx] {
                    seen[idx] = true;
                    wanted.push(idx);
                }
            }
        }
    }
    wanted.sort_unstable();
    for idx in wanted {
        let pos = lattice_decode(idx, &chart.strides, n);
        let stencil = match find_ray(chart, &pos, &dirs, 1, RAY_SOURCES, &|_| true) {
            Some((sources, coeffs)) => RayStencil { sources, coeffs },
            None => {
                // constant fallback from the nearest node
                let x: Vec<f64> = (0..n)
                    .map(|k| chart.origin[k] + pos[k] as f64 * chart.h)
                    .collect();
                let nearest = nearest_node(chart, &x);
                RayStencil {
                    sources: vec![nearest],
                    coeffs: vec![1.0],
                }
            }
        };
        let gid = chart.ghosts.len() as u32;
        chart.ghosts.push(stencil);
        chart.ghost_of_lattice.insert(idx, gid);
    }
}

fn build_cube_points(chart: &mut GridChart) {
    let n = chart.n();
    let cube = 3usize.pow(n as u32);
    let mut table = vec![SENTINEL; chart.num_nodes() * cube];
    let mut offsets: Vec<Vec<i64>> = cube_offsets(n);
    offsets.push(vec![0; n]);
    for id in 0..chart.num_nodes() {
        let pos = chart.node_lattice(id as u32).to_vec();
        for off in &offsets {
            let q: Vec<i64> = (0..n).map(|k| pos[k] + off[k]).collect();
            let enc = match chart.lattice_index(&q) {
                Some(idx) => {
                    let node = chart.lattice_to_node[idx];
                    if node != SENTINEL {
                        node
                    } else {
                        match chart.ghost_of_lattice.get(&idx) {
                            Some(&g) => GHOST_FLAG | g,
                            None => SENTINEL,
                        }
                    }
                }
                None => SENTINEL,
            };
            table[id * cube + cube_index(off)] = enc;
        }
    }
    chart.cube_points = table;
}

fn cube_offsets(n: usize) -> Vec<Vec<i64>> {
    let mut out = vec![vec![]];
    for _ in 0..n {
        let mut next = Vec::new();
        for s in &out {
            for v in [-1i64, 0, 1] {
                let mut t = s.clone();
                t.push(v);
                next.push(t);
            }
        }
        out = next;
    }
    out.retain(|d| d.iter().any(|&v| v != 0));
    out
}

fn lattice_decode(idx: usize, strides: &[usize], n: usize) -> Vec<i64> {
    let mut pos = vec![0i64; n];
    let mut rem = idx;
    for k in 0..n {
        pos[k] = (rem / strides[k]) as i64;
        rem %= strides[k];
    }
    pos
}

fn nearest_node(chart: &GridChart, x: &[f64]) -> u32 {
    let n = chart.n();
    let mut best = (f64::INFINITY, 0u32);
    for id in 0..chart.num_nodes() as u32 {
        let p = chart.point(id);
        let d2: f64 = (0..n).map(|k| (p[k] - x[k]).powi(2)).sum();
        if d2 < best.0 {
            best = (d2, id);
        }
    }
    best.1
}

fn build_shallow_closure(chart: &mut GridChart) {
    let n = chart.n();
    let dirs = ray_directions(n);
    // In one dimension the rim is damped by the vanishing inverse Hessian
    // and a quartic closure keeps the flow limit representable to high
    // order. In higher dimensions the tangential inverse Hessian is O(1)
    // on the rim and high-gain extrapolation closes an unstable feedback
    // loop through the drift, so the closure drops to linear there
    // (affine fields are still reproduced exactly).
    let closure_sources = if n == 1 { RAY_SOURCES } else { 2 };
    let mut closure = Vec::new();
    for id in 0..chart.num_nodes() as u32 {
        if chart.is_deep[id as usize] {
            continue;
        }
        let pos = chart.node_lattice(id).to_vec();
        let stencil = match find_ray(chart, &pos, &dirs, 1, closure_sources, &|s| {
            chart.is_deep[s as usize]
        }) {
            Some((sources, coeffs)) => RayStencil { sources, coeffs },
            None => {
                let x = chart.point(id).to_vec();
                match chart.nearest_deep_node(&x) {
                    Some(nd) => RayStencil {
                        sources: vec![nd],
                        coeffs: vec![1.0],
                    },
                    None => continue,
                }
            }
        };
        closure.push((id, stencil));
    }
    chart.shallow_closure = closure;
}

fn build_cell_weights(chart: &mut GridChart) {
    let n = chart.n();
    let h = chart.h;
    let cell_vol = h.powi(n as i32);
    let corners = cube_corner_offsets(n);
    let cell_dims: Vec<usize> = chart.dims.iter().map(|&d| d - 1).collect();
    let total_cells: usize = cell_dims.iter().product();
    let mut cell_strides = vec![1usize; n];
    for k in (0..n.saturating_sub(1)).rev() {
        cell_strides[k] = cell_strides[k + 1] * cell_dims[k + 1];
    }
    for cidx in 0..total_cells {
        let mut rem = cidx;
        let mut base = vec![0i64; n];
        for k in 0..n {
            base[k] = (rem / cell_strides[k]) as i64;
            rem %= cell_strides[k];
        }
        let mut ids: Vec<u32> = Vec::with_capacity(corners.len());
        let mut inside = 0usize;
        for off in &corners {
            let q: Vec<i64> = (0..n).map(|k| base[k] + off[k]).collect();
            match chart.node_at(&q) {
                Some(id) => {
                    ids.push(id);
                    inside += 1;
                }
                None => ids.push(SENTINEL),
            }
        }
        if inside == 0 {
            continue;
        }
        let w = if inside == corners.len() {
            cell_vol
        } else {
            clipped_cell_volume(chart, &base)
        };
        if w <= 0.0 {
            continue;
        }
        let share = w / inside as f64;
        for &id in ids.iter().filter(|&&id| id != SENTINEL) {
            chart.node_weight[id as usize] += share;
        }
    }
    // The log-det quadrature gets the full cell volume at every interior
    // node. The uniform rule reproduces the Guillemin boundary flux
    // G'(0)·f̂(0) = 2f̂(0) of the Mabuchi variation at leading order;
    // trapezoid-style rim halving would send 3f̂(0) instead and break the
    // gradient-flow identity by O(1) at the rim.
    for id in 0..chart.num_nodes() {
        if chart.class[id] == NodeClass::Interior {
            chart.interior_cell_weight[id] = cell_vol;
        }
    }
}

fn cube_corner_offsets(n: usize) -> Vec<Vec<i64>> {
    (0..(1usize << n))
        .map(|c| (0..n).map(|k| ((c >> k) & 1) as i64).collect())
        .collect()
}

/// Volume of cell ∩ P. Exact for n ≤ 2 (interval clip / polygon clip),
/// corner-count estimate beyond.
fn clipped_cell_volume(chart: &GridChart, base: &[i64]) -> f64 {
    let n = chart.n();
    let h = chart.h;
    let p = &chart.polytope;
    let lo: Vec<f64> = (0..n)
        .map(|k| chart.origin[k] + base[k] as f64 * h)
        .collect();
    match n {
        1 => {
            let (mut a, mut b) = (lo[0], lo[0] + h);
            for i in 0..p.num_facets() {
                let nv = p.normal_f64(i)[0];
                let c = p.l(i, &[0.0]);
                // nv*x + c ≥ 0
                if nv > 0.0 {
                    a = a.max(-c / nv);
                } else if nv < 0.0 {
                    b = b.min(-c / nv);
                }
            }
            (b - a).max(0.0)
        }
        2 => {
            let mut poly = vec![
                [lo[0], lo[1]],
                [lo[0] + h, lo[1]],
                [lo[0] + h, lo[1] + h],
                [lo[0], lo[1] + h],
            ]
            .to_vec();
            for i in 0..p.num_facets() {
                if poly.is_empty() {
                    break;
                }
                let eval = |pt: &[f64; 2]| p.l(i, pt);
                let mut out: Vec<[f64; 2]> = Vec::with_capacity(poly.len() + 2);
                for j in 0..poly.len() {
                    let cur = poly[j];
                    let nxt = poly[(j + 1) % poly.len()];
                    let (dc, dn) = (eval(&cur), eval(&nxt));
                    if dc >= 0.0 {
                        out.push(cur);
                    }
                    if (dc < 0.0) != (dn < 0.0) {
                        let t = dc / (dc - dn);
                        out.push([
                            cur[0] + t * (nxt[0] - cur[0]),
                            cur[1] + t * (nxt[1] - cur[1]),
                        ]);
                    }
                }
                poly = out;
            }
            // shoelace
            let mut area = 0.0;
            for j in 0..poly.len() {
                let a = poly[j];
                let b = poly[(j + 1) % poly.len()];
                area += a[0] * b[1] - b[0] * a[1];
            }
            0.5 * area.abs()
        }
        _ => {
            // corner fraction; only n ≥ 3 paths use this
            let corners = cube_corner_offsets(n);
            let inside = corners
                .iter()
                .filter(|off| {
                    let x: Vec<f64> = (0..n).map(|k| lo[k] + off[k] as f64 * h).collect();
                    p.depth(&x) >= 0.0
                })
                .count();
            h.powi(n as i32) * inside as f64 / corners.len() as f64
        }
    }
}

fn build_boundary_weights(chart: &mut GridChart) {
    let panels = chart.polytope.boundary_panels(chart.h);
    chart.boundary_panels = panels;
    chart.boundary_node_weight = chart.collapse_boundary_weights(|_| 1.0);
}

impl GridChart {
    /// Collapse `∫_{∂P} scale(x)·interp(f) dσ` onto node weights, through
    /// the interpolation cells and ghost stencils.
    pub fn collapse_boundary_weights(&self, scale: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        let chart = self;
        let n = chart.n();
        let mut node_w = vec![0.0; chart.num_nodes()];
        for (x, w0) in &chart.boundary_panels {
            let w = &(w0 * scale(x));
        let mut base = vec![0i64; n];
        let mut frac = vec![0.0; n];
        for k in 0..n {
            let t = (x[k] - chart.origin[k]) / chart.h;
            let mut i = t.floor() as i64;
            i = i.clamp(0, chart.dims[k] as i64 - 2);
            base[k] = i;
            frac[k] = (t - i as f64).clamp(0.0, 1.0);
        }
        // first pass: available weight mass for renormalization
        let corners = 1usize << n;
        let mut avail = 0.0;
        let mut pos = vec![0i64; n];
        for c in 0..corners {
            let mut lam = 1.0;
            for k in 0..n {
                let bit = (c >> k) & 1;
                pos[k] = base[k] + bit as i64;
                lam *= if bit == 1 { frac[k] } else { 1.0 - frac[k] };
            }
            if lam == 0.0 {
                continue;
            }
            if let Some(idx) = chart.lattice_index(&pos) {
                if chart.lattice_to_node[idx] != SENTINEL
                    || chart.ghost_of_lattice.contains_key(&idx)
                {
                    avail += lam;
                }
            }
        }
        if avail <= 0.0 {
            continue;
        }
        for c in 0..corners {
            let mut lam = 1.0;
            for k in 0..n {
                let bit = (c >> k) & 1;
                pos[k] = base[k] + bit as i64;
                lam *= if bit == 1 { frac[k] } else { 1.0 - frac[k] };
            }
            if lam == 0.0 {
                continue;
            }
            let Some(idx) = chart.lattice_index(&pos) else {
                continue;
            };
            let share = w * lam / avail;
            let id = chart.lattice_to_node[idx];
            if id != SENTINEL {
                node_w[id as usize] += share;
            } else if let Some(&g) = chart.ghost_of_lattice.get(&idx) {
                let st = &chart.ghosts[g as usize];
                for (s, cf) in st.sources.iter().zip(&st.coeffs) {
                    node_w[*s as usize] += share * cf;
                }
            }
        }
        }
        node_w
    }
}

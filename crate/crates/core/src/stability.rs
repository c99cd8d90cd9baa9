//! K-stability functionals on the polytope: the extremal affine function
//! θ, the linear functional `L(f) = 2∫_{∂P} f dσ − ∫_P f θ dμ`, the
//! relative Mabuchi energy, and exhaustive scans over simple
//! piecewise-linear test functions (creases).
//!
//! θ and every crease integral are computed in exact rational arithmetic,
//! so `L` vanishes identically on affine functions and the scan ratios
//! carry no quadrature error. Sampled (potential) inputs go through grid
//! quadrature after subtracting their affine support at the centroid,
//! which keeps the affine invariance of `L` exact in that path too.

use std::io::Write;
use std::path::Path;

use num::{One, Signed, Zero};

use crate::geometry;
use crate::polytope::chart::GridChart;
use crate::polytope::exact::{rat_from_f64, rat_int, rat_to_f64, Constraint, Poly, Rat};
use crate::polytope::DelzantPolytope;
use crate::potential::{AffineFunction, SymplecticPotential};
use crate::{Error, Result};

/// The extremal affine function, kept in both exact and floating form.
#[derive(Debug, Clone)]
pub struct Theta {
    pub affine: AffineFunction,
    pub exact_gradient: Vec<Rat>,
    pub exact_constant: Rat,
}

impl Theta {
    pub fn poly(&self) -> Poly {
        Poly::affine(&self.exact_gradient, self.exact_constant.clone())
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.affine.eval(x)
    }

    /// A constant θ (used for the unmodified flow with θ ≡ R̄).
    pub fn constant(n: usize, c: Rat) -> Theta {
        Theta {
            affine: AffineFunction::constant(n, rat_to_f64(&c)),
            exact_gradient: vec![Rat::zero(); n],
            exact_constant: c,
        }
    }
}

/// Solve `∫_P θ·a dμ = 2∫_{∂P} a dσ` for all affine `a`, exactly.
pub fn extremal_affine(p: &DelzantPolytope) -> Result<Theta> {
    let n = p.dim;
    // basis {1, x_1, ..., x_n}
    let basis: Vec<Poly> = std::iter::once(Poly::constant(n, Rat::one()))
        .chain((0..n).map(|k| {
            let mut e = vec![0u32; n];
            e[k] = 1;
            Poly::monomial(n, &e)
        }))
        .collect();
    let mut gram = vec![vec![Rat::zero(); n + 1]; n + 1];
    let mut rhs = vec![Rat::zero(); n + 1];
    for (r, br) in basis.iter().enumerate() {
        for (c, bc) in basis.iter().enumerate() {
            gram[r][c] = p.poly_moment(&br.mul(bc));
        }
        rhs[r] = rat_int(2) * p.boundary_sigma_moment(br);
    }
    let sol = crate::linalg::solve_rational(&gram, &rhs).ok_or(Error::SingularMomentMatrix)?;
    let exact_constant = sol[0].clone();
    let exact_gradient: Vec<Rat> = sol[1..].to_vec();
    Ok(Theta {
        affine: AffineFunction {
            gradient: exact_gradient.iter().map(rat_to_f64).collect(),
            constant: rat_to_f64(&exact_constant),
        },
        exact_gradient,
        exact_constant,
    })
}

/// Average scalar curvature `R̄ = 2|∂P|_σ / |P|` (exact); the unmodified
/// Calabi flow is the modified flow with θ replaced by this constant.
pub fn average_scalar_curvature(p: &DelzantPolytope) -> Rat {
    rat_int(2) * p.boundary_sigma_measure() / p.volume()
}

/// Simple crease `f(x) = max(0, ⟨a,x⟩ + b)` with rational data.
#[derive(Debug, Clone)]
pub struct CreaseFunction {
    pub a: Vec<Rat>,
    pub b: Rat,
}

impl CreaseFunction {
    pub fn constraint(&self) -> Constraint {
        Constraint {
            a: self.a.clone(),
            c: self.b.clone(),
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let mut acc = rat_to_f64(&self.b);
        for (ak, xk) in self.a.iter().zip(x) {
            acc += rat_to_f64(ak) * xk;
        }
        acc.max(0.0)
    }

    fn affine_poly(&self) -> Poly {
        Poly::affine(&self.a, self.b.clone())
    }
}

/// Inputs accepted by the `L` functional.
pub enum LInput<'a> {
    Affine(&'a AffineFunction),
    Crease(&'a CreaseFunction),
    Potential(&'a SymplecticPotential),
    /// node-sampled smooth function on a chart
    Sampled(&'a GridChart, &'a [f64]),
}

/// `L(f) = 2∫_{∂P} f dσ − ∫_P f θ dμ`. Exact for affine and crease
/// inputs; grid quadrature (after exact affine reduction) otherwise.
pub fn l_functional(p: &DelzantPolytope, theta: &Theta, input: LInput<'_>) -> Result<f64> {
    match input {
        LInput::Affine(a) => {
            let grad: Vec<Rat> = a.gradient.iter().map(|&g| rat_from_f64(g)).collect();
            Ok(rat_to_f64(&l_affine_exact(
                p,
                theta,
                &grad,
                &rat_from_f64(a.constant),
            )))
        }
        LInput::Crease(c) => Ok(rat_to_f64(&l_crease_exact(p, theta, c))),
        LInput::Potential(u) => {
            let x0 = p.centroid_f64();
            let value = u.evaluate(&x0)?;
            let grad = u.gradient_at(&x0)?;
            let chart = &u.chart;
            // reduce by the affine support at the centroid: L(affine) = 0
            // exactly, and the grid quadrature then never sees the affine
            // part it integrates worst
            let reduced = |x: &[f64]| -> f64 {
                let mut acc = value;
                for k in 0..x.len() {
                    acc += grad[k] * (x[k] - x0[k]);
                }
                acc
            };
            let mut boundary = 0.0;
            for (pt, w) in &chart.boundary_panels {
                boundary += w * (u.evaluate(pt)? - reduced(pt));
            }
            let mut interior = 0.0;
            for id in 0..chart.num_nodes() as u32 {
                let x = chart.point(id);
                let g = u.u_g(x) + u.f[id as usize] - reduced(x);
                interior += chart.node_weight[id as usize] * g * theta.eval(x);
            }
            Ok(2.0 * boundary - interior)
        }
        LInput::Sampled(chart, values) => {
            let x0 = p.centroid_f64();
            let ghosts = chart.extend(values);
            let value = chart.interpolate(values, &ghosts, &x0);
            let n = chart.n();
            // gradient of the sampled function at the centroid
            let mut grad = vec![0.0; n];
            {
                let inv2h = 0.5 / chart.h;
                let mut per_axis = vec![0.0; chart.num_nodes()];
                for (k, gk) in grad.iter_mut().enumerate() {
                    for id in 0..chart.num_nodes() as u32 {
                        let mut pp = chart.node_lattice(id).to_vec();
                        pp[k] += 1;
                        let mut pm = chart.node_lattice(id).to_vec();
                        pm[k] -= 1;
                        let vp = chart.lattice_value(&pp, values, &ghosts);
                        let vm = chart.lattice_value(&pm, values, &ghosts);
                        per_axis[id as usize] = match (vp, vm) {
                            (Some(a), Some(b)) => (a - b) * inv2h,
                            _ => 0.0,
                        };
                    }
                    let gh = chart.extend(&per_axis);
                    *gk = chart.interpolate(&per_axis, &gh, &x0);
                }
            }
            let reduced = |x: &[f64]| -> f64 {
                let mut acc = value;
                for k in 0..n {
                    acc += grad[k] * (x[k] - x0[k]);
                }
                acc
            };
            let mut boundary = 0.0;
            for (id, w) in chart.boundary_node_weight.iter().enumerate() {
                if *w != 0.0 {
                    boundary += w * values[id];
                }
            }
            // subtract the boundary integral of the affine reduction with
            // the same panel rule
            for (pt, w) in &chart.boundary_panels {
                boundary -= w * reduced(pt);
            }
            let mut interior = 0.0;
            for id in 0..chart.num_nodes() as u32 {
                let x = chart.point(id);
                interior += chart.node_weight[id as usize]
                    * (values[id as usize] - reduced(x))
                    * theta.eval(x);
            }
            Ok(2.0 * boundary - interior)
        }
    }
}

/// Exact `L` of an affine function; identically zero by the definition of
/// θ, so this doubles as the θ-residual.
pub fn l_affine_exact(p: &DelzantPolytope, theta: &Theta, grad: &[Rat], c: &Rat) -> Rat {
    let a = Poly::affine(grad, c.clone());
    let boundary = p.boundary_sigma_moment(&a);
    let interior = p.poly_moment(&a.mul(&theta.poly()));
    rat_int(2) * boundary - interior
}

/// Exact `L` of a crease: piecewise-polynomial quadrature over the split
/// polytope.
pub fn l_crease_exact(p: &DelzantPolytope, theta: &Theta, crease: &CreaseFunction) -> Rat {
    let cons = crease.constraint();
    let la = crease.affine_poly();
    let boundary = p.cut_boundary_sigma_moment(&cons, &la);
    let interior = p.cut_moment(&cons, &la.mul(&theta.poly()));
    rat_int(2) * boundary - interior
}

/// Residual of the defining equation of θ over the affine basis.
pub fn theta_residual(p: &DelzantPolytope, theta: &Theta) -> f64 {
    let n = p.dim;
    let mut worst =
        rat_to_f64(&l_affine_exact(p, theta, &vec![Rat::zero(); n], &Rat::one())).abs();
    for k in 0..n {
        let mut grad = vec![Rat::zero(); n];
        grad[k] = Rat::one();
        let r = rat_to_f64(&l_affine_exact(p, theta, &grad, &Rat::zero())).abs();
        worst = worst.max(r);
    }
    worst
}

/// Relative Mabuchi energy
/// `M(u) − M(u_ref) = −∫ log(det u_ij / det u_ref,ij) dμ + L(u − u_ref)`.
pub fn mabuchi_energy_rel(
    u: &SymplecticPotential,
    theta: &Theta,
    u_ref: &SymplecticPotential,
) -> Result<f64> {
    if !u.chart.same_chart(&u_ref.chart) {
        return Err(Error::ChartMismatch {
            left: u.chart.signature(),
            right: u_ref.chart.signature(),
        });
    }
    if u.log_part != u_ref.log_part {
        return Err(Error::InvalidInput(
            "relative energy needs matching potential types".into(),
        ));
    }
    let chart = &u.chart;
    let field_u = geometry::inverse_hessian_field(u)?;
    let field_r = geometry::inverse_hessian_field(u_ref)?;
    let n = chart.n();
    let n2 = n * n;
    let mut log_term = 0.0;
    for id in 0..chart.num_nodes() {
        let w = chart.interior_cell_weight[id];
        if w == 0.0 {
            continue;
        }
        let det_u = crate::linalg::det_sym(&field_u.hessians[id * n2..(id + 1) * n2], n);
        let det_r = crate::linalg::det_sym(&field_r.hessians[id * n2..(id + 1) * n2], n);
        log_term += w * (det_u / det_r).ln();
    }
    let diff: Vec<f64> = u.f.iter().zip(&u_ref.f).map(|(a, b)| a - b).collect();
    let l_term = l_functional(&chart.polytope, theta, LInput::Sampled(chart, &diff))?;
    Ok(-log_term + l_term)
}

/// One row of the stability scan.
#[derive(Debug, Clone)]
pub struct ScanRow {
    pub crease: CreaseFunction,
    pub l_value: f64,
    pub boundary_norm: f64,
    pub ratio: f64,
    pub denom: i64,
}

/// `λ_estimate = min L(f)/∫_{∂P} f̃ dσ` over the scanned crease family.
#[derive(Debug, Clone)]
pub struct StabilityReport {
    pub lambda_estimate: f64,
    pub worst: CreaseFunction,
    pub rows: Vec<ScanRow>,
    pub x0: Vec<Rat>,
}

/// Enumerate primitive integer directions with entries in `[-d, d]` and a
/// canonical sign (the opposite crease normalizes to the same f̃).
fn primitive_directions(n: usize, d: i64) -> Vec<Vec<i64>> {
    let mut out = Vec::new();
    let mut q = vec![-d; n];
    loop {
        let g = q.iter().fold(0i64, |acc, &v| {
            let (mut a, mut b) = (acc.abs(), v.abs());
            while b != 0 {
                let t = a % b;
                a = b;
                b = t;
            }
            a
        });
        if g == 1 {
            if let Some(first) = q.iter().find(|&&v| v != 0) {
                if *first > 0 {
                    out.push(q.clone());
                }
            }
        }
        // odometer
        let mut k = 0;
        loop {
            if k == n {
                return out;
            }
            q[k] += 1;
            if q[k] <= d {
                break;
            }
            q[k] = -d;
            k += 1;
        }
    }
}

/// Scan creases `max(0, ⟨a,x⟩+b)` with primitive integer `a`,
/// `‖a‖_∞ ≤ max_denominator`, and `b` sampled so the crease hyperplane
/// cuts `{x : l_i(x) ≥ depth_margin}`.
pub fn pl_stability_scan(
    p: &DelzantPolytope,
    theta: &Theta,
    max_denominator: i64,
    depth_margin: f64,
    x0: Option<Vec<Rat>>,
) -> Result<StabilityReport> {
    let n = p.dim;
    let x0 = x0.unwrap_or_else(|| p.centroid());
    let margin = rat_from_f64(depth_margin);

    // vertices of the margin-shrunk polytope bound the admissible b range
    let shrunk: Vec<Constraint> = p
        .constraints()
        .iter()
        .map(|c| Constraint {
            a: c.a.clone(),
            c: &c.c - &margin,
        })
        .collect();
    let inner = crate::polytope::exact::enumerate_vertices(&shrunk, n);
    if inner.is_empty() {
        return Err(Error::EmptyFamily {
            margin: depth_margin,
        });
    }

    const B_SAMPLES: i64 = 9;
    let mut rows: Vec<ScanRow> = Vec::new();
    for q in primitive_directions(n, max_denominator) {
        let qr: Vec<Rat> = q.iter().map(|&v| rat_int(v)).collect();
        let dot = |v: &Vec<Rat>| -> Rat { qr.iter().zip(v).map(|(a, b)| a * b).sum() };
        let lo = inner.iter().map(&dot).min().expect("nonempty");
        let hi = inner.iter().map(&dot).max().expect("nonempty");
        for j in 0..B_SAMPLES {
            // b so that ⟨q,x⟩ + b = 0 somewhere in the shrunk polytope
            let t = Rat::new(j.into(), (B_SAMPLES - 1).into());
            let cut_level = &lo + (&hi - &lo) * t;
            let b = -cut_level;
            let crease = CreaseFunction { a: qr.clone(), b };
            if let Some(row) = scan_row(p, theta, &crease, &x0, max_denominator) {
                rows.push(row);
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::EmptyFamily {
            margin: depth_margin,
        });
    }
    let mut best = 0usize;
    for (i, row) in rows.iter().enumerate() {
        if row.ratio < rows[best].ratio {
            best = i;
        }
    }
    Ok(StabilityReport {
        lambda_estimate: rows[best].ratio,
        worst: rows[best].crease.clone(),
        rows,
        x0,
    })
}

fn scan_row(
    p: &DelzantPolytope,
    theta: &Theta,
    crease: &CreaseFunction,
    x0: &[Rat],
    denom: i64,
) -> Option<ScanRow> {
    let l_exact = l_crease_exact(p, theta, crease);
    // normalization: subtract the supporting affine function at x0 (the
    // active side's gradient, zero side on the kink); only the boundary
    // norm changes, L is affine-invariant
    let at_x0 = crease.constraint().eval(x0);
    let la = crease.affine_poly();
    let cut_b = p.cut_boundary_sigma_moment(&crease.constraint(), &la);
    let boundary_norm = if at_x0.is_positive() {
        // f̃ = f − l_a = max(0, −l_a)
        &cut_b - p.boundary_sigma_moment(&la)
    } else {
        cut_b
    };
    if boundary_norm <= rat_from_f64(1e-12) {
        // crease affine or vanishing on P: excluded from the family
        return None;
    }
    let ratio = rat_to_f64(&(&l_exact / &boundary_norm));
    Some(ScanRow {
        crease: crease.clone(),
        l_value: rat_to_f64(&l_exact),
        boundary_norm: rat_to_f64(&boundary_norm),
        ratio,
        denom,
    })
}

impl StabilityReport {
    /// CSV rows `a..., b, L, denom, ratio` with a λ footer.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        let n = self.rows.first().map_or(0, |r| r.crease.a.len());
        for k in 0..n {
            write!(w, "a{},", k + 1)?;
        }
        writeln!(w, "b,L,denom,ratio")?;
        for row in &self.rows {
            for ak in &row.crease.a {
                write!(w, "{:.16e},", rat_to_f64(ak))?;
            }
            writeln!(
                w,
                "{:.16e},{:.16e},{},{:.16e}",
                rat_to_f64(&row.crease.b),
                row.l_value,
                row.denom,
                row.ratio
            )?;
        }
        write!(
            w,
            "# lambda_estimate={:.16e} minimizer=",
            self.lambda_estimate
        )?;
        for ak in &self.worst.a {
            write!(w, "{:.6},", rat_to_f64(ak))?;
        }
        writeln!(w, "b={:.6}", rat_to_f64(&self.worst.b))?;
        Ok(())
    }
}

//! Symplectic potentials under Guillemin boundary conditions.
//!
//! A potential is stored as `u = u_G + f`: the analytic part
//! `u_G = ½ Σ_i l_i ln l_i` is never sampled — its derivatives are taken in
//! closed form — while the smooth correction `f` lives on the chart nodes.
//! All log singularities therefore stay out of the finite differences.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use crate::polytope::chart::GridChart;
use crate::polytope::DelzantPolytope;
use crate::{Error, Result};

/// `a(x) = ⟨gradient, x⟩ + constant`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineFunction {
    pub gradient: Vec<f64>,
    pub constant: f64,
}

impl AffineFunction {
    pub fn zero(n: usize) -> Self {
        AffineFunction {
            gradient: vec![0.0; n],
            constant: 0.0,
        }
    }

    pub fn constant(n: usize, c: f64) -> Self {
        AffineFunction {
            gradient: vec![0.0; n],
            constant: c,
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let mut acc = self.constant;
        for (g, xi) in self.gradient.iter().zip(x) {
            acc += g * xi;
        }
        acc
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PotentialTag {
    Guillemin,
    Perturbed,
    Flowed,
}

impl PotentialTag {
    pub fn label(self) -> &'static str {
        match self {
            PotentialTag::Guillemin => "guillemin",
            PotentialTag::Perturbed => "perturbed",
            PotentialTag::Flowed => "flowed",
        }
    }
}

/// A symplectic potential on a chart. Immutable; operations return new
/// values. `log_part = false` drops `u_G` entirely (synthetic potentials
/// used by tests and probes).
#[derive(Debug, Clone)]
pub struct SymplecticPotential {
    pub chart: Arc<GridChart>,
    pub f: Vec<f64>,
    pub ghosts: Vec<f64>,
    pub tag: PotentialTag,
    pub log_part: bool,
}

/// The canonical potential: `f ≡ 0`.
pub fn guillemin(chart: Arc<GridChart>) -> SymplecticPotential {
    let f = vec![0.0; chart.num_nodes()];
    SymplecticPotential::from_values(chart, f, PotentialTag::Guillemin)
}

impl SymplecticPotential {
    pub fn from_values(chart: Arc<GridChart>, f: Vec<f64>, tag: PotentialTag) -> Self {
        assert_eq!(f.len(), chart.num_nodes());
        let ghosts = chart.extend(&f);
        SymplecticPotential {
            chart,
            f,
            ghosts,
            tag,
            log_part: true,
        }
    }

    /// Potential with `f` given pointwise by a closure.
    pub fn from_fn(chart: Arc<GridChart>, tag: PotentialTag, g: impl Fn(&[f64]) -> f64) -> Self {
        let f: Vec<f64> = (0..chart.num_nodes() as u32)
            .map(|i| g(chart.point(i)))
            .collect();
        SymplecticPotential::from_values(chart, f, tag)
    }

    /// Synthetic potential without the Guillemin part, `u = f`.
    pub fn pure_f(chart: Arc<GridChart>, g: impl Fn(&[f64]) -> f64) -> Self {
        let mut p = SymplecticPotential::from_fn(chart, PotentialTag::Perturbed, g);
        p.log_part = false;
        p
    }

    /// Guillemin plus the product bump `amp · Π_i l_i(x)²` (the canonical
    /// smooth perturbation; equals `amp·x²(1−x)²` on `[0,1]`).
    pub fn guillemin_with_bump(chart: Arc<GridChart>, amp: f64) -> Self {
        let p = chart.polytope.clone();
        SymplecticPotential::from_fn(chart, PotentialTag::Perturbed, |x| {
            let mut prod = 1.0;
            for i in 0..p.num_facets() {
                let l = p.l(i, x);
                prod *= l * l;
            }
            amp * prod
        })
    }

    pub fn polytope(&self) -> &Arc<DelzantPolytope> {
        &self.chart.polytope
    }

    fn require_same_chart(&self, other: &SymplecticPotential) -> Result<()> {
        if !self.chart.same_chart(&other.chart) {
            return Err(Error::ChartMismatch {
                left: self.chart.signature(),
                right: other.chart.signature(),
            });
        }
        Ok(())
    }

    /// `u_G(x) = ½ Σ l_i ln l_i`, with `0·ln 0 := 0` on facets.
    pub fn u_g(&self, x: &[f64]) -> f64 {
        if !self.log_part {
            return 0.0;
        }
        let p = &self.chart.polytope;
        let mut acc = 0.0;
        for i in 0..p.num_facets() {
            let l = p.l(i, x);
            if l > 0.0 {
                acc += 0.5 * l * l.ln();
            }
        }
        acc
    }

    /// `∇u_G(x) = ½ Σ n_i (ln l_i + 1)`; defined for interior points.
    pub fn grad_u_g(&self, x: &[f64]) -> Vec<f64> {
        let p = &self.chart.polytope;
        let n = p.dim;
        let mut g = vec![0.0; n];
        if !self.log_part {
            return g;
        }
        for i in 0..p.num_facets() {
            let l = p.l(i, x);
            let w = 0.5 * (l.ln() + 1.0);
            for (gk, nk) in g.iter_mut().zip(p.normal_f64(i)) {
                *gk += w * nk;
            }
        }
        g
    }

    /// `u(x)` anywhere on the closure.
    pub fn evaluate(&self, x: &[f64]) -> Result<f64> {
        let depth = self.chart.polytope.depth(x);
        if depth < -1e-9 * (1.0 + self.chart.h) {
            return Err(Error::OutOfDomain {
                point: x.to_vec(),
                need_depth: 0.0,
            });
        }
        Ok(self.u_g(x) + self.chart.interpolate(&self.f, &self.ghosts, x))
    }

    /// Value of the correction `f` at an arbitrary point.
    pub fn f_at(&self, x: &[f64]) -> f64 {
        self.chart.interpolate(&self.f, &self.ghosts, x)
    }

    /// Per-node centered gradient of `f` (ghost-extended at the rim).
    pub fn grad_f_field(&self) -> Vec<f64> {
        let chart = &self.chart;
        let n = chart.n();
        let inv2h = 0.5 / chart.h;
        let mut out = vec![0.0; chart.num_nodes() * n];
        for id in 0..chart.num_nodes() as u32 {
            let pos = chart.node_lattice(id).to_vec();
            for k in 0..n {
                let mut pp = pos.clone();
                pp[k] += 1;
                let mut pm = pos.clone();
                pm[k] -= 1;
                let vp = chart.lattice_value(&pp, &self.f, &self.ghosts);
                let vm = chart.lattice_value(&pm, &self.f, &self.ghosts);
                out[id as usize * n + k] = match (vp, vm) {
                    (Some(a), Some(b)) => (a - b) * inv2h,
                    (Some(a), None) => (a - self.f[id as usize]) / chart.h,
                    (None, Some(b)) => (self.f[id as usize] - b) / chart.h,
                    (None, None) => 0.0,
                };
            }
        }
        out
    }

    /// `∇u(x)` for interior points of depth ≥ 2h.
    pub fn gradient_at(&self, x: &[f64]) -> Result<Vec<f64>> {
        let need = 2.0 * self.chart.h;
        if self.chart.polytope.depth(x) < need * (1.0 - 1e-9) {
            return Err(Error::OutOfDomain {
                point: x.to_vec(),
                need_depth: need,
            });
        }
        let n = self.chart.n();
        let gf = self.grad_f_field();
        let mut g = self.grad_u_g(x);
        for (k, gk) in g.iter_mut().enumerate() {
            let comp: Vec<f64> = (0..self.chart.num_nodes()).map(|i| gf[i * n + k]).collect();
            let gh = self.chart.extend(&comp);
            *gk += self.chart.interpolate(&comp, &gh, x);
        }
        Ok(g)
    }

    /// `u` minus its affine support at `x0`: the result vanishes to first
    /// order there. Only `f` changes; idempotent up to round-off.
    pub fn normalize(&self, x0: &[f64]) -> Result<SymplecticPotential> {
        let value = self.evaluate(x0)?;
        let grad = self.gradient_at(x0)?;
        let affine = AffineFunction {
            constant: value - grad.iter().zip(x0).map(|(g, x)| g * x).sum::<f64>(),
            gradient: grad,
        };
        Ok(self.add_affine_scaled(&affine, -1.0))
    }

    /// `u + s·a` as a new potential (affine functions land in `f`).
    pub fn add_affine_scaled(&self, a: &AffineFunction, s: f64) -> SymplecticPotential {
        let chart = &self.chart;
        let f: Vec<f64> = (0..chart.num_nodes() as u32)
            .map(|i| self.f[i as usize] + s * a.eval(chart.point(i)))
            .collect();
        let mut out = SymplecticPotential::from_values(self.chart.clone(), f, self.tag);
        out.log_part = self.log_part;
        out
    }

    /// Max-norm gap over chart nodes; by the Legendre-transform identity
    /// this equals the sup-norm of the Kähler-potential difference.
    pub fn legendre_gap(&self, reference: &SymplecticPotential) -> Result<f64> {
        self.require_same_chart(reference)?;
        Ok(self
            .f
            .iter()
            .zip(&reference.f)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    // ---------------------------------------------------------------
    // checkpoint format
    // ---------------------------------------------------------------

    /// Write `# polytope=<name> h=<spacing> t=<time>` then one line per
    /// node: `index..., x..., f` with f at 17 significant digits.
    pub fn write_checkpoint(&self, path: &Path, t: f64) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        writeln!(
            w,
            "# polytope={} h={:.16e} t={:.16e}",
            self.chart.polytope.name, self.chart.h, t
        )?;
        let n = self.chart.n();
        for id in 0..self.chart.num_nodes() as u32 {
            let pos = self.chart.node_lattice(id);
            let x = self.chart.point(id);
            for k in 0..n {
                write!(w, "{},", pos[k])?;
            }
            for k in 0..n {
                write!(w, "{:.16e},", x[k])?;
            }
            writeln!(w, "{:.16e}", self.f[id as usize])?;
        }
        Ok(())
    }

    /// Read a checkpoint back against its polytope; rebuilds the chart
    /// from the header spacing. Returns the potential and its time stamp.
    pub fn read_checkpoint(
        path: &Path,
        polytope: Arc<DelzantPolytope>,
    ) -> Result<(SymplecticPotential, f64)> {
        let file = std::fs::File::open(path)?;
        let mut lines = std::io::BufReader::new(file).lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty checkpoint".into()))??;
        let mut h = None;
        let mut t = None;
        let mut name = None;
        for tok in header.trim_start_matches('#').split_whitespace() {
            if let Some(v) = tok.strip_prefix("polytope=") {
                name = Some(v.to_string());
            } else if let Some(v) = tok.strip_prefix("h=") {
                h = Some(v.parse::<f64>().map_err(|e| Error::Parse(e.to_string()))?);
            } else if let Some(v) = tok.strip_prefix("t=") {
                t = Some(v.parse::<f64>().map_err(|e| Error::Parse(e.to_string()))?);
            }
        }
        let h = h.ok_or_else(|| Error::Parse("checkpoint header missing h".into()))?;
        let t = t.ok_or_else(|| Error::Parse("checkpoint header missing t".into()))?;
        if let Some(name) = name {
            if name != polytope.name {
                return Err(Error::Parse(format!(
                    "checkpoint polytope '{name}' does not match '{}'",
                    polytope.name
                )));
            }
        }
        let chart = Arc::new(crate::polytope::chart::make_grid(polytope, h)?);
        let n = chart.n();
        let mut f = vec![f64::NAN; chart.num_nodes()];
        for line in lines {
            let line = line?;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 2 * n + 1 {
                return Err(Error::Parse(format!("bad checkpoint row: {line}")));
            }
            let pos: Vec<i64> = parts[..n]
                .iter()
                .map(|s| s.trim().parse::<i64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse(e.to_string()))?;
            let val = parts[2 * n]
                .trim()
                .parse::<f64>()
                .map_err(|e| Error::Parse(e.to_string()))?;
            let id = chart
                .node_at(&pos)
                .ok_or_else(|| Error::Parse(format!("row at {pos:?} is outside the chart")))?;
            f[id as usize] = val;
        }
        if f.iter().any(|v| v.is_nan()) {
            return Err(Error::Parse("checkpoint does not cover all nodes".into()));
        }
        Ok((
            SymplecticPotential::from_values(chart, f, PotentialTag::Flowed),
            t,
        ))
    }
}

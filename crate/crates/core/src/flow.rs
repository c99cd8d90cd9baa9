//! Time integration of the modified Calabi flow `∂u/∂t = θ − R_u`.
//!
//! The integrator advances the smooth correction `f`, and only its
//! deep-node values (depth ≥ 2h); shallower values are rebuilt each stage
//! by the chart's closure stencils. Steps are classical four-stage
//! explicit (RK4) with an energy-decrease acceptance rule: a step whose
//! Calabi energy `∫(R_u − θ)² dμ` rises, or which destroys convexity, is
//! retried at half the step size. The accepted-step energy sequence is
//! therefore monotone by construction, which doubles as the gradient-flow
//! regression test.
//!
//! The Mabuchi energy is tracked incrementally (log-det ratios expand in
//! series, no `ln` in the hot loop) and the per-step gradient identity
//! `ΔM/Δt ≈ −energy` is tallied online, so long runs keep exact statistics
//! while the stored trace is decimated.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use crate::geometry::{self, FieldOnChart};
use crate::polytope::chart::GridChart;
use crate::potential::{AffineFunction, PotentialTag, SymplecticPotential};
use crate::stability::Theta;
use crate::{Error, Result};

/// RK4 real-axis stability length, over the symbol bound
/// `16 n² λ_max(u^{ij})² / h⁴` of the linearized operator.
const RK4_REAL_AXIS: f64 = 2.78;
const MAX_HALVINGS: u32 = 30;
const DT_MIN: f64 = 1e-15;
/// Steps this close to stationarity are accepted regardless of the sign
/// of the round-off sized energy change.
const ENERGY_FLOOR: f64 = 1e-18;

#[derive(Debug, Clone)]
pub struct FlowControls {
    /// initial step; default half the stability cap
    pub dt0: Option<f64>,
    pub t_max: f64,
    /// terminate when sup|R_u − θ| drops below this (0 disables)
    pub tol: f64,
    /// fraction of the stability cap the adaptive step may reach
    pub safety: f64,
    pub max_steps: u64,
    /// stored trace rows are decimated to roughly this many
    pub max_trace_rows: usize,
}

impl Default for FlowControls {
    fn default() -> Self {
        FlowControls {
            dt0: None,
            t_max: 1.0,
            tol: 1e-3,
            safety: 0.85,
            max_steps: u64::MAX / 2,
            max_trace_rows: 4096,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Tolerance,
    TMax,
    MaxSteps,
}

#[derive(Debug, Clone)]
pub struct TraceRow {
    pub t: f64,
    pub dt: f64,
    pub calabi_energy: f64,
    pub mabuchi_rel: f64,
    pub sup_r_minus_theta: f64,
    pub max_rm: f64,
    pub dist_to_start: f64,
    pub dist_to_target: f64,
    pub min_hessian_eig: f64,
    pub max_f: f64,
    pub extra: Vec<f64>,
    pub(crate) snapshot: Vec<f64>,
}

impl TraceRow {
    /// The stored f values of this row (decimation keeps one snapshot per
    /// retained row).
    pub fn snapshot_values(&self) -> &[f64] {
        &self.snapshot
    }
}

#[derive(Debug, Clone)]
pub struct FlowTrace {
    pub rows: Vec<TraceRow>,
    pub extra_names: Vec<String>,
    pub accepted_steps: u64,
    pub rejected_steps: u64,
    /// accepted steps whose gradient identity |(ΔM/Δt + Ē)/Ē| < 0.05 held
    pub identity_ok_steps: u64,
    /// accepted steps where the identity was meaningful (energy above floor)
    pub identity_checked_steps: u64,
    pub termination: Termination,
}

impl FlowTrace {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(
            w,
            "t,dt,calabi_energy,mabuchi_rel,sup_r_minus_theta,max_rm,dist_to_start,dist_to_target,min_hessian_eig,max_f"
        )?;
        for name in &self.extra_names {
            write!(w, ",{name}")?;
        }
        writeln!(w)?;
        for r in &self.rows {
            write!(
                w,
                "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
                r.t,
                r.dt,
                r.calabi_energy,
                r.mabuchi_rel,
                r.sup_r_minus_theta,
                r.max_rm,
                r.dist_to_start,
                r.dist_to_target,
                r.min_hessian_eig,
                r.max_f
            )?;
            for v in &r.extra {
                write!(w, ",{:.16e}", v)?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn last(&self) -> Option<&TraceRow> {
        self.rows.last()
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct DriftDiag {
    pub min_hess_eig: f64,
    pub max_g_norm: f64,
}

/// The right-hand side a flow integrates, plus its quadrature weights.
pub(crate) trait DriftModel {
    /// Fill the drift over the deep nodes and the per-node Hessian
    /// determinants (where the log-det weight is nonzero).
    fn drift(
        &mut self,
        chart: &GridChart,
        f: &[f64],
        log_part: bool,
        drift: &mut [f64],
        dets: &mut [f64],
    ) -> Result<DriftDiag>;
    /// weights of the energy/distance quadrature (dμ, or p dμ when weighted)
    fn quad_weight(&self) -> &[f64];
    /// node weights of the linear Mabuchi part
    fn lin_weight(&self) -> &[f64];
    /// node weights of the −log det term
    fn logdet_weight(&self) -> &[f64];
    fn max_rm(&mut self, chart: &Arc<GridChart>, f: &[f64], log_part: bool) -> f64;
    fn extra_names(&self) -> Vec<String>;
    fn extra_values(&self, energy: f64) -> Vec<f64>;
}

/// Plain modified Calabi flow drift θ − R_u.
pub(crate) struct PlainDrift {
    theta_deep: Vec<f64>,
    quad_w: Vec<f64>,
    lin_w: Vec<f64>,
    logdet_w: Vec<f64>,
    hg_flat: Vec<f64>,
    g: Vec<f64>,
    g_field: Vec<f64>,
    hess: Vec<f64>,
    f_ghosts: Vec<f64>,
    one_d: bool,
}

impl PlainDrift {
    pub fn new(chart: &GridChart, theta: &Theta) -> Self {
        let theta_deep: Vec<f64> = chart
            .deep_nodes
            .iter()
            .map(|&id| theta.eval(chart.point(id)))
            .collect();
        let lin_w: Vec<f64> = (0..chart.num_nodes())
            .map(|k| {
                2.0 * chart.boundary_node_weight[k]
                    - chart.node_weight[k] * theta.eval(chart.point(k as u32))
            })
            .collect();
        let n = chart.n();
        PlainDrift {
            theta_deep,
            quad_w: chart.node_weight.clone(),
            lin_w,
            logdet_w: chart.interior_cell_weight.clone(),
            hg_flat: (0..chart.num_nodes())
                .map(|i| chart.node_geom[i].hess_g_fin[0.min(n * n - 1)])
                .collect(),
            g: vec![0.0; chart.num_nodes()],
            g_field: vec![0.0; chart.num_nodes() * n * n],
            hess: vec![0.0; chart.num_nodes() * n * n],
            f_ghosts: vec![0.0; chart.ghosts.len()],
            one_d: n == 1 && one_d_contiguous(chart),
        }
    }
}

/// The 1-D fast path relies on node ids following the lattice order
/// (true by construction; checked once).
pub(crate) fn one_d_contiguous(chart: &GridChart) -> bool {
    chart.n() == 1
        && (0..chart.num_nodes())
            .all(|id| chart.node_lattice(id as u32)[0] == chart.node_lattice(0)[0] + id as i64)
}

/// Shared 1-D kernel: G = 1/(u_G″ + D²f), drift = combine(coeff, D²G).
/// Written as flat passes so the compiler vectorizes the Hessian build,
/// the reciprocal, and the drift contraction.
pub(crate) fn drift_one_d(
    chart: &GridChart,
    hg_flat: &[f64],
    f: &[f64],
    coeff_deep: &[f64],
    g: &mut [f64],
    drift: &mut [f64],
    dets: &mut [f64],
    combine: impl Fn(f64, f64) -> f64,
) -> Result<DriftDiag> {
    let num = chart.num_nodes();
    let inv_h2 = 1.0 / (chart.h * chart.h);
    g[0] = 0.0;
    g[num - 1] = 0.0;
    dets[0] = 1.0;
    dets[num - 1] = 1.0;
    // H into dets
    {
        let (hgs, fs, out) = (&hg_flat[1..num - 1], &f[..num], &mut dets[1..num - 1]);
        for i in 0..num - 2 {
            out[i] = hgs[i] + (fs[i] - 2.0 * fs[i + 1] + fs[i + 2]) * inv_h2;
        }
    }
    let mut min_hess = f64::INFINITY;
    for &h in &dets[1..num - 1] {
        if h < min_hess {
            min_hess = h;
        }
    }
    if min_hess <= 0.0 {
        let i = (1..num - 1).find(|&i| dets[i] <= 0.0).unwrap_or(1);
        return Err(Error::SingularHessian {
            node: chart.point(i as u32).to_vec(),
            min_eig: dets[i],
        });
    }
    for i in 1..num - 1 {
        g[i] = 1.0 / dets[i];
    }
    let mut max_g = 0.0f64;
    for &gi in &g[1..num - 1] {
        if gi > max_g {
            max_g = gi;
        }
    }
    let first_deep = chart.deep_nodes[0] as usize;
    {
        let gs = &g[first_deep - 1..];
        for (j, (c, d)) in coeff_deep.iter().zip(drift.iter_mut()).enumerate() {
            let d2g = (gs[j] - 2.0 * gs[j + 1] + gs[j + 2]) * inv_h2;
            *d = combine(*c, d2g);
        }
    }
    Ok(DriftDiag {
        min_hess_eig: min_hess,
        max_g_norm: max_g,
    })
}

impl DriftModel for PlainDrift {
    fn drift(
        &mut self,
        chart: &GridChart,
        f: &[f64],
        log_part: bool,
        drift: &mut [f64],
        dets: &mut [f64],
    ) -> Result<DriftDiag> {
        if self.one_d && log_part {
            // drift = θ + D²G (R = −D²G)
            return drift_one_d(
                chart,
                &self.hg_flat,
                f,
                &self.theta_deep,
                &mut self.g,
                drift,
                dets,
                |t, d2g| t + d2g,
            );
        }
        chart_extend_into(chart, f, &mut self.f_ghosts);
        let diag = geometry::inverse_hessian_into(
            chart,
            f,
            &self.f_ghosts,
            log_part,
            &mut self.hess,
            &mut self.g_field,
            dets,
        )?;
        let n = chart.n();
        let n2 = n * n;
        let ghosts = geometry::extend_matrix_field(chart, &self.g_field, n2);
        for (j, &id) in chart.deep_nodes.iter().enumerate() {
            let mut r = 0.0;
            for i in 0..n {
                for jj in 0..n {
                    r -= geometry::second_diff_component(
                        chart,
                        id as usize,
                        i * n + jj,
                        n2,
                        &self.g_field,
                        &ghosts,
                        i,
                        jj,
                    );
                }
            }
            drift[j] = self.theta_deep[j] - r;
        }
        Ok(DriftDiag {
            min_hess_eig: diag.min_hess_eig,
            max_g_norm: diag.max_g_norm,
        })
    }

    fn quad_weight(&self) -> &[f64] {
        &self.quad_w
    }

    fn lin_weight(&self) -> &[f64] {
        &self.lin_w
    }

    fn logdet_weight(&self) -> &[f64] {
        &self.logdet_w
    }

    fn max_rm(&mut self, chart: &Arc<GridChart>, f: &[f64], log_part: bool) -> f64 {
        max_rm_of(chart, f, log_part)
    }

    fn extra_names(&self) -> Vec<String> {
        Vec::new()
    }

    fn extra_values(&self, _energy: f64) -> Vec<f64> {
        Vec::new()
    }
}

pub(crate) fn chart_extend_into(chart: &GridChart, field: &[f64], out: &mut [f64]) {
    for (o, g) in out.iter_mut().zip(&chart.ghosts) {
        *o = g
            .sources
            .iter()
            .zip(&g.coeffs)
            .map(|(&s, &c)| c * field[s as usize])
            .sum();
    }
}

pub(crate) fn max_rm_of(chart: &Arc<GridChart>, f: &[f64], log_part: bool) -> f64 {
    let mut u = SymplecticPotential::from_values(chart.clone(), f.to_vec(), PotentialTag::Flowed);
    u.log_part = log_part;
    match geometry::riemannian_norm(&u) {
        Ok(field) => field.max(),
        Err(_) => f64::NAN,
    }
}

/// `ln(new/old)` with a series branch so stationary flows never lose the
/// increment to cancellation (and the hot loop never calls `ln`).
fn ln_ratio(new: f64, old: f64) -> f64 {
    let r = (new - old) / old;
    if r.abs() < 1e-4 {
        r * (1.0 - r * (0.5 - r / 3.0))
    } else {
        (new / old).ln()
    }
}

// ---------------------------------------------------------------------------
// public flow state and single-step operation
// ---------------------------------------------------------------------------

/// A potential with its time stamp and cached curvature fields.
#[derive(Debug, Clone)]
pub struct FlowState {
    pub t: f64,
    pub potential: SymplecticPotential,
    pub theta: AffineFunction,
    pub r_field: FieldOnChart,
    pub rm_field: FieldOnChart,
}

impl FlowState {
    pub fn new(potential: SymplecticPotential, theta: &Theta, t: f64) -> Result<FlowState> {
        let (field, tensor) = geometry::second_derivative_tensor(&potential)?;
        let _ = field;
        let r_field = geometry::abreu_from_tensor(&potential.chart, &tensor);
        let rm_field = geometry::riemannian_from_tensor(&potential.chart, &tensor);
        Ok(FlowState {
            t,
            potential,
            theta: theta.affine.clone(),
            r_field,
            rm_field,
        })
    }

    pub fn sup_r_minus_theta(&self) -> f64 {
        self.r_field
            .values
            .iter()
            .zip(&self.r_field.chart.deep_nodes)
            .map(|(r, &id)| (r - self.theta.eval(self.r_field.chart.point(id))).abs())
            .fold(0.0, f64::max)
    }
}

/// One classical 4-stage explicit step of `∂f/∂t = θ − R_{u_G+f}`.
pub fn step(state: &FlowState, theta: &Theta, dt: f64) -> Result<FlowState> {
    if !(dt > 0.0) {
        return Err(Error::InvalidInput(format!("dt must be positive, got {dt}")));
    }
    let chart = state.potential.chart.clone();
    let mut model = PlainDrift::new(&chart, theta);
    let mut f = state.potential.f.clone();
    chart.close_shallow(&mut f);
    let log_part = state.potential.log_part;
    let f_new = rk4_step(&chart, &mut model, &f, log_part, dt)?;
    let mut u = SymplecticPotential::from_values(chart, f_new, PotentialTag::Flowed);
    u.log_part = log_part;
    FlowState::new(u, theta, state.t + dt)
}

fn rk4_step<D: DriftModel>(
    chart: &GridChart,
    model: &mut D,
    f: &[f64],
    log_part: bool,
    dt: f64,
) -> Result<Vec<f64>> {
    let deep = &chart.deep_nodes;
    let nd = deep.len();
    let mut dets = vec![0.0; chart.num_nodes()];
    let mut k1 = vec![0.0; nd];
    let mut k2 = vec![0.0; nd];
    let mut k3 = vec![0.0; nd];
    let mut k4 = vec![0.0; nd];
    let mut y = f.to_vec();
    model.drift(chart, f, log_part, &mut k1, &mut dets)?;
    stage(chart, f, &k1, 0.5 * dt, &mut y);
    model.drift(chart, &y, log_part, &mut k2, &mut dets)?;
    stage(chart, f, &k2, 0.5 * dt, &mut y);
    model.drift(chart, &y, log_part, &mut k3, &mut dets)?;
    stage(chart, f, &k3, dt, &mut y);
    model.drift(chart, &y, log_part, &mut k4, &mut dets)?;
    let mut out = f.to_vec();
    for (j, &id) in deep.iter().enumerate() {
        out[id as usize] =
            f[id as usize] + dt / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
    }
    chart.close_shallow(&mut out);
    Ok(out)
}

#[inline]
fn stage(chart: &GridChart, f: &[f64], k: &[f64], c: f64, y: &mut [f64]) {
    y.copy_from_slice(f);
    for (j, &id) in chart.deep_nodes.iter().enumerate() {
        y[id as usize] = f[id as usize] + c * k[j];
    }
    chart.close_shallow(y);
}

// ---------------------------------------------------------------------------
// adaptive run
// ---------------------------------------------------------------------------

pub(crate) type StepObserver<'a> = &'a mut dyn FnMut(u64, f64, &[f64]);

pub(crate) fn run_engine_observed<D: DriftModel>(
    chart: &Arc<GridChart>,
    model: &mut D,
    f0: Vec<f64>,
    log_part: bool,
    controls: &FlowControls,
    mut observer: Option<StepObserver<'_>>,
) -> Result<(FlowTrace, SymplecticPotential, f64)> {
    let deep = chart.deep_nodes.clone();
    let nd = deep.len();
    let num = chart.num_nodes();
    let mut f = f0;
    chart.close_shallow(&mut f);
    let f_start = f.clone();

    let mut k1 = vec![0.0; nd];
    let mut k2 = vec![0.0; nd];
    let mut k3 = vec![0.0; nd];
    let mut k4 = vec![0.0; nd];
    let mut know = vec![0.0; nd];
    let mut y = vec![0.0; num];
    let mut f_new = vec![0.0; num];
    let mut dets = vec![0.0; num];
    let mut dets_new = vec![0.0; num];
    let mut dets_scratch = vec![0.0; num];
    let mut drift_full = vec![0.0; num];

    let diag0 = model
        .drift(chart, &f, log_part, &mut know, &mut dets)
        .map_err(|e| match e {
            Error::SingularHessian { node, .. } => Error::NonConvexStart { node },
            other => other,
        })?;
    let mut energy = closed_drift_energy(chart, model.quad_weight(), &know, &mut drift_full);
    let mut sup = know.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let mut diag = diag0;

    let n = chart.n() as f64;
    let cap = |d: &DriftDiag| -> f64 {
        controls.safety * RK4_REAL_AXIS * chart.h.powi(4)
            / (16.0 * n * n * d.max_g_norm * d.max_g_norm)
    };
    let mut dt = controls.dt0.unwrap_or(0.5 * cap(&diag0)).min(cap(&diag0));

    let vol: f64 = chart.node_weight.iter().sum();
    let theta_scale: f64 = 1.0 + know.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let floor = ENERGY_FLOOR * (1.0 + theta_scale * theta_scale * vol);

    let mut trace = FlowTrace {
        rows: Vec::new(),
        extra_names: model.extra_names(),
        accepted_steps: 0,
        rejected_steps: 0,
        identity_ok_steps: 0,
        identity_checked_steps: 0,
        termination: Termination::TMax,
    };
    let mut t = 0.0;
    let mut mabuchi = 0.0;
    let mut consec_accepts = 0u32;
    let mut halvings_this_step = 0u32;
    let mut keep_stride = 1u64;

    macro_rules! push_row {
        ($dt:expr) => {{
            let max_rm = model.max_rm(chart, &f, log_part);
            let dist0 = dist_weighted(model.quad_weight(), &f, &f_start);
            let row = TraceRow {
                t,
                dt: $dt,
                calabi_energy: energy,
                mabuchi_rel: mabuchi,
                sup_r_minus_theta: sup,
                max_rm,
                dist_to_start: dist0,
                dist_to_target: f64::NAN,
                min_hessian_eig: diag.min_hess_eig,
                max_f: f.iter().fold(0.0f64, |a, &b| a.max(b.abs())),
                extra: model.extra_values(energy),
                snapshot: f.clone(),
            };
            trace.rows.push(row);
            if trace.rows.len() > controls.max_trace_rows {
                // halve the retained resolution, keep first and last
                let rows = std::mem::take(&mut trace.rows);
                let last = rows.len() - 1;
                trace.rows = rows
                    .into_iter()
                    .enumerate()
                    .filter(|(i, _)| i % 2 == 0 || *i == last)
                    .map(|(_, r)| r)
                    .collect();
                keep_stride *= 2;
            }
        }};
    }
    push_row!(dt);

    let termination = loop {
        if controls.tol > 0.0 && sup < controls.tol {
            break Termination::Tolerance;
        }
        if t >= controls.t_max {
            break Termination::TMax;
        }
        if trace.accepted_steps >= controls.max_steps {
            break Termination::MaxSteps;
        }
        let dt_try = dt.min(controls.t_max - t).max(DT_MIN);

        // four stages from the cached k1 = drift(f)
        k1.copy_from_slice(&know);
        let attempt = (|| -> Result<(DriftDiag, f64, f64)> {
            stage(chart, &f, &k1, 0.5 * dt_try, &mut y);
            model.drift(chart, &y, log_part, &mut k2, &mut dets_scratch)?;
            stage(chart, &f, &k2, 0.5 * dt_try, &mut y);
            model.drift(chart, &y, log_part, &mut k3, &mut dets_scratch)?;
            stage(chart, &f, &k3, dt_try, &mut y);
            model.drift(chart, &y, log_part, &mut k4, &mut dets_scratch)?;
            f_new.copy_from_slice(&f);
            for (j, &id) in deep.iter().enumerate() {
                f_new[id as usize] +=
                    dt_try / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
            }
            chart.close_shallow(&mut f_new);
            let d = model.drift(chart, &f_new, log_part, &mut know, &mut dets_new)?;
            let e = closed_drift_energy(chart, model.quad_weight(), &know, &mut drift_full);
            let s = know.iter().map(|v| v.abs()).fold(0.0, f64::max);
            Ok((d, e, s))
        })();

        match attempt {
            Ok((diag_new, e_new, sup_new)) if e_new <= energy || e_new <= floor => {
                // accept: advance Mabuchi incrementally
                let logdet_w = model.logdet_weight();
                let lin_w = model.lin_weight();
                let mut dlog = 0.0;
                let mut dlin = 0.0;
                for k in 0..num {
                    let w = logdet_w[k];
                    if w != 0.0 {
                        dlog += w * ln_ratio(dets_new[k], dets[k]);
                    }
                    dlin += lin_w[k] * (f_new[k] - f[k]);
                }
                let dm = -dlog + dlin;
                let e_avg = 0.5 * (energy + e_new);
                if e_avg > 10.0 * floor {
                    trace.identity_checked_steps += 1;
                    if (dm / dt_try + e_avg).abs() < 0.05 * e_avg {
                        trace.identity_ok_steps += 1;
                    }
                }
                mabuchi += dm;
                std::mem::swap(&mut f, &mut f_new);
                std::mem::swap(&mut dets, &mut dets_new);
                energy = e_new;
                sup = sup_new;
                diag = diag_new;
                t += dt_try;
                trace.accepted_steps += 1;
                consec_accepts += 1;
                halvings_this_step = 0;
                if consec_accepts >= 10 {
                    dt = (dt * 1.2).min(cap(&diag_new));
                    consec_accepts = 0;
                }
                if let Some(obs) = observer.as_mut() {
                    obs(trace.accepted_steps, t, &f);
                }
                if trace.accepted_steps % keep_stride == 0 {
                    push_row!(dt_try);
                }
            }
            Ok(_) | Err(Error::SingularHessian { .. }) => {
                trace.rejected_steps += 1;
                consec_accepts = 0;
                halvings_this_step += 1;
                dt *= 0.5;
                if dt < DT_MIN || halvings_this_step > MAX_HALVINGS {
                    return Err(Error::StepUnderflow { t, dt });
                }
                // k1 (know) must describe the current f again
                model.drift(chart, &f, log_part, &mut know, &mut dets_scratch)?;
            }
            Err(e) => return Err(e),
        }
    };

    trace.termination = termination;
    // always end the trace at the final state
    if trace
        .rows
        .last()
        .map_or(true, |r| (r.t - t).abs() > 1e-300)
    {
        push_row!(dt);
    }
    let _ = keep_stride;
    // post-fill distances to the final state
    let final_f = f.clone();
    let qw = model.quad_weight().to_vec();
    for row in &mut trace.rows {
        row.dist_to_target = dist_weighted(&qw, &row.snapshot, &final_f);
    }

    let mut u = SymplecticPotential::from_values(chart.clone(), f, PotentialTag::Flowed);
    u.log_part = log_part;
    Ok((trace, u, t))
}

/// `∫ (θ − R)² dμ`-style energy of a deep-node drift, extended to the
/// shallow rim by the chart closure — the same extension the flow itself
/// integrates, so the energy is the Lyapunov function of the discrete
/// system over all of P, not just the deep zone.
pub(crate) fn closed_drift_energy(
    chart: &GridChart,
    w: &[f64],
    drift_deep: &[f64],
    scratch: &mut [f64],
) -> f64 {
    for v in scratch.iter_mut() {
        *v = 0.0;
    }
    for (j, &id) in chart.deep_nodes.iter().enumerate() {
        scratch[id as usize] = drift_deep[j];
    }
    chart.close_shallow(scratch);
    scratch
        .iter()
        .zip(w)
        .map(|(d, wk)| wk * d * d)
        .sum()
}

fn dist_weighted(w: &[f64], a: &[f64], b: &[f64]) -> f64 {
    let s: f64 = w
        .iter()
        .zip(a.iter().zip(b))
        .map(|(wk, (x, y))| wk * (x - y) * (x - y))
        .sum();
    s.max(0.0).sqrt()
}

/// Run the modified Calabi flow from `u0` until `sup|R−θ| < tol`, `t_max`,
/// or the step limit.
pub fn run(
    u0: &SymplecticPotential,
    theta: &Theta,
    controls: &FlowControls,
) -> Result<(FlowTrace, FlowState)> {
    run_observed(u0, theta, controls, None)
}

pub(crate) fn run_observed(
    u0: &SymplecticPotential,
    theta: &Theta,
    controls: &FlowControls,
    observer: Option<StepObserver<'_>>,
) -> Result<(FlowTrace, FlowState)> {
    let chart = u0.chart.clone();
    let mut model = PlainDrift::new(&chart, theta);
    let (trace, u, t) =
        run_engine_observed(&chart, &mut model, u0.f.clone(), u0.log_part, controls, observer)?;
    let state = FlowState::new(u, theta, t)?;
    Ok((trace, state))
}

/// `∫_P (R_u − θ)² dμ`; the deviation is computed on the deep zone and
/// carried to the rim by the chart closure, matching the flow's own
/// Lyapunov function.
pub fn calabi_energy(u: &SymplecticPotential, theta: &Theta) -> Result<f64> {
    let r = geometry::abreu_scalar_curvature(u)?;
    Ok(calabi_energy_of_field(&u.chart, &r.values, theta))
}

/// Energy of an explicit curvature field (testing hook for synthetic
/// fields).
pub fn calabi_energy_of_field(chart: &GridChart, r_deep: &[f64], theta: &Theta) -> f64 {
    let drift: Vec<f64> = chart
        .deep_nodes
        .iter()
        .zip(r_deep)
        .map(|(&id, r)| theta.eval(chart.point(id)) - r)
        .collect();
    let mut scratch = vec![0.0; chart.num_nodes()];
    closed_drift_energy(chart, &chart.node_weight, &drift, &mut scratch)
}

/// `L²(dμ)` distance `sqrt(∫ (u1 − u2)²)`; the Guillemin parts cancel.
pub fn distance(u1: &SymplecticPotential, u2: &SymplecticPotential) -> Result<f64> {
    if !u1.chart.same_chart(&u2.chart) {
        return Err(Error::ChartMismatch {
            left: u1.chart.signature(),
            right: u2.chart.signature(),
        });
    }
    Ok(dist_weighted(&u1.chart.node_weight, &u1.f, &u2.f))
}

/// Least-squares slope of `log energy` vs `t` over the tail half of the
/// trace past the last step-size reduction. Returns `(rate, r²)`.
pub fn convergence_rate(trace: &FlowTrace) -> Result<(f64, f64)> {
    // find the last index where dt shrank relative to its predecessor
    let rows = &trace.rows;
    let mut start = 0usize;
    for i in 1..rows.len() {
        if rows[i].dt < rows[i - 1].dt * 0.75 {
            start = i;
        }
    }
    let usable: Vec<(f64, f64)> = rows[start..]
        .iter()
        .filter(|r| r.calabi_energy > 0.0)
        .map(|r| (r.t, r.calabi_energy.ln()))
        .collect();
    if usable.len() < 20 {
        return Err(Error::TraceTooShort {
            rows: usable.len(),
            need: 20,
        });
    }
    let tail = &usable[usable.len() / 2..];
    let m = tail.len() as f64;
    let (mut st, mut se) = (0.0, 0.0);
    for (t, e) in tail {
        st += t;
        se += e;
    }
    let (tbar, ebar) = (st / m, se / m);
    let (mut stt, mut ste, mut see) = (0.0, 0.0, 0.0);
    for (t, e) in tail {
        stt += (t - tbar) * (t - tbar);
        ste += (t - tbar) * (e - ebar);
        see += (e - ebar) * (e - ebar);
    }
    if stt == 0.0 || see == 0.0 {
        return Err(Error::TraceTooShort {
            rows: tail.len(),
            need: 20,
        });
    }
    let rate = ste / stt;
    let r2 = (ste * ste) / (stt * see);
    Ok((rate, r2))
}

// ---------------------------------------------------------------------------
// L∞-bound probe
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ProbeRow {
    pub index: usize,
    pub boundary_integral: f64,
    pub max_rm: f64,
    pub max_u_tilde: f64,
    pub convex: bool,
}

#[derive(Debug, Clone)]
pub struct ProbeTable {
    pub rows: Vec<ProbeRow>,
}

impl ProbeTable {
    /// Max of ũ over members below the curvature and boundary budgets.
    pub fn filtered_sup(&self, rm_bound: f64, boundary_bound: f64) -> Option<f64> {
        self.rows
            .iter()
            .filter(|r| r.convex && r.max_rm <= rm_bound && r.boundary_integral <= boundary_bound)
            .map(|r| r.max_u_tilde)
            .fold(None, |acc, v| Some(acc.map_or(v, |a: f64| a.max(v))))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "member,boundary_integral,max_rm,max_u_tilde,convex")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{:.16e},{:.16e},{:.16e},{}",
                r.index, r.boundary_integral, r.max_rm, r.max_u_tilde, r.convex
            )?;
        }
        Ok(())
    }
}

/// For each member: normalize at `x0`, then report `∫_{∂P} ũ dσ`,
/// `max|Rm|`, and `max_P ũ`. Non-convex members are flagged and excluded
/// from the numeric columns.
pub fn linf_bound_probe(family: &[SymplecticPotential], x0: &[f64]) -> Result<ProbeTable> {
    let mut rows = Vec::with_capacity(family.len());
    for (index, u) in family.iter().enumerate() {
        let convex = geometry::inverse_hessian_field(u).is_ok();
        if !convex {
            rows.push(ProbeRow {
                index,
                boundary_integral: f64::NAN,
                max_rm: f64::NAN,
                max_u_tilde: f64::NAN,
                convex,
            });
            continue;
        }
        let tilde = u.normalize(x0)?;
        let chart = &tilde.chart;
        let mut boundary = 0.0;
        for (pt, w) in &chart.boundary_panels {
            boundary += w * tilde.evaluate(pt)?;
        }
        let max_rm = geometry::riemannian_norm(&tilde)?.max();
        let max_u = (0..chart.num_nodes() as u32)
            .map(|id| tilde.u_g(chart.point(id)) + tilde.f[id as usize])
            .fold(f64::NEG_INFINITY, f64::max);
        rows.push(ProbeRow {
            index,
            boundary_integral: boundary,
            max_rm,
            max_u_tilde: max_u,
            convex,
        });
    }
    Ok(ProbeTable { rows })
}

/// Deterministic convex-ish family for probes: guillemin plus seeded
/// low-order bumps scaled by `Π l_i²`, normalized so the amplitude is
/// polytope-size independent.
pub fn seeded_family(chart: &Arc<GridChart>, count: usize, seed: u64) -> Vec<SymplecticPotential> {
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = chart.polytope.clone();
    let n = p.dim;
    let centroid = p.centroid_f64();
    let mut bump_scale = 1.0;
    for i in 0..p.num_facets() {
        let l = p.l(i, &centroid);
        bump_scale *= l * l;
    }
    let diam = p
        .vertices_f64()
        .iter()
        .flat_map(|a| {
            p.vertices_f64()
                .iter()
                .map(move |b| (0..n).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>().sqrt())
        })
        .fold(0.0f64, f64::max)
        .max(1e-12);
    (0..count)
        .map(|_| {
            let amp: f64 = rng.gen_range(0.0..0.06);
            let lin: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let quad: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let pp = p.clone();
            let x0 = centroid.clone();
            SymplecticPotential::from_fn(chart.clone(), PotentialTag::Perturbed, move |x| {
                let mut prod = 1.0;
                for i in 0..pp.num_facets() {
                    let l = pp.l(i, x);
                    prod *= l * l;
                }
                let mut shape = 1.0;
                for k in 0..n {
                    let xi = (x[k] - x0[k]) / diam;
                    shape += lin[k] * xi + quad[k] * xi * xi;
                }
                amp * (prod / bump_scale) * shape
            })
        })
        .collect()
}

#[cfg(test)]
mod tests;

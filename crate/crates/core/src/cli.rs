//! Batch front door: parse polytope/weight/config files, dispatch one
//! command, write traces and reports. Deterministic: identical config and
//! seed produce byte-identical outputs.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Deserialize;

use crate::flow::{self, FlowControls};
use crate::polytope::chart::{make_grid, GridChart};
use crate::polytope::{load_polytope, DelzantPolytope};
use crate::potential::{guillemin, PotentialTag, SymplecticPotential};
use crate::stability::{self, Theta};
use crate::weighted;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Check,
    Theta,
    Scan,
    Flow,
    Wflow,
    Probe,
    Segment,
}

impl Command {
    pub fn parse(name: &str) -> Result<Command> {
        Ok(match name {
            "check" => Command::Check,
            "theta" => Command::Theta,
            "scan" => Command::Scan,
            "flow" => Command::Flow,
            "wflow" => Command::Wflow,
            "probe" => Command::Probe,
            "segment" => Command::Segment,
            other => {
                return Err(Error::InvalidInput(format!("unknown command '{other}'")));
            }
        })
    }
}

/// Everything a run needs. Unset fields fall back to the config file and
/// then to defaults; flags always win. Unknown config keys are rejected.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub command: Option<String>,
    pub polytope: Option<PathBuf>,
    pub weight: Option<PathBuf>,
    pub h: Option<f64>,
    pub dt0: Option<f64>,
    pub tmax: Option<f64>,
    pub tol: Option<f64>,
    pub safety: Option<f64>,
    pub max_steps: Option<u64>,
    pub max_denominator: Option<i64>,
    pub depth_margin: Option<f64>,
    pub epsilon: Option<f64>,
    pub seed: Option<u64>,
    pub count: Option<usize>,
    pub bump: Option<f64>,
    pub samples: Option<usize>,
    pub segment_a: Option<Vec<f64>>,
    pub segment_b: Option<Vec<f64>>,
    pub checkpoint_every: Option<u64>,
    pub start: Option<PathBuf>,
    pub unmodified: Option<bool>,
    pub out: Option<PathBuf>,
    pub rm_bound: Option<f64>,
    pub boundary_bound: Option<f64>,
    pub dump_r: Option<PathBuf>,
    pub dump_rm: Option<PathBuf>,
}

impl RunConfig {
    /// Fill unset fields from `base` (flags override config).
    pub fn or(mut self, base: RunConfig) -> RunConfig {
        macro_rules! fill {
            ($($field:ident),*) => {
                $(if self.$field.is_none() { self.$field = base.$field; })*
            };
        }
        fill!(
            command, polytope, weight, h, dt0, tmax, tol, safety, max_steps, max_denominator,
            depth_margin, epsilon, seed, count, bump, samples, segment_a, segment_b,
            checkpoint_every, start, unmodified, out, rm_bound, boundary_bound, dump_r, dump_rm
        );
        self
    }

    pub fn load_config_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("config file: {e}")))
    }

    fn validate(&self) -> Result<()> {
        macro_rules! positive {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field {
                    if !(v > 0.0) {
                        return Err(Error::InvalidInput(format!(
                            "{} must be positive, got {v}", stringify!($field)
                        )));
                    }
                })*
            };
        }
        positive!(h, dt0, tmax, tol, safety, depth_margin, epsilon, bump);
        if let Some(d) = self.max_denominator {
            if d <= 0 {
                return Err(Error::InvalidInput("max_denominator must be positive".into()));
            }
        }
        Ok(())
    }

    fn polytope(&self) -> Result<Arc<DelzantPolytope>> {
        let path = self
            .polytope
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("no polytope file given".into()))?;
        Ok(Arc::new(load_polytope(path)?))
    }

    fn chart(&self, p: Arc<DelzantPolytope>) -> Result<Arc<GridChart>> {
        let h = self.h.unwrap_or(1.0 / 64.0);
        Ok(Arc::new(make_grid(p, h)?))
    }

    fn controls(&self) -> FlowControls {
        let mut c = FlowControls {
            dt0: self.dt0,
            ..Default::default()
        };
        if let Some(t) = self.tmax {
            c.t_max = t;
        }
        if let Some(t) = self.tol {
            c.tol = t;
        }
        if let Some(s) = self.safety {
            c.safety = s;
        }
        if let Some(m) = self.max_steps {
            c.max_steps = m;
        }
        c
    }

    fn initial_potential(&self, chart: &Arc<GridChart>) -> Result<(SymplecticPotential, f64)> {
        if let Some(ckpt) = &self.start {
            let (u, t) = SymplecticPotential::read_checkpoint(ckpt, chart.polytope.clone())?;
            return Ok((u, t));
        }
        let amp = self.bump.unwrap_or(0.0);
        let u = if amp == 0.0 {
            guillemin(chart.clone())
        } else {
            SymplecticPotential::guillemin_with_bump(chart.clone(), amp)
        };
        Ok((u, 0.0))
    }
}

fn theta_for(cfg: &RunConfig, p: &DelzantPolytope) -> Result<Theta> {
    if cfg.unmodified == Some(true) {
        // the unmodified Calabi flow: θ replaced by the constant R̄
        Ok(Theta::constant(p.dim, stability::average_scalar_curvature(p)))
    } else {
        stability::extremal_affine(p)
    }
}

/// Execute one command, writing human-readable output to `out`. Artifact
/// files go wherever the config points.
pub fn dispatch(command: Command, cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    cfg.validate()?;
    match command {
        Command::Check => {
            let path = cfg
                .polytope
                .as_ref()
                .ok_or_else(|| Error::InvalidInput("no polytope file given".into()))?;
            match load_polytope(path) {
                Ok(p) => {
                    writeln!(out, "Delzant: valid, {} vertices", p.vertices.len())?;
                    writeln!(out, "{p}")?;
                    Ok(())
                }
                Err(e) => {
                    writeln!(out, "Delzant: invalid — {e}")?;
                    Err(e)
                }
            }
        }
        Command::Theta => {
            let p = cfg.polytope()?;
            let theta = stability::extremal_affine(&p)?;
            write!(out, "theta: constant = {:.16e}, gradient = [", theta.affine.constant)?;
            for (k, g) in theta.affine.gradient.iter().enumerate() {
                if k > 0 {
                    write!(out, ", ")?;
                }
                write!(out, "{:.16e}", g)?;
            }
            writeln!(out, "]")?;
            let residual = stability::theta_residual(&p, &theta);
            writeln!(out, "residual over the affine basis: {residual:.3e}")?;
            let rbar = stability::average_scalar_curvature(&p);
            writeln!(
                out,
                "average scalar curvature R̄ = {:.16e}",
                crate::polytope::exact::rat_to_f64(&rbar)
            )?;
            Ok(())
        }
        Command::Scan => {
            let p = cfg.polytope()?;
            let theta = stability::extremal_affine(&p)?;
            let report = stability::pl_stability_scan(
                &p,
                &theta,
                cfg.max_denominator.unwrap_or(4),
                cfg.depth_margin.unwrap_or(0.125),
                None,
            )?;
            if let Some(path) = &cfg.out {
                report.write_csv(path)?;
                writeln!(out, "scan CSV written to {}", path.display())?;
            }
            writeln!(
                out,
                "lambda_estimate = {:.6e} over {} creases",
                report.lambda_estimate,
                report.rows.len()
            )?;
            write!(out, "worst crease: a = [")?;
            for (k, a) in report.worst.a.iter().enumerate() {
                if k > 0 {
                    write!(out, ", ")?;
                }
                write!(out, "{}", crate::polytope::exact::rat_to_f64(a))?;
            }
            writeln!(
                out,
                "], b = {}",
                crate::polytope::exact::rat_to_f64(&report.worst.b)
            )?;
            Ok(())
        }
        Command::Flow => {
            let p = cfg.polytope()?;
            let chart = cfg.chart(p.clone())?;
            let theta = theta_for(cfg, &p)?;
            let (u0, _t0) = cfg.initial_potential(&chart)?;
            let controls = cfg.controls();
            let out_dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from("flow_out"));
            std::fs::create_dir_all(&out_dir)?;
            let every = cfg.checkpoint_every.unwrap_or(0);
            let chart2 = chart.clone();
            let mut save =
                |step: u64, t: f64, f: &[f64]| checkpoint_observer(&chart2, &out_dir, step, t, f, every);
            let observer: Option<crate::flow::StepObserver<'_>> =
                if every > 0 { Some(&mut save) } else { None };
            let (trace, state) = flow::run_observed(&u0, &theta, &controls, observer)?;
            let trace_path = out_dir.join("trace.csv");
            trace.write_csv(&trace_path)?;
            state.potential.write_checkpoint(&out_dir.join("final.ckpt"), state.t)?;
            if let Some(path) = &cfg.dump_r {
                state.r_field.dump(path)?;
            }
            if let Some(path) = &cfg.dump_rm {
                state.rm_field.dump(path)?;
            }
            report_run(out, &trace, state.t, &trace_path)?;
            Ok(())
        }
        Command::Wflow => {
            let p = cfg.polytope()?;
            let chart = cfg.chart(p.clone())?;
            let wpath = cfg
                .weight
                .as_ref()
                .ok_or_else(|| Error::InvalidInput("wflow needs a weight file".into()))?;
            let w = weighted::load_weight(wpath)?;
            let (u0, _t0) = cfg.initial_potential(&chart)?;
            let controls = cfg.controls();
            let out_dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from("wflow_out"));
            std::fs::create_dir_all(&out_dir)?;
            let every = cfg.checkpoint_every.unwrap_or(0);
            let chart2 = chart.clone();
            let mut save =
                |step: u64, t: f64, f: &[f64]| checkpoint_observer(&chart2, &out_dir, step, t, f, every);
            let observer: Option<crate::flow::StepObserver<'_>> =
                if every > 0 { Some(&mut save) } else { None };
            let (trace, ufinal, proj) = weighted::weighted_flow_observed(&u0, &w, &controls, observer)?;
            let trace_path = out_dir.join("trace.csv");
            trace.write_csv(&trace_path)?;
            let t_final = trace.rows.last().map_or(0.0, |r| r.t);
            ufinal.write_checkpoint(&out_dir.join("final.ckpt"), t_final)?;
            writeln!(out, "projection: A = {:?}, B = {:.6e}", proj.a, proj.b)?;
            report_run(out, &trace, t_final, &trace_path)?;
            Ok(())
        }
        Command::Probe => {
            let p = cfg.polytope()?;
            let chart = cfg.chart(p.clone())?;
            let family = flow::seeded_family(&chart, cfg.count.unwrap_or(50), cfg.seed.unwrap_or(0));
            let x0 = p.centroid_f64();
            let table = flow::linf_bound_probe(&family, &x0)?;
            if let Some(path) = &cfg.out {
                table.write_csv(path)?;
                writeln!(out, "probe table written to {}", path.display())?;
            }
            let rm_bound = cfg.rm_bound.unwrap_or(1.0);
            let b_bound = cfg.boundary_bound.unwrap_or(2.0);
            match table.filtered_sup(rm_bound, b_bound) {
                Some(sup) => writeln!(
                    out,
                    "max ũ over members with max|Rm| ≤ {rm_bound} and ∫∂ũ ≤ {b_bound}: {sup:.12e}"
                )?,
                None => writeln!(out, "no member passed the |Rm|/boundary filter")?,
            }
            Ok(())
        }
        Command::Segment => {
            let p = cfg.polytope()?;
            let chart = cfg.chart(p.clone())?;
            let (u, _) = cfg.initial_potential(&chart)?;
            let a = cfg
                .segment_a
                .clone()
                .ok_or_else(|| Error::InvalidInput("segment needs --a".into()))?;
            let b = cfg
                .segment_b
                .clone()
                .ok_or_else(|| Error::InvalidInput("segment needs --b".into()))?;
            let m = cfg.samples.unwrap_or(65);
            let prof = crate::geometry::segment_profile(&u, &a, &b, m)?;
            if let Some(path) = &cfg.out {
                prof.write_csv(path)?;
                writeln!(out, "segment profile written to {}", path.display())?;
            }
            writeln!(
                out,
                "1/V'' at endpoints: {:.6e}, {:.6e}; endpoint slopes: {:.6e}, {:.6e}",
                prof.w_start, prof.w_end, prof.w1_start, prof.w1_end
            )?;
            writeln!(out, "max[(1/V'')'' − |Rm|] along the segment: {:.6e}", prof.chord_excess)?;
            Ok(())
        }
    }
}

fn checkpoint_observer(
    chart: &Arc<GridChart>,
    out_dir: &Path,
    step: u64,
    t: f64,
    f: &[f64],
    every: u64,
) {
    if every == 0 || step % every != 0 {
        return;
    }
    let mut u = SymplecticPotential::from_values(chart.clone(), f.to_vec(), PotentialTag::Flowed);
    u.log_part = true;
    let path = out_dir.join(format!("ckpt_{step:08}.ckpt"));
    let _ = u.write_checkpoint(&path, t);
}

fn report_run(
    out: &mut dyn Write,
    trace: &flow::FlowTrace,
    t_final: f64,
    trace_path: &Path,
) -> Result<()> {
    let last = trace.rows.last();
    writeln!(
        out,
        "terminated: {:?} at t = {:.6e} after {} accepted steps ({} rejected)",
        trace.termination, t_final, trace.accepted_steps, trace.rejected_steps
    )?;
    if let Some(r) = last {
        writeln!(
            out,
            "final: energy = {:.6e}, sup|R−θ| = {:.6e}, max|f| = {:.6e}",
            r.calabi_energy, r.sup_r_minus_theta, r.max_f
        )?;
    }
    if trace.identity_checked_steps > 0 {
        writeln!(
            out,
            "gradient identity held on {}/{} steps",
            trace.identity_ok_steps, trace.identity_checked_steps
        )?;
    }
    writeln!(out, "trace written to {}", trace_path.display())?;
    Ok(())
}

#[cfg(test)]
mod tests;

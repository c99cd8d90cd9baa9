use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use toric_calabi::cli::{self, Command, RunConfig};

#[derive(Parser)]
#[command(
    name = "toric-calabi",
    about = "Extremal Kähler geometry on toric varieties: Delzant polytopes, the Abreu operator, the modified Calabi flow, and K-stability scans",
    version
)]
struct Cli {
    /// JSON config file; explicit flags override its values
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args, Default)]
struct CommonArgs {
    /// polytope file (JSON: name, dim, facets)
    #[arg(long)]
    polytope: Option<PathBuf>,
    /// grid spacing
    #[arg(long)]
    h: Option<f64>,
    /// output path (file or directory, command-dependent)
    #[arg(long)]
    out: Option<PathBuf>,
    /// seed for randomized families
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Default)]
struct FlowArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// initial step size
    #[arg(long)]
    dt0: Option<f64>,
    /// time horizon
    #[arg(long)]
    tmax: Option<f64>,
    /// termination tolerance on sup|R − θ|
    #[arg(long)]
    tol: Option<f64>,
    /// fraction of the stability cap the adaptive step may use
    #[arg(long)]
    safety: Option<f64>,
    /// stop after this many accepted steps
    #[arg(long)]
    max_steps: Option<u64>,
    /// write a checkpoint every k accepted steps
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// start from `guillemin + bump·Π l_i²`
    #[arg(long)]
    bump: Option<f64>,
    /// resume from a checkpoint file
    #[arg(long)]
    start: Option<PathBuf>,
    /// use the unmodified flow (θ replaced by the average curvature R̄)
    #[arg(long)]
    unmodified: bool,
    /// dump the final scalar-curvature field
    #[arg(long)]
    dump_r: Option<PathBuf>,
    /// dump the final |Rm| field
    #[arg(long)]
    dump_rm: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Validate the Delzant conditions and report the vertices
    Check {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Solve for the extremal affine function and print residuals
    Theta {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Scan crease functions for the K-stability ratio
    Scan {
        #[command(flatten)]
        common: CommonArgs,
        /// largest integer entry of the crease directions
        #[arg(long)]
        max_denominator: Option<i64>,
        /// creases must cut this deep into the polytope
        #[arg(long)]
        depth_margin: Option<f64>,
    },
    /// Run the modified Calabi flow
    Flow {
        #[command(flatten)]
        flow: FlowArgs,
    },
    /// Run the weighted (admissible-reduction) flow
    Wflow {
        #[command(flatten)]
        flow: FlowArgs,
        /// weight file (JSON: p_sigma, c_sigma, groups, scal_sigma, scal_j)
        #[arg(long)]
        weight: Option<PathBuf>,
    },
    /// Seeded family probe of the L∞ bound
    Probe {
        #[command(flatten)]
        common: CommonArgs,
        /// family size
        #[arg(long)]
        count: Option<usize>,
        /// curvature filter max|Rm| ≤ rm-bound
        #[arg(long)]
        rm_bound: Option<f64>,
        /// boundary filter ∫∂ũ dσ ≤ boundary-bound
        #[arg(long)]
        boundary_bound: Option<f64>,
    },
    /// Profile a potential along a segment
    Segment {
        #[command(flatten)]
        common: CommonArgs,
        /// start point, comma-separated
        #[arg(long, value_delimiter = ',')]
        a: Option<Vec<f64>>,
        /// end point, comma-separated
        #[arg(long, value_delimiter = ',')]
        b: Option<Vec<f64>>,
        /// number of samples
        #[arg(long)]
        samples: Option<usize>,
        /// profile `guillemin + bump·Π l_i²` instead of guillemin
        #[arg(long)]
        bump: Option<f64>,
    },
}

fn common_into(cfg: &mut RunConfig, c: CommonArgs) {
    cfg.polytope = c.polytope;
    cfg.h = c.h;
    cfg.out = c.out;
    cfg.seed = c.seed;
}

fn flow_into(cfg: &mut RunConfig, f: FlowArgs) {
    common_into(cfg, f.common);
    cfg.dt0 = f.dt0;
    cfg.tmax = f.tmax;
    cfg.tol = f.tol;
    cfg.safety = f.safety;
    cfg.max_steps = f.max_steps;
    cfg.checkpoint_every = f.checkpoint_every;
    cfg.bump = f.bump;
    cfg.start = f.start;
    cfg.unmodified = if f.unmodified { Some(true) } else { None };
    cfg.dump_r = f.dump_r;
    cfg.dump_rm = f.dump_rm;
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut cfg = RunConfig::default();
    let command = match &cli.command {
        Cmd::Check { .. } => Command::Check,
        Cmd::Theta { .. } => Command::Theta,
        Cmd::Scan { .. } => Command::Scan,
        Cmd::Flow { .. } => Command::Flow,
        Cmd::Wflow { .. } => Command::Wflow,
        Cmd::Probe { .. } => Command::Probe,
        Cmd::Segment { .. } => Command::Segment,
    };
    match cli.command {
        Cmd::Check { common } | Cmd::Theta { common } => common_into(&mut cfg, common),
        Cmd::Scan {
            common,
            max_denominator,
            depth_margin,
        } => {
            common_into(&mut cfg, common);
            cfg.max_denominator = max_denominator;
            cfg.depth_margin = depth_margin;
        }
        Cmd::Flow { flow } => flow_into(&mut cfg, flow),
        Cmd::Wflow { flow, weight } => {
            flow_into(&mut cfg, flow);
            cfg.weight = weight;
        }
        Cmd::Probe {
            common,
            count,
            rm_bound,
            boundary_bound,
        } => {
            common_into(&mut cfg, common);
            cfg.count = count;
            cfg.rm_bound = rm_bound;
            cfg.boundary_bound = boundary_bound;
        }
        Cmd::Segment {
            common,
            a,
            b,
            samples,
            bump,
        } => {
            common_into(&mut cfg, common);
            cfg.segment_a = a;
            cfg.segment_b = b;
            cfg.samples = samples;
            cfg.bump = bump;
        }
    }
    if let Some(path) = &cli.config {
        match RunConfig::load_config_file(path) {
            Ok(base) => cfg = cfg.or(base),
            Err(e) => {
                eprintln!("error in config: {e}");
                return ExitCode::from(2);
            }
        }
    }
    let mut stdout = std::io::stdout().lock();
    match cli::dispatch(command, &cfg, &mut stdout) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error in {command:?}: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

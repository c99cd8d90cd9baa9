use super::*;
use crate::polytope::chart::make_grid;
use crate::polytope::{interval, standard_simplex};
use crate::potential::guillemin;
use crate::stability::extremal_affine;

fn interval_setup(h: f64) -> (Arc<GridChart>, Theta) {
    let p = Arc::new(interval(0.0, 1.0));
    let theta = extremal_affine(&p).unwrap();
    let chart = Arc::new(make_grid(p, h).unwrap());
    (chart, theta)
}

#[test]
fn guillemin_is_stationary_on_the_interval() {
    let (chart, theta) = interval_setup(1.0 / 64.0);
    let u = guillemin(chart);
    let controls = FlowControls {
        tol: 0.0,
        t_max: f64::INFINITY,
        max_steps: 200,
        ..Default::default()
    };
    let (trace, state) = run(&u, &theta, &controls).unwrap();
    assert_eq!(trace.accepted_steps, 200);
    let max_f = state.potential.f.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    assert!(max_f < 1e-10, "f drifted to {max_f:.3e}");
}

#[test]
fn guillemin_terminates_immediately_at_default_tolerance() {
    let (chart, theta) = interval_setup(1.0 / 64.0);
    let u = guillemin(chart);
    let (trace, state) = run(&u, &theta, &FlowControls::default()).unwrap();
    assert_eq!(trace.termination, Termination::Tolerance);
    assert_eq!(trace.accepted_steps, 0);
    assert!(state.sup_r_minus_theta() < 1e-3);
}

#[test]
fn step_commutes_with_affine_shifts() {
    let (chart, theta) = interval_setup(1.0 / 32.0);
    let u = SymplecticPotential::guillemin_with_bump(chart.clone(), 0.05);
    let a = AffineFunction {
        gradient: vec![0.5],
        constant: 0.25,
    };
    let shifted = u.add_affine_scaled(&a, 1.0);
    let dt = 1e-8;
    let s1 = step(&FlowState::new(u, &theta, 0.0).unwrap(), &theta, dt).unwrap();
    let s2 = step(&FlowState::new(shifted, &theta, 0.0).unwrap(), &theta, dt).unwrap();
    // outputs differ by the same affine function
    for id in 0..s1.potential.f.len() {
        let x = s1.potential.chart.point(id as u32);
        let want = s1.potential.f[id] + a.eval(x);
        assert!(
            (s2.potential.f[id] - want).abs() < 1e-12,
            "node {id}: {} vs {want}",
            s2.potential.f[id]
        );
    }
}

#[test]
fn bump_run_decays_monotonically_and_contracts_distance() {
    let (chart, theta) = interval_setup(1.0 / 64.0);
    let u0 = SymplecticPotential::guillemin_with_bump(chart, 0.05);
    let controls = FlowControls {
        tol: 5e-3,
        t_max: 1.0,
        ..Default::default()
    };
    let (trace, state) = run(&u0, &theta, &controls).unwrap();
    assert_eq!(trace.termination, Termination::Tolerance);
    assert!(trace.accepted_steps > 1000);

    // monotone energy on kept rows
    for win in trace.rows.windows(2) {
        assert!(
            win[1].calabi_energy <= win[0].calabi_energy * (1.0 + 1e-12),
            "energy rose: {} -> {}",
            win[0].calabi_energy,
            win[1].calabi_energy
        );
    }
    // distance to the final state never increases
    for win in trace.rows.windows(2) {
        assert!(
            win[1].dist_to_target <= win[0].dist_to_target + 1e-10,
            "distance rose: {} -> {}",
            win[0].dist_to_target,
            win[1].dist_to_target
        );
    }
    // gradient identity holds on nearly all steps
    let frac = trace.identity_ok_steps as f64 / trace.identity_checked_steps.max(1) as f64;
    assert!(frac > 0.9, "identity fraction {frac}");
    // the limit keeps the curvature target
    assert!(state.sup_r_minus_theta() < 5e-3);
}

#[test]
fn run_matches_gauge_shifted_run() {
    let (chart, theta) = interval_setup(1.0 / 32.0);
    let u = SymplecticPotential::guillemin_with_bump(chart.clone(), 0.05);
    let a = AffineFunction {
        gradient: vec![0.5],
        constant: -0.25,
    };
    let shifted = u.add_affine_scaled(&a, 1.0);
    let controls = FlowControls {
        tol: 0.0,
        t_max: f64::INFINITY,
        max_steps: 60,
        ..Default::default()
    };
    let (t1, _) = run(&u, &theta, &controls).unwrap();
    let (t2, _) = run(&shifted, &theta, &controls).unwrap();
    assert_eq!(t1.rows.len(), t2.rows.len());
    for (r1, r2) in t1.rows.iter().zip(&t2.rows) {
        assert!((r1.t - r2.t).abs() < 1e-12);
        assert!((r1.calabi_energy - r2.calabi_energy).abs() < 1e-10);
        assert!((r1.mabuchi_rel - r2.mabuchi_rel).abs() < 1e-10);
        assert!((r1.sup_r_minus_theta - r2.sup_r_minus_theta).abs() < 1e-10);
        assert!((r1.dist_to_start - r2.dist_to_start).abs() < 1e-10);
        assert!((r1.max_rm - r2.max_rm).abs() < 1e-10);
    }
}

#[test]
fn stationarity_on_the_simplex() {
    let p = Arc::new(standard_simplex(2));
    let theta = extremal_affine(&p).unwrap();
    let chart = Arc::new(make_grid(p, 1.0 / 16.0).unwrap());
    let u = guillemin(chart);
    let controls = FlowControls {
        tol: 0.0,
        t_max: f64::INFINITY,
        max_steps: 50,
        ..Default::default()
    };
    let (trace, state) = run(&u, &theta, &controls).unwrap();
    assert_eq!(trace.accepted_steps, 50);
    let max_f = state.potential.f.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    assert!(max_f < 1e-10, "simplex drifted to {max_f:.3e}");
}

#[test]
fn calabi_energy_conventions() {
    let (chart, theta) = interval_setup(1.0 / 128.0);
    let u = guillemin(chart.clone());
    let e = calabi_energy(&u, &theta).unwrap();
    assert!(e < 1e-3, "guillemin energy {e}");

    // synthetic field R ≡ θ + 1 integrates the covered volume
    let ones: Vec<f64> = chart
        .deep_nodes
        .iter()
        .map(|&id| theta.eval(chart.point(id)) + 1.0)
        .collect();
    let e = calabi_energy_of_field(&chart, &ones, &theta);
    assert!((e - 1.0).abs() < 1e-12, "synthetic energy {e}");
}

#[test]
fn distance_conventions() {
    let (chart, _) = interval_setup(1.0 / 64.0);
    let u = guillemin(chart.clone());
    assert_eq!(distance(&u, &u).unwrap(), 0.0);
    let c = u.add_affine_scaled(&AffineFunction::constant(1, 0.3), 1.0);
    // |c|·sqrt(Leb(P)) on the unit interval
    assert!((distance(&u, &c).unwrap() - 0.3).abs() < 1e-12);
}

#[test]
fn convergence_rate_on_synthetic_traces() {
    let mk_row = |t: f64, e: f64| TraceRow {
        t,
        dt: 1e-3,
        calabi_energy: e,
        mabuchi_rel: 0.0,
        sup_r_minus_theta: 0.0,
        max_rm: 0.0,
        dist_to_start: 0.0,
        dist_to_target: 0.0,
        min_hessian_eig: 1.0,
        max_f: 0.0,
        extra: Vec::new(),
        snapshot: Vec::new(),
    };
    let rows: Vec<TraceRow> = (0..50)
        .map(|i| {
            let t = i as f64 * 0.1;
            mk_row(t, (-3.0 * t).exp())
        })
        .collect();
    let trace = FlowTrace {
        rows,
        extra_names: Vec::new(),
        accepted_steps: 50,
        rejected_steps: 0,
        identity_ok_steps: 0,
        identity_checked_steps: 0,
        termination: Termination::TMax,
    };
    let (rate, r2) = convergence_rate(&trace).unwrap();
    assert!((rate + 3.0).abs() < 1e-9);
    assert!((r2 - 1.0).abs() < 1e-12);

    let flat: Vec<TraceRow> = (0..50).map(|i| mk_row(i as f64 * 0.1, 0.0)).collect();
    let trace = FlowTrace {
        rows: flat,
        extra_names: Vec::new(),
        accepted_steps: 50,
        rejected_steps: 0,
        identity_ok_steps: 0,
        identity_checked_steps: 0,
        termination: Termination::TMax,
    };
    assert!(matches!(
        convergence_rate(&trace),
        Err(Error::TraceTooShort { .. })
    ));
}

#[test]
fn non_convex_start_is_rejected() {
    let (chart, theta) = interval_setup(1.0 / 32.0);
    let u = SymplecticPotential::from_fn(chart, PotentialTag::Perturbed, |x| {
        -40.0 * (x[0] - 0.5).powi(2)
    });
    assert!(matches!(
        run(&u, &theta, &FlowControls::default()),
        Err(Error::NonConvexStart { .. })
    ));
}

#[test]
fn probe_reports_the_guillemin_endpoint_value() {
    let (chart, _) = interval_setup(1.0 / 64.0);
    let family: Vec<SymplecticPotential> = (0..5)
        .map(|k| SymplecticPotential::guillemin_with_bump(chart.clone(), 0.05 * k as f64))
        .collect();
    let table = linf_bound_probe(&family, &[0.5]).unwrap();
    // guillemin alone: ũ = u_G + ln2/2, max at the endpoints
    let want = 0.5 * f64::ln(2.0);
    assert!((table.rows[0].max_u_tilde - want).abs() < 1e-10);
    assert!(table.rows.iter().all(|r| r.convex));
    // max ũ is monotone in the boundary integral over the family
    let mut rows: Vec<(f64, f64)> = table
        .rows
        .iter()
        .map(|r| (r.boundary_integral, r.max_u_tilde))
        .collect();
    rows.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    for w in rows.windows(2) {
        assert!(w[1].1 >= w[0].1 - 1e-12, "not monotone: {rows:?}");
    }
}

#[test]
fn probe_flags_non_convex_members() {
    let (chart, _) = interval_setup(1.0 / 32.0);
    let bad = SymplecticPotential::from_fn(chart.clone(), PotentialTag::Perturbed, |x| {
        -40.0 * (x[0] - 0.5).powi(2)
    });
    let good = guillemin(chart);
    let table = linf_bound_probe(&[good, bad], &[0.5]).unwrap();
    assert!(table.rows[0].convex);
    assert!(!table.rows[1].convex);
    assert_eq!(table.filtered_sup(1e6, 1e6).unwrap(), table.rows[0].max_u_tilde);
}

#[test]
fn trace_csv_round_trip_columns() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.csv");
    let (chart, theta) = interval_setup(1.0 / 32.0);
    let u = SymplecticPotential::guillemin_with_bump(chart, 0.02);
    let controls = FlowControls {
        tol: 0.0,
        t_max: f64::INFINITY,
        max_steps: 25,
        ..Default::default()
    };
    let (trace, _) = run(&u, &theta, &controls).unwrap();
    trace.write_csv(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let header = text.lines().next().unwrap();
    assert_eq!(
        header,
        "t,dt,calabi_energy,mabuchi_rel,sup_r_minus_theta,max_rm,dist_to_start,dist_to_target,min_hessian_eig,max_f"
    );
}

#[test]
fn mabuchi_column_matches_the_direct_functional() {
    let (chart, theta) = interval_setup(1.0 / 64.0);
    let u0 = SymplecticPotential::guillemin_with_bump(chart.clone(), 0.05);
    let controls = FlowControls {
        tol: 0.0,
        t_max: f64::INFINITY,
        max_steps: 400,
        ..Default::default()
    };
    let (trace, state) = run(&u0, &theta, &controls).unwrap();
    let m_trace = trace.rows.last().unwrap().mabuchi_rel;
    // the engine's start is u0 with shallow nodes rebuilt by the closure
    let mut f0c = u0.f.clone();
    chart.close_shallow(&mut f0c);
    let u0 = SymplecticPotential::from_values(chart.clone(), f0c, PotentialTag::Perturbed);
    // recompute the same functional (uncorrected linear part) directly
    let field0 = crate::geometry::inverse_hessian_field(&u0).unwrap();
    let field1 = crate::geometry::inverse_hessian_field(&state.potential).unwrap();
    let mut log_term = 0.0;
    for id in 0..chart.num_nodes() {
        let w = chart.interior_cell_weight[id];
        if w != 0.0 {
            log_term += w * (field1.hessians[id] / field0.hessians[id]).ln();
        }
    }
    let mut lin = 0.0;
    for id in 0..chart.num_nodes() {
        let x = chart.point(id as u32);
        let d = state.potential.f[id] - u0.f[id];
        lin += (2.0 * chart.boundary_node_weight[id]
            - chart.node_weight[id] * theta.eval(x))
            * d;
    }
    let m_direct = -log_term + lin;
    assert!(
        (m_trace - m_direct).abs() < 1e-10 * (1.0 + m_direct.abs()),
        "trace {m_trace} vs direct {m_direct}"
    );
}

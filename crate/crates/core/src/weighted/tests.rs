use super::*;
use crate::flow::{run, FlowControls};
use crate::polytope::chart::make_grid;
use crate::polytope::interval;
use crate::potential::{guillemin, PotentialTag};
use crate::stability::extremal_affine;

/// `p(z) = z(1−z)` on [0,1]: groups are the two facets with d = 1.
fn interval_weight() -> WeightData {
    WeightData {
        p_sigma: vec![0.0],
        c_sigma: 1.0,
        groups: vec![
            WeightGroup {
                p: vec![1],
                c: 0.0,
                d: 1,
            },
            WeightGroup {
                p: vec![-1],
                c: 1.0,
                d: 1,
            },
        ],
        scal_sigma: 0.0,
        scal_j: vec![4.0, 4.0],
    }
}

fn setup(h: f64) -> (Arc<GridChart>, Theta) {
    let p = Arc::new(interval(0.0, 1.0));
    let theta = extremal_affine(&p).unwrap();
    let chart = Arc::new(make_grid(p, h).unwrap());
    (chart, theta)
}

#[test]
fn weight_values_on_the_interval() {
    let (chart, _) = setup(1.0 / 16.0);
    let p = &chart.polytope;
    let w = interval_weight();
    assert_eq!(weight(&w, p, &[0.5]).unwrap(), 0.25);
    assert_eq!(weight(&w, p, &[0.0]).unwrap(), 0.0);
    let trivial = WeightData::trivial(1);
    assert_eq!(weight(&trivial, p, &[0.3]).unwrap(), 1.0);
}

#[test]
fn weight_validation_rejects_mismatched_groups() {
    let (chart, _) = setup(1.0 / 16.0);
    let p = &chart.polytope;
    let mut w = interval_weight();
    // swap the group/facet pairing: group 0 no longer vanishes on facet 0
    w.groups.swap(0, 1);
    assert!(matches!(
        w.validate(p),
        Err(Error::NegativeAffineFactor { .. })
    ));
    let mut neg = WeightData::trivial(1);
    neg.c_sigma = -1.0;
    assert!(matches!(
        neg.validate(p),
        Err(Error::NegativeAffineFactor { .. })
    ));
}

#[test]
fn trivial_weight_reduces_to_the_abreu_operator() {
    let (chart, _) = setup(1.0 / 32.0);
    let u = SymplecticPotential::guillemin_with_bump(chart, 0.05);
    let w = WeightData::trivial(1);
    let rg = weighted_scalar_curvature(&u, &w).unwrap();
    let r = crate::geometry::abreu_scalar_curvature(&u).unwrap();
    for (a, b) in rg.values.iter().zip(&r.values) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn weighted_curvature_matches_the_closed_form_on_guillemin() {
    // p = z(1−z), Scal_j = 4, u = u_G: p·u^{11} = 2z²(1−z)² and
    // R_g = 4/z + 4/(1−z) − 2(2−12z+12z²)/(z(1−z)) ≡ 24: the fiber
    // curvature exactly cancels the facet singularities and the profile
    // is weighted-extremal.
    let (chart, _) = setup(1.0 / 64.0);
    let u = guillemin(chart.clone());
    let w = interval_weight();
    let rg = weighted_scalar_curvature(&u, &w).unwrap();
    for (j, &id) in chart.deep_nodes.iter().enumerate() {
        let z = chart.point(id)[0];
        // remaining error is the quartic-sampling term 4h²/p(z)
        let tol = 5.0 * chart.h * chart.h / (z * (1.0 - z)) + 1e-10;
        assert!(
            (rg.values[j] - 24.0).abs() < tol,
            "z={z}: R_g = {}",
            rg.values[j]
        );
    }
    let mid = chart
        .deep_nodes
        .iter()
        .position(|&id| (chart.point(id)[0] - 0.5).abs() < 1e-12)
        .unwrap();
    assert!((rg.values[mid] - 24.0).abs() < 5e-3, "R_g(1/2) = {}", rg.values[mid]);
}

#[test]
fn apriori_projection_makes_guillemin_stationary() {
    // Sp = 4 ⇒ (A,B) = (0,−24) exactly, so R⊥ = R_g − 24 ≡ 0 and the
    // weighted flow holds the Guillemin profile to truncation error.
    let (chart, _) = setup(1.0 / 64.0);
    let w = interval_weight();
    let proj = apriori_projection(&chart.polytope, &w, None).unwrap();
    assert_eq!(proj.a[0], 0.0);
    assert_eq!(proj.b, -24.0);

    let u = guillemin(chart.clone());
    let controls = FlowControls {
        tol: 0.0,
        t_max: f64::INFINITY,
        max_steps: 200,
        ..Default::default()
    };
    let (trace, ufinal, _) = weighted_flow(&u, &w, &controls).unwrap();
    assert_eq!(trace.accepted_steps, 200);
    let max_f = ufinal.f.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    assert!(max_f < 1e-5, "weighted stationarity drift {max_f:.3e}");
}

#[test]
fn constant_scal_shift_adds_through() {
    let (chart, _) = setup(1.0 / 32.0);
    let u = SymplecticPotential::guillemin_with_bump(chart, 0.03);
    let mut w = WeightData::trivial(1);
    w.scal_sigma = 2.0;
    let rg = weighted_scalar_curvature(&u, &w).unwrap();
    let r = crate::geometry::abreu_scalar_curvature(&u).unwrap();
    for (a, b) in rg.values.iter().zip(&r.values) {
        assert!((a - (b + 2.0)).abs() < 1e-12);
    }
}

#[test]
fn apriori_projection_is_minus_theta_for_the_trivial_weight() {
    let (chart, theta) = setup(1.0 / 32.0);
    let w = WeightData::trivial(1);
    let proj = apriori_projection(&chart.polytope, &w, None).unwrap();
    assert_eq!(proj.b, -theta.affine.constant);
    for (a, t) in proj.a.iter().zip(&theta.affine.gradient) {
        assert_eq!(*a, -t);
    }
}

#[test]
fn grid_projection_annihilates_affine_fields_and_is_idempotent() {
    let (chart, _) = setup(1.0 / 32.0);
    let p = &chart.polytope;
    let w = interval_weight();
    // constant field: projection must return exactly −R
    let r_const = FieldOnChart {
        chart: chart.clone(),
        label: "synthetic".into(),
        values: vec![3.0; chart.deep_nodes.len()],
    };
    let (proj, rperp) = extremal_projection(p, &w, &r_const).unwrap();
    assert!((proj.b + 3.0).abs() < 1e-10);
    assert!(proj.a[0].abs() < 1e-10);
    assert!(rperp.values.iter().all(|v| v.abs() < 1e-9));

    // affine field z: removed entirely
    let r_aff = FieldOnChart {
        chart: chart.clone(),
        label: "synthetic".into(),
        values: chart.deep_nodes.iter().map(|&id| chart.point(id)[0]).collect(),
    };
    let (_, rperp) = extremal_projection(p, &w, &r_aff).unwrap();
    assert!(rperp.values.iter().all(|v| v.abs() < 1e-9));

    // idempotence on a genuine curvature field
    let u = SymplecticPotential::guillemin_with_bump(chart.clone(), 0.05);
    let rg = weighted_scalar_curvature(&u, &w).unwrap();
    let (_, rperp) = extremal_projection(p, &w, &rg).unwrap();
    assert!(orthogonality_residual(p, &w, &rperp) < 1e-10);
    let (proj2, _) = extremal_projection(p, &w, &rperp).unwrap();
    assert!(proj2.b.abs() < 1e-10 && proj2.a[0].abs() < 1e-10);
}

#[test]
fn trivial_weighted_flow_matches_the_plain_flow_exactly() {
    let (chart, theta) = setup(1.0 / 32.0);
    let u0 = SymplecticPotential::guillemin_with_bump(chart.clone(), 0.05);
    let w = WeightData::trivial(1);
    let controls = FlowControls {
        tol: 0.0,
        t_max: f64::INFINITY,
        max_steps: 120,
        ..Default::default()
    };
    let (t_plain, _) = run(&u0, &theta, &controls).unwrap();
    let (t_w, _, proj) = weighted_flow(&u0, &w, &controls).unwrap();
    assert_eq!(proj.b, -4.0);
    assert_eq!(t_plain.rows.len(), t_w.rows.len());
    for (a, b) in t_plain.rows.iter().zip(&t_w.rows) {
        assert!((a.t - b.t).abs() < 1e-18);
        assert!((a.calabi_energy - b.calabi_energy).abs() <= 1e-8 * (1.0 + a.calabi_energy));
        assert!((a.mabuchi_rel - b.mabuchi_rel).abs() <= 1e-8 * (1.0 + a.mabuchi_rel.abs()));
        assert!((a.sup_r_minus_theta - b.sup_r_minus_theta).abs() <= 1e-8);
        assert!((a.dist_to_start - b.dist_to_start).abs() <= 1e-8);
        assert!((a.dist_to_target - b.dist_to_target).abs() <= 1e-8);
        assert!((a.max_f - b.max_f).abs() <= 1e-8);
        // weighted trace carries the extra columns
        assert_eq!(b.extra.len(), 3);
        assert!((b.extra[0] - b.calabi_energy).abs() <= 1e-12);
    }
}

#[test]
fn weighted_run_is_monotone_and_contracts_weighted_distance() {
    let (chart, _) = setup(1.0 / 64.0);
    let u0 = SymplecticPotential::guillemin_with_bump(chart.clone(), 0.04);
    let w = interval_weight();
    let controls = FlowControls {
        tol: 1e-2,
        t_max: 1.0,
        ..Default::default()
    };
    let (trace, ufinal, proj) = weighted_flow(&u0, &w, &controls).unwrap();
    assert!(trace.accepted_steps > 100);
    for win in trace.rows.windows(2) {
        assert!(win[1].calabi_energy <= win[0].calabi_energy * (1.0 + 1e-12));
        assert!(win[1].dist_to_target <= win[0].dist_to_target + 1e-10);
    }
    // the per-step 5%-identity tally is h-limited for weights that vanish
    // on facets (rim defect ~O(h^1.5); see
    // weighted_gradient_identity_pointwise, which carries the invariant at
    // h = 1/256); here only the counters must be alive
    assert!(trace.identity_checked_steps > 0);

    // the a-priori projection keeps the flow's R⊥ grid-orthogonal to
    // affine functions up to discretization
    let rg = weighted_scalar_curvature(&ufinal, &w).unwrap();
    let rperp = FieldOnChart {
        chart: chart.clone(),
        label: "rperp".into(),
        values: rg
            .values
            .iter()
            .zip(chart.deep_nodes.iter())
            .map(|(r, &id)| r + proj.eval(chart.point(id)))
            .collect(),
    };
    let res = orthogonality_residual(&chart.polytope, &w, &rperp);
    assert!(res < 5e-3, "grid residual of the a-priori projection: {res}");
}

#[test]
fn interior_bound_probe_conventions() {
    let (chart, _) = setup(1.0 / 32.0);
    let w = interval_weight();
    // u ≡ c: ∫u²p = c²∫p = c²/6, max|u| = |c|, max|Du| = 0
    let c = 0.7;
    let u = SymplecticPotential::pure_f(chart.clone(), move |_| c);
    let rep = interior_bound_probe(&u, &w, 0.25).unwrap();
    assert!((rep.weighted_l2 - c * c / 6.0).abs() < 1e-4);
    assert!((rep.max_abs - c).abs() < 1e-12);
    assert!(rep.max_grad < 1e-12);
    assert!(rep.nodes_in_region > 0);

    // guillemin at ε = 1/4: finite values, evaluated directly
    let ug = guillemin(chart.clone());
    let rep = interior_bound_probe(&ug, &w, 0.25).unwrap();
    assert!(rep.weighted_l2.is_finite() && rep.max_abs.is_finite() && rep.max_grad.is_finite());
    // max over [1/4, 3/4] of |u_G| sits at the center, |u_G(1/2)| = ln2/2
    let center = ug.evaluate(&[0.5]).unwrap().abs();
    assert!((rep.max_abs - center).abs() < 1e-12);

    assert!(matches!(
        interior_bound_probe(&ug, &w, 0.05),
        Err(Error::InvalidInput(_))
    ));
}

#[test]
fn weight_file_round_trip() {
    let w = interval_weight();
    let text = weight_to_json(&w);
    let back = parse_weight(&text).unwrap();
    assert_eq!(back.groups.len(), 2);
    assert_eq!(back.groups[0].d, 1);
    assert!(parse_weight("{\"bogus\":1}").is_err());
}

#[test]
fn weighted_gradient_identity_pointwise() {
    // dM_w along the flow direction vs −∫(R⊥)²p dμ, measured directly on
    // the discrete functionals at one state. The defect is rim-dominated
    // and shrinks with h (≈19%, 5.4%, 2.4% at h = 1/64, 1/128, 1/256 for
    // this weight); the spec's 5% band needs h ≥ 1/256 here.
    let (chart, _) = setup(1.0 / 256.0);
    let u0 = SymplecticPotential::guillemin_with_bump(chart.clone(), 0.04);
    let w = interval_weight();
    let projection = apriori_projection(&chart.polytope, &w, Some(&chart)).unwrap();
    let mut model = WeightedDrift::new(&chart, &w, projection);
    let mut f = u0.f.clone();
    chart.close_shallow(&mut f);
    let nd = chart.deep_nodes.len();
    let num = chart.num_nodes();
    let mut drift = vec![0.0; nd];
    let mut dets = vec![0.0; num];
    model.drift(&chart, &f, true, &mut drift, &mut dets).unwrap();
    let mut fdot = vec![0.0; num];
    for (j, &id) in chart.deep_nodes.iter().enumerate() {
        fdot[id as usize] = drift[j];
    }
    chart.close_shallow(&mut fdot);

    let m_of = |fv: &[f64], model: &mut WeightedDrift| -> f64 {
        let mut d = vec![0.0; nd];
        let mut dd = vec![1.0; num];
        model.drift(&chart, fv, true, &mut d, &mut dd).unwrap();
        let mut logdet = 0.0;
        for k in 0..num {
            let wv = model.logdet_weight()[k];
            if wv != 0.0 {
                logdet += wv * dd[k].ln();
            }
        }
        let mut lin = 0.0;
        for k in 0..num {
            lin += model.lin_weight()[k] * fv[k];
        }
        -logdet + lin
    };
    // directional derivative along the flow direction (eps ∝ h² keeps the
    // log-det nonlinearity out of the measurement)
    let eps = 1e-3 * chart.h * chart.h;
    let mut fp = f.clone();
    let mut fm = f.clone();
    for k in 0..num {
        fp[k] += eps * fdot[k];
        fm[k] -= eps * fdot[k];
    }
    let dm = (m_of(&fp, &mut model) - m_of(&fm, &mut model)) / (2.0 * eps);
    let mut scratch = vec![0.0; num];
    let e = closed_drift_energy(&chart, model.quad_weight(), &drift, &mut scratch);
    let rel = (dm + e).abs() / e;
    assert!(rel < 0.05, "weighted gradient identity defect {rel:.3e}");
}


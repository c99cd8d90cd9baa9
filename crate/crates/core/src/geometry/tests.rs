use super::*;
use crate::polytope::chart::make_grid;
use crate::polytope::{interval, standard_simplex, unit_square, DelzantPolytope};
use crate::potential::{guillemin, AffineFunction, SymplecticPotential};
use num_complex::Complex64;

fn chart_of(p: DelzantPolytope, h: f64) -> Arc<GridChart> {
    Arc::new(make_grid(Arc::new(p), h).unwrap())
}

fn node_at(chart: &GridChart, x: &[f64]) -> u32 {
    (0..chart.num_nodes() as u32)
        .find(|&i| {
            chart
                .point(i)
                .iter()
                .zip(x)
                .all(|(a, b)| (a - b).abs() < 1e-12)
        })
        .expect("node present")
}

#[test]
fn hessian_of_guillemin_interval_at_midpoint() {
    let chart = chart_of(interval(0.0, 1.0), 1.0 / 16.0);
    let u = guillemin(chart.clone());
    let hess = hessian(&u).unwrap();
    let inv = inverse_hessian(&u).unwrap();
    let id = node_at(&chart, &[0.5]);
    assert!((hess.at_node(id).unwrap()[0] - 2.0).abs() < 1e-12);
    assert!((inv.at_node(id).unwrap()[0] - 0.5).abs() < 1e-12);
}

#[test]
fn quadratic_override_has_unit_hessian_and_flat_curvature() {
    let chart = chart_of(interval(0.0, 1.0), 1.0 / 16.0);
    let u = SymplecticPotential::pure_f(chart, |x| 0.5 * x[0] * x[0]);
    let hess = hessian(&u).unwrap();
    assert!(hess.values.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    let r = abreu_scalar_curvature(&u).unwrap();
    assert!(r.sup_abs() < 1e-10, "R on quadratic: {}", r.sup_abs());
    let rm = riemannian_norm(&u).unwrap();
    assert!(rm.sup_abs() < 1e-10);
}

#[test]
fn hessian_of_guillemin_square_at_center() {
    let chart = chart_of(unit_square(), 1.0 / 8.0);
    let u = guillemin(chart.clone());
    let hess = hessian(&u).unwrap();
    let id = node_at(&chart, &[0.5, 0.5]);
    let m = hess.at_node(id).unwrap();
    assert!((m[0] - 2.0).abs() < 1e-12);
    assert!((m[3] - 2.0).abs() < 1e-12);
    assert!(m[1].abs() < 1e-12 && m[2].abs() < 1e-12);
}

#[test]
fn abreu_operator_is_exact_on_the_interval_fixed_point() {
    // 1/u″ = 2x(1−x) is quadratic, so centered differences are exact and
    // the only residue is round-off.
    for h in [1.0 / 32.0, 1.0 / 64.0] {
        let chart = chart_of(interval(0.0, 1.0), h);
        let u = guillemin(chart);
        let r = abreu_scalar_curvature(&u).unwrap();
        let err = r.values.iter().map(|v| (v - 4.0).abs()).fold(0.0, f64::max);
        assert!(err < 1e-10, "h={h}: err={err:.3e}");
        let rm = riemannian_norm(&u).unwrap();
        let err = rm.values.iter().map(|v| (v - 4.0).abs()).fold(0.0, f64::max);
        assert!(err < 1e-10, "|Rm| err {err:.3e}");
    }
}

#[test]
fn simplex_curvature_matches_the_closed_form_inverse_hessian() {
    // Closed form for the standard simplex: u^{ij} = 2 x_i (δ_ij − x_j).
    // Validate it against the Hessian at rational interior points, then
    // pin the curvature constants it implies: R ≡ 12, |Rm| ≡ √48.
    let pts = [
        [1.0 / 3.0, 1.0 / 3.0],
        [1.0 / 4.0, 1.0 / 2.0],
        [1.0 / 5.0, 2.0 / 5.0],
        [3.0 / 8.0, 1.0 / 8.0],
        [1.0 / 2.0, 1.0 / 4.0],
        [1.0 / 8.0, 3.0 / 4.0],
        [2.0 / 5.0, 1.0 / 5.0],
        [1.0 / 6.0, 1.0 / 6.0],
        [5.0 / 12.0, 5.0 / 12.0],
        [1.0 / 10.0, 1.0 / 2.0],
    ];
    for xy in pts {
        let (x, y) = (xy[0], xy[1]);
        let l3 = 1.0 - x - y;
        let hess = [
            0.5 * (1.0 / x + 1.0 / l3),
            0.5 / l3,
            0.5 / l3,
            0.5 * (1.0 / y + 1.0 / l3),
        ];
        let ginv = [
            2.0 * x * (1.0 - x),
            -2.0 * x * y,
            -2.0 * x * y,
            2.0 * y * (1.0 - y),
        ];
        // H·G = I
        for r in 0..2 {
            for c in 0..2 {
                let mut acc = 0.0f64;
                for k in 0..2 {
                    acc += hess[r * 2 + k] * ginv[k * 2 + c];
                }
                let want = if r == c { 1.0 } else { 0.0 };
                assert!((acc - want).abs() < 1e-12, "H·G mismatch at {xy:?}");
            }
        }
    }
    // entries of u^{ij} are quadratic; all second derivatives are constant:
    // T^{11}_{11} = T^{22}_{22} = −4, T^{12}_{12} = −2 ⇒ R = 12, |Rm|² = 48
    let chart = chart_of(standard_simplex(2), 1.0 / 24.0);
    let u = guillemin(chart);
    let r = abreu_scalar_curvature(&u).unwrap();
    let err = r.values.iter().map(|v| (v - 12.0).abs()).fold(0.0, f64::max);
    assert!(err < 1e-8, "R on simplex: err {err:.3e}");
    let rm = riemannian_norm(&u).unwrap();
    let want = 48f64.sqrt();
    let err = rm.values.iter().map(|v| (v - want).abs()).fold(0.0, f64::max);
    assert!(err < 1e-8, "|Rm| on simplex: err {err:.3e}");
}

#[test]
fn curvature_is_affine_invariant() {
    let chart = chart_of(standard_simplex(2), 1.0 / 16.0);
    let u = SymplecticPotential::guillemin_with_bump(chart, 0.1);
    let shifted = u.add_affine_scaled(
        &AffineFunction {
            gradient: vec![1.7, -0.4],
            constant: 3.0,
        },
        1.0,
    );
    // round-off in the affine samples is amplified by the two second
    // differences (∝ eps·|a|/h⁴ ≈ 1e-10 at this spacing); the
    // discretization itself is exactly gauge-invariant
    let tol = 2e-10;
    let (r1, r2) = (
        abreu_scalar_curvature(&u).unwrap(),
        abreu_scalar_curvature(&shifted).unwrap(),
    );
    for (a, b) in r1.values.iter().zip(&r2.values) {
        assert!((a - b).abs() < tol, "R gauge drift {:.3e}", (a - b).abs());
    }
    let (m1, m2) = (riemannian_norm(&u).unwrap(), riemannian_norm(&shifted).unwrap());
    for (a, b) in m1.values.iter().zip(&m2.values) {
        assert!((a - b).abs() < tol);
    }
    let (h1, h2) = (hessian(&u).unwrap(), hessian(&shifted).unwrap());
    for (a, b) in h1.values.iter().zip(&h2.values) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn hessian_is_symmetric_and_rm_nonnegative() {
    let chart = chart_of(unit_square(), 1.0 / 12.0);
    let u = SymplecticPotential::from_fn(chart, crate::potential::PotentialTag::Perturbed, |x| {
        0.08 * (x[0] * (1.0 - x[0]) * x[1] * (1.0 - x[1])).powi(2) + 0.02 * x[0] * x[1]
    });
    let hess = hessian(&u).unwrap();
    let n = 2;
    for m in hess.values.chunks(n * n) {
        assert!((m[1] - m[2]).abs() < 1e-13);
    }
    let rm = riemannian_norm(&u).unwrap();
    assert!(rm.values.iter().all(|&v| v >= 0.0));
}

/// Closed-form R for `u_G + amp·x²(1−x)²` on [0,1], differentiated by
/// complex step (first derivative) and Richardson (second): independent of
/// every grid code path.
fn interval_bump_r_oracle(x: f64, amp: f64) -> f64 {
    let w = |z: Complex64| -> Complex64 {
        let one = Complex64::new(1.0, 0.0);
        let upp = one / (2.0 * z * (one - z)) + amp * (2.0 - 12.0 * z + 12.0 * z * z);
        one / upp
    };
    let step = 1e-20;
    let wp = |x: f64| -> f64 { w(Complex64::new(x, step)).im / step };
    let d = 1e-5;
    let w2 = (wp(x + d) - wp(x - d)) / (2.0 * d);
    -w2
}

#[test]
fn abreu_operator_converges_at_second_order_on_perturbed_data() {
    let amp = 0.05;
    let mut errs = Vec::new();
    for h in [1.0 / 64.0, 1.0 / 128.0, 1.0 / 256.0] {
        let chart = chart_of(interval(0.0, 1.0), h);
        let u = SymplecticPotential::guillemin_with_bump(chart.clone(), amp);
        let r = abreu_scalar_curvature(&u).unwrap();
        let mut err = 0.0f64;
        for (j, &id) in chart.deep_nodes.iter().enumerate() {
            let x = chart.point(id)[0];
            err = err.max((r.values[j] - interval_bump_r_oracle(x, amp)).abs());
        }
        errs.push(err);
    }
    let order1 = (errs[0] / errs[1]).log2();
    let order2 = (errs[1] / errs[2]).log2();
    assert!(
        order1 > 1.8 && order2 > 1.8,
        "orders {order1:.2}, {order2:.2} from errors {errs:?}"
    );
}

#[test]
fn segment_profile_on_the_interval_matches_the_edge_asymptotics() {
    let chart = chart_of(interval(0.0, 1.0), 1.0 / 64.0);
    let u = guillemin(chart);
    let prof = segment_profile(&u, &[0.0], &[1.0], 65).unwrap();
    assert_eq!(prof.w_start, 0.0);
    assert!((prof.w1_start - 2.0).abs() < 1e-9, "slope {}", prof.w1_start);
    assert!((prof.w1_end + 2.0).abs() < 1e-9);
    for &w2 in &prof.w2 {
        assert!((w2 + 4.0).abs() < 1e-9, "w2 {w2}");
    }
    // (1/V″)″ = −4 ≤ |Rm| = 4 everywhere
    assert!(prof.chord_excess <= -(4.0 + 4.0) + 1e-6);
}

#[test]
fn segment_profile_quadratic_interior_chord() {
    let chart = chart_of(interval(0.0, 1.0), 1.0 / 32.0);
    let u = SymplecticPotential::pure_f(chart, |x| 0.5 * x[0] * x[0]);
    let prof = segment_profile(&u, &[0.25], &[0.75], 33).unwrap();
    for &w2 in &prof.w2 {
        assert!(w2.abs() < 1e-9);
    }
    assert!(prof.chord_excess.abs() < 1e-9);
}

#[test]
fn segment_profile_along_simplex_edge_respects_the_chord_bound() {
    let chart = chart_of(standard_simplex(2), 1.0 / 24.0);
    let u = guillemin(chart);
    let prof = segment_profile(&u, &[0.0, 0.0], &[1.0, 0.0], 49).unwrap();
    // V along the edge y = 0 is the 1-D Guillemin profile: w2 ≡ −4
    for &w2 in &prof.w2 {
        assert!((w2 + 4.0).abs() < 1e-8, "w2 {w2}");
    }
    assert!(prof.chord_excess <= 1e-6, "excess {}", prof.chord_excess);
}

#[test]
fn segment_leaving_the_polytope_is_rejected() {
    let chart = chart_of(interval(0.0, 1.0), 1.0 / 16.0);
    let u = guillemin(chart);
    assert!(matches!(
        segment_profile(&u, &[0.0], &[1.2], 17),
        Err(Error::SegmentLeavesPolytope { .. })
    ));
}

#[test]
fn singular_hessian_is_reported() {
    let chart = chart_of(interval(0.0, 1.0), 1.0 / 16.0);
    // strongly concave correction destroys convexity mid-interval
    let u = SymplecticPotential::from_fn(chart, crate::potential::PotentialTag::Perturbed, |x| {
        -40.0 * (x[0] - 0.5).powi(2)
    });
    assert!(matches!(
        hessian(&u),
        Err(Error::SingularHessian { .. })
    ));
}

#[test]
fn field_dump_writes_rows(){
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.csv");
    let chart = chart_of(interval(0.0, 1.0), 1.0 / 8.0);
    let u = guillemin(chart);
    let r = abreu_scalar_curvature(&u).unwrap();
    r.dump(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("# field=abreu_scalar_curvature"));
    assert_eq!(text.lines().count(), 1 + r.values.len());
}

//! Small dense linear algebra for dimensions 1..=4, plus exact rational
//! elimination for the moment systems. Matrices are row-major `Vec<f64>`
//! slices of length n*n; nothing here is worth a dependency.

use num::BigRational;
use num::Zero;

/// Solve `A x = b` in place for a small symmetric positive definite system.
/// Returns `None` when a pivot degenerates.
pub fn solve_spd(a: &[f64], b: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut m = a.to_vec();
    let mut x = b.to_vec();
    for col in 0..n {
        // partial pivot
        let mut piv = col;
        for r in col + 1..n {
            if m[r * n + col].abs() > m[piv * n + col].abs() {
                piv = r;
            }
        }
        if m[piv * n + col].abs() < 1e-300 {
            return None;
        }
        if piv != col {
            for c in 0..n {
                m.swap(col * n + c, piv * n + c);
            }
            x.swap(col, piv);
        }
        let d = m[col * n + col];
        for r in col + 1..n {
            let factor = m[r * n + col] / d;
            if factor == 0.0 {
                continue;
            }
            for c in col..n {
                m[r * n + c] -= factor * m[col * n + c];
            }
            x[r] -= factor * x[col];
        }
    }
    for col in (0..n).rev() {
        let mut s = x[col];
        for c in col + 1..n {
            s -= m[col * n + c] * x[c];
        }
        x[col] = s / m[col * n + col];
    }
    Some(x)
}

/// Invert a small symmetric matrix. Dimensions 1 and 2 take the closed
/// form; larger ones go through column solves.
pub fn invert_sym(a: &[f64], n: usize, out: &mut [f64]) -> bool {
    match n {
        1 => {
            if a[0] == 0.0 {
                return false;
            }
            out[0] = 1.0 / a[0];
            true
        }
        2 => {
            let det = a[0] * a[3] - a[1] * a[2];
            if det == 0.0 {
                return false;
            }
            let inv = 1.0 / det;
            out[0] = a[3] * inv;
            out[1] = -a[1] * inv;
            out[2] = -a[2] * inv;
            out[3] = a[0] * inv;
            true
        }
        _ => {
            let mut e = vec![0.0; n];
            for col in 0..n {
                e.iter_mut().for_each(|v| *v = 0.0);
                e[col] = 1.0;
                match solve_spd(a, &e, n) {
                    Some(x) => {
                        for r in 0..n {
                            out[r * n + col] = x[r];
                        }
                    }
                    None => return false,
                }
            }
            // symmetrize against elimination round-off
            for r in 0..n {
                for c in r + 1..n {
                    let s = 0.5 * (out[r * n + c] + out[c * n + r]);
                    out[r * n + c] = s;
                    out[c * n + r] = s;
                }
            }
            true
        }
    }
}

pub fn det_sym(a: &[f64], n: usize) -> f64 {
    match n {
        1 => a[0],
        2 => a[0] * a[3] - a[1] * a[2],
        3 => {
            a[0] * (a[4] * a[8] - a[5] * a[7]) - a[1] * (a[3] * a[8] - a[5] * a[6])
                + a[2] * (a[3] * a[7] - a[4] * a[6])
        }
        _ => {
            let mut m = a.to_vec();
            let mut det = 1.0;
            for col in 0..n {
                let mut piv = col;
                for r in col + 1..n {
                    if m[r * n + col].abs() > m[piv * n + col].abs() {
                        piv = r;
                    }
                }
                if m[piv * n + col] == 0.0 {
                    return 0.0;
                }
                if piv != col {
                    for c in 0..n {
                        m.swap(col * n + c, piv * n + c);
                    }
                    det = -det;
                }
                det *= m[col * n + col];
                for r in col + 1..n {
                    let factor = m[r * n + col] / m[col * n + col];
                    for c in col..n {
                        m[r * n + c] -= factor * m[col * n + c];
                    }
                }
            }
            det
        }
    }
}

/// Smallest eigenvalue of a small symmetric matrix. Closed form up to 2x2,
/// cyclic Jacobi beyond.
pub fn min_eig_sym(a: &[f64], n: usize) -> f64 {
    match n {
        1 => a[0],
        2 => {
            let tr = a[0] + a[3];
            let det = a[0] * a[3] - a[1] * a[2];
            let disc = (0.25 * tr * tr - det).max(0.0).sqrt();
            0.5 * tr - disc
        }
        _ => {
            let mut m = a.to_vec();
            for _sweep in 0..32 {
                let mut off = 0.0;
                for r in 0..n {
                    for c in r + 1..n {
                        off += m[r * n + c] * m[r * n + c];
                    }
                }
                if off < 1e-28 {
                    break;
                }
                for p in 0..n {
                    for q in p + 1..n {
                        let apq = m[p * n + q];
                        if apq.abs() < 1e-300 {
                            continue;
                        }
                        let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                        let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                        let c = 1.0 / (t * t + 1.0).sqrt();
                        let s = t * c;
                        for k in 0..n {
                            let akp = m[k * n + p];
                            let akq = m[k * n + q];
                            m[k * n + p] = c * akp - s * akq;
                            m[k * n + q] = s * akp + c * akq;
                        }
                        for k in 0..n {
                            let apk = m[p * n + k];
                            let aqk = m[q * n + k];
                            m[p * n + k] = c * apk - s * aqk;
                            m[q * n + k] = s * apk + c * aqk;
                        }
                    }
                }
            }
            (0..n).map(|i| m[i * n + i]).fold(f64::INFINITY, f64::min)
        }
    }
}

/// Exact Gaussian elimination over the rationals. Returns `None` for a
/// singular system.
pub fn solve_rational(a: &[Vec<BigRational>], b: &[BigRational]) -> Option<Vec<BigRational>> {
    let n = b.len();
    let mut m: Vec<Vec<BigRational>> = a.to_vec();
    let mut rhs = b.to_vec();
    for col in 0..n {
        let piv = (col..n).find(|&r| !m[r][col].is_zero())?;
        m.swap(col, piv);
        rhs.swap(col, piv);
        for r in col + 1..n {
            if m[r][col].is_zero() {
                continue;
            }
            let factor = &m[r][col] / &m[col][col];
            for c in col..n {
                let t = &factor * &m[col][c];
                m[r][c] = &m[r][c] - t;
            }
            let t = &factor * &rhs[col];
            rhs[r] = &rhs[r] - t;
        }
    }
    let mut x = vec![BigRational::zero(); n];
    for col in (0..n).rev() {
        let mut s = rhs[col].clone();
        for c in col + 1..n {
            let t = &m[col][c] * &x[c];
            s = s - t;
        }
        x[col] = s / m[col][col].clone();
    }
    Some(x)
}

/// Rank of a rational matrix (rows of equal length), by elimination.
pub fn rational_rank(rows: &[Vec<BigRational>]) -> usize {
    if rows.is_empty() {
        return 0;
    }
    let ncols = rows[0].len();
    let mut m: Vec<Vec<BigRational>> = rows.to_vec();
    let mut rank = 0;
    for col in 0..ncols {
        let Some(piv) = (rank..m.len()).find(|&r| !m[r][col].is_zero()) else {
            continue;
        };
        m.swap(rank, piv);
        for r in 0..m.len() {
            if r != rank && !m[r][col].is_zero() {
                let factor = &m[r][col] / &m[rank][col];
                for c in col..ncols {
                    let t = &factor * &m[rank][c];
                    m[r][c] = &m[r][c] - t;
                }
            }
        }
        rank += 1;
        if rank == m.len() {
            break;
        }
    }
    rank
}

#[cfg(test)]
mod tests {
    use super::*;
    use num::{BigInt, One};

    fn rat(n: i64, d: i64) -> BigRational {
        BigRational::new(BigInt::from(n), BigInt::from(d))
    }

    #[test]
    fn invert_2x2_matches_closed_form() {
        let a = [3.0, 1.5, 1.5, 3.0];
        let mut inv = [0.0; 4];
        assert!(invert_sym(&a, 2, &mut inv));
        assert!((inv[0] - 4.0 / 9.0).abs() < 1e-14);
        assert!((inv[1] + 2.0 / 9.0).abs() < 1e-14);
    }

    #[test]
    fn min_eig_2x2() {
        let a = [2.0, 1.0, 1.0, 2.0];
        assert!((min_eig_sym(&a, 2) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn min_eig_3x3_diag() {
        let a = [5.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 7.0];
        assert!((min_eig_sym(&a, 3) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn rational_solve_exact() {
        let a = vec![
            vec![BigRational::one(), rat(1, 2)],
            vec![rat(1, 2), rat(1, 3)],
        ];
        let b = vec![rat(4, 1), rat(2, 1)];
        let x = solve_rational(&a, &b).unwrap();
        assert_eq!(x[0], rat(4, 1));
        assert_eq!(x[1], rat(0, 1));
    }

    #[test]
    fn rank_detects_dependence() {
        let rows = vec![
            vec![rat(1, 1), rat(2, 1)],
            vec![rat(2, 1), rat(4, 1)],
            vec![rat(0, 1), rat(1, 1)],
        ];
        assert_eq!(rational_rank(&rows), 2);
    }
}

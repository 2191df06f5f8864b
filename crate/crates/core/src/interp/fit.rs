//! Per-scheme coefficient fits on general (strictly increasing) knot times.

use super::{CubicPiece, InterpError, Result};

fn check_points(ts: &[f64], xs: &[f64]) -> Result<()> {
    if ts.len() != xs.len() {
        return Err(InterpError::Length {
            times: ts.len(),
            values: xs.len(),
        });
    }
    if ts.is_empty() {
        return Err(InterpError::Empty);
    }
    if ts.windows(2).any(|w| w[1] <= w[0]) {
        return Err(InterpError::UnsortedKnots);
    }
    Ok(())
}

/// Straight lines between consecutive points.
pub fn fit_linear(ts: &[f64], xs: &[f64]) -> Result<Vec<CubicPiece>> {
    check_points(ts, xs)?;
    Ok((0..ts.len().saturating_sub(1))
        .map(|i| {
            let h = ts[i + 1] - ts[i];
            CubicPiece::new(0.0, 0.0, (xs[i + 1] - xs[i]) / h, xs[i])
        })
        .collect())
}

/// Cubic with value and slope prescribed at both ends of `[0, h]`.
fn hermite_piece(x0: f64, x1: f64, m0: f64, m1: f64, h: f64) -> CubicPiece {
    let delta = x1 - x0;
    let a = (m0 + m1) / (h * h) - 2.0 * delta / (h * h * h);
    let b = 3.0 * delta / (h * h) - (2.0 * m0 + m1) / h;
    CubicPiece::new(a, b, m0, x0)
}

/// Hermite cubic with backward-difference slopes (`m_0 = m_1`).
///
/// Each piece matches value and slope at both of its endpoints, so the
/// result is C¹ and piece `i` depends only on points `i-1..=i+1`.
pub fn fit_hermite(ts: &[f64], xs: &[f64]) -> Result<Vec<CubicPiece>> {
    check_points(ts, xs)?;
    let n = ts.len();
    if n < 2 {
        return Ok(Vec::new());
    }
    let mut m = vec![0.0; n];
    for i in 1..n {
        m[i] = (xs[i] - xs[i - 1]) / (ts[i] - ts[i - 1]);
    }
    m[0] = m[1];
    Ok((0..n - 1)
        .map(|i| hermite_piece(xs[i], xs[i + 1], m[i], m[i + 1], ts[i + 1] - ts[i]))
        .collect())
}

/// Hermite cubic with zero slope at every knot: monotone data gives a
/// monotone signal.
pub fn fit_monotonic(ts: &[f64], xs: &[f64]) -> Result<Vec<CubicPiece>> {
    check_points(ts, xs)?;
    Ok((0..ts.len().saturating_sub(1))
        .map(|i| {
            let h = ts[i + 1] - ts[i];
            let delta = xs[i + 1] - xs[i];
            CubicPiece::new(-2.0 * delta / (h * h * h), 3.0 * delta / (h * h), 0.0, xs[i])
        })
        .collect())
}

/// Thomas algorithm for a tridiagonal system.
///
/// `sub[i]` multiplies `x[i]` in row `i + 1`; `sup[i]` multiplies `x[i + 1]`
/// in row `i`.
pub fn tridiagonal_solve(sub: &[f64], diag: &[f64], sup: &[f64], rhs: &[f64]) -> Result<Vec<f64>> {
    let n = diag.len();
    if rhs.len() != n || sub.len() + 1 != n.max(1) || sup.len() + 1 != n.max(1) {
        return Err(InterpError::Length {
            times: n,
            values: rhs.len(),
        });
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    if diag[0] == 0.0 {
        return Err(InterpError::Singular(0));
    }
    if n > 1 {
        c[0] = sup[0] / diag[0];
    }
    d[0] = rhs[0] / diag[0];
    for i in 1..n {
        let denom = diag[i] - sub[i - 1] * c[i - 1];
        if denom == 0.0 {
            return Err(InterpError::Singular(i));
        }
        if i < n - 1 {
            c[i] = sup[i] / denom;
        }
        d[i] = (rhs[i] - sub[i - 1] * d[i - 1]) / denom;
    }
    let mut x = d;
    for i in (0..n - 1).rev() {
        x[i] -= c[i] * x[i + 1];
    }
    Ok(x)
}

/// Second derivatives `k` of the natural cubic spline (`k_0 = k_{n-1} = 0`).
pub fn natural_second_derivatives(ts: &[f64], xs: &[f64]) -> Result<Vec<f64>> {
    check_points(ts, xs)?;
    let n = ts.len();
    let mut k = vec![0.0; n];
    if n < 3 {
        return Ok(k);
    }
    let h: Vec<f64> = ts.windows(2).map(|w| w[1] - w[0]).collect();
    let slope: Vec<f64> = (0..n - 1).map(|i| (xs[i + 1] - xs[i]) / h[i]).collect();
    let m = n - 2;
    let diag: Vec<f64> = (1..n - 1).map(|i| 2.0 * (h[i - 1] + h[i])).collect();
    let off: Vec<f64> = (1..m).map(|i| h[i]).collect();
    let rhs: Vec<f64> = (1..n - 1).map(|i| 6.0 * (slope[i] - slope[i - 1])).collect();
    let inner = tridiagonal_solve(&off, &diag, &off, &rhs)?;
    k[1..n - 1].copy_from_slice(&inner);
    Ok(k)
}

/// Natural cubic spline: C² everywhere, zero curvature at both ends.
pub fn fit_natural(ts: &[f64], xs: &[f64]) -> Result<Vec<CubicPiece>> {
    check_points(ts, xs)?;
    let n = ts.len();
    if n < 3 {
        return fit_linear(ts, xs);
    }
    let k = natural_second_derivatives(ts, xs)?;
    Ok((0..n - 1)
        .map(|i| {
            let h = ts[i + 1] - ts[i];
            let a = (k[i + 1] - k[i]) / (6.0 * h);
            let b = k[i] / 2.0;
            let c = (xs[i + 1] - xs[i]) / h - h * (2.0 * k[i] + k[i + 1]) / 6.0;
            CubicPiece::new(a, b, c, xs[i])
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_slope_two() {
        let p = fit_linear(&[0.0, 1.0], &[0.0, 2.0]).unwrap();
        assert_eq!(p, vec![CubicPiece::new(0.0, 0.0, 2.0, 0.0)]);
    }

    #[test]
    fn linear_midpoint_of_gap() {
        // x0 = 0 at t0 = 0, x2 = 4 at t2 = 2, read at t = 1
        let p = fit_linear(&[0.0, 2.0], &[0.0, 4.0]).unwrap();
        assert_eq!(p[0].eval(1.0), 2.0);
    }

    #[test]
    fn constant_series_all_schemes() {
        let ts = [0.0, 1.0, 2.0];
        let xs = [5.0, 5.0, 5.0];
        for f in [fit_linear, fit_hermite, fit_monotonic, fit_natural] {
            for p in f(&ts, &xs).unwrap() {
                assert_eq!((p.a, p.b, p.c, p.d), (0.0, 0.0, 0.0, 5.0));
            }
        }
    }

    #[test]
    fn empty_is_error() {
        assert!(matches!(fit_linear(&[], &[]), Err(InterpError::Empty)));
    }

    #[test]
    fn hermite_collinear_reduces_to_line() {
        let p = fit_hermite(&[0.0, 1.0, 2.0], &[0.0, 1.0, 2.0]).unwrap();
        for q in p {
            assert!(q.a.abs() < 1e-15 && q.b.abs() < 1e-15);
            assert_eq!(q.c, 1.0);
        }
    }

    /// Solves the 4x4 endpoint-condition system for one piece by Gaussian
    /// elimination, independent of the closed form above.
    fn hermite_oracle(x0: f64, x1: f64, m0: f64, m1: f64, h: f64) -> [f64; 4] {
        // unknowns (a, b, c, d)
        let mut m = [
            [0.0, 0.0, 0.0, 1.0, x0],
            [h * h * h, h * h, h, 1.0, x1],
            [0.0, 0.0, 1.0, 0.0, m0],
            [3.0 * h * h, 2.0 * h, 1.0, 0.0, m1],
        ];
        for col in 0..4 {
            let piv = (col..4)
                .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
                .unwrap();
            m.swap(col, piv);
            for r in 0..4 {
                if r != col {
                    let f = m[r][col] / m[col][col];
                    for c in col..5 {
                        m[r][c] -= f * m[col][c];
                    }
                }
            }
        }
        [0, 1, 2, 3].map(|i| m[i][4] / m[i][i])
    }

    #[test]
    fn hermite_piece_matches_linear_system() {
        let p = fit_hermite(&[0.0, 1.0, 2.0], &[0.0, 1.0, 0.0]).unwrap();
        // slopes: m1 = 1, m2 = -1; piece [1, 2]
        let o = hermite_oracle(1.0, 0.0, 1.0, -1.0, 1.0);
        let q = p[1];
        for (got, want) in [q.a, q.b, q.c, q.d].iter().zip(o) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
        assert!((q.deriv(0.0) - 1.0).abs() < 1e-12);
        assert!((q.deriv(1.0) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn hermite_first_slope_rule() {
        let p = fit_hermite(&[0.0, 1.0, 3.0], &[1.0, 3.0, 2.0]).unwrap();
        assert!((p[0].deriv(0.0) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn monotonic_unit_step() {
        let p = fit_monotonic(&[0.0, 1.0], &[0.0, 1.0]).unwrap();
        assert_eq!(p[0], CubicPiece::new(-2.0, 3.0, 0.0, 0.0));
        assert!((p[0].eval(0.5) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn monotonic_increasing_integers() {
        let ts: Vec<f64> = (0..5).map(f64::from).collect();
        let p = fit_monotonic(&ts, &ts).unwrap();
        for q in &p {
            for j in 0..=1000 {
                assert!(q.deriv(j as f64 * 1e-3) >= 0.0);
            }
        }
    }

    #[test]
    fn tridiagonal_cases() {
        assert_eq!(
            tridiagonal_solve(&[0.0, 0.0], &[1.0, 1.0, 1.0], &[0.0, 0.0], &[3.0, -1.0, 2.0])
                .unwrap(),
            vec![3.0, -1.0, 2.0]
        );
        let x = tridiagonal_solve(&[1.0, 1.0], &[2.0, 2.0, 2.0], &[1.0, 1.0], &[1.0, 0.0, 1.0])
            .unwrap();
        // dense elimination of [[2,1,0],[1,2,1],[0,1,2]] x = (1,0,1) gives (1,-1,1)
        for (g, w) in x.iter().zip([1.0, -1.0, 1.0]) {
            assert!((g - w).abs() < 1e-12);
        }
        assert_eq!(tridiagonal_solve(&[], &[4.0], &[], &[2.0]).unwrap(), vec![0.5]);
        assert!(matches!(
            tridiagonal_solve(&[], &[0.0], &[], &[2.0]),
            Err(InterpError::Singular(0))
        ));
    }

    #[test]
    fn natural_collinear_is_line() {
        let ts = [0.0, 1.0, 2.0, 3.0];
        let k = natural_second_derivatives(&ts, &[1.0, 3.0, 5.0, 7.0]).unwrap();
        assert!(k.iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn natural_tent_curvature() {
        // Symmetric data forces X'(1) = 0; with X''(0) = 0 the left piece is
        // 1.5 s - 0.5 s^3, so X''(1) = -3.
        let k = natural_second_derivatives(&[0.0, 1.0, 2.0], &[0.0, 1.0, 0.0]).unwrap();
        assert!((k[1] + 3.0).abs() < 1e-14);
        let p = fit_natural(&[0.0, 1.0, 2.0], &[0.0, 1.0, 0.0]).unwrap();
        assert!((p[0].c - 1.5).abs() < 1e-14 && (p[0].a + 0.5).abs() < 1e-14);
    }
}

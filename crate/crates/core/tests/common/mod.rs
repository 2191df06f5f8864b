//! Shared fixtures and independent oracles for the integration tests.
#![allow(dead_code)]

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use contseq::preprocess::{RawSubject, Row};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A series of `n` values, each missing with probability `p`, with at least
/// one observed value.
pub fn random_series(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Vec<Option<f64>> {
    let mut v: Vec<Option<f64>> = (0..n)
        .map(|_| (!rng.gen_bool(p)).then(|| rng.gen_range(-3.0..3.0)))
        .collect();
    if v.iter().all(Option::is_none) {
        let i = rng.gen_range(0..n);
        v[i] = Some(rng.gen_range(-3.0..3.0));
    }
    v
}

/// Random raw subjects with irregular times, binary labels and unit weights.
pub fn random_subjects(
    rng: &mut ChaCha8Rng,
    count: usize,
    n_features: usize,
    n_context: usize,
    len: std::ops::RangeInclusive<usize>,
    missingness: f64,
) -> Vec<RawSubject> {
    (0..count)
        .map(|s| {
            let n = rng.gen_range(len.clone());
            let mut t = rng.gen_range(0.0..1.0);
            let mut rows = Vec::with_capacity(n);
            for _ in 0..n {
                rows.push(Row {
                    t,
                    features: (0..n_features)
                        .map(|_| (!rng.gen_bool(missingness)).then(|| rng.gen_range(-2.0..2.0)))
                        .collect(),
                    label: Some(f64::from(rng.gen_bool(0.5) as u8)),
                    weight: 1.0,
                });
                t += rng.gen_range(0.2..1.5);
            }
            for j in 0..n_features {
                if rows.iter().all(|r| r.features[j].is_none()) {
                    rows[0].features[j] = Some(rng.gen_range(-2.0..2.0));
                }
            }
            RawSubject {
                id: format!("s{s}"),
                context: (0..n_context).map(|_| Some(rng.gen_range(-1.0..1.0))).collect(),
                rows,
            }
        })
        .collect()
}

/// Gaussian elimination with partial pivoting on a dense system.
pub fn dense_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            if f != 0.0 {
                for c in col..n {
                    a[r][c] -= f * a[col][c];
                }
                b[r] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

/// Natural cubic spline through `(ts, xs)` from the full set of
/// interpolation, C¹, C² and free-end constraints, solved densely. Returns
/// `[a, b, c, d]` per span in the local offset `u = t - ts[i]`.
pub fn natural_spline_dense(ts: &[f64], xs: &[f64]) -> Vec<[f64; 4]> {
    let m = ts.len() - 1;
    let n = 4 * m;
    let mut a = vec![vec![0.0; n]; n];
    let mut b = vec![0.0; n];
    let mut row = 0;
    let mut push = |coef: Vec<(usize, f64)>, rhs: f64, a: &mut Vec<Vec<f64>>, b: &mut Vec<f64>| {
        for (c, v) in coef {
            a[row][c] += v;
        }
        b[row] = rhs;
        row += 1;
    };
    for i in 0..m {
        let h = ts[i + 1] - ts[i];
        let o = 4 * i;
        push(vec![(o + 3, 1.0)], xs[i], &mut a, &mut b);
        push(vec![(o, h * h * h), (o + 1, h * h), (o + 2, h), (o + 3, 1.0)], xs[i + 1], &mut a, &mut b);
        if i + 1 < m {
            let p = 4 * (i + 1);
            push(vec![(o, 3.0 * h * h), (o + 1, 2.0 * h), (o + 2, 1.0), (p + 2, -1.0)], 0.0, &mut a, &mut b);
            push(vec![(o, 6.0 * h), (o + 1, 2.0), (p + 1, -2.0)], 0.0, &mut a, &mut b);
        }
    }
    let hl = ts[m] - ts[m - 1];
    push(vec![(1, 2.0)], 0.0, &mut a, &mut b);
    push(vec![(4 * (m - 1), 6.0 * hl), (4 * (m - 1) + 1, 2.0)], 0.0, &mut a, &mut b);
    let sol = dense_solve(a, b);
    (0..m).map(|i| [sol[4 * i], sol[4 * i + 1], sol[4 * i + 2], sol[4 * i + 3]]).collect()
}

/// Average precision by enumerating every distinct threshold and computing
/// precision and recall from scratch at each one.
pub fn brute_auprc(scores: &[f64], labels: &[f64], weights: &[f64]) -> f64 {
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let total_pos: f64 = labels.iter().zip(weights).map(|(y, w)| y * w).sum();
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for &th in &thresholds {
        let (mut tp, mut pp) = (0.0, 0.0);
        for i in 0..scores.len() {
            if scores[i] >= th {
                pp += weights[i];
                tp += weights[i] * labels[i];
            }
        }
        let recall = tp / total_pos;
        let precision = if pp > 0.0 { tp / pp } else { 0.0 };
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

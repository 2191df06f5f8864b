//! The two causality transforms.

use serde::{Deserialize, Serialize};

/// One step of the concatenated `(x, o, t)` series with its label and weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub x: Vec<Option<f64>>,
    pub o: Vec<f64>,
    pub t: f64,
    pub label: f64,
    pub weight: f64,
}

/// One copy per step. Copy `i` keeps rows `0..=i`, repeats row `i` after
/// that, and carries weight only at position `i`.
pub fn copy_expand(rows: &[StepRow]) -> Vec<Vec<StepRow>> {
    (0..rows.len())
        .map(|i| {
            (0..rows.len())
                .map(|k| {
                    let mut r = rows[k.min(i)].clone();
                    if k != i {
                        r.weight = 0.0;
                    }
                    r
                })
                .collect()
        })
        .collect()
}

/// Length `2n - 1` series: position `2k` is `(x~_k, t_k, y_k, w_k)` and
/// position `2k + 1` is `(x~_k, t_{k+1}, y_k, 0)`, where `x~` is the
/// fill-forward of `x`. Values missing before a feature's first
/// observation become 0 so nothing is read from the future.
pub fn recti_expand(rows: &[StepRow]) -> Vec<StepRow> {
    let nf = rows.first().map_or(0, |r| r.x.len());
    let mut carry = vec![0.0; nf];
    let mut out = Vec::with_capacity(rows.len() * 2);
    for (k, r) in rows.iter().enumerate() {
        for (c, v) in carry.iter_mut().zip(&r.x) {
            if let Some(x) = v {
                *c = *x;
            }
        }
        let filled: Vec<Option<f64>> = carry.iter().copied().map(Some).collect();
        out.push(StepRow {
            x: filled.clone(),
            o: r.o.clone(),
            t: r.t,
            label: r.label,
            weight: r.weight,
        });
        if let Some(next) = rows.get(k + 1) {
            out.push(StepRow {
                x: filled,
                o: r.o.clone(),
                t: next.t,
                label: r.label,
                weight: 0.0,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(x: f64, t: f64, y: f64) -> StepRow {
        StepRow {
            x: vec![Some(x)],
            o: vec![t],
            t,
            label: y,
            weight: 1.0,
        }
    }

    fn key(s: &StepRow) -> (f64, f64, f64, f64) {
        (s.x[0].unwrap(), s.t, s.label, s.weight)
    }

    #[test]
    fn copy_layout_length_three() {
        let rows = vec![r(10.0, 1.0, 100.0), r(20.0, 2.0, 200.0), r(30.0, 3.0, 300.0)];
        let c = copy_expand(&rows);
        let got: Vec<Vec<_>> = c.iter().map(|cp| cp.iter().map(key).collect()).collect();
        assert_eq!(
            got,
            vec![
                vec![(10., 1., 100., 1.), (10., 1., 100., 0.), (10., 1., 100., 0.)],
                vec![(10., 1., 100., 0.), (20., 2., 200., 1.), (20., 2., 200., 0.)],
                vec![(10., 1., 100., 0.), (20., 2., 200., 0.), (30., 3., 300., 1.)],
            ]
        );
    }

    #[test]
    fn copy_single_row_is_identity() {
        let rows = vec![r(1.0, 0.0, 0.0)];
        assert_eq!(copy_expand(&rows), vec![rows]);
    }

    #[test]
    fn recti_layout_length_three() {
        let rows = vec![r(10.0, 1.0, 100.0), r(20.0, 2.0, 200.0), r(30.0, 3.0, 300.0)];
        let got: Vec<_> = recti_expand(&rows).iter().map(key).collect();
        assert_eq!(
            got,
            vec![
                (10., 1., 100., 1.),
                (10., 2., 100., 0.),
                (20., 2., 200., 1.),
                (20., 3., 200., 0.),
                (30., 3., 300., 1.),
            ]
        );
    }

    #[test]
    fn recti_fill_forward_and_leading_zero() {
        let mut rows = vec![r(0.0, 0.0, 0.0), r(5.0, 1.0, 0.0), r(0.0, 2.0, 0.0)];
        rows[0].x[0] = None;
        rows[2].x[0] = None;
        let xs: Vec<f64> = recti_expand(&rows).iter().map(|s| s.x[0].unwrap()).collect();
        assert_eq!(xs, vec![0.0, 0.0, 5.0, 5.0, 5.0]);
    }
}

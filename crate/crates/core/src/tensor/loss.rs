use serde::{Deserialize, Serialize};

use super::{Result, Tensor, TensorError, Var};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    Bce,
    Ce,
}

/// Weighted mean loss over rows.
///
/// `pred` and `label` are `[rows, width]` (width 1 for mse/bce, K one-hot
/// columns for ce); `weight` has one entry per row. The result is
/// `sum(w * row_loss) / sum(w)`, or an exact zero (with zero gradient) when
/// every weight is zero.
pub fn weighted_loss<'t>(
    pred: Var<'t>,
    label: &Tensor,
    weight: &Tensor,
    kind: LossKind,
) -> Result<Var<'t>> {
    let ps = pred.shape();
    if ps != label.shape() || ps.len() != 2 || weight.len() != ps[0] {
        return Err(TensorError::Shape {
            op: "weighted_loss",
            lhs: ps,
            rhs: label.shape().to_vec(),
        });
    }
    let total: f64 = weight.sum();
    if total == 0.0 {
        return Ok(pred.sum().scale(0.0));
    }
    let tape = pred.tape();
    let y = tape.constant(label.clone());
    let row = match kind {
        LossKind::Mse => {
            let d = pred.sub(y)?;
            d.mul(d)?.sum_last()
        }
        LossKind::Bce => {
            let p = pred.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            let one_minus_y = tape.constant(label.map(|v| 1.0 - v));
            let pos = y.mul(p.ln())?;
            let neg = one_minus_y.mul(p.neg().add_scalar(1.0).ln())?;
            pos.add(neg)?.neg().sum_last()
        }
        LossKind::Ce => {
            let p = pred.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            y.mul(p.ln())?.neg().sum_last()
        }
    };
    let w = tape.constant(weight.reshape(&[ps[0]])?);
    Ok(row.mul(w)?.sum().scale(1.0 / total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn col(v: &[f64]) -> Tensor {
        Tensor::new(vec![v.len(), 1], v.to_vec()).unwrap()
    }

    #[test]
    fn mse_masked_position_ignored() {
        let tape = Tape::new();
        let pred = tape.var(col(&[1.0, 5.0]));
        let l = weighted_loss(pred, &col(&[1.0, 9.0]), &Tensor::vector(vec![1.0, 0.0]), LossKind::Mse)
            .unwrap();
        assert_eq!(l.value().item(), 0.0);
        let g = tape.backward(l).unwrap().get(pred);
        assert_eq!(g.data()[1], 0.0);
    }

    #[test]
    fn bce_half_is_ln2() {
        let tape = Tape::new();
        let pred = tape.var(col(&[0.5]));
        let l = weighted_loss(pred, &col(&[1.0]), &Tensor::vector(vec![1.0]), LossKind::Bce)
            .unwrap();
        assert!((l.value().item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn ce_uniform_is_ln_k() {
        let tape = Tape::new();
        let pred = tape.var(Tensor::full(&[3, 4], 0.25));
        let mut onehot = Tensor::zeros(&[3, 4]);
        for (r, c) in [(0, 1), (1, 3), (2, 0)] {
            onehot.data_mut()[r * 4 + c] = 1.0;
        }
        let l = weighted_loss(pred, &onehot, &Tensor::vector(vec![1.0; 3]), LossKind::Ce).unwrap();
        assert!((l.value().item() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn all_zero_weights_give_zero_loss_and_grad() {
        let tape = Tape::new();
        let pred = tape.var(col(&[0.3, 0.9]));
        let l = weighted_loss(pred, &col(&[1.0, 0.0]), &Tensor::vector(vec![0.0, 0.0]), LossKind::Bce)
            .unwrap();
        assert_eq!(l.value().item(), 0.0);
        let g = tape.backward(l).unwrap().get(pred);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalised_by_weight_sum() {
        let tape = Tape::new();
        let pred = tape.var(col(&[1.0, 2.0, 3.0]));
        let l = weighted_loss(
            pred,
            &col(&[0.0, 0.0, 0.0]),
            &Tensor::vector(vec![1.0, 1.0, 0.0]),
            LossKind::Mse,
        )
        .unwrap();
        assert!((l.value().item() - 2.5).abs() < 1e-15);
    }

    #[test]
    fn clamping_keeps_loss_finite() {
        let tape = Tape::new();
        let pred = tape.var(col(&[0.0, 1.0]));
        let l = weighted_loss(pred, &col(&[1.0, 0.0]), &Tensor::vector(vec![1.0, 1.0]), LossKind::Bce)
            .unwrap();
        assert!(l.value().item().is_finite());
    }
}

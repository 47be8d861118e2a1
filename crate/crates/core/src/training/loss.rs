use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// Mean negative log-likelihood over valid target positions. `log_probs` is
/// `[N, V]` rows of log-probabilities; `None` targets are padding and do not
/// count toward the mean.
pub fn cross_entropy(t: &mut Tape, log_probs: Var, targets: &[Option<usize>]) -> Result<Var> {
    let valid = targets.iter().filter(|x| x.is_some()).count();
    if valid == 0 {
        return Err(Error::Data("cross entropy over zero valid positions".into()));
    }
    let total = t.pick_nll(log_probs, targets)?;
    t.scale(total, 1.0 / valid as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loss_of(rows: &[Vec<f64>], targets: &[Option<usize>]) -> Result<f64> {
        let v = rows[0].len();
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let mut t = Tape::new();
        let lp = t.constant(flat, &[rows.len(), v]).unwrap();
        let loss = cross_entropy(&mut t, lp, targets)?;
        Ok(t.value(loss)[0])
    }

    #[test]
    fn perfect_prediction_scores_zero() {
        let rows = vec![vec![0.0, -50.0, -50.0]];
        let loss = loss_of(&rows, &[Some(0)]).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn uniform_prediction_scores_ln_vocab() {
        let v = 7usize;
        let row = vec![(1.0 / v as f64).ln(); v];
        let loss = loss_of(&[row], &[Some(3)]).unwrap();
        assert!((loss - (v as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn mean_reduction_over_valid_positions() {
        // Positions contribute 1 and 3; the padded row must not count.
        let rows = vec![
            vec![-1.0, -9.0],
            vec![-9.0, -3.0],
            vec![-500.0, -500.0],
        ];
        let loss = loss_of(&rows, &[Some(0), Some(1), None]).unwrap();
        assert!((loss - 2.0).abs() < 1e-12);
    }

    #[test]
    fn all_padding_is_rejected() {
        let rows = vec![vec![-1.0, -1.0]];
        assert!(loss_of(&rows, &[None]).is_err());
    }

    #[test]
    fn gradient_spreads_uniform_weight() {
        // d loss / d lp[i, target_i] = -1/valid for each valid row.
        let mut t = Tape::new();
        let lp = t.leaf(vec![-1.0, -2.0, -0.5, -1.5], &[2, 2]).unwrap();
        let targets = [Some(1), Some(0)];
        let loss = cross_entropy(&mut t, lp, &targets).unwrap();
        t.backward(loss).unwrap();
        let g = t.grad(lp).unwrap();
        assert_eq!(g, &[0.0, -0.5, -0.5, 0.0]);
    }
}

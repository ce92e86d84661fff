use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Probabilities are clamped to `[PROB_FLOOR, 1]` before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

const ROW_SUM_TOLERANCE: f64 = 1e-4;

fn check_targets<F: Scalar>(probs: &Tensor<F>, onehot: &Tensor<F>) -> Result<(usize, usize)> {
    let (n, k) = probs.shape2()?;
    if onehot.shape() != probs.shape() {
        return Err(Error::size(format!(
            "targets {:?} do not match probabilities {:?}",
            onehot.shape(),
            probs.shape()
        )));
    }
    for (i, row) in onehot.data().chunks_exact(k).enumerate() {
        let ones = row.iter().filter(|&&v| v == F::one()).count();
        let zeros = row.iter().filter(|&&v| v == F::zero()).count();
        if ones != 1 || ones + zeros != k {
            return Err(Error::Label(format!("row {i} is not a one-hot vector")));
        }
    }
    Ok((n, k))
}

/// Mean categorical cross-entropy `-(1/N) * sum log p[n, true_n]`.
pub fn cce_loss<F: Scalar>(probs: &Tensor<F>, onehot: &Tensor<F>) -> Result<F> {
    let (n, k) = check_targets(probs, onehot)?;
    let mut total = 0.0f64;
    for (i, (p, t)) in probs
        .data()
        .chunks_exact(k)
        .zip(onehot.data().chunks_exact(k))
        .enumerate()
    {
        let row_sum: f64 = p.iter().map(|v| v.as_f64()).sum();
        if (row_sum - 1.0).abs() > ROW_SUM_TOLERANCE {
            return Err(Error::Data(format!(
                "probability row {i} sums to {row_sum}, not 1"
            )));
        }
        let target = t.iter().position(|&v| v == F::one()).unwrap_or(0);
        total -= p[target].as_f64().clamp(PROB_FLOOR, 1.0).ln();
    }
    Ok(F::from_f64(total / n as f64))
}

/// Gradient of mean cross-entropy with respect to the softmax logits: `(probs - onehot) / N`.
pub fn softmax_cce_grad<F: Scalar>(probs: &Tensor<F>, onehot: &Tensor<F>) -> Result<Tensor<F>> {
    let (n, _) = check_targets(probs, onehot)?;
    let scale = F::from_f64(n as f64);
    probs.zip_map(onehot, |p, t| (p - t) / scale)
}

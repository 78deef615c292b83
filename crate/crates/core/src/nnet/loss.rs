use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Mean squared error over the valid frames of every sequence, averaged
/// over frames and dimensions. Returns the error and the valid frame count.
pub fn mse_masked(pred: &[Matrix], tgt: &[Matrix], masks: &[Vec<bool>]) -> Result<(f64, usize)> {
    if pred.len() != tgt.len() || pred.len() != masks.len() {
        return Err(Error::invalid("prediction, target and mask counts differ"));
    }
    let mut sum = 0.0;
    let mut frames = 0usize;
    let mut dim = 0usize;
    for ((p, y), m) in pred.iter().zip(tgt).zip(masks) {
        if p.rows() != y.rows() || p.cols() != y.cols() || m.len() != p.rows() {
            return Err(Error::invalid(format!(
                "shape mismatch: prediction {}x{}, target {}x{}, mask {}",
                p.rows(),
                p.cols(),
                y.rows(),
                y.cols(),
                m.len()
            )));
        }
        dim = p.cols();
        for t in (0..p.rows()).filter(|&t| m[t]) {
            sum += p.row(t).iter().zip(y.row(t)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            frames += 1;
        }
    }
    if frames == 0 {
        return Err(Error::invalid("loss over zero valid frames"));
    }
    Ok((sum / (frames * dim) as f64, frames))
}

/// `w1 * MSE(pred1, tgt1) + w2 * MSE(pred2, tgt2)`; without a secondary
/// pair the loss is `w1 * MSE1`.
pub fn loss_dual(
    pred1: &[Matrix],
    tgt1: &[Matrix],
    secondary: Option<(&[Matrix], &[Matrix])>,
    masks: &[Vec<bool>],
    weights: (f64, f64),
) -> Result<f64> {
    let (mse1, _) = mse_masked(pred1, tgt1, masks)?;
    let mut loss = weights.0 * mse1;
    if let Some((p2, t2)) = secondary {
        let (mse2, _) = mse_masked(p2, t2, masks)?;
        loss += weights.1 * mse2;
    }
    Ok(loss)
}

/// Gradient of `weight * MSE` with every frame valid.
pub(crate) fn mse_grad(pred: &[Matrix], tgt: &[Matrix], weight: f64) -> (f64, Vec<Matrix>) {
    let n: usize = pred.iter().map(|p| p.rows() * p.cols()).sum();
    let scale = 2.0 * weight / n as f64;
    let mut sum = 0.0;
    let grads = pred
        .iter()
        .zip(tgt)
        .map(|(p, y)| {
            let data = p
                .as_slice()
                .iter()
                .zip(y.as_slice())
                .map(|(a, b)| {
                    sum += (a - b) * (a - b);
                    scale * (a - b)
                })
                .collect();
            Matrix::from_vec(p.rows(), p.cols(), data)
        })
        .collect();
    (weight * sum / n as f64, grads)
}

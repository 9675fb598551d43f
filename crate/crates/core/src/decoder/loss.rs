use crate::error::{Error, Result};
use crate::grid::category;
use crate::scalar::{f, s, Scalar};
use crate::synthworld::GridFrame;
use crate::tensor::Tensor;

/// Head outputs for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<T> {
    /// `[h, w, d, categories]`
    pub logits: Tensor<T>,
    /// `[h, w, d, 3]`
    pub flow: Tensor<T>,
}

/// Scalar loss with gradients per input frame.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput<T> {
    pub value: f64,
    pub grad_logits: Vec<Tensor<T>>,
    pub grad_flows: Vec<Tensor<T>>,
}

fn log_softmax_row<T: Scalar>(row: &[T]) -> (Vec<f64>, f64) {
    let m = row.iter().map(|&v| f(v)).fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|&v| (f(v) - m).exp()).sum();
    let p = row.iter().map(|&v| (f(v) - m).exp() / z).collect();
    (p, m + z.ln())
}

fn check_targets<T: Scalar>(logits: &Tensor<T>, targets: &[u8]) -> Result<usize> {
    let c = logits.last_dim();
    let n = logits.len() / c.max(1);
    if n != targets.len() {
        return Err(Error::LengthMismatch(n, targets.len()));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t as usize >= c) {
        return Err(Error::UnknownCategory(bad));
    }
    if n == 0 {
        return Err(Error::Empty("loss targets"));
    }
    Ok(n)
}

/// Mean per-voxel cross-entropy over the trailing axis and its gradient.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, targets: &[u8]) -> Result<(f64, Tensor<T>)> {
    let n = check_targets(logits, targets)?;
    let inv = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (row, &t) in logits.rows().zip(targets) {
        let (p, lse) = log_softmax_row(row);
        loss += lse - f(row[t as usize]);
        for (k, pk) in p.into_iter().enumerate() {
            let g = pk - if k == t as usize { 1.0 } else { 0.0 };
            grad.push(s::<T>(g * inv));
        }
    }
    Ok((loss * inv, Tensor::new(logits.shape().to_vec(), grad)?))
}

/// Mean binary cross-entropy of the occupancy probability `1 - p(free)`
/// against "target is not free", with its gradient.
pub fn bce_occupancy<T: Scalar>(logits: &Tensor<T>, targets: &[u8]) -> Result<(f64, Tensor<T>)> {
    let n = check_targets(logits, targets)?;
    let inv = 1.0 / n as f64;
    let free = category::FREE as usize;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (row, &t) in logits.rows().zip(targets) {
        let (p, lse) = log_softmax_row(row);
        let m = row.iter().map(|&v| f(v)).fold(f64::NEG_INFINITY, f64::max);
        // log of the summed non-free mass, kept stable for confident logits
        let z_occ: f64 = row
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != free)
            .map(|(_, &v)| (f(v) - m).exp())
            .sum();
        let log_occ = m + z_occ.ln() - lse;
        let log_free = f(row[free]) - lse;
        let occupied = t as usize != free;
        loss -= if occupied { log_occ } else { log_free };
        for (k, pk) in p.iter().enumerate() {
            let g = if occupied {
                let q = if k == free {
                    0.0
                } else {
                    (f(row[k]) - m).exp() / z_occ
                };
                pk - q
            } else {
                pk - if k == free { 1.0 } else { 0.0 }
            };
            grad.push(s::<T>(g * inv));
        }
    }
    Ok((loss * inv, Tensor::new(logits.shape().to_vec(), grad)?))
}

/// Mean absolute error over the three components of masked voxels.
/// Returns zero loss and gradient when the mask is empty.
pub fn l1_masked<T: Scalar>(pred: &Tensor<T>, target: &[f32], mask: &[bool]) -> Result<(f64, Tensor<T>)> {
    if pred.len() != target.len() {
        return Err(Error::LengthMismatch(pred.len(), target.len()));
    }
    if pred.len() != 3 * mask.len() {
        return Err(Error::LengthMismatch(pred.len(), 3 * mask.len()));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Ok((0.0, Tensor::zeros(pred.shape().to_vec())));
    }
    let inv = 1.0 / (3 * count) as f64;
    let mut loss = 0.0;
    let mut grad = vec![T::zero(); pred.len()];
    for (v, &on) in mask.iter().enumerate() {
        if !on {
            continue;
        }
        for a in 0..3 {
            let i = 3 * v + a;
            let diff = f(pred.data()[i]) - target[i] as f64;
            loss += diff.abs();
            if diff != 0.0 {
                grad[i] = s(diff.signum() * inv);
            }
        }
    }
    Ok((loss * inv, Tensor::raw(pred.shape().to_vec(), grad)))
}

fn frame_terms<T: Scalar>(
    pred: &Prediction<T>,
    gt: &GridFrame,
    lambda_f: f64,
    with_bce: bool,
) -> Result<(f64, Tensor<T>, Tensor<T>)> {
    let labels = gt.semantic.labels();
    let (ce, mut g_logits) = cross_entropy(&pred.logits, labels)?;
    let mut value = ce;
    if with_bce {
        let (bce, g) = bce_occupancy(&pred.logits, labels)?;
        value += bce;
        g_logits.add_assign(&g)?;
    }
    let mask: Vec<bool> = labels.iter().map(|&l| category::is_gmo(l)).collect();
    let (l1, g_flow) = l1_masked(&pred.flow, gt.flow.vectors(), &mask)?;
    value += lambda_f * l1;
    Ok((value, g_logits, g_flow.scale(s(lambda_f))))
}

fn averaged<T: Scalar>(
    preds: &[Prediction<T>],
    gt: &[GridFrame],
    lambda_f: f64,
    with_bce: bool,
) -> Result<LossOutput<T>> {
    if preds.len() != gt.len() {
        return Err(Error::LengthMismatch(preds.len(), gt.len()));
    }
    if preds.is_empty() {
        return Err(Error::Empty("loss frames"));
    }
    let inv = 1.0 / preds.len() as f64;
    let mut out = LossOutput {
        value: 0.0,
        grad_logits: Vec::new(),
        grad_flows: Vec::new(),
    };
    for (p, g) in preds.iter().zip(gt) {
        let (v, gl, gf) = frame_terms(p, g, lambda_f, with_bce)?;
        out.value += v * inv;
        out.grad_logits.push(gl.scale(s(inv)));
        out.grad_flows.push(gf.scale(s(inv)));
    }
    Ok(out)
}

/// Mean over forecast frames of CE + BCE occupancy + `lambda_f` * GMO-masked L1 flow.
pub fn forecast_loss<T: Scalar>(
    preds: &[Prediction<T>],
    gt: &[GridFrame],
    lambda_f: f64,
) -> Result<LossOutput<T>> {
    averaged(preds, gt, lambda_f, true)
}

/// Supervision of the memory's semantic and flow heads over the history.
pub fn norm_loss<T: Scalar>(
    preds: &[Prediction<T>],
    gt: &[GridFrame],
    lambda_f: f64,
) -> Result<LossOutput<T>> {
    averaged(preds, gt, lambda_f, false)
}

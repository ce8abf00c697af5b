use crate::cloud::Semantic;
use crate::error::{Error, Result};

use super::{check_len, LossGrad, LOG_EPS};

/// Mean binary cross-entropy of tree probabilities, gradient with respect to
/// the probabilities. Log arguments are floored at `LOG_EPS`.
pub fn binary_tree_loss(probs: &[f64], gt: &[bool]) -> Result<LossGrad> {
    check_len("tree labels", probs.len(), gt.len())?;
    if probs.is_empty() {
        return Err(Error::EmptyInput("no voxels"));
    }
    if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::InvalidLoss { name: "tree probability", value: *p });
    }
    let n = probs.len() as f64;
    let mut loss = 0.0;
    let grad = probs
        .iter()
        .zip(gt)
        .map(|(&p, &y)| {
            let (arg, darg) = if y { (p, 1.0) } else { (1.0 - p, -1.0) };
            if arg < LOG_EPS {
                loss -= LOG_EPS.ln();
                0.0
            } else {
                loss -= arg.ln();
                -darg / (arg * n)
            }
        })
        .collect();
    Ok(LossGrad { loss: loss / n, grad })
}

/// Mean softmax cross-entropy over the three semantic classes.
///
/// `gt` holds class indices; the gradient is `(softmax − onehot) / N`,
/// flattened row-major to `3·N` entries.
pub fn semantic_ce_loss(logits: &[[f64; 3]], gt: &[usize]) -> Result<LossGrad> {
    check_len("semantic labels", logits.len(), gt.len())?;
    if logits.is_empty() {
        return Err(Error::EmptyInput("no voxels"));
    }
    if let Some(&bad) = gt.iter().find(|&&c| c >= Semantic::COUNT) {
        return Err(Error::InvalidLabel(format!("semantic class {bad} out of range")));
    }
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(3 * logits.len());
    for (z, &y) in logits.iter().zip(gt) {
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps = z.map(|v| (v - max).exp());
        let sum: f64 = exps.iter().sum();
        loss += sum.ln() + max - z[y];
        for (c, e) in exps.iter().enumerate() {
            let onehot = if c == y { 1.0 } else { 0.0 };
            grad.push((e / sum - onehot) / n);
        }
    }
    Ok(LossGrad { loss: loss / n, grad })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::gradcheck::{central_difference, relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn binary_anchors() {
        let r = binary_tree_loss(&[0.5; 7], &[true, false, true, false, true, true, false]).unwrap();
        assert!((r.loss - std::f64::consts::LN_2).abs() < 1e-12);
        let r = binary_tree_loss(&[1.0, 0.0, 1.0], &[true, false, true]).unwrap();
        assert!(r.loss < 1e-9);
        let r = binary_tree_loss(&[0.0], &[true]).unwrap();
        assert!((r.loss + LOG_EPS.ln()).abs() < 1e-12);
    }

    #[test]
    fn binary_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let p: Vec<f64> = (0..150).map(|_| rng.random_range(0.02..0.98)).collect();
        let y: Vec<bool> = (0..150).map(|_| rng.random_bool(0.5)).collect();
        let g = binary_tree_loss(&p, &y).unwrap().grad;
        let fd = central_difference(&p, 1e-5, |v| binary_tree_loss(v, &y).unwrap().loss);
        assert!(relative_error(&g, &fd) < 1e-5);
    }

    #[test]
    fn semantic_anchors() {
        let r = semantic_ce_loss(&[[0.0; 3], [2.0; 3]], &[0, 2]).unwrap();
        assert!((r.loss - 3f64.ln()).abs() < 1e-12);
        let r = semantic_ce_loss(&[[40.0, 0.0, 0.0], [0.0, 0.0, 40.0]], &[0, 2]).unwrap();
        assert!(r.loss < 1e-9);
        assert!(matches!(semantic_ce_loss(&[[0.0; 3]], &[3]), Err(Error::InvalidLabel(_))));
    }

    #[test]
    fn semantic_gradient_is_softmax_minus_onehot() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let z: Vec<[f64; 3]> = (0..60).map(|_| std::array::from_fn(|_| rng.random_range(-3.0..3.0))).collect();
        let y: Vec<usize> = (0..60).map(|_| rng.random_range(0..3)).collect();
        let r = semantic_ce_loss(&z, &y).unwrap();
        let flat: Vec<f64> = z.iter().flatten().copied().collect();
        let fd = central_difference(&flat, 1e-5, |v| {
            let zz: Vec<[f64; 3]> = v.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
            semantic_ce_loss(&zz, &y).unwrap().loss
        });
        assert!(relative_error(&r.grad, &fd) < 1e-5);
    }
}

use crate::labels::MaskValue;

use super::tensor::{Scalar, Tensor};
use super::NetError;

#[derive(Debug, Clone)]
pub struct LossOutput<T> {
    /// Mean negative log-likelihood over the counted pixels.
    pub loss: f64,
    pub grad: Tensor<T>,
    /// Number of non-ignore pixels that entered the mean.
    pub counted: usize,
}

/// Per-pixel softmax cross-entropy over the channel axis.
///
/// `targets` holds one mask value per pixel, items concatenated in batch
/// order. Ignore pixels contribute neither loss nor gradient.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, targets: &[MaskValue]) -> Result<LossOutput<T>, NetError> {
    let [n, c, h, w] = logits.shape();
    let hw = h * w;
    if targets.len() != n * hw {
        return Err(NetError::ShapeMismatch(format!(
            "{} target pixels for logits {:?}",
            targets.len(),
            logits.shape()
        )));
    }
    if c < 2 {
        return Err(NetError::ShapeMismatch("need at least two score channels".into()));
    }
    let counted = targets.iter().filter(|&&t| t != MaskValue::Ignore).count();
    if counted == 0 {
        return Err(NetError::AllPixelsIgnored);
    }
    let scale = 1.0 / counted as f64;
    let mut grad = Tensor::zeros(logits.shape());
    let mut total = 0.0f64;
    let data = logits.data();
    let gdata = grad.data_mut();
    let mut probs = vec![0.0f64; c];
    for item in 0..n {
        let base = item * c * hw;
        for p in 0..hw {
            let label = match targets[item * hw + p] {
                MaskValue::Ignore => continue,
                MaskValue::Other => 0,
                MaskValue::Target => 1,
            };
            let at = |ch: usize| base + ch * hw + p;
            let max = (0..c).map(|ch| data[at(ch)].to_f64()).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (ch, pr) in probs.iter_mut().enumerate() {
                *pr = (data[at(ch)].to_f64() - max).exp();
                sum += *pr;
            }
            total += sum.ln() - (data[at(label)].to_f64() - max);
            for (ch, pr) in probs.iter().enumerate() {
                let onehot = if ch == label { 1.0 } else { 0.0 };
                gdata[at(ch)] = T::from_f64((pr / sum - onehot) * scale);
            }
        }
    }
    Ok(LossOutput { loss: total * scale, grad, counted })
}

/// Softmax probabilities per pixel, same layout as the logits.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = logits.shape();
    let hw = h * w;
    let mut out = Tensor::zeros(logits.shape());
    let src = logits.data();
    let dst = out.data_mut();
    for item in 0..n {
        let base = item * c * hw;
        for p in 0..hw {
            let max = (0..c).map(|ch| src[base + ch * hw + p].to_f64()).fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = (0..c).map(|ch| (src[base + ch * hw + p].to_f64() - max).exp()).sum();
            for ch in 0..c {
                dst[base + ch * hw + p] = T::from_f64((src[base + ch * hw + p].to_f64() - max).exp() / sum);
            }
        }
    }
    out
}

/// Index of the highest-scoring channel per pixel as a mask value; ties go
/// to Other.
pub fn argmax_mask<T: Scalar>(logits: &Tensor<T>, item: usize) -> Vec<MaskValue> {
    let [_, c, h, w] = logits.shape();
    assert_eq!(c, 2, "binary head expected");
    let hw = h * w;
    let data = logits.item(item);
    (0..hw).map(|p| if data[hw + p] > data[p] { MaskValue::Target } else { MaskValue::Other }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln2() {
        let logits = Tensor::<f64>::zeros([2, 2, 3, 3]);
        let targets = vec![MaskValue::Target; 18];
        let out = softmax_cross_entropy(&logits, &targets).unwrap();
        assert!((out.loss - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(out.counted, 18);
    }

    #[test]
    fn confident_correct_logits_approach_zero() {
        let mut logits = Tensor::<f64>::zeros([1, 2, 1, 2]);
        // pixel 0 is Other (channel 0 high), pixel 1 is Target (channel 1 high)
        logits.data_mut().copy_from_slice(&[50.0, -50.0, -50.0, 50.0]);
        let out = softmax_cross_entropy(&logits, &[MaskValue::Other, MaskValue::Target]).unwrap();
        assert!(out.loss >= 0.0 && out.loss < 1e-40);
    }

    #[test]
    fn ignore_pixels_have_zero_gradient() {
        let mut logits = Tensor::<f64>::zeros([1, 2, 1, 3]);
        logits.data_mut().copy_from_slice(&[0.3, -1.0, 2.0, 0.1, 0.7, -0.4]);
        let t = [MaskValue::Target, MaskValue::Ignore, MaskValue::Other];
        let out = softmax_cross_entropy(&logits, &t).unwrap();
        assert_eq!(out.counted, 2);
        assert_eq!(out.grad.data()[1], 0.0);
        assert_eq!(out.grad.data()[4], 0.0);
        let all = [MaskValue::Ignore; 3];
        assert!(matches!(softmax_cross_entropy(&logits, &all), Err(NetError::AllPixelsIgnored)));
        assert!(softmax_cross_entropy(&logits, &t[..2]).is_err());
    }

    #[test]
    fn probabilities_sum_to_one() {
        let data: Vec<f32> = (0..2 * 2 * 4 * 4).map(|i| ((i * 37 % 11) as f32 - 5.0) * 3.1).collect();
        let logits = Tensor::from_vec([2, 2, 4, 4], data);
        let p = softmax(&logits);
        for item in 0..2 {
            let d = p.item(item);
            for px in 0..16 {
                assert!(((d[px] + d[16 + px]) as f64 - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn argmax_ties_go_to_other() {
        let logits = Tensor::<f32>::from_vec([1, 2, 1, 3], vec![0.0, 1.0, 2.0, 0.0, 2.0, 1.0]);
        assert_eq!(argmax_mask(&logits, 0), vec![MaskValue::Other, MaskValue::Target, MaskValue::Other]);
    }
}

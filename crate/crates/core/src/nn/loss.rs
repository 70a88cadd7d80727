use super::NnError;
use crate::tensor::Tensor;

/// Cross-entropy of `softmax(logits)` against a class index.
///
/// Returns the loss and its gradient with respect to the logits,
/// `softmax(logits) - one_hot(label)`. The maximum logit is subtracted
/// before exponentiation, and probabilities below the smallest normal
/// `f32` are treated as zero.
pub fn softmax_cross_entropy(logits: &Tensor, label: usize) -> Result<(f32, Tensor), NnError> {
    let z = logits.data();
    if label >= z.len() {
        return Err(NnError::LabelOutOfRange {
            label,
            classes: z.len(),
        });
    }
    let max = z.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f32> = z.iter().map(|&v| (v - max).exp()).collect();
    let sum: f32 = exps.iter().sum();
    let loss = sum.ln() - (z[label] - max);
    let mut grad: Vec<f32> = exps.iter().map(|e| e / sum).collect();
    super::flush_subnormals(&mut grad);
    grad[label] -= 1.0;
    Ok((loss.max(0.0), Tensor::new(logits.shape().to_vec(), grad)?))
}

//! Cross-entropy losses and their gradients through the network.

use crate::error::{Error, Result};
use crate::nn::{ArchId, Mode, Model, Scalar, Tensor};

/// Predictions are clamped to `[EPSILON, 1 - EPSILON]` before taking logs.
pub const EPSILON: f64 = 1e-7;

/// Mean binary cross-entropy `-(t ln y + (1 - t) ln(1 - y))` over all
/// elements.
pub fn bce_loss<T: Scalar>(pred: &[T], target: &[T]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::shape(format!("{} predictions", target.len()), pred.len()));
    }
    if pred.is_empty() {
        return Err(Error::Empty("loss over zero elements".into()));
    }
    let total: f64 = pred
        .iter()
        .zip(target)
        .map(|(&y, &t)| {
            let y = y.as_f64().clamp(EPSILON, 1.0 - EPSILON);
            let t = t.as_f64();
            -(t * y.ln() + (1.0 - t) * (1.0 - y).ln())
        })
        .sum();
    Ok(total / pred.len() as f64)
}

/// Loss of a model output against an output-shaped target tensor.
///
/// Segmentation outputs are scored per pixel. Classifier outputs are
/// `(benign, malignant)` probability pairs; the loss is the binary
/// cross-entropy of the malignant probability, which equals the two-class
/// cross-entropy against the one-hot target.
pub fn output_loss<T: Scalar>(arch: ArchId, output: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    if !output.same_shape(target) {
        return Err(Error::shape(output.shape_string(), target.shape_string()));
    }
    if arch.is_classifier() {
        let b = output.b;
        bce_loss(&output.data[b..], &target.data[b..])
    } else {
        bce_loss(&output.data, &target.data)
    }
}

/// Gradient of [`output_loss`] with respect to the pre-activation logits,
/// ignoring the clamp: `(y - t) / n` for sigmoid outputs and
/// `(p - onehot) / batch` for softmax outputs.
pub fn logit_gradient<T: Scalar>(arch: ArchId, output: &Tensor<T>, target: &Tensor<T>) -> Tensor<T> {
    let n = if arch.is_classifier() { output.b } else { output.len() };
    let scale = T::one() / T::from_f64(n as f64);
    let mut g = output.clone();
    for (v, &t) in g.data.iter_mut().zip(&target.data) {
        *v = (*v - t) * scale;
    }
    g
}

/// Forward pass, loss, and parameter gradients for one batch.
pub fn loss_and_grads<T: Scalar>(
    model: &Model<T>,
    batch: &Tensor<T>,
    target: &Tensor<T>,
    mode: Mode<'_>,
) -> Result<(f64, Vec<Vec<T>>)> {
    let trace = model.trace(batch, mode)?;
    let out = trace.output();
    let loss = output_loss(model.arch(), out, target)?;
    let seed = logit_gradient(model.arch(), out, target);
    let mut grads = model.net.zero_grads();
    model.net.backward(&trace, model.logits_node(), seed, &mut grads);
    Ok((loss, grads))
}

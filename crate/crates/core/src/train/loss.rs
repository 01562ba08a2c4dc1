use crate::error::Result;
use crate::saliency::saliency_l1;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Records `CE(y_orig, y) + λ1·KL(softmax(y_orig) ∥ softmax(y_masked)) + λ2·‖S‖₁`.
///
/// The saliency penalty enters as a constant: its value is part of the
/// loss but it contributes no parameter gradient.
pub fn record_hybrid_loss(
    tape: &mut Tape,
    y_orig: Var,
    y_masked: Var,
    labels: &[usize],
    saliency: &Tensor,
    lambda1: f32,
    lambda2: f32,
) -> Result<Var> {
    let ce = tape.cross_entropy(y_orig, labels)?;
    let kl = tape.kl_logits(y_orig, y_masked)?;
    let kl = tape.scale(kl, lambda1)?;
    let total = tape.add(ce, kl)?;
    let l1 = tape.constant(Tensor::scalar(lambda2 * saliency_l1(saliency)))?;
    tape.add(total, l1)
}

/// Value of the hybrid loss for logit batches.
pub fn hybrid_loss(
    y_orig: &Tensor,
    y_masked: &Tensor,
    labels: &[usize],
    saliency: &Tensor,
    lambda1: f32,
    lambda2: f32,
) -> Result<f32> {
    let mut tape = Tape::new();
    let a = tape.constant(y_orig.clone())?;
    let b = tape.constant(y_masked.clone())?;
    let l = record_hybrid_loss(&mut tape, a, b, labels, saliency, lambda1, lambda2)?;
    Ok(tape.value(l).data()[0])
}

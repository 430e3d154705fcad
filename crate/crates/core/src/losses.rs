//! Hinge adversarial losses.
//!
//! The discriminator is pushed to score real samples above +1 and fakes
//! below -1; the generator maximizes the score of its fakes:
//!
//! ```text
//! L_D = mean(max(0, 1 - s_real)) + mean(max(0, 1 + s_fake))
//! L_G = -mean(s_fake)
//! ```

use crate::autodiff::{DiffError, Tape, TensorId};

/// Hinge discriminator loss over equal-size score batches.
pub fn discriminator_loss(
    tape: &mut Tape,
    real_scores: TensorId,
    fake_scores: TensorId,
) -> Result<TensorId, DiffError> {
    if tape.shape(real_scores) != tape.shape(fake_scores) {
        return Err(DiffError::ShapeMismatch {
            op: "discriminator_loss",
            detail: format!(
                "real {:?} vs fake {:?}",
                tape.shape(real_scores),
                tape.shape(fake_scores)
            ),
        });
    }
    // -min(0, -1 + s) = max(0, 1 - s)
    let neg_real = tape.neg(real_scores);
    let real_margin = tape.add_scalar(neg_real, 1.0);
    let real_hinge = tape.relu(real_margin);
    let real_term = tape.mean_all(real_hinge);
    // -min(0, -1 - s) = max(0, 1 + s)
    let fake_margin = tape.add_scalar(fake_scores, 1.0);
    let fake_hinge = tape.relu(fake_margin);
    let fake_term = tape.mean_all(fake_hinge);
    tape.add(real_term, fake_term)
}

/// Generator loss: the negated mean fake score.
pub fn generator_loss(tape: &mut Tape, fake_scores: TensorId) -> TensorId {
    let mean = tape.mean_all(fake_scores);
    tape.neg(mean)
}

//! Teacher-forced cross-entropy for the attention decoder: the sum of
//! per-step negative log-probabilities of the gold tokens, EOS included.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone)]
pub struct AttentionLossResult {
    pub loss: f64,
    /// Gradient w.r.t. the `[L, V]` step-wise log-probabilities.
    pub grad: Vec<f64>,
    /// Per-step `-log p(y_t | prefix)` terms.
    pub step_losses: Vec<f64>,
}

/// `log_probs` holds one log-softmax row per output step; `target_with_eos`
/// must have exactly one id per row.
pub fn attention_loss(log_probs: &Tensor, target_with_eos: &[usize]) -> Result<AttentionLossResult> {
    let shape = log_probs.shape();
    if shape.len() != 2 || shape[0] != target_with_eos.len() {
        return Err(Error::invalid(format!(
            "attention loss: {} target steps vs log_probs {shape:?}",
            target_with_eos.len()
        )));
    }
    let v = shape[1];
    if let Some(&bad) = target_with_eos.iter().find(|&&id| id >= v) {
        return Err(Error::invalid(format!(
            "attention loss: target id {bad} >= vocab {v}"
        )));
    }
    let mut grad = vec![0.0; log_probs.numel()];
    let mut step_losses = Vec::with_capacity(target_with_eos.len());
    let mut loss = 0.0;
    for (t, &y) in target_with_eos.iter().enumerate() {
        let lp = log_probs.data()[t * v + y];
        loss -= lp;
        step_losses.push(-lp);
        grad[t * v + y] = -1.0;
    }
    Ok(AttentionLossResult {
        loss,
        grad,
        step_losses,
    })
}

/// Tape composition of the same loss (gather, sum, negate) so gradients
/// flow through the decoder stack.
pub fn attention_loss_on_tape(tape: &Tape, log_probs: Var, target_with_eos: &[usize]) -> Result<Var> {
    let shape = tape.shape(log_probs);
    if shape.len() != 2 || shape[0] != target_with_eos.len() {
        return Err(Error::invalid(format!(
            "attention loss: {} target steps vs log_probs {shape:?}",
            target_with_eos.len()
        )));
    }
    let picked = tape.pick_per_row(log_probs, target_with_eos)?;
    let total = tape.sum_all(picked);
    Ok(tape.scale(total, -1.0))
}

use super::{EngineError, Result};
use crate::tensor::{Graph, NodeId, Tensor};

/// Mean cross-entropy of `logits [B, C]` against `labels`.
pub fn cross_entropy_node(g: &mut Graph, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    Ok(g.softmax_cross_entropy(logits, labels)?)
}

/// `CE(labels, logits) + λ·MSE(stored, logits)`. With `λ = 0` this returns the
/// cross-entropy node itself.
pub fn kd_loss_node(
    g: &mut Graph,
    logits: NodeId,
    stored: &[f64],
    labels: &[usize],
    lambda: f64,
) -> Result<NodeId> {
    if stored.len() != g.value(logits).len() {
        return Err(EngineError::ShapeMismatch {
            expected: g.value(logits).len(),
            got: stored.len(),
        });
    }
    let ce = cross_entropy_node(g, logits, labels)?;
    if lambda == 0.0 {
        return Ok(ce);
    }
    let mse = g.mse(logits, stored)?;
    let weighted = g.scale(mse, lambda);
    Ok(g.add(ce, weighted)?)
}

pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let z = g.constant(logits.clone());
    let l = cross_entropy_node(&mut g, z, labels)?;
    Ok(g.value(l).data()[0])
}

pub fn kd_loss(logits: &Tensor, stored: &[f64], labels: &[usize], lambda: f64) -> Result<f64> {
    let mut g = Graph::new();
    let z = g.constant(logits.clone());
    let l = kd_loss_node(&mut g, z, stored, labels, lambda)?;
    Ok(g.value(l).data()[0])
}

/// Cosine annealing from `peak` at step 0 towards 0 at `total`.
pub fn cosine_lr(step: usize, total: usize, peak: f64) -> Result<f64> {
    if step >= total {
        return Err(EngineError::StepOutOfRange { step, total });
    }
    Ok(peak * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos()))
}

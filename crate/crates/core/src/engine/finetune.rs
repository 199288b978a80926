use super::ledger::{FlopsCategory, FlopsLedger, FlopsModel};
use super::loss::{cosine_lr, cross_entropy_node, kd_loss_node};
use super::{EngineError, FinetuneConfig, Objective, Result};
use crate::nn::{GroupId, Mode, Model};
use crate::replay::{BufferError, ReplayBuffer};
use crate::rng::Rng;
use crate::tensor::Graph;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FinetuneStats {
    /// Training loss of each step, before its update.
    pub losses: Vec<f64>,
}

/// Finetune the groups in `cfg.mask` on buffered samples for `cfg.steps`
/// steps of plain SGD with a cosine-annealed learning rate. Groups outside the
/// mask are left bit-identical. Batch-norm statistics are refreshed only when
/// `BN_STATS` is in the mask; otherwise the forward pass runs in eval mode.
///
/// Batches walk a shuffled order of the buffer and reshuffle once fewer than
/// a batch of unseen items remains.
pub fn fpf(
    model: &mut Model,
    buffer: &ReplayBuffer,
    cfg: &FinetuneConfig,
    objective: Objective,
    rng: &mut Rng,
    ledger: &mut FlopsLedger,
) -> Result<FinetuneStats> {
    if buffer.is_empty() {
        return Err(BufferError::EmptyBuffer.into());
    }
    if cfg.mask.is_empty() {
        return Err(EngineError::EmptyMask);
    }
    if cfg.batch_size == 0 {
        return Err(EngineError::InvalidConfig(
            "finetune batch_size must be at least 1".into(),
        ));
    }
    let mode = if cfg.mask.contains(GroupId::BnStats) {
        Mode::Train
    } else {
        Mode::Eval
    };
    let flops = FlopsModel::of(model);
    let n = buffer.len();
    let bs = cfg.batch_size.min(n);
    let mut order = rng.permutation(n);
    let mut pos = 0;
    let mut stats = FinetuneStats::default();
    for step in 0..cfg.steps {
        if pos + bs > n {
            order = rng.permutation(n);
            pos = 0;
        }
        let items = buffer.gather(&order[pos..pos + bs]);
        pos += bs;
        let (x, labels, stored) = ReplayBuffer::stack(&items)?;
        let mut g = Graph::new();
        let pass = model.forward_graph(&mut g, &x, mode, Some(&cfg.mask))?;
        let loss = match objective {
            Objective::Ce => cross_entropy_node(&mut g, pass.logits, &labels)?,
            Objective::Kd { lambda } => {
                let z = stored.ok_or(EngineError::MissingLogits)?;
                kd_loss_node(&mut g, pass.logits, z.data(), &labels, lambda)?
            }
        };
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(EngineError::NonFiniteLoss(step as u64));
        }
        stats.losses.push(value);
        g.backward(loss)?;
        model.sgd_step(
            &g,
            &pass,
            cosine_lr(step, cfg.steps, cfg.lr)?,
            Some(&cfg.mask),
        );
        ledger.add(FlopsCategory::Finetuning, flops.train_step(bs));
    }
    Ok(stats)
}

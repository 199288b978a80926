use super::finetune::fpf;
use super::ledger::{FlopsCategory, FlopsLedger, FlopsModel};
use super::loss::cross_entropy_node;
use super::{EngineError, FinetuneConfig, KfpfConfig, Method, Result, TrainConfig};
use crate::data::{Batch, BatchTag};
use crate::dynamics::{
    finetune_selection, group_means, snapshot_diff, DynamicsRecord, Metric, SensitivityReport,
};
use crate::nn::{Mode, Model, ModelSnapshot, SelectionMask};
use crate::replay::{BufferItem, ReplayBuffer};
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor};

/// Read-only hook called after each batch that closes a tagged epoch.
pub trait Observer {
    fn epoch_end(
        &mut self,
        _model: &Model,
        _tag: BatchTag,
        _step: u64,
        _ledger: &FlopsLedger,
    ) -> std::result::Result<(), String> {
        Ok(())
    }
}

impl Observer for () {}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub model: Model,
    pub buffer: ReplayBuffer,
    /// One per tagged epoch end, in stream order.
    pub snapshots: Vec<ModelSnapshot>,
    pub ledger: FlopsLedger,
    /// Stream batches processed.
    pub steps: u64,
    pub fpf_passes: usize,
    /// Buffer items read outside finetuning passes.
    pub cl_buffer_reads: u64,
    /// Sensitivity found by k-FPF's identification step.
    pub sensitivity: Option<SensitivityReport>,
    /// Groups finetuned by k-FPF.
    pub mask: Option<SelectionMask>,
}

enum Schedule<'a> {
    Plain,
    Gdumb(&'a FinetuneConfig),
    Kfpf(&'a KfpfConfig, &'a FinetuneConfig),
}

// Salts for the per-component random streams derived from the run seed.
const BUFFER_STREAM: u64 = 1;
const REPLAY_STREAM: u64 = 2;
const FINETUNE_STREAM: u64 = 3;
const FRESH_MODEL_STREAM: u64 = 4;

pub fn run_sgd(
    cfg: &TrainConfig,
    model: Model,
    batches: &[Batch],
    obs: &mut dyn Observer,
) -> Result<RunOutput> {
    let cfg = TrainConfig {
        method: Method::Sgd,
        ..cfg.clone()
    };
    run(&cfg, model, batches, Schedule::Plain, obs)
}

pub fn run_er(
    cfg: &TrainConfig,
    model: Model,
    batches: &[Batch],
    obs: &mut dyn Observer,
) -> Result<RunOutput> {
    let cfg = TrainConfig {
        method: Method::Er,
        ..cfg.clone()
    };
    run(&cfg, model, batches, Schedule::Plain, obs)
}

pub fn run_der(
    cfg: &TrainConfig,
    model: Model,
    batches: &[Batch],
    obs: &mut dyn Observer,
) -> Result<RunOutput> {
    let cfg = TrainConfig {
        method: Method::Der,
        ..cfg.clone()
    };
    run(&cfg, model, batches, Schedule::Plain, obs)
}

/// Fill the buffer from the stream without training, then fit a freshly
/// initialized model of the same architecture on the buffer alone, updating
/// every group.
pub fn run_gdumb(
    cfg: &TrainConfig,
    model: Model,
    batches: &[Batch],
    finetune: &FinetuneConfig,
    obs: &mut dyn Observer,
) -> Result<RunOutput> {
    let cfg = TrainConfig {
        method: Method::Gdumb,
        ..cfg.clone()
    };
    let ft = FinetuneConfig {
        mask: SelectionMask::new(model.group_ids()),
        ..finetune.clone()
    };
    run(&cfg, model, batches, Schedule::Gdumb(&ft), obs)
}

/// Plain SGD on the stream with a finetuning pass on the buffer every `τ`
/// steps and once more at the end. Sensitive groups are identified once, at
/// step `I`, from parameter probes taken since the start; no task-boundary
/// information is used. The buffer is filled by reservoir sampling but never
/// read by the SGD steps. `finetune.mask` is replaced by the identified mask
/// unless `kfpf.mask_override` is set.
pub fn run_kfpf(
    cfg: &TrainConfig,
    model: Model,
    batches: &[Batch],
    kfpf: &KfpfConfig,
    finetune: &FinetuneConfig,
    obs: &mut dyn Observer,
) -> Result<RunOutput> {
    let cfg = TrainConfig {
        method: Method::Sgd,
        ..cfg.clone()
    };
    kfpf.validate()?;
    if cfg.buffer_capacity == 0 {
        return Err(EngineError::InvalidConfig(
            "k-FPF needs buffer_capacity > 0".into(),
        ));
    }
    run(&cfg, model, batches, Schedule::Kfpf(kfpf, finetune), obs)
}

fn flat(x: &Tensor) -> Result<Tensor> {
    let n = x.shape().first().copied().unwrap_or(0);
    let d = x.len().checked_div(n).unwrap_or(0);
    Ok(x.clone().reshape(vec![n, d])?)
}

struct Probes {
    interval: usize,
    last: Option<ModelSnapshot>,
    records: Vec<DynamicsRecord>,
    diffs: usize,
}

impl Probes {
    fn new(cfg: &KfpfConfig, model: &Model) -> Self {
        Self {
            interval: (cfg.identify_at() / cfg.probes).max(1),
            last: Some(model.snapshot(0, 0)),
            records: Vec::new(),
            diffs: 0,
        }
    }

    fn take(&mut self, model: &Model, step: u64) -> Result<()> {
        let snap = model.snapshot(0, step as usize);
        if let Some(prev) = &self.last {
            if prev.epoch() == snap.epoch() {
                return Ok(());
            }
            self.records.extend(snapshot_diff(
                prev,
                &snap,
                Metric::ConsecutiveEpoch,
                0,
                step as usize,
            )?);
            self.diffs += 1;
        }
        self.last = Some(snap);
        Ok(())
    }

    fn identify(&self, threshold: f64) -> Result<(SensitivityReport, SelectionMask)> {
        Ok(finetune_selection(
            &group_means(&self.records),
            self.diffs,
            threshold,
        )?)
    }
}

struct Runner<'a> {
    cfg: &'a TrainConfig,
    model: Model,
    buffer: ReplayBuffer,
    flops: FlopsModel,
    ledger: FlopsLedger,
    replay_rng: Rng,
    ft_rng: Rng,
    step: u64,
    ft_reads: u64,
    fpf_passes: usize,
}

impl Runner<'_> {
    fn check(&self, g: &Graph, loss: crate::tensor::NodeId) -> Result<()> {
        if g.value(loss).data()[0].is_finite() {
            Ok(())
        } else {
            Err(EngineError::NonFiniteLoss(self.step))
        }
    }

    fn sgd(&mut self, x: &Tensor, labels: &[usize]) -> Result<()> {
        let mut g = Graph::new();
        let pass = self.model.forward_graph(&mut g, x, Mode::Train, None)?;
        let loss = cross_entropy_node(&mut g, pass.logits, labels)?;
        self.check(&g, loss)?;
        g.backward(loss)?;
        self.model.sgd_step(&g, &pass, self.cfg.lr, None);
        self.ledger.add(
            FlopsCategory::ClTraining,
            self.flops.train_step(labels.len()),
        );
        Ok(())
    }

    fn replay(&mut self, x: &Tensor, labels: &[usize]) -> Result<()> {
        if self.buffer.is_empty() {
            return self.sgd(x, labels);
        }
        let items = self
            .buffer
            .sample_batch(self.cfg.replay_batch_size, &mut self.replay_rng)?;
        let (xb, yb, zb) = ReplayBuffer::stack(&items)?;
        let b = labels.len();
        let r = yb.len();
        let joint = Tensor::concat_rows(&[x, &xb])?;
        let mut g = Graph::new();
        let pass = self
            .model
            .forward_graph(&mut g, &joint, Mode::Train, None)?;
        let loss = match self.cfg.method {
            Method::Der => {
                let z = zb.ok_or(EngineError::MissingLogits)?;
                let stream = g.slice_rows(pass.logits, 0, b)?;
                let past = g.slice_rows(pass.logits, b, b + r)?;
                let ce = cross_entropy_node(&mut g, stream, labels)?;
                if self.cfg.der_lambda == 0.0 {
                    ce
                } else {
                    let mse = g.mse(past, z.data())?;
                    let w = g.scale(mse, self.cfg.der_lambda);
                    g.add(ce, w)?
                }
            }
            _ => {
                let all: Vec<usize> = labels.iter().chain(&yb).copied().collect();
                cross_entropy_node(&mut g, pass.logits, &all)?
            }
        };
        self.check(&g, loss)?;
        g.backward(loss)?;
        self.model.sgd_step(&g, &pass, self.cfg.lr, None);
        self.ledger
            .add(FlopsCategory::ClTraining, self.flops.train_step(b));
        self.ledger
            .add(FlopsCategory::Replay, self.flops.train_step(r));
        Ok(())
    }

    /// Offer every sample of the batch to the reservoir; accepted samples get
    /// their logits from the current model.
    fn insert(&mut self, x: &Tensor, labels: &[usize], with_logits: bool) -> Result<()> {
        let d = x.shape()[1];
        let mut accepted = Vec::new();
        for (i, &label) in labels.iter().enumerate() {
            if let Some(slot) = self.buffer.offer() {
                let input = x.data()[i * d..(i + 1) * d].to_vec();
                accepted.push((slot, BufferItem::new(input, label, self.step)));
            }
        }
        if with_logits && !accepted.is_empty() {
            let rows: Vec<f64> = accepted
                .iter()
                .flat_map(|(_, it)| it.input.iter().copied())
                .collect();
            let z = self
                .model
                .predict(&Tensor::new(vec![accepted.len(), d], rows)?)?;
            let c = z.shape()[1];
            for ((_, item), row) in accepted.iter_mut().zip(z.data().chunks(c)) {
                item.logits = Some(row.to_vec());
            }
            self.ledger.add(
                FlopsCategory::ClTraining,
                self.flops.forward(accepted.len()),
            );
        }
        for (slot, item) in accepted {
            self.buffer.place(slot, item);
        }
        Ok(())
    }

    fn finetune(&mut self, ft: &FinetuneConfig, objective: super::Objective) -> Result<()> {
        let before = self.buffer.reads();
        fpf(
            &mut self.model,
            &self.buffer,
            ft,
            objective,
            &mut self.ft_rng,
            &mut self.ledger,
        )?;
        self.ft_reads += self.buffer.reads() - before;
        self.fpf_passes += 1;
        Ok(())
    }
}

fn run(
    cfg: &TrainConfig,
    model: Model,
    batches: &[Batch],
    schedule: Schedule,
    obs: &mut dyn Observer,
) -> Result<RunOutput> {
    cfg.validate()?;
    let mut root = Rng::new(cfg.seed);
    let buffer = ReplayBuffer::new(cfg.buffer_capacity, root.fork(BUFFER_STREAM));
    let replay_rng = root.fork(REPLAY_STREAM);
    let ft_rng = root.fork(FINETUNE_STREAM);
    let mut fresh_rng = root.fork(FRESH_MODEL_STREAM);
    let mut r = Runner {
        cfg,
        flops: FlopsModel::of(&model),
        model,
        buffer,
        ledger: FlopsLedger::default(),
        replay_rng,
        ft_rng,
        step: 0,
        ft_reads: 0,
        fpf_passes: 0,
    };
    let mut probes = match schedule {
        Schedule::Kfpf(k, _) => Some(Probes::new(k, &r.model)),
        _ => None,
    };
    let mut identified: Option<(SensitivityReport, SelectionMask)> = None;
    let mut snapshots = Vec::new();

    for batch in batches {
        let x = flat(&batch.inputs)?;
        match cfg.method {
            Method::Sgd => r.sgd(&x, &batch.labels)?,
            Method::Er | Method::Der => r.replay(&x, &batch.labels)?,
            Method::Gdumb => {}
        }
        r.step += 1;
        r.insert(&x, &batch.labels, cfg.method != Method::Gdumb)?;
        if let Schedule::Kfpf(k, ft) = schedule {
            let i = k.identify_at() as u64;
            let p = probes.as_mut().expect("k-FPF probes");
            if r.step <= i && (r.step.is_multiple_of(p.interval as u64) || r.step == i) {
                p.take(&r.model, r.step)?;
            }
            if r.step == i {
                identified = Some(identify(k, p)?);
            }
            if r.step.is_multiple_of(k.tau as u64) {
                let mask = identified
                    .as_ref()
                    .expect("identified before first pass")
                    .1
                    .clone();
                r.finetune(&FinetuneConfig { mask, ..ft.clone() }, k.objective)?;
            }
        }
        if let Some(tag) = batch.tag.filter(|t| t.end_of_epoch) {
            snapshots.push(r.model.snapshot(tag.task, tag.epoch));
            obs.epoch_end(&r.model, tag, r.step, &r.ledger)
                .map_err(EngineError::Observer)?;
        }
    }

    match schedule {
        Schedule::Plain => {}
        Schedule::Gdumb(ft) => {
            r.model = Model::new(r.model.spec().clone(), &mut fresh_rng)?;
            r.finetune(ft, super::Objective::Ce)?;
        }
        Schedule::Kfpf(k, ft) => {
            if identified.is_none() {
                let p = probes.as_mut().expect("k-FPF probes");
                p.take(&r.model, r.step)?;
                identified = Some(identify(k, p)?);
            }
            let mask = identified.as_ref().expect("identified").1.clone();
            r.finetune(&FinetuneConfig { mask, ..ft.clone() }, k.objective)?;
        }
    }

    let cl_buffer_reads = r.buffer.reads() - r.ft_reads;
    let (sensitivity, mask) = match identified {
        Some((rep, m)) => (Some(rep), Some(m)),
        None => (None, None),
    };
    Ok(RunOutput {
        model: r.model,
        buffer: r.buffer,
        snapshots,
        ledger: r.ledger,
        steps: r.step,
        fpf_passes: r.fpf_passes,
        cl_buffer_reads,
        sensitivity,
        mask,
    })
}

fn identify(k: &KfpfConfig, probes: &Probes) -> Result<(SensitivityReport, SelectionMask)> {
    let (report, found) = probes.identify(k.threshold)?;
    Ok((report, k.mask_override.clone().unwrap_or(found)))
}

/// Run whichever method `cfg.method` names.
pub fn run_method(
    cfg: &TrainConfig,
    model: Model,
    batches: &[Batch],
    finetune: &FinetuneConfig,
    obs: &mut dyn Observer,
) -> Result<RunOutput> {
    match cfg.method {
        Method::Gdumb => run_gdumb(cfg, model, batches, finetune, obs),
        _ => run(cfg, model, batches, Schedule::Plain, obs),
    }
}

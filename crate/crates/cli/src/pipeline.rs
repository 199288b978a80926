//! `train`: build the stream, run the configured method, write the run directory.

use std::path::{Path, PathBuf};

use forgetlab_core::data::{BatchTag, Stream, TaskDataset};
use forgetlab_core::dynamics::SensitivityReport;
use forgetlab_core::engine::{
    evaluate, fpf, run_der, run_er, run_gdumb, run_kfpf, run_sgd, EvalResult, FlopsLedger,
    Objective, Observer, RunOutput,
};
use forgetlab_core::nn::{Model, SelectionMask};
use forgetlab_core::rng::Rng;
use serde::{Deserialize, Serialize};

use crate::commands::{cmd_fpf, FpfOptions};
use crate::config::{MethodChoice, RunConfig};
use crate::manifest::{now, Command, RunManifest};
use crate::metrics::{save_metrics, MetricsRow, METRICS_FILE};
use crate::{create_dir, write_json, CliError, Result};

pub const BUFFER_FILE: &str = "buffer.bin";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const FINAL_CHECKPOINT: &str = "checkpoints/final.ckpt";
pub const FPF_CHECKPOINT: &str = "checkpoints/fpf.ckpt";
pub const IDENTIFICATION_FILE: &str = "identification.json";

// Salts for run-level random streams; the engine uses 1..=4 of the same seed.
const BATCH_ORDER_STREAM: u64 = 10;
const MODEL_INIT_STREAM: u64 = 11;
pub(crate) const POST_HOC_FPF_STREAM: u64 = 12;

pub fn checkpoint_name(task: usize, epoch: usize) -> String {
    format!("{CHECKPOINT_DIR}/t{task:02}_e{epoch:02}.ckpt")
}

/// Headline numbers of a run, kept next to the metrics for `fpf` and `report`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub method: String,
    pub steps: u64,
    pub ledger: FlopsLedger,
    #[serde(rename = "final")]
    pub final_eval: EvalResult,
    /// After post-hoc finetuning, when configured.
    pub fpf: Option<EvalResult>,
    /// Ledger including the post-hoc pass.
    pub fpf_ledger: Option<FlopsLedger>,
    pub fpf_passes: usize,
    pub cl_buffer_reads: u64,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub rows: Vec<MetricsRow>,
    pub summary: RunSummary,
}

impl RunOutcome {
    /// Accuracy after everything the config asked for.
    pub fn accuracy(&self) -> f64 {
        self.summary
            .fpf
            .as_ref()
            .unwrap_or(&self.summary.final_eval)
            .average
    }

    pub fn total_flops(&self) -> u64 {
        self.summary
            .fpf_ledger
            .unwrap_or(self.summary.ledger)
            .total()
    }
}

#[derive(Debug, Clone, Serialize)]
struct Identification<'a> {
    report: &'a SensitivityReport,
    mask: &'a SelectionMask,
}

struct EpochRecorder<'a> {
    cfg: &'a RunConfig,
    run_id: &'a str,
    method: &'a str,
    val: &'a [TaskDataset],
    dir: &'a Path,
    rows: Vec<MetricsRow>,
    files: Vec<String>,
}

impl EpochRecorder<'_> {
    fn record(
        &mut self,
        model: &Model,
        tag: BatchTag,
        step: u64,
        ledger: &FlopsLedger,
    ) -> Result<()> {
        if self.cfg.output.eval_each_epoch {
            self.rows.push(MetricsRow {
                run_id: self.run_id.to_string(),
                method: self.method.to_string(),
                stage: "epoch".into(),
                step,
                task: Some(tag.task),
                epoch: Some(tag.epoch),
                split: "val".into(),
                eval: evaluate(model, self.val)?,
                ledger: *ledger,
            });
        }
        if self.cfg.output.checkpoints {
            let name = checkpoint_name(tag.task, tag.epoch);
            model.save(&self.dir.join(&name), Some((tag.task, tag.epoch)))?;
            self.files.push(name);
        }
        Ok(())
    }
}

impl Observer for EpochRecorder<'_> {
    fn epoch_end(
        &mut self,
        model: &Model,
        tag: BatchTag,
        step: u64,
        ledger: &FlopsLedger,
    ) -> std::result::Result<(), String> {
        self.record(model, tag, step, ledger)
            .map_err(|e| e.to_string())
    }
}

pub(crate) fn build_stream(cfg: &RunConfig) -> Result<Stream> {
    Ok(cfg.stream_spec().build()?)
}

/// Run `cfg` and write its run directory under `out_root`.
pub fn execute(cfg: &RunConfig, out_root: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    let started = now();
    let stream = build_stream(cfg)?;
    let mut rng = Rng::new(cfg.seed);
    let order_seed = rng.fork(BATCH_ORDER_STREAM).seed();
    let batches = stream.batches(cfg.stream.epochs, cfg.stream.batch_size, order_seed);
    let cfg = cfg.resolve(batches.len());
    let run_id = cfg.run_id.clone().expect("resolved");
    let method = cfg.method_label();
    let dir = out_root.join(&run_id);
    create_dir(&dir.join(CHECKPOINT_DIR))?;

    let spec = cfg.model_spec(stream.sample_shape(), stream.num_classes);
    let model = Model::new(spec, &mut Rng::new(cfg.seed).fork(MODEL_INIT_STREAM))?;
    let train = cfg.train_config();
    let mut rec = EpochRecorder {
        cfg: &cfg,
        run_id: &run_id,
        method: &method,
        val: &stream.val,
        dir: &dir,
        rows: Vec::new(),
        files: Vec::new(),
    };
    let out: RunOutput = match cfg.train.method {
        MethodChoice::Sgd => run_sgd(&train, model, &batches, &mut rec)?,
        MethodChoice::Er => run_er(&train, model, &batches, &mut rec)?,
        MethodChoice::Der => run_der(&train, model, &batches, &mut rec)?,
        MethodChoice::Gdumb => run_gdumb(&train, model, &batches, &cfg.gdumb_finetune(), &mut rec)?,
        MethodChoice::Kfpf => {
            let (kc, ft) = cfg.kfpf_configs()?.expect("resolved");
            run_kfpf(&train, model, &batches, &kc, &ft, &mut rec)?
        }
    };
    let EpochRecorder {
        mut rows,
        mut files,
        ..
    } = rec;

    let final_eval = evaluate(&out.model, &stream.val)?;
    let row = |stage: &str, method: &str, eval: &EvalResult, ledger: FlopsLedger| MetricsRow {
        run_id: run_id.clone(),
        method: method.to_string(),
        stage: stage.into(),
        step: out.steps,
        task: None,
        epoch: None,
        split: "val".into(),
        eval: eval.clone(),
        ledger,
    };
    rows.push(row("final", &method, &final_eval, out.ledger));
    out.model.save(&dir.join(FINAL_CHECKPOINT), None)?;
    files.push(FINAL_CHECKPOINT.into());
    out.buffer.save(&dir.join(BUFFER_FILE))?;
    files.push(BUFFER_FILE.into());

    let (mut fpf_eval, mut fpf_ledger) = (None, None);
    if let Some(ft) = cfg.fpf_finetune()? {
        let mut model = out.model.clone();
        let mut ledger = out.ledger;
        let mut rng = Rng::new(cfg.seed).fork(POST_HOC_FPF_STREAM);
        fpf(
            &mut model,
            &out.buffer,
            &ft,
            Objective::Ce,
            &mut rng,
            &mut ledger,
        )?;
        let eval = evaluate(&model, &stream.val)?;
        rows.push(row("fpf", &format!("fpf+{method}"), &eval, ledger));
        model.save(&dir.join(FPF_CHECKPOINT), None)?;
        files.push(FPF_CHECKPOINT.into());
        fpf_eval = Some(eval);
        fpf_ledger = Some(ledger);
    }
    if let (Some(report), Some(mask)) = (&out.sensitivity, &out.mask) {
        write_json(
            &dir.join(IDENTIFICATION_FILE),
            &Identification { report, mask },
        )?;
        files.push(IDENTIFICATION_FILE.into());
    }

    save_metrics(&dir.join(METRICS_FILE), stream.num_tasks(), &rows)?;
    files.push(METRICS_FILE.into());
    let summary = RunSummary {
        run_id: run_id.clone(),
        method,
        steps: out.steps,
        ledger: out.ledger,
        final_eval,
        fpf: fpf_eval,
        fpf_ledger,
        fpf_passes: out.fpf_passes,
        cl_buffer_reads: out.cl_buffer_reads,
    };
    write_json(&dir.join(SUMMARY_FILE), &summary)?;
    files.push(SUMMARY_FILE.into());

    let mut manifest = RunManifest::new(Command::Train, cfg, started);
    manifest.finish(&dir, &files)?;
    Ok(RunOutcome {
        dir,
        manifest,
        rows,
        summary,
    })
}

/// Repeat the run a manifest describes, writing under `out_root`.
pub fn rerun_manifest(manifest: &RunManifest, out_root: &Path) -> Result<PathBuf> {
    match manifest.command {
        Command::Train => Ok(execute(&manifest.config, out_root)?.dir),
        Command::Fpf => {
            let parent = manifest
                .parent
                .as_ref()
                .ok_or_else(|| CliError::BadManifest {
                    path: PathBuf::from(&manifest.run_id),
                    message: "fpf manifest without a parent run".into(),
                })?;
            let opts = FpfOptions::from_section(manifest.finetune.clone().unwrap_or_default());
            Ok(cmd_fpf(parent, &opts, out_root)?.dir)
        }
    }
}

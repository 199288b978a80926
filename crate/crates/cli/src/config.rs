//! Run configuration: a TOML tree whose defaults are fully resolved before a
//! run starts, so the manifest echoes every value that shaped the results.

use forgetlab_core::data::{DataSource, DomainTransform, StreamMode, StreamSpec};
use forgetlab_core::dynamics::{FPF_THRESHOLD, KFPF_THRESHOLD};
use forgetlab_core::engine::{
    FinetuneConfig, KfpfConfig, Method, Objective, TrainConfig, FINETUNE_BATCH, FPF_STEPS,
    KFPF_STEPS,
};
use forgetlab_core::nn::{Arch, ModelSpec, SelectionMask};
use serde::{Deserialize, Serialize};

use crate::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Directory name under the output root; derived from method and seed when absent.
    #[serde(default)]
    pub run_id: Option<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub stream: StreamSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    /// Post-hoc finetuning applied after the continual run.
    #[serde(default)]
    pub fpf: Option<FpfSection>,
    /// Periodic finetuning; required (and defaulted) when `train.method = "kfpf"`.
    #[serde(default)]
    pub kfpf: Option<KfpfSection>,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSection {
    #[serde(default = "default_mode")]
    pub mode: StreamMode,
    #[serde(default = "default_tasks")]
    pub tasks: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_source")]
    pub source: DataSource,
    #[serde(default)]
    pub chunks: Option<Vec<usize>>,
    #[serde(default)]
    pub transform: Option<DomainTransform>,
    #[serde(default)]
    pub sample_shape: Option<Vec<usize>>,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_arch")]
    pub arch: Arch,
    /// Hidden widths for the MLPs; `[100, 100]` when absent.
    #[serde(default)]
    pub hidden_widths: Option<Vec<usize>>,
    /// Conv stage widths for `cnn_bn`; `[8, 16, 32]` when absent.
    #[serde(default)]
    pub conv_channels: Option<Vec<usize>>,
    #[serde(default = "default_momentum")]
    pub bn_momentum: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodChoice {
    Sgd,
    Er,
    Der,
    Gdumb,
    Kfpf,
}

impl MethodChoice {
    pub fn as_str(self) -> &'static str {
        match self {
            MethodChoice::Sgd => "sgd",
            MethodChoice::Er => "er",
            MethodChoice::Der => "der",
            MethodChoice::Gdumb => "gdumb",
            MethodChoice::Kfpf => "kfpf",
        }
    }

    fn engine(self) -> Method {
        match self {
            MethodChoice::Sgd | MethodChoice::Kfpf => Method::Sgd,
            MethodChoice::Er => Method::Er,
            MethodChoice::Der => Method::Der,
            MethodChoice::Gdumb => Method::Gdumb,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_method")]
    pub method: MethodChoice,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub replay_batch_size: usize,
    #[serde(default = "default_capacity")]
    pub buffer_capacity: usize,
    #[serde(default = "default_der_lambda")]
    pub der_lambda: f64,
    /// Steps used by GDUMB's final fit on the buffer.
    #[serde(default = "default_fpf_steps")]
    pub gdumb_steps: usize,
    #[serde(default = "default_lr")]
    pub gdumb_lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FpfSection {
    /// Comma-separated group ids, e.g. `"BN_AFFINE,BN_STATS,FC_LAST"`.
    #[serde(default = "default_fpf_mask")]
    pub mask: String,
    #[serde(default = "default_fpf_steps")]
    pub steps: usize,
    #[serde(default = "default_ft_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveChoice {
    Ce,
    Kd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KfpfSection {
    /// Target number of periodic passes; used to size `tau` when it is absent.
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub tau: Option<usize>,
    #[serde(default = "default_objective")]
    pub objective: ObjectiveChoice,
    #[serde(default = "default_kd_lambda")]
    pub lambda: f64,
    #[serde(default = "default_kfpf_steps")]
    pub steps: usize,
    #[serde(default = "default_ft_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_kfpf_threshold")]
    pub threshold: f64,
    #[serde(default = "default_probes")]
    pub probes: usize,
    #[serde(default)]
    pub identify_step: Option<usize>,
    /// Fixed mask instead of identification.
    #[serde(default)]
    pub mask: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    /// Write a checkpoint at every epoch end (needed by `dynamics`).
    #[serde(default = "default_true")]
    pub checkpoints: bool,
    /// Evaluate on the validation split at every epoch end.
    #[serde(default = "default_true")]
    pub eval_each_epoch: bool,
    /// Threshold for the finetuning mask reported in `sensitivity.json`.
    #[serde(default = "default_fpf_threshold")]
    pub threshold: f64,
}

fn default_mode() -> StreamMode {
    StreamMode::ClassIl
}
fn default_tasks() -> usize {
    5
}
fn default_epochs() -> usize {
    5
}
fn default_source() -> DataSource {
    DataSource::SyntheticGaussian {
        num_classes: 10,
        dim: 16,
        per_class: 500,
        sep: 6.0,
    }
}
fn default_val_fraction() -> f64 {
    0.1
}
fn default_batch() -> usize {
    32
}
fn default_arch() -> Arch {
    Arch::MlpBn
}
fn default_momentum() -> f64 {
    0.1
}
fn default_method() -> MethodChoice {
    MethodChoice::Sgd
}
fn default_lr() -> f64 {
    0.05
}
fn default_capacity() -> usize {
    200
}
fn default_der_lambda() -> f64 {
    0.5
}
fn default_fpf_mask() -> String {
    "BN_AFFINE,BN_STATS,FC_LAST".into()
}
fn default_fpf_steps() -> usize {
    FPF_STEPS
}
fn default_kfpf_steps() -> usize {
    KFPF_STEPS
}
fn default_ft_batch() -> usize {
    FINETUNE_BATCH
}
fn default_k() -> usize {
    5
}
fn default_objective() -> ObjectiveChoice {
    ObjectiveChoice::Ce
}
fn default_kd_lambda() -> f64 {
    0.5
}
fn default_kfpf_threshold() -> f64 {
    KFPF_THRESHOLD
}
fn default_fpf_threshold() -> f64 {
    FPF_THRESHOLD
}
fn default_probes() -> usize {
    10
}
fn default_true() -> bool {
    true
}

macro_rules! impl_default_from_empty_table {
    ($($t:ty),*) => {$(
        impl Default for $t {
            fn default() -> Self {
                toml::from_str("").expect("every field has a default")
            }
        }
    )*};
}

impl_default_from_empty_table!(
    RunConfig,
    StreamSection,
    ModelSection,
    TrainSection,
    FpfSection,
    KfpfSection,
    OutputSection
);

fn invalid(field: &str, message: impl Into<String>) -> CliError {
    CliError::ConfigInvalid {
        field: field.to_string(),
        message: message.into(),
    }
}

/// Parse a TOML config; errors name the offending field path.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = deserialize_toml(text)?;
    cfg.validate()?;
    Ok(cfg)
}

pub(crate) fn deserialize_toml<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    let de = toml::Deserializer::parse(text).map_err(|e| invalid("", e.to_string()))?;
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        invalid(
            if field == "." { "" } else { &field },
            e.into_inner().to_string(),
        )
    })
}

pub(crate) fn parse_mask(field: &str, s: &str) -> Result<SelectionMask> {
    SelectionMask::parse_list(s).map_err(|e| invalid(field, e.to_string()))
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |field: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(invalid(field, format!("must be positive, got {v}")))
            }
        };
        let nonzero = |field: &str, v: usize| {
            if v > 0 {
                Ok(())
            } else {
                Err(invalid(field, "must be at least 1"))
            }
        };
        nonzero("stream.tasks", self.stream.tasks)?;
        nonzero("stream.epochs", self.stream.epochs)?;
        nonzero("stream.batch_size", self.stream.batch_size)?;
        if !(0.0..1.0).contains(&self.stream.val_fraction) {
            return Err(invalid("stream.val_fraction", "must lie in [0, 1)"));
        }
        if self.stream.mode == StreamMode::DomainIl && self.stream.transform.is_none() {
            return Err(invalid("stream.transform", "domain_il needs a transform"));
        }
        positive("train.lr", self.train.lr)?;
        nonzero("train.replay_batch_size", self.train.replay_batch_size)?;
        if !(self.train.der_lambda >= 0.0) {
            return Err(invalid("train.der_lambda", "must be nonnegative"));
        }
        let needs_buffer = matches!(
            self.train.method,
            MethodChoice::Er | MethodChoice::Der | MethodChoice::Kfpf
        ) || self.fpf.is_some();
        if needs_buffer && self.train.buffer_capacity == 0 {
            return Err(invalid(
                "train.buffer_capacity",
                "this method needs a buffer",
            ));
        }
        if self.train.method == MethodChoice::Gdumb {
            positive("train.gdumb_lr", self.train.gdumb_lr)?;
        }
        if let Some(f) = &self.fpf {
            parse_mask("fpf.mask", &f.mask)?;
            positive("fpf.lr", f.lr)?;
            nonzero("fpf.batch_size", f.batch_size)?;
        }
        if let Some(k) = &self.kfpf {
            if self.train.method != MethodChoice::Kfpf {
                return Err(invalid("kfpf", "only used with train.method = \"kfpf\""));
            }
            nonzero("kfpf.k", k.k)?;
            if k.tau == Some(0) {
                return Err(invalid("kfpf.tau", "must be at least 1"));
            }
            positive("kfpf.lr", k.lr)?;
            nonzero("kfpf.batch_size", k.batch_size)?;
            nonzero("kfpf.probes", k.probes)?;
            if !(k.lambda >= 0.0) {
                return Err(invalid("kfpf.lambda", "must be nonnegative"));
            }
            if let Some(m) = &k.mask {
                parse_mask("kfpf.mask", m)?;
            }
        }
        if let Some(w) = &self.model.hidden_widths {
            if w.contains(&0) {
                return Err(invalid("model.hidden_widths", "widths must be positive"));
            }
        }
        Ok(())
    }

    pub fn method_label(&self) -> String {
        let base = self.train.method.as_str();
        match (&self.kfpf, self.train.method) {
            (Some(k), MethodChoice::Kfpf) if k.objective == ObjectiveChoice::Kd => "kfpf-kd".into(),
            (_, MethodChoice::Kfpf) => "kfpf-ce".into(),
            _ => base.into(),
        }
    }

    pub fn stream_spec(&self) -> StreamSpec {
        let s = &self.stream;
        StreamSpec {
            mode: s.mode,
            tasks: s.tasks,
            epochs: s.epochs,
            source: s.source.clone(),
            chunks: s.chunks.clone(),
            transform: s.transform.clone(),
            sample_shape: s.sample_shape.clone(),
            val_fraction: s.val_fraction,
            seed: self.seed,
        }
    }

    pub fn model_spec(&self, input_shape: &[usize], num_classes: usize) -> ModelSpec {
        let d: usize = input_shape.iter().product();
        let mut spec = match self.model.arch {
            Arch::Mlp => ModelSpec::mlp(d, num_classes),
            Arch::MlpBn => ModelSpec::mlp_bn(d, num_classes),
            Arch::CnnBn => {
                let mut s = ModelSpec::cnn_bn([1, 1, 1], num_classes);
                s.input_shape = input_shape.to_vec();
                s
            }
        };
        if let Some(w) = &self.model.hidden_widths {
            spec.hidden_widths = w.clone();
        }
        if let Some(c) = &self.model.conv_channels {
            spec.conv_channels = c.clone();
        }
        spec.bn_momentum = self.model.bn_momentum;
        spec
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            method: t.method.engine(),
            lr: t.lr,
            batch_size: self.stream.batch_size,
            replay_batch_size: t.replay_batch_size,
            epochs: self.stream.epochs,
            buffer_capacity: t.buffer_capacity,
            der_lambda: t.der_lambda,
            seed: self.seed,
        }
    }

    /// Finetuning schedule for GDUMB's final fit; the engine replaces the mask.
    pub fn gdumb_finetune(&self) -> FinetuneConfig {
        FinetuneConfig::new(
            SelectionMask::empty(),
            self.train.gdumb_steps,
            self.train.gdumb_lr,
        )
    }

    pub fn fpf_finetune(&self) -> Result<Option<FinetuneConfig>> {
        self.fpf
            .as_ref()
            .map(|f| {
                Ok(FinetuneConfig {
                    mask: parse_mask("fpf.mask", &f.mask)?,
                    steps: f.steps,
                    batch_size: f.batch_size,
                    lr: f.lr,
                })
            })
            .transpose()
    }

    /// Fill in everything that depends on the stream: `run_id`, the `[kfpf]`
    /// table for k-FPF runs, and `kfpf.tau` sized from `total_steps`.
    pub fn resolve(&self, total_steps: usize) -> RunConfig {
        let mut cfg = self.clone();
        if cfg.run_id.is_none() {
            cfg.run_id = Some(format!("{}-seed{}", cfg.method_label(), cfg.seed));
        }
        if cfg.train.method == MethodChoice::Kfpf {
            let k = cfg.kfpf.get_or_insert_with(KfpfSection::default);
            if k.tau.is_none() {
                k.tau = Some(KfpfConfig::tau_for(total_steps, k.k));
            }
            if k.identify_step.is_none() {
                k.identify_step = k.tau;
            }
        }
        cfg
    }

    /// The engine's k-FPF settings; call on a resolved config.
    pub fn kfpf_configs(&self) -> Result<Option<(KfpfConfig, FinetuneConfig)>> {
        let Some(k) = &self.kfpf else { return Ok(None) };
        let objective = match k.objective {
            ObjectiveChoice::Ce => Objective::Ce,
            ObjectiveChoice::Kd => Objective::Kd { lambda: k.lambda },
        };
        let tau = k.tau.ok_or_else(|| invalid("kfpf.tau", "unresolved"))?;
        let kc = KfpfConfig {
            tau,
            objective,
            identify_step: k.identify_step,
            threshold: k.threshold,
            probes: k.probes,
            mask_override: k
                .mask
                .as_deref()
                .map(|m| parse_mask("kfpf.mask", m))
                .transpose()?,
        };
        let ft = FinetuneConfig {
            mask: SelectionMask::empty(),
            steps: k.steps,
            batch_size: k.batch_size,
            lr: k.lr,
        };
        Ok(Some((kc, ft)))
    }
}

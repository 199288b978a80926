//! Small networks (MLP, MLP with batch norm, conv net with batch norm) whose
//! parameters are partitioned into the groups used for dynamics analysis and
//! selective finetuning.

mod checkpoint;
mod flops;
mod groups;
mod snapshot;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use flops::{LayerFlops, BACKWARD_FACTOR, BN_FLOPS_PER_ELEMENT, RELU_FLOPS_PER_ELEMENT};
pub use groups::{group_fraction, GroupId, ParameterGroup, SelectionMask};
pub use snapshot::{ModelSnapshot, SnapshotMember};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Rng;
use crate::tensor::{BatchStats, Graph, NodeId, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("input shape {got:?} does not match model input {expected:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("unknown parameter group `{0}`")]
    UnknownGroup(String),
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Mlp,
    MlpBn,
    CnnBn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Arch,
    /// Per-sample input shape: `[d]` for MLPs, `[C, H, W]` for the conv net.
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    #[serde(default)]
    pub hidden_widths: Vec<usize>,
    #[serde(default)]
    pub conv_channels: Vec<usize>,
    #[serde(default = "default_kernel")]
    pub kernel_size: usize,
    #[serde(default = "default_momentum")]
    pub bn_momentum: f64,
    #[serde(default = "default_eps")]
    pub bn_eps: f64,
}

fn default_kernel() -> usize {
    3
}
fn default_momentum() -> f64 {
    0.1
}
fn default_eps() -> f64 {
    1e-5
}

impl ModelSpec {
    /// Two hidden layers of 100 ReLU units.
    pub fn mlp(input_dim: usize, num_classes: usize) -> Self {
        Self {
            arch: Arch::Mlp,
            input_shape: vec![input_dim],
            num_classes,
            hidden_widths: vec![100, 100],
            conv_channels: vec![],
            kernel_size: 3,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }

    pub fn mlp_bn(input_dim: usize, num_classes: usize) -> Self {
        Self {
            arch: Arch::MlpBn,
            ..Self::mlp(input_dim, num_classes)
        }
    }

    /// Three stride-2 3×3 conv stages (8, 16, 32 channels), each followed by
    /// batch norm and ReLU, then global average pooling and a dense head.
    pub fn cnn_bn(input_shape: [usize; 3], num_classes: usize) -> Self {
        Self {
            arch: Arch::CnnBn,
            input_shape: input_shape.to_vec(),
            num_classes,
            hidden_widths: vec![],
            conv_channels: vec![8, 16, 32],
            kernel_size: 3,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidSpec(m.to_string()));
        if self.num_classes == 0 {
            return bad("num_classes must be positive");
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad("bn_eps must be > 0 and bn_momentum in [0, 1]");
        }
        match self.arch {
            Arch::Mlp | Arch::MlpBn => {
                if self.input_shape.len() != 1 {
                    return bad("MLP input_shape must be [d]");
                }
            }
            Arch::CnnBn => {
                if self.input_shape.len() != 3 || self.conv_channels.is_empty() {
                    return bad("CNN needs input_shape [C, H, W] and at least one conv stage");
                }
                if self.kernel_size == 0 || self.kernel_size.is_multiple_of(2) {
                    return bad("kernel_size must be odd");
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub layer: usize,
    pub group: GroupId,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Layer {
    Dense {
        weight: usize,
        bias: usize,
    },
    Conv {
        weight: usize,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        gamma: usize,
        beta: usize,
        mean: usize,
        var: usize,
    },
    Relu,
    GlobalAvgPool,
}

/// Running-stat update: `(mean param index, var param index, batch moments)`.
type StatUpdate = (usize, usize, BatchStats);

/// Output of a graph-recording forward pass.
#[derive(Debug)]
pub struct ForwardPass {
    pub logits: NodeId,
    /// Graph node of each parameter, when it was registered as a leaf.
    pub param_nodes: Vec<Option<NodeId>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    layers: Vec<Layer>,
    params: Vec<Param>,
}

struct Builder {
    layers: Vec<Layer>,
    params: Vec<Param>,
}

impl Builder {
    fn param(&mut self, name: String, kind: ParamKind, group: GroupId, tensor: Tensor) -> usize {
        self.params.push(Param {
            name,
            kind,
            layer: self.layers.len(),
            group,
            tensor,
        });
        self.params.len() - 1
    }

    fn he(rng: &mut Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.normal() * std).collect()).expect("sized")
    }

    fn dense(&mut self, rng: &mut Rng, idx: usize, fan_in: usize, fan_out: usize, last: bool) {
        let group = if last {
            GroupId::FcLast
        } else {
            GroupId::FcHidden
        };
        let w = Self::he(rng, vec![fan_in, fan_out], fan_in);
        let weight = self.param(format!("fc{idx}.weight"), ParamKind::Weight, group, w);
        let bias = self.param(
            format!("fc{idx}.bias"),
            ParamKind::Bias,
            group,
            Tensor::zeros(vec![fan_out]),
        );
        self.layers.push(Layer::Dense { weight, bias });
    }

    fn batch_norm(&mut self, idx: usize, channels: usize) {
        let gamma = self.param(
            format!("bn{idx}.gamma"),
            ParamKind::Gamma,
            GroupId::BnAffine,
            Tensor::filled(vec![channels], 1.0),
        );
        let beta = self.param(
            format!("bn{idx}.beta"),
            ParamKind::Beta,
            GroupId::BnAffine,
            Tensor::zeros(vec![channels]),
        );
        let mean = self.param(
            format!("bn{idx}.running_mean"),
            ParamKind::RunningMean,
            GroupId::BnStats,
            Tensor::zeros(vec![channels]),
        );
        let var = self.param(
            format!("bn{idx}.running_var"),
            ParamKind::RunningVar,
            GroupId::BnStats,
            Tensor::filled(vec![channels], 1.0),
        );
        self.layers.push(Layer::BatchNorm {
            gamma,
            beta,
            mean,
            var,
        });
    }
}

impl Model {
    /// Build and initialize a model. Weights use He-normal initialization,
    /// biases and BN shifts start at zero, BN scales and running variances at one.
    pub fn new(spec: ModelSpec, rng: &mut Rng) -> Result<Self, ModelError> {
        spec.validate()?;
        let mut b = Builder {
            layers: vec![],
            params: vec![],
        };
        match spec.arch {
            Arch::Mlp | Arch::MlpBn => {
                let mut fan_in = spec.input_shape[0];
                for (i, &w) in spec.hidden_widths.iter().enumerate() {
                    b.dense(rng, i + 1, fan_in, w, false);
                    if spec.arch == Arch::MlpBn {
                        b.batch_norm(i + 1, w);
                    }
                    b.layers.push(Layer::Relu);
                    fan_in = w;
                }
                b.dense(
                    rng,
                    spec.hidden_widths.len() + 1,
                    fan_in,
                    spec.num_classes,
                    true,
                );
            }
            Arch::CnnBn => {
                let k = spec.kernel_size;
                let mut c_in = spec.input_shape[0];
                for (i, &c_out) in spec.conv_channels.iter().enumerate() {
                    let group = if i == 0 {
                        GroupId::Conv1
                    } else {
                        GroupId::ConvBlock(i)
                    };
                    let w = Builder::he(rng, vec![c_out, c_in, k, k], c_in * k * k);
                    let weight =
                        b.param(format!("conv{}.weight", i + 1), ParamKind::Weight, group, w);
                    b.layers.push(Layer::Conv {
                        weight,
                        stride: 2,
                        pad: k / 2,
                    });
                    b.batch_norm(i + 1, c_out);
                    b.layers.push(Layer::Relu);
                    c_in = c_out;
                }
                b.layers.push(Layer::GlobalAvgPool);
                b.dense(rng, 1, c_in, spec.num_classes, true);
            }
        }
        Ok(Self {
            spec,
            layers: b.layers,
            params: b.params,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Parameter groups in a stable order, partitioning every parameter.
    pub fn groups(&self) -> Vec<ParameterGroup> {
        let mut out: Vec<ParameterGroup> = Vec::new();
        for (i, p) in self.params.iter().enumerate() {
            let pos = match out.iter().position(|g| g.group_id == p.group) {
                Some(pos) => pos,
                None => {
                    out.push(ParameterGroup {
                        group_id: p.group,
                        layer_ids: vec![],
                        param_ids: vec![],
                        param_count: 0,
                    });
                    out.len() - 1
                }
            };
            let g = &mut out[pos];
            if !g.layer_ids.contains(&p.layer) {
                g.layer_ids.push(p.layer);
            }
            g.param_ids.push(i);
            g.param_count += p.tensor.len();
        }
        out.sort_by_key(|g| g.group_id);
        out
    }

    pub fn group_ids(&self) -> Vec<GroupId> {
        self.groups().into_iter().map(|g| g.group_id).collect()
    }

    pub fn has_batch_norm(&self) -> bool {
        self.layers
            .iter()
            .any(|l| matches!(l, Layer::BatchNorm { .. }))
    }

    /// Reshape a `[B, ...]` batch into the layout the first layer expects.
    fn batch_shape(&self, x: &Tensor) -> Result<Vec<usize>, ModelError> {
        let shape = x.shape();
        let per: usize = shape.iter().skip(1).product();
        if shape.is_empty() || per != self.spec.input_len() {
            return Err(ModelError::ShapeMismatch {
                expected: self.spec.input_shape.clone(),
                got: shape.get(1..).unwrap_or(&[]).to_vec(),
            });
        }
        if shape.len() > 2 && shape[1..] != self.spec.input_shape[..] {
            return Err(ModelError::ShapeMismatch {
                expected: self.spec.input_shape.clone(),
                got: shape[1..].to_vec(),
            });
        }
        let mut s = vec![shape[0]];
        s.extend_from_slice(&self.spec.input_shape);
        Ok(s)
    }

    /// Record a forward pass on `g`.
    ///
    /// Parameters of groups in `trainable` (all trainable groups when `None`)
    /// become gradient-collecting leaves. Train mode normalizes with batch
    /// moments and updates BN running statistics; eval mode uses the stored
    /// statistics and leaves the model untouched.
    pub fn forward_graph(
        &mut self,
        g: &mut Graph,
        x: &Tensor,
        mode: Mode,
        trainable: Option<&SelectionMask>,
    ) -> Result<ForwardPass, ModelError> {
        let (pass, updates) = self.record(g, x, mode, trainable)?;
        let momentum = self.spec.bn_momentum;
        for (mean, var, stats) in updates {
            let unbias = if stats.count > 1 {
                stats.count as f64 / (stats.count - 1) as f64
            } else {
                1.0
            };
            for (r, m) in self.params[mean]
                .tensor
                .data_mut()
                .iter_mut()
                .zip(&stats.mean)
            {
                *r = (1.0 - momentum) * *r + momentum * m;
            }
            for (r, v) in self.params[var]
                .tensor
                .data_mut()
                .iter_mut()
                .zip(&stats.var)
            {
                *r = (1.0 - momentum) * *r + momentum * v * unbias;
            }
        }
        Ok(pass)
    }

    /// Builds the graph; returns pending running-stat updates.
    fn record(
        &self,
        g: &mut Graph,
        x: &Tensor,
        mode: Mode,
        trainable: Option<&SelectionMask>,
    ) -> Result<(ForwardPass, Vec<StatUpdate>), ModelError> {
        let shape = self.batch_shape(x)?;
        let mut param_nodes = vec![None; self.params.len()];
        let mut updates = Vec::new();
        let wants = |grp: GroupId| grp.is_trainable() && trainable.is_none_or(|m| m.contains(grp));
        let mut node_of = |g: &mut Graph, idx: usize| -> NodeId {
            let p = &self.params[idx];
            let id = if wants(p.group) {
                g.leaf(p.tensor.clone().with_requires_grad(true))
            } else {
                g.constant(p.tensor.clone())
            };
            param_nodes[idx] = Some(id);
            id
        };
        let eps = self.spec.bn_eps;
        let mut h = g.constant(x.clone().reshape(shape)?);
        for layer in &self.layers {
            h = match *layer {
                Layer::Dense { weight, bias } => {
                    if g.shape(h).len() != 2 {
                        let n = g.shape(h)[0];
                        let rest = g.value(h).len() / n.max(1);
                        h = g.reshape(h, vec![n, rest])?;
                    }
                    let w = node_of(g, weight);
                    let b = node_of(g, bias);
                    let z = g.matmul(h, w)?;
                    g.add_bias(z, b)?
                }
                Layer::Conv {
                    weight,
                    stride,
                    pad,
                } => {
                    let w = node_of(g, weight);
                    g.conv2d(h, w, stride, pad)?
                }
                Layer::BatchNorm {
                    gamma,
                    beta,
                    mean,
                    var,
                } => {
                    let gn = node_of(g, gamma);
                    let bn = node_of(g, beta);
                    match mode {
                        Mode::Train => {
                            let (y, stats) = g.batch_norm_train(h, gn, bn, eps)?;
                            updates.push((mean, var, stats));
                            y
                        }
                        Mode::Eval => g.batch_norm_eval(
                            h,
                            gn,
                            bn,
                            self.params[mean].tensor.data(),
                            self.params[var].tensor.data(),
                            eps,
                        )?,
                    }
                }
                Layer::Relu => g.relu(h),
                Layer::GlobalAvgPool => g.global_avg_pool(h)?,
            };
        }
        Ok((
            ForwardPass {
                logits: h,
                param_nodes,
            },
            updates,
        ))
    }

    /// Forward pass returning logits `[B, num_classes]`. Train mode updates BN statistics.
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor, ModelError> {
        let mut g = Graph::new();
        let pass = self.forward_graph(&mut g, x, mode, Some(&SelectionMask::empty()))?;
        Ok(g.value(pass.logits).clone())
    }

    /// Eval-mode logits without touching the model.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        let mut g = Graph::new();
        let (pass, _) = self.record(&mut g, x, Mode::Eval, Some(&SelectionMask::empty()))?;
        Ok(g.value(pass.logits).clone())
    }

    /// Plain SGD on every parameter that collected a gradient in `g` and whose
    /// group is in `mask` (all groups when `None`). Groups outside the mask are
    /// left bit-identical.
    pub fn sgd_step(
        &mut self,
        g: &Graph,
        pass: &ForwardPass,
        lr: f64,
        mask: Option<&SelectionMask>,
    ) {
        for (p, node) in self.params.iter_mut().zip(&pass.param_nodes) {
            if !p.group.is_trainable() || mask.is_some_and(|m| !m.contains(p.group)) {
                continue;
            }
            let Some(grad) = node.and_then(|n| g.grad(n)) else {
                continue;
            };
            for (w, d) in p.tensor.data_mut().iter_mut().zip(grad) {
                *w -= lr * d;
            }
            debug_assert!(p.tensor.all_finite(), "non-finite parameter {}", p.name);
        }
    }

    /// Deep copy of every parameter, tagged with its stream position.
    pub fn snapshot(&self, task: usize, epoch: usize) -> ModelSnapshot {
        ModelSnapshot::capture(self, task, epoch)
    }

    /// Overwrite parameter values (same names and shapes) from another source.
    pub fn load_params(&mut self, params: &[(String, Tensor)]) -> Result<(), ModelError> {
        if params.len() != self.params.len() {
            return Err(ModelError::BadCheckpoint(format!(
                "expected {} parameter tensors, found {}",
                self.params.len(),
                params.len()
            )));
        }
        for (p, (name, t)) in self.params.iter_mut().zip(params) {
            if &p.name != name || p.tensor.shape() != t.shape() {
                return Err(ModelError::BadCheckpoint(format!(
                    "parameter {name} {:?} does not match {} {:?}",
                    t.shape(),
                    p.name,
                    p.tensor.shape()
                )));
            }
            p.tensor = t.clone().with_requires_grad(false);
        }
        Ok(())
    }

    /// Per-layer FLOPs at the given batch size.
    pub fn layer_flops(&self, batch: usize) -> Vec<LayerFlops> {
        flops::layer_flops(self, batch)
    }

    pub(crate) fn layers(&self) -> &[Layer] {
        &self.layers
    }
}

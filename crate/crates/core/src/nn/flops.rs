//! FLOPs model.
//!
//! Dense: `2·in·out` per sample. Conv: `2·K·K·C_in·C_out·H_out·W_out` per
//! sample. Batch norm costs [`BN_FLOPS_PER_ELEMENT`] per activation element,
//! ReLU and global pooling one per element. Every backward pass is counted as
//! [`BACKWARD_FACTOR`] times its forward pass, whether or not all parameters
//! receive updates.

use serde::Serialize;

use super::{Layer, Model};

pub const BACKWARD_FACTOR: u64 = 2;
/// Subtract mean, scale by inverse std, multiply by γ, add β.
pub const BN_FLOPS_PER_ELEMENT: u64 = 4;
pub const RELU_FLOPS_PER_ELEMENT: u64 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerFlops {
    pub layer: usize,
    pub kind: &'static str,
    pub forward: u64,
    pub backward: u64,
}

pub(super) fn layer_flops(model: &Model, batch: usize) -> Vec<LayerFlops> {
    let spec = model.spec();
    let b = batch as u64;
    let mut shape: Vec<usize> = spec.input_shape.clone();
    let mut out = Vec::new();
    for (i, layer) in model.layers().iter().enumerate() {
        let elems = shape.iter().product::<usize>() as u64;
        let (kind, fwd) = match *layer {
            Layer::Dense { weight, .. } => {
                let w = model.params()[weight].tensor.shape();
                let (fan_in, fan_out) = (w[0], w[1]);
                shape = vec![fan_out];
                ("dense", 2 * (fan_in * fan_out) as u64 * b)
            }
            Layer::Conv {
                weight,
                stride,
                pad,
            } => {
                let w = model.params()[weight].tensor.shape();
                let (c_out, c_in, k) = (w[0], w[1], w[2]);
                let ho = (shape[1] + 2 * pad - k) / stride + 1;
                let wo = (shape[2] + 2 * pad - k) / stride + 1;
                shape = vec![c_out, ho, wo];
                ("conv", 2 * (k * k * c_in * c_out * ho * wo) as u64 * b)
            }
            Layer::BatchNorm { .. } => ("batch_norm", BN_FLOPS_PER_ELEMENT * elems * b),
            Layer::Relu => ("relu", RELU_FLOPS_PER_ELEMENT * elems * b),
            Layer::GlobalAvgPool => {
                shape = vec![shape[0]];
                ("global_avg_pool", elems * b)
            }
        };
        out.push(LayerFlops {
            layer: i,
            kind,
            forward: fwd,
            backward: BACKWARD_FACTOR * fwd,
        });
    }
    out
}

impl Model {
    /// Forward FLOPs for a single sample.
    pub fn forward_flops_per_sample(&self) -> u64 {
        self.layer_flops(1).iter().map(|l| l.forward).sum()
    }
}

//! The composite network: strided patch extraction, K weight-shared kernel
//! networks applied to every patch, global average pooling of the per-patch
//! class logits, and a single softmax.
//!
//! Two kernel-network presets are supported. Both use 5×5 valid convolutions
//! with ReLU, 2×2 average pooling, a 1024-unit fully connected layer and a
//! linear logits layer; dropout is applied to the output of each pooling
//! layer, the FC layer and the logits layer at one uniform rate:
//!
//! | layer     | three-conv | two-conv |
//! |-----------|------------|----------|
//! | conv      | 5×5 @ 32   | 5×5 @ 64 |
//! | conv      | 5×5 @ 64   |          |
//! | avg pool  | 2×2 (D)    | 2×2 (D)  |
//! | conv      | 5×5 @ 64   | 5×5 @ 64 |
//! | avg pool  | 2×2 (D)    | 2×2 (D)  |
//! | FC        | 1024 (D)   | 1024 (D) |
//! | logits    | 10 (D)     | 10 (D)   |

use std::collections::BTreeMap;

use crate::autograd::{DropoutKey, Tape, ValueId};
use crate::error::{Error, Result};
use crate::init::orthonormal_init;
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tensor::{fmt_shape, softmax_rows, Tensor};
use crate::Mode;

const CONV_KERNEL: usize = 5;
const FC_UNITS: usize = 1024;
const STREAM_MODEL_INIT: u64 = 0x31;

/// Kernel-network architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Two convolutional layers.
    Cnnic2,
    /// Three convolutional layers.
    Cnnic3,
}

impl Preset {
    pub fn name(&self) -> &'static str {
        match self {
            Preset::Cnnic2 => "cnnic2",
            Preset::Cnnic3 => "cnnic3",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cnnic2" | "cnnic-2" => Ok(Preset::Cnnic2),
            "cnnic3" | "cnnic-3" => Ok(Preset::Cnnic3),
            other => Err(Error::Config(format!(
                "unknown preset '{other}' (expected cnnic2 or cnnic3)"
            ))),
        }
    }

    /// Layer sequence before the flatten/FC/logits tail.
    fn plan(&self) -> &'static [PlanStep] {
        match self {
            Preset::Cnnic2 => &[
                PlanStep::Conv(64),
                PlanStep::Pool,
                PlanStep::Conv(64),
                PlanStep::Pool,
            ],
            Preset::Cnnic3 => &[
                PlanStep::Conv(32),
                PlanStep::Conv(64),
                PlanStep::Pool,
                PlanStep::Conv(64),
                PlanStep::Pool,
            ],
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum PlanStep {
    Conv(usize),
    Pool,
}

/// Patch geometry, kernel count and preset for one model.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnicConfig {
    pub preset: Preset,
    /// Side of the square crop, in pixels.
    pub patch_size: usize,
    /// Pixels the crop window advances per grid position.
    pub patch_stride: usize,
    /// Number of independent kernel networks (weights are shared across
    /// positions, never across kernels).
    pub num_kernels: usize,
    /// Drop probability at every dropout site.
    pub dropout_p: f64,
    pub image_size: usize,
    pub num_classes: usize,
    /// Experimental alternative: softmax each patch's logits and average
    /// probabilities instead of averaging logits before one softmax.
    pub softmax_per_patch: bool,
}

impl Default for CnnicConfig {
    fn default() -> Self {
        CnnicConfig {
            preset: Preset::Cnnic2,
            patch_size: 24,
            patch_stride: 2,
            num_kernels: 1,
            dropout_p: 0.4,
            image_size: 28,
            num_classes: 10,
            softmax_per_patch: false,
        }
    }
}

/// Shape of one layer output while walking a preset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerShape {
    pub name: String,
    pub spatial: usize,
    pub channels: usize,
}

/// Resolved geometry for a feasible config.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Geometry {
    /// Patch grid side; the grid has `grid`·`grid` positions.
    pub grid: usize,
    pub positions: usize,
    /// (in_channels, out_channels) per convolution.
    pub conv_channels: Vec<(usize, usize)>,
    /// Flattened feature count entering the FC layer.
    pub flat_features: usize,
    /// Per-layer shape trace through the kernel network.
    pub trace: Vec<LayerShape>,
}

impl CnnicConfig {
    /// Check feasibility and resolve the layer geometry.
    pub fn validate(&self) -> Result<Geometry> {
        if self.patch_stride == 0 {
            return Err(Error::Config("patch_stride must be >= 1".into()));
        }
        if self.num_kernels == 0 {
            return Err(Error::Config("num_kernels must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!(
                "dropout_p must lie in [0,1), got {}",
                self.dropout_p
            )));
        }
        if self.patch_size == 0 || self.patch_size > self.image_size {
            return Err(Error::Config(format!(
                "patch_size {} infeasible for image_size {}",
                self.patch_size, self.image_size
            )));
        }
        let grid = (self.image_size - self.patch_size) / self.patch_stride + 1;

        let mut spatial = self.patch_size;
        let mut channels = 1usize;
        let mut conv_channels = Vec::new();
        let mut trace = Vec::new();
        let (mut conv_no, mut pool_no) = (0usize, 0usize);
        for step in self.preset.plan() {
            match step {
                PlanStep::Conv(out_ch) => {
                    conv_no += 1;
                    if spatial < CONV_KERNEL {
                        return Err(Error::Config(format!(
                            "conv{conv_no}: spatial extent {spatial} smaller than the {CONV_KERNEL}x{CONV_KERNEL} kernel (patch_size {})",
                            self.patch_size
                        )));
                    }
                    spatial = spatial - CONV_KERNEL + 1;
                    conv_channels.push((channels, *out_ch));
                    channels = *out_ch;
                    trace.push(LayerShape {
                        name: format!("conv{conv_no}"),
                        spatial,
                        channels,
                    });
                }
                PlanStep::Pool => {
                    pool_no += 1;
                    if spatial < 2 || !spatial.is_multiple_of(2) {
                        return Err(Error::Config(format!(
                            "pool{pool_no}: spatial extent {spatial} not poolable (patch_size {})",
                            self.patch_size
                        )));
                    }
                    spatial /= 2;
                    trace.push(LayerShape {
                        name: format!("pool{pool_no}"),
                        spatial,
                        channels,
                    });
                }
            }
        }
        Ok(Geometry {
            grid,
            positions: grid * grid,
            conv_channels,
            flat_features: channels * spatial * spatial,
            trace,
        })
    }

    /// Canonical key/value form (stored in checkpoints).
    pub fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("preset".into(), self.preset.name().into()),
            ("patch_size".into(), self.patch_size.to_string()),
            ("patch_stride".into(), self.patch_stride.to_string()),
            ("num_kernels".into(), self.num_kernels.to_string()),
            ("dropout_p".into(), self.dropout_p.to_string()),
            ("image_size".into(), self.image_size.to_string()),
            ("num_classes".into(), self.num_classes.to_string()),
            ("softmax_per_patch".into(), self.softmax_per_patch.to_string()),
        ]
    }

    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        fn take<'a>(kv: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
            kv.get(key)
                .map(String::as_str)
                .ok_or_else(|| Error::Config(format!("missing config key '{key}'")))
        }
        fn num<V: std::str::FromStr>(kv: &BTreeMap<String, String>, key: &str) -> Result<V> {
            take(kv, key)?
                .parse()
                .map_err(|_| Error::Config(format!("bad value for '{key}'")))
        }
        Ok(CnnicConfig {
            preset: Preset::parse(take(kv, "preset")?)?,
            patch_size: num(kv, "patch_size")?,
            patch_stride: num(kv, "patch_stride")?,
            num_kernels: num(kv, "num_kernels")?,
            dropout_p: num(kv, "dropout_p")?,
            image_size: num(kv, "image_size")?,
            num_classes: num(kv, "num_classes")?,
            softmax_per_patch: num(kv, "softmax_per_patch")?,
        })
    }
}

/// Weight and bias of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// All parameters of one kernel network; shapes are fully determined by
/// (preset, patch_size). The FC input width equals the flattened post-conv
/// feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct SmallCnnWeights<T: Scalar> {
    pub convs: Vec<LayerParams<T>>,
    pub fc: LayerParams<T>,
    pub out: LayerParams<T>,
}

impl<T: Scalar> SmallCnnWeights<T> {
    /// Orthonormal weights, zero biases; deterministic in (seed, kernel_idx).
    pub fn init(config: &CnnicConfig, geometry: &Geometry, kernel_idx: usize, seed: u64) -> Result<Self> {
        let mut ordinal = 0u64;
        let mut tensor_seed = |kernel: usize| {
            let s = SplitMix64::stream(seed, &[STREAM_MODEL_INIT, kernel as u64, ordinal])
                .next_u64();
            ordinal += 1;
            s
        };
        let mut convs = Vec::new();
        for &(in_ch, out_ch) in &geometry.conv_channels {
            let shape = [out_ch, in_ch, CONV_KERNEL, CONV_KERNEL];
            convs.push(LayerParams {
                weight: orthonormal_init(&shape, tensor_seed(kernel_idx))?,
                bias: Tensor::zeros(&[out_ch]),
            });
        }
        let fc = LayerParams {
            weight: orthonormal_init(&[geometry.flat_features, FC_UNITS], tensor_seed(kernel_idx))?,
            bias: Tensor::zeros(&[FC_UNITS]),
        };
        let out = LayerParams {
            weight: orthonormal_init(&[FC_UNITS, config.num_classes], tensor_seed(kernel_idx))?,
            bias: Tensor::zeros(&[config.num_classes]),
        };
        Ok(SmallCnnWeights { convs, fc, out })
    }

    fn layers(&self) -> impl Iterator<Item = (String, &LayerParams<T>)> {
        self.convs
            .iter()
            .enumerate()
            .map(|(i, l)| (format!("conv{}", i + 1), l))
            .chain(std::iter::once(("fc".to_string(), &self.fc)))
            .chain(std::iter::once(("logits".to_string(), &self.out)))
    }

    /// Total element count across every tensor.
    pub fn element_count(&self) -> usize {
        self.layers()
            .map(|(_, l)| l.weight.len() + l.bias.len())
            .sum()
    }
}

/// A full model: config plus K independent kernel networks.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnicModel<T: Scalar> {
    pub config: CnnicConfig,
    pub kernels: Vec<SmallCnnWeights<T>>,
}

impl<T: Scalar> CnnicModel<T> {
    pub fn init(config: CnnicConfig, seed: u64) -> Result<Self> {
        let geometry = config.validate()?;
        let kernels = (0..config.num_kernels)
            .map(|k| SmallCnnWeights::init(&config, &geometry, k, seed))
            .collect::<Result<Vec<_>>>()?;
        Ok(CnnicModel { config, kernels })
    }

    /// Stable (name, tensor) listing; the order defines the flat parameter
    /// layout used by the optimizer and checkpoints.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (k, kernel) in self.kernels.iter().enumerate() {
            for (layer_name, layer) in kernel.layers() {
                out.push((format!("k{k}.{layer_name}.weight"), &layer.weight));
                out.push((format!("k{k}.{layer_name}.bias"), &layer.bias));
            }
        }
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        self.named_params().into_iter().map(|(n, _)| n).collect()
    }

    /// Mutable tensors in `named_params` order (optimizer updates).
    pub fn flat_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for kernel in &mut self.kernels {
            for layer in kernel.convs.iter_mut().chain([&mut kernel.fc, &mut kernel.out]) {
                out.push(&mut layer.weight);
                out.push(&mut layer.bias);
            }
        }
        out
    }

    /// Flat tensor list in `named_params` order.
    pub fn to_flat(&self) -> Vec<Tensor<T>> {
        self.named_params()
            .into_iter()
            .map(|(_, t)| t.clone())
            .collect()
    }

    /// Rebuild a model from a flat tensor list in `named_params` order.
    pub fn from_flat(config: CnnicConfig, tensors: &[Tensor<T>]) -> Result<Self> {
        let geometry = config.validate()?;
        let n_convs = geometry.conv_channels.len();
        let per_kernel = n_convs * 2 + 4;
        if tensors.len() != per_kernel * config.num_kernels {
            return Err(Error::Config(format!(
                "from_flat: expected {} tensors, got {}",
                per_kernel * config.num_kernels,
                tensors.len()
            )));
        }
        let mut kernels = Vec::new();
        for k in 0..config.num_kernels {
            let base = k * per_kernel;
            let mut convs = Vec::new();
            for c in 0..n_convs {
                convs.push(LayerParams {
                    weight: tensors[base + 2 * c].clone(),
                    bias: tensors[base + 2 * c + 1].clone(),
                });
            }
            let fc = LayerParams {
                weight: tensors[base + 2 * n_convs].clone(),
                bias: tensors[base + 2 * n_convs + 1].clone(),
            };
            let out = LayerParams {
                weight: tensors[base + 2 * n_convs + 2].clone(),
                bias: tensors[base + 2 * n_convs + 3].clone(),
            };
            kernels.push(SmallCnnWeights { convs, fc, out });
        }
        Ok(CnnicModel { config, kernels })
    }

    pub fn param_count(&self) -> usize {
        self.kernels.iter().map(|k| k.element_count()).sum()
    }
}

/// Tape ids produced by a composite forward pass.
pub struct ForwardIds {
    /// Parameter ids in `named_params` order.
    pub params: Vec<ValueId>,
    /// Per-kernel logits, each [B, positions, classes].
    pub per_kernel: Vec<ValueId>,
    /// Combined output [B, classes]: averaged logits by default, averaged
    /// per-patch probabilities when `softmax_per_patch` is set.
    pub combined: ValueId,
}

/// Forward pass of the full composite given already-recorded parameter ids
/// (in `named_params` order). `step` keys the dropout masks.
pub fn forward_from_ids<T: Scalar>(
    tape: &mut Tape<T>,
    config: &CnnicConfig,
    params: &[ValueId],
    images: ValueId,
    mode: Mode,
    seed: u64,
    step: u64,
) -> Result<ForwardIds> {
    let geometry = config.validate()?;
    let shape = tape.value(images).shape().to_vec();
    let [batch, 1, s1, s2] = shape[..] else {
        return Err(Error::Shape(format!(
            "forward: images must be [B,1,S,S], got {}",
            fmt_shape(&shape)
        )));
    };
    if s1 != config.image_size || s2 != config.image_size {
        return Err(Error::Shape(format!(
            "forward: images are {}, config expects {}x{}",
            fmt_shape(&shape),
            config.image_size,
            config.image_size
        )));
    }
    let n_convs = geometry.conv_channels.len();
    let per_kernel_params = n_convs * 2 + 4;
    if params.len() != per_kernel_params * config.num_kernels {
        return Err(Error::Config(format!(
            "forward: expected {} parameter ids, got {}",
            per_kernel_params * config.num_kernels,
            params.len()
        )));
    }

    let positions = geometry.positions;
    let patches = tape.extract_patches(images, config.patch_size, config.patch_stride)?;
    let items = tape.reshape(
        patches,
        &[batch * positions, 1, config.patch_size, config.patch_size],
    )?;

    let mut per_kernel = Vec::new();
    let mut pooled = Vec::new();
    for k in 0..config.num_kernels {
        let ids = &params[k * per_kernel_params..(k + 1) * per_kernel_params];
        let logits = kernel_forward_from_ids(
            tape, config, &geometry, ids, items, k as u64, mode, seed, step,
        )?;
        let map_k = tape.reshape(logits, &[batch, positions, config.num_classes])?;
        per_kernel.push(map_k);
        let member = if config.softmax_per_patch {
            tape.softmax_rows(map_k)?
        } else {
            map_k
        };
        pooled.push(tape.mean_axis(member, 1)?);
    }

    let mut acc = pooled[0];
    for &p in &pooled[1..] {
        acc = tape.add(acc, p)?;
    }
    let combined = if config.num_kernels > 1 {
        tape.scale(acc, T::from_f64(1.0 / config.num_kernels as f64))
    } else {
        acc
    };
    Ok(ForwardIds {
        params: params.to_vec(),
        per_kernel,
        combined,
    })
}

/// One kernel network over a stack of patches [N,1,p,p] → logits [N,classes].
#[allow(clippy::too_many_arguments)]
fn kernel_forward_from_ids<T: Scalar>(
    tape: &mut Tape<T>,
    config: &CnnicConfig,
    geometry: &Geometry,
    ids: &[ValueId],
    items: ValueId,
    kernel_idx: u64,
    mode: Mode,
    seed: u64,
    step: u64,
) -> Result<ValueId> {
    let n_convs = geometry.conv_channels.len();
    let mut drop_site = 0u64;
    let mut dropped = |tape: &mut Tape<T>, x: ValueId| -> Result<ValueId> {
        let key = DropoutKey::new(seed, kernel_idx * 16 + drop_site, step);
        drop_site += 1;
        tape.dropout(x, config.dropout_p, mode, key)
    };

    let mut cur = items;
    let mut conv_i = 0usize;
    for plan_step in config.preset.plan() {
        match plan_step {
            PlanStep::Conv(_) => {
                let (w, b) = (ids[2 * conv_i], ids[2 * conv_i + 1]);
                cur = tape.conv2d_relu(cur, w, b, 1, true)?;
                conv_i += 1;
            }
            PlanStep::Pool => {
                cur = tape.avg_pool_2x2(cur)?;
                cur = dropped(tape, cur)?;
            }
        }
    }
    let n_items = tape.value(cur).shape()[0];
    cur = tape.reshape(cur, &[n_items, geometry.flat_features])?;
    cur = tape.dense(cur, ids[2 * n_convs], ids[2 * n_convs + 1])?;
    cur = tape.relu(cur);
    cur = dropped(tape, cur)?;
    cur = tape.dense(cur, ids[2 * n_convs + 2], ids[2 * n_convs + 3])?;
    dropped(tape, cur)
}

/// Register the model's parameters on a tape and run the composite forward.
pub fn forward_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    model: &CnnicModel<T>,
    images: &Tensor<T>,
    mode: Mode,
    seed: u64,
    step: u64,
) -> Result<ForwardIds> {
    let ids: Vec<ValueId> = model
        .to_flat()
        .into_iter()
        .map(|t| tape.param(t))
        .collect();
    let images_id = tape.leaf(images.clone());
    forward_from_ids(tape, &model.config, &ids, images_id, mode, seed, step)
}

/// Output of a standalone composite forward.
pub struct CnnicOutput<T: Scalar> {
    /// Final class probabilities [B, classes]; rows sum to 1. The predicted
    /// class is the argmax with ties broken toward the lowest index.
    pub probs: Tensor<T>,
    /// Per-kernel, per-position logits [B, K, positions, classes].
    pub logit_map: Tensor<T>,
    /// The combined pre-softmax output [B, classes] (equal to `probs` when
    /// `softmax_per_patch` is set).
    pub combined: Tensor<T>,
}

/// Full forward pass: extract patches, apply every kernel network, average
/// over positions and kernels, softmax once.
pub fn cnnic_forward<T: Scalar>(
    model: &CnnicModel<T>,
    images: &Tensor<T>,
    mode: Mode,
    seed: u64,
    step: u64,
) -> Result<CnnicOutput<T>> {
    let mut tape = Tape::new();
    let fwd = forward_on_tape(&mut tape, model, images, mode, seed, step)?;
    let combined = tape.value(fwd.combined).clone();
    let probs = if model.config.softmax_per_patch {
        combined.clone()
    } else {
        softmax_rows(&combined)
    };

    let geometry = model.config.validate()?;
    let (batch, k_count, positions, classes) = (
        images.shape()[0],
        model.config.num_kernels,
        geometry.positions,
        model.config.num_classes,
    );
    let mut map = Tensor::zeros(&[batch, k_count, positions, classes]);
    for (k, &id) in fwd.per_kernel.iter().enumerate() {
        let src = tape.value(id).data();
        let dst = map.data_mut();
        for b in 0..batch {
            let src_base = b * positions * classes;
            let dst_base = (b * k_count + k) * positions * classes;
            dst[dst_base..dst_base + positions * classes]
                .copy_from_slice(&src[src_base..src_base + positions * classes]);
        }
    }
    Ok(CnnicOutput {
        probs,
        logit_map: map,
        combined,
    })
}

/// Run one kernel network on a batch of patches [N,1,p,p], returning the
/// per-patch logits [N, classes]. Dropout is active only in train mode.
pub fn small_cnn_forward<T: Scalar>(
    patches: &Tensor<T>,
    weights: &SmallCnnWeights<T>,
    config: &CnnicConfig,
    mode: Mode,
    seed: u64,
) -> Result<Tensor<T>> {
    let geometry = config.validate()?;
    let shape = patches.shape().to_vec();
    let [_, 1, p1, p2] = shape[..] else {
        return Err(Error::Shape(format!(
            "small_cnn_forward: patches must be [N,1,p,p], got {}",
            fmt_shape(&shape)
        )));
    };
    if p1 != config.patch_size || p2 != config.patch_size {
        return Err(Error::Shape(format!(
            "small_cnn_forward: patches are {}, config expects patch_size {}",
            fmt_shape(&shape),
            config.patch_size
        )));
    }
    let mut tape = Tape::new();
    let mut ids = Vec::new();
    for (_, layer) in weights.layers() {
        ids.push(tape.param(layer.weight.clone()));
        ids.push(tape.param(layer.bias.clone()));
    }
    let items = tape.leaf(patches.clone());
    let logits = kernel_forward_from_ids(&mut tape, config, &geometry, &ids, items, 0, mode, seed, 0)?;
    Ok(tape.value(logits).clone())
}

/// Parameter names in flat order for a config, without materializing a
/// model (used when decoding checkpoints).
pub fn param_names_for(config: &CnnicConfig) -> Result<Vec<String>> {
    let geometry = config.validate()?;
    let mut names = Vec::new();
    for k in 0..config.num_kernels {
        let mut layers: Vec<String> = (1..=geometry.conv_channels.len())
            .map(|i| format!("conv{i}"))
            .collect();
        layers.push("fc".into());
        layers.push("logits".into());
        for layer in layers {
            names.push(format!("k{k}.{layer}.weight"));
            names.push(format!("k{k}.{layer}.bias"));
        }
    }
    Ok(names)
}

/// Exact parameter count: weights plus biases of one kernel network, times
/// K (positions share weights; kernels do not). Returns the total and the
/// per-layer breakdown.
pub fn count_parameters(config: &CnnicConfig) -> Result<(usize, Vec<(String, usize)>)> {
    let geometry = config.validate()?;
    let mut per_layer = Vec::new();
    let mut total = 0usize;
    for k in 0..config.num_kernels {
        let prefix = if config.num_kernels > 1 {
            format!("k{k}.")
        } else {
            String::new()
        };
        for (i, &(in_ch, out_ch)) in geometry.conv_channels.iter().enumerate() {
            let n = out_ch * in_ch * CONV_KERNEL * CONV_KERNEL + out_ch;
            per_layer.push((format!("{prefix}conv{}", i + 1), n));
            total += n;
        }
        let fc = geometry.flat_features * FC_UNITS + FC_UNITS;
        per_layer.push((format!("{prefix}fc"), fc));
        total += fc;
        let logits = FC_UNITS * config.num_classes + config.num_classes;
        per_layer.push((format!("{prefix}logits"), logits));
        total += logits;
    }
    Ok((total, per_layer))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full_image_cnnic2() -> CnnicConfig {
        CnnicConfig {
            patch_size: 28,
            patch_stride: 1,
            ..CnnicConfig::default()
        }
    }

    #[test]
    fn geometry_cnnic2_full_image() {
        // 28 -> conv 24 -> pool 12 -> conv 8 -> pool 4, flatten 64*16 = 1024.
        let geom = full_image_cnnic2().validate().unwrap();
        let spatial: Vec<usize> = geom.trace.iter().map(|l| l.spatial).collect();
        assert_eq!(spatial, vec![24, 12, 8, 4]);
        assert_eq!(geom.flat_features, 1024);
        assert_eq!(geom.grid, 1);
    }

    #[test]
    fn geometry_default_patch_grid() {
        // 28x28 image, patch 24, stride 2 -> 3x3 grid.
        let geom = CnnicConfig::default().validate().unwrap();
        assert_eq!(geom.grid, 3);
        assert_eq!(geom.positions, 9);
        assert_eq!(geom.flat_features, 64 * 3 * 3);
    }

    #[test]
    fn geometry_rejects_unpoolable_patch() {
        let bad = CnnicConfig {
            patch_size: 15,
            ..CnnicConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn count_parameters_cnnic2_full_image() {
        let (total, layers) = count_parameters(&full_image_cnnic2()).unwrap();
        let by_name: std::collections::HashMap<_, _> = layers.into_iter().collect();
        assert_eq!(by_name["conv1"], 1_664);
        assert_eq!(by_name["conv2"], 102_464);
        assert_eq!(by_name["fc"], 1_049_600);
        assert_eq!(by_name["logits"], 10_250);
        assert_eq!(total, 1_163_978);
    }

    #[test]
    fn count_parameters_cnnic3_full_image() {
        let config = CnnicConfig {
            preset: Preset::Cnnic3,
            ..full_image_cnnic2()
        };
        let (total, layers) = count_parameters(&config).unwrap();
        let sizes: Vec<usize> = layers.iter().map(|(_, n)| *n).collect();
        assert_eq!(sizes, vec![832, 51_264, 102_464, 590_848, 10_250]);
        assert_eq!(total, 755_658);
    }

    #[test]
    fn count_parameters_two_kernels_doubles() {
        let mut config = full_image_cnnic2();
        let (one, _) = count_parameters(&config).unwrap();
        config.num_kernels = 2;
        let (two, _) = count_parameters(&config).unwrap();
        assert_eq!(two, 2 * one);
    }

    #[test]
    fn count_matches_materialized_model() {
        // Small geometry so init stays fast.
        let config = CnnicConfig {
            patch_size: 16,
            patch_stride: 4,
            num_kernels: 2,
            ..CnnicConfig::default()
        };
        let model: CnnicModel<f64> = CnnicModel::init(config.clone(), 1).unwrap();
        let (total, _) = count_parameters(&config).unwrap();
        assert_eq!(total, model.param_count());
    }

    #[test]
    fn config_kv_round_trip() {
        let config = CnnicConfig {
            preset: Preset::Cnnic3,
            patch_size: 20,
            patch_stride: 4,
            num_kernels: 3,
            dropout_p: 0.25,
            image_size: 28,
            num_classes: 10,
            softmax_per_patch: true,
        };
        let kv: BTreeMap<String, String> = config.to_kv().into_iter().collect();
        assert_eq!(CnnicConfig::from_kv(&kv).unwrap(), config);
    }

    #[test]
    fn zero_weights_give_zero_logits_uniform_probs() {
        let config = CnnicConfig {
            patch_size: 16,
            patch_stride: 6,
            ..CnnicConfig::default()
        };
        let mut model: CnnicModel<f64> = CnnicModel::init(config, 3).unwrap();
        for kernel in &mut model.kernels {
            for layer in kernel.convs.iter_mut().chain([&mut kernel.fc, &mut kernel.out]) {
                layer.weight = Tensor::zeros(layer.weight.shape());
                layer.bias = Tensor::zeros(layer.bias.shape());
            }
        }
        let images = Tensor::from_fn(&[2, 1, 28, 28], |i| (i % 7) as f64 / 7.0);
        let out = cnnic_forward(&model, &images, Mode::Infer, 0, 0).unwrap();
        assert!(out.combined.data().iter().all(|&v| v == 0.0));
        assert!(out.probs.data().iter().all(|&p| (p - 0.1).abs() < 1e-12));
    }

    #[test]
    fn infer_forward_is_deterministic() {
        let config = CnnicConfig {
            patch_size: 16,
            patch_stride: 12,
            ..CnnicConfig::default()
        };
        let model: CnnicModel<f32> = CnnicModel::init(config, 9).unwrap();
        let images = Tensor::from_fn(&[2, 1, 28, 28], |i| ((i * 31) % 13) as f32 / 13.0);
        let a = cnnic_forward(&model, &images, Mode::Infer, 1, 0).unwrap();
        let b = cnnic_forward(&model, &images, Mode::Infer, 2, 7).unwrap();
        assert_eq!(a.probs, b.probs);
        assert_eq!(a.logit_map, b.logit_map);
    }

    #[test]
    fn uniform_image_averaged_logits_equal_single_patch() {
        let model: CnnicModel<f64> = CnnicModel::init(CnnicConfig::default(), 5).unwrap();
        let images = Tensor::filled(&[1, 1, 28, 28], 0.35);
        let out = cnnic_forward(&model, &images, Mode::Infer, 0, 0).unwrap();
        // All 9 patches are identical, so the mean equals any one of them.
        let classes = 10;
        for c in 0..classes {
            let first_patch = out.logit_map.data()[c];
            assert!((out.combined.data()[c] - first_patch).abs() < 1e-9);
        }
    }

    #[test]
    fn single_position_single_kernel_probs_match_small_cnn() {
        let config = full_image_cnnic2();
        let model: CnnicModel<f64> = CnnicModel::init(config.clone(), 8).unwrap();
        let images = Tensor::from_fn(&[2, 1, 28, 28], |i| ((i * 17) % 11) as f64 / 11.0);
        let out = cnnic_forward(&model, &images, Mode::Infer, 0, 0).unwrap();

        let logits =
            small_cnn_forward(&images, &model.kernels[0], &config, Mode::Infer, 0).unwrap();
        let expect = softmax_rows(&logits);
        for (a, b) in out.probs.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn per_patch_softmax_mode_averages_probabilities() {
        let config = CnnicConfig {
            softmax_per_patch: true,
            ..CnnicConfig::default()
        };
        let model: CnnicModel<f64> = CnnicModel::init(config, 13).unwrap();
        let images = Tensor::from_fn(&[2, 1, 28, 28], |i| ((i * 41) % 29) as f64 / 29.0);
        let out = cnnic_forward(&model, &images, Mode::Infer, 0, 0).unwrap();

        // probs must equal the mean over positions of the per-patch softmax
        // of the logit map.
        let positions = 9;
        for b in 0..2 {
            for c in 0..10 {
                let mut acc = 0.0;
                for p in 0..positions {
                    let row_base = (b * positions + p) * 10;
                    let row = &out.logit_map.data()[row_base..row_base + 10];
                    let soft = softmax_rows(&Tensor::new(vec![1, 10], row.to_vec()).unwrap());
                    acc += soft.data()[c] / positions as f64;
                }
                assert!((out.probs.data()[b * 10 + c] - acc).abs() < 1e-12);
            }
        }
        for row in out.probs.data().chunks_exact(10) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn probs_rows_sum_to_one_and_argmax_shift_invariant() {
        let config = CnnicConfig {
            patch_size: 16,
            patch_stride: 4,
            ..CnnicConfig::default()
        };
        let model: CnnicModel<f64> = CnnicModel::init(config, 21).unwrap();
        let images = Tensor::from_fn(&[3, 1, 28, 28], |i| ((i * 23) % 19) as f64 / 19.0);
        let out = cnnic_forward(&model, &images, Mode::Infer, 0, 0).unwrap();
        for row in out.probs.data().chunks_exact(10) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        let shifted = out.combined.map(|v| v + 3.7);
        assert_eq!(out.combined.argmax_rows(), shifted.argmax_rows());
    }
}

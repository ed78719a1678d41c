//! Word-guided feature deepening (WFDM).
//!
//! Per stage, the aligned text tokens are turned into a dynamic spatial
//! kernel (a width-1 convolution mixing the token axis into N kernel values,
//! reshaped to a sqrt(N) x sqrt(N) grid and resized to the stage resolution)
//! and multiplied elementwise with the stage's fused features to form a mask
//! map. Mask maps are aggregated coarse-to-fine with a learned blend weight
//! alpha, and a 1x1 score head resolves the finest map into two-class pixel
//! logits at the output resolution.

use crate::encoders::StageOutput;
use crate::error::{Error, Result};
use crate::param::ParameterStore;
use crate::rng::SplitMix64;
use crate::scalar::Real;
use crate::tensor::{bilinear_resize, conv1d_pointwise, conv2d, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct WfdmConfig {
    /// Token count N of each dynamic kernel; must be a perfect square.
    pub kernel_tokens: usize,
    /// Common channel width the decoder works at.
    pub channels: usize,
}

impl WfdmConfig {
    pub fn new(kernel_tokens: usize, channels: usize) -> Result<Self> {
        let side = (kernel_tokens as f64).sqrt().round() as usize;
        if side * side != kernel_tokens || kernel_tokens == 0 {
            return Err(Error::Config(format!(
                "kernel_tokens must be a positive perfect square, got {kernel_tokens}"
            )));
        }
        if channels == 0 {
            return Err(Error::Config("decoder channels must be positive".into()));
        }
        Ok(WfdmConfig {
            kernel_tokens,
            channels,
        })
    }

    pub fn side(&self) -> usize {
        (self.kernel_tokens as f64).sqrt().round() as usize
    }
}

/// Build a dynamic spatial kernel from aligned text features.
///
/// f_vl: [l, c]; weight: [n, l, 1]; bias: [n]. Each of the n kernel tokens is
/// an affine mix over the word axis, giving [c, n]; the n values form a
/// sqrt(n) grid per channel which is bilinearly resized to [c, th, tw].
pub fn dynamic_kernel<T: Real>(
    f_vl: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    th: usize,
    tw: usize,
) -> Result<Tensor<T>> {
    if f_vl.rank() != 2 {
        return Err(Error::BadShape {
            op: "dynamic_kernel",
            shape: f_vl.shape().to_vec(),
            reason: "aligned text must be [l, c]".into(),
        });
    }
    let (_l, c) = (f_vl.shape()[0], f_vl.shape()[1]);
    let n = weight.shape()[0];
    let side = (n as f64).sqrt().round() as usize;
    if side * side != n {
        return Err(Error::BadShape {
            op: "dynamic_kernel",
            shape: weight.shape().to_vec(),
            reason: format!("{n} kernel tokens do not form a square grid"),
        });
    }
    // channels as positions, words as conv channels
    let per_channel = f_vl.transpose()?.reshape(vec![1, c, f_vl.shape()[0]])?;
    let mixed = conv1d_pointwise(&per_channel, weight, bias)?; // [1, n, c]
    let grid = mixed
        .reshape(vec![n, c])?
        .transpose()?
        .reshape(vec![1, c, side, side])?;
    bilinear_resize(&grid, th, tw)?.reshape(vec![c, th, tw])
}

/// Elementwise product of a dynamic kernel and a feature map.
pub fn mask_map<T: Real>(kernel: &Tensor<T>, features: &Tensor<T>) -> Result<Tensor<T>> {
    kernel.mul(features)
}

/// Blend mask maps coarse-to-fine: each step doubles resolution and takes
/// alpha * upsampled previous + (1 - alpha) * current. Returns all
/// intermediate aggregates, finest last.
pub fn aggregate_masks<T: Real>(
    coarse_to_fine: &[Tensor<T>],
    alpha: &Tensor<T>,
) -> Result<Vec<Tensor<T>>> {
    let Some(first) = coarse_to_fine.first() else {
        return Err(Error::InvalidArgument("aggregate_masks: no maps".into()));
    };
    if alpha.numel() != 1 {
        return Err(Error::BadShape {
            op: "aggregate_masks",
            shape: alpha.shape().to_vec(),
            reason: "alpha must have one element".into(),
        });
    }
    let one_minus = alpha.neg().add_scalar(T::one());
    let mut out = Vec::with_capacity(coarse_to_fine.len());
    out.push(first.clone());
    for m in &coarse_to_fine[1..] {
        let prev: &Tensor<T> = out.last().unwrap();
        let (c, h, w) = (prev.shape()[0], prev.shape()[1], prev.shape()[2]);
        if m.shape() != [c, 2 * h, 2 * w] {
            return Err(Error::DimMismatch {
                op: "aggregate_masks",
                lhs: vec![c, 2 * h, 2 * w],
                rhs: m.shape().to_vec(),
            });
        }
        let up = bilinear_resize(&prev.reshape(vec![1, c, h, w])?, 2 * h, 2 * w)?
            .reshape(vec![c, 2 * h, 2 * w])?;
        out.push(up.scale(alpha)?.add(&m.scale(&one_minus)?)?);
    }
    Ok(out)
}

/// 1x1 two-class head plus resize to the output resolution: [c, h, w] ->
/// [2, oh, ow] logits.
pub fn score_head<T: Real>(
    mask: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    oh: usize,
    ow: usize,
) -> Result<Tensor<T>> {
    let (c, h, w) = (mask.shape()[0], mask.shape()[1], mask.shape()[2]);
    let logits = conv2d(&mask.reshape(vec![1, c, h, w])?, weight, bias)?;
    bilinear_resize(&logits, oh, ow)?.reshape(vec![2, oh, ow])
}

pub fn register_wfdm<T: Real>(
    store: &mut ParameterStore<T>,
    prefix: &str,
    stage_channels: &[usize],
    text_len: usize,
    cfg: &WfdmConfig,
    rng: &mut SplitMix64,
) -> Result<()> {
    for (i, &ci) in stage_channels.iter().enumerate() {
        let stage = i + 1;
        store.register_kaiming(
            &format!("{prefix}.stage{stage}.feat.weight"),
            vec![cfg.channels, ci, 1, 1],
            ci,
            rng,
        )?;
        store.register_zeros(&format!("{prefix}.stage{stage}.feat.bias"), vec![cfg.channels])?;
        store.register_kaiming(
            &format!("{prefix}.stage{stage}.lang"),
            vec![ci, cfg.channels],
            ci,
            rng,
        )?;
        store.register_kaiming(
            &format!("{prefix}.stage{stage}.kernel.weight"),
            vec![cfg.kernel_tokens, text_len, 1],
            text_len,
            rng,
        )?;
        store.register_zeros(
            &format!("{prefix}.stage{stage}.kernel.bias"),
            vec![cfg.kernel_tokens],
        )?;
    }
    store.register_zeros(&format!("{prefix}.alpha"), vec![1])?;
    // zero-init classifier: untrained logits are exactly uniform
    store.register_zeros(&format!("{prefix}.score.weight"), vec![2, cfg.channels, 1, 1])?;
    store.register_zeros(&format!("{prefix}.score.bias"), vec![2])
}

pub struct WfdmOutput<T: Real> {
    /// Per-stage mask maps, coarse to fine.
    pub stage_masks: Vec<Tensor<T>>,
    /// Aggregated maps after each blend step, finest last.
    pub aggregated: Vec<Tensor<T>>,
    /// Two-class pixel logits at the requested output size.
    pub score: Tensor<T>,
}

/// Run the decoder over encoder stage outputs (fine-to-coarse storage order,
/// stages[0] = highest resolution).
pub fn wfdm_forward<T: Real>(
    stages: &[StageOutput<T>],
    prefix: &str,
    cfg: &WfdmConfig,
    out_hw: (usize, usize),
    store: &ParameterStore<T>,
) -> Result<WfdmOutput<T>> {
    if stages.is_empty() {
        return Err(Error::InvalidArgument("wfdm_forward: no stages".into()));
    }
    let mut stage_masks = Vec::with_capacity(stages.len());
    for (i, st) in stages.iter().enumerate().rev() {
        let stage = i + 1;
        let (c, h, w) = (
            st.f_f.shape()[0],
            st.f_f.shape()[1],
            st.f_f.shape()[2],
        );
        let feat = conv2d(
            &st.f_f.reshape(vec![1, c, h, w])?,
            store.get(&format!("{prefix}.stage{stage}.feat.weight"))?,
            store.get(&format!("{prefix}.stage{stage}.feat.bias"))?,
        )?
        .reshape(vec![cfg.channels, h, w])?;
        let lang = st
            .f_vl
            .matmul(store.get(&format!("{prefix}.stage{stage}.lang"))?)?;
        let kernel = dynamic_kernel(
            &lang,
            store.get(&format!("{prefix}.stage{stage}.kernel.weight"))?,
            store.get(&format!("{prefix}.stage{stage}.kernel.bias"))?,
            h,
            w,
        )?;
        stage_masks.push(mask_map(&kernel, &feat)?);
    }
    let alpha = store.get(&format!("{prefix}.alpha"))?.sigmoid();
    let aggregated = aggregate_masks(&stage_masks, &alpha)?;
    let score = score_head(
        aggregated.last().unwrap(),
        store.get(&format!("{prefix}.score.weight"))?,
        store.get(&format!("{prefix}.score.bias"))?,
        out_hw.0,
        out_hw.1,
    )?;
    Ok(WfdmOutput {
        stage_masks,
        aggregated,
        score,
    })
}

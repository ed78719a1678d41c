//! Toy text and vision encoders, and the alignment-injecting encoder pass.

use crate::cfsm::{cfsm_forward, register_scsm, scsm_spatial_scan, ScanConfig};
use crate::error::{Error, Result};
use crate::mlam::mlam_forward;
use crate::model::{ModelConfig, Variant};
use crate::param::ParameterStore;
use crate::rng::SplitMix64;
use crate::scalar::Real;
use crate::tensor::{concat, conv2d, conv2d_strided, Tensor};

/// Text encodings at the model's text width.
pub struct TextFeatures<T: Real> {
    /// [max_len, dim]; rows past `valid_len` are zero.
    pub word: Tensor<T>,
    /// [1, dim] mean over the valid words.
    pub sentence: Tensor<T>,
    pub valid_len: usize,
}

pub fn register_text_encoder<T: Real>(
    store: &mut ParameterStore<T>,
    vocab_size: usize,
    dim: usize,
    max_len: usize,
    rng: &mut SplitMix64,
) -> Result<()> {
    store.register_kaiming("text.embed", vec![vocab_size, dim], dim, rng)?;
    store.register_kaiming("text.pos", vec![max_len, dim], dim, rng)
}

/// Sum of word and position embeddings, zero-padded to `max_len` rows.
pub fn toy_text_encoder<T: Real>(
    tokens: &[usize],
    vocab_size: usize,
    max_len: usize,
    store: &ParameterStore<T>,
) -> Result<TextFeatures<T>> {
    if tokens.is_empty() || tokens.len() > max_len {
        return Err(Error::InvalidArgument(format!(
            "expression must have 1..={max_len} tokens, got {}",
            tokens.len()
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab_size) {
        return Err(Error::Vocabulary {
            id: bad,
            vocab: vocab_size,
        });
    }
    let n = tokens.len();
    let embed = store.get("text.embed")?;
    let pos = store.get("text.pos")?;
    let dim = embed.shape()[1];
    let positions: Vec<usize> = (0..n).collect();
    let valid = embed
        .gather_rows(tokens)?
        .add(&pos.gather_rows(&positions)?)?;
    let sentence = valid
        .sum_axis(0)?
        .mul_scalar(T::from_f64(1.0 / n as f64))
        .reshape(vec![1, dim])?;
    let word = if n < max_len {
        concat(0, &[valid, Tensor::zeros(vec![max_len - n, dim])])?
    } else {
        valid
    };
    Ok(TextFeatures {
        word,
        sentence,
        valid_len: n,
    })
}

fn vss_prefix(stage: usize) -> String {
    format!("enc.stage{stage}.vss")
}

pub fn register_vision_encoder<T: Real>(
    store: &mut ParameterStore<T>,
    cfg: &ModelConfig,
    rng: &mut SplitMix64,
) -> Result<()> {
    let chans = cfg.stage_channels();
    // patchify: 5x5 stride-4 stem
    store.register_kaiming(
        "enc.stage1.conv.weight",
        vec![chans[0], cfg.in_channels, 5, 5],
        cfg.in_channels * 25,
        rng,
    )?;
    store.register_zeros("enc.stage1.conv.bias", vec![chans[0]])?;
    register_scsm(store, &vss_prefix(1), chans[0], &cfg.scan, rng)?;
    for i in 2..=4 {
        store.register_kaiming(
            &format!("enc.stage{i}.conv.weight"),
            vec![chans[i - 1], chans[i - 2], 3, 3],
            chans[i - 2] * 9,
            rng,
        )?;
        store.register_zeros(&format!("enc.stage{i}.conv.bias"), vec![chans[i - 1]])?;
        register_scsm(store, &vss_prefix(i), chans[i - 1], &cfg.scan, rng)?;
    }
    Ok(())
}

/// One downsampling stage: strided conv then a residual spatial-scan block.
pub fn toy_vision_stage<T: Real>(
    x: &Tensor<T>,
    stage: usize,
    scan: &ScanConfig,
    store: &ParameterStore<T>,
) -> Result<Tensor<T>> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let stride = if stage == 1 { 4 } else { 2 };
    if h % stride != 0 || w % stride != 0 {
        return Err(Error::BadShape {
            op: "toy_vision_stage",
            shape: x.shape().to_vec(),
            reason: format!("spatial dims must be divisible by {stride}"),
        });
    }
    let weight = store.get(&format!("enc.stage{stage}.conv.weight"))?;
    let bias = store.get(&format!("enc.stage{stage}.conv.bias"))?;
    let cout = weight.shape()[0];
    let down = conv2d_strided(&x.reshape(vec![1, c, h, w])?, weight, bias, stride)?
        .reshape(vec![cout, h / stride, w / stride])?;
    let scanned = scsm_spatial_scan(&down, &vss_prefix(stage), scan, store)?;
    down.add(&scanned)
}

/// Per-stage output of the aligned encoder.
pub struct StageOutput<T: Real> {
    /// Vision features [c_i, h_i, w_i].
    pub f_v: Tensor<T>,
    /// Fused cross-modal features, same shape as `f_v`.
    pub f_f: Tensor<T>,
    /// Text features aligned to this stage, [l, c_i].
    pub f_vl: Tensor<T>,
}

/// Plain four-stage encoder, no cross-modal work at all.
pub fn encode_plain<T: Real>(
    image: &Tensor<T>,
    cfg: &ModelConfig,
    store: &ParameterStore<T>,
) -> Result<Vec<Tensor<T>>> {
    check_image(image, cfg)?;
    let mut outs = Vec::with_capacity(4);
    let mut cur = image.clone();
    for stage in 1..=4 {
        cur = toy_vision_stage(&cur, stage, &cfg.scan, store)?;
        outs.push(cur.clone());
    }
    Ok(outs)
}

fn check_image<T: Real>(image: &Tensor<T>, cfg: &ModelConfig) -> Result<()> {
    let want = [cfg.in_channels, cfg.input_hw, cfg.input_hw];
    if image.shape() != want {
        return Err(Error::BadShape {
            op: "encode",
            shape: image.shape().to_vec(),
            reason: format!("expected {want:?}"),
        });
    }
    Ok(())
}

/// Encoder pass with per-stage alignment.
///
/// At every stage the vision features meet the (stage-adapted) text features
/// in MLAM, the fused block runs through CFSM, and a zero-initialized 1x1
/// projection injects the fused result into the next stage's input. With the
/// projections at zero the vision tower is bit-identical to [`encode_plain`].
pub fn encode_with_alignment<T: Real>(
    image: &Tensor<T>,
    text: &TextFeatures<T>,
    cfg: &ModelConfig,
    store: &ParameterStore<T>,
) -> Result<Vec<StageOutput<T>>> {
    check_image(image, cfg)?;
    let chans = cfg.stage_channels();
    let mut outs = Vec::with_capacity(4);
    let mut cur = image.clone();
    for stage in 1..=4 {
        let f_v = toy_vision_stage(&cur, stage, &cfg.scan, store)?;
        let f_w = text
            .word
            .matmul(store.get(&format!("enc.adapt{stage}"))?)?;
        let (f_f, f_vl) = match cfg.variant {
            Variant::NoAlignment => (f_v.clone(), f_w),
            _ => {
                let mcfg = cfg.mlam_config(stage);
                let out = mlam_forward(&f_v, &f_w, &mcfg, &format!("stage{stage}.mlam"), store)?;
                let fused = cfsm_forward(
                    &out.f_block,
                    chans[stage - 1],
                    &format!("stage{stage}.cfsm"),
                    &cfg.scan,
                    store,
                )?;
                (fused, out.f_vl)
            }
        };
        if stage < 4 {
            cur = match cfg.variant {
                Variant::NoAlignment => f_v.clone(),
                _ => {
                    let (c, h, w) = (f_f.shape()[0], f_f.shape()[1], f_f.shape()[2]);
                    let inj = conv2d(
                        &f_f.reshape(vec![1, c, h, w])?,
                        store.get(&format!("enc.inject{stage}.weight"))?,
                        store.get(&format!("enc.inject{stage}.bias"))?,
                    )?
                    .reshape(vec![c, h, w])?;
                    f_v.add(&inj)?
                }
            };
        }
        outs.push(StageOutput { f_v, f_f, f_vl });
    }
    Ok(outs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn tiny_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::default();
        cfg.input_hw = 32;
        cfg.base_channels = 4;
        cfg.text_dim = 6;
        cfg.max_len = 5;
        cfg.vocab_size = 9;
        cfg.kernel_tokens = 4;
        cfg.decoder_channels = 4;
        cfg.scan = ScanConfig {
            state_dim: 2,
            feature_dim: 4,
            directions: 2,
        };
        cfg.kernel_sizes = vec![1, 3];
        cfg
    }

    #[test]
    fn text_encoder_pads_and_means() {
        let cfg = tiny_cfg();
        let store = init_params::<f64>(&cfg, 5).unwrap();
        let t = toy_text_encoder(&[2, 0, 3], cfg.vocab_size, cfg.max_len, &store).unwrap();
        assert_eq!(t.word.shape(), &[5, 6]);
        assert_eq!(t.valid_len, 3);
        // padded rows are exactly zero
        for &v in &t.word.data()[3 * 6..] {
            assert_eq!(v, 0.0);
        }
        // sentence = mean of the three valid rows
        for j in 0..6 {
            let want = (t.word.at(&[0, j]) + t.word.at(&[1, j]) + t.word.at(&[2, j])) / 3.0;
            assert!((t.sentence.at(&[0, j]) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn text_encoder_validates_tokens() {
        let cfg = tiny_cfg();
        let store = init_params::<f64>(&cfg, 5).unwrap();
        assert!(matches!(
            toy_text_encoder(&[99], cfg.vocab_size, cfg.max_len, &store),
            Err(Error::Vocabulary { id: 99, .. })
        ));
        assert!(toy_text_encoder(&[], cfg.vocab_size, cfg.max_len, &store).is_err());
        assert!(toy_text_encoder(&[1; 9], cfg.vocab_size, cfg.max_len, &store).is_err());
    }

    #[test]
    fn stage_shapes_halve() {
        let cfg = tiny_cfg();
        let store = init_params::<f64>(&cfg, 6).unwrap();
        let mut rng = SplitMix64::new(7);
        let img = Tensor::new(
            vec![3, 32, 32],
            (0..3 * 32 * 32).map(|_| rng.uniform(0.0, 1.0)).collect(),
        )
        .unwrap();
        let outs = encode_plain(&img, &cfg, &store).unwrap();
        assert_eq!(outs[0].shape(), &[4, 8, 8]);
        assert_eq!(outs[1].shape(), &[8, 4, 4]);
        assert_eq!(outs[2].shape(), &[16, 2, 2]);
        assert_eq!(outs[3].shape(), &[32, 1, 1]);
    }

    #[test]
    fn alignment_at_init_leaves_vision_tower_unchanged() {
        let cfg = tiny_cfg();
        let store = init_params::<f64>(&cfg, 8).unwrap();
        let mut rng = SplitMix64::new(9);
        let img = Tensor::new(
            vec![3, 32, 32],
            (0..3 * 32 * 32).map(|_| rng.uniform(0.0, 1.0)).collect(),
        )
        .unwrap();
        let text = toy_text_encoder(&[1, 2], cfg.vocab_size, cfg.max_len, &store).unwrap();
        let aligned = encode_with_alignment(&img, &text, &cfg, &store).unwrap();
        let plain = encode_plain(&img, &cfg, &store).unwrap();
        for (a, p) in aligned.iter().zip(&plain) {
            assert_eq!(a.f_v.shape(), p.shape());
            for (x, y) in a.f_v.data().iter().zip(p.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }
}

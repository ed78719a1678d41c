//! Full model assembly: configuration, parameter initialization, forward.

use crate::cfsm::{register_cfsm, ScanConfig};
use crate::encoders::{
    encode_with_alignment, register_text_encoder, register_vision_encoder, toy_text_encoder,
};
use crate::error::{Error, Result};
use crate::mlam::{register_mlam, MlamConfig};
use crate::param::ParameterStore;
use crate::rng::SplitMix64;
use crate::scalar::Real;
use crate::tensor::{no_grad, Tensor};
use crate::wfdm::{register_wfdm, wfdm_forward, WfdmConfig, WfdmOutput};

/// Which alignment machinery runs between encoder stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Multiscale linear cross-attention + scanning fusion.
    Full,
    /// Single-scale softmax cross-attention in place of the linear kind.
    SoftmaxAttention,
    /// No cross-modal work in the encoder at all.
    NoAlignment,
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "softmax" => Ok(Variant::SoftmaxAttention),
            "none" => Ok(Variant::NoAlignment),
            other => Err(Error::Config(format!(
                "unknown variant `{other}` (expected full, softmax or none)"
            ))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Full => "full",
            Variant::SoftmaxAttention => "softmax",
            Variant::NoAlignment => "none",
        })
    }
}

#[derive(Clone, Debug)]
pub struct ModelConfig {
    /// Square input resolution; must be a multiple of 32.
    pub input_hw: usize,
    pub in_channels: usize,
    /// Stage-1 width; later stages double it.
    pub base_channels: usize,
    /// Text embedding width before per-stage adaptation.
    pub text_dim: usize,
    /// Padded expression length.
    pub max_len: usize,
    pub vocab_size: usize,
    pub scan: ScanConfig,
    /// Dynamic-kernel token count (perfect square).
    pub kernel_tokens: usize,
    /// Common decoder width.
    pub decoder_channels: usize,
    /// Attention projection kernel sizes (odd).
    pub kernel_sizes: Vec<usize>,
    /// X-Norm denominator floor.
    pub epsilon: f64,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_hw: 64,
            in_channels: 3,
            base_channels: 32,
            text_dim: 64,
            max_len: 17,
            vocab_size: crate::data::VOCAB.len(),
            scan: ScanConfig::default(),
            kernel_tokens: 64,
            decoder_channels: 32,
            kernel_sizes: vec![1, 3, 5],
            epsilon: 1e-6,
            variant: Variant::Full,
        }
    }
}

impl ModelConfig {
    pub fn stage_channels(&self) -> [usize; 4] {
        let c = self.base_channels;
        [c, 2 * c, 4 * c, 8 * c]
    }

    /// Stage resolutions: stride-4 stem, then three halvings.
    pub fn stage_hw(&self) -> [usize; 4] {
        let h = self.input_hw / 4;
        [h, h / 2, h / 4, h / 8]
    }

    pub fn mlam_config(&self, stage: usize) -> MlamConfig {
        let c = self.stage_channels()[stage - 1];
        let mut m = match self.variant {
            Variant::SoftmaxAttention => MlamConfig::softmax_single(c, self.max_len),
            _ => {
                let mut m = MlamConfig::linear(c, self.max_len);
                m.kernel_sizes = self.kernel_sizes.clone();
                m.scale_weight_init = 1.0 / self.kernel_sizes.len() as f64;
                m
            }
        };
        m.epsilon = self.epsilon;
        m
    }

    pub fn wfdm_config(&self) -> Result<WfdmConfig> {
        WfdmConfig::new(self.kernel_tokens, self.decoder_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_hw == 0 || self.input_hw % 32 != 0 {
            return Err(Error::Config(format!(
                "input_hw must be a positive multiple of 32, got {}",
                self.input_hw
            )));
        }
        for (what, v) in [
            ("in_channels", self.in_channels),
            ("base_channels", self.base_channels),
            ("text_dim", self.text_dim),
            ("max_len", self.max_len),
            ("vocab_size", self.vocab_size),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{what} must be positive")));
            }
        }
        if self.kernel_sizes.is_empty() {
            return Err(Error::Config("kernel_sizes must be non-empty".into()));
        }
        if let Some(&k) = self.kernel_sizes.iter().find(|&&k| k % 2 == 0) {
            return Err(Error::Config(format!(
                "kernel_sizes must be odd, got {k}"
            )));
        }
        if !matches!(self.scan.directions, 1 | 2 | 4) {
            return Err(Error::Config(format!(
                "scan directions must be 1, 2 or 4, got {}",
                self.scan.directions
            )));
        }
        if self.scan.state_dim == 0 || self.scan.feature_dim == 0 {
            return Err(Error::Config("scan dims must be positive".into()));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::Config(format!(
                "epsilon must be positive and finite, got {}",
                self.epsilon
            )));
        }
        self.wfdm_config().map(|_| ())
    }
}

/// Register every parameter of the configured model, seeded deterministically.
pub fn init_params<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<ParameterStore<T>> {
    cfg.validate()?;
    let mut store = ParameterStore::new();
    let mut rng = SplitMix64::new(seed);
    register_text_encoder(&mut store, cfg.vocab_size, cfg.text_dim, cfg.max_len, &mut rng)?;
    register_vision_encoder(&mut store, cfg, &mut rng)?;
    let chans = cfg.stage_channels();
    let hws = cfg.stage_hw();
    for stage in 1..=4 {
        let c = chans[stage - 1];
        // bias-free so zero-padded text rows stay zero after adaptation
        store.register_kaiming(
            &format!("enc.adapt{stage}"),
            vec![cfg.text_dim, c],
            cfg.text_dim,
            &mut rng,
        )?;
        if cfg.variant != Variant::NoAlignment {
            let mcfg = cfg.mlam_config(stage);
            register_mlam(&mut store, &format!("stage{stage}.mlam"), &mcfg, &mut rng)?;
            register_cfsm(
                &mut store,
                &format!("stage{stage}.cfsm"),
                2 * c + mcfg.local_channels,
                c,
                hws[stage - 1] * hws[stage - 1],
                &cfg.scan,
                &mut rng,
            )?;
            if stage < 4 {
                // zero init: the aligned encoder starts exactly at the plain one
                store.register_zeros(&format!("enc.inject{stage}.weight"), vec![c, c, 1, 1])?;
                store.register_zeros(&format!("enc.inject{stage}.bias"), vec![c])?;
            }
        }
    }
    register_wfdm(
        &mut store,
        "wfdm",
        &chans[..],
        cfg.max_len,
        &cfg.wfdm_config()?,
        &mut rng,
    )?;
    Ok(store)
}

/// Full forward pass: two-class pixel logits [2, input_hw, input_hw].
pub fn tfanet_forward<T: Real>(
    image: &Tensor<T>,
    tokens: &[usize],
    cfg: &ModelConfig,
    store: &ParameterStore<T>,
) -> Result<Tensor<T>> {
    Ok(tfanet_decode(image, tokens, cfg, store)?.score)
}

/// Forward pass keeping the whole decoder pyramid.
pub fn tfanet_decode<T: Real>(
    image: &Tensor<T>,
    tokens: &[usize],
    cfg: &ModelConfig,
    store: &ParameterStore<T>,
) -> Result<WfdmOutput<T>> {
    let text = toy_text_encoder(tokens, cfg.vocab_size, cfg.max_len, store)?;
    let stages = encode_with_alignment(image, &text, cfg, store)?;
    wfdm_forward(
        &stages,
        "wfdm",
        &cfg.wfdm_config()?,
        (cfg.input_hw, cfg.input_hw),
        store,
    )
}

/// Binary mask prediction: per-pixel argmax of the two score channels.
pub fn predict<T: Real>(
    image: &Tensor<T>,
    tokens: &[usize],
    cfg: &ModelConfig,
    store: &ParameterStore<T>,
) -> Result<Vec<bool>> {
    no_grad(|| {
        let score = tfanet_forward(image, tokens, cfg, store)?;
        let n = cfg.input_hw * cfg.input_hw;
        let d = score.data();
        Ok((0..n).map(|i| d[n + i] > d[i]).collect())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check_sampled, DEFAULT_STEP};

    pub(crate) fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            input_hw: 32,
            base_channels: 4,
            text_dim: 6,
            max_len: 5,
            vocab_size: 9,
            scan: ScanConfig {
                state_dim: 2,
                feature_dim: 4,
                directions: 2,
            },
            kernel_tokens: 4,
            decoder_channels: 4,
            kernel_sizes: vec![1, 3],
            ..ModelConfig::default()
        }
    }

    fn rand_image(cfg: &ModelConfig, seed: u64) -> Tensor<f64> {
        let mut rng = SplitMix64::new(seed);
        let n = cfg.in_channels * cfg.input_hw * cfg.input_hw;
        Tensor::new(
            vec![cfg.in_channels, cfg.input_hw, cfg.input_hw],
            (0..n).map(|_| rng.uniform(0.0, 1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn stage_arithmetic() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.stage_hw(), [16, 8, 4, 2]);
        assert_eq!(cfg.stage_channels(), [32, 64, 128, 256]);
        let big = ModelConfig {
            input_hw: 480,
            ..ModelConfig::default()
        };
        assert_eq!(big.stage_hw(), [120, 60, 30, 15]);
    }

    #[test]
    fn validate_rejects_bad_configs() {
        let mut cfg = tiny_cfg();
        cfg.input_hw = 48;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg();
        cfg.kernel_sizes = vec![1, 2];
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg();
        cfg.kernel_tokens = 5;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg();
        cfg.scan.directions = 3;
        assert!(cfg.validate().is_err());
        assert!(tiny_cfg().validate().is_ok());
    }

    #[test]
    fn variant_parsing_round_trips() {
        for v in [Variant::Full, Variant::SoftmaxAttention, Variant::NoAlignment] {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
        assert!("quadratic".parse::<Variant>().is_err());
    }

    #[test]
    fn forward_shape_and_determinism() {
        let cfg = tiny_cfg();
        let store = init_params::<f64>(&cfg, 11).unwrap();
        let img = rand_image(&cfg, 12);
        let s1 = tfanet_forward(&img, &[1, 2, 3], &cfg, &store).unwrap();
        assert_eq!(s1.shape(), &[2, 32, 32]);
        assert!(s1.data().iter().all(|v| v.is_finite()));
        let s2 = tfanet_forward(&img, &[1, 2, 3], &cfg, &store).unwrap();
        for (a, b) in s1.data().iter().zip(s2.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn different_expressions_reach_the_decoder() {
        // the score head starts at zero, so compare the decoded mask pyramid
        let cfg = tiny_cfg();
        let store = init_params::<f64>(&cfg, 13).unwrap();
        let img = rand_image(&cfg, 14);
        let a = tfanet_decode(&img, &[0, 1], &cfg, &store).unwrap();
        let b = tfanet_decode(&img, &[4, 5], &cfg, &store).unwrap();
        let diff = a
            .aggregated
            .last()
            .unwrap()
            .data()
            .iter()
            .zip(b.aggregated.last().unwrap().data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(diff > 0.0);
    }

    #[test]
    fn all_variants_run() {
        for variant in [Variant::Full, Variant::SoftmaxAttention, Variant::NoAlignment] {
            let cfg = ModelConfig {
                variant,
                ..tiny_cfg()
            };
            let store = init_params::<f64>(&cfg, 15).unwrap();
            let img = rand_image(&cfg, 16);
            let s = tfanet_forward(&img, &[2, 7], &cfg, &store).unwrap();
            assert_eq!(s.shape(), &[2, 32, 32]);
            assert!(s.data().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn predict_matches_argmax_of_scores() {
        let cfg = tiny_cfg();
        let store = init_params::<f64>(&cfg, 17).unwrap();
        let img = rand_image(&cfg, 18);
        let score = tfanet_forward(&img, &[3], &cfg, &store).unwrap();
        let mask = predict(&img, &[3], &cfg, &store).unwrap();
        let n = 32 * 32;
        for i in 0..n {
            assert_eq!(mask[i], score.data()[n + i] > score.data()[i]);
        }
    }

    #[test]
    fn model_gradients_spot_check() {
        let mut cfg = tiny_cfg();
        cfg.max_len = 3;
        let mut store = init_params::<f64>(&cfg, 19).unwrap();
        // off the structured-zero inits, else most checks compare 0 vs 0
        crate::gradcheck::jitter_params(&mut store, 0.05, 23);
        let img = rand_image(&cfg, 20);
        let f = |s: &ParameterStore<f64>| Ok(tfanet_forward(&img, &[1, 4], &cfg, s)?.sum_all());
        let rep = grad_check_sampled(&f, &mut store, DEFAULT_STEP, 24, 21).unwrap();
        assert!(
            rep.max_rel_err < 1e-4,
            "{}[{}]: {}",
            rep.worst_param,
            rep.worst_index,
            rep.max_rel_err
        );
    }
}

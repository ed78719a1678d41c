//! Named finite-difference checks over small instances of each block.
//!
//! Several blocks initialize their output projections to zero so a fresh
//! model starts as an exact residual identity; a gradcheck at that point
//! would compare zeros against zeros. Every check therefore jitters the
//! parameters away from init first.

use tfanet_core::cfsm::{cfsm_forward, register_cfsm, ScanConfig};
use tfanet_core::error::{Error, Result};
use tfanet_core::gradcheck::{
    grad_check, grad_check_sampled, jitter_params, GradCheckReport, DEFAULT_STEP,
};
use tfanet_core::mlam::{
    linear_cross_attention, mlam_forward, register_mlam, softmax_cross_attention, xnorm,
    MlamConfig,
};
use tfanet_core::model::{init_params, tfanet_forward, ModelConfig};
use tfanet_core::param::ParameterStore;
use tfanet_core::rng::SplitMix64;
use tfanet_core::tensor::Tensor;
use tfanet_core::wfdm::{register_wfdm, wfdm_forward, WfdmConfig};
use tfanet_core::ParameterStore64;

pub const MODULES: &[&str] = &["xnorm", "attention", "cfsm", "mlam", "wfdm", "model"];
pub const TOLERANCE: f64 = 1e-4;

fn rand_t(shape: Vec<usize>, rng: &mut SplitMix64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
}

fn register_rand(store: &mut ParameterStore64, name: &str, shape: Vec<usize>, rng: &mut SplitMix64) {
    let n = shape.iter().product();
    store
        .register(name, shape, (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect())
        .unwrap();
}

fn check_xnorm(seed: u64) -> Result<GradCheckReport> {
    let mut rng = SplitMix64::new(seed);
    let mut store = ParameterStore::new();
    register_rand(&mut store, "x", vec![5, 4], &mut rng);
    register_rand(&mut store, "gamma", vec![1], &mut rng);
    let probe = rand_t(vec![5, 4], &mut rng);
    let f = |s: &ParameterStore64| {
        let y = xnorm(s.get("x")?, s.get("gamma")?, 1e-6)?;
        Ok(y.mul(&probe)?.sum_all())
    };
    grad_check(&f, &mut store, DEFAULT_STEP)
}

fn check_attention(seed: u64) -> Result<GradCheckReport> {
    let mut rng = SplitMix64::new(seed);
    let mut store = ParameterStore::new();
    register_rand(&mut store, "q", vec![6, 4], &mut rng);
    register_rand(&mut store, "k", vec![5, 4], &mut rng);
    register_rand(&mut store, "v", vec![5, 4], &mut rng);
    register_rand(&mut store, "gq", vec![1], &mut rng);
    register_rand(&mut store, "gkv", vec![1], &mut rng);
    let p1 = rand_t(vec![6, 4], &mut rng);
    let p2 = rand_t(vec![6, 4], &mut rng);
    let f = |s: &ParameterStore64| {
        let (q, k, v) = (s.get("q")?, s.get("k")?, s.get("v")?);
        let lin = linear_cross_attention(q, k, v, s.get("gq")?, s.get("gkv")?, 1e-6)?;
        let soft = softmax_cross_attention(q, k, v)?;
        lin.mul(&p1)?.sum_all().add(&soft.mul(&p2)?.sum_all())
    };
    grad_check(&f, &mut store, DEFAULT_STEP)
}

fn check_cfsm(seed: u64) -> Result<GradCheckReport> {
    let mut rng = SplitMix64::new(seed);
    let mut store = ParameterStore::new();
    let cfg = ScanConfig {
        state_dim: 2,
        feature_dim: 3,
        directions: 2,
    };
    register_cfsm(&mut store, "cf", 4, 2, 4, &cfg, &mut rng)?;
    register_rand(&mut store, "block", vec![4, 2, 2], &mut rng);
    jitter_params(&mut store, 0.2, seed ^ 0xa5);
    let probe = rand_t(vec![2, 2, 2], &mut rng);
    let f = |s: &ParameterStore64| {
        let y = cfsm_forward(s.get("block")?, 2, "cf", &cfg, s)?;
        Ok(y.mul(&probe)?.sum_all())
    };
    grad_check(&f, &mut store, DEFAULT_STEP)
}

fn check_mlam(seed: u64) -> Result<GradCheckReport> {
    let mut rng = SplitMix64::new(seed);
    let mut store = ParameterStore::new();
    let mut cfg = MlamConfig::linear(4, 3);
    cfg.kernel_sizes = vec![1, 3];
    cfg.scale_weight_init = 0.5;
    register_mlam(&mut store, "m", &cfg, &mut rng)?;
    register_rand(&mut store, "f_v", vec![4, 3, 3], &mut rng);
    register_rand(&mut store, "f_w", vec![3, 4], &mut rng);
    let probe = rand_t(vec![2 * 4 + cfg.local_channels, 3, 3], &mut rng);
    let f = |s: &ParameterStore64| {
        let out = mlam_forward(s.get("f_v")?, s.get("f_w")?, &cfg, "m", s)?;
        Ok(out.f_block.mul(&probe)?.sum_all())
    };
    grad_check(&f, &mut store, DEFAULT_STEP)
}

fn check_wfdm(seed: u64) -> Result<GradCheckReport> {
    let mut rng = SplitMix64::new(seed);
    let mut store = ParameterStore::new();
    let cfg = WfdmConfig::new(4, 3)?;
    register_wfdm(&mut store, "w", &[3, 6], 3, &cfg, &mut rng)?;
    register_rand(&mut store, "in.f_f1", vec![3, 4, 4], &mut rng);
    register_rand(&mut store, "in.f_vl1", vec![3, 3], &mut rng);
    register_rand(&mut store, "in.f_f2", vec![6, 2, 2], &mut rng);
    register_rand(&mut store, "in.f_vl2", vec![3, 6], &mut rng);
    jitter_params(&mut store, 0.2, seed ^ 0xa5);
    let probe = rand_t(vec![2, 8, 8], &mut rng);
    let f = |s: &ParameterStore64| {
        let stages = [
            stage(s.get("in.f_f1")?, s.get("in.f_vl1")?),
            stage(s.get("in.f_f2")?, s.get("in.f_vl2")?),
        ];
        let out = wfdm_forward(&stages, "w", &cfg, (8, 8), s)?;
        Ok(out.score.mul(&probe)?.sum_all())
    };
    grad_check(&f, &mut store, DEFAULT_STEP)
}

fn stage(
    f_f: &Tensor<f64>,
    f_vl: &Tensor<f64>,
) -> tfanet_core::encoders::StageOutput<f64> {
    tfanet_core::encoders::StageOutput {
        f_v: f_f.clone(),
        f_f: f_f.clone(),
        f_vl: f_vl.clone(),
    }
}

fn check_model(seed: u64) -> Result<GradCheckReport> {
    let cfg = ModelConfig {
        input_hw: 32,
        base_channels: 4,
        text_dim: 6,
        max_len: 3,
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
    };
    let mut store = init_params::<f64>(&cfg, seed)?;
    jitter_params(&mut store, 0.05, seed ^ 0xa5);
    let mut rng = SplitMix64::new(seed ^ 0x1117);
    let img = rand_t(vec![3, 32, 32], &mut rng);
    let probe = rand_t(vec![2, 32, 32], &mut rng);
    let f = |s: &ParameterStore64| {
        let score = tfanet_forward(&img, &[1, 4], &cfg, s)?;
        Ok(score.mul(&probe)?.sum_all())
    };
    grad_check_sampled(&f, &mut store, DEFAULT_STEP, 120, seed ^ 0x2227)
}

pub fn run_module(name: &str, seed: u64) -> Result<GradCheckReport> {
    match name {
        "xnorm" => check_xnorm(seed),
        "attention" => check_attention(seed),
        "cfsm" => check_cfsm(seed),
        "mlam" => check_mlam(seed),
        "wfdm" => check_wfdm(seed),
        "model" => check_model(seed),
        other => Err(Error::Config(format!(
            "unknown gradcheck module `{other}` (known: {})",
            MODULES.join(", ")
        ))),
    }
}

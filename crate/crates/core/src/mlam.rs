//! Multiscale linear cross-attention alignment (MLAM).
//!
//! Queries from one modality attend to keys/values from the other at kernel
//! scales 1/3/5, in both directions (text-to-image and image-to-text). The
//! linear form normalizes Q and K^T V with X-Norm and multiplies
//! Q_n (K^T V)_n, so nothing of size n_q x n_kv is ever materialized; cost
//! and memory stay linear in token count for fixed feature width. A softmax
//! variant with the usual quadratic score matrix is kept as a baseline and
//! for the single-scale ablation.

use crate::error::{Error, Result};
use crate::param::ParameterStore;
use crate::rng::SplitMix64;
use crate::scalar::Real;
use crate::tensor::{concat, conv1d_same, conv2d, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    Linear,
    Softmax,
}

#[derive(Clone, Debug)]
pub struct MlamConfig {
    /// Feature width C shared by both modalities at this stage.
    pub channels: usize,
    /// Padded text length L.
    pub text_len: usize,
    /// Channels of the local fused map F_c (C/2 by default).
    pub local_channels: usize,
    /// Projection kernel sizes, one attention term per entry.
    pub kernel_sizes: Vec<usize>,
    pub attention: AttentionKind,
    /// Floor for the X-Norm denominator.
    pub epsilon: f64,
    pub gamma_init: f64,
    /// Init for the per-scale mixing weights.
    pub scale_weight_init: f64,
}

impl MlamConfig {
    /// Full multiscale linear configuration.
    pub fn linear(channels: usize, text_len: usize) -> Self {
        MlamConfig {
            channels,
            text_len,
            local_channels: (channels / 2).max(1),
            kernel_sizes: vec![1, 3, 5],
            attention: AttentionKind::Linear,
            epsilon: 1e-6,
            gamma_init: 1.0,
            scale_weight_init: 1.0 / 3.0,
        }
    }

    /// Single-scale softmax baseline (ablation).
    pub fn softmax_single(channels: usize, text_len: usize) -> Self {
        MlamConfig {
            channels,
            text_len,
            local_channels: (channels / 2).max(1),
            kernel_sizes: vec![1],
            attention: AttentionKind::Softmax,
            epsilon: 1e-6,
            gamma_init: 1.0,
            scale_weight_init: 1.0,
        }
    }
}

/// One modality's features at a stage.
#[derive(Clone)]
pub enum Feature<T: Real> {
    /// [c, h, w] image grid; tokens are pixels.
    Spatial(Tensor<T>),
    /// [l, c] word sequence.
    Tokens(Tensor<T>),
}

impl<T: Real> Feature<T> {
    /// Token count of this feature.
    pub fn len(&self) -> usize {
        match self {
            Feature::Spatial(t) => t.shape()[1] * t.shape()[2],
            Feature::Tokens(t) => t.shape()[0],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// X-Norm: rescale every row r of a matrix to gamma * r / max(eps, |r|_2).
pub fn xnorm<T: Real>(x: &Tensor<T>, gamma: &Tensor<T>, epsilon: f64) -> Result<Tensor<T>> {
    if x.rank() != 2 {
        return Err(Error::BadShape {
            op: "xnorm",
            shape: x.shape().to_vec(),
            reason: "expected a rank-2 tensor".into(),
        });
    }
    if gamma.numel() != 1 {
        return Err(Error::BadShape {
            op: "xnorm",
            shape: gamma.shape().to_vec(),
            reason: "gamma must have one element".into(),
        });
    }
    if epsilon <= 0.0 {
        return Err(Error::InvalidArgument(
            "xnorm: epsilon must be positive".into(),
        ));
    }
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let eps = T::from_f64(epsilon);
    let gv = gamma.data()[0];
    let xd = x.data();
    let mut out = Vec::with_capacity(n * d);
    for i in 0..n {
        let row = &xd[i * d..(i + 1) * d];
        let mut sq = T::zero();
        for &v in row {
            sq += v * v;
        }
        let norm = sq.sqrt().max(eps);
        let s = gv / norm;
        out.extend(row.iter().map(|&v| v * s));
    }
    Ok(Tensor::from_op(
        vec![n, d],
        out,
        vec![x.clone(), gamma.clone()],
        move |g, ps| {
            let xd = ps[0].data();
            let gv = ps[1].data()[0];
            let need_x = ps[0].requires_grad();
            let need_g = ps[1].requires_grad();
            let mut dx = need_x.then(|| vec![T::zero(); n * d]);
            let mut dg = T::zero();
            for i in 0..n {
                let row = &xd[i * d..(i + 1) * d];
                let grow = &g[i * d..(i + 1) * d];
                let mut sq = T::zero();
                for &v in row {
                    sq += v * v;
                }
                let norm = sq.sqrt();
                let mut gdotr = T::zero();
                for (&gv_, &rv) in grow.iter().zip(row) {
                    gdotr += gv_ * rv;
                }
                if norm <= eps {
                    // below the floor the map is plain scaling by gamma/eps
                    if need_g {
                        dg += gdotr / eps;
                    }
                    if let Some(dx) = dx.as_mut() {
                        let s = gv / eps;
                        for (d_, &gv_) in dx[i * d..(i + 1) * d].iter_mut().zip(grow) {
                            *d_ = gv_ * s;
                        }
                    }
                } else {
                    if need_g {
                        dg += gdotr / norm;
                    }
                    if let Some(dx) = dx.as_mut() {
                        let s = gv / norm;
                        let proj = gdotr / (norm * norm);
                        for ((d_, &gv_), &rv) in
                            dx[i * d..(i + 1) * d].iter_mut().zip(grow).zip(row)
                        {
                            *d_ = s * (gv_ - proj * rv);
                        }
                    }
                }
            }
            vec![dx, need_g.then(|| vec![dg])]
        },
    ))
}

/// Linear cross-attention: xnorm(Q) * xnorm(K^T V).
///
/// Associates the product as Q (K^T V): the contraction K^T V is a d x d
/// matrix, so no n_q x n_kv score matrix exists at any point.
pub fn linear_cross_attention<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    gamma_q: &Tensor<T>,
    gamma_kv: &Tensor<T>,
    epsilon: f64,
) -> Result<Tensor<T>> {
    let kv = k.transpose()?.matmul(v)?;
    xnorm(q, gamma_q, epsilon)?.matmul(&xnorm(&kv, gamma_kv, epsilon)?)
}

/// Right-associated product Q (K^T V) without any normalization. Exists to
/// test associativity against the explicit (Q K^T) V order.
pub fn linear_cross_attention_unnormalized<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
) -> Result<Tensor<T>> {
    q.matmul(&k.transpose()?.matmul(v)?)
}

/// Softmax cross-attention baseline: softmax(Q K^T / sqrt(d)) V.
pub fn softmax_cross_attention<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
) -> Result<Tensor<T>> {
    let d = q.shape()[1];
    let scores = q
        .matmul(&k.transpose()?)?
        .mul_scalar(T::from_f64(1.0 / (d as f64).sqrt()));
    scores.softmax(1)?.matmul(v)
}

fn project<T: Real>(
    feature: &Feature<T>,
    store: &ParameterStore<T>,
    name: &str,
) -> Result<Tensor<T>> {
    let w = store.get(&format!("{name}.weight"))?;
    let b = store.get(&format!("{name}.bias"))?;
    match feature {
        Feature::Spatial(x) => {
            let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let y = conv2d(&x.reshape(vec![1, c, h, wd])?, w, b)?;
            y.reshape(vec![c, h * wd])?.transpose()
        }
        Feature::Tokens(x) => conv1d_same(x, w, b),
    }
}

/// Multiscale Q/K/V projections for one direction: one (q, k, v) triple of
/// token matrices per kernel size.
#[allow(clippy::type_complexity)]
pub fn multiscale_qkv<T: Real>(
    query: &Feature<T>,
    kv: &Feature<T>,
    cfg: &MlamConfig,
    prefix: &str,
    store: &ParameterStore<T>,
) -> Result<Vec<(Tensor<T>, Tensor<T>, Tensor<T>)>> {
    cfg.kernel_sizes
        .iter()
        .map(|k| {
            Ok((
                project(query, store, &format!("{prefix}.q{k}"))?,
                project(kv, store, &format!("{prefix}.k{k}"))?,
                project(kv, store, &format!("{prefix}.v{k}"))?,
            ))
        })
        .collect()
}

/// Cross-attend `query` to `kv` and mix the per-scale outputs with learned
/// scalar weights. Returns an [n_query, c] token matrix.
pub fn align<T: Real>(
    query: &Feature<T>,
    kv: &Feature<T>,
    cfg: &MlamConfig,
    prefix: &str,
    store: &ParameterStore<T>,
) -> Result<Tensor<T>> {
    let triples = multiscale_qkv(query, kv, cfg, prefix, store)?;
    let mut acc: Option<Tensor<T>> = None;
    for (ksize, (q, k, v)) in cfg.kernel_sizes.iter().zip(&triples) {
        let att = match cfg.attention {
            AttentionKind::Linear => {
                let gq = store.get(&format!("{prefix}.gq{ksize}"))?;
                let gkv = store.get(&format!("{prefix}.gkv{ksize}"))?;
                linear_cross_attention(q, k, v, gq, gkv, cfg.epsilon)?
            }
            AttentionKind::Softmax => softmax_cross_attention(q, k, v)?,
        };
        let term = att.scale(store.get(&format!("{prefix}.w{ksize}"))?)?;
        acc = Some(match acc {
            Some(a) => a.add(&term)?,
            None => term,
        });
    }
    Ok(acc.expect("kernel_sizes must be non-empty"))
}

/// Everything MLAM produces at one stage.
pub struct MlamOutput<T: Real> {
    /// Text features aligned to the image, [l, c].
    pub f_vl: Tensor<T>,
    /// Image features aligned to the text, [c, h, w].
    pub f_lv: Tensor<T>,
    /// Local fused map from the pixel-word affinity, [local_channels, h, w].
    pub f_c: Tensor<T>,
    /// Concatenated block [2c + local_channels, h, w] handed to CFSM.
    pub f_block: Tensor<T>,
}

/// Bidirectional alignment plus fusion at one stage.
///
/// f_v: [c, h, w] image features; f_w: [l, c] text features (padded rows
/// zero). The fused block stacks the broadcast token-mean of the aligned
/// text, the aligned image map, and a local projection of the pixel-word
/// affinity map.
pub fn mlam_forward<T: Real>(
    f_v: &Tensor<T>,
    f_w: &Tensor<T>,
    cfg: &MlamConfig,
    prefix: &str,
    store: &ParameterStore<T>,
) -> Result<MlamOutput<T>> {
    if f_v.rank() != 3 || f_v.shape()[0] != cfg.channels {
        return Err(Error::BadShape {
            op: "mlam_forward",
            shape: f_v.shape().to_vec(),
            reason: format!("image features must be [{}, h, w]", cfg.channels),
        });
    }
    if f_w.shape() != [cfg.text_len, cfg.channels] {
        return Err(Error::BadShape {
            op: "mlam_forward",
            shape: f_w.shape().to_vec(),
            reason: format!("text features must be [{}, {}]", cfg.text_len, cfg.channels),
        });
    }
    let (c, h, w) = (f_v.shape()[0], f_v.shape()[1], f_v.shape()[2]);
    let image = Feature::Spatial(f_v.clone());
    let tokens = Feature::Tokens(f_w.clone());

    let f_vl = align(&tokens, &image, cfg, &format!("{prefix}.t2i"), store)?;
    let f_lv_mat = align(&image, &tokens, cfg, &format!("{prefix}.i2t"), store)?;

    // pixel-word affinity: (F_LV W_L)(F_VL W_V)^T, flattened back to a grid
    let al = f_lv_mat.matmul(store.get(&format!("{prefix}.fuse.wl"))?)?;
    let av = f_vl.matmul(store.get(&format!("{prefix}.fuse.wv"))?)?;
    let f_f = al.matmul(&av.transpose()?)?; // [h*w, l]
    let f_f_grid = f_f.transpose()?.reshape(vec![1, cfg.text_len, h, w])?;
    let f_c = conv2d(
        &f_f_grid,
        store.get(&format!("{prefix}.fuse.local.weight"))?,
        store.get(&format!("{prefix}.fuse.local.bias"))?,
    )?
    .reshape(vec![cfg.local_channels, h, w])?;

    let e_vl = f_vl
        .sum_axis(0)?
        .mul_scalar(T::from_f64(1.0 / cfg.text_len as f64))
        .broadcast_spatial(h, w)?;
    let e_lv = f_lv_mat.transpose()?.reshape(vec![c, h, w])?;

    let f_block = concat(0, &[e_vl, e_lv.clone(), f_c.clone()])?;
    Ok(MlamOutput {
        f_vl,
        f_lv: e_lv,
        f_c,
        f_block,
    })
}

/// Register all MLAM parameters for one stage under `prefix`.
pub fn register_mlam<T: Real>(
    store: &mut ParameterStore<T>,
    prefix: &str,
    cfg: &MlamConfig,
    rng: &mut SplitMix64,
) -> Result<()> {
    let c = cfg.channels;
    let l = cfg.text_len;
    // t2i: queries are tokens (1-d convs), keys/values are pixels (2-d convs)
    for (dir, query_is_tokens) in [("t2i", true), ("i2t", false)] {
        for &k in &cfg.kernel_sizes {
            let conv1 = |store: &mut ParameterStore<T>, name: String, rng: &mut SplitMix64| {
                store.register_kaiming(&format!("{name}.weight"), vec![c, c, k], c * k, rng)?;
                store.register_zeros(&format!("{name}.bias"), vec![c])
            };
            let conv2 = |store: &mut ParameterStore<T>, name: String, rng: &mut SplitMix64| {
                store.register_kaiming(
                    &format!("{name}.weight"),
                    vec![c, c, k, k],
                    c * k * k,
                    rng,
                )?;
                store.register_zeros(&format!("{name}.bias"), vec![c])
            };
            let base = format!("{prefix}.{dir}");
            if query_is_tokens {
                conv1(store, format!("{base}.q{k}"), rng)?;
                conv2(store, format!("{base}.k{k}"), rng)?;
                conv2(store, format!("{base}.v{k}"), rng)?;
            } else {
                conv2(store, format!("{base}.q{k}"), rng)?;
                conv1(store, format!("{base}.k{k}"), rng)?;
                conv1(store, format!("{base}.v{k}"), rng)?;
            }
            if cfg.attention == AttentionKind::Linear {
                store.register_full(&format!("{base}.gq{k}"), vec![1], cfg.gamma_init)?;
                store.register_full(&format!("{base}.gkv{k}"), vec![1], cfg.gamma_init)?;
            }
            store.register_full(&format!("{base}.w{k}"), vec![1], cfg.scale_weight_init)?;
        }
    }
    store.register_kaiming(&format!("{prefix}.fuse.wl"), vec![c, c], c, rng)?;
    store.register_kaiming(&format!("{prefix}.fuse.wv"), vec![c, c], c, rng)?;
    store.register_kaiming(
        &format!("{prefix}.fuse.local.weight"),
        vec![cfg.local_channels, l, 1, 1],
        l,
        rng,
    )?;
    store.register_zeros(&format!("{prefix}.fuse.local.bias"), vec![cfg.local_channels])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alloc;
    use crate::gradcheck::{grad_check, DEFAULT_STEP};
    use crate::tensor::no_grad;

    fn rand_t(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
        let mut rng = SplitMix64::new(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
    }

    #[test]
    fn xnorm_rows_have_norm_gamma() {
        let x = rand_t(vec![6, 5], 1);
        let g = Tensor::scalar(2.0);
        let y = xnorm(&x, &g, 1e-6).unwrap();
        for i in 0..6 {
            let norm: f64 = y.data()[i * 5..(i + 1) * 5]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            assert!((norm - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn xnorm_zero_row_stays_finite() {
        let x = Tensor::<f64>::new(vec![2, 3], vec![0.0, 0.0, 0.0, 3.0, 0.0, 4.0]).unwrap();
        let g = Tensor::scalar(1.0);
        let y = xnorm(&x, &g, 1e-6).unwrap();
        assert_eq!(&y.data()[..3], &[0.0, 0.0, 0.0]);
        assert!((y.data()[3] - 0.6).abs() < 1e-12);
        assert!((y.data()[5] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn xnorm_gradients() {
        let mut store = ParameterStore::<f64>::new();
        let mut rng = SplitMix64::new(5);
        store
            .register(
                "x",
                vec![4, 3],
                (0..12).map(|_| rng.uniform(0.5, 1.5)).collect(),
            )
            .unwrap();
        store.register("g", vec![1], vec![1.3]).unwrap();
        let probe = rand_t(vec![4, 3], 77);
        let f = |s: &ParameterStore<f64>| {
            Ok(xnorm(s.get("x")?, s.get("g")?, 1e-6)?.mul(&probe)?.sum_all())
        };
        let rep = grad_check(&f, &mut store, DEFAULT_STEP).unwrap();
        assert!(rep.max_rel_err < 1e-6, "err {}", rep.max_rel_err);
    }

    #[test]
    fn associativity_of_unnormalized_product() {
        let q = rand_t(vec![7, 4], 10);
        let k = rand_t(vec![9, 4], 11);
        let v = rand_t(vec![9, 4], 12);
        let right = linear_cross_attention_unnormalized(&q, &k, &v).unwrap();
        let left = q.matmul(&k.transpose().unwrap()).unwrap().matmul(&v).unwrap();
        for (a, b) in right.data().iter().zip(left.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn softmax_attention_uniform_keys() {
        // identical keys -> uniform weights -> output is the value mean
        let q = rand_t(vec![3, 4], 20);
        let k = Tensor::new(vec![2, 4], vec![0.3, -0.1, 0.2, 0.5, 0.3, -0.1, 0.2, 0.5]).unwrap();
        let v = Tensor::new(vec![2, 4], (0..8).map(|v| v as f64).collect()).unwrap();
        let y = softmax_cross_attention(&q, &k, &v).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                let want = (v.at(&[0, j]) + v.at(&[1, j])) / 2.0;
                assert!((y.at(&[i, j]) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_attention_memory_stays_small() {
        // softmax materializes n_q x n_kv scores; linear never does
        let n = 1024;
        let d = 16;
        let g1 = Tensor::scalar(1.0f64);
        let g2 = Tensor::scalar(1.0f64);
        let q = rand_t(vec![n, d], 31);
        let k = rand_t(vec![n, d], 32);
        let v = rand_t(vec![n, d], 33);
        let (_, linear_peak) = alloc::measure_peak(|| {
            no_grad(|| linear_cross_attention(&q, &k, &v, &g1, &g2, 1e-6).unwrap())
        });
        let (_, softmax_peak) =
            alloc::measure_peak(|| no_grad(|| softmax_cross_attention(&q, &k, &v).unwrap()));
        // scores alone are n*n*8 bytes; linear needs O(n*d + d*d)
        assert!(softmax_peak >= (n * n * 8) as i64);
        assert!(linear_peak < (8 * n * d * 8) as i64);
    }

    fn tiny_cfg() -> MlamConfig {
        let mut cfg = MlamConfig::linear(4, 3);
        cfg.kernel_sizes = vec![1, 3];
        cfg
    }

    #[test]
    fn mlam_forward_shapes() {
        let cfg = tiny_cfg();
        let mut rng = SplitMix64::new(40);
        let mut store = ParameterStore::<f64>::new();
        register_mlam(&mut store, "m", &cfg, &mut rng).unwrap();
        let f_v = rand_t(vec![4, 4, 4], 41);
        let f_w = rand_t(vec![3, 4], 42);
        let out = mlam_forward(&f_v, &f_w, &cfg, "m", &store).unwrap();
        assert_eq!(out.f_vl.shape(), &[3, 4]);
        assert_eq!(out.f_lv.shape(), &[4, 4, 4]);
        assert_eq!(out.f_c.shape(), &[2, 4, 4]);
        assert_eq!(out.f_block.shape(), &[4 + 4 + 2, 4, 4]);
    }

    #[test]
    fn mlam_gradients() {
        let cfg = tiny_cfg();
        let mut rng = SplitMix64::new(50);
        let mut store = ParameterStore::<f64>::new();
        register_mlam(&mut store, "m", &cfg, &mut rng).unwrap();
        let f_v = rand_t(vec![4, 2, 2], 51);
        let f_w = rand_t(vec![3, 4], 52);
        let f = |s: &ParameterStore<f64>| {
            let out = mlam_forward(&f_v, &f_w, &tiny_cfg(), "m", s)?;
            Ok(out.f_block.mul(&out.f_block)?.mean_all())
        };
        let rep = grad_check(&f, &mut store, DEFAULT_STEP).unwrap();
        assert!(rep.max_rel_err < 1e-5, "{}: {}", rep.worst_param, rep.max_rel_err);
    }

    #[test]
    fn softmax_variant_runs_without_gammas() {
        let cfg = MlamConfig::softmax_single(4, 3);
        let mut rng = SplitMix64::new(60);
        let mut store = ParameterStore::<f64>::new();
        register_mlam(&mut store, "m", &cfg, &mut rng).unwrap();
        assert!(!store.contains("m.t2i.gq1"));
        let f_v = rand_t(vec![4, 2, 2], 61);
        let f_w = rand_t(vec![3, 4], 62);
        let out = mlam_forward(&f_v, &f_w, &cfg, "m", &store).unwrap();
        assert_eq!(out.f_block.shape(), &[10, 2, 2]);
    }
}

//! Training loop and dataset evaluation for the synthetic task.

use crate::data::{generate_dataset, SyntheticSample};
use crate::error::{Error, Result};
use crate::metrics::{compute_metrics, MetricsReport};
use crate::model::{init_params, predict, tfanet_forward, ModelConfig};
use crate::optim::{clip_grad_norm, AdamW};
use crate::param::ParameterStore;
use crate::rng::SplitMix64;
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Pixel-wise two-class cross-entropy of score logits [2, h, w] against a
/// binary mask (channel 1 = referent), averaged over pixels.
pub fn cross_entropy_mask<T: Real>(score: &Tensor<T>, mask: &[bool]) -> Result<Tensor<T>> {
    if score.rank() != 3 || score.shape()[0] != 2 {
        return Err(Error::BadShape {
            op: "cross_entropy_mask",
            shape: score.shape().to_vec(),
            reason: "expected [2, h, w] logits".into(),
        });
    }
    let (h, w) = (score.shape()[1], score.shape()[2]);
    let n = h * w;
    if mask.len() != n {
        return Err(Error::DimMismatch {
            op: "cross_entropy_mask",
            lhs: vec![n],
            rhs: vec![mask.len()],
        });
    }
    let lsm = score.log_softmax(0)?;
    let mut sel = vec![T::zero(); 2 * n];
    for (i, &m) in mask.iter().enumerate() {
        sel[if m { n + i } else { i }] = T::one();
    }
    let onehot = Tensor::new(vec![2, h, w], sel)?;
    Ok(lsm
        .mul(&onehot)?
        .sum_all()
        .mul_scalar(T::from_f64(-1.0 / n as f64)))
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; keeps occasional scan/attention spikes
    /// from derailing a run.
    pub grad_clip: f64,
    /// Fraction of steps after which the learning rate halves.
    pub decay_at: f64,
    pub train_samples: usize,
    pub val_samples: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 7,
            steps: 1200,
            batch_size: 8,
            learning_rate: 3e-4,
            weight_decay: 1e-4,
            grad_clip: 1.0,
            decay_at: 0.5,
            train_samples: 2000,
            val_samples: 200,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (what, v) in [
            ("steps", self.steps),
            ("batch_size", self.batch_size),
            ("train_samples", self.train_samples),
            ("val_samples", self.val_samples),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{what} must be positive")));
            }
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if !(self.grad_clip.is_finite() && self.grad_clip > 0.0) {
            return Err(Error::Config(format!(
                "grad_clip must be positive and finite, got {}",
                self.grad_clip
            )));
        }
        if !(0.0..=1.0).contains(&self.decay_at) {
            return Err(Error::Config(format!(
                "decay_at must lie in [0, 1], got {}",
                self.decay_at
            )));
        }
        self.model.validate()
    }

    /// Held-out samples; the stream is disjoint from the training set's.
    pub fn val_set(&self) -> Vec<SyntheticSample> {
        generate_dataset(self.seed ^ VAL_STREAM, self.val_samples, self.model.input_hw)
    }
}

// Distinct rng streams derived from one user-facing seed.
const INIT_STREAM: u64 = 0x9E3779B97F4A7C15;
const VAL_STREAM: u64 = 0xD1B54A32D192ED03;
const BATCH_STREAM: u64 = 0x8BB84B93962EACC9;

#[derive(Clone, Copy, Debug)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Train from scratch; returns the trained store and the per-step loss log.
/// Deterministic given the config. Aborts on a non-finite loss, naming the
/// step.
pub fn train<T: Real>(
    cfg: &TrainConfig,
    mut progress: impl FnMut(&StepLog),
) -> Result<(ParameterStore<T>, Vec<StepLog>)> {
    cfg.validate()?;
    let data = generate_dataset(cfg.seed, cfg.train_samples, cfg.model.input_hw);
    let mut store = init_params::<T>(&cfg.model, cfg.seed ^ INIT_STREAM)?;
    let mut opt = AdamW::new(cfg.learning_rate, cfg.weight_decay);
    let mut batch_rng = SplitMix64::new(cfg.seed ^ BATCH_STREAM);
    let mut log = Vec::with_capacity(cfg.steps);
    let decay_step = (cfg.decay_at * cfg.steps as f64).floor() as usize;
    for step in 0..cfg.steps {
        opt.lr = if step >= decay_step {
            cfg.learning_rate / 2.0
        } else {
            cfg.learning_rate
        };
        store.zero_grads();
        let mut sum: Option<Tensor<T>> = None;
        for _ in 0..cfg.batch_size {
            let s = &data[batch_rng.below(data.len())];
            let score = tfanet_forward(&s.image_tensor::<T>(), &s.tokens, &cfg.model, &store)?;
            let loss = cross_entropy_mask(&score, &s.mask)?;
            sum = Some(match sum {
                Some(acc) => acc.add(&loss)?,
                None => loss,
            });
        }
        let loss = sum
            .expect("batch_size >= 1")
            .mul_scalar(T::from_f64(1.0 / cfg.batch_size as f64));
        let value = loss.item()?.as_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss {value} at step {step}"
            )));
        }
        loss.backward()?;
        clip_grad_norm(&store, cfg.grad_clip);
        opt.step(&mut store)?;
        let entry = StepLog {
            step,
            loss: value,
            lr: opt.lr,
        };
        progress(&entry);
        log.push(entry);
    }
    Ok((store, log))
}

/// Predicted masks for every sample, optionally sharded across threads.
/// The merge order is fixed by sample order, so results are identical for any
/// thread count.
pub fn predict_all<T: Real>(
    store: &ParameterStore<T>,
    model: &ModelConfig,
    samples: &[SyntheticSample],
    threads: usize,
) -> Result<Vec<Vec<bool>>> {
    if threads <= 1 || samples.len() <= 1 {
        return samples
            .iter()
            .map(|s| predict(&s.image_tensor::<T>(), &s.tokens, model, store))
            .collect();
    }
    let chunk = samples.len().div_ceil(threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = samples
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|s| predict(&s.image_tensor::<T>(), &s.tokens, model, store))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(samples.len());
        for h in handles {
            out.extend(h.join().expect("evaluation worker panicked")?);
        }
        Ok(out)
    })
}

pub fn evaluate<T: Real>(
    store: &ParameterStore<T>,
    model: &ModelConfig,
    samples: &[SyntheticSample],
    thresholds: &[f64],
    threads: usize,
) -> Result<MetricsReport> {
    let preds = predict_all(store, model, samples, threads)?;
    let gts: Vec<Vec<bool>> = samples.iter().map(|s| s.mask.clone()).collect();
    compute_metrics(&preds, &gts, thresholds)
}

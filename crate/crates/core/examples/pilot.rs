// Scratch harness for sizing the default training configuration.
use std::time::Instant;

use tfanet_core::metrics::DEFAULT_THRESHOLDS;
use tfanet_core::train::{evaluate, train, TrainConfig};

fn main() {
    let mut cfg = TrainConfig::default();
    let mut every = 25usize;
    let mut save: Option<String> = None;
    let mut load: Option<String> = None;
    let mut eval_train = 0usize;
    let mut hist = false;
    for a in std::env::args().skip(1) {
        let (k, v) = a.split_once('=').expect("key=value");
        match k {
            "save" => {
                save = Some(v.to_string());
                continue;
            }
            "load" => {
                load = Some(v.to_string());
                continue;
            }
            "eval_train" => {
                eval_train = v.parse().unwrap();
                continue;
            }
            "hist" => {
                hist = v == "1";
                continue;
            }
            "steps" => cfg.steps = v.parse().unwrap(),
            "bs" => cfg.batch_size = v.parse().unwrap(),
            "lr" => cfg.learning_rate = v.parse().unwrap(),
            "wd" => cfg.weight_decay = v.parse().unwrap(),
            "clip" => cfg.grad_clip = v.parse().unwrap(),
            "decay_at" => cfg.decay_at = v.parse().unwrap(),
            "seed" => cfg.seed = v.parse().unwrap(),
            "train_samples" => cfg.train_samples = v.parse().unwrap(),
            "val" => cfg.val_samples = v.parse().unwrap(),
            "c1" => cfg.model.base_channels = v.parse().unwrap(),
            "dec" => cfg.model.decoder_channels = v.parse().unwrap(),
            "text_dim" => cfg.model.text_dim = v.parse().unwrap(),
            "feature" => cfg.model.scan.feature_dim = v.parse().unwrap(),
            "state" => cfg.model.scan.state_dim = v.parse().unwrap(),
            "dirs" => cfg.model.scan.directions = v.parse().unwrap(),
            "ktok" => cfg.model.kernel_tokens = v.parse().unwrap(),
            "input" => cfg.model.input_hw = v.parse().unwrap(),
            "variant" => cfg.model.variant = v.parse().unwrap(),
            "every" => every = v.parse().unwrap(),
            other => panic!("unknown key {other}"),
        }
    }
    eprintln!("{cfg:?}");
    let store = if let Some(path) = load {
        tfanet_core::checkpoint::load(path).unwrap()
    } else {
        let t0 = Instant::now();
        let (store, log) = train::<f64>(&cfg, |l| {
            if l.step % every == 0 || l.step + 1 == cfg.steps {
                eprintln!(
                    "step {:5}  loss {:.4}  lr {:.2e}  elapsed {:.1}s",
                    l.step,
                    l.loss,
                    l.lr,
                    t0.elapsed().as_secs_f64()
                );
            }
        })
        .unwrap();
        let train_s = t0.elapsed().as_secs_f64();
        let tail: f64 =
            log.iter().rev().take(50).map(|l| l.loss).sum::<f64>() / 50f64.min(log.len() as f64);
        eprintln!("train {:.1}s  ({:.3}s/step)  tail-50 loss {:.4}", train_s, train_s / cfg.steps as f64, tail);
        if let Some(path) = save {
            tfanet_core::checkpoint::save(&store, path).unwrap();
        }
        store
    };
    let val = cfg.val_set();
    let t1 = Instant::now();
    let m = evaluate(&store, &cfg.model, &val, &DEFAULT_THRESHOLDS, 1).unwrap();
    eprintln!("eval {:.1}s ({:.3}s/sample)", t1.elapsed().as_secs_f64(), t1.elapsed().as_secs_f64() / val.len() as f64);
    println!("{m}");
    if eval_train > 0 {
        let sub = tfanet_core::data::generate_dataset(cfg.seed, eval_train, cfg.model.input_hw);
        let m = evaluate(&store, &cfg.model, &sub, &DEFAULT_THRESHOLDS, 1).unwrap();
        println!("train-set metrics:\n{m}");
    }
    if hist {
        use tfanet_core::data::Expression;
        let mut buckets = [[0usize; 10]; 3];
        let mut sums = [0.0f64; 3];
        let mut counts = [0usize; 3];
        let mut worst: Vec<(f64, String)> = Vec::new();
        for s in &val {
            let pred = tfanet_core::model::predict(
                &tfanet_core::tensor::Tensor::new(
                    vec![3, s.size, s.size],
                    s.image.clone(),
                )
                .unwrap(),
                &s.tokens,
                &cfg.model,
                &store,
            )
            .unwrap();
            let v = tfanet_core::metrics::iou(&pred, &s.mask).unwrap();
            let kind = match s.expression {
                Expression::ColorShape(..) => 0,
                Expression::Superlative { .. } => 1,
                Expression::Relation(..) => 2,
            };
            buckets[kind][((v * 10.0) as usize).min(9)] += 1;
            sums[kind] += v;
            counts[kind] += 1;
            worst.push((v, s.expression.text()));
        }
        for (name, k) in [("colorshape", 0), ("superlative", 1), ("relation", 2)] {
            println!(
                "{name:12} n={:3}  mean IoU {:.4}  deciles {:?}",
                counts[k],
                sums[k] / counts[k].max(1) as f64,
                buckets[k]
            );
        }
        worst.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        for (v, text) in worst.iter().take(12) {
            println!("  worst {v:.3}  `{text}`");
        }
    }
}

//! tfanet: train/eval/bench/gradcheck/demo for the TFANet reference stack.
//!
//! Exit codes: 0 ok, 2 config error, 3 numeric abort, 4 checkpoint format
//! error, 5 gradcheck failure.

mod config;
mod gradchecks;
mod images;

use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use tfanet_core::bench::{run_scaling, scaling_slope, to_csv, BenchOp, BenchResult};
use tfanet_core::checkpoint;
use tfanet_core::data::generate_dataset;
use tfanet_core::error::{Error, Result};
use tfanet_core::metrics::{iou, MetricsReport, DEFAULT_THRESHOLDS};
use tfanet_core::model::{init_params, predict, ModelConfig};
use tfanet_core::train::{evaluate, train, TrainConfig};
use tfanet_core::ParameterStore64;

#[derive(Parser)]
#[command(name = "tfanet", version, about = "Image-text alignment on a synthetic referring task")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train on the synthetic task; writes checkpoint.tfaw, loss.csv, metrics.txt.
    Train(TrainArgs),
    /// Evaluate a checkpoint on held-out samples.
    Eval(EvalArgs),
    /// Runtime/allocation scaling of the attention and scan kernels.
    Bench(BenchArgs),
    /// Finite-difference gradient verification per module.
    Gradcheck(GradcheckArgs),
    /// Render samples, ground truth and predictions as PPM/PGM images.
    Demo(DemoArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Key-value config file (defaults apply when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    /// Output directory for artifacts.
    #[arg(long, default_value = "runs/train")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Held-out sample count (overrides val_samples).
    #[arg(long)]
    samples: Option<usize>,
    /// Worker threads for sharded evaluation.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Also write metrics.csv here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// One of linear_attn, softmax_attn, selective_scan; all three when omitted.
    #[arg(long)]
    op: Option<String>,
    #[arg(long, default_value = "512,1024,2048,4096,8192")]
    sizes: String,
    /// Embedding width d.
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Also write bench.csv here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// One of xnorm, attention, cfsm, mlam, wfdm, model; all when omitted.
    #[arg(long)]
    module: Option<String>,
    #[arg(long, default_value_t = 17)]
    seed: u64,
}

#[derive(Args)]
struct DemoArgs {
    /// Trained parameters; fresh-initialized (untrained) when omitted.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Sample-generation seed.
    #[arg(long, default_value_t = 3)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    samples: usize,
    #[arg(long, default_value = "runs/demo")]
    out: PathBuf,
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    };
    std::process::exit(code);
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFinite(_) => 3,
        Error::CheckpointFormat { .. } | Error::UnknownParameter(_) => 4,
        _ => 2,
    }
}

fn run(cli: Cli) -> Result<i32> {
    match cli.cmd {
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Bench(a) => cmd_bench(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
        Cmd::Demo(a) => cmd_demo(a),
    }
}

fn load_cfg(path: &Option<PathBuf>) -> Result<TrainConfig> {
    match path {
        Some(p) => config::load(p),
        None => Ok(TrainConfig::default()),
    }
}

fn cmd_train(a: TrainArgs) -> Result<i32> {
    let mut cfg = load_cfg(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    std::fs::create_dir_all(&a.out)?;

    let every = (cfg.steps / 20).max(1);
    let t0 = Instant::now();
    let (store, log) = train::<f64>(&cfg, |l| {
        if l.step % every == 0 || l.step + 1 == cfg.steps {
            println!("step {:>6}  loss {:.6}  lr {:.2e}", l.step, l.loss, l.lr);
        }
    })?;
    println!(
        "trained {} steps in {:.1}s",
        cfg.steps,
        t0.elapsed().as_secs_f64()
    );

    let mut csv = String::from("step,loss,lr\n");
    for l in &log {
        csv.push_str(&format!("{},{},{}\n", l.step, l.loss, l.lr));
    }
    std::fs::write(a.out.join("loss.csv"), csv)?;
    checkpoint::save(&store, a.out.join("checkpoint.tfaw"))?;

    let report = evaluate(&store, &cfg.model, &cfg.val_set(), &DEFAULT_THRESHOLDS, 1)?;
    std::fs::write(a.out.join("metrics.txt"), format!("{report}\n"))?;
    println!("{report}");
    println!("artifacts in {}", a.out.display());
    Ok(0)
}

/// A checkpoint fits a model iff names, order and shapes all agree.
fn check_compatible(store: &ParameterStore64, model: &ModelConfig) -> Result<()> {
    let expect = init_params::<f64>(model, 0)?;
    if store.len() != expect.len() {
        return Err(Error::CheckpointFormat {
            offset: 0,
            reason: format!(
                "checkpoint has {} parameters, the configured model has {}",
                store.len(),
                expect.len()
            ),
        });
    }
    for (got, want) in store.iter().zip(expect.iter()) {
        if got.name != want.name {
            return Err(Error::CheckpointFormat {
                offset: 0,
                reason: format!(
                    "checkpoint parameter `{}` where the model expects `{}`",
                    got.name, want.name
                ),
            });
        }
        if got.value.shape() != want.value.shape() {
            return Err(Error::CheckpointFormat {
                offset: 0,
                reason: format!(
                    "parameter `{}` has shape {:?}, the model expects {:?}",
                    got.name,
                    got.value.shape(),
                    want.value.shape()
                ),
            });
        }
    }
    Ok(())
}

fn metrics_csv(report: &MetricsReport) -> String {
    let mut csv = String::from("metric,value\n");
    csv.push_str(&format!("n,{}\n", report.n_samples));
    csv.push_str(&format!("miou,{}\n", report.miou));
    csv.push_str(&format!("oiou,{}\n", report.oiou));
    for (t, p) in &report.prec_at {
        csv.push_str(&format!("p_at_{t},{p}\n"));
    }
    csv
}

fn cmd_eval(a: EvalArgs) -> Result<i32> {
    let mut cfg = load_cfg(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.samples {
        cfg.val_samples = n;
    }
    cfg.validate()?;
    let store: ParameterStore64 = checkpoint::load(&a.checkpoint)?;
    check_compatible(&store, &cfg.model)?;
    let report = evaluate(
        &store,
        &cfg.model,
        &cfg.val_set(),
        &DEFAULT_THRESHOLDS,
        a.threads,
    )?;
    println!("{report}");
    if let Some(out) = a.out {
        std::fs::create_dir_all(&out)?;
        std::fs::write(out.join("metrics.csv"), metrics_csv(&report))?;
    }
    Ok(0)
}

fn cmd_bench(a: BenchArgs) -> Result<i32> {
    let sizes: Vec<usize> = a
        .sizes
        .split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::Config(format!("--sizes: cannot parse `{p}`")))
        })
        .collect::<Result<_>>()?;
    let ops: Vec<BenchOp> = match &a.op {
        Some(name) => vec![name.parse()?],
        None => BenchOp::ALL.to_vec(),
    };
    let mut all: Vec<BenchResult> = Vec::new();
    let mut slopes = Vec::new();
    for &op in &ops {
        let results = run_scaling(op, &sizes, a.dim, a.repeats, a.seed)?;
        slopes.push((op, scaling_slope(&results)?));
        all.extend(results);
    }
    let csv = to_csv(&all);
    print!("{csv}");
    for (op, slope) in slopes {
        println!("slope {op} = {slope:.3}");
    }
    if let Some(out) = a.out {
        std::fs::create_dir_all(&out)?;
        std::fs::write(out.join("bench.csv"), csv)?;
    }
    Ok(0)
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<i32> {
    let modules: Vec<&str> = match &a.module {
        Some(m) => vec![m.as_str()],
        None => gradchecks::MODULES.to_vec(),
    };
    let mut failed = false;
    for name in modules {
        let rep = gradchecks::run_module(name, a.seed)?;
        println!(
            "{name:<9} max rel err {:.3e} over {} elements (worst: {}[{}])",
            rep.max_rel_err, rep.elements_checked, rep.worst_param, rep.worst_index
        );
        if rep.max_rel_err > gradchecks::TOLERANCE {
            failed = true;
        }
    }
    if failed {
        eprintln!("gradcheck failed (tolerance {})", gradchecks::TOLERANCE);
        return Ok(5);
    }
    Ok(0)
}

fn cmd_demo(a: DemoArgs) -> Result<i32> {
    let cfg = load_cfg(&a.config)?;
    cfg.validate()?;
    let store: ParameterStore64 = match &a.checkpoint {
        Some(p) => {
            let s = checkpoint::load(p)?;
            check_compatible(&s, &cfg.model)?;
            s
        }
        None => {
            println!("no checkpoint given; rendering untrained predictions");
            init_params(&cfg.model, cfg.seed)?
        }
    };
    std::fs::create_dir_all(&a.out)?;
    let hw = cfg.model.input_hw;
    let samples = generate_dataset(a.seed, a.samples, hw);
    for (i, s) in samples.iter().enumerate() {
        let pred = predict(&s.image_tensor::<f64>(), &s.tokens, &cfg.model, &store)?;
        images::write_ppm(&a.out.join(format!("sample{i}.ppm")), &s.image, hw, hw)?;
        images::write_pgm(&a.out.join(format!("sample{i}_gt.pgm")), &s.mask, hw, hw)?;
        images::write_pgm(&a.out.join(format!("sample{i}_pred.pgm")), &pred, hw, hw)?;
        println!(
            "sample {i}: \"{}\"  IoU {:.3}",
            s.expression.text(),
            iou(&pred, &s.mask)?
        );
    }
    println!(
        "wrote {} files to {}",
        3 * samples.len(),
        a.out.display()
    );
    Ok(0)
}

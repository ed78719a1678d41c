//! Micro-benchmarks for the attention-complexity claim.
//!
//! Times single-threaded f32 forward passes of linear attention, softmax
//! attention and the selective scan over a range of token counts, then fits
//! the log-log slope: linear-time ops land near 1, quadratic near 2. Peak
//! tensor-byte allocation per run is recorded alongside.

use crate::alloc::measure_peak;
use crate::cfsm::{selective_scan_1d, ScanParams};
use crate::error::{Error, Result};
use crate::mlam::{linear_cross_attention, softmax_cross_attention};
use crate::rng::SplitMix64;
use crate::tensor::{no_grad, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchOp {
    LinearAttention,
    SoftmaxAttention,
    SelectiveScan,
}

impl BenchOp {
    pub const ALL: [BenchOp; 3] = [
        BenchOp::LinearAttention,
        BenchOp::SoftmaxAttention,
        BenchOp::SelectiveScan,
    ];
}

impl std::str::FromStr for BenchOp {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear_attn" => Ok(BenchOp::LinearAttention),
            "softmax_attn" => Ok(BenchOp::SoftmaxAttention),
            "selective_scan" => Ok(BenchOp::SelectiveScan),
            other => Err(Error::Config(format!(
                "unknown bench op `{other}` (linear_attn, softmax_attn, selective_scan)"
            ))),
        }
    }
}

impl std::fmt::Display for BenchOp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BenchOp::LinearAttention => "linear_attn",
            BenchOp::SoftmaxAttention => "softmax_attn",
            BenchOp::SelectiveScan => "selective_scan",
        })
    }
}

#[derive(Clone, Debug)]
pub struct BenchResult {
    pub op: BenchOp,
    pub n: usize,
    pub d: usize,
    pub repeats: usize,
    pub median_ns: u128,
    pub alloc_bytes: i64,
}

const WARMUPS: usize = 2;

fn rand32(shape: Vec<usize>, rng: &mut SplitMix64) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::new(
        shape,
        (0..n).map(|_| rng.uniform(-1.0, 1.0) as f32).collect(),
    )
    .expect("buffer matches shape")
}

/// One benchmarkable forward pass at a given token count.
struct Case {
    run: Box<dyn Fn()>,
}

fn build_case(op: BenchOp, n: usize, d: usize, rng: &mut SplitMix64) -> Case {
    match op {
        BenchOp::LinearAttention | BenchOp::SoftmaxAttention => {
            let q = rand32(vec![n, d], rng);
            let k = rand32(vec![n, d], rng);
            let v = rand32(vec![n, d], rng);
            let gq = Tensor::<f32>::full(vec![1], 1.0);
            let gkv = Tensor::<f32>::full(vec![1], 1.0);
            Case {
                run: Box::new(move || {
                    let out = if op == BenchOp::LinearAttention {
                        linear_cross_attention(&q, &k, &v, &gq, &gkv, 1e-6)
                    } else {
                        softmax_cross_attention(&q, &k, &v)
                    };
                    std::hint::black_box(out.expect("bench forward").data()[0]);
                }),
            }
        }
        BenchOp::SelectiveScan => {
            let state = 8;
            let x = rand32(vec![n, d], rng);
            let p = ScanParams {
                log_a: rand32(vec![state], rng),
                w_delta: rand32(vec![d, 1], rng),
                b_delta: rand32(vec![1], rng),
                w_b: rand32(vec![d, state], rng),
                b_b: rand32(vec![state], rng),
                w_c: rand32(vec![d, state], rng),
                b_c: rand32(vec![state], rng),
                skip: rand32(vec![d], rng),
            };
            Case {
                run: Box::new(move || {
                    let out = selective_scan_1d(&x, &p).expect("bench forward");
                    std::hint::black_box(out.data()[0]);
                }),
            }
        }
    }
}

/// Measurement hook: given (op, n, one forward pass), return nanoseconds.
pub type Timer<'a> = &'a mut dyn FnMut(BenchOp, usize, &mut dyn FnMut()) -> u128;

/// Time `op` across `sizes` (strictly ascending, >= 4 of them) at embedding
/// width `d`, recording the median of `repeats >= 5` runs after two warmups,
/// plus the peak tensor bytes of one untimed pass.
pub fn run_scaling(
    op: BenchOp,
    sizes: &[usize],
    d: usize,
    repeats: usize,
    seed: u64,
) -> Result<Vec<BenchResult>> {
    run_scaling_with(op, sizes, d, repeats, seed, &mut |_, _, run| {
        let t = std::time::Instant::now();
        run();
        t.elapsed().as_nanos()
    })
}

/// [`run_scaling`] with an injectable timer (exercised by self-tests with
/// synthetic clocks).
pub fn run_scaling_with(
    op: BenchOp,
    sizes: &[usize],
    d: usize,
    repeats: usize,
    seed: u64,
    timer: Timer,
) -> Result<Vec<BenchResult>> {
    if sizes.len() < 4 {
        return Err(Error::InvalidArgument(format!(
            "need at least 4 sizes for a slope, got {}",
            sizes.len()
        )));
    }
    if sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(
            "sizes must be strictly ascending".into(),
        ));
    }
    if sizes[0] == 0 {
        return Err(Error::InvalidArgument("sizes must be positive".into()));
    }
    if repeats < 5 {
        return Err(Error::InvalidArgument(format!(
            "need at least 5 repeats for a stable median, got {repeats}"
        )));
    }
    if d == 0 {
        return Err(Error::InvalidArgument("d must be positive".into()));
    }
    let mut rng = SplitMix64::new(seed);
    let mut out = Vec::with_capacity(sizes.len());
    no_grad(|| {
        for &n in sizes {
            let case = build_case(op, n, d, &mut rng);
            for _ in 0..WARMUPS {
                (case.run)();
            }
            let mut times: Vec<u128> = (0..repeats)
                .map(|_| timer(op, n, &mut || (case.run)()))
                .collect();
            times.sort_unstable();
            let median_ns = times[times.len() / 2];
            let ((), alloc_bytes) = measure_peak(|| (case.run)());
            out.push(BenchResult {
                op,
                n,
                d,
                repeats,
                median_ns,
                alloc_bytes,
            });
        }
    });
    Ok(out)
}

/// Ordinary least squares slope of ln(t) against ln(n).
pub fn fit_loglog_slope(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need >= 2 points for a slope, got {}",
            points.len()
        )));
    }
    if let Some(&(n, t)) = points.iter().find(|(n, t)| *n <= 0.0 || *t <= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "log-log fit needs positive coordinates, got ({n}, {t})"
        )));
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|&(n, t)| (n.ln(), t.ln())).collect();
    let m = logs.len() as f64;
    let mean_x = logs.iter().map(|p| p.0).sum::<f64>() / m;
    let mean_y = logs.iter().map(|p| p.1).sum::<f64>() / m;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in logs {
        num += (x - mean_x) * (y - mean_y);
        den += (x - mean_x) * (x - mean_x);
    }
    if den == 0.0 {
        return Err(Error::InvalidArgument(
            "log-log fit needs at least two distinct sizes".into(),
        ));
    }
    Ok(num / den)
}

/// Fitted runtime exponent of a result set.
pub fn scaling_slope(results: &[BenchResult]) -> Result<f64> {
    fit_loglog_slope(
        &results
            .iter()
            .map(|r| (r.n as f64, r.median_ns as f64))
            .collect::<Vec<_>>(),
    )
}

pub fn to_csv(results: &[BenchResult]) -> String {
    let mut s = String::from("op,N,d,repeats,median_ns,alloc_bytes\n");
    for r in results {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.op, r.n, r.d, r.repeats, r.median_ns, r.alloc_bytes
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn op_names_round_trip() {
        for op in BenchOp::ALL {
            assert_eq!(op.to_string().parse::<BenchOp>().unwrap(), op);
        }
        assert!("fast_attn".parse::<BenchOp>().is_err());
    }

    #[test]
    fn slope_of_exact_lines() {
        let lin = [(1.0, 1.0), (2.0, 2.0), (4.0, 4.0)];
        assert!((fit_loglog_slope(&lin).unwrap() - 1.0).abs() < 1e-12);
        let quad = [(1.0, 1.0), (2.0, 4.0), (4.0, 16.0)];
        assert!((fit_loglog_slope(&quad).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn slope_invariant_under_time_rescaling() {
        let pts: Vec<(f64, f64)> = (1..=5).map(|i| (i as f64, (i * i) as f64 * 7.3)).collect();
        let scaled: Vec<(f64, f64)> = pts.iter().map(|&(n, t)| (n, t * 1000.0)).collect();
        let a = fit_loglog_slope(&pts).unwrap();
        let b = fit_loglog_slope(&scaled).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn slope_rejects_bad_points() {
        assert!(fit_loglog_slope(&[(1.0, 1.0)]).is_err());
        assert!(fit_loglog_slope(&[(1.0, 0.0), (2.0, 1.0)]).is_err());
        assert!(fit_loglog_slope(&[(1.0, 1.0), (1.0, 2.0)]).is_err());
    }

    #[test]
    fn synthetic_timers_recover_their_exponent() {
        let sizes = [64, 128, 256, 512];
        let lin = run_scaling_with(
            BenchOp::SelectiveScan,
            &sizes,
            4,
            5,
            1,
            &mut |_, n, _| (37 * n) as u128,
        )
        .unwrap();
        assert!((scaling_slope(&lin).unwrap() - 1.0).abs() < 0.01);
        let quad = run_scaling_with(
            BenchOp::SelectiveScan,
            &sizes,
            4,
            5,
            1,
            &mut |_, n, _| (n * n) as u128,
        )
        .unwrap();
        assert!((scaling_slope(&quad).unwrap() - 2.0).abs() < 0.01);
    }

    #[test]
    fn run_scaling_validates_inputs() {
        assert!(run_scaling(BenchOp::SelectiveScan, &[8, 16, 32], 4, 5, 1).is_err());
        assert!(run_scaling(BenchOp::SelectiveScan, &[8, 16, 16, 32], 4, 5, 1).is_err());
        assert!(run_scaling(BenchOp::SelectiveScan, &[8, 16, 32, 64], 4, 3, 1).is_err());
    }

    #[test]
    fn real_runs_produce_ordered_csv() {
        let results = run_scaling(BenchOp::SelectiveScan, &[8, 16, 32, 64], 4, 5, 2).unwrap();
        assert_eq!(results.len(), 4);
        assert!(results.iter().all(|r| r.median_ns > 0 && r.alloc_bytes > 0));
        let csv = to_csv(&results);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "op,N,d,repeats,median_ns,alloc_bytes");
        assert_eq!(lines.len(), 5);
        assert!(lines[1].starts_with("selective_scan,8,4,5,"));
    }

    #[test]
    fn softmax_materializes_the_square_matrix_and_linear_does_not() {
        let d = 16;
        let results =
            run_scaling(BenchOp::SoftmaxAttention, &[64, 128, 192, 256], d, 5, 3).unwrap();
        let at256 = results.last().unwrap();
        assert!(at256.alloc_bytes >= (256 * 256 * 4) as i64);
        let results =
            run_scaling(BenchOp::LinearAttention, &[64, 128, 192, 256], d, 5, 3).unwrap();
        let at256 = results.last().unwrap();
        assert!(at256.alloc_bytes < (8 * 256 * d * 4) as i64);
    }
}

//! Sequence-length scaling measurements: the state-space scan against a
//! dense softmax-attention reference at matched width. Timings run serially
//! so the fitted exponents reflect algorithmic cost, not core count.

use crate::error::Result;
use crate::ops;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::time::Instant;

/// Shapes and repetition counts for one scaling run.
#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub channels: usize,
    pub state_dim: usize,
    /// Doubling ladder timed for the scan path.
    pub scan_lengths: Vec<usize>,
    /// Doubling ladder timed for the attention reference.
    pub attn_lengths: Vec<usize>,
    pub reps: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            channels: 32,
            state_dim: 16,
            scan_lengths: vec![2048, 4096, 8192, 16384],
            attn_lengths: vec![512, 1024, 2048],
            reps: 5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchPoint {
    pub kind: &'static str,
    pub len: usize,
    pub median_s: f64,
    pub reps: usize,
    /// Workload executions folded into each timed repetition.
    pub inner: usize,
}

/// Doubling ratio t(L) / t(L/2), keyed by the upper length.
#[derive(Clone, Debug, Serialize)]
pub struct RatioPoint {
    pub kind: &'static str,
    pub len: usize,
    pub ratio: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub points: Vec<BenchPoint>,
    pub ratios: Vec<RatioPoint>,
    /// Least-squares slope of ln t over ln L per kind.
    pub scan_exponent: f64,
    pub attn_exponent: f64,
    pub warnings: Vec<String>,
}

/// Dense softmax attention y = softmax(q kᵀ / √C) v over one (L, C) sequence;
/// the quadratic-cost reference the scan is measured against.
pub fn attention_reference(q: &Tensor<f32>, k: &Tensor<f32>, v: &Tensor<f32>) -> Result<Tensor<f32>> {
    let [l, c] = q.d2();
    if k.dims() != [l, c] || v.dims() != [l, c] {
        return Err(crate::error::Error::shape(format!(
            "attention operands {:?}/{:?}/{:?} must agree",
            q.dims(),
            k.dims(),
            v.dims()
        )));
    }
    let scale = 1.0 / (c as f64).sqrt();
    let (qs, ks, vs) = (q.data(), k.data(), v.data());
    let mut out = Tensor::zeros(vec![l, c]);
    let mut row = vec![0.0f64; l];
    for i in 0..l {
        let mut m = f64::NEG_INFINITY;
        for j in 0..l {
            let mut dot = 0.0f64;
            for t in 0..c {
                dot += qs[i * c + t] as f64 * ks[j * c + t] as f64;
            }
            row[j] = dot * scale;
            m = m.max(row[j]);
        }
        let mut z = 0.0f64;
        for rj in row.iter_mut() {
            *rj = (*rj - m).exp();
            z += *rj;
        }
        let o = &mut out.data_mut()[i * c..(i + 1) * c];
        for j in 0..l {
            let wgt = row[j] / z;
            for t in 0..c {
                o[t] += (wgt * vs[j * c + t] as f64) as f32;
            }
        }
    }
    Ok(out)
}

/// Shortest repetition worth trusting from the monotonic clock.
const MIN_MEASURABLE: f64 = 50e-6;

/// Times `work` by the median of `reps` repetitions, folding multiple
/// executions into one repetition (with a warning) whenever a single run is
/// too short to measure.
fn median_time(mut work: impl FnMut(), reps: usize, warnings: &mut Vec<String>, label: &str) -> (f64, usize) {
    let mut inner = 1usize;
    loop {
        let t0 = Instant::now();
        for _ in 0..inner {
            work();
        }
        let dt = t0.elapsed().as_secs_f64();
        if dt >= MIN_MEASURABLE || inner >= 1 << 20 {
            break;
        }
        inner *= 4;
    }
    if inner > 1 {
        warnings.push(format!("{label}: single run below timer resolution, folding {inner} executions per repetition"));
    }
    let mut samples: Vec<f64> = (0..reps.max(3))
        .map(|_| {
            let t0 = Instant::now();
            for _ in 0..inner {
                work();
            }
            t0.elapsed().as_secs_f64() / inner as f64
        })
        .collect();
    samples.sort_by(f64::total_cmp);
    (samples[samples.len() / 2], inner)
}

fn rand_t(dims: Vec<usize>, lo: f32, hi: f32, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let n: usize = dims.iter().product();
    Tensor::new(dims, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn fit_exponent(lengths: &[usize], times: &[f64]) -> f64 {
    let n = lengths.len() as f64;
    let xs: Vec<f64> = lengths.iter().map(|&l| (l as f64).ln()).collect();
    let ys: Vec<f64> = times.iter().map(|&t| t.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let num: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    num / den
}

fn doubling_ratios(kind: &'static str, lengths: &[usize], times: &[f64]) -> Vec<RatioPoint> {
    lengths
        .windows(2)
        .zip(times.windows(2))
        .filter(|(l, _)| l[1] == 2 * l[0])
        .map(|(l, t)| RatioPoint { kind, len: l[1], ratio: t[1] / t[0] })
        .collect()
}

/// Runs the scaling study on one thread and reports timings, doubling
/// ratios, and fitted exponents.
pub fn bench_complexity(cfg: &BenchConfig) -> Result<BenchReport> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| crate::error::Error::Config(format!("bench thread pool: {e}")))?;
    pool.install(|| bench_inner(cfg))
}

fn bench_inner(cfg: &BenchConfig) -> Result<BenchReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let c = cfg.channels;
    let d = cfg.state_dim;
    let mut warnings = Vec::new();
    let mut points = Vec::new();

    let mut scan_times = Vec::with_capacity(cfg.scan_lengths.len());
    for &l in &cfg.scan_lengths {
        let x = rand_t(vec![1, l, c], -1.0, 1.0, &mut rng);
        // decay magnitudes below one keep the recursion stable at any length
        let abar = rand_t(vec![d], 0.2, 0.95, &mut rng);
        let bbar = rand_t(vec![d, c], -0.5, 0.5, &mut rng);
        let cout = rand_t(vec![c, d], -0.5, 0.5, &mut rng);
        let (median, inner) = median_time(
            || {
                let _ = ops::ssm_scan_kernel(&x, &abar, &bbar, &cout, false).unwrap();
            },
            cfg.reps,
            &mut warnings,
            "scan",
        );
        scan_times.push(median);
        points.push(BenchPoint { kind: "scan", len: l, median_s: median, reps: cfg.reps.max(3), inner });
    }

    let mut attn_times = Vec::with_capacity(cfg.attn_lengths.len());
    for &l in &cfg.attn_lengths {
        let q = rand_t(vec![l, c], -1.0, 1.0, &mut rng);
        let k = rand_t(vec![l, c], -1.0, 1.0, &mut rng);
        let v = rand_t(vec![l, c], -1.0, 1.0, &mut rng);
        let (median, inner) = median_time(
            || {
                let _ = attention_reference(&q, &k, &v).unwrap();
            },
            cfg.reps,
            &mut warnings,
            "attention",
        );
        attn_times.push(median);
        points.push(BenchPoint { kind: "attention", len: l, median_s: median, reps: cfg.reps.max(3), inner });
    }

    let mut ratios = doubling_ratios("scan", &cfg.scan_lengths, &scan_times);
    ratios.extend(doubling_ratios("attention", &cfg.attn_lengths, &attn_times));
    Ok(BenchReport {
        scan_exponent: fit_exponent(&cfg.scan_lengths, &scan_times),
        attn_exponent: fit_exponent(&cfg.attn_lengths, &attn_times),
        points,
        ratios,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attention_single_position_returns_value_row() {
        let q = Tensor::new(vec![1, 3], vec![0.4f32, -0.2, 1.0]).unwrap();
        let k = Tensor::new(vec![1, 3], vec![0.9f32, 0.1, -0.3]).unwrap();
        let v = Tensor::new(vec![1, 3], vec![2.0f32, -1.0, 0.5]).unwrap();
        let y = attention_reference(&q, &k, &v).unwrap();
        for (a, b) in y.data().iter().zip(v.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn attention_uniform_query_averages_values() {
        // zero queries give equal weights to every position
        let q = Tensor::zeros(vec![4, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = rand_t(vec![4, 2], -1.0, 1.0, &mut rng);
        let v = rand_t(vec![4, 2], -1.0, 1.0, &mut rng);
        let y = attention_reference(&q, &k, &v).unwrap();
        for t in 0..2 {
            let mean: f32 = (0..4).map(|j| v.data()[j * 2 + t]).sum::<f32>() / 4.0;
            for i in 0..4 {
                assert!((y.data()[i * 2 + t] - mean).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn attention_rejects_mismatched_operands() {
        let q = Tensor::zeros(vec![2, 3]);
        let k = Tensor::zeros(vec![3, 3]);
        assert!(attention_reference(&q, &k, &q).is_err());
    }

    #[test]
    fn exponent_fit_recovers_known_slopes() {
        let lengths = [256usize, 512, 1024, 2048];
        let linear: Vec<f64> = lengths.iter().map(|&l| 3e-9 * l as f64).collect();
        let quad: Vec<f64> = lengths.iter().map(|&l| 1e-12 * (l * l) as f64).collect();
        assert!((fit_exponent(&lengths, &linear) - 1.0).abs() < 1e-9);
        assert!((fit_exponent(&lengths, &quad) - 2.0).abs() < 1e-9);
        let r = doubling_ratios("scan", &lengths, &quad);
        assert_eq!(r.len(), 3);
        assert!(r.iter().all(|p| (p.ratio - 4.0).abs() < 1e-9));
    }

    #[test]
    fn tiny_scaling_run_produces_full_report() {
        let cfg = BenchConfig {
            scan_lengths: vec![64, 128],
            attn_lengths: vec![16, 32],
            reps: 3,
            ..BenchConfig::default()
        };
        let r = bench_complexity(&cfg).unwrap();
        assert_eq!(r.points.len(), 4);
        assert_eq!(r.ratios.len(), 2);
        assert!(r.points.iter().all(|p| p.median_s > 0.0));
        assert!(serde_json::to_string(&r.points[0]).unwrap().contains("\"kind\":\"scan\""));
    }
}

//! Wall-clock growth of the selective scan against naive softmax attention.

use std::fmt::Write as _;
use std::time::Instant;

use damamba::ssm::selective_scan_fused;
use damamba::tensor::NoGradGuard;
use damamba::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const DEFAULT_LENGTHS: [usize; 6] = [256, 512, 1024, 2048, 4096, 8192];

#[derive(Clone, Debug)]
pub struct BenchRow {
    pub kernel: &'static str,
    pub len: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct BenchSpec {
    pub channels: usize,
    pub state: usize,
    pub reps: usize,
    pub seed: u64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self { channels: 16, state: 16, reps: 5, seed: 0 }
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len().max(2) - 1) as f64;
    (m, var.sqrt())
}

fn time_reps(reps: usize, mut f: impl FnMut()) -> (f64, f64) {
    f(); // warm-up
    let ms: Vec<f64> = (0..reps.max(1))
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    mean_std(&ms)
}

/// Single-head softmax attention over `[L, d]` queries, keys and values.
pub fn naive_attention(q: &[f64], k: &[f64], v: &[f64], len: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * d];
    let mut scores = vec![0.0; len];
    let scale = 1.0 / (d as f64).sqrt();
    for i in 0..len {
        let qi = &q[i * d..(i + 1) * d];
        let mut top = f64::NEG_INFINITY;
        for (j, s) in scores.iter_mut().enumerate() {
            *s = qi.iter().zip(&k[j * d..(j + 1) * d]).map(|(a, b)| a * b).sum::<f64>() * scale;
            top = top.max(*s);
        }
        let mut z = 0.0;
        for s in scores.iter_mut() {
            *s = (*s - top).exp();
            z += *s;
        }
        let oi = &mut out[i * d..(i + 1) * d];
        for (j, s) in scores.iter().enumerate() {
            let w = s / z;
            for (o, vv) in oi.iter_mut().zip(&v[j * d..(j + 1) * d]) {
                *o += w * vv;
            }
        }
    }
    out
}

pub fn time_scan(len: usize, spec: &BenchSpec) -> damamba::Result<(f64, f64)> {
    let (d, n) = (spec.channels, spec.state);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let x = Tensor::new(&[1, len, d], uniform(&mut rng, len * d, -1.0, 1.0))?;
    let delta = Tensor::new(&[1, len, d], uniform(&mut rng, len * d, 0.001, 0.1))?;
    let a = Tensor::new(&[d, n], (0..d * n).map(|i| -((i % n) as f64 + 1.0)).collect())?;
    let b = Tensor::new(&[1, len, n], uniform(&mut rng, len * n, -1.0, 1.0))?;
    let c = Tensor::new(&[1, len, n], uniform(&mut rng, len * n, -1.0, 1.0))?;
    let _ng = NoGradGuard::new();
    let mut err = None;
    let t = time_reps(spec.reps, || {
        if let Err(e) = selective_scan_fused(&x, &delta, &a, &b, &c) {
            err = Some(e);
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(t),
    }
}

pub fn time_attention(len: usize, spec: &BenchSpec) -> (f64, f64) {
    let d = spec.channels;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let q = uniform(&mut rng, len * d, -1.0, 1.0);
    let k = uniform(&mut rng, len * d, -1.0, 1.0);
    let v = uniform(&mut rng, len * d, -1.0, 1.0);
    time_reps(spec.reps, || {
        std::hint::black_box(naive_attention(&q, &k, &v, len, d));
    })
}

/// Both kernels at every length; `progress` sees each finished row.
pub fn run(lengths: &[usize], spec: &BenchSpec, mut progress: impl FnMut(&BenchRow)) -> damamba::Result<Vec<BenchRow>> {
    let mut rows = vec![];
    for &len in lengths {
        let (m, s) = time_scan(len, spec)?;
        rows.push(BenchRow { kernel: "selective_scan", len, mean_ms: m, std_ms: s });
        progress(rows.last().unwrap());
        let (m, s) = time_attention(len, spec);
        rows.push(BenchRow { kernel: "attention", len, mean_ms: m, std_ms: s });
        progress(rows.last().unwrap());
    }
    Ok(rows)
}

/// Least-squares slope of `log(ms)` against `log(L)` for one kernel.
pub fn growth_exponent(rows: &[BenchRow], kernel: &str) -> f64 {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.kernel == kernel && r.mean_ms > 0.0)
        .map(|r| ((r.len as f64).ln(), r.mean_ms.ln()))
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = pts.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    sxy / sxx
}

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("kernel,L,mean_ms,std_ms\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{:.6},{:.6}", r.kernel, r.len, r.mean_ms, r.std_ms);
    }
    s
}

pub fn fit_report(rows: &[BenchRow]) -> String {
    format!(
        "kernel,exponent\nselective_scan,{:.4}\nattention,{:.4}\n",
        growth_exponent(rows, "selective_scan"),
        growth_exponent(rows, "attention")
    )
}

//! Block-parallel Monte Carlo with a fixed-order reduction.

use num_complex::Complex64 as C64;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rng;

pub const BLOCK: u64 = 256;

/// Mean and standard error of one observable.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: C64,
    pub stat_error: f64,
}

impl Estimate {
    pub fn exact(value: C64) -> Self {
        Estimate { value, stat_error: 0.0 }
    }

    pub fn scale(&self, s: f64) -> Self {
        Estimate { value: self.value * s, stat_error: self.stat_error * s.abs() }
    }

    /// Sum of independent estimates.
    pub fn add_indep(&self, o: &Estimate) -> Self {
        Estimate { value: self.value + o.value, stat_error: self.stat_error.hypot(o.stat_error) }
    }
}

#[derive(Clone)]
struct Acc {
    sum: Vec<C64>,
    sq: Vec<f64>,
    n: u64,
}

impl Acc {
    fn new(k: usize) -> Self {
        Acc { sum: vec![C64::new(0.0, 0.0); k], sq: vec![0.0; k], n: 0 }
    }

    fn push(&mut self, v: &[C64]) {
        for (i, x) in v.iter().enumerate() {
            self.sum[i] += x;
            self.sq[i] += x.norm_sqr();
        }
        self.n += 1;
    }

    fn merge(&mut self, o: &Acc) {
        for i in 0..self.sum.len() {
            self.sum[i] += o.sum[i];
            self.sq[i] += o.sq[i];
        }
        self.n += o.n;
    }

    fn finish(&self) -> Vec<Estimate> {
        let n = self.n.max(1) as f64;
        self.sum
            .iter()
            .zip(&self.sq)
            .map(|(s, q)| {
                let mean = s / n;
                let var = (q / n - mean.norm_sqr()).max(0.0);
                let err = if self.n > 1 { (var / (n - 1.0)).sqrt() } else { 0.0 };
                Estimate { value: mean, stat_error: err }
            })
            .collect()
    }
}

/// Averages `f` over `samples` draws; `f` writes `dims` observables.
///
/// Blocks of `BLOCK` samples run in parallel, each on its own keyed stream,
/// and are reduced in block order.
pub fn sample_mean<F>(seed: u64, task: u64, samples: u64, dims: usize, f: F) -> Vec<Estimate>
where
    F: Fn(&mut ChaCha8Rng, &mut [C64]) + Sync,
{
    let nblocks = samples.div_ceil(BLOCK);
    let parts: Vec<Acc> = (0..nblocks)
        .into_par_iter()
        .map(|b| {
            let mut r = rng::stream(seed, task, b);
            let mut acc = Acc::new(dims);
            let mut out = vec![C64::new(0.0, 0.0); dims];
            let count = BLOCK.min(samples - b * BLOCK);
            for _ in 0..count {
                out.iter_mut().for_each(|x| *x = C64::new(0.0, 0.0));
                f(&mut r, &mut out);
                acc.push(&out);
            }
            acc
        })
        .collect();
    let mut total = Acc::new(dims);
    for p in &parts {
        total.merge(p);
    }
    total.finish()
}

/// Exact sum of `f` over a finite index set, evaluated in parallel and
/// reduced in index order.
pub fn exact_sum<F>(count: usize, dims: usize, f: F) -> Vec<C64>
where
    F: Fn(usize, &mut [C64]) + Sync,
{
    let chunk = 64usize;
    let nchunks = count.div_ceil(chunk);
    let parts: Vec<Vec<C64>> = (0..nchunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = vec![C64::new(0.0, 0.0); dims];
            let mut out = vec![C64::new(0.0, 0.0); dims];
            for i in c * chunk..((c + 1) * chunk).min(count) {
                out.iter_mut().for_each(|x| *x = C64::new(0.0, 0.0));
                f(i, &mut out);
                for k in 0..dims {
                    acc[k] += out[k];
                }
            }
            acc
        })
        .collect();
    let mut total = vec![C64::new(0.0, 0.0); dims];
    for p in &parts {
        for k in 0..dims {
            total[k] += p[k];
        }
    }
    total
}

/// Runs `f` inside a pool of `threads` workers (all cores when `None`).
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> T {
    match threads {
        None => f(),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .expect("thread pool")
            .install(f),
    }
}

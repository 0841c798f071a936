//! Kernel two-sample test: unbiased MMD² with an RBF kernel and
//! permutation p-values.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DriftError;

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k(a, b) = exp(−‖a−b‖² / (2σ²)).
pub fn rbf(a: &[f64], b: &[f64], sigma2: f64) -> f64 {
    (-squared_distance(a, b) / (2.0 * sigma2)).exp()
}

/// Half the median squared pairwise distance of the pooled sample. When more
/// than half of the pairs coincide, the median over the non-zero distances is
/// used so the bandwidth stays positive.
pub fn median_heuristic(pooled: &[Vec<f64>]) -> Result<f64, DriftError> {
    let n = pooled.len();
    let mut d2 = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            d2.push(squared_distance(&pooled[i], &pooled[j]));
        }
    }
    let mut median = median_in_place(&mut d2).ok_or(DriftError::DegenerateSample)?;
    if median <= 0.0 {
        let mut positive: Vec<f64> = d2.into_iter().filter(|&d| d > 0.0).collect();
        median = median_in_place(&mut positive).ok_or(DriftError::DegenerateSample)?;
    }
    Ok(median / 2.0)
}

fn median_in_place(v: &mut [f64]) -> Option<f64> {
    let n = v.len();
    if n == 0 {
        return None;
    }
    let mid = n / 2;
    let (lower, &mut upper_mid, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
    if n % 2 == 1 {
        Some(upper_mid)
    } else {
        let lower_mid = lower.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Some((lower_mid + upper_mid) / 2.0)
    }
}

/// Unbiased estimate of MMD² between samples `x` and `y`. Can be negative.
pub fn mmd2_unbiased(x: &[Vec<f64>], y: &[Vec<f64>], sigma2: f64) -> Result<f64, DriftError> {
    let (n, m) = (x.len(), y.len());
    if n < 2 || m < 2 {
        return Err(DriftError::SampleTooSmall);
    }
    if !(sigma2 > 0.0) {
        return Err(DriftError::InvalidBandwidth(sigma2));
    }
    let within = |s: &[Vec<f64>]| {
        let mut acc = 0.0;
        for i in 0..s.len() {
            for j in i + 1..s.len() {
                acc += rbf(&s[i], &s[j], sigma2);
            }
        }
        2.0 * acc
    };
    let mut cross = 0.0;
    for a in x {
        for b in y {
            cross += rbf(a, b, sigma2);
        }
    }
    let (nf, mf) = (n as f64, m as f64);
    Ok(within(x) / (nf * (nf - 1.0)) + within(y) / (mf * (mf - 1.0)) - 2.0 * cross / (nf * mf))
}

/// Permutation p-value for any two-sample statistic where larger values mean
/// more evidence of a difference. Add-one smoothed, so p ∈ [1/(1+n_perm), 1].
pub fn permutation_pvalue<T, F>(x: &[T], y: &[T], statistic: F, n_perm: usize, seed: u64) -> f64
where
    T: Clone,
    F: Fn(&[T], &[T]) -> f64,
{
    let observed = statistic(x, y);
    let pooled: Vec<T> = x.iter().chain(y).cloned().collect();
    let mut order: Vec<usize> = (0..pooled.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut exceed = 0usize;
    let mut px = Vec::with_capacity(x.len());
    let mut py = Vec::with_capacity(y.len());
    for _ in 0..n_perm {
        order.shuffle(&mut rng);
        px.clear();
        py.clear();
        px.extend(order[..x.len()].iter().map(|&i| pooled[i].clone()));
        py.extend(order[x.len()..].iter().map(|&i| pooled[i].clone()));
        if statistic(&px, &py) >= observed {
            exceed += 1;
        }
    }
    (1 + exceed) as f64 / (1 + n_perm) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MmdOutcome {
    pub statistic: f64,
    pub p_value: f64,
    pub sigma2: f64,
    pub n_permutations: usize,
}

/// Gram matrix of the pooled sample, computed once and re-indexed for every
/// permutation.
struct PooledKernel {
    n: usize,
    values: Vec<f64>,
}

impl PooledKernel {
    fn new(pooled: &[&[f64]], sigma2: f64) -> Self {
        let n = pooled.len();
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            values[i * n + i] = 1.0;
            for j in i + 1..n {
                let k = rbf(pooled[i], pooled[j], sigma2);
                values[i * n + j] = k;
                values[j * n + i] = k;
            }
        }
        Self { n, values }
    }

    /// MMD²_u for the split given by `in_x` (true = first sample).
    fn mmd2(&self, in_x: &[f64], nx: usize) -> f64 {
        let n = self.n;
        let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let row = &self.values[i * n + i + 1..(i + 1) * n];
            let mask = &in_x[i + 1..];
            let mut to_x = 0.0;
            let mut all = 0.0;
            for (k, w) in row.iter().zip(mask) {
                to_x += k * w;
                all += k;
            }
            let to_y = all - to_x;
            if in_x[i] > 0.5 {
                sxx += to_x;
                sxy += to_y;
            } else {
                syy += to_y;
                sxy += to_x;
            }
        }
        let nf = nx as f64;
        let mf = (n - nx) as f64;
        2.0 * sxx / (nf * (nf - 1.0)) + 2.0 * syy / (mf * (mf - 1.0)) - 2.0 * sxy / (nf * mf)
    }
}

/// MMD² permutation test. Same permutation scheme as [`permutation_pvalue`]
/// for a given seed, but the kernel is evaluated once on the pooled sample.
pub fn mmd_permutation_test(
    x: &[Vec<f64>],
    y: &[Vec<f64>],
    sigma2: f64,
    n_perm: usize,
    seed: u64,
) -> Result<MmdOutcome, DriftError> {
    let (n, m) = (x.len(), y.len());
    if n < 2 || m < 2 {
        return Err(DriftError::SampleTooSmall);
    }
    if !(sigma2 > 0.0) {
        return Err(DriftError::InvalidBandwidth(sigma2));
    }
    let pooled: Vec<&[f64]> = x.iter().chain(y).map(Vec::as_slice).collect();
    let kernel = PooledKernel::new(&pooled, sigma2);
    let mut in_x: Vec<f64> = (0..n + m).map(|i| if i < n { 1.0 } else { 0.0 }).collect();
    let observed = kernel.mmd2(&in_x, n);

    let mut order: Vec<usize> = (0..n + m).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut exceed = 0usize;
    for _ in 0..n_perm {
        order.shuffle(&mut rng);
        for (pos, &idx) in order.iter().enumerate() {
            in_x[idx] = if pos < n { 1.0 } else { 0.0 };
        }
        if kernel.mmd2(&in_x, n) >= observed {
            exceed += 1;
        }
    }
    Ok(MmdOutcome {
        statistic: observed,
        p_value: (1 + exceed) as f64 / (1 + n_perm) as f64,
        sigma2,
        n_permutations: n_perm,
    })
}

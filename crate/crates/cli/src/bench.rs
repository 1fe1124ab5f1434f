//! Initialization cost of mode-product whitening against the explicit
//! Kronecker `M^{-1/2}` path.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use tgcca::covariance::{estimate_separable_m, whiten_block, whiten_block_explicit, RegularizationSpec};
use tgcca::tensor::DenseTensor;

use crate::error::{CliError, Result};

/// Largest entrywise difference tolerated between the two whitening paths.
pub const EQUALITY_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub qs: Vec<usize>,
    pub ds: Vec<usize>,
    /// Samples of the random block.
    pub n: usize,
    pub tau: f64,
    pub seed: u64,
    /// Columns of the Kronecker matrix assembled at once.
    pub panel: usize,
    /// Timings keep the fastest of this many runs.
    pub repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            qs: vec![10, 20, 30],
            ds: vec![1, 2, 3],
            n: 8,
            tau: 1e-3,
            seed: 0,
            panel: 256,
            repeats: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub q: usize,
    pub d: usize,
    pub p: usize,
    pub separable_seconds: f64,
    pub explicit_seconds: f64,
    /// `explicit / separable`.
    pub ratio: f64,
    pub max_abs_diff: f64,
}

fn fastest<T>(repeats: usize, mut f: impl FnMut() -> Result<T>) -> Result<(T, f64)> {
    let mut best = f64::INFINITY;
    let mut out = None;
    for _ in 0..repeats.max(1) {
        let clock = Instant::now();
        let v = f()?;
        best = best.min(clock.elapsed().as_secs_f64());
        out = Some(v);
    }
    Ok((out.expect("at least one run"), best))
}

pub fn bench_point(config: &BenchConfig, q: usize, d: usize) -> Result<BenchRow> {
    if q == 0 || d == 0 || config.n < 2 {
        return Err(CliError::Config(format!("bench point q={q}, d={d}, n={}", config.n)));
    }
    let mut dims = vec![config.n];
    dims.extend(std::iter::repeat_n(q, d));
    let p = q.pow(d as u32);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ ((q as u64) << 8) ^ d as u64);
    let data = (0..config.n * p).map(|_| rng.sample(StandardNormal)).collect();
    let block = DenseTensor::new(dims, data)?;
    let spec = estimate_separable_m(&block, config.tau)?;
    let RegularizationSpec::Separable(factors) = &spec else {
        unreachable!("separable estimator returns per-mode factors")
    };
    let (sep, sep_t) = fastest(config.repeats, || Ok(whiten_block(&block, &spec)?.block))?;
    let (exp, exp_t) = fastest(config.repeats, || Ok(whiten_block_explicit(&block, factors, config.panel)?))?;
    let diff = sep
        .data()
        .iter()
        .zip(exp.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    if !(diff <= EQUALITY_TOL) {
        return Err(CliError::Check(format!(
            "whitening paths differ by {diff:e} at q={q}, d={d}"
        )));
    }
    Ok(BenchRow {
        q,
        d,
        p,
        separable_seconds: sep_t,
        explicit_seconds: exp_t,
        ratio: exp_t / sep_t,
        max_abs_diff: diff,
    })
}

pub fn cmd_bench(config: &BenchConfig) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &d in &config.ds {
        for &q in &config.qs {
            let row = bench_point(config, q, d)?;
            log::info!(
                "q={q} d={d} p={}: separable {:.3e}s explicit {:.3e}s ratio {:.1}",
                row.p,
                row.separable_seconds,
                row.explicit_seconds,
                row.ratio
            );
            rows.push(row);
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_points_agree() {
        let config = BenchConfig {
            qs: vec![4, 6],
            ds: vec![1, 2, 3],
            panel: 7,
            ..Default::default()
        };
        let rows = cmd_bench(&config).unwrap();
        assert_eq!(rows.len(), 6);
        assert!(rows.iter().all(|r| r.max_abs_diff <= EQUALITY_TOL));
        assert_eq!(rows[5].p, 216);
    }

    #[test]
    fn bad_point_is_config_error() {
        let e = bench_point(&BenchConfig::default(), 0, 2).unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }
}

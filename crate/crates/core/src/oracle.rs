//! Independent reference computations used to audit the numerical core.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backbone::{LocationPair, LocationPairSet};
use crate::error::Result;
use crate::fbc::{bilinear_pool, derive_transforms, fbc_encode, FbcParams, RawDictionary};
use crate::metrics::{eer, ScoreSet};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleResult {
    pub name: &'static str,
    pub instances: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl OracleResult {
    fn new(name: &'static str, instances: usize, max_error: f64, tolerance: f64) -> Self {
        Self {
            name,
            instances,
            max_error,
            tolerance,
            passed: max_error <= tolerance,
        }
    }
}

/// Minimizes a convex 1-D function on `[lo, hi]` by bisection on its
/// one-sided derivatives `(f'(c−), f'(c+))`.
pub fn minimize_convex(derivs: impl Fn(f64) -> (f64, f64), lo: f64, hi: f64) -> f64 {
    let (mut a, mut b) = (lo, hi);
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        let (left, right) = derivs(m);
        if right < 0.0 {
            a = m;
        } else if left > 0.0 {
            b = m;
        } else {
            return m;
        }
        if b - a <= f64::EPSILON * a.abs().max(b.abs()).max(1.0) {
            break;
        }
    }
    0.5 * (a + b)
}

/// One-sided derivatives of `(target − c)² + λ|c|`.
fn lasso_derivs(target: f64, lambda: f64) -> impl Fn(f64) -> (f64, f64) {
    move |c| {
        let smooth = 2.0 * (c - target);
        if c > 0.0 {
            (smooth + lambda, smooth + lambda)
        } else if c < 0.0 {
            (smooth - lambda, smooth - lambda)
        } else {
            (smooth - lambda, smooth + lambda)
        }
    }
}

/// Single-coordinate FBC codes against the scalar LASSO minimizer of
/// `(c' − c)² + λ|c|`.
pub fn scalar_lasso(instances: usize, seed: u64) -> Result<OracleResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (u, v, x, y) = (
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let lambda: f64 = rng.gen_range(0.0..1.0);
        let params = FbcParams::new(
            Matrix::from_vec(1, 1, vec![u]),
            Matrix::from_vec(1, 1, vec![v]),
            lambda,
            1,
            1,
        )?;
        let code = fbc_encode(&[x], &[y], &params)?.code[0];
        let pre = u * x * v * y;
        let reference = minimize_convex(lasso_derivs(pre, lambda), -5.0, 5.0);
        worst = worst.max((code - reference).abs());
    }
    Ok(OracleResult::new("scalar_lasso", instances, worst, 1e-8))
}

/// Codes from transforms derived out of a scalar dictionary against the
/// least-squares coefficient `xy / (uv)`.
pub fn scalar_bridge(instances: usize, seed: u64) -> Result<OracleResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nonzero = |rng: &mut ChaCha8Rng| {
        let m: f64 = rng.gen_range(0.2..2.0);
        if rng.gen::<bool>() {
            m
        } else {
            -m
        }
    };
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (u, v, x, y) = (nonzero(&mut rng), nonzero(&mut rng), nonzero(&mut rng), nonzero(&mut rng));
        let raw = RawDictionary {
            u: vec![Matrix::from_vec(1, 1, vec![u])],
            v: vec![Matrix::from_vec(1, 1, vec![v])],
        };
        let (ut, vt) = derive_transforms(&raw, 0.0)?;
        let params = FbcParams::new(ut, vt, 0.0, 1, 1)?;
        let code = fbc_encode(&[x], &[y], &params)?.code[0];
        let expected = x * y / (u * v);
        worst = worst.max((code - expected).abs() / expected.abs().max(1.0));
    }
    Ok(OracleResult::new("scalar_bridge", instances, worst, 1e-10))
}

/// Bilinear pooling against an explicit double loop over entries.
pub fn bilinear_pool_brute_force(instances: usize, seed: u64) -> Result<OracleResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let p = rng.gen_range(1..=8);
        let q = rng.gen_range(1..=8);
        let n = rng.gen_range(1..=16);
        let pairs: Vec<LocationPair<f64>> = (0..n)
            .map(|_| LocationPair {
                x: (0..p).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                y: (0..q).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            })
            .collect();
        let set = LocationPairSet { pairs, grid: (1, n) };
        let z = bilinear_pool(&set)?.z;
        for i in 0..p {
            for j in 0..q {
                let mut acc = 0.0;
                for pair in &set.pairs {
                    acc += pair.x[i] * pair.y[j];
                }
                worst = worst.max((z.get(i, j) - acc).abs());
            }
        }
    }
    Ok(OracleResult::new("bilinear_pool", instances, worst, 1e-12))
}

/// The equal error rate against an independent sweep over a fine threshold grid.
pub fn eer_sweep(instances: usize, seed: u64) -> Result<OracleResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let shift: f64 = rng.gen_range(0.0..0.4);
        let bona: Vec<f64> = (0..rng.gen_range(20..60))
            .map(|_| (rng.gen_range(0.2..1.0f64) + shift).min(1.0))
            .collect();
        let attack: Vec<f64> = (0..rng.gen_range(20..60)).map(|_| rng.gen_range(0.0..0.8)).collect();
        let scores = ScoreSet::from_scores(&bona, &attack)?;
        let ours = eer(&scores)?.eer;
        // Both error curves are step functions; at the crossing, the
        // smallest max(APCER, BPCER) bounds the EER from above and the
        // largest min(...) among neighbouring thresholds bounds it from below.
        let mut upper = f64::INFINITY;
        let mut lower = 0.0f64;
        for i in 0..=20_000 {
            let t = i as f64 / 20_000.0;
            let apcer = attack.iter().filter(|&&s| s >= t).count() as f64 / attack.len() as f64;
            let bpcer = bona.iter().filter(|&&s| s < t).count() as f64 / bona.len() as f64;
            upper = upper.min(apcer.max(bpcer));
            if apcer >= bpcer {
                lower = lower.max(bpcer);
            }
        }
        let err = if ours > upper + 1e-12 {
            ours - upper
        } else if ours < lower - 1e-12 {
            lower - ours
        } else {
            0.0
        };
        worst = worst.max(err);
    }
    Ok(OracleResult::new("eer_sweep", instances, worst, 1e-12))
}

/// Runs every oracle in a fixed order.
pub fn run_all(seed: u64) -> Result<Vec<OracleResult>> {
    Ok(vec![
        scalar_lasso(1000, seed)?,
        scalar_bridge(100, seed.wrapping_add(1))?,
        bilinear_pool_brute_force(100, seed.wrapping_add(2))?,
        eer_sweep(50, seed.wrapping_add(3))?,
    ])
}

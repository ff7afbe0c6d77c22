//! Least-squares density difference two-sample statistic and its permutation
//! test.
//!
//! The statistic fits the density difference p - q with a Gaussian basis
//! centered on pooled sample points and returns the fitted squared L2 norm;
//! the permutation test re-splits the pooled sample with the basis and
//! bandwidth held fixed.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{Bandwidth, DriftError, LsddParams, Result};

/// One pixel sample in RGB space, channels scaled to [0, 1].
pub type Point3 = [f64; 3];

fn sq_dist(a: &Point3, b: &Point3) -> f64 {
    let d0 = a[0] - b[0];
    let d1 = a[1] - b[1];
    let d2 = a[2] - b[2];
    d0 * d0 + d1 * d1 + d2 * d2
}

/// Median of all pairwise Euclidean distances (the median heuristic).
pub fn median_pairwise_distance(points: &[Point3]) -> f64 {
    if points.len() < 2 {
        return 0.0;
    }
    let mut sq = Vec::with_capacity(points.len() * (points.len() - 1) / 2);
    for i in 0..points.len() {
        for j in (i + 1)..points.len() {
            sq.push(sq_dist(&points[i], &points[j]));
        }
    }
    let mid = sq.len() / 2;
    let (_, median, _) = sq.select_nth_unstable_by(mid, f64::total_cmp);
    median.sqrt()
}

/// Up to `max` basis centers subsampled from the pooled points.
pub fn subsample_centers(pooled: &[Point3], max: usize, rng: &mut impl Rng) -> Vec<Point3> {
    if pooled.len() <= max {
        return pooled.to_vec();
    }
    rand::seq::index::sample(rng, pooled.len(), max)
        .into_iter()
        .map(|i| pooled[i])
        .collect()
}

/// Solve (A)x = b for symmetric positive-definite A (row-major, n x n) by
/// Cholesky factorization. A non-positive pivot reports a singular system,
/// the signal that the ridge term is too small.
fn cholesky_solve(mut a: Vec<f64>, n: usize, b: &[f64]) -> Result<Vec<f64>> {
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i * n + j];
            for k in 0..j {
                sum -= a[i * n + k] * a[j * n + k];
            }
            if i == j {
                if !(sum.is_finite() && sum > 0.0) {
                    return Err(DriftError::SingularSystem);
                }
                a[i * n + i] = sum.sqrt();
            } else {
                a[i * n + j] = sum / a[j * n + j];
            }
        }
    }
    // Forward substitution L y = b, then back substitution L^T x = y.
    let mut x = vec![0.0; n];
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= a[i * n + k] * x[k];
        }
        x[i] = sum / a[i * n + i];
    }
    for i in (0..n).rev() {
        let mut sum = x[i];
        for k in (i + 1)..n {
            sum -= a[k * n + i] * x[k];
        }
        x[i] = sum / a[i * n + i];
    }
    Ok(x)
}

/// The LSDD statistic of two samples under a fixed Gaussian basis.
///
/// With k(x, c) = exp(-|x - c|^2 / (2 sigma^2)):
/// h_l = mean_X k(., c_l) - mean_Y k(., c_l);
/// H_{lm} = (pi sigma^2)^{d/2} exp(-|c_l - c_m|^2 / (4 sigma^2));
/// theta = (H + lambda I)^-1 h; statistic = 2 theta.h - theta.H.theta.
pub fn lsdd_statistic(
    x: &[Point3],
    y: &[Point3],
    centers: &[Point3],
    sigma: f64,
    lambda: f64,
) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return Err(DriftError::EmptyInput("lsdd sample"));
    }
    if centers.is_empty() {
        return Err(DriftError::EmptyInput("lsdd centers"));
    }
    if !(sigma > 0.0) {
        return Err(DriftError::InvalidArgument("sigma must be positive".into()));
    }
    if !(lambda > 0.0) {
        return Err(DriftError::InvalidArgument(
            "lambda must be positive".into(),
        ));
    }

    let l = centers.len();
    let inv_2s2 = 1.0 / (2.0 * sigma * sigma);
    let mut h = vec![0.0; l];
    for (ci, c) in centers.iter().enumerate() {
        let mut mx = 0.0;
        for p in x {
            mx += (-sq_dist(p, c) * inv_2s2).exp();
        }
        let mut my = 0.0;
        for p in y {
            my += (-sq_dist(p, c) * inv_2s2).exp();
        }
        h[ci] = mx / x.len() as f64 - my / y.len() as f64;
    }

    let scale = (std::f64::consts::PI * sigma * sigma).powf(1.5); // d = 3
    let inv_4s2 = 1.0 / (4.0 * sigma * sigma);
    let mut big_h = vec![0.0; l * l];
    for i in 0..l {
        for j in 0..=i {
            let v = scale * (-sq_dist(&centers[i], &centers[j]) * inv_4s2).exp();
            big_h[i * l + j] = v;
            big_h[j * l + i] = v;
        }
    }

    let mut ridged = big_h.clone();
    for i in 0..l {
        ridged[i * l + i] += lambda;
    }
    let theta = cholesky_solve(ridged, l, &h)?;

    let mut th = 0.0;
    for i in 0..l {
        th += theta[i] * h[i];
    }
    let mut tht = 0.0;
    for i in 0..l {
        let mut row = 0.0;
        for j in 0..l {
            row += big_h[i * l + j] * theta[j];
        }
        tht += theta[i] * row;
    }
    Ok(2.0 * th - tht)
}

/// Permutation p-value of the LSDD statistic.
///
/// Centers and bandwidth are fixed from the pooled, unpermuted sample; each
/// of the B permutations re-splits the pool on its own seeded stream (so the
/// B statistics can be computed in parallel without changing the result).
/// Returns p = (1 + #{stat_b >= stat_obs}) / (B + 1).
pub fn lsdd_permutation_test(
    x: &[Point3],
    y: &[Point3],
    params: &LsddParams,
    rng: &mut impl Rng,
) -> Result<f64> {
    let b = params.num_permutations;
    if b == 0 {
        return Err(DriftError::InvalidArgument(
            "num_permutations must be >= 1".into(),
        ));
    }
    let mut pooled: Vec<Point3> = Vec::with_capacity(x.len() + y.len());
    pooled.extend_from_slice(x);
    pooled.extend_from_slice(y);

    let sigma = match params.bandwidth {
        Bandwidth::MedianHeuristic => median_pairwise_distance(&pooled).max(1e-6),
        Bandwidth::Fixed(s) => s,
    };
    let centers = subsample_centers(&pooled, params.num_centers, rng);
    let stat_obs = lsdd_statistic(x, y, &centers, sigma, params.lambda)?;

    let n = x.len();
    let seeds: Vec<u64> = (0..b).map(|_| rng.random()).collect();
    let exceed: u64 = seeds
        .par_iter()
        .map(|seed| {
            let mut prng = ChaCha8Rng::seed_from_u64(*seed);
            let mut idx: Vec<usize> = (0..pooled.len()).collect();
            idx.shuffle(&mut prng);
            let xb: Vec<Point3> = idx[..n].iter().map(|i| pooled[*i]).collect();
            let yb: Vec<Point3> = idx[n..].iter().map(|i| pooled[*i]).collect();
            let stat_b = lsdd_statistic(&xb, &yb, &centers, sigma, params.lambda)
                .unwrap_or(f64::INFINITY);
            u64::from(stat_b >= stat_obs)
        })
        .sum();

    Ok((1 + exceed) as f64 / (b + 1) as f64)
}

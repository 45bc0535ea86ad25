use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{Assignment, Points};
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;

/// Points above which the silhouette is computed on a seeded uniform subsample.
pub const DEFAULT_SILHOUETTE_LIMIT: usize = 20_000;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SilhouetteReport {
    pub mean: f64,
    /// Number of points the score was computed over.
    pub sample_size: usize,
}

/// Mean silhouette over all points, Euclidean distance. Singleton clusters score 0.
pub fn silhouette_mean(x: &FeatureMatrix, labels: &Assignment) -> Result<f64> {
    if labels.labels.len() != x.n() {
        return Err(Error::Dimension(format!(
            "{} labels for {} points",
            labels.labels.len(),
            x.n()
        )));
    }
    let points = Points::from_features(x);
    let idx: Vec<usize> = (0..x.n()).collect();
    silhouette_over(&points, &labels.labels, &idx)
}

/// Like [`silhouette_mean`], but scores a seeded subsample of `limit` points when `n > limit`.
pub fn silhouette_sampled(x: &FeatureMatrix, labels: &Assignment, limit: usize, seed: u64) -> Result<SilhouetteReport> {
    if x.n() <= limit {
        return Ok(SilhouetteReport {
            mean: silhouette_mean(x, labels)?,
            sample_size: x.n(),
        });
    }
    if labels.labels.len() != x.n() {
        return Err(Error::Dimension("label count differs from point count".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, x.n(), limit).into_vec();
    idx.sort_unstable();
    let points = Points::from_features(x);
    Ok(SilhouetteReport {
        mean: silhouette_over(&points, &labels.labels, &idx)?,
        sample_size: limit,
    })
}

pub(crate) fn silhouette_over(points: &Points, labels: &[usize], idx: &[usize]) -> Result<f64> {
    let k = idx.iter().map(|&i| labels[i]).max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    idx.iter().for_each(|&i| sizes[labels[i]] += 1);
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Err(Error::UndefinedMetric(
            "silhouette needs at least two distinct clusters".into(),
        ));
    }
    let scores: Vec<f64> = idx
        .par_iter()
        .map(|&i| {
            let own = labels[i];
            if sizes[own] == 1 {
                return 0.0;
            }
            let mut sums = vec![0.0; k];
            let row = points.row(i);
            for &j in idx {
                if j != i {
                    sums[labels[j]] += super::kmeans::sq_dist(row, points.row(j)).sqrt();
                }
            }
            let a = sums[own] / (sizes[own] - 1) as f64;
            let b = (0..k)
                .filter(|&c| c != own && sizes[c] > 0)
                .map(|c| sums[c] / sizes[c] as f64)
                .fold(f64::INFINITY, f64::min);
            let denom = a.max(b);
            if denom > 0.0 {
                (b - a) / denom
            } else {
                0.0
            }
        })
        .collect();
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{Assignment, ClusterModel, Points};
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub restarts: usize,
    pub max_iter: usize,
    /// Convergence threshold on the summed squared centroid shift.
    pub tol: f64,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            restarts: 10,
            max_iter: 300,
            tol: 1e-10,
        }
    }

    pub fn restarts(mut self, restarts: usize) -> Self {
        self.restarts = restarts;
        self
    }

    pub fn max_iter(mut self, max_iter: usize) -> Self {
        self.max_iter = max_iter;
        self
    }

    pub fn tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }
}

/// Result of a fit including the per-iteration inertia of every restart.
/// The last trace entry is the inertia of the returned assignment.
#[derive(Clone, Debug)]
pub struct KMeansFit {
    pub model: ClusterModel,
    pub assignment: Assignment,
    /// `traces[r][i]` is the inertia of the assignment step of iteration `i` in restart `r`.
    pub traces: Vec<Vec<f64>>,
}

/// k-means++ seeding followed by Lloyd iterations; best of `restarts` by inertia.
pub fn kmeans_fit(x: &FeatureMatrix, cfg: &KMeansConfig) -> Result<(ClusterModel, Assignment)> {
    let fit = kmeans_fit_traced(x, cfg)?;
    Ok((fit.model, fit.assignment))
}

pub fn kmeans_fit_traced(x: &FeatureMatrix, cfg: &KMeansConfig) -> Result<KMeansFit> {
    let points = Points::from_features(x);
    fit_points(&points, cfg)
}

pub(crate) fn fit_points(points: &Points, cfg: &KMeansConfig) -> Result<KMeansFit> {
    if cfg.k == 0 || cfg.k > points.n {
        return Err(Error::Argument(format!("k = {} must be in 1..={}", cfg.k, points.n)));
    }
    if cfg.restarts == 0 {
        return Err(Error::Argument("restarts must be at least 1".into()));
    }
    if points.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite feature value".into()));
    }
    let mut best: Option<(f64, Vec<Vec<f64>>, Vec<usize>, usize)> = None;
    let mut traces = Vec::with_capacity(cfg.restarts);
    for restart in 0..cfg.restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(restart as u64);
        let (centroids, labels, inertia, iterations, trace) = lloyd(points, cfg, &mut rng);
        traces.push(trace);
        if best.as_ref().is_none_or(|b| inertia < b.0) {
            best = Some((inertia, centroids, labels, iterations));
        }
    }
    let (inertia, centroids, labels, iterations_run) = best.expect("restarts >= 1");
    Ok(KMeansFit {
        model: ClusterModel {
            k: cfg.k,
            d: points.d,
            centroids,
            inertia,
            seed: cfg.seed,
            iterations_run,
        },
        assignment: Assignment { labels },
        traces,
    })
}

/// D² sampling: each new centroid is drawn with probability proportional to the
/// squared distance from the nearest centroid chosen so far.
fn kmeans_plus_plus<R: Rng>(points: &Points, k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut centroids = Vec::with_capacity(k);
    centroids.push(points.row(rng.random_range(0..points.n)).to_vec());
    let mut dist: Vec<f64> = (0..points.n).map(|i| sq_dist(points.row(i), &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = dist.iter().rposition(|&w| w > 0.0).expect("total > 0");
            for (i, &w) in dist.iter().enumerate() {
                acc += w;
                if acc > target && w > 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..points.n)
        };
        let c = points.row(pick).to_vec();
        for (i, d) in dist.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), &c));
        }
        centroids.push(c);
    }
    centroids
}

#[allow(clippy::type_complexity)]
fn lloyd<R: Rng>(points: &Points, cfg: &KMeansConfig, rng: &mut R) -> (Vec<Vec<f64>>, Vec<usize>, f64, usize, Vec<f64>) {
    let (n, d, k) = (points.n, points.d, cfg.k);
    let mut centroids = kmeans_plus_plus(points, k, rng);
    let mut trace = Vec::new();
    let mut iterations = 0;
    while iterations < cfg.max_iter.max(1) {
        iterations += 1;
        let (mut labels, mut dists) = nearest(points, &centroids);
        trace.push(dists.iter().sum());

        let mut counts = vec![0usize; k];
        labels.iter().for_each(|&l| counts[l] += 1);
        // empty clusters take the point farthest from its centroid
        for j in 0..k {
            if counts[j] > 0 {
                continue;
            }
            let far = (0..n)
                .filter(|&i| counts[labels[i]] > 1)
                .fold(None::<usize>, |acc, i| match acc {
                    Some(a) if dists[a] >= dists[i] => Some(a),
                    _ => Some(i),
                });
            if let Some(i) = far {
                counts[labels[i]] -= 1;
                labels[i] = j;
                counts[j] = 1;
                dists[i] = 0.0;
            }
        }

        let mut sums = vec![vec![0.0; d]; k];
        for (i, &l) in labels.iter().enumerate() {
            sums[l].iter_mut().zip(points.row(i)).for_each(|(s, &v)| *s += v);
        }
        let mut shift = 0.0;
        for (j, sum) in sums.into_iter().enumerate() {
            if counts[j] == 0 {
                continue;
            }
            let mean: Vec<f64> = sum.into_iter().map(|s| s / counts[j] as f64).collect();
            shift += sq_dist(&mean, &centroids[j]);
            centroids[j] = mean;
        }
        if shift <= cfg.tol {
            break;
        }
    }
    let (labels, dists) = nearest(points, &centroids);
    let inertia = dists.iter().sum();
    trace.push(inertia);
    (centroids, labels, inertia, iterations, trace)
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid per point (lowest index on ties) and the squared distance to it.
pub(crate) fn nearest(points: &Points, centroids: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>) {
    (0..points.n)
        .into_par_iter()
        .map(|i| {
            let row = points.row(i);
            let mut best = (0usize, f64::INFINITY);
            for (j, c) in centroids.iter().enumerate() {
                let dist = sq_dist(row, c);
                if dist < best.1 {
                    best = (j, dist);
                }
            }
            best
        })
        .unzip()
}

/// Labels each row of `x` with its nearest centroid under squared Euclidean distance.
pub fn assign(x: &FeatureMatrix, centroids: &[Vec<f64>]) -> Result<Assignment> {
    if centroids.is_empty() {
        return Err(Error::Argument("no centroids".into()));
    }
    if let Some(c) = centroids.iter().find(|c| c.len() != x.d()) {
        return Err(Error::Dimension(format!(
            "centroid width {} does not match feature width {}",
            c.len(),
            x.d()
        )));
    }
    let (labels, _) = nearest(&Points::from_features(x), centroids);
    Ok(Assignment { labels })
}

use std::fmt::Write as _;

use super::kmeans::{fit_points, KMeansConfig};
use super::silhouette::{silhouette_over, DEFAULT_SILHOUETTE_LIMIT};
use super::Points;
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepEntry {
    pub k: usize,
    pub silhouette: f64,
    pub inertia: f64,
    pub seed: u64,
}

/// Silhouette and inertia for a range of cluster counts.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KSweepResult {
    pub entries: Vec<SweepEntry>,
}

impl KSweepResult {
    pub fn best(&self) -> Option<&SweepEntry> {
        self.entries
            .iter()
            .fold(None, |acc: Option<&SweepEntry>, e| match acc {
                Some(b) if b.silhouette >= e.silhouette => Some(b),
                _ => Some(e),
            })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,silhouette,inertia,seed\n");
        for e in &self.entries {
            writeln!(out, "{},{:.17e},{:.17e},{}", e.k, e.silhouette, e.inertia, e.seed).expect("string write");
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        match lines.next() {
            Some(h) if h.trim() == "k,silhouette,inertia,seed" => {}
            _ => return Err(Error::Parse("missing sweep CSV header".into())),
        }
        let entries = lines
            .enumerate()
            .map(|(i, line)| {
                let f: Vec<&str> = line.split(',').map(str::trim).collect();
                let bad = || Error::Parse(format!("sweep CSV row {}: {line:?}", i + 2));
                if f.len() != 4 {
                    return Err(bad());
                }
                Ok(SweepEntry {
                    k: f[0].parse().map_err(|_| bad())?,
                    silhouette: f[1].parse().map_err(|_| bad())?,
                    inertia: f[2].parse().map_err(|_| bad())?,
                    seed: f[3].parse().map_err(|_| bad())?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { entries })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepConfig {
    pub k_min: usize,
    pub k_max: usize,
    pub seed: u64,
    pub restarts: usize,
    pub max_iter: usize,
    pub silhouette_limit: usize,
}

impl SweepConfig {
    pub fn new(k_min: usize, k_max: usize, seed: u64) -> Self {
        Self {
            k_min,
            k_max,
            seed,
            restarts: 10,
            max_iter: 300,
            silhouette_limit: DEFAULT_SILHOUETTE_LIMIT,
        }
    }
}

/// Fits every k in `k_min..=k_max` and scores it.
pub fn sweep_k(x: &FeatureMatrix, cfg: &SweepConfig) -> Result<KSweepResult> {
    if !(2 <= cfg.k_min && cfg.k_min <= cfg.k_max && cfg.k_max < x.n()) {
        return Err(Error::Argument(format!(
            "sweep range {}..={} must satisfy 2 <= k_min <= k_max <= n - 1 = {}",
            cfg.k_min,
            cfg.k_max,
            x.n() as isize - 1
        )));
    }
    let points = Points::from_features(x);
    let sample: Vec<usize> = if x.n() > cfg.silhouette_limit {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut idx = rand::seq::index::sample(&mut rng, x.n(), cfg.silhouette_limit).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..x.n()).collect()
    };
    let mut entries = Vec::with_capacity(cfg.k_max - cfg.k_min + 1);
    for k in cfg.k_min..=cfg.k_max {
        let km = KMeansConfig::new(k, cfg.seed)
            .restarts(cfg.restarts)
            .max_iter(cfg.max_iter);
        let fit = fit_points(&points, &km)?;
        let silhouette = silhouette_over(&points, &fit.assignment.labels, &sample)?;
        entries.push(SweepEntry {
            k,
            silhouette,
            inertia: fit.model.inertia,
            seed: cfg.seed,
        });
    }
    Ok(KSweepResult { entries })
}

/// How [`pick_k`] turns a sweep into one cluster count.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PickRule {
    /// Smallest k whose silhouette is within `epsilon` (relative) of the best.
    #[default]
    NearMaxSmallest,
    /// The k with the highest silhouette.
    Max,
}

pub const DEFAULT_PICK_EPSILON: f64 = 0.02;

/// Chooses k from a sweep. Returns `None` for an empty sweep.
pub fn pick_k(sweep: &KSweepResult, epsilon: f64, rule: PickRule) -> Option<usize> {
    let best = sweep.best()?;
    match rule {
        PickRule::Max => Some(best.k),
        PickRule::NearMaxSmallest => {
            let threshold = best.silhouette - epsilon * best.silhouette.abs();
            sweep
                .entries
                .iter()
                .filter(|e| e.silhouette >= threshold)
                .map(|e| e.k)
                .min()
        }
    }
}

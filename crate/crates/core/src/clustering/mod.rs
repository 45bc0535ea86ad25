//! k-means clustering of patch embeddings, silhouette scoring and choice of k.

mod kmeans;
mod silhouette;
mod sweep;

use std::fmt::Write as _;
use std::path::Path;

pub use kmeans::{assign, kmeans_fit, kmeans_fit_traced, KMeansConfig, KMeansFit};
pub use silhouette::{silhouette_mean, silhouette_sampled, SilhouetteReport, DEFAULT_SILHOUETTE_LIMIT};
pub use sweep::{pick_k, sweep_k, KSweepResult, PickRule, SweepConfig, SweepEntry, DEFAULT_PICK_EPSILON};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;

/// Row-major f64 copy of a feature matrix.
pub(crate) struct Points {
    pub n: usize,
    pub d: usize,
    pub data: Vec<f64>,
}

impl Points {
    pub fn from_features(x: &FeatureMatrix) -> Self {
        Self {
            n: x.n(),
            d: x.d(),
            data: x.values().iter().map(|&v| v as f64).collect(),
        }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }
}

/// Fitted centroids. `inertia` is the summed squared distance of every point to its
/// nearest centroid.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterModel {
    pub k: usize,
    pub d: usize,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    pub seed: u64,
    pub iterations_run: usize,
}

/// One cluster label per point.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Assignment {
    pub labels: Vec<usize>,
}

impl Assignment {
    pub fn counts(&self, k: usize) -> Vec<usize> {
        let mut c = vec![0; k];
        for &l in &self.labels {
            if l < k {
                c[l] += 1;
            }
        }
        c
    }
}

impl ClusterModel {
    /// Text form: `k`, `d`, `seed`, `inertia` and `iterations` lines, then one centroid per
    /// line. Reals use 17 significant digits so f64 values survive a round trip.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "k {}", self.k).unwrap();
        writeln!(out, "d {}", self.d).unwrap();
        writeln!(out, "seed {}", self.seed).unwrap();
        writeln!(out, "inertia {:.16e}", self.inertia).unwrap();
        writeln!(out, "iterations {}", self.iterations_run).unwrap();
        for c in &self.centroids {
            let row: Vec<String> = c.iter().map(|v| format!("{v:.16e}")).collect();
            writeln!(out, "{}", row.join(" ")).unwrap();
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let mut header = |key: &str| -> Result<String> {
            let (i, line) = lines
                .next()
                .ok_or_else(|| Error::Parse(format!("missing `{key}` line")))?;
            line.strip_prefix(key)
                .and_then(|rest| rest.strip_prefix(' '))
                .map(|v| v.trim().to_string())
                .ok_or_else(|| Error::Parse(format!("line {}: expected `{key} <value>`", i + 1)))
        };
        let parse_err = |what: &str| Error::Parse(format!("bad {what} value"));
        let k: usize = header("k")?.parse().map_err(|_| parse_err("k"))?;
        let d: usize = header("d")?.parse().map_err(|_| parse_err("d"))?;
        let seed: u64 = header("seed")?.parse().map_err(|_| parse_err("seed"))?;
        let inertia: f64 = header("inertia")?.parse().map_err(|_| parse_err("inertia"))?;
        let iterations_run: usize = header("iterations")?.parse().map_err(|_| parse_err("iterations"))?;
        let centroids = lines
            .map(|(i, line)| {
                let row = line
                    .split_whitespace()
                    .map(|t| t.parse::<f64>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| Error::Parse(format!("line {}: bad centroid value", i + 1)))?;
                if row.len() != d {
                    return Err(Error::Parse(format!("line {}: expected {d} values, got {}", i + 1, row.len())));
                }
                Ok(row)
            })
            .collect::<Result<Vec<_>>>()?;
        if centroids.len() != k {
            return Err(Error::Parse(format!("expected {k} centroids, got {}", centroids.len())));
        }
        Ok(Self {
            k,
            d,
            centroids,
            inertia,
            seed,
            iterations_run,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::fsutil::write_atomic(path.as_ref(), self.to_text().as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Chance-corrected agreement between two labelings of the same points.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension("labelings differ in length".into()));
    }
    let n = a.len();
    if n < 2 {
        return Ok(1.0);
    }
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0u64; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let pairs = |c: u64| (c * c.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.iter().flatten().map(|&c| pairs(c)).sum();
    let sum_a: f64 = table.iter().map(|r| pairs(r.iter().sum())).sum();
    let sum_b: f64 = (0..kb).map(|j| pairs(table.iter().map(|r| r[j]).sum())).sum();
    let total = pairs(n as u64);
    let expected = sum_a * sum_b / total;
    let max = 0.5 * (sum_a + sum_b);
    if (max - expected).abs() < f64::EPSILON {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_d(values: &[f64]) -> FeatureMatrix {
        FeatureMatrix::new(values.len(), 1, values.iter().map(|&v| v as f32).collect()).unwrap()
    }

    #[test]
    fn identical_points_single_cluster() {
        let x = FeatureMatrix::new(5, 2, [1.5f32, -2.0].repeat(5)).unwrap();
        let (m, a) = kmeans_fit(&x, &KMeansConfig::new(1, 0)).unwrap();
        assert_eq!(m.centroids, vec![vec![1.5, -2.0]]);
        assert_eq!(m.inertia, 0.0);
        assert!(a.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn four_points_two_clusters() {
        let x = one_d(&[0.0, 1.0, 10.0, 11.0]);
        let (m, a) = kmeans_fit(&x, &KMeansConfig::new(2, 3)).unwrap();
        let mut cs: Vec<f64> = m.centroids.iter().map(|c| c[0]).collect();
        cs.sort_by(f64::total_cmp);
        assert_eq!(cs, vec![0.5, 10.5]);
        assert!((m.inertia - 1.0).abs() < 1e-12);
        assert_eq!(a.labels[0], a.labels[1]);
        assert_eq!(a.labels[2], a.labels[3]);
        assert_ne!(a.labels[0], a.labels[2]);
    }

    #[test]
    fn k_equals_n_has_zero_inertia() {
        let x = one_d(&[3.0, -1.0, 8.0, 2.5, 0.0]);
        let (m, a) = kmeans_fit(&x, &KMeansConfig::new(5, 1)).unwrap();
        assert_eq!(m.inertia, 0.0);
        let mut labels = a.labels.clone();
        labels.sort_unstable();
        assert_eq!(labels, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn k_larger_than_n_rejected() {
        let x = one_d(&[1.0, 2.0]);
        assert!(matches!(kmeans_fit(&x, &KMeansConfig::new(3, 0)), Err(Error::Argument(_))));
        assert!(matches!(kmeans_fit(&x, &KMeansConfig::new(1, 0).restarts(0)), Err(Error::Argument(_))));
    }

    #[test]
    fn assign_ties_go_to_lowest_index() {
        let x = FeatureMatrix::new(2, 2, vec![0.0, 0.0, 3.0, 3.0]).unwrap();
        let centroids = vec![
            vec![9.0, 9.0],
            vec![1.0, 0.0],
            vec![7.0, 7.0],
            vec![3.0, 3.0],
            vec![-1.0, 0.0],
        ];
        let a = assign(&x, &centroids).unwrap();
        assert_eq!(a.labels, vec![1, 3]);
        assert!(matches!(assign(&x, &[vec![1.0]]), Err(Error::Dimension(_))));
    }

    #[test]
    fn silhouette_of_four_points() {
        let x = one_d(&[0.0, 1.0, 10.0, 11.0]);
        let s = silhouette_mean(&x, &Assignment { labels: vec![0, 0, 1, 1] }).unwrap();
        assert!((s - 0.899_749_373_433_583_9).abs() < 1e-12, "{s}");
        let relabeled = silhouette_mean(&x, &Assignment { labels: vec![1, 1, 0, 0] }).unwrap();
        assert_eq!(s, relabeled);
    }

    #[test]
    fn silhouette_of_duplicate_pairs_is_one() {
        let x = one_d(&[2.0, 2.0, 50.0, 50.0]);
        let s = silhouette_mean(&x, &Assignment { labels: vec![0, 0, 1, 1] }).unwrap();
        assert_eq!(s, 1.0);
    }

    #[test]
    fn silhouette_singletons_score_zero() {
        let x = one_d(&[0.0, 1.0, 5.0]);
        let s = silhouette_mean(&x, &Assignment { labels: vec![0, 0, 1] }).unwrap();
        // point 2 is a singleton: (0 + s0 + s1) / 3
        let s0 = (5.0 - 1.0) / 5.0;
        let s1 = (4.0 - 1.0) / 4.0;
        assert!((s - (s0 + s1) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn silhouette_needs_two_clusters() {
        let x = one_d(&[0.0, 1.0]);
        let err = silhouette_mean(&x, &Assignment { labels: vec![0, 0] }).unwrap_err();
        assert!(matches!(err, Error::UndefinedMetric(_)));
    }

    #[test]
    fn silhouette_subsample_reports_size() {
        let x = one_d(&(0..50).map(|i| if i < 25 { i as f64 * 0.01 } else { 10.0 + i as f64 * 0.01 }).collect::<Vec<_>>());
        let labels = Assignment { labels: (0..50).map(|i| usize::from(i >= 25)).collect() };
        let r = silhouette_sampled(&x, &labels, 20, 9).unwrap();
        assert_eq!(r.sample_size, 20);
        assert!(r.mean > 0.9);
        let full = silhouette_sampled(&x, &labels, 100, 9).unwrap();
        assert_eq!(full.sample_size, 50);
    }

    #[test]
    fn pick_k_rules() {
        let sweep = |vals: &[(usize, f64)]| KSweepResult {
            entries: vals
                .iter()
                .map(|&(k, s)| SweepEntry { k, silhouette: s, inertia: 0.0, seed: 0 })
                .collect(),
        };
        let inc = sweep(&[(2, 0.1), (3, 0.2), (4, 0.3)]);
        assert_eq!(pick_k(&inc, 0.02, PickRule::NearMaxSmallest), Some(4));
        assert_eq!(pick_k(&sweep(&[(7, 0.4)]), 0.02, PickRule::NearMaxSmallest), Some(7));
        assert_eq!(pick_k(&KSweepResult::default(), 0.02, PickRule::NearMaxSmallest), None);
        let neg = sweep(&[(2, -0.2), (3, -0.1)]);
        assert_eq!(pick_k(&neg, 0.02, PickRule::NearMaxSmallest), Some(3));
        assert_eq!(pick_k(&inc, 0.02, PickRule::Max), Some(4));
    }

    #[test]
    fn model_text_round_trip() {
        let m = ClusterModel {
            k: 2,
            d: 3,
            centroids: vec![vec![0.1, 1.0 / 3.0, -2.5e-300], vec![f64::MAX, 7.0, std::f64::consts::PI]],
            inertia: 12.345678901234567,
            seed: 42,
            iterations_run: 7,
        };
        let back = ClusterModel::from_text(&m.to_text()).unwrap();
        assert_eq!(back, m);
        assert!(ClusterModel::from_text("k 2\nd 3\n").is_err());
    }

    #[test]
    fn sweep_csv_round_trip() {
        let s = KSweepResult {
            entries: vec![SweepEntry { k: 2, silhouette: 0.123456789, inertia: 4.5, seed: 1 }],
        };
        assert_eq!(KSweepResult::from_csv(&s.to_csv()).unwrap(), s);
        assert!(s.to_csv().starts_with("k,silhouette,inertia,seed\n"));
    }

    #[test]
    fn sweep_range_checked() {
        let x = one_d(&[0.0, 1.0, 2.0, 3.0]);
        assert!(sweep_k(&x, &SweepConfig::new(1, 2, 0)).is_err());
        assert!(sweep_k(&x, &SweepConfig::new(2, 4, 0)).is_err());
        let single = sweep_k(&x, &SweepConfig::new(2, 2, 0)).unwrap();
        assert_eq!(single.entries.len(), 1);
    }

    #[test]
    fn ari_known_values() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap(), 1.0);
        // sklearn: adjusted_rand_score([0,0,1,1],[0,0,1,2]) = 0.5714285714285715
        let v = adjusted_rand_index(&[0, 0, 1, 1], &[0, 0, 1, 2]).unwrap();
        assert!((v - 0.571_428_571_428_571_5).abs() < 1e-12);
        // contingency [[2,1],[1,2]]: index 2, expected 36/15, max 6
        let v = adjusted_rand_index(&[0, 0, 0, 1, 1, 1], &[0, 1, 0, 1, 0, 1]).unwrap();
        assert!((v + 1.0 / 9.0).abs() < 1e-12);
    }
}

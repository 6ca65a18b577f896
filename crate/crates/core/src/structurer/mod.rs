//! Structure labels: reduce chunk rows, cluster them with HDBSCAN, and map
//! unseen chunks onto the fitted clusters.

pub mod hdbscan;

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Mat;
use crate::store::Checkpoint;
use hdbscan::{euclidean, hdbscan, HdbscanParams};

pub const CLUSTER_MAGIC: &[u8; 4] = b"MSCL";

pub trait Reducer {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn transform(&self, x: &Mat) -> Result<Mat>;
}

/// Projection onto the leading principal components. Each component is
/// signed so that its largest-magnitude entry is positive.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: Mat,
    /// `input_dim x output_dim`.
    pub components: Mat,
}

impl Pca {
    pub fn fit(x: &Mat, r: usize) -> Result<Pca> {
        let (n, d) = x.dim();
        if r == 0 || r > d {
            return Err(Error::config(format!("cannot reduce {d} dimensions to {r}")));
        }
        if n == 0 {
            return Err(Error::validation("PCA needs at least one row"));
        }
        let mean = x.mean_axis(ndarray::Axis(0)).expect("rows").insert_axis(ndarray::Axis(0));
        let centered = x - &mean;
        let cov = centered.t().dot(&centered) / (n.max(2) - 1) as f64;
        let eig = SymmetricEigen::new(DMatrix::from_fn(d, d, |i, j| cov[[i, j]]));
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let mut components = Mat::zeros((d, r));
        for (k, &src) in order.iter().take(r).enumerate() {
            let col = eig.eigenvectors.column(src);
            let mut pivot = 0;
            for i in 1..d {
                if col[i].abs() > col[pivot].abs() {
                    pivot = i;
                }
            }
            let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
            for i in 0..d {
                components[[i, k]] = sign * col[i];
            }
        }
        Ok(Pca { mean, components })
    }
}

impl Reducer for Pca {
    fn input_dim(&self) -> usize {
        self.components.nrows()
    }

    fn output_dim(&self) -> usize {
        self.components.ncols()
    }

    fn transform(&self, x: &Mat) -> Result<Mat> {
        if x.ncols() != self.input_dim() {
            return Err(Error::validation(format!(
                "rows have width {}, reducer expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        Ok((x - &self.mean).dot(&self.components))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StructurerConfig {
    pub min_cluster_size: usize,
    /// Defaults to `min_cluster_size`.
    pub min_samples: Option<usize>,
    pub reduced_dim: usize,
    pub k_cap: usize,
    /// Fit on a seeded random subset of this many rows when set.
    pub max_fit_points: Option<usize>,
    pub seed: u64,
}

impl Default for StructurerConfig {
    fn default() -> Self {
        StructurerConfig {
            min_cluster_size: 15,
            min_samples: None,
            reduced_dim: 64,
            k_cap: 32,
            max_fit_points: None,
            seed: 0,
        }
    }
}

impl StructurerConfig {
    pub fn params(&self) -> HdbscanParams {
        HdbscanParams {
            min_cluster_size: self.min_cluster_size,
            min_samples: self.min_samples.unwrap_or(self.min_cluster_size),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureLabels {
    pub doc_id: String,
    pub labels: Vec<i32>,
    pub num_clusters: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub config: StructurerConfig,
    pub reducer: Pca,
    /// Reduced training points.
    pub points: Mat,
    pub core_distances: Vec<f64>,
    pub labels: Vec<i32>,
    pub thresholds: Vec<f64>,
}

impl ClusterModel {
    /// Fits the reducer and HDBSCAN on training rows.
    pub fn fit(rows: &Mat, config: &StructurerConfig) -> Result<ClusterModel> {
        if config.k_cap == 0 {
            return Err(Error::config("k_cap must be at least 1"));
        }
        if config.reduced_dim >= rows.ncols() {
            return Err(Error::config(format!(
                "reduced_dim {} must be smaller than the row width {}",
                config.reduced_dim,
                rows.ncols()
            )));
        }
        let params = config.params();
        if params.min_cluster_size < 2 {
            return Err(Error::config("min_cluster_size must be at least 2"));
        }
        if rows.nrows() < params.min_cluster_size {
            return Err(Error::validation(format!(
                "{} points are fewer than min_cluster_size {}",
                rows.nrows(),
                params.min_cluster_size
            )));
        }
        let fit_rows = match config.max_fit_points {
            Some(m) if m < rows.nrows() => {
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                let mut idx = sample(&mut rng, rows.nrows(), m).into_vec();
                idx.sort_unstable();
                rows.select(ndarray::Axis(0), &idx)
            }
            _ => rows.clone(),
        };
        let reducer = Pca::fit(&fit_rows, config.reduced_dim)?;
        let points = reducer.transform(&fit_rows)?;
        let c = hdbscan(&points, params)?;
        log::info!(
            "clustered {} points into {} clusters ({} noise)",
            points.nrows(),
            c.num_clusters,
            c.labels.iter().filter(|&&l| l < 0).count()
        );
        Ok(ClusterModel {
            config: config.clone(),
            reducer,
            points,
            core_distances: c.core_distances,
            labels: c.labels,
            thresholds: c.thresholds,
        })
    }

    pub fn num_clusters(&self) -> usize {
        self.thresholds.len()
    }

    /// Label of each row via its nearest training point under mutual
    /// reachability; noise when that point is noise or farther than the
    /// cluster's birth distance.
    pub fn assign_rows(&self, rows: &Mat) -> Result<Vec<i32>> {
        let reduced = self.reducer.transform(rows)?;
        let k = self.config.params().min_samples;
        let n = self.points.nrows();
        Ok((0..reduced.nrows())
            .into_par_iter()
            .map(|i| {
                let x = reduced.row(i);
                let dist: Vec<f64> = self.points.outer_iter().map(|p| euclidean(x, p)).collect();
                let mut sorted = dist.clone();
                let core_x = *sorted.select_nth_unstable_by(k.min(n) - 1, f64::total_cmp).1;
                let mut best = 0;
                let mut best_mr = f64::INFINITY;
                for j in 0..n {
                    let mr = dist[j].max(core_x).max(self.core_distances[j]);
                    if mr < best_mr || (mr == best_mr && dist[j] < dist[best]) {
                        best = j;
                        best_mr = mr;
                    }
                }
                match self.labels[best] {
                    l if l >= 0 && best_mr <= self.thresholds[l as usize] => l,
                    _ => -1,
                }
            })
            .collect())
    }

    pub fn assign(&self, doc_id: &str, rows: &Mat) -> Result<StructureLabels> {
        Ok(StructureLabels {
            doc_id: doc_id.to_string(),
            labels: self.assign_rows(rows)?,
            num_clusters: self.num_clusters(),
        })
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let row = |v: &[f64]| Mat::from_shape_vec((1, v.len()), v.to_vec()).expect("row");
        let labels: Vec<f64> = self.labels.iter().map(|&l| f64::from(l)).collect();
        Ok(Checkpoint {
            magic: *CLUSTER_MAGIC,
            meta: serde_json::to_string(&self.config)?,
            tensors: vec![
                ("reducer.mean".into(), self.reducer.mean.clone()),
                ("reducer.components".into(), self.reducer.components.clone()),
                ("points".into(), self.points.clone()),
                ("core_distances".into(), row(&self.core_distances)),
                ("labels".into(), row(&labels)),
                ("thresholds".into(), row(&self.thresholds)),
            ],
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: StructurerConfig = serde_json::from_str(&ck.meta)?;
        let flat = |name: &str| -> Result<Vec<f64>> { Ok(ck.tensor(name)?.iter().copied().collect()) };
        let mean = ck.tensor("reducer.mean")?.clone();
        let components = ck.tensor("reducer.components")?.clone();
        let points = ck.tensor("points")?.clone();
        let core_distances = flat("core_distances")?;
        let thresholds = flat("thresholds")?;
        let mut labels = Vec::new();
        for l in flat("labels")? {
            if l.fract() != 0.0 || l < -1.0 || l >= thresholds.len() as f64 {
                return Err(Error::format(format!("invalid stored cluster label {l}")));
            }
            labels.push(l as i32);
        }
        let n = points.nrows();
        if mean.nrows() != 1
            || mean.ncols() != components.nrows()
            || components.ncols() != points.ncols()
            || core_distances.len() != n
            || labels.len() != n
            || n == 0
            || config.params().min_samples == 0
        {
            return Err(Error::format("inconsistent cluster model tensors"));
        }
        Ok(ClusterModel {
            config,
            reducer: Pca { mean, components },
            points,
            core_distances,
            labels,
            thresholds,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path, CLUSTER_MAGIC)?)
    }
}

/// Normalized histogram over `{noise, 0, .., k_cap - 1}`; ids at or above
/// `k_cap` share the last bucket. Empty input gives all zeros.
pub fn encode_for_head(labels: &[i32], k_cap: usize) -> Vec<f64> {
    let mut out = vec![0.0; k_cap + 1];
    if labels.is_empty() || k_cap == 0 {
        return out;
    }
    for &l in labels {
        let bucket = if l < 0 { 0 } else { 1 + (l as usize).min(k_cap - 1) };
        out[bucket] += 1.0;
    }
    let n = labels.len() as f64;
    for v in &mut out {
        *v /= n;
    }
    out
}

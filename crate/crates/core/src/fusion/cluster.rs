//! k-means++ clustering with silhouette-based model selection and per-cluster
//! regularized covariances for Mahalanobis distances.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::rng::{seeded, Rng as ChaCha};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterConfig {
    pub k_max: usize,
    pub max_iters: usize,
    pub tol: f64,
    /// Ridge added to every covariance diagonal.
    pub ridge: f64,
    pub seed: u64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            k_max: 4,
            max_iters: 50,
            tol: 1e-6,
            ridge: 1e-3,
            seed: 0,
        }
    }
}

/// One fitted cluster.
#[derive(Clone, Debug)]
pub struct Cluster {
    pub center: Vec<f64>,
    pub covariance: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    pub size: usize,
}

impl Cluster {
    fn new(center: Vec<f64>, members: &[&[f64]], ridge: f64) -> Result<Self> {
        let d = center.len();
        let mut cov = DMatrix::<f64>::zeros(d, d);
        if members.len() > 1 {
            let mean: Vec<f64> = (0..d)
                .map(|j| members.iter().map(|m| m[j]).sum::<f64>() / members.len() as f64)
                .collect();
            for m in members {
                for i in 0..d {
                    let di = m[i] - mean[i];
                    for j in 0..d {
                        cov[(i, j)] += di * (m[j] - mean[j]);
                    }
                }
            }
            cov /= (members.len() - 1) as f64;
        }
        for i in 0..d {
            cov[(i, i)] += ridge;
        }
        let chol = Cholesky::new(cov.clone())
            .ok_or_else(|| Error::Numerical("cluster covariance is not positive definite".into()))?;
        Ok(Self {
            center,
            covariance: cov,
            chol,
            size: members.len(),
        })
    }

    /// `sqrt((x − c)ᵀ Σ⁻¹ (x − c))` via the Cholesky factor.
    pub fn mahalanobis(&self, x: &[f64]) -> f64 {
        let diff = DVector::from_iterator(x.len(), x.iter().zip(&self.center).map(|(a, b)| a - b));
        let l = self.chol.l_dirty();
        let y = l
            .solve_lower_triangular(&diff)
            .expect("Cholesky factor has a positive diagonal");
        y.norm()
    }
}

/// Clusters of one embedding set.
#[derive(Clone, Debug)]
pub struct ClusterModel {
    pub clusters: Vec<Cluster>,
    /// Mean silhouette of the chosen K.
    pub silhouette: f64,
    /// Silhouette for each K tried, starting at K = 2.
    pub silhouettes: Vec<f64>,
    /// All points identical, or some cluster ended up empty.
    pub degenerate: bool,
    /// Best silhouette below 0.5.
    pub weak_structure: bool,
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.clusters.len()
    }

    /// Index of the nearest cluster by Mahalanobis distance and that distance.
    pub fn nearest(&self, x: &[f64]) -> (usize, f64) {
        self.clusters
            .iter()
            .enumerate()
            .map(|(i, c)| (i, c.mahalanobis(x)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("at least one cluster")
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest_center(x: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centers.iter().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Lloyd's k-means with k-means++ seeding. Returns centers, assignments and
/// whether an empty cluster had to be re-seeded.
pub fn kmeans(points: &[&[f64]], k: usize, cfg: &ClusterConfig, rng: &mut ChaCha) -> (Vec<Vec<f64>>, Vec<usize>, bool) {
    let n = points.len();
    let mut centers: Vec<Vec<f64>> = vec![points[rng.random_range(0..n)].to_vec()];
    while centers.len() < k {
        let d2: Vec<f64> = points.iter().map(|p| nearest_center(p, &centers).1).collect();
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut u = rng.random_range(0.0..total);
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centers.push(points[idx].to_vec());
    }
    let dim = points[0].len();
    let mut assign = vec![0; n];
    let mut reseeded = false;
    for _ in 0..cfg.max_iters {
        for (a, p) in assign.iter_mut().zip(points) {
            *a = nearest_center(p, &centers).0;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (a, p) in assign.iter().zip(points) {
            counts[*a] += 1;
            for (s, v) in sums[*a].iter_mut().zip(p.iter()) {
                *s += v;
            }
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            let new = if counts[c] == 0 {
                // re-seed from the point farthest from its own center
                reseeded = true;
                let far = (0..n)
                    .max_by(|&i, &j| {
                        sq_dist(points[i], &centers[assign[i]]).total_cmp(&sq_dist(points[j], &centers[assign[j]]))
                    })
                    .unwrap();
                points[far].to_vec()
            } else {
                sums[c].iter().map(|s| s / counts[c] as f64).collect()
            };
            shift = shift.max(sq_dist(&new, &centers[c]).sqrt());
            centers[c] = new;
        }
        if shift < cfg.tol {
            break;
        }
    }
    for (a, p) in assign.iter_mut().zip(points) {
        *a = nearest_center(p, &centers).0;
    }
    (centers, assign, reseeded)
}

/// Mean silhouette coefficient. Points in singleton clusters score 0, as do
/// points whose intra and nearest-other distances are both 0.
pub fn silhouette(points: &[&[f64]], assign: &[usize], k: usize) -> f64 {
    let n = points.len();
    let mut counts = vec![0usize; k];
    for &a in assign {
        counts[a] += 1;
    }
    let mut total = 0.0;
    let mut sums = vec![0.0; k];
    for i in 0..n {
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            if i != j {
                sums[assign[j]] += sq_dist(points[i], points[j]).sqrt();
            }
        }
        let own = assign[i];
        if counts[own] <= 1 {
            continue;
        }
        let a = sums[own] / (counts[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && counts[c] > 0)
            .map(|c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        if !b.is_finite() {
            continue;
        }
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    total / n as f64
}

/// Fits k-means for every K in 2..=k_max and keeps the K with the largest mean silhouette.
pub fn fit_clusters(x: &Tensor, cfg: &ClusterConfig) -> Result<ClusterModel> {
    if x.rank() != 2 {
        return Err(Error::shape("fit_clusters", format!("expected [N, d], got {:?}", x.shape())));
    }
    let (n, d) = (x.shape()[0], x.shape()[1]);
    if cfg.k_max < 2 {
        return Err(Error::invalid("k_max must be at least 2"));
    }
    if n < 2 * cfg.k_max {
        return Err(Error::invalid(format!(
            "{n} points cannot support k_max = {}; use k_max <= {}",
            cfg.k_max,
            n / 2
        )));
    }
    let points: Vec<&[f64]> = x.data().chunks(d).collect();
    let all_same = points.iter().all(|p| *p == points[0]);
    let mut rng = seeded(cfg.seed);
    let mut best: Option<(f64, Vec<Vec<f64>>, Vec<usize>, bool)> = None;
    let mut silhouettes = Vec::new();
    for k in 2..=cfg.k_max {
        let (centers, assign, reseeded) = kmeans(&points, k, cfg, &mut rng);
        let s = silhouette(&points, &assign, k);
        silhouettes.push(s);
        if best.as_ref().is_none_or(|b| s > b.0) {
            best = Some((s, centers, assign, reseeded));
        }
    }
    let (s, centers, assign, reseeded) = best.unwrap();
    let mut clusters = Vec::with_capacity(centers.len());
    let mut any_empty = false;
    for (c, center) in centers.into_iter().enumerate() {
        let members: Vec<&[f64]> = points
            .iter()
            .zip(&assign)
            .filter(|(_, &a)| a == c)
            .map(|(p, _)| *p)
            .collect();
        any_empty |= members.is_empty();
        clusters.push(Cluster::new(center, &members, cfg.ridge)?);
    }
    Ok(ClusterModel {
        clusters,
        silhouette: s,
        silhouettes,
        degenerate: all_same || any_empty || (reseeded && s <= 0.0),
        weak_structure: s < 0.5,
    })
}

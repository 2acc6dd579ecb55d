//! Intrinsic-dimension estimation from nearest-neighbor distance ratios.
//!
//! For each point, let mu = r_2k / r_k be the ratio of the distances to its
//! 2k-th and k-th nearest neighbors (self excluded). Under a locally uniform
//! density on a d-dimensional manifold, u = mu^(-d) follows Beta(k, k), so
//! the log-likelihood of d given the observed ratios is
//!
//!   l(d) = sum_i [ ln d - (d*k + 1) ln mu_i + (k - 1) ln(1 - mu_i^(-d)) ]
//!
//! up to a d-independent normalizing constant. At k = 1 this reduces to the
//! two-nearest-neighbor Pareto law with closed-form maximizer
//! d = n / sum_i ln mu_i, which anchors the generic optimizer's tests.

use crate::error::{Error, Result};
use crate::numerics::rng::SplitRng;
use crate::numerics::tensor::Tensor;

/// Finite point cloud in Euclidean space; rows are points.
#[derive(Clone, Debug)]
pub struct PointCloud {
    n: usize,
    dim: usize,
    coords: Vec<f64>,
}

impl PointCloud {
    pub fn new(n: usize, dim: usize, coords: Vec<f64>) -> Result<Self> {
        if n < 2 || dim == 0 {
            return Err(Error::invalid_arg("PointCloud", "need at least 2 points of dim >= 1"));
        }
        if coords.len() != n * dim {
            return Err(Error::invalid_arg(
                "PointCloud",
                format!("coords length {} != {}x{}", coords.len(), n, dim),
            ));
        }
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid_arg("PointCloud", "non-finite coordinate"));
        }
        Ok(PointCloud { n, dim, coords })
    }

    /// Rows of a rank-2 tensor as points.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.rank() != 2 {
            return Err(Error::InvalidShape {
                op: "PointCloud::from_tensor",
                shape: t.shape().to_vec(),
                reason: "expected (n_points, ambient_dim)".into(),
            });
        }
        Self::new(t.shape()[0], t.shape()[1], t.data().to_vec())
    }

    pub fn n_points(&self) -> usize {
        self.n
    }

    pub fn ambient_dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    /// Apply a dim x dim linear map (row-major) to every point.
    pub fn transform(&self, matrix: &[f64]) -> Result<PointCloud> {
        if matrix.len() != self.dim * self.dim {
            return Err(Error::invalid_arg("PointCloud::transform", "matrix size mismatch"));
        }
        let mut coords = vec![0.0; self.coords.len()];
        for i in 0..self.n {
            let src = self.row(i);
            let dst = &mut coords[i * self.dim..(i + 1) * self.dim];
            for (r, slot) in dst.iter_mut().enumerate() {
                let mut s = 0.0;
                for c in 0..self.dim {
                    s += matrix[r * self.dim + c] * src[c];
                }
                *slot = s;
            }
        }
        PointCloud::new(self.n, self.dim, coords)
    }

    pub fn scale(&self, factor: f64) -> PointCloud {
        PointCloud {
            n: self.n,
            dim: self.dim,
            coords: self.coords.iter().map(|v| v * factor).collect(),
        }
    }

    /// For every point, the `order` smallest distances to other points,
    /// ascending. Exact brute force; deterministic.
    fn sorted_neighbor_distances(&self, order: usize) -> Result<Vec<Vec<f64>>> {
        if order >= self.n {
            return Err(Error::invalid_arg(
                "neighbor_distances",
                format!("order {order} needs more than {} points", self.n),
            ));
        }
        let mut result = Vec::with_capacity(self.n);
        let mut dists = vec![0.0f64; self.n - 1];
        for i in 0..self.n {
            let pi = self.row(i);
            let mut slot = 0;
            for j in 0..self.n {
                if j == i {
                    continue;
                }
                let pj = self.row(j);
                let mut s = 0.0;
                for d in 0..self.dim {
                    let diff = pi[d] - pj[d];
                    s += diff * diff;
                }
                dists[slot] = s;
                slot += 1;
            }
            dists.select_nth_unstable_by(order - 1, |a, b| a.partial_cmp(b).expect("finite distances"));
            let mut nearest: Vec<f64> = dists[..order].iter().map(|d| d.sqrt()).collect();
            nearest.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
            result.push(nearest);
        }
        Ok(result)
    }
}

/// Outcome of a Gride fit.
#[derive(Clone, Copy, Debug)]
pub struct GrideReport {
    pub d_hat: f64,
    /// Points contributing to the likelihood.
    pub n_used: usize,
    /// Points dropped because of exactly tied neighbor distances (mu = 1).
    pub n_dropped: usize,
}

fn log_ratios(dists: &[Vec<f64>], k: usize) -> Result<(Vec<f64>, usize)> {
    let mut log_mu = Vec::with_capacity(dists.len());
    let mut dropped = 0usize;
    for row in dists {
        let r_k = row[k - 1];
        let r_2k = row[2 * k - 1];
        if r_k == 0.0 {
            return Err(Error::Degenerate {
                op: "gride_estimate",
                reason: "duplicate points (zero neighbor distance)".into(),
            });
        }
        let mu = r_2k / r_k;
        if mu == 1.0 {
            // exactly tied distances carry no information about d; dropping
            // keeps the run deterministic where jitter would not
            dropped += 1;
        } else {
            log_mu.push(mu.ln());
        }
    }
    if log_mu.is_empty() {
        return Err(Error::Degenerate {
            op: "gride_estimate",
            reason: "all neighbor-distance ratios are exactly 1".into(),
        });
    }
    Ok((log_mu, dropped))
}

fn log_likelihood(d: f64, log_mu: &[f64], k: usize) -> f64 {
    let kf = k as f64;
    let mut l = 0.0;
    for &lm in log_mu {
        l += d.ln() - (d * kf + 1.0) * lm;
        if k > 1 {
            l += (kf - 1.0) * (-(-d * lm).exp()).ln_1p();
        }
    }
    l
}

fn dlog_likelihood(d: f64, log_mu: &[f64], k: usize) -> f64 {
    let kf = k as f64;
    let mut g = 0.0;
    for &lm in log_mu {
        g += 1.0 / d - kf * lm;
        if k > 1 {
            g += (kf - 1.0) * lm / ((d * lm).exp() - 1.0);
        }
    }
    g
}

fn d2log_likelihood(d: f64, log_mu: &[f64], k: usize) -> f64 {
    let kf = k as f64;
    let mut h = 0.0;
    for &lm in log_mu {
        h -= 1.0 / (d * d);
        if k > 1 {
            let e = (d * lm).exp();
            let denom = e - 1.0;
            h -= (kf - 1.0) * lm * lm * e / (denom * denom);
        }
    }
    h
}

/// Maximize the Gride likelihood over d in [1e-3, d_max] by golden-section
/// search to bracket width 1e-8, then polish to a stationary point with
/// safeguarded Newton steps.
pub fn maximize_likelihood(log_mu: &[f64], k: usize, d_max: f64) -> Result<f64> {
    let lo = 1e-3;
    let hi = d_max;
    if hi <= lo {
        return Err(Error::BracketFailure(format!("empty bracket [{lo}, {hi}]")));
    }
    let inv_phi = (5.0f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = log_likelihood(c, log_mu, k);
    let mut fd = log_likelihood(d, log_mu, k);
    while b - a > 1e-8 {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = log_likelihood(c, log_mu, k);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = log_likelihood(d, log_mu, k);
        }
    }
    let mut x = 0.5 * (a + b);
    for _ in 0..64 {
        let g = dlog_likelihood(x, log_mu, k);
        let h = d2log_likelihood(x, log_mu, k);
        if h >= 0.0 || !g.is_finite() || !h.is_finite() {
            break;
        }
        let next = (x - g / h).clamp(lo, hi);
        if (next - x).abs() <= 1e-14 * x.max(1.0) {
            x = next;
            break;
        }
        x = next;
    }
    // a maximum pinned to the bracket edge with an outward slope means the
    // true maximizer is outside the allowed range
    if x <= lo + 1e-6 && dlog_likelihood(lo, log_mu, k) < 0.0 {
        return Err(Error::BracketFailure(format!("likelihood decreasing at lower bound {lo}")));
    }
    if x >= hi - 1e-6 && dlog_likelihood(hi, log_mu, k) > 0.0 {
        return Err(Error::BracketFailure(format!("likelihood increasing at upper bound {hi}")));
    }
    Ok(x)
}

fn estimate_from_dists(dists: &[Vec<f64>], k: usize, ambient_dim: usize) -> Result<GrideReport> {
    let (log_mu, dropped) = log_ratios(dists, k)?;
    let d_hat = maximize_likelihood(&log_mu, k, 2.0 * ambient_dim as f64)?;
    Ok(GrideReport {
        d_hat,
        n_used: log_mu.len(),
        n_dropped: dropped,
    })
}

/// Gride estimate with full diagnostics.
pub fn gride_report(cloud: &PointCloud, k: usize) -> Result<GrideReport> {
    if k < 1 {
        return Err(Error::invalid_arg("gride_estimate", "k must be >= 1"));
    }
    if cloud.n_points() <= 2 * k + 1 {
        return Err(Error::invalid_arg(
            "gride_estimate",
            format!("need more than {} points for k = {k}", 2 * k + 1),
        ));
    }
    let dists = cloud.sorted_neighbor_distances(2 * k)?;
    estimate_from_dists(&dists, k, cloud.ambient_dim())
}

/// Maximum-likelihood intrinsic dimension from 2k/k neighbor distance ratios.
pub fn gride_estimate(cloud: &PointCloud, k: usize) -> Result<f64> {
    Ok(gride_report(cloud, k)?.d_hat)
}

/// Closed-form k = 1 estimate d = n / sum ln(r_2 / r_1); tied ratios are
/// dropped exactly as in the likelihood path.
pub fn twonn_closed_form(cloud: &PointCloud) -> Result<f64> {
    if cloud.n_points() <= 3 {
        return Err(Error::invalid_arg("twonn", "need more than 3 points"));
    }
    let dists = cloud.sorted_neighbor_distances(2)?;
    let (log_mu, _) = log_ratios(&dists, 1)?;
    let sum: f64 = log_mu.iter().sum();
    if sum <= 0.0 {
        return Err(Error::Degenerate {
            op: "twonn",
            reason: "non-positive sum of log ratios".into(),
        });
    }
    Ok(log_mu.len() as f64 / sum)
}

/// One Gride estimate per neighbor order in `ks` (ascending), sharing a
/// single neighbor-distance pass.
pub fn id_profile(cloud: &PointCloud, ks: &[usize]) -> Result<Vec<f64>> {
    if ks.is_empty() {
        return Err(Error::invalid_arg("id_profile", "ks must be nonempty"));
    }
    if ks.windows(2).any(|w| w[0] >= w[1]) || ks[0] < 1 {
        return Err(Error::invalid_arg("id_profile", "ks must be ascending and >= 1"));
    }
    let k_max = *ks.last().expect("nonempty");
    if cloud.n_points() < 4 * k_max + 1 {
        return Err(Error::invalid_arg(
            "id_profile",
            format!("need at least {} points for k_max = {k_max}", 4 * k_max + 1),
        ));
    }
    let dists = cloud.sorted_neighbor_distances(2 * k_max)?;
    ks.iter()
        .map(|&k| Ok(estimate_from_dists(&dists, k, cloud.ambient_dim())?.d_hat))
        .collect()
}

/// Random orthogonal matrix (row-major, dim x dim) via Gram-Schmidt on a
/// Gaussian matrix.
pub fn random_orthogonal(dim: usize, rng: &mut SplitRng) -> Vec<f64> {
    let mut m = vec![0.0f64; dim * dim];
    for v in m.iter_mut() {
        *v = rng.next_gaussian();
    }
    for r in 0..dim {
        for prev in 0..r {
            let mut dot = 0.0;
            for c in 0..dim {
                dot += m[r * dim + c] * m[prev * dim + c];
            }
            for c in 0..dim {
                m[r * dim + c] -= dot * m[prev * dim + c];
            }
        }
        let norm: f64 = m[r * dim..(r + 1) * dim].iter().map(|v| v * v).sum::<f64>().sqrt();
        debug_assert!(norm > 1e-12, "degenerate Gram-Schmidt draw");
        for c in 0..dim {
            m[r * dim + c] /= norm;
        }
    }
    m
}

/// Uniform samples from a d-dimensional unit hypercube embedded in the first
/// d coordinates of an `ambient`-dimensional space, then rotated.
pub fn hypercube_cloud(n: usize, d: usize, ambient: usize, rng: &mut SplitRng) -> Result<PointCloud> {
    assert!(d <= ambient);
    let rotation = random_orthogonal(ambient, rng);
    let mut coords = vec![0.0f64; n * ambient];
    for i in 0..n {
        let mut point = vec![0.0f64; ambient];
        for slot in point.iter_mut().take(d) {
            *slot = rng.next_f64();
        }
        for (r, slot) in coords[i * ambient..(i + 1) * ambient].iter_mut().enumerate() {
            let mut s = 0.0;
            for c in 0..ambient {
                s += rotation[r * ambient + c] * point[c];
            }
            *slot = s;
        }
    }
    PointCloud::new(n, ambient, coords)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_log_ratio_gives_dimension_one() {
        // all mu_i = e at k = 1: d = n / (n * 1) = 1
        let log_mu = vec![1.0; 50];
        let d = maximize_likelihood(&log_mu, 1, 20.0).unwrap();
        assert!((d - 1.0).abs() < 1e-9, "got {d}");
    }

    #[test]
    fn optimizer_matches_twonn_closed_form() {
        for seed in 0..10u64 {
            let mut rng = SplitRng::new(seed, 100);
            let cloud = hypercube_cloud(400, 3, 6, &mut rng).unwrap();
            let closed = twonn_closed_form(&cloud).unwrap();
            let generic = gride_estimate(&cloud, 1).unwrap();
            assert!(
                (closed - generic).abs() < 1e-6,
                "seed {seed}: closed {closed} vs optimizer {generic}"
            );
        }
    }

    #[test]
    fn stationarity_at_reported_maximum() {
        let mut rng = SplitRng::new(4, 0);
        let cloud = hypercube_cloud(500, 4, 8, &mut rng).unwrap();
        for &k in &[1usize, 2, 4, 8] {
            let dists = cloud.sorted_neighbor_distances(2 * k).unwrap();
            let (log_mu, _) = log_ratios(&dists, k).unwrap();
            let d_hat = maximize_likelihood(&log_mu, k, 16.0).unwrap();
            let g = dlog_likelihood(d_hat, &log_mu, k);
            let n = log_mu.len() as f64;
            assert!(g.abs() < 1e-6 * n, "k={k}: |dl/dd| = {} at d = {d_hat}", g.abs());
        }
    }

    #[test]
    fn rigid_motion_and_scale_invariance() {
        let mut rng = SplitRng::new(12, 3);
        let cloud = hypercube_cloud(300, 3, 7, &mut rng).unwrap();
        let rotation = random_orthogonal(7, &mut rng);
        let transformed = cloud.transform(&rotation).unwrap().scale(3.7);
        for &k in &[1usize, 4] {
            let d0 = gride_estimate(&cloud, k).unwrap();
            let d1 = gride_estimate(&transformed, k).unwrap();
            assert!((d0 - d1).abs() < 1e-9, "k={k}: {d0} vs {d1}");
        }
    }

    #[test]
    fn recovers_manifold_dimension() {
        let mut rng = SplitRng::new(7, 0);
        let cloud = hypercube_cloud(1500, 4, 12, &mut rng).unwrap();
        for &k in &[2usize, 4, 8] {
            let d = gride_estimate(&cloud, k).unwrap();
            assert!((3.4..=4.6).contains(&d), "k={k}: d_hat = {d}");
        }
    }

    #[test]
    fn tied_distances_are_dropped_not_fatal() {
        // 1-D integer lattice: interior points have r_1 = r_2 = 1 exactly
        let n = 12;
        let coords: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let cloud = PointCloud::new(n, 1, coords).unwrap();
        let report = gride_report(&cloud, 1).unwrap();
        assert!(report.n_dropped > 0);
        assert_eq!(report.n_used + report.n_dropped, n);
        assert!(report.d_hat.is_finite());
    }

    #[test]
    fn duplicate_points_error() {
        let coords = vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 2.0, 5.0];
        let cloud = PointCloud::new(4, 2, coords).unwrap();
        assert!(matches!(gride_estimate(&cloud, 1), Err(Error::Degenerate { .. })));
    }

    #[test]
    fn profile_matches_single_estimates_and_validates() {
        let mut rng = SplitRng::new(3, 9);
        let cloud = hypercube_cloud(80, 2, 5, &mut rng).unwrap();
        let profile = id_profile(&cloud, &[2, 4]).unwrap();
        assert_eq!(profile.len(), 2);
        assert_eq!(profile[0], gride_estimate(&cloud, 2).unwrap());
        assert!(id_profile(&cloud, &[]).is_err());
        assert!(id_profile(&cloud, &[4, 2]).is_err());
        // 4 * 32 + 1 > 80
        assert!(id_profile(&cloud, &[2, 32]).is_err());
    }
}

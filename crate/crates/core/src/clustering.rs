//! Prototype learning for the cluster-level contrastive loss.
//!
//! Users and items are clustered separately with Lloyd's algorithm from a
//! k-means++ start. Membership is either hard (one-hot at the nearest
//! prototype) or soft (softmax over negative squared distances), and two nodes
//! share a prototype with probability `Σ_k P[a,k]·P[b,k]`.

use std::io::Write;

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{axpy, DenseMatrix};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AssignMode {
    Hard,
    Soft { temperature: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansConfig {
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub centroids: DenseMatrix,
    pub labels: Vec<usize>,
    /// Within-cluster sum of squares after every assignment step.
    pub objective: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid for each point (lowest index on ties) and its squared distance.
fn nearest(points: &DenseMatrix, centroids: &DenseMatrix) -> (Vec<usize>, Vec<f64>) {
    let mut labels = Vec::with_capacity(points.rows());
    let mut dists = Vec::with_capacity(points.rows());
    for r in 0..points.rows() {
        let p = points.row(r);
        let mut best = (0, f64::INFINITY);
        for k in 0..centroids.rows() {
            let d = sq_dist(p, centroids.row(k));
            if d < best.1 {
                best = (k, d);
            }
        }
        labels.push(best.0);
        dists.push(best.1);
    }
    (labels, dists)
}

fn kmeans_pp_init<R: Rng + ?Sized>(points: &DenseMatrix, k: usize, rng: &mut R) -> DenseMatrix {
    let n = points.rows();
    let mut chosen = Vec::with_capacity(k);
    chosen.push(rng.random_range(0..n));
    let mut d2: Vec<f64> = (0..n)
        .map(|r| sq_dist(points.row(r), points.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if acc > target && w > 0.0 {
                    pick = Some(i);
                    break;
                }
            }
            // rounding can leave target just past the last positive weight
            pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            // fewer distinct points than clusters
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
        for (r, slot) in d2.iter_mut().enumerate() {
            *slot = slot.min(sq_dist(points.row(r), points.row(next)));
        }
    }
    points.gather_rows(&chosen)
}

/// Lloyd's k-means from a k-means++ start.
///
/// Stops once no centroid moves by `tol` or more (Euclidean), or after
/// `max_iters` updates. A cluster that loses all its points is re-seeded at
/// the point farthest from its current centroid.
pub fn kmeans_fit(points: &DenseMatrix, k: usize, seed: u64, cfg: &KMeansConfig) -> Result<KMeansFit> {
    let n = points.rows();
    if k == 0 || k > n {
        return Err(Error::Config(format!("cannot form {k} clusters from {n} points")));
    }
    points.check_finite("k-means input")?;
    let mut rng = rng::substream(seed, Stream::Kmeans);
    let mut centroids = kmeans_pp_init(points, k, &mut rng);
    let d = points.cols();
    let mut objective = Vec::new();
    let mut iterations = 0;
    let (mut labels, mut dists) = nearest(points, &centroids);
    objective.push(dists.iter().sum());
    while iterations < cfg.max_iters {
        iterations += 1;
        let mut sums = DenseMatrix::zeros(k, d);
        let mut counts = vec![0usize; k];
        for (r, &l) in labels.iter().enumerate() {
            axpy(sums.row_mut(l), 1.0, points.row(r));
            counts[l] += 1;
        }
        let mut taken = vec![false; n];
        let mut shift: f64 = 0.0;
        for c in 0..k {
            let new: Vec<f64> = if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                sums.row(c).iter().map(|s| s * inv).collect()
            } else {
                let far = (0..n)
                    .filter(|&r| !taken[r])
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .expect("k <= n leaves a free point");
                taken[far] = true;
                dists[far] = 0.0;
                points.row(far).to_vec()
            };
            shift = shift.max(sq_dist(&new, centroids.row(c)).sqrt());
            centroids.row_mut(c).copy_from_slice(&new);
        }
        (labels, dists) = nearest(points, &centroids);
        objective.push(dists.iter().sum());
        if shift < cfg.tol {
            break;
        }
    }
    Ok(KMeansFit {
        centroids,
        labels,
        objective,
        iterations,
    })
}

/// Membership probabilities, one row per point.
pub fn assign_probs(points: &DenseMatrix, centroids: &DenseMatrix, mode: AssignMode) -> Result<DenseMatrix> {
    if points.cols() != centroids.cols() {
        return Err(Error::Shape(format!(
            "points have {} dims, centroids {}",
            points.cols(),
            centroids.cols()
        )));
    }
    let k = centroids.rows();
    let mut out = DenseMatrix::zeros(points.rows(), k);
    match mode {
        AssignMode::Hard => {
            let (labels, _) = nearest(points, centroids);
            for (r, l) in labels.into_iter().enumerate() {
                out.set(r, l, 1.0);
            }
        }
        AssignMode::Soft { temperature } => {
            if !(temperature > 0.0) {
                return Err(Error::Config("soft assignment temperature must be positive".into()));
            }
            for r in 0..points.rows() {
                let logits: Vec<f64> = (0..k)
                    .map(|c| -sq_dist(points.row(r), centroids.row(c)) / temperature)
                    .collect();
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                for (o, e) in out.row_mut(r).iter_mut().zip(exps) {
                    *o = e / z;
                }
            }
        }
    }
    Ok(out)
}

/// `p(a,b) = Σ_k P[a,k]·P[b,k]` for every `a ∈ idx_a`, `b ∈ idx_b`.
pub fn same_cluster_prob(probs: &DenseMatrix, idx_a: &[usize], idx_b: &[usize]) -> Result<DenseMatrix> {
    let n = probs.rows();
    if let Some(&bad) = idx_a.iter().chain(idx_b).find(|&&i| i >= n) {
        return Err(Error::Config(format!("index {bad} out of range for {n} rows")));
    }
    probs.gather_rows(idx_a).matmul_transposed(&probs.gather_rows(idx_b))
}

/// Cluster membership of one node type.
#[derive(Debug, Clone)]
pub struct Assignment {
    pub centroids: DenseMatrix,
    pub probs: DenseMatrix,
    /// Most probable prototype of each node.
    pub labels: Vec<usize>,
    pub mode: AssignMode,
}

impl Assignment {
    pub fn fit(points: &DenseMatrix, k: usize, mode: AssignMode, seed: u64, cfg: &KMeansConfig) -> Result<Self> {
        let fit = kmeans_fit(points, k, seed, cfg)?;
        let probs = assign_probs(points, &fit.centroids, mode)?;
        let labels = match mode {
            AssignMode::Hard => fit.labels,
            AssignMode::Soft { .. } => (0..probs.rows())
                .map(|r| {
                    let row = probs.row(r);
                    (0..row.len()).fold(0, |b, c| if row[c] > row[b] { c } else { b })
                })
                .collect(),
        };
        Ok(Self {
            centroids: fit.centroids,
            probs,
            labels,
            mode,
        })
    }

    /// Same-prototype probabilities among `idx`; in hard mode this is the
    /// label-equality indicator.
    pub fn same_cluster(&self, idx: &[usize]) -> Result<DenseMatrix> {
        match self.mode {
            AssignMode::Hard => {
                let n = self.labels.len();
                if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
                    return Err(Error::Config(format!("index {bad} out of range for {n} rows")));
                }
                let labels: Vec<usize> = idx.iter().map(|&i| self.labels[i]).collect();
                Ok(DenseMatrix::from_fn(idx.len(), idx.len(), |a, b| {
                    if labels[a] == labels[b] {
                        1.0
                    } else {
                        0.0
                    }
                }))
            }
            AssignMode::Soft { .. } => same_cluster_prob(&self.probs, idx, idx),
        }
    }

    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.centroids.rows()];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

/// User and item prototypes.
#[derive(Debug, Clone)]
pub struct ClusterModel {
    pub users: Assignment,
    pub items: Assignment,
}

impl ClusterModel {
    #[allow(clippy::too_many_arguments)]
    pub fn fit(
        user_points: &DenseMatrix,
        item_points: &DenseMatrix,
        k_users: usize,
        k_items: usize,
        mode: AssignMode,
        seed: u64,
        cfg: &KMeansConfig,
    ) -> Result<Self> {
        Ok(Self {
            users: Assignment::fit(user_points, k_users, mode, seed, cfg)?,
            // offset the item seed so both sides do not start from the same draws
            items: Assignment::fit(item_points, k_items, mode, seed.wrapping_add(1), cfg)?,
        })
    }

    /// Writes centroids and label histograms as plain text.
    pub fn dump(&self, out: &mut impl Write) -> std::io::Result<()> {
        for (name, a) in [("user", &self.users), ("item", &self.items)] {
            writeln!(out, "# {name} prototypes: {}", a.centroids.rows())?;
            for (k, count) in a.histogram().into_iter().enumerate() {
                let c: Vec<String> = a.centroids.row(k).iter().map(|v| format!("{v:.6}")).collect();
                writeln!(out, "{name} {k} size={count} centroid={}", c.join(","))?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn blobs() -> (DenseMatrix, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut rows = Vec::new();
        let mut truth = Vec::new();
        for k in 0..40 {
            let c = if k % 2 == 0 { 0.0 } else { 100.0 };
            let x: f64 = rng.sample(StandardNormal);
            let y: f64 = rng.sample(StandardNormal);
            rows.push(vec![c + 0.1 * x, c + 0.1 * y]);
            truth.push(k % 2);
        }
        (DenseMatrix::from_rows(&rows).unwrap(), truth)
    }

    #[test]
    fn separated_blobs_are_recovered() {
        let (p, truth) = blobs();
        let fit = kmeans_fit(&p, 2, 3, &KMeansConfig::default()).unwrap();
        let flip = fit.labels[0] != truth[0];
        for (l, t) in fit.labels.iter().zip(&truth) {
            assert_eq!(*l, if flip { 1 - t } else { *t });
        }
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let (p, _) = blobs();
        let fit = kmeans_fit(&p, 1, 0, &KMeansConfig::default()).unwrap();
        let mean: Vec<f64> = p.column_sums().iter().map(|s| s / p.rows() as f64).collect();
        for (a, b) in fit.centroids.row(0).iter().zip(&mean) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fitting_is_seeded() {
        let (p, _) = blobs();
        let a = kmeans_fit(&p, 5, 9, &KMeansConfig::default()).unwrap();
        let b = kmeans_fit(&p, 5, 9, &KMeansConfig::default()).unwrap();
        assert_eq!(a.centroids, b.centroids);
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn too_many_clusters_is_a_config_error() {
        let p = DenseMatrix::zeros(3, 2);
        assert!(matches!(kmeans_fit(&p, 4, 0, &KMeansConfig::default()), Err(Error::Config(_))));
    }

    #[test]
    fn repeated_locations_become_centroids() {
        let locs = [[0.0, 0.0], [5.0, 1.0], [-3.0, 7.0]];
        let rows: Vec<Vec<f64>> = (0..30).map(|k| locs[k % 3].to_vec()).collect();
        let p = DenseMatrix::from_rows(&rows).unwrap();
        let fit = kmeans_fit(&p, 3, 4, &KMeansConfig::default()).unwrap();
        for loc in &locs {
            assert!((0..3).any(|k| sq_dist(fit.centroids.row(k), loc) < 1e-24));
        }
    }

    #[test]
    fn assignment_examples() {
        let c = DenseMatrix::from_rows(&[vec![0.0], vec![10.0]]).unwrap();
        let p = DenseMatrix::from_rows(&[vec![10.0]]).unwrap();
        assert_eq!(assign_probs(&p, &c, AssignMode::Hard).unwrap().row(0), &[0.0, 1.0]);

        let soft = assign_probs(&p, &c, AssignMode::Soft { temperature: 1e9 }).unwrap();
        assert!(soft.row(0).iter().all(|v| (v - 0.5).abs() < 1e-6));

        let pts = DenseMatrix::from_rows(&[vec![0.0], vec![10.0]]).unwrap();
        let soft = assign_probs(&pts, &c, AssignMode::Soft { temperature: 1.0 }).unwrap();
        // off-centroid mass is exp(-100) ≈ 3.7e-44
        assert!((soft.get(0, 0) - 1.0).abs() < 1e-20 && soft.get(0, 1) < 1e-20);
        assert!((soft.get(1, 1) - 1.0).abs() < 1e-20 && soft.get(1, 0) < 1e-20);
    }

    #[test]
    fn same_cluster_examples() {
        let p = DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let s = same_cluster_prob(&p, &[0, 0], &[1, 2]).unwrap();
        assert_eq!(s.as_slice(), &[1.0, 0.0, 1.0, 0.0]);
        let k = 4;
        let u = DenseMatrix::filled(2, k, 1.0 / k as f64);
        let s = same_cluster_prob(&u, &[0], &[1]).unwrap();
        assert!((s.get(0, 0) - 1.0 / k as f64).abs() < 1e-15);
        assert!(same_cluster_prob(&u, &[2], &[0]).is_err());
    }

    #[test]
    fn hard_fast_path_matches_probability_product() {
        let (p, _) = blobs();
        let a = Assignment::fit(&p, 3, AssignMode::Hard, 2, &KMeansConfig::default()).unwrap();
        let idx = [0, 3, 5, 6, 11, 39];
        assert_eq!(a.same_cluster(&idx).unwrap(), same_cluster_prob(&a.probs, &idx, &idx).unwrap());
    }

    fn arb_points() -> impl Strategy<Value = (DenseMatrix, usize, u64)> {
        (4usize..40, 1usize..4, 1usize..6, 0u64..1000).prop_flat_map(|(n, d, k, seed)| {
            proptest::collection::vec(-5.0f64..5.0, n * d)
                .prop_map(move |v| (DenseMatrix::new(n, d, v).unwrap(), k.min(n), seed))
        })
    }

    proptest! {
        #[test]
        fn lloyd_objective_never_increases((p, k, seed) in arb_points()) {
            let fit = kmeans_fit(&p, k, seed, &KMeansConfig::default()).unwrap();
            for w in fit.objective.windows(2) {
                prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12, "{:?}", fit.objective);
            }
        }

        #[test]
        fn probabilities_are_well_formed((p, k, seed) in arb_points(), temp in 0.05f64..20.0) {
            for mode in [AssignMode::Hard, AssignMode::Soft { temperature: temp }] {
                let a = Assignment::fit(&p, k, mode, seed, &KMeansConfig::default()).unwrap();
                for r in 0..a.probs.rows() {
                    let row = a.probs.row(r);
                    prop_assert!(row.iter().all(|&v| v >= 0.0));
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                    if mode == AssignMode::Hard {
                        prop_assert_eq!(row.iter().filter(|&&v| v == 1.0).count(), 1);
                    }
                }
                let idx: Vec<usize> = (0..p.rows()).collect();
                let s = same_cluster_prob(&a.probs, &idx, &idx).unwrap();
                for x in 0..idx.len() {
                    for y in 0..idx.len() {
                        let v = s.get(x, y);
                        prop_assert!((-1e-15..=1.0 + 1e-12).contains(&v));
                        prop_assert_eq!(v, s.get(y, x));
                    }
                }
            }
        }
    }
}

//! Training objectives with hand-derived gradients.
//!
//! Every loss returns its value together with gradients keyed by the name of
//! the input they differentiate:
//!
//! | loss                    | keys                  |
//! |-------------------------|-----------------------|
//! | [`bpr_reconstruction`]  | `z`                   |
//! | [`kl_regularizer`]      | `mu`, `sigma`         |
//! | [`node_infonce`]        | `view1`, `view2`      |
//! | [`cluster_contrastive`] | `view1`, `view2`      |
//! | [`total_objective`]     | all of the above plus `embeddings` |
//!
//! Contrastive losses take raw (unnormalized) views, normalize rows
//! internally, and return gradients with respect to the raw rows.

use std::collections::BTreeMap;

use crate::dataset::TrainingTriple;
use crate::error::{Error, Result};
use crate::linalg::{dot, row_l2_normalize, DenseMatrix, NormalizedRows, NORMALIZE_EPS};

pub const Z: &str = "z";
pub const MU: &str = "mu";
pub const SIGMA: &str = "sigma";
pub const VIEW1: &str = "view1";
pub const VIEW2: &str = "view2";
pub const EMBEDDINGS: &str = "embeddings";

/// Anchors of the cluster loss whose same-prototype mass is below this are skipped.
pub const MIN_POSITIVE_MASS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

/// Weights and temperatures of the joint objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Weight of the contrastive part.
    pub alpha: f64,
    /// Weight of the cluster-level term inside the contrastive part.
    pub gamma: f64,
    /// L2 penalty on the node embeddings.
    pub lambda: f64,
    pub tau1: f64,
    pub tau2: f64,
    pub kl_weight: f64,
    pub reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            gamma: 0.4,
            lambda: 1e-4,
            tau1: 0.2,
            tau2: 0.13,
            kl_weight: 1.0,
            reduction: Reduction::Sum,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        for (name, v) in [
            ("alpha", self.alpha),
            ("gamma", self.gamma),
            ("lambda", self.lambda),
            ("kl_weight", self.kl_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                bad.push(name);
            }
        }
        for (name, v) in [("tau1", self.tau1), ("tau2", self.tau2)] {
            if !(v > 0.0 && v.is_finite()) {
                bad.push(name);
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("out of range: {}", bad.join(", "))))
        }
    }
}

/// Gradients keyed by input name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradSet {
    entries: BTreeMap<&'static str, DenseMatrix>,
}

impl GradSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: &'static str, grad: DenseMatrix) {
        self.entries.insert(key, grad);
    }

    pub fn get(&self, key: &str) -> Option<&DenseMatrix> {
        self.entries.get(key)
    }

    pub fn remove(&mut self, key: &str) -> Option<DenseMatrix> {
        self.entries.remove(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.entries.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'static str, &DenseMatrix)> {
        self.entries.iter().map(|(k, v)| (*k, v))
    }

    /// `self[key] += alpha · grad`, inserting if absent.
    pub fn accumulate(&mut self, key: &'static str, alpha: f64, grad: &DenseMatrix) -> Result<()> {
        match self.entries.get_mut(key) {
            Some(g) => g.add_scaled(alpha, grad),
            None => {
                self.entries.insert(key, grad.scale(alpha));
                Ok(())
            }
        }
    }

    pub fn merge_scaled(&mut self, other: &GradSet, alpha: f64) -> Result<()> {
        for (k, g) in other.iter() {
            self.accumulate(k, alpha, g)?;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().all(DenseMatrix::is_finite)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grads: GradSet,
}

impl LossValue {
    pub fn zero() -> Self {
        Self {
            value: 0.0,
            grads: GradSet::new(),
        }
    }
}

/// `ln(1 + eˣ)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row indices of one BPR triple inside the matrix handed to
/// [`bpr_reconstruction`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowTriple {
    pub user: usize,
    pub positive: usize,
    pub negative: usize,
}

impl RowTriple {
    /// Rows in the full `(M+N)`-node matrix, where items sit after users.
    pub fn from_global(t: &TrainingTriple, n_users: usize) -> Self {
        Self {
            user: t.user,
            positive: n_users + t.positive,
            negative: n_users + t.negative,
        }
    }
}

fn reduce_scale(reduction: Reduction, count: usize) -> f64 {
    match reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / count.max(1) as f64,
    }
}

/// `Σ softplus(⟨z_a, z_j⟩ − ⟨z_a, z_i⟩)`, i.e. `−log σ(r̂_ai − r̂_aj)` per triple.
pub fn bpr_reconstruction(z: &DenseMatrix, triples: &[RowTriple], reduction: Reduction) -> Result<LossValue> {
    if triples.is_empty() {
        return Err(Error::Config("BPR needs at least one triple".into()));
    }
    let n = z.rows();
    if let Some(t) = triples
        .iter()
        .find(|t| t.user >= n || t.positive >= n || t.negative >= n)
    {
        return Err(Error::Shape(format!("triple {t:?} outside {n} rows")));
    }
    let scale = reduce_scale(reduction, triples.len());
    let d = z.cols();
    let mut grad = DenseMatrix::zeros(n, d);
    let mut value = 0.0;
    let mut diff = vec![0.0; d];
    for t in triples {
        let (za, zi, zj) = (z.row(t.user), z.row(t.positive), z.row(t.negative));
        let margin = dot(za, zi) - dot(za, zj);
        value += softplus(-margin);
        // d/dmargin of softplus(-margin)
        let g = -sigmoid(-margin) * scale;
        for k in 0..d {
            diff[k] = zi[k] - zj[k];
        }
        let za = za.to_vec();
        for (x, dk) in grad.row_mut(t.user).iter_mut().zip(&diff) {
            *x += g * dk;
        }
        for (x, a) in grad.row_mut(t.positive).iter_mut().zip(&za) {
            *x += g * a;
        }
        for (x, a) in grad.row_mut(t.negative).iter_mut().zip(&za) {
            *x -= g * a;
        }
    }
    let mut grads = GradSet::new();
    grads.insert(Z, grad);
    Ok(LossValue {
        value: value * scale,
        grads,
    })
}

/// `KL[N(μ, σ²) ‖ N(0, I)] = Σ ½(σ² + μ² − 1 − 2 ln σ)` over every entry.
///
/// Under [`Reduction::Mean`] the sum is divided by the number of rows.
pub fn kl_regularizer(mu: &DenseMatrix, sigma: &DenseMatrix, reduction: Reduction) -> Result<LossValue> {
    if mu.shape() != sigma.shape() {
        return Err(Error::Shape("kl: mu and sigma differ in shape".into()));
    }
    if sigma.as_slice().iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Config("kl: sigma must be strictly positive".into()));
    }
    let scale = reduce_scale(reduction, mu.rows());
    let mut value = 0.0;
    for (&m, &s) in mu.as_slice().iter().zip(sigma.as_slice()) {
        value += 0.5 * (s * s + m * m - 1.0) - s.ln();
    }
    let mut grads = GradSet::new();
    grads.insert(MU, mu.scale(scale));
    grads.insert(SIGMA, sigma.map(|s| (s - 1.0 / s) * scale));
    Ok(LossValue {
        value: value * scale,
        grads,
    })
}

/// Two row-aligned views after L2 normalization, with their cosine
/// similarity matrix `S[a,b] = ⟨ẑ'_a, ẑ''_b⟩`.
#[derive(Debug, Clone)]
pub struct ContrastivePair {
    first: NormalizedRows,
    second: NormalizedRows,
    pub similarity: DenseMatrix,
}

impl ContrastivePair {
    pub fn new(view1: &DenseMatrix, view2: &DenseMatrix) -> Result<Self> {
        if view1.shape() != view2.shape() {
            return Err(Error::Shape(format!(
                "views differ: {:?} vs {:?}",
                view1.shape(),
                view2.shape()
            )));
        }
        let first = row_l2_normalize(view1, NORMALIZE_EPS);
        let second = row_l2_normalize(view2, NORMALIZE_EPS);
        let similarity = first.matrix.matmul_transposed(&second.matrix)?;
        Ok(Self {
            first,
            second,
            similarity,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.similarity.rows()
    }

    /// Gradients with respect to the raw views, given `∂L/∂S`.
    pub fn backward(&self, grad_sim: &DenseMatrix) -> Result<(DenseMatrix, DenseMatrix)> {
        let g1 = grad_sim.matmul(&self.second.matrix)?;
        let g2 = grad_sim.transpose_matmul(&self.first.matrix)?;
        Ok((self.first.backward(&g1)?, self.second.backward(&g2)?))
    }

    /// In-batch InfoNCE value and `∂L/∂S`.
    pub fn node_terms(&self, tau: f64, reduction: Reduction) -> (f64, DenseMatrix) {
        let b = self.batch_size();
        let scale = reduce_scale(reduction, b);
        let mut grad = DenseMatrix::zeros(b, b);
        let mut value = 0.0;
        for a in 0..b {
            let row = self.similarity.row(a);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &s| m.max(s / tau));
            let mut denom = 0.0;
            for &s in row {
                denom += (s / tau - max).exp();
            }
            value += max + denom.ln() - row[a] / tau;
            let g = grad.row_mut(a);
            for (gb, &s) in g.iter_mut().zip(row) {
                *gb = (s / tau - max).exp() / denom * scale / tau;
            }
            g[a] -= scale / tau;
        }
        (value * scale, grad)
    }

    /// Cluster-level value, `∂L/∂S` and the number of skipped anchors.
    pub fn cluster_terms(&self, same: &DenseMatrix, tau: f64, reduction: Reduction) -> Result<(f64, DenseMatrix, usize)> {
        let b = self.batch_size();
        if same.shape() != (b, b) {
            return Err(Error::Shape(format!(
                "same-cluster matrix {:?} for batch of {b}",
                same.shape()
            )));
        }
        let scale = reduce_scale(reduction, b);
        let mut grad = DenseMatrix::zeros(b, b);
        let mut value = 0.0;
        let mut skipped = 0;
        for a in 0..b {
            let row = self.similarity.row(a);
            let p = same.row(a);
            let positive_mass: f64 = (0..b).filter(|&x| x != a).map(|x| p[x]).sum();
            if positive_mass < MIN_POSITIVE_MASS {
                skipped += 1;
                continue;
            }
            let mut max_all = f64::NEG_INFINITY;
            let mut max_pos = f64::NEG_INFINITY;
            for x in (0..b).filter(|&x| x != a) {
                let s = row[x] / tau;
                max_all = max_all.max(s);
                if p[x] > 0.0 {
                    max_pos = max_pos.max(s);
                }
            }
            let (mut den, mut num) = (0.0, 0.0);
            for x in (0..b).filter(|&x| x != a) {
                let s = row[x] / tau;
                den += (s - max_all).exp();
                if p[x] > 0.0 {
                    num += p[x] * (s - max_pos).exp();
                }
            }
            let log_ratio = (max_pos + num.ln()) - (max_all + den.ln());
            value += -log_ratio / positive_mass;
            let g = grad.row_mut(a);
            let coef = -scale / (positive_mass * tau);
            for x in (0..b).filter(|&x| x != a) {
                let s = row[x] / tau;
                let q = if p[x] > 0.0 {
                    p[x] * (s - max_pos).exp() / num
                } else {
                    0.0
                };
                let r = (s - max_all).exp() / den;
                g[x] = coef * (q - r);
            }
        }
        Ok((value * scale, grad, skipped))
    }
}

fn view_grads(pair: &ContrastivePair, grad_sim: &DenseMatrix) -> Result<GradSet> {
    let (g1, g2) = pair.backward(grad_sim)?;
    let mut grads = GradSet::new();
    grads.insert(VIEW1, g1);
    grads.insert(VIEW2, g2);
    Ok(grads)
}

/// Node-level InfoNCE over one side (users or items) of a batch.
///
/// The denominator runs over the whole batch including the positive, so the
/// value is never negative and is exactly 0 for a batch of one.
pub fn node_infonce(view1: &DenseMatrix, view2: &DenseMatrix, tau: f64, reduction: Reduction) -> Result<LossValue> {
    let pair = ContrastivePair::new(view1, view2)?;
    let (value, grad_sim) = pair.node_terms(tau, reduction);
    Ok(LossValue {
        value,
        grads: view_grads(&pair, &grad_sim)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterLoss {
    pub loss: LossValue,
    /// Anchors with no same-prototype partner in the batch.
    pub skipped: usize,
}

/// Cluster-level contrastive loss over one side of a batch.
///
/// `same[a][b]` is the probability that `a` and `b` share a prototype; the
/// diagonal is ignored.
pub fn cluster_contrastive(
    view1: &DenseMatrix,
    view2: &DenseMatrix,
    same: &DenseMatrix,
    tau: f64,
    reduction: Reduction,
) -> Result<ClusterLoss> {
    let pair = ContrastivePair::new(view1, view2)?;
    let (value, grad_sim, skipped) = pair.cluster_terms(same, tau, reduction)?;
    Ok(ClusterLoss {
        loss: LossValue {
            value,
            grads: view_grads(&pair, &grad_sim)?,
        },
        skipped,
    })
}

/// Components entering [`total_objective`]. Absent terms count as zero.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveTerms<'a> {
    pub reconstruction: &'a LossValue,
    pub kl: Option<&'a LossValue>,
    pub node: Option<&'a LossValue>,
    pub cluster: Option<&'a LossValue>,
    /// Node embeddings for the L2 penalty.
    pub embeddings: &'a DenseMatrix,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub reconstruction: f64,
    pub kl: f64,
    pub node: f64,
    pub cluster: f64,
    pub regularization: f64,
    pub total: f64,
}

/// `(bpr + w_kl·kl) + α(node + γ·cluster) + λ‖E⁰‖²` with additively merged gradients.
pub fn total_objective(terms: &ObjectiveTerms<'_>, cfg: &LossConfig) -> Result<(LossValue, LossBreakdown)> {
    let mut grads = GradSet::new();
    let mut parts = LossBreakdown {
        reconstruction: terms.reconstruction.value,
        ..Default::default()
    };
    grads.merge_scaled(&terms.reconstruction.grads, 1.0)?;
    if let Some(kl) = terms.kl {
        parts.kl = kl.value;
        grads.merge_scaled(&kl.grads, cfg.kl_weight)?;
    }
    if let Some(node) = terms.node {
        parts.node = node.value;
        grads.merge_scaled(&node.grads, cfg.alpha)?;
    }
    if let Some(cluster) = terms.cluster {
        parts.cluster = cluster.value;
        grads.merge_scaled(&cluster.grads, cfg.alpha * cfg.gamma)?;
    }
    parts.regularization = terms.embeddings.squared_norm();
    grads.accumulate(EMBEDDINGS, 2.0 * cfg.lambda, terms.embeddings)?;
    parts.total = parts.reconstruction
        + cfg.kl_weight * parts.kl
        + cfg.alpha * (parts.node + cfg.gamma * parts.cluster)
        + cfg.lambda * parts.regularization;
    Ok((
        LossValue {
            value: parts.total,
            grads,
        },
        parts,
    ))
}

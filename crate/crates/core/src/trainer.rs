//! Training loop: batching, prototype refresh, forward/backward through the
//! encoder, Adam updates, periodic evaluation and early stopping.

use std::collections::HashMap;
use std::fmt::{self, Write as _};

use rand::{Rng, SeedableRng};

use crate::clustering::{AssignMode, ClusterModel, KMeansConfig};
use crate::dataset::{build_graph, NormalizedAdjacency, SplitDataset, TrainingTriple, TripleSampler};
use crate::encoder::{sigma_backward, sigma_rows, standard_normal, GraphEncoder, ModelParams, SigmaRows};
use crate::error::{Error, Result};
use crate::evaluator::{self, degree_groups, MetricsReport, GROUP_CUTOFF};
use crate::linalg::DenseMatrix;
use crate::losses::{
    bpr_reconstruction, kl_regularizer, total_objective, ContrastivePair, GradSet, LossBreakdown, LossConfig,
    LossValue, ObjectiveTerms, RowTriple, EMBEDDINGS, MU, SIGMA, VIEW1, VIEW2, Z,
};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Variational inference, twin sampled views, node and cluster losses.
    Vgcl,
    /// Without the cluster-level loss.
    VgclWoC,
    /// Feature-noise augmentation in place of variational sampling.
    VgclWoV,
    /// Plain propagation with BPR only.
    LightGcn,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::LightGcn, Variant::VgclWoV, Variant::VgclWoC, Variant::Vgcl];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Vgcl => "vgcl",
            Variant::VgclWoC => "vgcl_wo_c",
            Variant::VgclWoV => "vgcl_wo_v",
            Variant::LightGcn => "lightgcn",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    /// Whether the variance layer and Gaussian sampling are used.
    pub fn variational(self) -> bool {
        matches!(self, Variant::Vgcl | Variant::VgclWoC)
    }

    pub fn contrastive(self) -> bool {
        self != Variant::LightGcn
    }

    pub fn clustered(self) -> bool {
        matches!(self, Variant::Vgcl | Variant::VgclWoV)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// How the configured initialization scale is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitReading {
    StdDev,
    Variance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClusterRefresh {
    Epoch,
    Batch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub dim: usize,
    pub layers: usize,
    pub include_layer0: bool,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub variant: Variant,
    pub k_users: usize,
    pub k_items: usize,
    pub eps_amplitude: f64,
    pub init_std: f64,
    pub init_reading: InitReading,
    pub eval_every: usize,
    pub early_stop_patience: usize,
    pub cutoffs: Vec<usize>,
    pub loss: LossConfig,
    pub cluster_mode: AssignMode,
    pub cluster_refresh: ClusterRefresh,
    pub kmeans: KMeansConfig,
    /// Test hook: replaces σ by exact zeros so samples equal the means.
    pub freeze_sigma_zero: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            layers: 2,
            include_layer0: false,
            lr: 0.001,
            batch_size: 2048,
            epochs: 100,
            seed: 0,
            variant: Variant::Vgcl,
            k_users: 100,
            k_items: 100,
            eps_amplitude: 0.1,
            init_std: 0.01,
            init_reading: InitReading::StdDev,
            eval_every: 1,
            early_stop_patience: 50,
            cutoffs: vec![10, 20],
            loss: LossConfig::default(),
            cluster_mode: AssignMode::Hard,
            cluster_refresh: ClusterRefresh::Epoch,
            kmeans: KMeansConfig::default(),
            freeze_sigma_zero: false,
        }
    }
}

impl TrainConfig {
    /// Loss weights after the variant switches its inactive parts off.
    pub fn effective_loss(&self) -> LossConfig {
        let mut loss = self.loss;
        match self.variant {
            Variant::Vgcl => {}
            Variant::VgclWoC => loss.gamma = 0.0,
            Variant::VgclWoV => loss.kl_weight = 0.0,
            Variant::LightGcn => {
                loss.alpha = 0.0;
                loss.gamma = 0.0;
                loss.kl_weight = 0.0;
            }
        }
        loss
    }

    pub fn contrastive_active(&self) -> bool {
        self.variant.contrastive() && self.effective_loss().alpha > 0.0
    }

    pub fn cluster_active(&self) -> bool {
        let loss = self.effective_loss();
        self.variant.clustered() && loss.alpha > 0.0 && loss.gamma > 0.0
    }

    /// Standard deviation of the initial embeddings.
    pub fn init_scale(&self) -> f64 {
        match self.init_reading {
            InitReading::StdDev => self.init_std,
            InitReading::Variance => self.init_std.sqrt(),
        }
    }

    /// Every violated constraint, as `key: reason`.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut need = |ok: bool, msg: &str| {
            if !ok {
                out.push(msg.to_string());
            }
        };
        need(self.dim > 0, "dim: must be positive");
        need(self.layers > 0, "layers: must be positive");
        need(self.lr > 0.0 && self.lr.is_finite(), "lr: must be positive");
        need(self.batch_size > 0, "batch_size: must be positive");
        need(self.epochs > 0, "epochs: must be positive");
        need(self.eps_amplitude >= 0.0, "eps_amplitude: must be non-negative");
        need(self.init_std > 0.0, "init_std: must be positive");
        need(self.eval_every > 0, "eval_every: must be positive");
        need(self.early_stop_patience > 0, "early_stop_patience: must be positive");
        need(
            !self.cutoffs.is_empty() && !self.cutoffs.contains(&0),
            "cutoffs: need at least one positive cutoff",
        );
        need(self.kmeans.max_iters > 0, "kmeans_max_iters: must be positive");
        if self.cluster_active() {
            need(self.k_users > 0, "k_users: required when the cluster loss is active");
            need(self.k_items > 0, "k_items: required when the cluster loss is active");
        }
        if let AssignMode::Soft { temperature } = self.cluster_mode {
            need(temperature > 0.0, "cluster_temperature: must be positive");
        }
        if self.freeze_sigma_zero {
            need(
                self.effective_loss().kl_weight == 0.0,
                "kl_weight: must be 0 while sigma is frozen at zero",
            );
        }
        if let Err(Error::Config(msg)) = self.loss.validate() {
            out.push(msg);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// Rows touched by one batch, with triples rewritten in local row numbers.
///
/// Local rows list the batch's distinct users first, then its distinct
/// items, in order of first appearance.
#[derive(Debug, Clone)]
pub struct BatchPlan {
    rows: Vec<usize>,
    triples: Vec<RowTriple>,
    user_rows: Vec<usize>,
    user_ids: Vec<usize>,
    item_rows: Vec<usize>,
    item_ids: Vec<usize>,
}

impl BatchPlan {
    pub fn new(triples: &[TrainingTriple], n_users: usize) -> Self {
        let mut local: HashMap<usize, usize> = HashMap::new();
        let mut rows = Vec::new();
        let mut intern = |node: usize, rows: &mut Vec<usize>| {
            *local.entry(node).or_insert_with(|| {
                rows.push(node);
                rows.len() - 1
            })
        };
        let mut user_rows = Vec::new();
        let mut user_ids = Vec::new();
        for t in triples {
            let before = rows.len();
            let r = intern(t.user, &mut rows);
            if rows.len() > before {
                user_rows.push(r);
                user_ids.push(t.user);
            }
        }
        let mut item_rows = Vec::new();
        let mut item_ids = Vec::new();
        let mut local_triples = Vec::with_capacity(triples.len());
        let mut seen_items = std::collections::HashSet::new();
        for t in triples {
            let p = intern(n_users + t.positive, &mut rows);
            if seen_items.insert(t.positive) {
                item_rows.push(p);
                item_ids.push(t.positive);
            }
            let n = intern(n_users + t.negative, &mut rows);
            let u = intern(t.user, &mut rows);
            local_triples.push(RowTriple {
                user: u,
                positive: p,
                negative: n,
            });
        }
        Self {
            rows,
            triples: local_triples,
            user_rows,
            user_ids,
            item_rows,
            item_ids,
        }
    }

    /// Global node ids of the local rows.
    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn triples(&self) -> &[RowTriple] {
        &self.triples
    }

    /// Distinct users of the batch, as global user ids.
    pub fn users(&self) -> &[usize] {
        &self.user_ids
    }

    /// Distinct positive items of the batch, as global item ids.
    pub fn items(&self) -> &[usize] {
        &self.item_ids
    }
}

/// Randomness consumed by one step, fixed up front so a step can be replayed.
#[derive(Debug, Clone)]
pub enum BatchNoise {
    /// Standard normal draws for the reconstruction sample and both views.
    Gaussian {
        z: DenseMatrix,
        view1: DenseMatrix,
        view2: DenseMatrix,
    },
    /// Seed of the generator that perturbs both augmented passes.
    Augment { seed: u64 },
    None,
}

impl BatchNoise {
    pub fn gaussian<R: Rng + ?Sized>(rows: usize, dim: usize, rng: &mut R) -> Self {
        let z = standard_normal(rows, dim, rng);
        let view1 = standard_normal(rows, dim, rng);
        let view2 = standard_normal(rows, dim, rng);
        BatchNoise::Gaussian { z, view1, view2 }
    }
}

#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub embeddings: DenseMatrix,
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
}

impl ParamGrads {
    pub fn is_finite(&self) -> bool {
        self.embeddings.is_finite() && self.weight.is_finite() && self.bias.iter().all(|b| b.is_finite())
    }
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub breakdown: LossBreakdown,
    pub grads: ParamGrads,
    pub clamped: usize,
    pub cluster_skipped: usize,
    pub forward_passes: usize,
    pub backward_passes: usize,
}

/// Computes the objective and parameter gradients of one batch.
#[derive(Debug)]
pub struct StepEngine<'a> {
    encoder: GraphEncoder<'a>,
    n_users: usize,
    variant: Variant,
    loss: LossConfig,
    contrastive: bool,
    eps_amplitude: f64,
    freeze_sigma_zero: bool,
}

struct ContrastTerms {
    node: Option<LossValue>,
    cluster: Option<LossValue>,
    skipped: usize,
}

impl<'a> StepEngine<'a> {
    pub fn new(cfg: &TrainConfig, adj: &'a NormalizedAdjacency, n_users: usize) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            encoder: GraphEncoder::new(adj, cfg.layers, cfg.include_layer0)?,
            n_users,
            variant: cfg.variant,
            loss: cfg.effective_loss(),
            contrastive: cfg.contrastive_active(),
            eps_amplitude: cfg.eps_amplitude,
            freeze_sigma_zero: cfg.freeze_sigma_zero,
        })
    }

    pub fn encoder(&self) -> &GraphEncoder<'a> {
        &self.encoder
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    /// Node and cluster losses on the user side and the item side, with
    /// gradients scattered back to the batch rows.
    fn contrast(
        &self,
        v1: &DenseMatrix,
        v2: &DenseMatrix,
        plan: &BatchPlan,
        clusters: Option<&ClusterModel>,
    ) -> Result<ContrastTerms> {
        let rows = v1.rows();
        let d = v1.cols();
        // both losses differentiate through the same similarity matrix, so the
        // cluster gradient is folded into `node.grads` pre-scaled by gamma and
        // `cluster` carries only its value
        let mut node = LossValue::zero();
        let mut cluster = clusters.map(|_| LossValue::zero());
        let mut skipped = 0;
        for g in [VIEW1, VIEW2] {
            node.grads.insert(g, DenseMatrix::zeros(rows, d));
        }
        let sides = [(&plan.user_rows, &plan.user_ids, true), (&plan.item_rows, &plan.item_ids, false)];
        for (local, ids, is_user) in sides {
            if local.is_empty() {
                continue;
            }
            let pair = ContrastivePair::new(&v1.gather_rows(local), &v2.gather_rows(local))?;
            let (value, mut grad_sim) = pair.node_terms(self.loss.tau1, self.loss.reduction);
            node.value += value;
            if let (Some(model), Some(c)) = (clusters, cluster.as_mut()) {
                let assignment = if is_user { &model.users } else { &model.items };
                let same = assignment.same_cluster(ids)?;
                let (value, cluster_sim, skip) = pair.cluster_terms(&same, self.loss.tau2, self.loss.reduction)?;
                c.value += value;
                skipped += skip;
                grad_sim.add_scaled(self.loss.gamma, &cluster_sim)?;
            }
            let (g1, g2) = pair.backward(&grad_sim)?;
            scatter(&mut node.grads, VIEW1, local, &g1)?;
            scatter(&mut node.grads, VIEW2, local, &g2)?;
        }
        Ok(ContrastTerms {
            node: Some(node),
            cluster,
            skipped,
        })
    }

    /// Objective value and gradients for one batch. `clusters` must be given
    /// whenever the cluster loss is active and is ignored otherwise.
    pub fn step(
        &self,
        params: &ModelParams,
        plan: &BatchPlan,
        noise: &BatchNoise,
        clusters: Option<&ClusterModel>,
    ) -> Result<StepOutput> {
        let fwd0 = self.encoder.forward_passes();
        let bwd0 = self.encoder.backward_passes();
        let clusters = if self.contrastive && self.variant.clustered() && self.loss.gamma > 0.0 {
            Some(clusters.ok_or_else(|| Error::Config("cluster loss active but no prototypes given".into()))?)
        } else {
            None
        };
        let n_rows = plan.rows.len();
        let d = params.dim();

        let prop = self.encoder.propagate(&params.embeddings)?;
        let mu = prop.readout.gather_rows(&plan.rows);

        let mut sigma_state: Option<SigmaRows> = None;
        let mut draws: Option<[&DenseMatrix; 3]> = None;
        let (z, views) = if self.variant.variational() {
            let BatchNoise::Gaussian { z: e0, view1: e1, view2: e2 } = noise else {
                return Err(Error::Config("variational step needs Gaussian noise".into()));
            };
            draws = Some([e0, e1, e2]);
            let sigma = if self.freeze_sigma_zero {
                DenseMatrix::zeros(n_rows, d)
            } else {
                let s = sigma_rows(&mu, &params.weight, &params.bias)?;
                let sigma = s.sigma.clone();
                sigma_state = Some(s);
                sigma
            };
            let sample = |eps: &DenseMatrix| -> Result<DenseMatrix> { mu.add(&sigma.hadamard(eps)?) };
            let z = sample(e0)?;
            let views = if self.contrastive {
                Some((sample(e1)?, sample(e2)?))
            } else {
                None
            };
            (z, views)
        } else if self.contrastive {
            let BatchNoise::Augment { seed } = noise else {
                return Err(Error::Config("augmented step needs an augmentation seed".into()));
            };
            let mut aug = rng::Rng::seed_from_u64(*seed);
            let (a, b) = self
                .encoder
                .feature_augment_views(&params.embeddings, self.eps_amplitude, &mut aug)?;
            (mu.clone(), Some((a.gather_rows(&plan.rows), b.gather_rows(&plan.rows))))
        } else {
            (mu.clone(), None)
        };

        let recon = bpr_reconstruction(&z, &plan.triples, self.loss.reduction)?;
        let kl = match &sigma_state {
            Some(s) if self.loss.kl_weight > 0.0 => Some(kl_regularizer(&mu, &s.sigma, self.loss.reduction)?),
            _ => None,
        };
        let contrast = match &views {
            Some((v1, v2)) => self.contrast(v1, v2, plan, clusters)?,
            None => ContrastTerms {
                node: None,
                cluster: None,
                skipped: 0,
            },
        };
        let (objective, breakdown) = total_objective(
            &ObjectiveTerms {
                reconstruction: &recon,
                kl: kl.as_ref(),
                node: contrast.node.as_ref(),
                cluster: contrast.cluster.as_ref(),
                embeddings: &params.embeddings,
            },
            &self.loss,
        )?;
        if !breakdown.total.is_finite() {
            return Err(Error::NonFinite("training objective".into()));
        }
        let grads = &objective.grads;
        let zero = DenseMatrix::zeros(n_rows, d);
        let get = |key: &str| grads.get(key).unwrap_or(&zero);

        // gradient on the batch rows of the readout
        let mut d_mu = get(Z).clone();
        d_mu.add_scaled(1.0, get(VIEW1))?;
        d_mu.add_scaled(1.0, get(VIEW2))?;
        d_mu.add_scaled(1.0, get(MU))?;

        let mut d_weight = DenseMatrix::zeros(params.weight.rows(), params.weight.cols());
        let mut d_bias = vec![0.0; d];
        if let (Some(s), Some([e0, e1, e2])) = (&sigma_state, draws) {
            let mut d_sigma = get(Z).hadamard(e0)?;
            d_sigma.add_scaled(1.0, &get(VIEW1).hadamard(e1)?)?;
            d_sigma.add_scaled(1.0, &get(VIEW2).hadamard(e2)?)?;
            d_sigma.add_scaled(1.0, get(SIGMA))?;
            let sg = sigma_backward(&mu, s, &d_sigma, &params.weight)?;
            d_mu.add_scaled(1.0, &sg.mu)?;
            d_weight = sg.weight;
            d_bias = sg.bias;
        }

        let mut full = DenseMatrix::zeros(params.n_nodes(), d);
        full.scatter_add_rows(&plan.rows, &d_mu)?;
        // the feature noise is piecewise constant, so clean and augmented
        // passes share one Jacobian and a single backward pass serves all
        let mut d_embeddings = self.encoder.propagate_backward(&full)?;
        d_embeddings.add_scaled(1.0, get(EMBEDDINGS))?;

        Ok(StepOutput {
            breakdown,
            grads: ParamGrads {
                embeddings: d_embeddings,
                weight: d_weight,
                bias: d_bias,
            },
            clamped: sigma_state.map_or(0, |s| s.clamped),
            cluster_skipped: contrast.skipped,
            forward_passes: self.encoder.forward_passes() - fwd0,
            backward_passes: self.encoder.backward_passes() - bwd0,
        })
    }
}

fn scatter(grads: &mut GradSet, key: &'static str, rows: &[usize], g: &DenseMatrix) -> Result<()> {
    let target = grads.remove(key).expect("contrastive gradient initialized");
    let mut target = target;
    target.scatter_add_rows(rows, g)?;
    grads.insert(key, target);
    Ok(())
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: [Vec<f64>; 3],
    v: [Vec<f64>; 3],
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let sizes = [
            params.embeddings.as_slice().len(),
            params.weight.as_slice().len(),
            params.bias.len(),
        ];
        Self {
            step: 0,
            m: sizes.map(|n| vec![0.0; n]),
            v: sizes.map(|n| vec![0.0; n]),
        }
    }
}

/// Bias-corrected Adam update of every parameter. Non-finite gradients are
/// rejected before anything is modified.
pub fn adam_step(params: &mut ModelParams, grads: &ParamGrads, state: &mut AdamState, lr: f64) -> Result<()> {
    let named: [(&str, &[f64]); 3] = [
        ("embeddings", grads.embeddings.as_slice()),
        ("weight", grads.weight.as_slice()),
        ("bias", &grads.bias),
    ];
    for (k, (name, g)) in named.iter().enumerate() {
        if g.len() != state.m[k].len() {
            return Err(Error::Shape(format!("adam: gradient of {name} has {} entries", g.len())));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    let targets: [&mut [f64]; 3] = [
        params.embeddings.as_mut_slice(),
        params.weight.as_mut_slice(),
        &mut params.bias,
    ];
    for (k, p) in targets.into_iter().enumerate() {
        let g = named[k].1;
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for i in 0..p.len() {
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
            p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Totals over one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub batches: usize,
    pub losses: LossBreakdown,
    pub clamped: usize,
    pub cluster_skipped: usize,
    /// Propagation passes of the last batch.
    pub forward_passes: usize,
    pub backward_passes: usize,
    /// Mean `‖σ_u‖/√d` per user-degree quartile, lowest degrees first.
    pub sigma_quartiles: Option<[f64; 4]>,
    pub metrics: Option<MetricsReport>,
}

impl EpochRecord {
    /// One `key=value` line.
    pub fn render(&self) -> String {
        let l = &self.losses;
        let mut out = format!(
            "epoch={} batches={} total={} bpr={} kl={} node={} cluster={} reg={} clamped={} cluster_skipped={} forward_passes={} backward_passes={}",
            self.epoch,
            self.batches,
            l.total,
            l.reconstruction,
            l.kl,
            l.node,
            l.cluster,
            l.regularization,
            self.clamped,
            self.cluster_skipped,
            self.forward_passes,
            self.backward_passes
        );
        if let Some(q) = self.sigma_quartiles {
            for (k, s) in q.iter().enumerate() {
                let _ = write!(out, " sigma_q{}={s}", k + 1);
            }
        }
        if let Some(m) = &self.metrics {
            for (k, c) in m.cutoffs.iter().enumerate() {
                let _ = write!(out, " recall@{c}={} ndcg@{c}={}", m.recall[k], m.ndcg[k]);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainStatus {
    Completed,
    EarlyStopped { epoch: usize },
    Diverged { epoch: usize, batch: usize, reason: String },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Final parameters; after divergence, the last parameters that produced
    /// a finite step.
    pub params: ModelParams,
    pub log: Vec<EpochRecord>,
    pub status: TrainStatus,
    /// Epoch and NDCG of the best evaluation seen.
    pub best: Option<(usize, f64)>,
}

/// Prototypes of the current readout (means or clean propagation).
pub fn refresh_clusters(
    engine: &StepEngine<'_>,
    params: &ModelParams,
    cfg: &TrainConfig,
    round: u64,
) -> Result<ClusterModel> {
    let prop = engine.encoder().propagate(&params.embeddings)?;
    let m = engine.n_users();
    let users = prop.readout.slice_rows(0, m);
    let items = prop.readout.slice_rows(m, prop.readout.rows());
    let seed = cfg.seed ^ round.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    ClusterModel::fit(&users, &items, cfg.k_users, cfg.k_items, cfg.cluster_mode, seed, &cfg.kmeans)
}

/// Readout for every user and item.
pub fn user_item_embeddings(engine: &StepEngine<'_>, params: &ModelParams) -> Result<(DenseMatrix, DenseMatrix)> {
    let prop = engine.encoder().propagate(&params.embeddings)?;
    let m = engine.n_users();
    Ok((
        prop.readout.slice_rows(0, m),
        prop.readout.slice_rows(m, prop.readout.rows()),
    ))
}

/// Per-user deviations `σ` of the current parameters.
pub fn user_sigma(users: &DenseMatrix, params: &ModelParams) -> Result<DenseMatrix> {
    Ok(sigma_rows(users, &params.weight, &params.bias)?.sigma)
}

fn sigma_quartiles(sigma: &DenseMatrix, groups: &[Vec<usize>]) -> [f64; 4] {
    let mut q = [0.0; 4];
    for (k, g) in groups.iter().enumerate().take(4) {
        q[k] = evaluator::mean_scaled_sigma(sigma, g);
    }
    q
}

/// Trains from a fresh initialization.
pub fn train(data: &SplitDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut init_rng = rng::substream(cfg.seed, Stream::Init);
    let params = ModelParams::init(data.n_users() + data.n_items(), cfg.dim, cfg.init_scale(), &mut init_rng);
    train_from(data, cfg, params)
}

/// Trains starting from `params`.
pub fn train_from(data: &SplitDataset, cfg: &TrainConfig, mut params: ModelParams) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (m, n) = (data.n_users(), data.n_items());
    if data.train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if params.n_nodes() != m + n || params.dim() != cfg.dim {
        return Err(Error::Shape(format!(
            "parameters {}x{} for {} nodes of width {}",
            params.n_nodes(),
            params.dim(),
            m + n,
            cfg.dim
        )));
    }
    if cfg.cluster_active() && (cfg.k_users > m || cfg.k_items > n) {
        return Err(Error::Config(format!(
            "k_users={} / k_items={} exceed {m} users / {n} items",
            cfg.k_users, cfg.k_items
        )));
    }
    let adj = build_graph(&data.train);
    let engine = StepEngine::new(cfg, &adj, m)?;
    let sampler = TripleSampler::new(&data.train);
    let mut triple_rng = rng::substream(cfg.seed, Stream::Triples);
    let mut reparam_rng = rng::substream(cfg.seed, Stream::Reparam);
    let mut augment_rng = rng::substream(cfg.seed, Stream::Augment);
    let mut adam = AdamState::new(&params);
    let n_batches = data.train.len().div_ceil(cfg.batch_size);
    let quartiles = degree_groups(&data.train.user_degrees(), 4).ok();
    let early_cutoff = if cfg.cutoffs.contains(&GROUP_CUTOFF) {
        GROUP_CUTOFF
    } else {
        *cfg.cutoffs.iter().max().expect("validated")
    };
    let has_test = !data.test.is_empty();

    let mut log = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    let mut stale = 0;
    let mut status = TrainStatus::Completed;
    let mut rounds = 0u64;

    let mut position = (0, 0);
    let mut pending: Option<EpochRecord> = None;
    let mut run = || -> Result<()> {
        for epoch in 1..=cfg.epochs {
            position = (epoch, 0);
            let mut clusters = None;
            if cfg.cluster_active() && cfg.cluster_refresh == ClusterRefresh::Epoch {
                clusters = Some(refresh_clusters(&engine, &params, cfg, rounds)?);
                rounds += 1;
            }
            let record = pending.insert(EpochRecord {
                epoch,
                batches: 0,
                losses: LossBreakdown::default(),
                clamped: 0,
                cluster_skipped: 0,
                forward_passes: 0,
                backward_passes: 0,
                sigma_quartiles: None,
                metrics: None,
            });
            for batch in 1..=n_batches {
                position = (epoch, batch);
                if cfg.cluster_active() && cfg.cluster_refresh == ClusterRefresh::Batch {
                    clusters = Some(refresh_clusters(&engine, &params, cfg, rounds)?);
                    rounds += 1;
                }
                let triples = sampler.sample(cfg.batch_size, &mut triple_rng)?;
                let plan = BatchPlan::new(&triples, m);
                let noise = if cfg.variant.variational() {
                    BatchNoise::gaussian(plan.rows().len(), cfg.dim, &mut reparam_rng)
                } else if cfg.contrastive_active() {
                    BatchNoise::Augment {
                        seed: augment_rng.random(),
                    }
                } else {
                    BatchNoise::None
                };
                let out = engine.step(&params, &plan, &noise, clusters.as_ref())?;
                // rejects non-finite gradients before touching the parameters
                adam_step(&mut params, &out.grads, &mut adam, cfg.lr)?;
                let l = &mut record.losses;
                l.total += out.breakdown.total;
                l.reconstruction += out.breakdown.reconstruction;
                l.kl += out.breakdown.kl;
                l.node += out.breakdown.node;
                l.cluster += out.breakdown.cluster;
                l.regularization += out.breakdown.regularization;
                record.batches += 1;
                record.clamped += out.clamped;
                record.cluster_skipped += out.cluster_skipped;
                record.forward_passes = out.forward_passes;
                record.backward_passes = out.backward_passes;
            }
            position = (epoch, n_batches);

            let evaluate_now = has_test && epoch % cfg.eval_every == 0;
            if cfg.variant.variational() || evaluate_now {
                let (users, items) = user_item_embeddings(&engine, &params)?;
                if cfg.variant.variational() && !cfg.freeze_sigma_zero {
                    if let Some(groups) = &quartiles {
                        record.sigma_quartiles = Some(sigma_quartiles(&user_sigma(&users, &params)?, groups));
                    }
                }
                if evaluate_now {
                    let report = evaluator::evaluate(&users, &items, &data.train, &data.test, &cfg.cutoffs)?;
                    let score = report.ndcg_at(early_cutoff).expect("cutoff present");
                    record.metrics = Some(report);
                    if best.is_none_or(|(_, b)| score > b) {
                        best = Some((epoch, score));
                        stale = 0;
                    } else {
                        stale += 1;
                    }
                }
            }
            log.extend(pending.take());
            if stale >= cfg.early_stop_patience {
                status = TrainStatus::EarlyStopped { epoch };
                break;
            }
        }
        Ok(())
    };
    match run() {
        Ok(()) => {}
        Err(Error::NonFinite(what)) => {
            log.extend(pending.take());
            status = TrainStatus::Diverged {
                epoch: position.0,
                batch: position.1,
                reason: format!("non-finite {what}"),
            };
        }
        Err(e) => return Err(e),
    }

    Ok(TrainOutcome {
        params,
        log,
        status,
        best,
    })
}

//! Central finite differences and a self-contained gradient check over every
//! loss component and the full training objective.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::clustering::{AssignMode, Assignment, ClusterModel, KMeansConfig};
use crate::dataset::{build_graph, InteractionTable, TripleSampler};
use crate::encoder::{standard_normal, ModelParams};
use crate::error::Result;
use crate::linalg::DenseMatrix;
use crate::losses::{
    bpr_reconstruction, cluster_contrastive, kl_regularizer, node_infonce, LossConfig, Reduction, RowTriple, MU,
    SIGMA, VIEW1, VIEW2, Z,
};
use crate::rng::{self, Stream};
use crate::trainer::{BatchNoise, BatchPlan, StepEngine, TrainConfig, Variant};

pub const FD_STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-5;

/// `∂f/∂x` by central differences with step `h`, one entry at a time.
pub fn central_difference(x: &DenseMatrix, h: f64, mut f: impl FnMut(&DenseMatrix) -> f64) -> DenseMatrix {
    let mut probe = x.clone();
    let mut out = DenseMatrix::zeros(x.rows(), x.cols());
    for k in 0..x.as_slice().len() {
        let orig = probe.as_slice()[k];
        probe.as_mut_slice()[k] = orig + h;
        let up = f(&probe);
        probe.as_mut_slice()[k] = orig - h;
        let down = f(&probe);
        probe.as_mut_slice()[k] = orig;
        out.as_mut_slice()[k] = (up - down) / (2.0 * h);
    }
    out
}

/// Largest entrywise deviation, relative to the larger of the two gradients'
/// max-norms. Zero when both gradients vanish.
pub fn max_relative_error(analytic: &DenseMatrix, numeric: &DenseMatrix) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shapes differ");
    let scale = analytic.max_abs().max(numeric.max_abs());
    if scale == 0.0 {
        return 0.0;
    }
    analytic
        .as_slice()
        .iter()
        .zip(numeric.as_slice())
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()))
        / scale
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentCheck {
    pub component: &'static str,
    pub max_relative_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub seed: u64,
    pub checks: Vec<ComponentCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.max_relative_error < TOLERANCE)
    }

    pub fn failures(&self) -> Vec<&'static str> {
        self.checks
            .iter()
            .filter(|c| !(c.max_relative_error < TOLERANCE))
            .map(|c| c.component)
            .collect()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let verdict = if c.max_relative_error < TOLERANCE { "PASS" } else { "FAIL" };
            out.push_str(&format!(
                "component={} max_rel_err={:.3e} result={verdict}\n",
                c.component, c.max_relative_error
            ));
        }
        out.push_str(&format!(
            "seed={} result={}\n",
            self.seed,
            if self.passed() { "PASS" } else { "FAIL" }
        ));
        out
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GradCheckOptions {
    /// Scales the analytic gradient of the named component by 1.01.
    pub corrupt: Option<&'static str>,
}

pub const COMPONENTS: [&str; 5] = ["bpr", "kl", "node", "cluster", "total"];

fn compare(
    checks: &mut Vec<ComponentCheck>,
    component: &'static str,
    opts: &GradCheckOptions,
    pairs: &[(DenseMatrix, DenseMatrix)],
) {
    let factor = if opts.corrupt == Some(component) { 1.01 } else { 1.0 };
    let err = pairs
        .iter()
        .map(|(a, n)| max_relative_error(&a.scale(factor), n))
        .fold(0.0, f64::max);
    checks.push(ComponentCheck {
        component,
        max_relative_error: err,
    });
}

/// Builds a small random instance from `seed` (at most 8 users and 8 items,
/// `d ≤ 6`) and checks every analytic gradient against central differences.
///
/// The total objective is differentiated with respect to the embeddings and
/// the variance layer through propagation and reparameterization, with the
/// sampling noise held fixed.
pub fn grad_check(seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = rng::substream(seed, Stream::Init);
    let n_users = rng.random_range(3..=8);
    let n_items = rng.random_range(4..=8);
    let dim = rng.random_range(2..=6);
    let mut pairs = Vec::new();
    for u in 0..n_users {
        let mut items: Vec<usize> = (0..n_items).collect();
        items.shuffle(&mut rng);
        let k = rng.random_range(1..n_items);
        pairs.extend(items[..k].iter().map(|&i| (u, i)));
    }
    let train = InteractionTable::new(pairs, n_users, n_items)?;
    let adj = build_graph(&train);
    let triples = TripleSampler::new(&train).sample(6, &mut rng)?;

    let mut params = ModelParams::init(n_users + n_items, dim, 0.5, &mut rng);
    params.weight = params.weight.scale(0.5);

    let loss = LossConfig {
        alpha: 0.7,
        gamma: 0.6,
        lambda: 0.05,
        tau1: 0.3,
        tau2: 0.25,
        kl_weight: 0.8,
        reduction: Reduction::Sum,
    };
    let mut checks = Vec::new();

    // standalone components on random inputs
    let b = rng.random_range(3..=8);
    let z = standard_normal(b + 2, dim, &mut rng);
    let row_triples: Vec<RowTriple> = (0..b)
        .map(|k| RowTriple {
            user: k,
            positive: (k + 1) % (b + 2),
            negative: (k + 2) % (b + 2),
        })
        .collect();
    let bpr = bpr_reconstruction(&z, &row_triples, Reduction::Sum)?;
    let numeric = central_difference(&z, FD_STEP, |x| {
        bpr_reconstruction(x, &row_triples, Reduction::Sum).map_or(f64::NAN, |l| l.value)
    });
    compare(&mut checks, "bpr", opts, &[(bpr.grads.get(Z).unwrap().clone(), numeric)]);

    let mu = standard_normal(b, dim, &mut rng);
    let sigma = standard_normal(b, dim, &mut rng).map(|x| (0.5 * x).exp());
    let kl = kl_regularizer(&mu, &sigma, Reduction::Sum)?;
    let n_mu = central_difference(&mu, FD_STEP, |m| {
        kl_regularizer(m, &sigma, Reduction::Sum).map_or(f64::NAN, |l| l.value)
    });
    let n_sigma = central_difference(&sigma, FD_STEP, |s| {
        kl_regularizer(&mu, s, Reduction::Sum).map_or(f64::NAN, |l| l.value)
    });
    compare(
        &mut checks,
        "kl",
        opts,
        &[
            (kl.grads.get(MU).unwrap().clone(), n_mu),
            (kl.grads.get(SIGMA).unwrap().clone(), n_sigma),
        ],
    );

    let v1 = standard_normal(b, dim, &mut rng);
    let v2 = standard_normal(b, dim, &mut rng);
    let node = node_infonce(&v1, &v2, loss.tau1, Reduction::Sum)?;
    let n1 = central_difference(&v1, FD_STEP, |x| {
        node_infonce(x, &v2, loss.tau1, Reduction::Sum).map_or(f64::NAN, |l| l.value)
    });
    let n2 = central_difference(&v2, FD_STEP, |x| {
        node_infonce(&v1, x, loss.tau1, Reduction::Sum).map_or(f64::NAN, |l| l.value)
    });
    compare(
        &mut checks,
        "node",
        opts,
        &[
            (node.grads.get(VIEW1).unwrap().clone(), n1),
            (node.grads.get(VIEW2).unwrap().clone(), n2),
        ],
    );

    let mut labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..2)).collect();
    // one shared prototype and one outsider, so the loss has a gradient
    labels[0] = 0;
    labels[1] = 0;
    labels[2] = 1;
    let same = DenseMatrix::from_fn(b, b, |x, y| f64::from(u8::from(labels[x] == labels[y])));
    let cluster = cluster_contrastive(&v1, &v2, &same, loss.tau2, Reduction::Sum)?;
    let n1 = central_difference(&v1, FD_STEP, |x| {
        cluster_contrastive(x, &v2, &same, loss.tau2, Reduction::Sum).map_or(f64::NAN, |l| l.loss.value)
    });
    let n2 = central_difference(&v2, FD_STEP, |x| {
        cluster_contrastive(&v1, x, &same, loss.tau2, Reduction::Sum).map_or(f64::NAN, |l| l.loss.value)
    });
    compare(
        &mut checks,
        "cluster",
        opts,
        &[
            (cluster.loss.grads.get(VIEW1).unwrap().clone(), n1),
            (cluster.loss.grads.get(VIEW2).unwrap().clone(), n2),
        ],
    );

    // full chain: embeddings and variance layer through the whole step
    let cfg = TrainConfig {
        dim,
        layers: 2,
        variant: Variant::Vgcl,
        k_users: 2.min(n_users),
        k_items: 2.min(n_items),
        loss,
        ..TrainConfig::default()
    };
    let engine = StepEngine::new(&cfg, &adj, n_users)?;
    let plan = BatchPlan::new(&triples, n_users);
    let noise = BatchNoise::gaussian(plan.rows().len(), dim, &mut rng);
    let user_points = standard_normal(n_users, dim, &mut rng);
    let item_points = standard_normal(n_items, dim, &mut rng);
    let clusters = ClusterModel {
        users: Assignment::fit(&user_points, cfg.k_users, AssignMode::Hard, seed, &KMeansConfig::default())?,
        items: Assignment::fit(&item_points, cfg.k_items, AssignMode::Hard, seed, &KMeansConfig::default())?,
    };
    let step = engine.step(&params, &plan, &noise, Some(&clusters))?;
    let objective = |p: &ModelParams| {
        engine
            .step(p, &plan, &noise, Some(&clusters))
            .map_or(f64::NAN, |s| s.breakdown.total)
    };
    let n_e = central_difference(&params.embeddings, FD_STEP, |e| {
        let p = ModelParams {
            embeddings: e.clone(),
            ..params.clone()
        };
        objective(&p)
    });
    let n_w = central_difference(&params.weight, FD_STEP, |w| {
        let p = ModelParams {
            weight: w.clone(),
            ..params.clone()
        };
        objective(&p)
    });
    let bias = DenseMatrix::new(1, dim, params.bias.clone())?;
    let n_b = central_difference(&bias, FD_STEP, |b| {
        let p = ModelParams {
            bias: b.as_slice().to_vec(),
            ..params.clone()
        };
        objective(&p)
    });
    compare(
        &mut checks,
        "total",
        opts,
        &[
            (step.grads.embeddings.clone(), n_e),
            (step.grads.weight.clone(), n_w),
            (DenseMatrix::new(1, dim, step.grads.bias.clone())?, n_b),
        ],
    );

    Ok(GradCheckReport { seed, checks })
}

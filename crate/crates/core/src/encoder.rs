//! Variational graph inference and generation.
//!
//! Means come from parameter-free propagation of the node embeddings over the
//! normalized graph; standard deviations come from a single affine layer on
//! the fused means followed by `exp`. Samples are drawn by reparameterization
//! and scored by inner product.

use std::cell::Cell;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::dataset::NormalizedAdjacency;
use crate::error::{Error, Result};
use crate::linalg::{spmm, DenseMatrix};

/// Pre-activations above this are clamped before `exp`.
pub const LOG_SIGMA_CLAMP: f64 = 30.0;

/// Trainable parameters: node embeddings plus the variance layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// `(M+N) × d`, users first.
    pub embeddings: DenseMatrix,
    /// `d × d`
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
}

impl ModelParams {
    pub fn new(embeddings: DenseMatrix, weight: DenseMatrix, bias: Vec<f64>) -> Result<Self> {
        let d = embeddings.cols();
        if weight.shape() != (d, d) || bias.len() != d {
            return Err(Error::Shape(format!(
                "variance layer must be {d}x{d} + {d}, got {}x{} + {}",
                weight.rows(),
                weight.cols(),
                bias.len()
            )));
        }
        Ok(Self {
            embeddings,
            weight,
            bias,
        })
    }

    /// Every entry drawn from `N(0, std²)`.
    pub fn init<R: Rng + ?Sized>(n_nodes: usize, dim: usize, std: f64, rng: &mut R) -> Self {
        let mut normal = || std * rng.sample::<f64, _>(StandardNormal);
        let embeddings = DenseMatrix::from_fn(n_nodes, dim, |_, _| normal());
        let weight = DenseMatrix::from_fn(dim, dim, |_, _| normal());
        let bias = (0..dim).map(|_| normal()).collect();
        Self {
            embeddings,
            weight,
            bias,
        }
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn n_nodes(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_finite(&self) -> bool {
        self.embeddings.is_finite() && self.weight.is_finite() && self.bias.iter().all(|b| b.is_finite())
    }
}

/// Output of one propagation pass.
#[derive(Debug, Clone)]
pub struct Propagation {
    /// `[E⁰, E¹, …, Eᴸ]`
    pub layers: Vec<DenseMatrix>,
    pub readout: DenseMatrix,
}

/// Per-node Gaussian posterior.
#[derive(Debug, Clone)]
pub struct GaussianParams {
    pub mu: DenseMatrix,
    pub sigma: DenseMatrix,
    /// Mean at every layer, `[μ⁰, …, μᴸ]`.
    pub per_layer_mu: Vec<DenseMatrix>,
    /// Number of entries whose log-sigma was clamped.
    pub clamped: usize,
}

/// Standard deviations for a set of rows together with what the backward
/// pass needs.
#[derive(Debug, Clone)]
pub struct SigmaRows {
    pub sigma: DenseMatrix,
    /// Pre-activation `μW + b`, before clamping.
    pub pre_activation: DenseMatrix,
    pub clamped: usize,
}

/// Gradients of the variance layer.
#[derive(Debug, Clone)]
pub struct SigmaGrads {
    pub mu: DenseMatrix,
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
}

/// `σ = exp(min(μW + b, LOG_SIGMA_CLAMP))` for the given mean rows.
pub fn sigma_rows(mu: &DenseMatrix, weight: &DenseMatrix, bias: &[f64]) -> Result<SigmaRows> {
    let pre_activation = mu.matmul(weight)?.rowwise_add(bias)?;
    let mut clamped = 0;
    let sigma = pre_activation.map(|x| {
        if x > LOG_SIGMA_CLAMP {
            LOG_SIGMA_CLAMP.exp()
        } else {
            x.exp()
        }
    });
    for &x in pre_activation.as_slice() {
        if x > LOG_SIGMA_CLAMP {
            clamped += 1;
        }
    }
    sigma.check_finite("sigma")?;
    Ok(SigmaRows {
        sigma,
        pre_activation,
        clamped,
    })
}

/// Chains `∂L/∂σ` through the variance layer. Clamped entries pass no gradient.
pub fn sigma_backward(
    mu: &DenseMatrix,
    out: &SigmaRows,
    grad_sigma: &DenseMatrix,
    weight: &DenseMatrix,
) -> Result<SigmaGrads> {
    let mut grad_pre = grad_sigma.hadamard(&out.sigma)?;
    for (g, &x) in grad_pre
        .as_mut_slice()
        .iter_mut()
        .zip(out.pre_activation.as_slice())
    {
        if x > LOG_SIGMA_CLAMP {
            *g = 0.0;
        }
    }
    Ok(SigmaGrads {
        weight: mu.transpose_matmul(&grad_pre)?,
        bias: grad_pre.column_sums(),
        mu: grad_pre.matmul_transposed(weight)?,
    })
}

/// Propagation engine bound to one graph.
///
/// Counts forward and backward passes so callers can verify how many times
/// the graph was traversed.
#[derive(Debug)]
pub struct GraphEncoder<'a> {
    adj: &'a NormalizedAdjacency,
    layers: usize,
    include_layer0: bool,
    forward_passes: Cell<usize>,
    backward_passes: Cell<usize>,
}

impl<'a> GraphEncoder<'a> {
    /// `include_layer0` switches the readout from the mean of layers `1..=L`
    /// to the mean of `0..=L`.
    pub fn new(adj: &'a NormalizedAdjacency, layers: usize, include_layer0: bool) -> Result<Self> {
        if layers == 0 {
            return Err(Error::Config("layers must be at least 1".into()));
        }
        Ok(Self {
            adj,
            layers,
            include_layer0,
            forward_passes: Cell::new(0),
            backward_passes: Cell::new(0),
        })
    }

    pub fn adjacency(&self) -> &NormalizedAdjacency {
        self.adj
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn forward_passes(&self) -> usize {
        self.forward_passes.get()
    }

    pub fn backward_passes(&self) -> usize {
        self.backward_passes.get()
    }

    pub fn reset_counters(&self) {
        self.forward_passes.set(0);
        self.backward_passes.set(0);
    }

    fn readout_weight(&self) -> f64 {
        if self.include_layer0 {
            1.0 / (self.layers + 1) as f64
        } else {
            1.0 / self.layers as f64
        }
    }

    fn fuse(&self, layers: &[DenseMatrix]) -> DenseMatrix {
        let start = usize::from(!self.include_layer0);
        let mut acc = DenseMatrix::zeros(layers[0].rows(), layers[0].cols());
        for l in &layers[start..] {
            acc.add_scaled(1.0, l).expect("layer shapes agree");
        }
        acc.scale(self.readout_weight())
    }

    /// One forward pass: `Eˡ = Â Eˡ⁻¹` followed by the readout.
    pub fn propagate(&self, e0: &DenseMatrix) -> Result<Propagation> {
        self.forward_passes.set(self.forward_passes.get() + 1);
        let mut layers = Vec::with_capacity(self.layers + 1);
        layers.push(e0.clone());
        for l in 1..=self.layers {
            let next = spmm(self.adj, &layers[l - 1])?;
            next.check_finite(&format!("propagation layer {l}"))?;
            layers.push(next);
        }
        let readout = self.fuse(&layers);
        Ok(Propagation { layers, readout })
    }

    /// Pulls a gradient on the readout back to `E⁰`.
    ///
    /// The propagation operator is symmetric, so this is the same Horner-style
    /// sum of powers applied to the incoming gradient.
    pub fn propagate_backward(&self, grad_readout: &DenseMatrix) -> Result<DenseMatrix> {
        self.backward_passes.set(self.backward_passes.get() + 1);
        let w = self.readout_weight();
        let mut g = grad_readout.scale(w);
        let mut acc = if self.include_layer0 {
            g.clone()
        } else {
            DenseMatrix::zeros(g.rows(), g.cols())
        };
        for _ in 0..self.layers {
            g = spmm(self.adj, &g)?;
            acc.add_scaled(1.0, &g)?;
        }
        Ok(acc)
    }

    /// Means for every node plus standard deviations for every node.
    pub fn infer(&self, params: &ModelParams) -> Result<GaussianParams> {
        let prop = self.propagate(&params.embeddings)?;
        let sig = sigma_rows(&prop.readout, &params.weight, &params.bias)?;
        Ok(GaussianParams {
            mu: prop.readout,
            sigma: sig.sigma,
            per_layer_mu: prop.layers,
            clamped: sig.clamped,
        })
    }

    /// One propagation pass with uniform feature noise injected after every
    /// layer: `Eˡ ← Eˡ + eps · sign(Eˡ) ⊙ δ/‖δ‖`, `δ ~ U(0,1)` per node.
    pub fn augmented_view<R: Rng + ?Sized>(
        &self,
        e0: &DenseMatrix,
        eps_amplitude: f64,
        rng: &mut R,
    ) -> Result<DenseMatrix> {
        if eps_amplitude < 0.0 {
            return Err(Error::Config("eps_amplitude must be non-negative".into()));
        }
        self.forward_passes.set(self.forward_passes.get() + 1);
        let d = e0.cols();
        let mut layers = Vec::with_capacity(self.layers + 1);
        layers.push(e0.clone());
        let mut noise = vec![0.0; d];
        for l in 1..=self.layers {
            let mut next = spmm(self.adj, &layers[l - 1])?;
            for r in 0..next.rows() {
                for v in noise.iter_mut() {
                    *v = rng.random::<f64>();
                }
                let norm = noise.iter().map(|v| v * v).sum::<f64>().sqrt();
                let scale = if norm > 0.0 { eps_amplitude / norm } else { 0.0 };
                for (x, n) in next.row_mut(r).iter_mut().zip(&noise) {
                    *x += sign(*x) * n * scale;
                }
            }
            next.check_finite(&format!("augmented layer {l}"))?;
            layers.push(next);
        }
        Ok(self.fuse(&layers))
    }

    /// Two independently perturbed views of the same embeddings.
    pub fn feature_augment_views<R: Rng + ?Sized>(
        &self,
        e0: &DenseMatrix,
        eps_amplitude: f64,
        rng: &mut R,
    ) -> Result<(DenseMatrix, DenseMatrix)> {
        let a = self.augmented_view(e0, eps_amplitude, rng)?;
        let b = self.augmented_view(e0, eps_amplitude, rng)?;
        Ok((a, b))
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Means and deviations over the whole graph, averaging layers `1..=L`.
pub fn infer(adj: &NormalizedAdjacency, params: &ModelParams, layers: usize) -> Result<GaussianParams> {
    GraphEncoder::new(adj, layers, false)?.infer(params)
}

/// A reparameterized draw together with the noise that produced it.
#[derive(Debug, Clone)]
pub struct Sample {
    pub z: DenseMatrix,
    pub noise: DenseMatrix,
}

/// `z = μ + σ ⊙ ε` for a given noise matrix.
pub fn reparameterize_with(mu: &DenseMatrix, sigma: &DenseMatrix, noise: &DenseMatrix) -> Result<DenseMatrix> {
    mu.add(&sigma.hadamard(noise)?)
}

pub fn standard_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// `z = μ + σ ⊙ ε` with fresh `ε ~ N(0, I)`.
pub fn reparameterize<R: Rng + ?Sized>(mu: &DenseMatrix, sigma: &DenseMatrix, rng: &mut R) -> Result<Sample> {
    let noise = standard_normal(mu.rows(), mu.cols(), rng);
    let z = reparameterize_with(mu, sigma, &noise)?;
    Ok(Sample { z, noise })
}

/// Two independent draws sharing `μ, σ`.
pub fn sample_views<R: Rng + ?Sized>(
    mu: &DenseMatrix,
    sigma: &DenseMatrix,
    rng: &mut R,
) -> Result<(Sample, Sample)> {
    let first = reparameterize(mu, sigma, rng)?;
    let second = reparameterize(mu, sigma, rng)?;
    Ok((first, second))
}

/// Inner-product logits between every user row and every item row.
pub fn score(users: &DenseMatrix, items: &DenseMatrix) -> Result<DenseMatrix> {
    users.matmul_transposed(items)
}

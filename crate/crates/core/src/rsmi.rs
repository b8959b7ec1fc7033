//! Relative squared-loss mutual information between paired embeddings.
//!
//! The density ratio between the product of marginals and the
//! `mix`-weighted mixture of product and joint distributions is modelled as
//! a constant term plus Gaussian product kernels
//!
//! ```text
//! phi_l(z, w) = exp(-|z - z_l|^2 / (2 s_z^2)) * exp(-|w - w_l|^2 / (2 s_w^2))
//! ```
//!
//! fitted by regularized least squares. The resulting estimate
//! `2 a'h - a'Ha - 1` is assembled entirely inside a [`Graph`], so the
//! texture-structure loss differentiates through bandwidths, kernel
//! features, and the linear solve.

use rand::seq::index;
use rand::Rng;
use thiserror::Error;

use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RsmiError {
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("joint has {joint} samples but product has {product}")]
    SampleCountMismatch { joint: usize, product: usize },
    #[error("embedding dimension mismatch: {0:?} vs {1:?}")]
    DimensionMismatch(Vec<usize>, Vec<usize>),
    #[error("degenerate {0} samples: all pairwise distances are zero")]
    DegenerateBandwidth(&'static str),
    #[error("row {row} has norm {norm}, expected unit norm")]
    NotNormalized { row: usize, norm: f64 },
    #[error("layer set is empty")]
    EmptyLayerSet,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, RsmiError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RsmiConfig {
    /// Ridge added to the Gaussian-coefficient block of the Gram matrix.
    pub ridge: f64,
    /// Weight of the product distribution in the reference mixture.
    pub mix: f64,
    /// Upper bound on the number of Gaussian centers.
    pub max_basis: usize,
}

impl Default for RsmiConfig {
    fn default() -> Self {
        Self {
            ridge: 1e-3,
            mix: 0.5,
            max_basis: 64,
        }
    }
}

impl RsmiConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ridge > 0.0) || !self.ridge.is_finite() {
            return Err(RsmiError::InvalidConfig(format!("ridge must be positive, got {}", self.ridge)));
        }
        if !(0.0..=1.0).contains(&self.mix) {
            return Err(RsmiError::InvalidConfig(format!("mix must lie in [0, 1], got {}", self.mix)));
        }
        if self.max_basis == 0 {
            return Err(RsmiError::InvalidConfig("max_basis must be positive".into()));
        }
        Ok(())
    }
}

/// Patch embeddings (N x d) from one encoder layer, bound to a graph.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmbeddingBatch {
    pub vectors: Var,
    pub layer_index: usize,
    pub normalized: bool,
}

impl EmbeddingBatch {
    pub fn new<S: Scalar>(graph: &Graph<S>, vectors: Var, layer_index: usize, normalized: bool) -> Result<Self> {
        let shape = graph.shape(vectors);
        if shape.len() != 2 {
            return Err(RsmiError::DimensionMismatch(shape.to_vec(), vec![0, 0]));
        }
        if shape[0] < 2 {
            return Err(RsmiError::TooFewSamples(shape[0]));
        }
        if normalized {
            check_unit_rows(graph.value(vectors), 1e-6)?;
        }
        Ok(Self {
            vectors,
            layer_index,
            normalized,
        })
    }

    pub fn len<S: Scalar>(&self, graph: &Graph<S>) -> usize {
        graph.shape(self.vectors)[0]
    }
}

pub(crate) fn check_unit_rows<S: Scalar>(t: &Tensor<S>, tol: f64) -> Result<()> {
    for row in 0..t.shape()[0] {
        let norm = t.row(row).iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > tol {
            return Err(RsmiError::NotNormalized { row, norm });
        }
    }
    Ok(())
}

/// Input/output embedding pairs, one per selected encoder layer.
#[derive(Debug, Clone, Default)]
pub struct LayerPairSet {
    pairs: Vec<(EmbeddingBatch, EmbeddingBatch)>,
}

impl LayerPairSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push<S: Scalar>(&mut self, graph: &Graph<S>, input: EmbeddingBatch, output: EmbeddingBatch) -> Result<()> {
        let (a, b) = (graph.shape(input.vectors), graph.shape(output.vectors));
        if a != b {
            return Err(RsmiError::DimensionMismatch(a.to_vec(), b.to_vec()));
        }
        self.pairs.push((input, output));
        Ok(())
    }

    pub fn pairs(&self) -> &[(EmbeddingBatch, EmbeddingBatch)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Paired samples `(z_i, w_i)`: two row-aligned `N x d` matrices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplePairs {
    pub z: Var,
    pub w: Var,
}

/// Uniformly random permutation of `0..n` without fixed points.
pub fn derangement<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(RsmiError::TooFewSamples(n));
    }
    // rejection from uniform permutations; acceptance rate tends to 1/e
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return Ok(perm);
        }
    }
}

/// Product-of-marginals samples `(z_i, w_{pi(i)})` for a random derangement.
pub fn make_product_samples<S: Scalar, R: Rng + ?Sized>(
    graph: &mut Graph<S>,
    joint: SamplePairs,
    rng: &mut R,
) -> Result<(SamplePairs, Vec<usize>)> {
    let n = graph.shape(joint.w)[0];
    let perm = derangement(n, rng)?;
    let w = graph.gather_rows(joint.w, &perm)?;
    Ok((SamplePairs { z: joint.z, w }, perm))
}

/// Fitted estimator. Tensors are forward values; `Var`s are graph handles
/// for differentiating the estimate.
#[derive(Debug, Clone)]
pub struct KernelModel<S: Scalar = f64> {
    pub centers_z: Tensor<S>,
    pub centers_w: Tensor<S>,
    pub sigma_z: S,
    pub sigma_w: S,
    /// Coefficients; entry 0 multiplies the constant basis function.
    pub alpha: Tensor<S>,
    pub h_vec: Tensor<S>,
    pub h_mat: Tensor<S>,
    pub ridge: S,
    pub mix: S,
    alpha_var: Var,
    h_vec_var: Var,
    h_mat_var: Var,
}

impl<S: Scalar> KernelModel<S> {
    pub fn basis_count(&self) -> usize {
        self.centers_z.shape()[0]
    }

    /// Estimate from the stored forward values.
    pub fn value(&self) -> S {
        rsmi_value_from_parts(&self.alpha, &self.h_vec, &self.h_mat)
    }

    /// Residual `|(H + ridge D) a - h|` of the stored solve.
    pub fn solve_residual(&self) -> S {
        let m = self.h_vec.len();
        let mut sq = S::zero();
        for i in 0..m {
            let mut r = -self.h_vec.data()[i];
            for j in 0..m {
                r += self.h_mat.data()[i * m + j] * self.alpha.data()[j];
            }
            if i > 0 {
                r += self.ridge * self.alpha.data()[i];
            }
            sq += r * r;
        }
        sq.sqrt()
    }
}

/// `2 a'h - a'Ha - 1` on plain tensors.
pub fn rsmi_value_from_parts<S: Scalar>(alpha: &Tensor<S>, h_vec: &Tensor<S>, h_mat: &Tensor<S>) -> S {
    let m = alpha.len();
    let a = alpha.data();
    let ah: S = a.iter().zip(h_vec.data()).map(|(&x, &y)| x * y).sum();
    let mut aha = S::zero();
    for i in 0..m {
        for j in 0..m {
            aha += a[i] * h_mat.data()[i * m + j] * a[j];
        }
    }
    S::lit(2.0) * ah - aha - S::one()
}

/// Median of the strictly positive pairwise distances between rows of `x`,
/// as a graph node (differentiable almost everywhere).
pub fn median_distance<S: Scalar>(graph: &mut Graph<S>, x: Var, which: &'static str) -> Result<Var> {
    let n = graph.shape(x)[0];
    let d2 = graph.pairwise_sq_dist(x, x)?;
    let vals = graph.value(d2).data();
    let mut upper: Vec<usize> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| i * n + j))
        .filter(|&k| vals[k] > S::zero())
        .collect();
    if upper.is_empty() {
        return Err(RsmiError::DegenerateBandwidth(which));
    }
    upper.sort_by(|&a, &b| vals[a].partial_cmp(&vals[b]).unwrap().then(a.cmp(&b)));
    let k = upper.len();
    let mid: Vec<usize> = if k % 2 == 1 {
        vec![upper[k / 2]]
    } else {
        vec![upper[k / 2 - 1], upper[k / 2]]
    };
    let len = mid.len();
    let picked = graph.take(d2, &mid, &[len])?;
    let dist = graph.sqrt(picked);
    Ok(graph.mean(dist))
}

fn gaussian_features<S: Scalar>(graph: &mut Graph<S>, x: Var, centers: Var, sigma: Var) -> Result<Var> {
    let d2 = graph.pairwise_sq_dist(x, centers)?;
    let var2 = graph.square(sigma);
    let var2 = graph.scale(var2, S::lit(2.0));
    let scaled = graph.div(d2, var2)?;
    let neg = graph.neg(scaled);
    Ok(graph.exp(neg))
}

/// Fits the kernel least-squares estimator.
///
/// Bandwidths follow the median heuristic on the joint samples' marginals;
/// centers are drawn uniformly without replacement from the product
/// samples. Center subsampling is the only use of `rng`.
pub fn fit_rsmi<S: Scalar, R: Rng + ?Sized>(
    graph: &mut Graph<S>,
    joint: SamplePairs,
    product: SamplePairs,
    cfg: &RsmiConfig,
    rng: &mut R,
) -> Result<KernelModel<S>> {
    cfg.validate()?;
    let (jz, jw) = (graph.shape(joint.z).to_vec(), graph.shape(joint.w).to_vec());
    let (pz, pw) = (graph.shape(product.z).to_vec(), graph.shape(product.w).to_vec());
    if jz.len() != 2 || jw.len() != 2 || jz[0] != jw[0] {
        return Err(RsmiError::DimensionMismatch(jz, jw));
    }
    if pz[1..] != jz[1..] || pw[1..] != jw[1..] || pz[0] != pw[0] {
        return Err(RsmiError::DimensionMismatch(pz, pw));
    }
    let n = jz[0];
    if n < 2 {
        return Err(RsmiError::TooFewSamples(n));
    }
    if pz[0] != n {
        return Err(RsmiError::SampleCountMismatch {
            joint: n,
            product: pz[0],
        });
    }

    let sigma_z = median_distance(graph, joint.z, "z")?;
    let sigma_w = median_distance(graph, joint.w, "w")?;

    let m = n.min(cfg.max_basis);
    let picks = index::sample(rng, n, m).into_vec();
    let cz = graph.gather_rows(product.z, &picks)?;
    let cw = graph.gather_rows(product.w, &picks)?;

    let ones = graph.constant(Tensor::ones(&[n, 1]));
    let design = |g: &mut Graph<S>, s: SamplePairs| -> Result<Var> {
        let kz = gaussian_features(g, s.z, cz, sigma_z)?;
        let kw = gaussian_features(g, s.w, cw, sigma_w)?;
        let k = g.mul(kz, kw)?;
        Ok(g.concat(&[ones, k], 1)?)
    };
    let phi_p = design(graph, product)?;
    let phi_j = design(graph, joint)?;

    let inv_n = S::one() / S::lit(n as f64);
    let mix = S::lit(cfg.mix);
    let h_col = graph.reduce(phi_p, crate::graph::Reduce::Mean, 0)?;

    let gram = |g: &mut Graph<S>, phi: Var, w: S| -> Result<Var> {
        let t = g.transpose(phi)?;
        let p = g.matmul(t, phi)?;
        Ok(g.scale(p, w))
    };
    let hp = gram(graph, phi_p, mix * inv_n)?;
    let hj = gram(graph, phi_j, (S::one() - mix) * inv_n)?;
    let h_mat = graph.add(hp, hj)?;

    let ridge = S::lit(cfg.ridge);
    let mut penalty = Tensor::zeros(&[m + 1, m + 1]);
    for i in 1..=m {
        penalty.data_mut()[i * (m + 1) + i] = ridge;
    }
    let penalty = graph.constant(penalty);
    let system = graph.add(h_mat, penalty)?;
    let alpha = graph.solve_spd(system, h_col)?;

    Ok(KernelModel {
        centers_z: graph.value(cz).clone(),
        centers_w: graph.value(cw).clone(),
        sigma_z: graph.value(sigma_z).item(),
        sigma_w: graph.value(sigma_w).item(),
        alpha: graph.value(alpha).clone(),
        h_vec: graph.value(h_col).clone(),
        h_mat: graph.value(h_mat).clone(),
        ridge,
        mix,
        alpha_var: alpha,
        h_vec_var: h_col,
        h_mat_var: h_mat,
    })
}

/// `2 a'h - a'Ha - 1` as a differentiable scalar.
pub fn rsmi_value<S: Scalar>(graph: &mut Graph<S>, model: &KernelModel<S>) -> Result<Var> {
    let m = model.alpha.len();
    let a_col = graph.reshape(model.alpha_var, &[m, 1])?;
    let a_row = graph.reshape(model.alpha_var, &[1, m])?;
    let ah = graph.mul(model.alpha_var, model.h_vec_var)?;
    let ah = graph.sum(ah);
    let ha = graph.matmul(model.h_mat_var, a_col)?;
    let aha = graph.matmul(a_row, ha)?;
    let aha = graph.reshape(aha, &[])?;
    let two_ah = graph.scale(ah, S::lit(2.0));
    let diff = graph.sub(two_ah, aha)?;
    Ok(graph.add_scalar(diff, -S::one()))
}

/// Texture-structure consistency loss: negative mean estimate over layers.
///
/// Input-side embeddings are detached; gradients reach only the outputs.
pub fn ts_loss<S: Scalar, R: Rng + ?Sized>(
    graph: &mut Graph<S>,
    layers: &LayerPairSet,
    cfg: &RsmiConfig,
    rng: &mut R,
) -> Result<Var> {
    if layers.is_empty() {
        return Err(RsmiError::EmptyLayerSet);
    }
    let mut values = Vec::with_capacity(layers.len());
    for (input, output) in layers.pairs() {
        let z = graph.detach(input.vectors);
        let joint = SamplePairs { z, w: output.vectors };
        let (product, _) = make_product_samples(graph, joint, rng)?;
        let model = fit_rsmi(graph, joint, product, cfg, rng)?;
        let v = rsmi_value(graph, &model)?;
        values.push(graph.reshape(v, &[1])?);
    }
    let all = graph.concat(&values, 0)?;
    let mean = graph.mean(all);
    Ok(graph.neg(mean))
}

//! Patch contrastive losses: InfoNCE, decoupled (DCE), and hard-negative
//! decoupled (hDCE) with von Mises-Fisher reweighting of the negatives.
//!
//! Scores are cosine similarities over temperature, `s = w'z / tau`. For
//! query `i` with positive score `p` and negative scores `n_1..n_K`:
//!
//! ```text
//! info_nce = lse(p, n_1..n_K) - p
//! dce      = lse(n_1..n_K) - p
//! hdce     = log(c * sum_j K q_j exp(n_j)) - p,   q = softmax(beta * z'z_j)
//! ```
//!
//! where `c` defaults to `K`. With `beta = 0` the weights are uniform and
//! `hdce = dce + log K`.

use rand::seq::index;
use rand::Rng;
use thiserror::Error;

use crate::graph::{Graph, Reduce, Var};
use crate::rsmi::EmbeddingBatch;
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ContrastiveError {
    #[error("{role} row {row} has norm {norm}, expected unit norm")]
    NotNormalized { role: &'static str, row: usize, norm: f64 },
    #[error("{role} row {row} has zero norm")]
    ZeroNorm { role: &'static str, row: usize },
    #[error("invalid contrastive setting: {0}")]
    InvalidConfig(String),
    #[error("{role} has shape {found:?}, expected {expected}")]
    Shape {
        role: &'static str,
        found: Vec<usize>,
        expected: String,
    },
    #[error("negative {negative} of query {query} equals its positive")]
    PositiveAmongNegatives { query: usize, negative: usize },
    #[error("requested {count} patches from a {available}-location feature map")]
    TooManyPatches { count: usize, available: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Embedding(#[from] crate::rsmi::RsmiError),
}

pub type Result<T> = std::result::Result<T, ContrastiveError>;

const UNIT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastiveConfig {
    pub tau: f64,
    pub beta: f64,
    /// Multiplier on the hDCE denominator; `None` uses the negative count.
    pub n_mult: Option<f64>,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            beta: 0.5,
            n_mult: None,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(ContrastiveError::InvalidConfig(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(ContrastiveError::InvalidConfig(format!("beta must be >= 0, got {}", self.beta)));
        }
        if let Some(c) = self.n_mult {
            if !(c > 0.0) || !c.is_finite() {
                return Err(ContrastiveError::InvalidConfig(format!("n_mult must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Negatives {
    /// Every other positive in the batch (K = N - 1).
    Internal,
    /// Per-query negatives, shape `[N, K, d]`.
    Explicit(Var),
}

/// Queries `[N, d]` (output patches), positives `[N, d]` (input patches at
/// the same locations), and their negatives. All rows unit norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastiveBatch {
    pub queries: Var,
    pub positives: Var,
    pub negatives: Negatives,
    pub config: ContrastiveConfig,
}

impl ContrastiveBatch {
    pub fn new<S: Scalar>(
        graph: &Graph<S>,
        queries: Var,
        positives: Var,
        negatives: Negatives,
        config: ContrastiveConfig,
    ) -> Result<Self> {
        config.validate()?;
        let q = graph.shape(queries).to_vec();
        if q.len() != 2 || q[0] == 0 || q[1] == 0 {
            return Err(shape_err("queries", &q, "[N, d] with N, d > 0"));
        }
        if graph.shape(positives) != q.as_slice() {
            return Err(shape_err("positives", graph.shape(positives), &format!("{q:?}")));
        }
        check_unit("queries", graph.value(queries))?;
        check_unit("positives", graph.value(positives))?;
        match negatives {
            Negatives::Internal => {
                if q[0] < 2 {
                    return Err(ContrastiveError::InvalidConfig(
                        "internal negatives need at least 2 patches".into(),
                    ));
                }
            }
            Negatives::Explicit(neg) => {
                let s = graph.shape(neg);
                if s.len() != 3 || s[0] != q[0] || s[1] == 0 || s[2] != q[1] {
                    return Err(shape_err("negatives", s, &format!("[{}, K >= 1, {}]", q[0], q[1])));
                }
                let k = s[1];
                let d = q[1];
                let nv = graph.value(neg);
                let flat = Tensor::new(vec![q[0] * k, d], nv.data().to_vec())?;
                check_unit("negatives", &flat)?;
                let pv = graph.value(positives);
                for i in 0..q[0] {
                    for j in 0..k {
                        if flat.row(i * k + j) == pv.row(i) {
                            return Err(ContrastiveError::PositiveAmongNegatives { query: i, negative: j });
                        }
                    }
                }
            }
        }
        Ok(Self {
            queries,
            positives,
            negatives,
            config,
        })
    }

    pub fn negative_count<S: Scalar>(&self, graph: &Graph<S>) -> usize {
        match self.negatives {
            Negatives::Internal => graph.shape(self.queries)[0] - 1,
            Negatives::Explicit(neg) => graph.shape(neg)[1],
        }
    }
}

fn shape_err(role: &'static str, found: &[usize], expected: &str) -> ContrastiveError {
    ContrastiveError::Shape {
        role,
        found: found.to_vec(),
        expected: expected.to_string(),
    }
}

fn check_unit<S: Scalar>(role: &'static str, t: &Tensor<S>) -> Result<()> {
    for row in 0..t.shape()[0] {
        let norm = t.row(row).iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_TOL {
            return Err(ContrastiveError::NotNormalized { role, row, norm });
        }
    }
    Ok(())
}

/// Score matrices for one batch.
struct Scores {
    /// `w'z / tau`, shape `[N]`.
    pos: Var,
    /// `w'z_j^- / tau`, shape `[N, K]`.
    neg: Var,
    /// `z'z_j^-`, shape `[N, K]`.
    anchor: Var,
}

fn scores<S: Scalar>(graph: &mut Graph<S>, batch: &ContrastiveBatch) -> Result<Scores> {
    let inv_tau = S::lit(1.0 / batch.config.tau);
    let n = graph.shape(batch.queries)[0];
    let d = graph.shape(batch.queries)[1];
    let qp = graph.mul(batch.queries, batch.positives)?;
    let pos = graph.reduce(qp, Reduce::Sum, 1)?;
    let pos = graph.scale(pos, inv_tau);
    let (neg, anchor) = match batch.negatives {
        Negatives::Internal => {
            let pt = graph.transpose(batch.positives)?;
            let qk = graph.matmul(batch.queries, pt)?;
            let pk = graph.matmul(batch.positives, pt)?;
            let off: Vec<usize> = (0..n)
                .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| i * n + j))
                .collect();
            let neg = graph.take(qk, &off, &[n, n - 1])?;
            let anchor = graph.take(pk, &off, &[n, n - 1])?;
            (neg, anchor)
        }
        Negatives::Explicit(negs) => {
            let q3 = graph.reshape(batch.queries, &[n, 1, d])?;
            let p3 = graph.reshape(batch.positives, &[n, 1, d])?;
            let qn = graph.mul(q3, negs)?;
            let pn = graph.mul(p3, negs)?;
            (graph.reduce(qn, Reduce::Sum, 2)?, graph.reduce(pn, Reduce::Sum, 2)?)
        }
    };
    let neg = graph.scale(neg, inv_tau);
    Ok(Scores { pos, neg, anchor })
}

fn mean_minus_pos<S: Scalar>(graph: &mut Graph<S>, denom_log: Var, pos: Var) -> Result<Var> {
    let per_query = graph.sub(denom_log, pos)?;
    Ok(graph.mean(per_query))
}

/// InfoNCE with the positive inside the denominator.
pub fn info_nce<S: Scalar>(graph: &mut Graph<S>, batch: &ContrastiveBatch) -> Result<Var> {
    let s = scores(graph, batch)?;
    let n = graph.shape(s.pos)[0];
    let pos_col = graph.reshape(s.pos, &[n, 1])?;
    let all = graph.concat(&[pos_col, s.neg], 1)?;
    let lse = graph.logsumexp(all, 1)?;
    mean_minus_pos(graph, lse, s.pos)
}

/// Decoupled contrastive entropy: negatives only in the denominator.
pub fn dce<S: Scalar>(graph: &mut Graph<S>, batch: &ContrastiveBatch) -> Result<Var> {
    let s = scores(graph, batch)?;
    let lse = graph.logsumexp(s.neg, 1)?;
    mean_minus_pos(graph, lse, s.pos)
}

/// Hard-negative DCE. Negatives are importance-weighted by
/// `softmax(beta * z'z^-)`; the weights stay in the graph.
pub fn hdce<S: Scalar>(graph: &mut Graph<S>, batch: &ContrastiveBatch) -> Result<Var> {
    let s = scores(graph, batch)?;
    let k = batch.negative_count(graph) as f64;
    let mult = batch.config.n_mult.unwrap_or(k);
    let tilted = graph.scale(s.anchor, S::lit(batch.config.beta));
    let log_w = graph.log_softmax(tilted, 1)?;
    let weighted = graph.add(s.neg, log_w)?;
    let lse = graph.logsumexp(weighted, 1)?;
    let lse = graph.add_scalar(lse, S::lit((mult * k).ln()));
    mean_minus_pos(graph, lse, s.pos)
}

/// `softmax(beta * sims)` computed with max subtraction.
pub fn vmf_weights<S: Scalar>(sims: &[S], beta: S) -> Vec<S> {
    if sims.is_empty() {
        return Vec::new();
    }
    let logits: Vec<S> = sims.iter().map(|&s| beta * s).collect();
    let max = logits.iter().copied().fold(S::neg_infinity(), S::max);
    let e: Vec<S> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: S = e.iter().copied().sum();
    e.into_iter().map(|v| v / total).collect()
}

/// Divides each row of `[N, d]` by its Euclidean norm.
pub fn normalize_rows<S: Scalar>(graph: &mut Graph<S>, x: Var) -> Result<Var> {
    let shape = graph.shape(x).to_vec();
    if shape.len() != 2 {
        return Err(shape_err("normalize input", &shape, "[N, d]"));
    }
    if let Some(row) = (0..shape[0]).find(|&r| graph.value(x).row(r).iter().all(|v| v.is_zero())) {
        return Err(ContrastiveError::ZeroNorm { role: "normalize input", row });
    }
    let sq = graph.square(x);
    let ss = graph.reduce(sq, Reduce::Sum, 1)?;
    let norm = graph.sqrt(ss);
    let norm = graph.reshape(norm, &[shape[0], 1])?;
    Ok(graph.div(x, norm)?)
}

/// Distinct flat locations drawn uniformly from an `h x w` grid, sorted.
/// Requesting every location returns `0..h*w`.
pub fn sample_locations<R: Rng + ?Sized>(h: usize, w: usize, count: usize, rng: &mut R) -> Result<Vec<usize>> {
    let available = h * w;
    if count > available {
        return Err(ContrastiveError::TooManyPatches { count, available });
    }
    if count == available {
        return Ok((0..available).collect());
    }
    let mut idx = index::sample(rng, available, count).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Feature vectors `[count, C]` at flat locations of a `[1, C, H, W]` or
/// `[C, H, W]` feature map.
pub fn gather_patches<S: Scalar>(graph: &mut Graph<S>, features: Var, locations: &[usize]) -> Result<Var> {
    let shape = graph.shape(features).to_vec();
    let (c, hw) = match shape.as_slice() {
        [1, c, h, w] | [c, h, w] => (*c, h * w),
        _ => return Err(shape_err("feature map", &shape, "[1, C, H, W] or [C, H, W]")),
    };
    if let Some(&bad) = locations.iter().find(|&&l| l >= hw) {
        return Err(ContrastiveError::TooManyPatches {
            count: bad + 1,
            available: hw,
        });
    }
    let flat = graph.reshape(features, &[c, hw])?;
    let rows = graph.transpose(flat)?;
    Ok(graph.gather_rows(rows, locations)?)
}

/// Gathers patches, applies `project` (the shared head), and unit-normalizes.
pub fn embed_patches<S: Scalar, F>(
    graph: &mut Graph<S>,
    features: Var,
    locations: &[usize],
    layer_index: usize,
    project: F,
) -> Result<EmbeddingBatch>
where
    F: FnOnce(&mut Graph<S>, Var) -> Result<Var>,
{
    let patches = gather_patches(graph, features, locations)?;
    let projected = project(graph, patches)?;
    let unit = normalize_rows(graph, projected)?;
    Ok(EmbeddingBatch::new(graph, unit, layer_index, true)?)
}

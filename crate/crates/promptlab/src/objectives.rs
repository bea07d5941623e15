//! Loss functions: cosine-similarity classification probabilities,
//! cross-entropy, the KL general-knowledge loss, the embedding-distance
//! loss, and the mutual-information machinery (estimator, joint
//! class-probability matrix, MI objective, distance constraint, and the
//! weighted total loss).
//!
//! Everything composes graph primitives, so every loss is differentiable
//! with respect to whatever parameters feed it. Probabilities are clamped
//! at [`PROB_FLOOR`] inside logarithms; `0·log 0` contributes exactly 0.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::rng::{self, salt};
use crate::tensor::Tensor;

/// Probability floor applied inside logarithms for gradient stability.
pub const PROB_FLOOR: f64 = 1e-12;

/// Hidden width of the MI estimator unless overridden.
pub const DEFAULT_MI_HIDDEN: usize = 256;

/// `max(x, PROB_FLOOR)` elementwise, built from relu so it stays
/// differentiable: `relu(x − c) + c`.
fn clamp_floor(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    let shape = g.value(x).shape().to_vec();
    let floor = g.constant(Tensor::full(shape, PROB_FLOOR))?;
    let shifted = g.sub(x, floor)?;
    let pos = g.relu(shifted)?;
    g.add(pos, floor)
}

/// Clamped natural log.
fn log_clamped(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    let c = clamp_floor(g, x)?;
    g.log(c)
}

/// Cosine-similarity logits: entry `j` is `⟨row_j, feature⟩ / tau` over
/// unit-norm rows and a unit-norm feature.
pub fn similarity_logits(g: &mut Graph, rows: NodeId, feature: NodeId, tau: f64) -> Result<NodeId> {
    if tau <= 0.0 {
        return Err(Error::config("tau must be positive".to_string()));
    }
    let r = g.value(rows);
    let f = g.value(feature);
    if r.rank() != 2 || f.rank() != 1 || r.shape()[1] != f.shape()[0] {
        return Err(Error::shape(format!(
            "similarity_logits expects [C,d]·[d], got {:?} and {:?}",
            r.shape(),
            f.shape()
        )));
    }
    let sims = g.matmul(rows, feature)?;
    g.scale(sims, 1.0 / tau)
}

/// Softmax class probabilities over the hand-crafted rows (zero-shot
/// inference; rows are constants so nothing propagates).
pub fn zero_shot_probs(g: &mut Graph, handcrafted: NodeId, feature: NodeId, tau: f64) -> Result<NodeId> {
    let logits = similarity_logits(g, handcrafted, feature, tau)?;
    g.softmax_lastdim(logits)
}

/// Softmax class probabilities over the learnable rows; differentiable
/// with respect to the context through the rows.
pub fn prediction_probs(g: &mut Graph, learnable: NodeId, feature: NodeId, tau: f64) -> Result<NodeId> {
    let logits = similarity_logits(g, learnable, feature, tau)?;
    g.softmax_lastdim(logits)
}

fn validate_label(label: &Tensor) -> Result<()> {
    if label.rank() != 1 {
        return Err(Error::shape("label must be a vector".to_string()));
    }
    if label.data().iter().any(|&v| v < 0.0) {
        return Err(Error::domain("label entries must be nonnegative".to_string()));
    }
    let s: f64 = label.data().iter().sum();
    if (s - 1.0).abs() > 1e-6 {
        return Err(Error::domain(format!("label sums to {s}, expected 1")));
    }
    Ok(())
}

/// Cross-entropy `−Σ_i label_i · log probs_i` with soft-label support.
pub fn cross_entropy(g: &mut Graph, probs: NodeId, label: NodeId) -> Result<NodeId> {
    let p = g.value(probs);
    let l = g.value(label);
    if p.shape() != l.shape() || p.rank() != 1 {
        return Err(Error::shape(format!(
            "cross_entropy expects matching vectors, got {:?} and {:?}",
            p.shape(),
            l.shape()
        )));
    }
    validate_label(l)?;
    for (pi, li) in p.data().iter().zip(l.data()) {
        if *li > 0.0 && *pi <= 0.0 {
            return Err(Error::domain(format!(
                "probability {pi} is nonpositive where the label is {li}"
            )));
        }
    }
    let logp = log_clamped(g, probs)?;
    let weighted = g.mul(label, logp)?;
    let total = g.sum(weighted)?;
    g.scale(total, -1.0)
}

/// Cross-entropy straight from logits via the log-sum-exp identity
/// `log softmax(z) = z − m − log Σ exp(z − m)`. The shift `m = max(z)` is
/// a constant, so values stay finite for arbitrarily sharp temperatures
/// and the gradient is exact.
pub fn cross_entropy_from_logits(g: &mut Graph, logits: NodeId, label: NodeId) -> Result<NodeId> {
    let z = g.value(logits);
    let l = g.value(label);
    if z.shape() != l.shape() || z.rank() != 1 {
        return Err(Error::shape(format!(
            "cross_entropy_from_logits expects matching vectors, got {:?} and {:?}",
            z.shape(),
            l.shape()
        )));
    }
    validate_label(l)?;
    let m = z.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shift = g.constant(Tensor::full(z.shape().to_vec(), m))?;
    let centered = g.sub(logits, shift)?;
    let exps = g.exp(centered)?;
    let norm = g.sum(exps)?;
    let log_norm = g.log(norm)?;
    // −Σ y·(z − m) + log Σ exp(z − m), using Σ y = 1.
    let picked = g.mul(label, centered)?;
    let picked_sum = g.sum(picked)?;
    let neg_picked = g.scale(picked_sum, -1.0)?;
    g.add(neg_picked, log_norm)
}

/// General-knowledge KL loss `KL(p_zs ‖ p_pred)`; zero-probability
/// entries of `p_zs` contribute exactly 0.
pub fn kl_general_loss(g: &mut Graph, p_zs: NodeId, p_pred: NodeId) -> Result<NodeId> {
    let a = g.value(p_zs);
    let b = g.value(p_pred);
    if a.shape() != b.shape() || a.rank() != 1 {
        return Err(Error::shape(format!(
            "kl_general_loss expects matching vectors, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    for (&pa, &pb) in a.data().iter().zip(b.data()) {
        if pa < 0.0 || pb < 0.0 {
            return Err(Error::domain("distributions must be nonnegative".to_string()));
        }
        if pa > 0.0 && pb <= 0.0 {
            return Err(Error::domain(
                "prediction probability is zero where the reference is positive".to_string(),
            ));
        }
    }
    let log_a = log_clamped(g, p_zs)?;
    let log_b = log_clamped(g, p_pred)?;
    let diff = g.sub(log_a, log_b)?;
    let weighted = g.mul(p_zs, diff)?;
    g.sum(weighted)
}

/// Mean squared Euclidean distance between the two view matrices:
/// `(1/C) Σ_j ‖w_j − θ(t_j)‖²`.
pub fn kg_euclidean_loss(g: &mut Graph, handcrafted: NodeId, learnable: NodeId) -> Result<NodeId> {
    let a = g.value(handcrafted);
    let b = g.value(learnable);
    if a.shape() != b.shape() || a.rank() != 2 {
        return Err(Error::shape(format!(
            "kg_euclidean_loss expects matching matrices, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let c = a.shape()[0] as f64;
    let diff = g.sub(handcrafted, learnable)?;
    let sq = g.mul(diff, diff)?;
    let total = g.sum(sq)?;
    g.scale(total, 1.0 / c)
}

/// The learnable two-layer MI estimator `φ`: maps a C-vector view to C
/// logits through a relu hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MIEstimator {
    /// `hidden × C` first-layer weights.
    pub w1: Tensor,
    /// `hidden` first-layer bias.
    pub b1: Tensor,
    /// `C × hidden` second-layer weights.
    pub w2: Tensor,
    /// `C` second-layer bias.
    pub b2: Tensor,
    pub num_classes: usize,
    pub hidden: usize,
}

/// Per-graph parameter leaves of the estimator.
#[derive(Debug, Clone, Copy)]
pub struct MIEstimatorNodes {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

impl MIEstimator {
    /// Seeded init: weights at 1/√fan_in scale, zero biases.
    pub fn new_seeded(num_classes: usize, hidden: usize, seed: u64) -> Result<Self> {
        if num_classes < 1 || hidden < 1 {
            return Err(Error::config("estimator dims must be >= 1".to_string()));
        }
        let mut r = rng::stream(seed, salt::ESTIMATOR);
        let w1 = rng::normal_matrix(&mut r, hidden, num_classes, 1.0 / (num_classes as f64).sqrt());
        let w2 = rng::normal_matrix(&mut r, num_classes, hidden, 1.0 / (hidden as f64).sqrt());
        Ok(MIEstimator {
            w1,
            b1: Tensor::zeros(vec![hidden]),
            w2,
            b2: Tensor::zeros(vec![num_classes]),
            num_classes,
            hidden,
        })
    }

    /// All-zero estimator: forward output is the zero vector, so the
    /// induced distribution is uniform.
    pub fn zeros(num_classes: usize, hidden: usize) -> Self {
        MIEstimator {
            w1: Tensor::zeros(vec![hidden, num_classes]),
            b1: Tensor::zeros(vec![hidden]),
            w2: Tensor::zeros(vec![num_classes, hidden]),
            b2: Tensor::zeros(vec![num_classes]),
            num_classes,
            hidden,
        }
    }

    pub fn leaves(&self, g: &mut Graph, trainable: bool) -> Result<MIEstimatorNodes> {
        Ok(MIEstimatorNodes {
            w1: g.leaf(self.w1.clone(), trainable)?,
            b1: g.leaf(self.b1.clone(), trainable)?,
            w2: g.leaf(self.w2.clone(), trainable)?,
            b2: g.leaf(self.b2.clone(), trainable)?,
        })
    }

    /// Parameter tensors in checkpoint order (w1, b1, w2, b2).
    pub fn params(&self) -> [&Tensor; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

/// Estimator forward pass: `W2·relu(W1·view + b1) + b2`.
pub fn mi_estimator_forward(g: &mut Graph, est: MIEstimatorNodes, view: NodeId) -> Result<NodeId> {
    let v = g.value(view);
    let c = g.value(est.w1).shape()[1];
    if v.rank() != 1 || v.shape()[0] != c {
        return Err(Error::shape(format!(
            "estimator expects a length-{c} view, got {:?}",
            v.shape()
        )));
    }
    let pre = g.matmul(est.w1, view)?;
    let pre = g.add(pre, est.b1)?;
    let act = g.relu(pre)?;
    let out = g.matmul(est.w2, act)?;
    g.add(out, est.b2)
}

/// The symmetrized joint class-probability matrix with its marginals,
/// all as graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct JointProbabilityMatrix {
    /// `C × C` symmetrized joint matrix node.
    pub matrix: NodeId,
    /// Row sums, length `C`.
    pub row_marginal: NodeId,
    /// Column sums, length `C`.
    pub col_marginal: NodeId,
    pub dim: usize,
}

fn marginals(g: &mut Graph, p: NodeId, c: usize) -> Result<(NodeId, NodeId)> {
    let ones = g.constant(Tensor::vector(vec![1.0; c]))?;
    let rows = g.matmul(p, ones)?;
    let cols = g.matmul(ones, p)?;
    Ok((rows, cols))
}

/// Builds the joint matrix from per-sample distribution pairs:
/// `P = (1/n) Σ_i p_i¹ ⊗ p_i²`, symmetrized as `(P + Pᵀ)/2`, with
/// marginals recomputed after symmetrization.
pub fn joint_from_distributions(
    g: &mut Graph,
    pairs: &[(NodeId, NodeId)],
) -> Result<JointProbabilityMatrix> {
    if pairs.is_empty() {
        return Err(Error::domain("joint matrix requires a nonempty batch".to_string()));
    }
    let c = g.value(pairs[0].0).shape()[0];
    let mut acc: Option<NodeId> = None;
    for &(a, b) in pairs {
        if g.value(a).rank() != 1 || g.value(a).shape()[0] != c || g.value(b).shape() != [c] {
            return Err(Error::shape("all distributions must be length-C vectors".to_string()));
        }
        let outer = g.outer_product(a, b)?;
        acc = Some(match acc {
            None => outer,
            Some(prev) => g.add(prev, outer)?,
        });
    }
    let total = acc.expect("nonempty batch");
    let raw = g.scale(total, 1.0 / pairs.len() as f64)?;
    let rawt = g.transpose(raw)?;
    let doubled = g.add(raw, rawt)?;
    let sym = g.scale(doubled, 0.5)?;
    let (row_marginal, col_marginal) = marginals(g, sym, c)?;
    Ok(JointProbabilityMatrix { matrix: sym, row_marginal, col_marginal, dim: c })
}

/// Full estimator route: softmaxes `φ` over both views of every pair,
/// then averages the outer products.
pub fn joint_probability(
    g: &mut Graph,
    est: MIEstimatorNodes,
    view_pairs: &[(NodeId, NodeId)],
) -> Result<JointProbabilityMatrix> {
    if view_pairs.is_empty() {
        return Err(Error::domain("joint matrix requires a nonempty batch".to_string()));
    }
    let mut dist_pairs = Vec::with_capacity(view_pairs.len());
    for &(v1, v2) in view_pairs {
        let l1 = mi_estimator_forward(g, est, v1)?;
        let l2 = mi_estimator_forward(g, est, v2)?;
        let p1 = g.softmax_lastdim(l1)?;
        let p2 = g.softmax_lastdim(l2)?;
        dist_pairs.push((p1, p2));
    }
    joint_from_distributions(g, &dist_pairs)
}

/// Wraps an explicit matrix of joint probabilities as a graph-backed
/// [`JointProbabilityMatrix`], validating nonnegativity and total mass.
pub fn joint_from_tensor(g: &mut Graph, p: Tensor) -> Result<JointProbabilityMatrix> {
    if p.rank() != 2 || p.shape()[0] != p.shape()[1] {
        return Err(Error::shape(format!("joint matrix must be square, got {:?}", p.shape())));
    }
    if p.data().iter().any(|&v| v < 0.0) {
        return Err(Error::domain("joint matrix entries must be nonnegative".to_string()));
    }
    let total: f64 = p.data().iter().sum();
    if (total - 1.0).abs() > 1e-8 {
        return Err(Error::domain(format!("joint matrix sums to {total}, expected 1")));
    }
    let c = p.shape()[0];
    let node = g.constant(p)?;
    let (row_marginal, col_marginal) = marginals(g, node, c)?;
    Ok(JointProbabilityMatrix { matrix: node, row_marginal, col_marginal, dim: c })
}

fn validate_distribution(t: &Tensor) -> Result<()> {
    if t.data().iter().any(|&v| v < 0.0) {
        return Err(Error::domain("distribution entries must be nonnegative".to_string()));
    }
    let s: f64 = t.data().iter().sum();
    if (s - 1.0).abs() > 1e-6 {
        return Err(Error::domain(format!("distribution sums to {s}, expected 1 within 1e-6")));
    }
    Ok(())
}

/// Shannon entropy `−Σ p log p` (natural log, `0·log 0 = 0`).
pub fn entropy(g: &mut Graph, dist: NodeId) -> Result<NodeId> {
    validate_distribution(g.value(dist))?;
    let logp = log_clamped(g, dist)?;
    let plogp = g.mul(dist, logp)?;
    let s = g.sum(plogp)?;
    g.scale(s, -1.0)
}

/// Joint entropy of the whole matrix; same kernel as [`entropy`] over all
/// C² entries.
pub fn joint_entropy(g: &mut Graph, p: NodeId) -> Result<NodeId> {
    validate_distribution(g.value(p))?;
    let logp = log_clamped(g, p)?;
    let plogp = g.mul(p, logp)?;
    let s = g.sum(plogp)?;
    g.scale(s, -1.0)
}

/// Mutual-information surrogate
/// `(1/3)·[H(m1) + H(m2) + H(P)]`, to be *maximized*.
pub fn mi_objective(g: &mut Graph, jpm: &JointProbabilityMatrix) -> Result<NodeId> {
    let h1 = entropy(g, jpm.row_marginal)?;
    let h2 = entropy(g, jpm.col_marginal)?;
    let hj = joint_entropy(g, jpm.matrix)?;
    let s = g.add(h1, h2)?;
    let s = g.add(s, hj)?;
    g.scale(s, 1.0 / 3.0)
}

/// Distance constraint tying the joint to its marginals:
/// with `dg = diag(P)/trace(P)`, returns `KL(dg ‖ m1) + KL(dg ‖ m2)`.
///
/// Each KL term is composed as `(1/T)·Σ_i g_i·(log g_i − log m_i) − log T`
/// where `g = diag(P)` and `T = trace(P)`; the division by the graph
/// scalar `T` is expressed as multiplication by `exp(−log T)` and the
/// algebraic `−log T` remainder, which keeps every step inside the
/// primitive set and exactly differentiable.
pub fn distance_constraint(g: &mut Graph, jpm: &JointProbabilityMatrix) -> Result<NodeId> {
    let c = jpm.dim;
    let eye = {
        let mut data = vec![0.0; c * c];
        for i in 0..c {
            data[i * c + i] = 1.0;
        }
        g.constant(Tensor::matrix(c, c, data)?)?
    };
    let masked = g.mul(jpm.matrix, eye)?;
    let trace = g.sum(masked)?;
    if g.value(trace).scalar_value() <= 0.0 {
        return Err(Error::domain("distance constraint requires a positive trace".to_string()));
    }
    let ones = g.constant(Tensor::vector(vec![1.0; c]))?;
    let diag = g.matmul(masked, ones)?;

    let log_trace = g.log(trace)?;
    let neg_log_trace = g.scale(log_trace, -1.0)?;
    let inv_trace = g.exp(neg_log_trace)?;

    let log_diag = log_clamped(g, diag)?;
    let mut total: Option<NodeId> = None;
    for marginal in [jpm.row_marginal, jpm.col_marginal] {
        let log_m = log_clamped(g, marginal)?;
        let diff = g.sub(log_diag, log_m)?;
        let weighted = g.mul(diag, diff)?;
        let s1 = g.sum(weighted)?;
        let scaled = g.mul(inv_trace, s1)?;
        let kl = g.add(scaled, neg_log_trace)?;
        total = Some(match total {
            None => kl,
            Some(prev) => g.add(prev, kl)?,
        });
    }
    Ok(total.expect("two KL terms"))
}

/// Weights of the MI and distance-constraint terms in the total loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl LossWeights {
    pub fn new(lambda1: f64, lambda2: f64) -> Result<Self> {
        if !lambda1.is_finite() || !lambda2.is_finite() || lambda1 < 0.0 || lambda2 < 0.0 {
            return Err(Error::config("loss weights must be finite and nonnegative".to_string()));
        }
        Ok(LossWeights { lambda1, lambda2 })
    }
}

/// Total objective `L = L_ce − λ1·MI(P) + λ2·L_dc(P)`: the negated MI term
/// turns maximization of mutual information into a minimized loss.
pub fn total_loss(
    g: &mut Graph,
    ce: NodeId,
    jpm: &JointProbabilityMatrix,
    weights: &LossWeights,
) -> Result<NodeId> {
    if g.value(ce).numel() != 1 {
        return Err(Error::shape("cross-entropy term must be scalar".to_string()));
    }
    let mi = mi_objective(g, jpm)?;
    let mi_term = g.scale(mi, -weights.lambda1)?;
    let dc = distance_constraint(g, jpm)?;
    let dc_term = g.scale(dc, weights.lambda2)?;
    let s = g.add(ce, mi_term)?;
    g.add(s, dc_term)
}

// ── Value-level conveniences ────────────────────────────────────────────
// Thin wrappers that run the graph compositions on constants, for
// analysis code and tests that only need numbers.

pub fn entropy_value(dist: &[f64]) -> Result<f64> {
    let mut g = Graph::new();
    let d = g.constant(Tensor::vector(dist.to_vec()))?;
    let h = entropy(&mut g, d)?;
    Ok(g.value(h).scalar_value())
}

pub fn mi_objective_value(p: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let jpm = joint_from_tensor(&mut g, p.clone())?;
    let mi = mi_objective(&mut g, &jpm)?;
    Ok(g.value(mi).scalar_value())
}

pub fn distance_constraint_value(p: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let jpm = joint_from_tensor(&mut g, p.clone())?;
    let dc = distance_constraint(&mut g, &jpm)?;
    Ok(g.value(dc).scalar_value())
}

pub fn cross_entropy_value(probs: &[f64], label: &[f64]) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(Tensor::vector(probs.to_vec()))?;
    let l = g.constant(Tensor::vector(label.to_vec()))?;
    let ce = cross_entropy(&mut g, p, l)?;
    Ok(g.value(ce).scalar_value())
}

pub fn kl_value(p: &[f64], q: &[f64]) -> Result<f64> {
    let mut g = Graph::new();
    let pn = g.constant(Tensor::vector(p.to_vec()))?;
    let qn = g.constant(Tensor::vector(q.to_vec()))?;
    let kl = kl_general_loss(&mut g, pn, qn)?;
    Ok(g.value(kl).scalar_value())
}

/// Identity-diagonal joint matrix `I_C / C`, the perfect-agreement case.
pub fn diagonal_joint(c: usize) -> Tensor {
    let mut data = vec![0.0; c * c];
    for i in 0..c {
        data[i * c + i] = 1.0 / c as f64;
    }
    Tensor::matrix(c, c, data).expect("square shape")
}

/// Uniform joint matrix with every entry `1/C²`, the fully degenerate case.
pub fn uniform_joint(c: usize) -> Tensor {
    Tensor::full(vec![c, c], 1.0 / (c * c) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn similarity_logits_match_cosine_over_tau() {
        let mut g = Graph::new();
        let rows = g
            .constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap())
            .unwrap();
        let f = g.constant(Tensor::vector(vec![1.0, 0.0])).unwrap();
        let l1 = similarity_logits(&mut g, rows, f, 1.0).unwrap();
        assert_eq!(g.value(l1).data(), &[1.0, 0.0]);
        let l2 = similarity_logits(&mut g, rows, f, 0.01).unwrap();
        assert_eq!(g.value(l2).data(), &[100.0, 0.0]);
        assert!(similarity_logits(&mut g, rows, f, 0.0).is_err());
    }

    #[test]
    fn zero_shot_probs_on_logit_gap_one() {
        // similarities (1, 0) at tau=1: softmax = (e/(e+1), 1/(e+1)).
        let mut g = Graph::new();
        let rows = g
            .constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap())
            .unwrap();
        let f = g.constant(Tensor::vector(vec![1.0, 0.0])).unwrap();
        let p = zero_shot_probs(&mut g, rows, f, 1.0).unwrap();
        let v = g.value(p).data().to_vec();
        assert!(close(v[0], 0.7311, 1e-4), "{v:?}");
        assert!(close(v[1], 0.2689, 1e-4), "{v:?}");
    }

    #[test]
    fn single_class_probability_is_one() {
        let mut g = Graph::new();
        let rows = g.constant(Tensor::matrix(1, 3, vec![1.0, 0.0, 0.0]).unwrap()).unwrap();
        let f = g.constant(Tensor::vector(vec![0.0, 1.0, 0.0])).unwrap();
        let p = zero_shot_probs(&mut g, rows, f, 0.5).unwrap();
        assert_eq!(g.value(p).data(), &[1.0]);
    }

    #[test]
    fn cross_entropy_known_values() {
        // One-hot on certainty → 0; uniform over 4 → ln 4; an even soft
        // label over an even split → ln 2.
        assert_eq!(cross_entropy_value(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        let u4 = cross_entropy_value(&[0.25; 4], &[0.0, 1.0, 0.0, 0.0]).unwrap();
        assert!(close(u4, 4.0f64.ln(), 1e-12));
        let half = cross_entropy_value(&[0.5, 0.5], &[0.5, 0.5]).unwrap();
        assert!(close(half, 2.0f64.ln(), 1e-12));
    }

    #[test]
    fn cross_entropy_rejects_zero_prob_on_supported_label() {
        assert!(cross_entropy_value(&[0.0, 1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn logit_and_prob_routes_agree() {
        let logits = [1.3, -0.4, 0.9];
        let probs = crate::tensor::softmax_row(&logits);
        let label = [0.2, 0.5, 0.3];
        let via_probs = cross_entropy_value(&probs, &label).unwrap();
        let mut g = Graph::new();
        let z = g.constant(Tensor::vector(logits.to_vec())).unwrap();
        let l = g.constant(Tensor::vector(label.to_vec())).unwrap();
        let ce = cross_entropy_from_logits(&mut g, z, l).unwrap();
        assert!(close(g.value(ce).scalar_value(), via_probs, 1e-12));
    }

    #[test]
    fn kl_known_values_and_nonnegativity() {
        assert_eq!(kl_value(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        // Degenerate reference against the uniform prediction → ln 2.
        let v = kl_value(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!(close(v, 2.0f64.ln(), 1e-12));
        for seed in 0..20u64 {
            let mut r = crate::rng::stream(seed, 0x77);
            let draw = |r: &mut rand_chacha::ChaCha8Rng| {
                let mut v: Vec<f64> = crate::rng::normal_vec(r, 4).iter().map(|x| x.exp()).collect();
                let s: f64 = v.iter().sum();
                v.iter_mut().for_each(|x| *x /= s);
                v
            };
            let p = draw(&mut r);
            let q = draw(&mut r);
            assert!(kl_value(&p, &q).unwrap() >= -1e-15);
        }
    }

    #[test]
    fn kg_loss_on_orthonormal_pair_is_two() {
        let mut g = Graph::new();
        let w = g.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap()).unwrap();
        let t = g.constant(Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap()).unwrap();
        let l = kg_euclidean_loss(&mut g, w, t).unwrap();
        assert_eq!(g.value(l).scalar_value(), 2.0);
        let same = kg_euclidean_loss(&mut g, w, w).unwrap();
        assert_eq!(g.value(same).scalar_value(), 0.0);
    }

    #[test]
    fn zero_estimator_gives_uniform_distributions_and_flat_joint() {
        let est = MIEstimator::zeros(3, 8);
        let mut g = Graph::new();
        let nodes = est.leaves(&mut g, false).unwrap();
        let view = g.constant(Tensor::vector(vec![0.4, -1.0, 2.0])).unwrap();
        let out = mi_estimator_forward(&mut g, nodes, view).unwrap();
        assert_eq!(g.value(out).data(), &[0.0, 0.0, 0.0]);
        let jpm = joint_probability(&mut g, nodes, &[(view, view)]).unwrap();
        for &v in g.value(jpm.matrix).data() {
            assert!(close(v, 1.0 / 9.0, 1e-15));
        }
    }

    #[test]
    fn estimator_forward_matches_straight_line_evaluation() {
        let est = MIEstimator::new_seeded(4, 6, 99).unwrap();
        let view = vec![0.3, -0.8, 1.1, 0.05];
        let mut g = Graph::new();
        let nodes = est.leaves(&mut g, false).unwrap();
        let v = g.constant(Tensor::vector(view.clone())).unwrap();
        let out = mi_estimator_forward(&mut g, nodes, v).unwrap();

        let mut hidden = vec![0.0; est.hidden];
        for (i, h) in hidden.iter_mut().enumerate() {
            let mut s = est.b1.data()[i];
            for (j, x) in view.iter().enumerate() {
                s += est.w1.data()[i * est.num_classes + j] * x;
            }
            *h = s.max(0.0);
        }
        for i in 0..est.num_classes {
            let mut s = est.b2.data()[i];
            for (j, h) in hidden.iter().enumerate() {
                s += est.w2.data()[i * est.hidden + j] * h;
            }
            assert!(close(g.value(out).data()[i], s, 1e-12));
        }
    }

    #[test]
    fn joint_matrix_from_hand_picked_distributions() {
        // Outer-product average of ((0.9,0.1)⊗(0.8,0.2)) and
        // ((0.6,0.4)⊗(0.3,0.7)), then symmetrized.
        let mut g = Graph::new();
        let a1 = g.constant(Tensor::vector(vec![0.9, 0.1])).unwrap();
        let a2 = g.constant(Tensor::vector(vec![0.8, 0.2])).unwrap();
        let b1 = g.constant(Tensor::vector(vec![0.6, 0.4])).unwrap();
        let b2 = g.constant(Tensor::vector(vec![0.3, 0.7])).unwrap();
        let jpm = joint_from_distributions(&mut g, &[(a1, a2), (b1, b2)]).unwrap();
        let p = g.value(jpm.matrix);
        let expected = [0.45, 0.20, 0.20, 0.15];
        for (got, want) in p.data().iter().zip(expected) {
            assert!(close(*got, want, 1e-15), "{got} vs {want}");
        }
        let m1 = g.value(jpm.row_marginal).data().to_vec();
        assert!(close(m1[0], 0.65, 1e-15) && close(m1[1], 0.35, 1e-15));
    }

    #[test]
    fn entropy_known_values() {
        assert!(close(entropy_value(&[0.25; 4]).unwrap(), 4.0f64.ln(), 1e-12));
        assert_eq!(entropy_value(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        assert!(close(entropy_value(&[0.25, 0.75]).unwrap(), 0.5623, 1e-4));
        assert!(entropy_value(&[-0.1, 1.1]).is_err());
    }

    #[test]
    fn mi_objective_on_canonical_matrices() {
        for c in 2..=10 {
            let lnc = (c as f64).ln();
            let mi_diag = mi_objective_value(&diagonal_joint(c)).unwrap();
            assert!(close(mi_diag, lnc, 1e-12), "C={c}: {mi_diag} vs {lnc}");
            // The uniform joint scores even higher, which is exactly why
            // the distance constraint exists.
            let mi_uni = mi_objective_value(&uniform_joint(c)).unwrap();
            assert!(close(mi_uni, 4.0 / 3.0 * lnc, 1e-12), "C={c}");
        }
    }

    #[test]
    fn distance_constraint_vanishes_on_diagonal_joint() {
        for c in 2..=10 {
            let dc = distance_constraint_value(&diagonal_joint(c)).unwrap();
            assert!(dc.abs() <= 1e-12, "C={c}: {dc}");
        }
        let sym = Tensor::matrix(2, 2, vec![0.4, 0.1, 0.1, 0.4]).unwrap();
        assert!(distance_constraint_value(&sym).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn distance_constraint_matches_brute_force_kl() {
        // Generic asymmetric-marginal case, checked against a direct
        // summation of both KL terms.
        let p = Tensor::matrix(2, 2, vec![0.5, 0.25, 0.15, 0.10]).unwrap();
        let got = distance_constraint_value(&p).unwrap();
        let diag = [0.5, 0.10];
        let trace: f64 = diag.iter().sum();
        let d: Vec<f64> = diag.iter().map(|v| v / trace).collect();
        let m1 = [0.75, 0.25];
        let m2 = [0.65, 0.35];
        let kl = |a: &[f64], b: &[f64]| -> f64 {
            a.iter().zip(b).map(|(&x, &y)| if x > 0.0 { x * (x / y).ln() } else { 0.0 }).sum()
        };
        let want = kl(&d, &m1) + kl(&d, &m2);
        assert!(close(got, want, 1e-12), "{got} vs {want}");
    }

    #[test]
    fn total_loss_composes_the_three_terms() {
        let mut g = Graph::new();
        let ce = g.constant(Tensor::scalar(0.9)).unwrap();
        let jpm = joint_from_tensor(&mut g, diagonal_joint(4)).unwrap();
        let w = LossWeights::new(1.0, 2.0).unwrap();
        let l = total_loss(&mut g, ce, &jpm, &w).unwrap();
        // Perfect-agreement joint: MI = ln C, dc = 0 → L = ce − ln C.
        assert!(close(g.value(l).scalar_value(), 0.9 - 4.0f64.ln(), 1e-12));

        let zero = LossWeights::new(0.0, 0.0).unwrap();
        let l0 = total_loss(&mut g, ce, &jpm, &zero).unwrap();
        assert_eq!(g.value(l0).scalar_value(), 0.9);
    }
}

//! Seeded synthetic frozen text encoder.
//!
//! Stands in for a pre-trained text encoder: a fixed two-layer tanh MLP
//! over mean-pooled tokens whose weights are a pure function of
//! `(seed, dim, hidden)`. Outputs always have unit L2 norm, and the
//! forward pass is differentiable with respect to the input tokens so
//! gradients reach learnable context vectors while the weights stay frozen.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::rng::{self, salt};
use crate::tensor::Tensor;

/// Frozen token-sequence encoder: `l2_normalize(W2·tanh(W1·meanpool(tokens) + b1) + b2)`.
#[derive(Debug, Clone)]
pub struct SyntheticTextEncoder {
    /// First-layer weights, `hidden × dim`.
    pub w1: Tensor,
    /// First-layer bias, length `hidden`.
    pub b1: Tensor,
    /// Second-layer weights, `dim × hidden`.
    pub w2: Tensor,
    /// Second-layer bias, length `dim`.
    pub b2: Tensor,
    pub seed: u64,
    pub dim: usize,
    pub hidden: usize,
}

/// Per-graph leaf ids of the frozen weights; create once per graph and
/// reuse across classes so the tape stays small.
#[derive(Debug, Clone, Copy)]
pub struct EncoderNodes {
    w1: NodeId,
    b1: NodeId,
    w2: NodeId,
    b2: NodeId,
}

impl SyntheticTextEncoder {
    /// Regenerates the frozen weights from `(seed, dim, hidden)`.
    ///
    /// Weights follow 1/√fan_in scaling with a mild first-layer gain so
    /// mean-pooled tokens land in the responsive region of tanh. Bias
    /// vectors are drawn with total norm ≈ 0.01: a bias adds the same
    /// direction to every class embedding, and a large shared component
    /// would collapse the normalized outputs toward a single point.
    pub fn new(seed: u64, dim: usize, hidden: usize) -> Result<Self> {
        if dim < 2 || hidden < 1 {
            return Err(Error::config(format!(
                "encoder dims must satisfy dim >= 2, hidden >= 1 (got {dim}, {hidden})"
            )));
        }
        let mut r = rng::stream(seed, salt::ENCODER);
        let w1 = rng::normal_matrix(&mut r, hidden, dim, 1.5 / (dim as f64).sqrt());
        let b1_scale = 0.01 / (hidden as f64).sqrt();
        let b1 =
            Tensor::vector(rng::normal_vec(&mut r, hidden).iter().map(|v| b1_scale * v).collect());
        let w2 = rng::normal_matrix(&mut r, dim, hidden, 1.0 / (hidden as f64).sqrt());
        let b2_scale = 0.01 / (dim as f64).sqrt();
        let b2 =
            Tensor::vector(rng::normal_vec(&mut r, dim).iter().map(|v| b2_scale * v).collect());
        Ok(SyntheticTextEncoder { w1, b1, w2, b2, seed, dim, hidden })
    }

    /// Inserts the frozen weights into `g` as constants.
    pub fn leaves(&self, g: &mut Graph) -> Result<EncoderNodes> {
        Ok(EncoderNodes {
            w1: g.constant(self.w1.clone())?,
            b1: g.constant(self.b1.clone())?,
            w2: g.constant(self.w2.clone())?,
            b2: g.constant(self.b2.clone())?,
        })
    }

    /// Differentiable forward pass over a token matrix already in the
    /// graph (`n_tokens × dim`, `n_tokens ≥ 1`). Returns a unit-norm
    /// `dim`-vector node.
    pub fn encode_node(&self, g: &mut Graph, weights: EncoderNodes, tokens: NodeId) -> Result<NodeId> {
        let t = g.value(tokens);
        if t.rank() != 2 || t.shape()[1] != self.dim {
            return Err(Error::shape(format!(
                "encoder expects tokens of shape [n, {}], got {:?}",
                self.dim,
                t.shape()
            )));
        }
        let n_tokens = t.shape()[0];
        let ones = g.constant(Tensor::vector(vec![1.0; n_tokens]))?;
        let summed = g.matmul(ones, tokens)?;
        let pooled = g.scale(summed, 1.0 / n_tokens as f64)?;
        let pre = g.matmul(weights.w1, pooled)?;
        let pre = g.add(pre, weights.b1)?;
        let act = g.tanh(pre)?;
        let out = g.matmul(weights.w2, act)?;
        let out = g.add(out, weights.b2)?;
        g.l2_normalize_rows(out)
    }

    /// Value-level encode of a token sequence. Runs the same graph kernels
    /// with gradients disabled, so results are bit-identical to the
    /// differentiable path.
    pub fn encode(&self, tokens: &[Vec<f64>]) -> Result<Tensor> {
        if tokens.is_empty() {
            return Err(Error::domain("encoder requires at least one token"));
        }
        if tokens.iter().any(|t| t.len() != self.dim) {
            return Err(Error::shape(format!(
                "every token must have dimension {}",
                self.dim
            )));
        }
        let mut g = Graph::new();
        let toks = g.constant(Tensor::from_rows(tokens)?)?;
        let weights = self.leaves(&mut g)?;
        let out = self.encode_node(&mut g, weights, toks)?;
        Ok(g.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::l2_norm;

    #[test]
    fn regeneration_from_seed_is_bit_identical() {
        let a = SyntheticTextEncoder::new(11, 8, 16).unwrap();
        let b = SyntheticTextEncoder::new(11, 8, 16).unwrap();
        assert_eq!(a.w1, b.w1);
        assert_eq!(a.b1, b.b1);
        assert_eq!(a.w2, b.w2);
        assert_eq!(a.b2, b.b2);
    }

    #[test]
    fn encode_is_deterministic_and_unit_norm() {
        let enc = SyntheticTextEncoder::new(5, 6, 12).unwrap();
        let tokens = vec![vec![0.5, -0.1, 0.3, 0.0, 0.2, -0.6], vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]];
        let a = enc.encode(&tokens).unwrap();
        let b = enc.encode(&tokens).unwrap();
        assert_eq!(a, b);
        assert!((l2_norm(a.data()) - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn encode_rejects_empty_and_misdimensioned_tokens() {
        let enc = SyntheticTextEncoder::new(5, 4, 8).unwrap();
        assert!(enc.encode(&[]).is_err());
        assert!(enc.encode(&[vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn encode_matches_straight_line_reimplementation() {
        // Independent re-evaluation of the formula with plain loops,
        // reading the same frozen weights.
        let (d, h) = (4, 8);
        let enc = SyntheticTextEncoder::new(7, d, h).unwrap();
        let tokens = vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]];
        let got = enc.encode(&tokens).unwrap();

        let mut pooled = vec![0.0; d];
        for t in &tokens {
            for (p, v) in pooled.iter_mut().zip(t) {
                *p += v;
            }
        }
        for p in pooled.iter_mut() {
            *p /= tokens.len() as f64;
        }
        let mut hid = vec![0.0; h];
        for (i, hv) in hid.iter_mut().enumerate() {
            let mut s = enc.b1.data()[i];
            for (j, p) in pooled.iter().enumerate() {
                s += enc.w1.data()[i * d + j] * p;
            }
            *hv = s.tanh();
        }
        let mut out = vec![0.0; d];
        for (i, ov) in out.iter_mut().enumerate() {
            let mut s = enc.b2.data()[i];
            for (j, hv) in hid.iter().enumerate() {
                s += enc.w2.data()[i * h + j] * hv;
            }
            *ov = s;
        }
        let norm = l2_norm(&out);
        for o in out.iter_mut() {
            *o /= norm;
        }
        for (g, e) in got.data().iter().zip(&out) {
            assert!((g - e).abs() <= 1e-12, "{g} vs {e}");
        }
    }
}

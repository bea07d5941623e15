//! Central finite-difference verification of reverse-mode gradients.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

/// Default probe step for central differences.
pub const DEFAULT_EPS: f64 = 1e-6;

/// Builds `objective` over fresh leaves for `params` (all `requires_grad`),
/// differentiates it analytically, then probes every parameter entry with a
/// central difference of step `eps`.
///
/// Returns the maximum over all entries of
/// `|analytic − numeric| / max(1, |numeric|)`.
pub fn finite_difference_check<F>(objective: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if eps <= 0.0 {
        return Err(Error::config("finite difference eps must be positive"));
    }

    let evaluate = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = values
            .iter()
            .map(|t| g.leaf(t.clone(), false))
            .collect::<Result<_>>()?;
        let loss = objective(&mut g, &ids)?;
        let v = g.value(loss);
        if v.numel() != 1 {
            return Err(Error::shape("objective must evaluate to a scalar"));
        }
        let out = v.scalar_value();
        if !out.is_finite() {
            return Err(Error::domain("objective value is not finite"));
        }
        Ok(out)
    };

    // Analytic pass.
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params
        .iter()
        .map(|t| g.leaf(t.clone(), true))
        .collect::<Result<_>>()?;
    let loss = objective(&mut g, &ids)?;
    if g.value(loss).numel() != 1 {
        return Err(Error::shape("objective must evaluate to a scalar"));
    }
    if !g.value(loss).scalar_value().is_finite() {
        return Err(Error::domain("objective value is not finite"));
    }
    let grads = g.backward(loss)?;

    let mut worst: f64 = 0.0;
    let mut probe: Vec<Tensor> = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        let analytic = grads.get(ids[pi]);
        for ei in 0..param.numel() {
            let original = param.data()[ei];
            probe[pi].data_mut()[ei] = original + eps;
            let plus = evaluate(&probe)?;
            probe[pi].data_mut()[ei] = original - eps;
            let minus = evaluate(&probe)?;
            probe[pi].data_mut()[ei] = original;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.map_or(0.0, |t| t.data()[ei]);
            let err = (a - numeric).abs() / numeric.abs().max(1.0);
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}

/// Maximum relative errors of the loss-gradient sweep, one entry per
/// objective family.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossSuiteOutcome {
    pub cross_entropy: f64,
    pub kl_general: f64,
    pub kg_euclidean: f64,
    pub total: f64,
}

impl LossSuiteOutcome {
    pub fn worst(&self) -> f64 {
        self.cross_entropy.max(self.kl_general).max(self.kg_euclidean).max(self.total)
    }

    fn merge(self, other: LossSuiteOutcome) -> LossSuiteOutcome {
        LossSuiteOutcome {
            cross_entropy: self.cross_entropy.max(other.cross_entropy),
            kl_general: self.kl_general.max(other.kl_general),
            kg_euclidean: self.kg_euclidean.max(other.kg_euclidean),
            total: self.total.max(other.total),
        }
    }
}

/// Sweeps seeded random instances (C ≤ 5, d ≤ 16, batch ≤ 8) of the four
/// training objectives — cross-entropy, the KL general loss, the
/// embedding-distance loss, and the full composite loss — checking the
/// analytic gradient of each against central differences over every
/// context and estimator entry. Returns the per-family worst errors.
pub fn run_loss_gradient_suite(base_seed: u64, trials: usize) -> Result<LossSuiteOutcome> {
    if trials == 0 {
        return Err(Error::config("trials must be positive"));
    }
    let seeds: Vec<u64> = (0..trials as u64).map(|i| crate::rng::derive_seed(base_seed, 0xA000 + i)).collect();
    let outcomes: Vec<Result<LossSuiteOutcome>> =
        crate::parallel::ordered_map(&seeds, |&s| loss_instance(s));
    let mut merged = LossSuiteOutcome::default();
    for o in outcomes {
        merged = merged.merge(o?);
    }
    Ok(merged)
}

fn loss_instance(seed: u64) -> Result<LossSuiteOutcome> {
    use crate::encoder::SyntheticTextEncoder;
    use crate::objectives::{
        cross_entropy_from_logits, joint_probability, kg_euclidean_loss, kl_general_loss,
        prediction_probs, similarity_logits, total_loss, zero_shot_probs, LossWeights,
        MIEstimator,
    };
    use crate::tensor::l2_normalize_in_place;
    use rand::Rng;

    let mut r = crate::rng::stream(seed, 0x6c);
    let c = r.gen_range(2..=5usize);
    let d = r.gen_range(4..=16usize);
    let batch = r.gen_range(2..=8usize);
    let m = r.gen_range(1..=4usize);
    let hidden = 16usize;
    let tau = r.gen_range(0.05..=1.0f64);

    let encoder = SyntheticTextEncoder::new(seed, d, hidden)?;
    let unit_rows = |r: &mut rand_chacha::ChaCha8Rng, rows: usize| -> Result<Tensor> {
        let mut t = crate::rng::normal_matrix(r, rows, d, 1.0);
        for row in 0..rows {
            let data = t.data_mut();
            l2_normalize_in_place(&mut data[row * d..(row + 1) * d])?;
        }
        Ok(t)
    };
    let class_tokens = unit_rows(&mut r, c)?;
    let handcrafted = unit_rows(&mut r, c)?;
    let features = unit_rows(&mut r, batch)?;
    let labels: Vec<Vec<f64>> = (0..batch)
        .map(|_| {
            let mut l = vec![0.0; c];
            let a = r.gen_range(0..c);
            if c >= 2 && r.gen_bool(0.5) {
                // Mixed-style soft label over two distinct classes.
                let mut b = r.gen_range(0..c);
                while b == a {
                    b = r.gen_range(0..c);
                }
                let lambda = r.gen_range(0.4..=0.6);
                l[a] = lambda;
                l[b] = 1.0 - lambda;
            } else {
                l[a] = 1.0;
            }
            l
        })
        .collect();

    let ctx0 = crate::rng::normal_matrix(&mut r, m, d, 0.05);
    let est0 = MIEstimator::new_seeded(c, hidden, seed)?;

    // Shared forward: learnable rows from the context leaf.
    let learnable_rows = |g: &mut Graph, ctx: NodeId| -> Result<NodeId> {
        let weights = encoder.leaves(g)?;
        let mut rows = Vec::with_capacity(c);
        for i in 0..c {
            let tok = g.constant(Tensor::matrix(1, d, class_tokens.row(i).to_vec())?)?;
            let prompt = g.concat_rows(&[ctx, tok])?;
            rows.push(encoder.encode_node(g, weights, prompt)?);
        }
        g.concat_rows(&rows)
    };
    let batch_mean = |g: &mut Graph, terms: Vec<NodeId>| -> Result<NodeId> {
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = g.add(acc, t)?;
        }
        g.scale(acc, 1.0 / terms.len() as f64)
    };

    let ce_objective = |g: &mut Graph, ids: &[NodeId]| -> Result<NodeId> {
        let rows = learnable_rows(g, ids[0])?;
        let mut terms = Vec::new();
        for (b, label) in labels.iter().enumerate() {
            let f = g.constant(Tensor::vector(features.row(b).to_vec()))?;
            let l = g.constant(Tensor::vector(label.clone()))?;
            let logits = similarity_logits(g, rows, f, tau)?;
            terms.push(cross_entropy_from_logits(g, logits, l)?);
        }
        batch_mean(g, terms)
    };
    let kl_objective = |g: &mut Graph, ids: &[NodeId]| -> Result<NodeId> {
        let rows = learnable_rows(g, ids[0])?;
        let hc = g.constant(handcrafted.clone())?;
        let mut terms = Vec::new();
        for b in 0..batch {
            let f = g.constant(Tensor::vector(features.row(b).to_vec()))?;
            let zs = zero_shot_probs(g, hc, f, tau)?;
            let pred = prediction_probs(g, rows, f, tau)?;
            terms.push(kl_general_loss(g, zs, pred)?);
        }
        batch_mean(g, terms)
    };
    let kg_objective = |g: &mut Graph, ids: &[NodeId]| -> Result<NodeId> {
        let rows = learnable_rows(g, ids[0])?;
        let hc = g.constant(handcrafted.clone())?;
        kg_euclidean_loss(g, hc, rows)
    };
    let total_objective = |g: &mut Graph, ids: &[NodeId]| -> Result<NodeId> {
        let rows = learnable_rows(g, ids[0])?;
        let hc = g.constant(handcrafted.clone())?;
        let est = crate::objectives::MIEstimatorNodes {
            w1: ids[1],
            b1: ids[2],
            w2: ids[3],
            b2: ids[4],
        };
        let mut terms = Vec::new();
        let mut pairs = Vec::new();
        for (b, label) in labels.iter().enumerate() {
            let f = g.constant(Tensor::vector(features.row(b).to_vec()))?;
            let l = g.constant(Tensor::vector(label.clone()))?;
            let logits = similarity_logits(g, rows, f, tau)?;
            terms.push(cross_entropy_from_logits(g, logits, l)?);
            let general = similarity_logits(g, hc, f, tau)?;
            pairs.push((general, logits));
        }
        let ce = batch_mean(g, terms)?;
        let jpm = joint_probability(g, est, &pairs)?;
        total_loss(g, ce, &jpm, &LossWeights::new(1.0, 2.0)?)
    };

    let ctx_params = [ctx0.clone()];
    let eps = DEFAULT_EPS;
    let out = LossSuiteOutcome {
        cross_entropy: finite_difference_check(ce_objective, &ctx_params, eps)?,
        kl_general: finite_difference_check(kl_objective, &ctx_params, eps)?,
        kg_euclidean: finite_difference_check(kg_objective, &ctx_params, eps)?,
        total: finite_difference_check(
            total_objective,
            &[ctx0, est0.w1.clone(), est0.b1.clone(), est0.w2.clone(), est0.b2.clone()],
            eps,
        )?,
    };
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_objective_is_exact_under_central_differences() {
        // f(x) = Σ x² has zero third derivative, so the truncation error
        // vanishes and only rounding remains.
        let x = Tensor::vector(vec![0.7, -1.4, 2.2]);
        let err = finite_difference_check(
            |g, ids| {
                let sq = g.mul(ids[0], ids[0])?;
                g.sum(sq)
            },
            &[x],
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-8, "error {err}");
    }

    #[test]
    fn constant_objective_has_zero_gradient_both_ways() {
        let x = Tensor::vector(vec![0.5, 0.5]);
        let err = finite_difference_check(
            |g, ids| {
                // Multiply by zero so the value is constant yet connected.
                let z = g.scale(ids[0], 0.0)?;
                g.sum(z)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn rejects_nonpositive_eps() {
        let x = Tensor::scalar(1.0);
        let r = finite_difference_check(|g, ids| g.sum(ids[0]), &[x], 0.0);
        assert!(r.is_err());
    }

    #[test]
    fn loss_suite_smoke_run() {
        let out = run_loss_gradient_suite(5, 3).unwrap();
        assert!(out.cross_entropy < 1e-5, "ce {:.3e}", out.cross_entropy);
        assert!(out.kl_general < 1e-5, "kl {:.3e}", out.kl_general);
        assert!(out.kg_euclidean < 1e-5, "kg {:.3e}", out.kg_euclidean);
        assert!(out.total < 1e-4, "total {:.3e}", out.total);
    }
}

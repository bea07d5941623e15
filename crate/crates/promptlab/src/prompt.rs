//! Learnable context vectors and the two class-embedding views.
//!
//! The context is a single `M × d` matrix shared by every class; a prompt
//! for class `i` is the M context rows followed by that class's token.
//! Encoding every class of the active split yields the learnable view
//! `θ(t_i)`, paired with the fixed hand-crafted view `w_i`.

use crate::encoder::SyntheticTextEncoder;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::rng::{self, salt};
use crate::task::FewShotTask;
use crate::tensor::Tensor;

/// Default standard deviation for context initialization; keeps early
/// logits small.
pub const DEFAULT_INIT_SCALE: f64 = 0.02;

/// The `M × d` learnable context matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptContext {
    v: Tensor,
}

impl PromptContext {
    pub fn from_tensor(v: Tensor) -> Result<Self> {
        if v.rank() != 2 {
            return Err(Error::shape(format!(
                "context must be a rank-2 tensor, got {:?}",
                v.shape()
            )));
        }
        if !v.all_finite() {
            return Err(Error::domain("context entries must be finite"));
        }
        Ok(PromptContext { v })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.v
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor {
        &mut self.v
    }

    pub fn context_len(&self) -> usize {
        self.v.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.v.shape()[1]
    }

    /// Inserts the context into a graph as a differentiable leaf.
    pub fn leaf(&self, g: &mut Graph) -> Result<NodeId> {
        g.leaf(self.v.clone(), true)
    }
}

/// Draws an `M × d` context with i.i.d. `N(0, init_scale²)` entries from
/// the seeded context stream.
pub fn init_context(m: usize, d: usize, init_scale: f64, seed: u64) -> Result<PromptContext> {
    if m < 1 || d < 1 {
        return Err(Error::config(format!("context dims must be >= 1, got {m}×{d}")));
    }
    if init_scale <= 0.0 {
        return Err(Error::config("init_scale must be positive".to_string()));
    }
    let v = rng::normal_matrix(&mut rng::stream(seed, salt::CONTEXT), m, d, init_scale);
    PromptContext::from_tensor(v)
}

/// Concatenates the context rows with one class token: the `(M+1) × d`
/// prompt for that class. Gradient flows only into the context when the
/// token is a constant leaf.
pub fn assemble_prompt(g: &mut Graph, ctx: NodeId, class_token: NodeId) -> Result<NodeId> {
    let cv = g.value(ctx);
    if cv.rank() != 2 {
        return Err(Error::shape("context node must be rank 2"));
    }
    let d = cv.shape()[1];
    let tok = g.value(class_token);
    if tok.cols() != d || tok.rows() != 1 {
        return Err(Error::shape(format!(
            "class token must be a single {d}-vector, got shape {:?}",
            tok.shape()
        )));
    }
    g.concat_rows(&[ctx, class_token])
}

/// The paired views over one set of class ids. `handcrafted` is detached
/// data; `learnable` is a `C_active × d` graph node differentiable with
/// respect to the context.
#[derive(Debug)]
pub struct ClassEmbeddingViews {
    pub handcrafted: Tensor,
    pub learnable: NodeId,
    pub tau: f64,
    pub class_ids: Vec<usize>,
}

/// Encodes both views for the classes in `class_ids`.
pub fn encode_views(
    g: &mut Graph,
    ctx: NodeId,
    task: &FewShotTask,
    class_ids: &[usize],
    encoder: &SyntheticTextEncoder,
    tau: f64,
) -> Result<ClassEmbeddingViews> {
    if class_ids.is_empty() {
        return Err(Error::config("encode_views requires at least one class".to_string()));
    }
    if g.value(ctx).shape()[1] != task.dim || encoder.dim != task.dim {
        return Err(Error::shape(format!(
            "dimension mismatch: context cols {}, encoder dim {}, task dim {}",
            g.value(ctx).shape()[1],
            encoder.dim,
            task.dim
        )));
    }
    if tau <= 0.0 {
        return Err(Error::config("tau must be positive".to_string()));
    }

    let weights = encoder.leaves(g)?;
    let mut rows = Vec::with_capacity(class_ids.len());
    for &id in class_ids {
        if id >= task.num_classes() {
            return Err(Error::config(format!("class id {id} out of range")));
        }
        let token =
            g.constant(Tensor::matrix(1, task.dim, task.class_tokens.row(id).to_vec())?)?;
        let prompt = assemble_prompt(g, ctx, token)?;
        rows.push(encoder.encode_node(g, weights, prompt)?);
    }
    let learnable = g.concat_rows(&rows)?;
    Ok(ClassEmbeddingViews {
        handcrafted: FewShotTask::rows_for(&task.handcrafted, class_ids),
        learnable,
        tau,
        class_ids: class_ids.to_vec(),
    })
}

/// Value-level learnable rows for inference: same kernels, no gradients.
pub fn encode_class_rows(
    ctx: &PromptContext,
    task: &FewShotTask,
    class_ids: &[usize],
    encoder: &SyntheticTextEncoder,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let ctx_node = g.constant(ctx.tensor().clone())?;
    // tau is irrelevant for row extraction; any positive value works.
    let views = encode_views(&mut g, ctx_node, task, class_ids, encoder, 1.0)?;
    Ok(g.value(views.learnable).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::SyntheticTextEncoder;
    use crate::task::{gen_synthetic_task, TaskParams};
    use crate::tensor::l2_norm;

    fn fixture() -> (TaskParams, SyntheticTextEncoder, FewShotTask) {
        let p = TaskParams {
            num_classes: 4,
            dim: 8,
            hidden: 16,
            shots: 2,
            test_per_class: 3,
            noise_sigma: 0.1,
            prototype_perturb: 0.1,
            m_tokens: 3,
            template_token_norm: crate::task::TEMPLATE_TOKEN_NORM,
            seed: 21,
        };
        let enc = SyntheticTextEncoder::new(p.seed, p.dim, p.hidden).unwrap();
        let task = gen_synthetic_task(&p, &enc).unwrap();
        (p, enc, task)
    }

    #[test]
    fn init_is_deterministic_with_expected_shape() {
        let a = init_context(16, 64, 0.02, 3).unwrap();
        let b = init_context(16, 64, 0.02, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.tensor().shape(), &[16, 64]);
    }

    #[test]
    fn init_sample_mean_is_within_three_sigma() {
        // Mean of M·d i.i.d. N(0, s²) draws concentrates within 3s/√(Md).
        let (m, d, s) = (16, 64, 0.02);
        let ctx = init_context(m, d, s, 3).unwrap();
        let mean: f64 = ctx.tensor().data().iter().sum::<f64>() / (m * d) as f64;
        assert!(mean.abs() <= 3.0 * s / ((m * d) as f64).sqrt(), "mean {mean}");
    }

    #[test]
    fn assemble_prompt_orders_context_then_token() {
        let mut g = Graph::new();
        let ctx = g.leaf(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap(), true).unwrap();
        let tok = g.constant(Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap()).unwrap();
        let prompt = assemble_prompt(&mut g, ctx, tok).unwrap();
        assert_eq!(g.value(prompt).shape(), &[2, 2]);
        assert_eq!(g.value(prompt).data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn prompt_gradient_ignores_the_class_token() {
        // Only the context rows of the prompt receive gradient.
        let mut g = Graph::new();
        let ctx = g.leaf(Tensor::matrix(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap(), true).unwrap();
        let tok = g.constant(Tensor::matrix(1, 2, vec![0.5, -0.5]).unwrap()).unwrap();
        let prompt = assemble_prompt(&mut g, ctx, tok).unwrap();
        let s = g.sum(prompt).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.len(), 1);
        assert_eq!(grads.get(ctx).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn views_are_unit_norm_and_handcrafted_matches_task() {
        let (_, enc, task) = fixture();
        let ctx = init_context(3, task.dim, 0.02, 77).unwrap();
        let mut g = Graph::new();
        let ctx_node = ctx.leaf(&mut g).unwrap();
        let views =
            encode_views(&mut g, ctx_node, &task, &task.base_class_ids, &enc, 0.01).unwrap();
        let learned = g.value(views.learnable);
        for r in 0..learned.shape()[0] {
            assert!((l2_norm(learned.row(r)) - 1.0).abs() <= 1e-12);
        }
        assert_eq!(
            views.handcrafted,
            FewShotTask::rows_for(&task.handcrafted, &task.base_class_ids)
        );
    }

    #[test]
    fn learnable_view_gradient_reaches_the_context() {
        let (_, enc, task) = fixture();
        let ctx = init_context(3, task.dim, 0.02, 78).unwrap();
        let mut g = Graph::new();
        let ctx_node = ctx.leaf(&mut g).unwrap();
        let views =
            encode_views(&mut g, ctx_node, &task, &task.base_class_ids, &enc, 0.01).unwrap();
        let s = g.sum(views.learnable).unwrap();
        let grads = g.backward(s).unwrap();
        let gctx = grads.get(ctx_node).unwrap();
        assert!(gctx.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn no_grad_rows_match_graph_rows_bitwise() {
        let (_, enc, task) = fixture();
        let ctx = init_context(3, task.dim, 0.02, 79).unwrap();
        let rows = encode_class_rows(&ctx, &task, &task.new_class_ids, &enc).unwrap();
        let mut g = Graph::new();
        let ctx_node = ctx.leaf(&mut g).unwrap();
        let views = encode_views(&mut g, ctx_node, &task, &task.new_class_ids, &enc, 0.5).unwrap();
        assert_eq!(&rows, g.value(views.learnable));
    }
}

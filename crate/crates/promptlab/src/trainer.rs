//! Training loops for the composite method and the three baselines.
//!
//! All methods share one step skeleton: sample a batch, encode both class
//! views for the base split, compose the method's loss in a fresh graph,
//! differentiate, and apply plain gradient descent with an optional cosine
//! schedule. The composite method additionally trains the MI estimator
//! jointly with the context at the same rate, and mixup is active only for
//! it unless `baseline_mixup` is set.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{build_training_batch, TrainingBatch};
use crate::encoder::SyntheticTextEncoder;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::objectives::{
    cross_entropy_from_logits, joint_probability, kg_euclidean_loss, kl_general_loss,
    prediction_probs, similarity_logits, total_loss, zero_shot_probs, LossWeights, MIEstimator,
    MIEstimatorNodes, DEFAULT_MI_HIDDEN,
};
use crate::prompt::{encode_class_rows, encode_views, init_context, PromptContext, DEFAULT_INIT_SCALE};
use crate::rng::{self, salt};
use crate::store::Container;
use crate::task::FewShotTask;
use crate::tensor::{argmax_slice, Tensor};

/// Which objective drives the context updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Plain few-shot cross-entropy on the learnable view.
    Coop,
    /// Cross-entropy plus the mean squared distance between views.
    Kgcoop,
    /// Cross-entropy gradient projected against the KL general direction.
    Prograd,
    /// Cross-entropy plus MI maximization and the distance constraint,
    /// with class-wise mixup.
    Ours,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Coop => "coop",
            Method::Kgcoop => "kgcoop",
            Method::Prograd => "prograd",
            Method::Ours => "ours",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coop" => Ok(Method::Coop),
            "kgcoop" => Ok(Method::Kgcoop),
            "prograd" => Ok(Method::Prograd),
            "ours" => Ok(Method::Ours),
            other => Err(Error::config(format!("unknown method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

impl std::str::FromStr for LrSchedule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(LrSchedule::Constant),
            "cosine" => Ok(LrSchedule::Cosine),
            other => Err(Error::config(format!("unknown schedule '{other}'"))),
        }
    }
}

/// Full training configuration for one run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub epochs: usize,
    pub batch_size: usize,
    /// Mixed samples appended per batch; `None` means one per original.
    pub mix_count: Option<usize>,
    pub learning_rate: f64,
    pub schedule: LrSchedule,
    pub lambda1: f64,
    pub lambda2: f64,
    pub kg_weight: f64,
    pub tau: f64,
    /// Context length M.
    pub context_len: usize,
    pub seed: u64,
    /// Enables mixup for the baseline methods too.
    pub baseline_mixup: bool,
    pub mi_hidden: usize,
    /// Per-epoch finite-difference audit of one sampled parameter entry
    /// (composite method only).
    pub fd_audit: bool,
}

impl TrainConfig {
    pub fn new(method: Method, seed: u64) -> Self {
        TrainConfig {
            method,
            epochs: 100,
            batch_size: 8,
            mix_count: None,
            learning_rate: 0.01,
            schedule: LrSchedule::Constant,
            lambda1: 1.0,
            lambda2: 2.0,
            kg_weight: 8.0,
            tau: 0.01,
            context_len: 16,
            seed,
            baseline_mixup: false,
            mi_hidden: DEFAULT_MI_HIDDEN,
            fd_audit: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be positive".to_string()));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size must be at least 2".to_string()));
        }
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::config("learning_rate must be positive".to_string()));
        }
        if self.tau <= 0.0 {
            return Err(Error::config("tau must be positive".to_string()));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || self.kg_weight < 0.0 {
            return Err(Error::config("loss weights must be nonnegative".to_string()));
        }
        if self.context_len == 0 {
            return Err(Error::config("context_len must be positive".to_string()));
        }
        if self.mi_hidden == 0 {
            return Err(Error::config("mi_hidden must be positive".to_string()));
        }
        Ok(())
    }

    /// Hex digest of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        format!("{:x}", hasher.finalize())
    }

    fn effective_mix(&self) -> usize {
        let wants_mixup = self.method == Method::Ours || self.baseline_mixup;
        if !wants_mixup {
            return 0;
        }
        self.mix_count.unwrap_or(self.batch_size)
    }

    fn mi_active(&self) -> bool {
        self.method == Method::Ours && (self.lambda1 != 0.0 || self.lambda2 != 0.0)
    }
}

/// Stable fingerprint of a task's generation parameters, recorded in
/// checkpoints so evaluation can flag mismatched tasks.
pub fn task_fingerprint(task: &FewShotTask) -> String {
    let key = serde_json::json!({
        "seed": task.seed,
        "classes": task.num_classes(),
        "dim": task.dim,
        "hidden": task.hidden,
        "shots": task.shots,
        "train": task.train_labels.len(),
        "test": task.test_labels.len(),
        "noise_sigma": task.noise_sigma,
        "prototype_perturb": task.prototype_perturb,
        "m_tokens": task.m_tokens,
    });
    let mut hasher = Sha256::new();
    hasher.update(key.to_string().as_bytes());
    format!("{:x}", hasher.finalize())
}

/// One epoch's summary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// Mean step loss across the epoch.
    pub loss: f64,
    /// Base-split train accuracy at epoch end.
    pub train_accuracy: f64,
}

/// A trained context (plus estimator for the composite method) with its
/// provenance.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub config: TrainConfig,
    pub context: PromptContext,
    pub estimator: Option<MIEstimator>,
    pub history: Vec<EpochRecord>,
    pub config_hash: String,
    pub task_fingerprint: String,
    pub steps: usize,
}

/// Learning rate at `step` of `total_steps`: constant, or cosine decay
/// `base·(1 + cos(π·step/total))/2`.
pub fn lr_at(schedule: LrSchedule, step: usize, total_steps: usize, base_lr: f64) -> f64 {
    match schedule {
        LrSchedule::Constant => base_lr,
        LrSchedule::Cosine => {
            let t = step as f64 / total_steps as f64;
            base_lr * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
        }
    }
}

/// Plain gradient-descent update `p ← p − lr·g`.
pub fn optimizer_step(param: &mut Tensor, grad: &Tensor, lr: f64) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::shape(format!(
            "parameter shape {:?} does not match gradient shape {:?}",
            param.shape(),
            grad.shape()
        )));
    }
    for (p, g) in param.data_mut().iter_mut().zip(grad.data()) {
        *p -= lr * g;
    }
    Ok(())
}

/// Projects the task gradient away from conflict with the general
/// direction: returns `g_ce` unchanged when `⟨g_ce, g_general⟩ ≥ 0`, else
/// `g_ce − (⟨g_ce, g_general⟩/‖g_general‖²)·g_general`.
pub fn prograd_project(g_ce: &[f64], g_general: &[f64]) -> Result<Vec<f64>> {
    if g_ce.len() != g_general.len() {
        return Err(Error::shape("projection operands must have equal lengths".to_string()));
    }
    let dot = crate::tensor::dot(g_ce, g_general);
    if dot >= 0.0 {
        return Ok(g_ce.to_vec());
    }
    let norm_sq = crate::tensor::dot(g_general, g_general);
    let coef = dot / norm_sq;
    Ok(g_ce.iter().zip(g_general).map(|(&c, &g)| c - coef * g).collect())
}

/// Draws a batch, redrawing (deterministically, the stream advances) when
/// mixing is requested but the originals landed in a single class. A pool
/// that can never cover two classes still errors.
fn sample_batch_with_pairs(
    task: &FewShotTask,
    b: usize,
    b_mix: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<TrainingBatch> {
    const MAX_REDRAWS: usize = 100;
    let mut attempt = 0;
    loop {
        match build_training_batch(task, b, b_mix, rng) {
            Err(Error::Pairing(msg)) if attempt + 1 < MAX_REDRAWS && b_mix > 0 => {
                let _ = msg;
                attempt += 1;
            }
            other => return other,
        }
    }
}

/// One step's loss graph with handles into the pieces the trainer needs.
struct StepGraph {
    g: Graph,
    ctx: NodeId,
    est: Option<MIEstimatorNodes>,
    /// Batch-mean cross-entropy.
    ce: NodeId,
    /// The method's full minimized objective.
    loss: NodeId,
    /// Batch-mean KL general loss (gradient-projection method only).
    kl: Option<NodeId>,
}

fn build_step_graph(
    cfg: &TrainConfig,
    task: &FewShotTask,
    encoder: &SyntheticTextEncoder,
    ctx_value: &Tensor,
    estimator: Option<&MIEstimator>,
    batch: &TrainingBatch,
    trainable: bool,
) -> Result<StepGraph> {
    let base_ids = &task.base_class_ids;
    let mut g = Graph::new();
    let ctx = g.leaf(ctx_value.clone(), trainable)?;
    let est_nodes = match (cfg.mi_active(), estimator) {
        (true, Some(e)) => Some(e.leaves(&mut g, trainable)?),
        (true, None) => return Err(Error::config("composite method requires an estimator")),
        _ => None,
    };

    let views = encode_views(&mut g, ctx, task, base_ids, encoder, cfg.tau)?;
    let handcrafted = g.constant(views.handcrafted.clone())?;

    let mut ce_terms: Option<NodeId> = None;
    let mut kl_terms: Option<NodeId> = None;
    let mut view_pairs = Vec::new();
    for (row, label) in (0..batch.len()).zip(&batch.labels) {
        let feature = g.constant(Tensor::vector(batch.features.row(row).to_vec()))?;
        let label_base = FewShotTask::project_label(label, base_ids);
        let label_node = g.constant(Tensor::vector(label_base))?;
        let logits = similarity_logits(&mut g, views.learnable, feature, cfg.tau)?;
        let ce = cross_entropy_from_logits(&mut g, logits, label_node)?;
        ce_terms = Some(match ce_terms {
            None => ce,
            Some(prev) => g.add(prev, ce)?,
        });
        if cfg.method == Method::Prograd {
            let p_zs = zero_shot_probs(&mut g, handcrafted, feature, cfg.tau)?;
            let p_pred = prediction_probs(&mut g, views.learnable, feature, cfg.tau)?;
            let kl = kl_general_loss(&mut g, p_zs, p_pred)?;
            kl_terms = Some(match kl_terms {
                None => kl,
                Some(prev) => g.add(prev, kl)?,
            });
        }
        if est_nodes.is_some() {
            let general_view = similarity_logits(&mut g, handcrafted, feature, cfg.tau)?;
            view_pairs.push((general_view, logits));
        }
    }
    let ce_sum = ce_terms.expect("batch is nonempty");
    let ce = g.scale(ce_sum, 1.0 / batch.len() as f64)?;
    let kl = match kl_terms {
        Some(sum) => Some(g.scale(sum, 1.0 / batch.len() as f64)?),
        None => None,
    };

    let loss = match cfg.method {
        Method::Coop | Method::Prograd => ce,
        Method::Kgcoop => {
            let kg = kg_euclidean_loss(&mut g, handcrafted, views.learnable)?;
            let weighted = g.scale(kg, cfg.kg_weight)?;
            g.add(ce, weighted)?
        }
        Method::Ours => match est_nodes {
            None => ce,
            Some(nodes) => {
                let jpm = joint_probability(&mut g, nodes, &view_pairs)?;
                let weights = LossWeights::new(cfg.lambda1, cfg.lambda2)?;
                total_loss(&mut g, ce, &jpm, &weights)?
            }
        },
    };

    Ok(StepGraph { g, ctx, est: est_nodes, ce, loss, kl })
}

fn flatten_params(ctx: &Tensor, est: Option<&MIEstimator>) -> Vec<f64> {
    let mut flat = ctx.data().to_vec();
    if let Some(e) = est {
        for p in e.params() {
            flat.extend_from_slice(p.data());
        }
    }
    flat
}

fn audit_one_entry(
    cfg: &TrainConfig,
    task: &FewShotTask,
    encoder: &SyntheticTextEncoder,
    ctx: &PromptContext,
    estimator: Option<&MIEstimator>,
    batch: &TrainingBatch,
    analytic_flat: &[f64],
    entry: usize,
) -> Result<f64> {
    let eps = 1e-6;
    let eval = |ctx_t: &Tensor, est: Option<&MIEstimator>| -> Result<f64> {
        let sg = build_step_graph(cfg, task, encoder, ctx_t, est, batch, false)?;
        Ok(sg.g.value(sg.loss).scalar_value())
    };
    let ctx_len = ctx.tensor().numel();
    let perturbed = |delta: f64| -> Result<f64> {
        let mut ctx_t = ctx.tensor().clone();
        let mut est_t = estimator.cloned();
        if entry < ctx_len {
            ctx_t.data_mut()[entry] += delta;
        } else {
            let mut offset = entry - ctx_len;
            let est = est_t.as_mut().expect("entry index implies an estimator");
            for p in est.params_mut() {
                if offset < p.numel() {
                    p.data_mut()[offset] += delta;
                    break;
                }
                offset -= p.numel();
            }
        }
        eval(&ctx_t, est_t.as_ref())
    };
    let plus = perturbed(eps)?;
    let minus = perturbed(-eps)?;
    let numeric = (plus - minus) / (2.0 * eps);
    let analytic = analytic_flat[entry];
    Ok((analytic - numeric).abs() / numeric.abs().max(1.0))
}

/// Trains a model per the configured method. Deterministic given
/// `(config, task, encoder)`: every stochastic choice draws from its own
/// stream derived from `config.seed`.
pub fn train(
    cfg: &TrainConfig,
    task: &FewShotTask,
    encoder: &SyntheticTextEncoder,
) -> Result<TrainedModel> {
    cfg.validate()?;
    if task.train_labels.is_empty() {
        return Err(Error::config("task has no training samples".to_string()));
    }

    let mut ctx = init_context(cfg.context_len, task.dim, DEFAULT_INIT_SCALE, cfg.seed)?;
    let mut estimator = if cfg.mi_active() {
        Some(MIEstimator::new_seeded(
            task.base_class_ids.len(),
            cfg.mi_hidden,
            cfg.seed,
        )?)
    } else {
        None
    };

    let pool = task.train_labels.len();
    // The batch never exceeds the pool (sampling is without replacement).
    let eff_batch = cfg.batch_size.min(pool);
    let steps_per_epoch = pool.div_ceil(eff_batch);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mix = cfg.effective_mix();

    let mut batch_rng = rng::stream(cfg.seed, salt::BATCH);
    let mut audit_rng = rng::stream(cfg.seed, salt::AUDIT);

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut global_step = 0usize;
    for _epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        for step_in_epoch in 0..steps_per_epoch {
            let step_result = (|| -> Result<f64> {
                let batch = sample_batch_with_pairs(task, eff_batch, mix, &mut batch_rng)?;
                let sg = build_step_graph(
                    cfg,
                    task,
                    encoder,
                    ctx.tensor(),
                    estimator.as_ref(),
                    &batch,
                    true,
                )?;
                let loss_value = sg.g.value(sg.loss).scalar_value();
                if !loss_value.is_finite() {
                    return Err(Error::domain("loss is not finite".to_string()));
                }

                let lr = lr_at(cfg.schedule, global_step, total_steps, cfg.learning_rate);
                match cfg.method {
                    Method::Prograd => {
                        let kl = sg.kl.expect("projection method records the KL loss");
                        let ce_grads = sg.g.backward(sg.ce)?;
                        let kl_grads = sg.g.backward(kl)?;
                        let zero = Tensor::zeros_like(ctx.tensor());
                        let g_ce = ce_grads.get(sg.ctx).unwrap_or(&zero);
                        let g_general = kl_grads.get(sg.ctx).unwrap_or(&zero);
                        let projected = prograd_project(g_ce.data(), g_general.data())?;
                        let projected =
                            Tensor::from_shape_vec(ctx.tensor().shape().to_vec(), projected)?;
                        optimizer_step(ctx.tensor_mut(), &projected, lr)?;
                    }
                    _ => {
                        let mut grads = sg.g.backward(sg.loss)?;
                        if cfg.method == Method::Ours
                            && cfg.fd_audit
                            && step_in_epoch == 0
                        {
                            let flat = {
                                let mut flat = grads
                                    .get(sg.ctx)
                                    .map(|t| t.data().to_vec())
                                    .unwrap_or_else(|| vec![0.0; ctx.tensor().numel()]);
                                if let (Some(nodes), Some(est)) = (sg.est, estimator.as_ref()) {
                                    for (node, param) in [
                                        (nodes.w1, &est.w1),
                                        (nodes.b1, &est.b1),
                                        (nodes.w2, &est.w2),
                                        (nodes.b2, &est.b2),
                                    ] {
                                        match grads.get(node) {
                                            Some(t) => flat.extend_from_slice(t.data()),
                                            None => flat.extend(vec![0.0; param.numel()]),
                                        }
                                    }
                                }
                                flat
                            };
                            let n_entries =
                                flatten_params(ctx.tensor(), estimator.as_ref()).len();
                            let first = rand::Rng::gen_range(&mut audit_rng, 0..n_entries);
                            let mut err = audit_one_entry(
                                cfg, task, encoder, &ctx, estimator.as_ref(), &batch, &flat,
                                first,
                            )?;
                            if err > 1e-3 {
                                // A relu or clamp kink can sit inside the probe
                                // interval; one resample rules out systematic error.
                                let second = rand::Rng::gen_range(&mut audit_rng, 0..n_entries);
                                err = audit_one_entry(
                                    cfg, task, encoder, &ctx, estimator.as_ref(), &batch, &flat,
                                    second,
                                )?;
                                if err > 1e-3 {
                                    return Err(Error::domain(format!(
                                        "gradient audit failed: relative error {err:.3e}"
                                    )));
                                }
                            }
                        }

                        if let Some(t) = grads.take(sg.ctx) {
                            optimizer_step(ctx.tensor_mut(), &t, lr)?;
                        }
                        if let (Some(nodes), Some(est)) = (sg.est, estimator.as_mut()) {
                            for (node, param) in [
                                (nodes.w1, &mut est.w1),
                                (nodes.b1, &mut est.b1),
                                (nodes.w2, &mut est.w2),
                                (nodes.b2, &mut est.b2),
                            ] {
                                if let Some(t) = grads.take(node) {
                                    optimizer_step(param, &t, lr)?;
                                }
                            }
                        }
                    }
                }
                Ok(loss_value)
            })();

            let loss_value = step_result.map_err(|e| match e {
                Error::Domain(message) => Error::Training { step: global_step, message },
                other => other,
            })?;
            epoch_loss += loss_value;
            global_step += 1;
        }

        let train_acc = train_accuracy(&ctx, task, encoder)?;
        history.push(EpochRecord {
            loss: epoch_loss / steps_per_epoch as f64,
            train_accuracy: train_acc,
        });
    }

    // Checkpoints store binary32 payloads; snapping the final parameters
    // onto that grid makes save → load → evaluate exactly reproducible.
    snap_to_f32(ctx.tensor_mut());
    if let Some(est) = estimator.as_mut() {
        for p in est.params_mut() {
            snap_to_f32(p);
        }
    }

    Ok(TrainedModel {
        config: cfg.clone(),
        context: ctx,
        estimator,
        history,
        config_hash: cfg.hash(),
        task_fingerprint: task_fingerprint(task),
        steps: global_step,
    })
}

fn snap_to_f32(t: &mut Tensor) {
    for v in t.data_mut() {
        *v = *v as f32 as f64;
    }
}

/// Base-split train accuracy of the current context (read-only snapshot).
fn train_accuracy(
    ctx: &PromptContext,
    task: &FewShotTask,
    encoder: &SyntheticTextEncoder,
) -> Result<f64> {
    let rows = encode_class_rows(ctx, task, &task.base_class_ids, encoder)?;
    let mut correct = 0usize;
    for (i, label) in task.train_labels.iter().enumerate() {
        let feature = task.train_features.row(i);
        let scores: Vec<f64> = (0..rows.shape()[0])
            .map(|r| crate::tensor::dot(rows.row(r), feature))
            .collect();
        let predicted = task.base_class_ids[argmax_slice(&scores)];
        if predicted == FewShotTask::label_class(label) {
            correct += 1;
        }
    }
    Ok(correct as f64 / task.train_labels.len() as f64)
}

// ── Checkpointing ───────────────────────────────────────────────────────

const CKPT_CONTEXT: &str = "context_vectors";
const CKPT_MI: [&str; 4] = ["mi_w1", "mi_b1", "mi_w2", "mi_b2"];

fn vector_as_row(v: &Tensor) -> Tensor {
    Tensor::matrix(1, v.numel(), v.data().to_vec()).expect("row reshape")
}

fn row_as_vector(t: &Tensor) -> Tensor {
    Tensor::vector(t.data().to_vec())
}

/// Writes the model into a PTES container at `path`.
pub fn save_checkpoint(model: &TrainedModel, path: &std::path::Path) -> Result<()> {
    let mut c = Container::new(model.context.dim(), Vec::new());
    c.insert_matrix(CKPT_CONTEXT, model.context.tensor().clone())?;
    if let Some(est) = &model.estimator {
        c.insert_matrix(CKPT_MI[0], est.w1.clone())?;
        c.insert_matrix(CKPT_MI[1], vector_as_row(&est.b1))?;
        c.insert_matrix(CKPT_MI[2], est.w2.clone())?;
        c.insert_matrix(CKPT_MI[3], vector_as_row(&est.b2))?;
    }
    c.meta = Some(serde_json::json!({
        "kind": "checkpoint",
        "config": serde_json::to_value(&model.config)
            .map_err(|e| Error::format(format!("config meta: {e}")))?,
        "config_hash": model.config_hash,
        "task_fingerprint": model.task_fingerprint,
        "steps": model.steps,
        "seed": model.config.seed,
        "history": serde_json::to_value(&model.history)
            .map_err(|e| Error::format(format!("history meta: {e}")))?,
    }));
    c.save(path)
}

/// Loads a checkpoint written by [`save_checkpoint`]. Baseline
/// checkpoints carry no MI matrices and evaluate without an estimator.
pub fn load_checkpoint(path: &std::path::Path) -> Result<TrainedModel> {
    let c = Container::load(path)?;
    let meta = c.meta.clone().ok_or_else(|| Error::format("checkpoint has no meta"))?;
    if meta.get("kind").and_then(|k| k.as_str()) != Some("checkpoint") {
        return Err(Error::format("container is not a checkpoint"));
    }
    let config: TrainConfig = serde_json::from_value(
        meta.get("config").cloned().ok_or_else(|| Error::format("checkpoint missing config"))?,
    )
    .map_err(|e| Error::format(format!("bad checkpoint config: {e}")))?;
    let history: Vec<EpochRecord> = serde_json::from_value(
        meta.get("history").cloned().unwrap_or_else(|| serde_json::json!([])),
    )
    .map_err(|e| Error::format(format!("bad checkpoint history: {e}")))?;
    let context = PromptContext::from_tensor(
        c.matrix(CKPT_CONTEXT)
            .cloned()
            .ok_or_else(|| Error::format("checkpoint missing context_vectors"))?,
    )?;
    let estimator = if c.has_matrix(CKPT_MI[0]) {
        let w1 = c.matrix(CKPT_MI[0]).unwrap().clone();
        let b1 = row_as_vector(
            c.matrix(CKPT_MI[1]).ok_or_else(|| Error::format("checkpoint missing mi_b1"))?,
        );
        let w2 = c
            .matrix(CKPT_MI[2])
            .ok_or_else(|| Error::format("checkpoint missing mi_w2"))?
            .clone();
        let b2 = row_as_vector(
            c.matrix(CKPT_MI[3]).ok_or_else(|| Error::format("checkpoint missing mi_b2"))?,
        );
        let (hidden, num_classes) = (w1.shape()[0], w1.shape()[1]);
        Some(MIEstimator { w1, b1, w2, b2, num_classes, hidden })
    } else {
        None
    };
    Ok(TrainedModel {
        config_hash: meta
            .get("config_hash")
            .and_then(|v| v.as_str())
            .unwrap_or_default()
            .to_string(),
        task_fingerprint: meta
            .get("task_fingerprint")
            .and_then(|v| v.as_str())
            .unwrap_or_default()
            .to_string(),
        steps: meta.get("steps").and_then(|v| v.as_u64()).unwrap_or(0) as usize,
        config,
        context,
        estimator,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::{gen_synthetic_task, TaskParams};

    fn fixture(seed: u64) -> (FewShotTask, SyntheticTextEncoder) {
        let p = TaskParams {
            num_classes: 4,
            dim: 8,
            hidden: 16,
            shots: 4,
            test_per_class: 4,
            noise_sigma: 0.2,
            prototype_perturb: 0.1,
            m_tokens: 4,
            template_token_norm: crate::task::TEMPLATE_TOKEN_NORM,
            seed,
        };
        let enc = SyntheticTextEncoder::new(seed, p.dim, p.hidden).unwrap();
        (gen_synthetic_task(&p, &enc).unwrap(), enc)
    }

    fn quick_config(method: Method, seed: u64) -> TrainConfig {
        let mut cfg = TrainConfig::new(method, seed);
        cfg.epochs = 3;
        cfg.batch_size = 4;
        cfg.context_len = 4;
        cfg.mi_hidden = 8;
        cfg.tau = 0.1;
        cfg
    }

    #[test]
    fn lr_schedule_endpoints() {
        assert_eq!(lr_at(LrSchedule::Constant, 5, 10, 0.01), 0.01);
        assert_eq!(lr_at(LrSchedule::Cosine, 0, 10, 0.01), 0.01);
        let last = lr_at(LrSchedule::Cosine, 10, 10, 0.01);
        assert!(last.abs() < 1e-15, "{last}");
    }

    #[test]
    fn optimizer_step_on_quadratic() {
        // One step on x²/2 from x=1 at lr 0.1 lands on 0.9.
        let mut x = Tensor::scalar(1.0);
        let grad = Tensor::scalar(1.0);
        optimizer_step(&mut x, &grad, 0.1).unwrap();
        assert_eq!(x.scalar_value(), 0.9);
        let bad = Tensor::vector(vec![1.0, 2.0]);
        assert!(optimizer_step(&mut x, &bad, 0.1).is_err());
    }

    #[test]
    fn projection_examples() {
        // Orthogonal directions pass through unchanged.
        assert_eq!(prograd_project(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), vec![1.0, 0.0]);
        // Conflicting component is removed exactly.
        assert_eq!(prograd_project(&[1.0, -1.0], &[0.0, 1.0]).unwrap(), vec![1.0, 0.0]);
        // Zero general gradient means zero dot product: unchanged.
        assert_eq!(prograd_project(&[0.3, 0.4], &[0.0, 0.0]).unwrap(), vec![0.3, 0.4]);
    }

    #[test]
    fn projection_never_anti_aligns() {
        for seed in 0..200u64 {
            let mut r = rng::stream(seed, 0x55);
            let a = rng::normal_vec(&mut r, 6);
            let b = rng::normal_vec(&mut r, 6);
            let proj = prograd_project(&a, &b).unwrap();
            assert!(crate::tensor::dot(&proj, &b) >= -1e-10);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let (task, enc) = fixture(3);
        let cfg = quick_config(Method::Ours, 3);
        let a = train(&cfg, &task, &enc).unwrap();
        let b = train(&cfg, &task, &enc).unwrap();
        assert_eq!(a.context.tensor(), b.context.tensor());
        assert_eq!(a.history, b.history);
        assert_eq!(a.estimator.unwrap().w1, b.estimator.unwrap().w1);
    }

    #[test]
    fn history_length_matches_epochs() {
        let (task, enc) = fixture(4);
        for method in [Method::Coop, Method::Kgcoop, Method::Prograd, Method::Ours] {
            let cfg = quick_config(method, 4);
            let model = train(&cfg, &task, &enc).unwrap();
            assert_eq!(model.history.len(), cfg.epochs);
            assert_eq!(model.steps, cfg.epochs * task.train_labels.len().div_ceil(4));
            assert_eq!(model.estimator.is_some(), method == Method::Ours);
        }
    }

    #[test]
    fn zero_weight_composite_matches_plain_cross_entropy_trajectory() {
        let (task, enc) = fixture(5);
        let mut ours = quick_config(Method::Ours, 5);
        ours.lambda1 = 0.0;
        ours.lambda2 = 0.0;
        ours.mix_count = Some(0);
        let coop = quick_config(Method::Coop, 5);
        let a = train(&ours, &task, &enc).unwrap();
        let b = train(&coop, &task, &enc).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.context.tensor(), b.context.tensor());
    }

    #[test]
    fn checkpoint_round_trip_preserves_parameters() {
        let (task, enc) = fixture(6);
        let model = train(&quick_config(Method::Ours, 6), &task, &enc).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ptes");
        save_checkpoint(&model, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.context.tensor(), model.context.tensor());
        assert_eq!(back.estimator.as_ref().unwrap().w1, model.estimator.as_ref().unwrap().w1);
        assert_eq!(back.estimator.as_ref().unwrap().b2, model.estimator.as_ref().unwrap().b2);
        assert_eq!(back.config_hash, model.config_hash);
        assert_eq!(back.history, model.history);

        let coop = train(&quick_config(Method::Coop, 6), &task, &enc).unwrap();
        let coop_path = dir.path().join("coop.ptes");
        save_checkpoint(&coop, &coop_path).unwrap();
        let coop_back = load_checkpoint(&coop_path).unwrap();
        assert!(coop_back.estimator.is_none());
    }
}

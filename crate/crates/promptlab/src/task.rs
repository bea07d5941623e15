//! Synthetic few-shot task generation and task file round-tripping.
//!
//! A task is built "encoder-first" so that the fixed hand-crafted view is
//! informative: class tokens feed the frozen encoder through a fixed
//! seeded template to produce hand-crafted embeddings `w_i`, image
//! prototypes are perturbed copies of `w_i`, and sample features are noisy
//! unit-norm draws around the prototypes. Classes split into a base half
//! (trained, first C/2 indices) and a new half (never trained).



use crate::encoder::SyntheticTextEncoder;
use crate::error::{Error, Result};
use crate::rng::{self, salt};
use crate::store::EmbeddingStore;
use crate::tensor::{argmax_slice, Tensor};

/// Test samples drawn per class; fixed rather than configured so task
/// files stay comparable across runs.
pub const DEFAULT_TEST_PER_CLASS: usize = 20;

/// Norm of each fixed template token. The template is shared by every
/// class, so after mean pooling it contributes a common direction; keeping
/// it well below the unit-norm class token preserves class separation in
/// the hand-crafted view while the template still carries shared context.
pub const TEMPLATE_TOKEN_NORM: f64 = 0.25;

/// Which class split an operation works over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Base,
    New,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Base => "base",
            Split::New => "new",
        }
    }
}

/// Arguments for synthetic task generation.
#[derive(Debug, Clone)]
pub struct TaskParams {
    pub num_classes: usize,
    pub dim: usize,
    pub hidden: usize,
    /// Train samples generated per base class (the few-shot pool).
    pub shots: usize,
    pub test_per_class: usize,
    pub noise_sigma: f64,
    pub prototype_perturb: f64,
    /// Template length M used for the hand-crafted view.
    pub m_tokens: usize,
    /// Norm of each fixed template token (see [`TEMPLATE_TOKEN_NORM`]).
    pub template_token_norm: f64,
    pub seed: u64,
}

/// A fully materialized few-shot classification task.
#[derive(Debug, Clone)]
pub struct FewShotTask {
    /// Per-class token vectors `c_i`, `C × d`.
    pub class_tokens: Tensor,
    /// Hand-crafted embeddings `w_i`, `C × d`, unit rows.
    pub handcrafted: Tensor,
    /// Train features, `(shots · C_base) × d`, grouped by class.
    pub train_features: Tensor,
    /// One-hot (or soft) labels over all `C` classes, one per train row.
    pub train_labels: Vec<Vec<f64>>,
    /// Test features over both splits, `(test_per_class · C) × d`.
    pub test_features: Tensor,
    pub test_labels: Vec<Vec<f64>>,
    pub base_class_ids: Vec<usize>,
    pub new_class_ids: Vec<usize>,
    pub noise_sigma: f64,
    pub prototype_perturb: f64,
    /// Train samples per base class currently held.
    pub shots: usize,
    pub seed: u64,
    pub dim: usize,
    pub hidden: usize,
    pub m_tokens: usize,
}

impl FewShotTask {
    pub fn num_classes(&self) -> usize {
        self.class_tokens.shape()[0]
    }

    pub fn class_ids(&self, split: Split) -> &[usize] {
        match split {
            Split::Base => &self.base_class_ids,
            Split::New => &self.new_class_ids,
        }
    }

    /// Class index of a label vector (argmax; mixed labels report the
    /// heavier component).
    pub fn label_class(label: &[f64]) -> usize {
        argmax_slice(label)
    }

    /// Rows of `matrix` at the given class ids, in id order.
    pub fn rows_for(matrix: &Tensor, ids: &[usize]) -> Tensor {
        let rows: Vec<Vec<f64>> = ids.iter().map(|&i| matrix.row(i).to_vec()).collect();
        Tensor::from_rows(&rows).expect("class rows share the embedding dimension")
    }

    /// Test-sample indices whose true class belongs to `split`.
    pub fn test_indices(&self, split: Split) -> Vec<usize> {
        let ids = self.class_ids(split);
        self.test_labels
            .iter()
            .enumerate()
            .filter(|(_, l)| ids.contains(&Self::label_class(l)))
            .map(|(i, _)| i)
            .collect()
    }

    /// Projects a full-`C` label onto the coordinates of `class_ids`.
    pub fn project_label(label: &[f64], class_ids: &[usize]) -> Vec<f64> {
        class_ids.iter().map(|&i| label[i]).collect()
    }

    /// Train-row indices holding samples of class `class_id`.
    pub fn train_indices_of_class(&self, class_id: usize) -> Vec<usize> {
        self.train_labels
            .iter()
            .enumerate()
            .filter(|(_, l)| Self::label_class(l) == class_id)
            .map(|(i, _)| i)
            .collect()
    }
}

fn one_hot(c: usize, idx: usize) -> Vec<f64> {
    let mut v = vec![0.0; c];
    v[idx] = 1.0;
    v
}

fn unit_rows(rng: &mut rand_chacha::ChaCha8Rng, rows: usize, cols: usize) -> Result<Tensor> {
    let mut t = rng::normal_matrix(rng, rows, cols, 1.0);
    let data = t.data_mut();
    for r in 0..rows {
        crate::tensor::l2_normalize_in_place(&mut data[r * cols..(r + 1) * cols])?;
    }
    Ok(t)
}

/// Unit-norm perturbation of `base`: adds seeded normal noise with
/// expected *norm* `scale` (per-coordinate deviation `scale/√d`, so the
/// noise level is relative to the unit-norm base regardless of dimension)
/// and re-normalizes. `scale == 0` returns `base` bit-exactly.
fn perturbed_unit(
    base: &[f64],
    scale: f64,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Vec<f64>> {
    if scale == 0.0 {
        return Ok(base.to_vec());
    }
    let per_coord = scale / (base.len() as f64).sqrt();
    let noise = rng::normal_vec(rng, base.len());
    let mut v: Vec<f64> = base.iter().zip(&noise).map(|(b, n)| b + per_coord * n).collect();
    crate::tensor::l2_normalize_in_place(&mut v)?;
    Ok(v)
}

/// Generates a task as a pure function of its arguments: identical
/// parameters yield a bit-identical task.
pub fn gen_synthetic_task(params: &TaskParams, encoder: &SyntheticTextEncoder) -> Result<FewShotTask> {
    let c = params.num_classes;
    if c < 2 || c % 2 != 0 {
        return Err(Error::config(format!("num_classes must be even and >= 2, got {c}")));
    }
    if params.dim < 2 {
        return Err(Error::config(format!("dim must be >= 2, got {}", params.dim)));
    }
    if params.shots < 1 {
        return Err(Error::config("shots must be >= 1".to_string()));
    }
    if params.test_per_class < 1 {
        return Err(Error::config("test_per_class must be >= 1".to_string()));
    }
    if params.noise_sigma < 0.0 || params.prototype_perturb < 0.0 {
        return Err(Error::config("noise levels must be nonnegative".to_string()));
    }
    if params.m_tokens < 1 {
        return Err(Error::config("m_tokens must be >= 1".to_string()));
    }
    if params.template_token_norm <= 0.0 {
        return Err(Error::config("template_token_norm must be positive".to_string()));
    }
    if encoder.dim != params.dim || encoder.hidden != params.hidden {
        return Err(Error::config(format!(
            "encoder dims ({}, {}) do not match task params ({}, {})",
            encoder.dim, encoder.hidden, params.dim, params.hidden
        )));
    }

    let template = {
        let mut t = unit_rows(
            &mut rng::stream(params.seed, salt::TEMPLATE),
            params.m_tokens,
            params.dim,
        )?;
        for v in t.data_mut() {
            *v *= params.template_token_norm;
        }
        t
    };
    let class_tokens = unit_rows(
        &mut rng::stream(params.seed, salt::CLASS_TOKENS),
        c,
        params.dim,
    )?;

    // Hand-crafted view: template tokens followed by the class token.
    let mut handcrafted_rows = Vec::with_capacity(c);
    for i in 0..c {
        let mut tokens: Vec<Vec<f64>> =
            (0..params.m_tokens).map(|r| template.row(r).to_vec()).collect();
        tokens.push(class_tokens.row(i).to_vec());
        handcrafted_rows.push(encoder.encode(&tokens)?.data().to_vec());
    }
    let handcrafted = Tensor::from_rows(&handcrafted_rows)?;

    let mut proto_rng = rng::stream(params.seed, salt::PROTOTYPES);
    let mut prototypes = Vec::with_capacity(c);
    for i in 0..c {
        prototypes.push(perturbed_unit(
            handcrafted.row(i),
            params.prototype_perturb,
            &mut proto_rng,
        )?);
    }

    let base_class_ids: Vec<usize> = (0..c / 2).collect();
    let new_class_ids: Vec<usize> = (c / 2..c).collect();

    let mut sample_rng = rng::stream(params.seed, salt::SAMPLES);
    let mut train_rows = Vec::new();
    let mut train_labels = Vec::new();
    let mut test_rows = Vec::new();
    let mut test_labels = Vec::new();
    for i in 0..c {
        if base_class_ids.contains(&i) {
            for _ in 0..params.shots {
                train_rows.push(perturbed_unit(&prototypes[i], params.noise_sigma, &mut sample_rng)?);
                train_labels.push(one_hot(c, i));
            }
        }
        for _ in 0..params.test_per_class {
            test_rows.push(perturbed_unit(&prototypes[i], params.noise_sigma, &mut sample_rng)?);
            test_labels.push(one_hot(c, i));
        }
    }

    Ok(FewShotTask {
        class_tokens,
        handcrafted,
        train_features: Tensor::from_rows(&train_rows)?,
        train_labels,
        test_features: Tensor::from_rows(&test_rows)?,
        test_labels,
        base_class_ids,
        new_class_ids,
        noise_sigma: params.noise_sigma,
        prototype_perturb: params.prototype_perturb,
        shots: params.shots,
        seed: params.seed,
        dim: params.dim,
        hidden: params.hidden,
        m_tokens: params.m_tokens,
    })
}

fn ids_to_json(ids: &[usize]) -> serde_json::Value {
    serde_json::Value::Array(ids.iter().map(|&i| serde_json::json!(i)).collect())
}

fn ids_from_json(v: &serde_json::Value, key: &str) -> Result<Vec<usize>> {
    v.get(key)
        .and_then(|a| a.as_array())
        .map(|a| a.iter().filter_map(|x| x.as_u64().map(|u| u as usize)).collect())
        .ok_or_else(|| Error::format(format!("task meta missing '{key}'")))
}

fn meta_u64(v: &serde_json::Value, key: &str) -> Result<u64> {
    v.get(key)
        .and_then(|x| x.as_u64())
        .ok_or_else(|| Error::format(format!("task meta missing '{key}'")))
}

fn meta_f64(v: &serde_json::Value, key: &str) -> Result<f64> {
    v.get(key)
        .and_then(|x| x.as_f64())
        .ok_or_else(|| Error::format(format!("task meta missing '{key}'")))
}

/// Packs a task into an embedding store (matrices `class_tokens`,
/// `handcrafted_embeddings`, `train_features`, `test_features`; labels are
/// train rows followed by test rows; generation parameters go in `meta`).
pub fn task_to_store(task: &FewShotTask) -> Result<EmbeddingStore> {
    let class_names = (0..task.num_classes()).map(|i| format!("class_{i:02}")).collect();
    let mut store = EmbeddingStore::new(task.dim, class_names);
    store.insert_matrix("class_tokens", task.class_tokens.clone())?;
    store.insert_matrix("handcrafted_embeddings", task.handcrafted.clone())?;
    store.insert_matrix("train_features", task.train_features.clone())?;
    store.insert_matrix("test_features", task.test_features.clone())?;
    let mut labels = task.train_labels.clone();
    labels.extend(task.test_labels.iter().cloned());
    store.set_labels(labels)?;
    store.set_meta(serde_json::json!({
        "kind": "few_shot_task",
        "train_count": task.train_labels.len(),
        "test_count": task.test_labels.len(),
        "base_class_ids": ids_to_json(&task.base_class_ids),
        "new_class_ids": ids_to_json(&task.new_class_ids),
        "noise_sigma": task.noise_sigma,
        "prototype_perturb": task.prototype_perturb,
        "shots": task.shots,
        "seed": task.seed,
        "dim": task.dim,
        "hidden": task.hidden,
        "m_tokens": task.m_tokens,
    }));
    Ok(store)
}

/// Rebuilds a task from a store written by [`task_to_store`].
///
/// Note: task files narrow features to binary32, so a loaded task is the
/// 32-bit image of the generated one; all downstream computation is exact
/// over those widened values.
pub fn task_from_store(store: &EmbeddingStore) -> Result<FewShotTask> {
    let meta = store
        .meta()
        .ok_or_else(|| Error::format("task store has no meta block"))?
        .clone();
    let get = |name: &str| -> Result<Tensor> {
        store
            .matrix(name)
            .cloned()
            .ok_or_else(|| Error::format(format!("task store missing matrix '{name}'")))
    };
    let labels = store
        .labels()
        .ok_or_else(|| Error::format("task store has no labels"))?
        .clone();
    let train_count = meta_u64(&meta, "train_count")? as usize;
    let test_count = meta_u64(&meta, "test_count")? as usize;
    if labels.len() != train_count + test_count {
        return Err(Error::format(format!(
            "label count {} does not match train {} + test {}",
            labels.len(),
            train_count,
            test_count
        )));
    }
    let train_features = get("train_features")?;
    let test_features = get("test_features")?;
    if train_features.shape()[0] != train_count || test_features.shape()[0] != test_count {
        return Err(Error::format("feature row counts do not match meta counts"));
    }
    Ok(FewShotTask {
        class_tokens: get("class_tokens")?,
        handcrafted: get("handcrafted_embeddings")?,
        train_features,
        train_labels: labels[..train_count].to_vec(),
        test_features,
        test_labels: labels[train_count..].to_vec(),
        base_class_ids: ids_from_json(&meta, "base_class_ids")?,
        new_class_ids: ids_from_json(&meta, "new_class_ids")?,
        noise_sigma: meta_f64(&meta, "noise_sigma")?,
        prototype_perturb: meta_f64(&meta, "prototype_perturb")?,
        shots: meta_u64(&meta, "shots")? as usize,
        seed: meta_u64(&meta, "seed")?,
        dim: meta_u64(&meta, "dim")? as usize,
        hidden: meta_u64(&meta, "hidden")? as usize,
        m_tokens: meta_u64(&meta, "m_tokens")? as usize,
    })
}

#[cfg(test)]
mod tests {
    use crate::store::Container;
    use crate::tensor::l2_norm;
    use super::*;

    fn small_params(seed: u64) -> TaskParams {
        TaskParams {
            num_classes: 4,
            dim: 8,
            hidden: 16,
            shots: 3,
            test_per_class: 5,
            noise_sigma: 0.2,
            prototype_perturb: 0.1,
            m_tokens: 4,
            template_token_norm: TEMPLATE_TOKEN_NORM,
            seed,
        }
    }

    fn encoder_for(p: &TaskParams) -> SyntheticTextEncoder {
        SyntheticTextEncoder::new(p.seed, p.dim, p.hidden).unwrap()
    }

    #[test]
    fn generation_is_a_pure_function_of_arguments() {
        let p = small_params(9);
        let enc = encoder_for(&p);
        let a = gen_synthetic_task(&p, &enc).unwrap();
        let b = gen_synthetic_task(&p, &enc).unwrap();
        assert_eq!(a.handcrafted, b.handcrafted);
        assert_eq!(a.train_features, b.train_features);
        assert_eq!(a.test_features, b.test_features);
        assert_eq!(a.train_labels, b.train_labels);
    }

    #[test]
    fn counts_and_split_structure_hold() {
        let mut p = small_params(2);
        p.num_classes = 10;
        p.shots = 4;
        let enc = encoder_for(&p);
        let t = gen_synthetic_task(&p, &enc).unwrap();
        // 10 classes, 4 shots: exactly 20 train samples, all base-class.
        assert_eq!(t.train_labels.len(), 20);
        assert_eq!(t.base_class_ids, vec![0, 1, 2, 3, 4]);
        assert_eq!(t.new_class_ids, vec![5, 6, 7, 8, 9]);
        for l in &t.train_labels {
            assert!(t.base_class_ids.contains(&FewShotTask::label_class(l)));
        }
         // Base and new ids are disjoint and cover all classes.
        let mut all: Vec<usize> = t.base_class_ids.iter().chain(&t.new_class_ids).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn all_features_are_unit_norm() {
        let p = small_params(5);
        let enc = encoder_for(&p);
        let t = gen_synthetic_task(&p, &enc).unwrap();
        for r in 0..t.train_features.shape()[0] {
            assert!((l2_norm(t.train_features.row(r)) - 1.0).abs() <= 1e-12);
        }
        for r in 0..t.test_features.shape()[0] {
            assert!((l2_norm(t.test_features.row(r)) - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn zero_noise_makes_features_equal_handcrafted_rows() {
        let mut p = small_params(3);
        p.noise_sigma = 0.0;
        p.prototype_perturb = 0.0;
        let enc = encoder_for(&p);
        let t = gen_synthetic_task(&p, &enc).unwrap();
        for (r, label) in t.test_labels.iter().enumerate() {
            let class = FewShotTask::label_class(label);
            assert_eq!(t.test_features.row(r), t.handcrafted.row(class));
        }
    }

    #[test]
    fn odd_class_count_is_rejected() {
        let mut p = small_params(1);
        p.num_classes = 5;
        let enc = encoder_for(&p);
        assert!(matches!(gen_synthetic_task(&p, &enc), Err(Error::Config(_))));
    }

    #[test]
    fn store_round_trip_preserves_task_at_f32_precision() {
        let p = small_params(12);
        let enc = encoder_for(&p);
        let t = gen_synthetic_task(&p, &enc).unwrap();
        let store = task_to_store(&t).unwrap();
        let bytes = store.container().to_bytes().unwrap();
        let back = task_from_store(
            &EmbeddingStore::from_container(Container::from_bytes(&bytes).unwrap()).unwrap(),
        )
        .unwrap();
        assert_eq!(back.base_class_ids, t.base_class_ids);
        assert_eq!(back.train_labels, t.train_labels);
        assert_eq!(back.shots, t.shots);
        // Features round-trip exactly at binary32 precision.
        for (a, b) in t.train_features.data().iter().zip(back.train_features.data()) {
            assert_eq!(*a as f32, *b as f32);
            assert_eq!(*b, (*a as f32) as f64);
        }
    }
}

//! Class-wise mixup augmentation and batch/few-shot sampling.
//!
//! Mixed samples are convex combinations of two originals from distinct
//! classes, with the mixing weight restricted to [0.4, 0.6] so the result
//! is a genuinely mixed class rather than a lightly perturbed original.
//! Mixed labels stay exact convex combinations; mixed features are
//! re-normalized to the unit sphere before use because both encoders
//! produce unit-norm embeddings and classification is cosine-based.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::{self, salt};
use crate::task::FewShotTask;
use crate::tensor::Tensor;

pub const LAMBDA_LO: f64 = 0.4;
pub const LAMBDA_HI: f64 = 0.6;

/// One sampled mixing decision: the weight and the two source rows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixupDraw {
    pub lambda: f64,
    pub index_a: usize,
    pub index_b: usize,
}

/// Origin marker for batch rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Original,
    Mixed,
}

/// A training batch: original rows followed by mixed rows.
#[derive(Debug, Clone)]
pub struct TrainingBatch {
    /// `(B + B_mix) × d` unit-norm features.
    pub features: Tensor,
    /// Simplex labels over the full class set, one per row.
    pub labels: Vec<Vec<f64>>,
    pub origins: Vec<Origin>,
}

impl TrainingBatch {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn mixed_count(&self) -> usize {
        self.origins.iter().filter(|o| **o == Origin::Mixed).count()
    }
}

/// Uniform draw on [`LAMBDA_LO`], [`LAMBDA_HI`]].
pub fn sample_lambda(rng: &mut ChaCha8Rng) -> f64 {
    LAMBDA_LO + (LAMBDA_HI - LAMBDA_LO) * rng.gen::<f64>()
}

/// Mixes two samples from distinct classes:
/// `x_new = λ·x_a + (1−λ)·x_b` (returned pre-normalization, exactly) and
/// `y_new = λ·y_a + (1−λ)·y_b`.
pub fn mixup_pair(
    xa: &[f64],
    xb: &[f64],
    ya: &[f64],
    yb: &[f64],
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if xa.len() != xb.len() || ya.len() != yb.len() {
        return Err(Error::shape("mixup operands must share shapes".to_string()));
    }
    if !(LAMBDA_LO..=LAMBDA_HI).contains(&lambda) {
        return Err(Error::domain(format!(
            "lambda {lambda} outside [{LAMBDA_LO}, {LAMBDA_HI}]"
        )));
    }
    let ca = FewShotTask::label_class(ya);
    let cb = FewShotTask::label_class(yb);
    if ca == cb {
        return Err(Error::pairing(format!("both samples belong to class {ca}")));
    }
    let x: Vec<f64> = xa.iter().zip(xb).map(|(&a, &b)| lambda * a + (1.0 - lambda) * b).collect();
    let y: Vec<f64> = ya.iter().zip(yb).map(|(&a, &b)| lambda * a + (1.0 - lambda) * b).collect();
    Ok((x, y))
}

/// Samples `b` originals without replacement from the base-class train
/// pool, then appends `b_mix` mixed rows built from uniformly drawn
/// distinct-class pairs among those originals. Mixed features are
/// re-normalized to unit norm.
pub fn build_training_batch(
    task: &FewShotTask,
    b: usize,
    b_mix: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TrainingBatch> {
    if task.base_class_ids.len() < 2 {
        return Err(Error::pairing("task must have at least two base classes".to_string()));
    }
    if b < 2 {
        return Err(Error::config("batch size must be at least 2".to_string()));
    }
    let pool = task.train_labels.len();
    if b > pool {
        return Err(Error::config(format!(
            "batch size {b} exceeds the {pool}-sample train pool"
        )));
    }

    let picks = rng::sample_without_replacement(rng, pool, b);
    let mut rows: Vec<Vec<f64>> = picks.iter().map(|&i| task.train_features.row(i).to_vec()).collect();
    let mut labels: Vec<Vec<f64>> = picks.iter().map(|&i| task.train_labels[i].clone()).collect();
    let mut origins = vec![Origin::Original; b];

    if b_mix > 0 {
        let classes: Vec<usize> =
            labels.iter().map(|l| FewShotTask::label_class(l)).collect();
        let distinct = {
            let mut cs = classes.clone();
            cs.sort_unstable();
            cs.dedup();
            cs.len()
        };
        if distinct < 2 {
            return Err(Error::pairing(
                "fewer than two classes represented among the sampled originals".to_string(),
            ));
        }
        for _ in 0..b_mix {
            // Rejection-sample a distinct-class pair among the originals.
            let (ia, ib) = loop {
                let ia = rng.gen_range(0..b);
                let ib = rng.gen_range(0..b);
                if classes[ia] != classes[ib] {
                    break (ia, ib);
                }
            };
            let lambda = sample_lambda(rng);
            let draw = MixupDraw { lambda, index_a: ia, index_b: ib };
            let (mut x, y) = mixup_pair(
                &rows[draw.index_a],
                &rows[draw.index_b],
                &labels[draw.index_a],
                &labels[draw.index_b],
                draw.lambda,
            )?;
            crate::tensor::l2_normalize_in_place(&mut x)?;
            rows.push(x);
            labels.push(y);
            origins.push(Origin::Mixed);
        }
    }

    Ok(TrainingBatch { features: Tensor::from_rows(&rows)?, labels, origins })
}

/// Seeded few-shot subsampling: keeps exactly `k` train samples per base
/// class, drawn without replacement, leaving everything else untouched.
pub fn few_shot_sample(task: &FewShotTask, k: usize, seed: u64) -> Result<FewShotTask> {
    if k < 1 {
        return Err(Error::config("shot count must be >= 1".to_string()));
    }
    let mut rng = rng::stream(seed, salt::FEW_SHOT);
    let mut keep = Vec::new();
    for &class_id in &task.base_class_ids {
        let candidates = task.train_indices_of_class(class_id);
        if candidates.len() < k {
            return Err(Error::config(format!(
                "class {class_id} has {} train samples, need {k}",
                candidates.len()
            )));
        }
        let mut picks: Vec<usize> = rng::sample_without_replacement(&mut rng, candidates.len(), k)
            .into_iter()
            .map(|i| candidates[i])
            .collect();
        picks.sort_unstable();
        keep.extend(picks);
    }
    let rows: Vec<Vec<f64>> = keep.iter().map(|&i| task.train_features.row(i).to_vec()).collect();
    let labels: Vec<Vec<f64>> = keep.iter().map(|&i| task.train_labels[i].clone()).collect();
    Ok(FewShotTask {
        train_features: Tensor::from_rows(&rows)?,
        train_labels: labels,
        shots: k,
        ..task.clone()
    })
}

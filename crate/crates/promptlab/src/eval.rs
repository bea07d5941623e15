//! Base-to-new evaluation: split-restricted accuracy, harmonic-mean
//! aggregation, the protocol sweep, and the component ablation.
//!
//! Per-split evaluation is split-restricted: base-class samples are
//! classified over base-class rows only and new-class samples over
//! new-class rows only. Independent `(method, K, seed)` runs and
//! per-sample classifications fan out through [`crate::parallel`]; report
//! assembly is an ordered merge, so parallelism never changes output
//! bytes.

use std::str::FromStr;
use std::time::Instant;

use crate::config::RunConfig;
use crate::encoder::SyntheticTextEncoder;
use crate::error::{Error, Result};
use crate::parallel::ordered_map;
use crate::prompt::encode_class_rows;
use crate::report::{EvalReport, ReportKind, RunRow};
use crate::task::{gen_synthetic_task, FewShotTask, Split};
use crate::tensor::{argmax_slice, dot, Tensor};
use crate::trainer::{train, task_fingerprint, Method, TrainedModel};

/// What produces the class rows a sample is scored against.
#[derive(Debug, Clone, Copy)]
pub enum Classifier<'a> {
    /// Hand-crafted embeddings only: zero-shot inference.
    ZeroShot,
    /// A trained model's learnable view.
    Model(&'a TrainedModel),
}

/// Fraction of `split` test samples whose top-scoring class row matches
/// the true class. Scores are cosine similarities; the softmax temperature
/// does not change the argmax, so probabilities need not be materialized.
pub fn evaluate_accuracy(
    classifier: Classifier<'_>,
    task: &FewShotTask,
    split: Split,
    encoder: &SyntheticTextEncoder,
) -> Result<f64> {
    let class_ids = task.class_ids(split).to_vec();
    if class_ids.is_empty() {
        return Err(Error::config(format!("{} split is empty", split.name())));
    }
    let sample_indices = task.test_indices(split);
    if sample_indices.is_empty() {
        return Err(Error::config(format!("{} split has no test samples", split.name())));
    }

    let rows: Tensor = match classifier {
        Classifier::ZeroShot => FewShotTask::rows_for(&task.handcrafted, &class_ids),
        Classifier::Model(model) => {
            encode_class_rows(&model.context, task, &class_ids, encoder)?
        }
    };

    let verdicts = ordered_map(&sample_indices, |&i| {
        let feature = task.test_features.row(i);
        let scores: Vec<f64> =
            (0..rows.shape()[0]).map(|r| dot(rows.row(r), feature)).collect();
        let predicted = class_ids[argmax_slice(&scores)];
        predicted == FewShotTask::label_class(&task.test_labels[i])
    });
    let correct = verdicts.iter().filter(|&&ok| ok).count();
    Ok(correct as f64 / sample_indices.len() as f64)
}

/// Harmonic mean `2ab/(a+b)` with `hm(0,0) = 0`. Accepts accuracies as
/// fractions or percentages (the formula is scale-invariant); inputs
/// outside [0, 100] are rejected.
pub fn harmonic_mean(a_base: f64, a_new: f64) -> Result<f64> {
    for v in [a_base, a_new] {
        if !(0.0..=100.0).contains(&v) {
            return Err(Error::domain(format!("accuracy {v} outside [0, 100]")));
        }
    }
    if a_base == 0.0 && a_new == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * a_base * a_new / (a_base + a_new))
}

/// A method entry in a protocol run: either the zero-shot baseline or a
/// trainable method.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProtocolMethod {
    ZeroShot,
    Trained(Method),
}

impl ProtocolMethod {
    pub fn name(self) -> &'static str {
        match self {
            ProtocolMethod::ZeroShot => "zeroshot",
            ProtocolMethod::Trained(m) => m.name(),
        }
    }

    pub fn parse_list(names: &[String]) -> Result<Vec<ProtocolMethod>> {
        names
            .iter()
            .map(|n| {
                if n == "zeroshot" {
                    Ok(ProtocolMethod::ZeroShot)
                } else {
                    Ok(ProtocolMethod::Trained(Method::from_str(n)?))
                }
            })
            .collect()
    }
}

/// Evaluates both splits for one classifier and folds in the harmonic mean.
pub fn split_accuracies(
    classifier: Classifier<'_>,
    task: &FewShotTask,
    encoder: &SyntheticTextEncoder,
) -> Result<(f64, f64, f64)> {
    let base = evaluate_accuracy(classifier, task, Split::Base, encoder)?;
    let new = evaluate_accuracy(classifier, task, Split::New, encoder)?;
    Ok((base, new, harmonic_mean(base, new)?))
}

/// Variant of the composite method used by ablation rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RunVariant {
    AsConfigured,
    /// Composite objective with mixing disabled.
    NoMixup,
}

fn run_single(
    cfg: &RunConfig,
    method: ProtocolMethod,
    label: &str,
    variant: RunVariant,
    k: usize,
    seed: u64,
) -> Result<RunRow> {
    let encoder = SyntheticTextEncoder::new(seed, cfg.dim, cfg.hidden)?;
    let pool = gen_synthetic_task(&cfg.task_params(seed, cfg.max_shots()), &encoder)?;
    let task = crate::augment::few_shot_sample(&pool, k, seed)?;

    let (base_acc, new_acc, hm) = match method {
        ProtocolMethod::ZeroShot => split_accuracies(Classifier::ZeroShot, &task, &encoder)?,
        ProtocolMethod::Trained(m) => {
            let mut tc = cfg.train_config(m, seed);
            if variant == RunVariant::NoMixup {
                tc.mix_count = Some(0);
            }
            let model = train(&tc, &task, &encoder)?;
            split_accuracies(Classifier::Model(&model), &task, &encoder)?
        }
    };
    Ok(RunRow { method: label.to_string(), k, seed, base_acc, new_acc, hm })
}

fn collect_rows(
    cfg: &RunConfig,
    entries: &[(ProtocolMethod, String, RunVariant)],
    shots: &[usize],
    seeds: &[u64],
) -> Result<Vec<RunRow>> {
    let mut jobs = Vec::new();
    for (method, label, variant) in entries {
        for &k in shots {
            for &seed in seeds {
                jobs.push((*method, label.clone(), *variant, k, seed));
            }
        }
    }
    ordered_map(&jobs, |(method, label, variant, k, seed)| {
        run_single(cfg, *method, label, *variant, *k, *seed)
    })
    .into_iter()
    .collect()
}

/// The full base-to-new sweep: for every `(method, K, seed)` it generates
/// the task, subsamples K shots, trains, and evaluates both splits.
pub fn base_new_protocol(cfg: &RunConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let started = Instant::now();
    let methods = ProtocolMethod::parse_list(&cfg.methods)?;
    let entries: Vec<(ProtocolMethod, String, RunVariant)> = methods
        .iter()
        .map(|&m| (m, m.name().to_string(), RunVariant::AsConfigured))
        .collect();
    let rows = collect_rows(cfg, &entries, &cfg.shots, &cfg.seeds)?;
    let mut report = EvalReport::from_rows(
        ReportKind::Protocol,
        entries.iter().map(|(_, l, _)| l.clone()).collect(),
        cfg.shots.clone(),
        cfg.seeds.clone(),
        rows,
        cfg.hash(),
    )?;
    report.timing_secs = started.elapsed().as_secs_f64();
    Ok(report)
}

/// Ablation row labels, in their fixed output order.
pub const ABLATION_ROWS: [&str; 3] = ["baseline", "+mi", "+mi+aug"];

/// Three-row component ablation: the plain cross-entropy baseline, the
/// composite objective without mixup, and the full composite method, all
/// over the same seeds.
pub fn ablation_run(cfg: &RunConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let started = Instant::now();
    let entries = vec![
        (
            ProtocolMethod::Trained(Method::Coop),
            ABLATION_ROWS[0].to_string(),
            RunVariant::AsConfigured,
        ),
        (
            ProtocolMethod::Trained(Method::Ours),
            ABLATION_ROWS[1].to_string(),
            RunVariant::NoMixup,
        ),
        (
            ProtocolMethod::Trained(Method::Ours),
            ABLATION_ROWS[2].to_string(),
            RunVariant::AsConfigured,
        ),
    ];
    let rows = collect_rows(cfg, &entries, &cfg.shots, &cfg.seeds)?;
    let mut report = EvalReport::from_rows(
        ReportKind::Ablation,
        ABLATION_ROWS.iter().map(|s| s.to_string()).collect(),
        cfg.shots.clone(),
        cfg.seeds.clone(),
        rows,
        cfg.hash(),
    )?;
    report.timing_secs = started.elapsed().as_secs_f64();
    Ok(report)
}

/// Single-checkpoint evaluation (the `eval` CLI path). Flags a warning in
/// the report when the checkpoint was trained against a different task.
pub fn evaluate_checkpoint(
    model: &TrainedModel,
    task: &FewShotTask,
    encoder: &SyntheticTextEncoder,
) -> Result<EvalReport> {
    let started = Instant::now();
    let (base_acc, new_acc, hm) = split_accuracies(Classifier::Model(model), task, encoder)?;
    let label = model.config.method.name().to_string();
    let rows = vec![RunRow {
        method: label.clone(),
        k: task.shots,
        seed: model.config.seed,
        base_acc,
        new_acc,
        hm,
    }];
    let mut report = EvalReport::from_rows(
        ReportKind::Single,
        vec![label],
        vec![task.shots],
        vec![model.config.seed],
        rows,
        model.config_hash.clone(),
    )?;
    if model.task_fingerprint != task_fingerprint(task) {
        report.warnings.push(format!(
            "task fingerprint mismatch: checkpoint trained on {}, evaluating on {}",
            &model.task_fingerprint[..12.min(model.task_fingerprint.len())],
            &task_fingerprint(task)[..12]
        ));
    }
    report.timing_secs = started.elapsed().as_secs_f64();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::TaskParams;

    fn noise_free_task(seed: u64) -> (FewShotTask, SyntheticTextEncoder) {
        let p = TaskParams {
            num_classes: 6,
            dim: 8,
            hidden: 16,
            shots: 2,
            test_per_class: 4,
            noise_sigma: 0.0,
            prototype_perturb: 0.0,
            m_tokens: 4,
            template_token_norm: crate::task::TEMPLATE_TOKEN_NORM,
            seed,
        };
        let enc = SyntheticTextEncoder::new(seed, p.dim, p.hidden).unwrap();
        (gen_synthetic_task(&p, &enc).unwrap(), enc)
    }

    #[test]
    fn zero_shot_is_perfect_on_noise_free_tasks() {
        let (task, enc) = noise_free_task(8);
        for split in [Split::Base, Split::New] {
            let acc = evaluate_accuracy(Classifier::ZeroShot, &task, split, &enc).unwrap();
            assert_eq!(acc, 1.0);
        }
    }

    #[test]
    fn accuracy_is_invariant_to_sample_order() {
        // Accuracy is a set-level fraction; permuting test rows is
        // equivalent to evaluating another task with rows swapped, and the
        // count of correct verdicts cannot change.
        let (task, enc) = noise_free_task(9);
        let base = evaluate_accuracy(Classifier::ZeroShot, &task, Split::Base, &enc).unwrap();
        let mut shuffled = task.clone();
        let n = shuffled.test_labels.len();
        let perm: Vec<usize> = (0..n).rev().collect();
        let rows: Vec<Vec<f64>> =
            perm.iter().map(|&i| shuffled.test_features.row(i).to_vec()).collect();
        shuffled.test_features = Tensor::from_rows(&rows).unwrap();
        shuffled.test_labels = perm.iter().map(|&i| task.test_labels[i].clone()).collect();
        let base2 =
            evaluate_accuracy(Classifier::ZeroShot, &shuffled, Split::Base, &enc).unwrap();
        assert_eq!(base, base2);
    }

    #[test]
    fn harmonic_mean_paper_anchors_and_properties() {
        let hm = harmonic_mean(72.06, 59.69).unwrap();
        assert!((hm - 65.29).abs() <= 0.005, "{hm}");
        let hm2 = harmonic_mean(72.42, 68.00).unwrap();
        assert!((hm2 - 70.14).abs() <= 0.005, "{hm2}");
        assert_eq!(harmonic_mean(0.0, 0.0).unwrap(), 0.0);
        assert_eq!(harmonic_mean(0.37, 0.37).unwrap(), 0.37);
        assert!(harmonic_mean(-0.1, 0.5).is_err());
        assert!(harmonic_mean(101.0, 0.5).is_err());
        // Symmetry and the arithmetic-mean bound.
        let (a, b) = (0.81, 0.34);
        assert_eq!(harmonic_mean(a, b).unwrap(), harmonic_mean(b, a).unwrap());
        assert!(harmonic_mean(a, b).unwrap() <= (a + b) / 2.0);
    }

    #[test]
    fn protocol_report_shape_for_one_cell() {
        let mut cfg = RunConfig::default();
        cfg.num_classes = 4;
        cfg.dim = 8;
        cfg.hidden = 16;
        cfg.m = 4;
        cfg.epochs = 2;
        cfg.batch = 4;
        cfg.tau = 0.1;
        cfg.methods = vec!["coop".to_string()];
        cfg.shots = vec![2];
        cfg.seeds = vec![1];
        let report = base_new_protocol(&cfg).unwrap();
        assert_eq!(report.rows.len(), 1);
        let row = &report.rows[0];
        assert_eq!(row.method, "coop");
        assert_eq!(row.k, 2);
        assert_eq!(row.seed, 1);
        assert!(row.base_acc >= 0.0 && row.base_acc <= 1.0);
        assert!((row.hm - harmonic_mean(row.base_acc, row.new_acc).unwrap()).abs() <= 1e-9);
    }
}

use promptlab::encoder::SyntheticTextEncoder;
use promptlab::eval::{evaluate_accuracy, Classifier};
use promptlab::task::{gen_synthetic_task, Split, TaskParams};
use promptlab::tensor::dot;

fn main() {
    for scale in [0.25, 0.4, 0.5, 0.6, 0.75, 1.0] {
        let mut accs = Vec::new();
        let mut coss = Vec::new();
        for seed in [1u64, 2, 3] {
            let p = TaskParams {
                num_classes: 10,
                dim: 32,
                hidden: 128,
                shots: 4,
                test_per_class: 20,
                noise_sigma: 0.3,
                prototype_perturb: 0.2,
                m_tokens: 16,
                template_token_norm: scale,
                seed,
            };
            let enc = SyntheticTextEncoder::new(p.seed, p.dim, p.hidden).unwrap();
            let task = gen_synthetic_task(&p, &enc).unwrap();
            let mut sum = 0.0;
            let mut n = 0;
            for i in 0..10 {
                for j in (i + 1)..10 {
                    sum += dot(task.handcrafted.row(i), task.handcrafted.row(j));
                    n += 1;
                }
            }
            coss.push(sum / n as f64);
            let b = evaluate_accuracy(Classifier::ZeroShot, &task, Split::Base, &enc).unwrap();
            let nw = evaluate_accuracy(Classifier::ZeroShot, &task, Split::New, &enc).unwrap();
            accs.push((b, nw));
        }
        let mb: f64 = accs.iter().map(|a| a.0).sum::<f64>() / 3.0;
        let mn: f64 = accs.iter().map(|a| a.1).sum::<f64>() / 3.0;
        let mc: f64 = coss.iter().sum::<f64>() / 3.0;
        println!("template_norm {scale:.2}: mean cos {mc:.3}, zero-shot base {mb:.3} new {mn:.3}");
    }
}

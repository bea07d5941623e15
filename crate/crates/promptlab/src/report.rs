//! Evaluation reports and their markdown/CSV renderings.
//!
//! Reports are pure functions of (configuration, seeds): rows keep a
//! canonical (method, K, seed) order and numbers print with four decimals,
//! so repeated invocations emit byte-identical files. Wall-clock timing is
//! tracked on the struct for interactive display but never rendered into
//! an emitted artifact.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Accuracy triple for one `(method, K, seed)` run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRow {
    pub method: String,
    pub k: usize,
    pub seed: u64,
    pub base_acc: f64,
    pub new_acc: f64,
    pub hm: f64,
}

/// Seed-aggregated row. Two aggregations are reported because published
/// tables mix them: the harmonic mean of the per-split mean accuracies,
/// and the mean of the per-seed harmonic means.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub method: String,
    pub k: usize,
    pub base_mean: f64,
    pub new_mean: f64,
    pub hm_of_means: f64,
    pub mean_hm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportKind {
    Protocol,
    Ablation,
    Single,
}

impl ReportKind {
    fn title(self) -> &'static str {
        match self {
            ReportKind::Protocol => "Base-to-new evaluation",
            ReportKind::Ablation => "Component ablation",
            ReportKind::Single => "Checkpoint evaluation",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Markdown,
    Csv,
}

impl ReportFormat {
    pub fn from_extension(path: &Path) -> ReportFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => ReportFormat::Csv,
            _ => ReportFormat::Markdown,
        }
    }
}

/// Full evaluation report: per-run rows, seed aggregates, and metadata.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub kind: ReportKind,
    /// Methods in presentation order; rows sort by this order first.
    pub methods: Vec<String>,
    pub shots: Vec<usize>,
    pub seeds: Vec<u64>,
    pub rows: Vec<RunRow>,
    pub aggregates: Vec<AggregateRow>,
    pub config_hash: String,
    pub warnings: Vec<String>,
    /// Wall-clock seconds; informational only, never emitted.
    pub timing_secs: f64,
}

impl EvalReport {
    /// Builds a report from raw rows, sorting canonically and computing
    /// both seed aggregations.
    pub fn from_rows(
        kind: ReportKind,
        methods: Vec<String>,
        shots: Vec<usize>,
        seeds: Vec<u64>,
        mut rows: Vec<RunRow>,
        config_hash: String,
    ) -> Result<Self> {
        let rank = |m: &str| methods.iter().position(|x| x == m).unwrap_or(usize::MAX);
        rows.sort_by(|a, b| {
            (rank(&a.method), a.k, a.seed).cmp(&(rank(&b.method), b.k, b.seed))
        });

        let mut aggregates = Vec::new();
        for method in &methods {
            for &k in &shots {
                let group: Vec<&RunRow> =
                    rows.iter().filter(|r| &r.method == method && r.k == k).collect();
                if group.is_empty() {
                    continue;
                }
                let n = group.len() as f64;
                let base_mean = group.iter().map(|r| r.base_acc).sum::<f64>() / n;
                let new_mean = group.iter().map(|r| r.new_acc).sum::<f64>() / n;
                let mean_hm = group.iter().map(|r| r.hm).sum::<f64>() / n;
                aggregates.push(AggregateRow {
                    method: method.clone(),
                    k,
                    base_mean,
                    new_mean,
                    hm_of_means: crate::eval::harmonic_mean(base_mean, new_mean)?,
                    mean_hm,
                });
            }
        }

        Ok(EvalReport {
            kind,
            methods,
            shots,
            seeds,
            rows,
            aggregates,
            config_hash,
            warnings: Vec::new(),
            timing_secs: 0.0,
        })
    }

    fn aggregate(&self, method: &str, k: usize) -> Option<&AggregateRow> {
        self.aggregates.iter().find(|a| a.method == method && a.k == k)
    }

    /// CSV with the fixed header `method,K,seed,base_acc,new_acc,hm`; one
    /// line per run row, four decimals.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,K,seed,base_acc,new_acc,hm\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:.4},{:.4},{:.4}\n",
                r.method, r.k, r.seed, r.base_acc, r.new_acc, r.hm
            ));
        }
        out
    }

    /// Markdown: a Base/New/H grid per shot count over seed means, then an
    /// aggregation-detail table carrying the mean of per-seed harmonic
    /// means in its own column.
    pub fn to_markdown(&self) -> String {
        let mut out = format!("# {}\n\n", self.kind.title());
        if !self.config_hash.is_empty() {
            out.push_str(&format!("Config hash: `{}`\n\n", self.config_hash));
        }
        out.push_str(&format!(
            "Seeds: {}\n\n",
            self.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(", ")
        ));
        for w in &self.warnings {
            out.push_str(&format!("> warning: {w}\n\n"));
        }

        let mut header = String::from("| Method |");
        let mut rule = String::from("|---|");
        for &k in &self.shots {
            header.push_str(&format!(" K={k} Base | K={k} New | K={k} H |"));
            rule.push_str("---|---|---|");
        }
        out.push_str(&header);
        out.push('\n');
        out.push_str(&rule);
        out.push('\n');
        for method in &self.methods {
            let mut line = format!("| {method} |");
            for &k in &self.shots {
                match self.aggregate(method, k) {
                    Some(a) => line.push_str(&format!(
                        " {:.4} | {:.4} | {:.4} |",
                        a.base_mean, a.new_mean, a.hm_of_means
                    )),
                    None => line.push_str(" - | - | - |"),
                }
            }
            out.push_str(&line);
            out.push('\n');
        }

        out.push_str("\n## Aggregation detail\n\n");
        out.push_str("| Method | K | H of split means | Mean of per-seed H |\n");
        out.push_str("|---|---|---|---|\n");
        for a in &self.aggregates {
            out.push_str(&format!(
                "| {} | {} | {:.4} | {:.4} |\n",
                a.method, a.k, a.hm_of_means, a.mean_hm
            ));
        }

        out.push_str("\n## Per-seed rows\n\n");
        out.push_str("| Method | K | Seed | Base | New | H |\n");
        out.push_str("|---|---|---|---|---|---|\n");
        for r in &self.rows {
            out.push_str(&format!(
                "| {} | {} | {} | {:.4} | {:.4} | {:.4} |\n",
                r.method, r.k, r.seed, r.base_acc, r.new_acc, r.hm
            ));
        }
        out
    }

    pub fn render(&self, format: ReportFormat) -> String {
        match format {
            ReportFormat::Markdown => self.to_markdown(),
            ReportFormat::Csv => self.to_csv(),
        }
    }
}

/// Writes the report to `path` in the requested format.
pub fn emit_report(report: &EvalReport, format: ReportFormat, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, report.render(format)).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("cannot write report to {}: {e}", path.display()),
        ))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_report() -> EvalReport {
        let rows = vec![
            RunRow { method: "ours".into(), k: 4, seed: 2, base_acc: 0.9, new_acc: 0.7, hm: 0.7875 },
            RunRow { method: "coop".into(), k: 4, seed: 1, base_acc: 0.8, new_acc: 0.5, hm: 0.6154 },
            RunRow { method: "ours".into(), k: 4, seed: 1, base_acc: 0.85, new_acc: 0.75, hm: 0.7969 },
            RunRow { method: "coop".into(), k: 4, seed: 2, base_acc: 0.82, new_acc: 0.52, hm: 0.6364 },
        ];
        EvalReport::from_rows(
            ReportKind::Protocol,
            vec!["coop".into(), "ours".into()],
            vec![4],
            vec![1, 2],
            rows,
            "abc123".into(),
        )
        .unwrap()
    }

    #[test]
    fn rows_sort_by_method_then_k_then_seed() {
        let r = sample_report();
        let order: Vec<(String, u64)> =
            r.rows.iter().map(|x| (x.method.clone(), x.seed)).collect();
        assert_eq!(
            order,
            vec![
                ("coop".to_string(), 1),
                ("coop".to_string(), 2),
                ("ours".to_string(), 1),
                ("ours".to_string(), 2)
            ]
        );
    }

    #[test]
    fn csv_shape_and_round_trip_at_four_decimals() {
        let r = sample_report();
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.trim_end().lines().collect();
        assert_eq!(lines[0], "method,K,seed,base_acc,new_acc,hm");
        // |methods|·|shots|·|seeds| data rows plus the header.
        assert_eq!(lines.len(), 2 * 1 * 2 + 1);
        for (line, row) in lines[1..].iter().zip(&r.rows) {
            let fields: Vec<&str> = line.split(',').collect();
            assert_eq!(fields[0], row.method);
            assert_eq!(fields[1], row.k.to_string());
            assert_eq!(fields[2], row.seed.to_string());
            let base: f64 = fields[3].parse().unwrap();
            assert!((base - row.base_acc).abs() <= 5e-5);
        }
    }

    #[test]
    fn markdown_grid_has_three_columns_per_shot() {
        let rows = vec![RunRow {
            method: "coop".into(),
            k: 1,
            seed: 1,
            base_acc: 0.5,
            new_acc: 0.5,
            hm: 0.5,
        }];
        let r = EvalReport::from_rows(
            ReportKind::Protocol,
            vec!["coop".into()],
            vec![1, 2, 4],
            vec![1],
            rows,
            String::new(),
        )
        .unwrap();
        let md = r.to_markdown();
        let header = md.lines().find(|l| l.starts_with("| Method |")).unwrap();
        let cols = header.matches('|').count() - 1;
        assert_eq!(cols, 3 * 3 + 1);
    }

    #[test]
    fn aggregates_carry_both_aggregation_styles() {
        let r = sample_report();
        let a = r.aggregate("coop", 4).unwrap();
        assert!((a.base_mean - 0.81).abs() <= 1e-12);
        assert!((a.new_mean - 0.51).abs() <= 1e-12);
        let hm = crate::eval::harmonic_mean(0.81, 0.51).unwrap();
        assert!((a.hm_of_means - hm).abs() <= 1e-12);
        assert!((a.mean_hm - (0.6154 + 0.6364) / 2.0).abs() <= 1e-12);
    }
}

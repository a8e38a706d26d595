//! Ablation harness: variant comparison, KL-weight sweep and category-count sweep.

use serde::Serialize;

use crate::config::{ExperimentConfig, TrainConfig, Variant};
use crate::corpus::PreparedCorpus;
use crate::error::Result;
use crate::eval::{evaluate, metric_rows, CategoryMap, EvalReport, MetricRow, Split};
use crate::scalar::Scalar;
use crate::trainer::Trainer;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Sweep {
    Variant,
    Lambda,
    Categories,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Cell {
    pub sweep: Sweep,
    pub variant: Variant,
    pub lambda: f64,
    pub k: usize,
    pub seed: u64,
}

impl Cell {
    pub fn config(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            variant: self.variant,
            lambda: self.lambda,
            k: self.k,
            seed: self.seed,
            ..base.clone()
        }
    }

    /// KL weight actually applied by this cell.
    pub fn effective_lambda(&self) -> f64 {
        match self.variant {
            Variant::UniPrior(l) => l,
            _ => self.lambda,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum CellOutcome {
    Done { report: EvalReport },
    Failed { error: String },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellResult {
    pub cell: Cell,
    pub outcome: CellOutcome,
}

/// Every cell of the suite, in run order.
pub fn plan(cfg: &ExperimentConfig) -> Vec<Cell> {
    let base = &cfg.train;
    let mut cells = Vec::new();
    for &seed in &cfg.seeds {
        for &variant in &cfg.ablate.variants {
            cells.push(Cell {
                sweep: Sweep::Variant,
                variant,
                lambda: base.lambda,
                k: base.k,
                seed,
            });
        }
        for &lambda in &cfg.ablate.lambdas {
            cells.push(Cell {
                sweep: Sweep::Lambda,
                variant: Variant::Full,
                lambda,
                k: base.k,
                seed,
            });
        }
        for &k in &cfg.ablate.categories {
            cells.push(Cell {
                sweep: Sweep::Categories,
                variant: Variant::Full,
                lambda: base.lambda,
                k,
                seed,
            });
        }
    }
    cells
}

/// Cutoffs reported by the suite: the evaluation cutoffs plus the sweep cutoffs.
pub fn cutoffs(cfg: &ExperimentConfig) -> Vec<usize> {
    let mut ks: Vec<usize> = cfg.eval.ks.iter().chain(&cfg.ablate.diversity_ks).copied().collect();
    ks.sort_unstable();
    ks.dedup();
    ks
}

/// Runs `cells` through `runner`, recording failures without stopping.
pub fn run_cells(
    cells: &[Cell],
    mut runner: impl FnMut(&Cell) -> Result<EvalReport>,
    mut on_done: impl FnMut(&CellResult),
) -> Vec<CellResult> {
    let mut out = Vec::with_capacity(cells.len());
    for cell in cells {
        let outcome = match runner(cell) {
            Ok(report) => CellOutcome::Done { report },
            Err(e) => CellOutcome::Failed { error: e.to_string() },
        };
        let r = CellResult { cell: *cell, outcome };
        on_done(&r);
        out.push(r);
    }
    out
}

/// Trains one cell from scratch and evaluates it on the test split.
pub fn train_and_test<T: Scalar>(
    cell: &Cell,
    cfg: &ExperimentConfig,
    corpus: &PreparedCorpus,
    categories: Option<&CategoryMap>,
) -> Result<EvalReport> {
    let tc = cell.config(&cfg.train);
    let mut trainer = Trainer::<T>::new(&tc, corpus)?;
    trainer.validation_k = cfg.eval.validation_k;
    trainer.fit(corpus, None, None)?;
    evaluate(
        &trainer.model,
        corpus,
        &cutoffs(cfg),
        Split::Test,
        categories,
        tc.batch_size,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationReport {
    pub dataset: String,
    pub results: Vec<CellResult>,
}

impl AblationReport {
    pub fn rows(&self) -> Vec<MetricRow> {
        let mut rows = Vec::new();
        for r in &self.results {
            if let CellOutcome::Done { report } = &r.outcome {
                let c = &r.cell;
                rows.extend(metric_rows(
                    report,
                    &self.dataset,
                    &c.variant.to_string(),
                    c.effective_lambda(),
                    c.k,
                    c.seed,
                ));
            }
        }
        rows
    }

    pub fn failures(&self) -> Vec<&CellResult> {
        self.results
            .iter()
            .filter(|r| matches!(r.outcome, CellOutcome::Failed { .. }))
            .collect()
    }

    /// Human-readable tables: one per sweep. The weight sweep lists recall, NDCG
    /// and diversity side by side for each of `diversity_ks`.
    pub fn table(&self, ks: &[usize], diversity_ks: &[usize]) -> String {
        let mut s = String::new();
        for (sweep, title) in [
            (Sweep::Variant, "variants"),
            (Sweep::Lambda, "KL weight sweep"),
            (Sweep::Categories, "category count sweep"),
        ] {
            let rows: Vec<&CellResult> = self.results.iter().filter(|r| r.cell.sweep == sweep).collect();
            if rows.is_empty() {
                continue;
            }
            let cut = if sweep == Sweep::Lambda { diversity_ks } else { ks };
            s.push_str(&format!("== {title} ({}) ==\n", self.dataset));
            s.push_str(&format!("{:<18} {:>9} {:>3} {:>6}", "variant", "lambda", "k", "seed"));
            for k in cut {
                s.push_str(&format!(" {:>9} {:>9}", format!("R@{k}"), format!("N@{k}")));
                if sweep == Sweep::Lambda {
                    s.push_str(&format!(" {:>9}", format!("D@{k}")));
                }
            }
            s.push('\n');
            for r in rows {
                let c = &r.cell;
                s.push_str(&format!(
                    "{:<18} {:>9.0e} {:>3} {:>6}",
                    c.variant.to_string(),
                    c.effective_lambda(),
                    c.k,
                    c.seed
                ));
                match &r.outcome {
                    CellOutcome::Done { report } => {
                        for &k in cut {
                            match report.at(k) {
                                Some(m) => {
                                    s.push_str(&format!(" {:>9.4} {:>9.4}", m.recall, m.ndcg));
                                    if sweep == Sweep::Lambda {
                                        let d = m.diversity.map_or("-".into(), |d| format!("{d:.4}"));
                                        s.push_str(&format!(" {d:>9}"));
                                    }
                                }
                                None => s.push_str(&format!(" {:>9} {:>9}", "-", "-")),
                            }
                        }
                    }
                    CellOutcome::Failed { error } => s.push_str(&format!("  FAILED: {error}")),
                }
                s.push('\n');
            }
            if sweep == Sweep::Lambda {
                if let Some(note) = self.diversity_trend(diversity_ks) {
                    s.push_str(&note);
                    s.push('\n');
                }
            }
        }
        s
    }

    /// Whether diversity rises with the KL weight, per seed and cutoff. Reported,
    /// not enforced.
    pub fn diversity_trend(&self, ks: &[usize]) -> Option<String> {
        let mut lines = Vec::new();
        let mut seeds: Vec<u64> = self.results.iter().map(|r| r.cell.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        for seed in seeds {
            let mut pts: Vec<(f64, &EvalReport)> = self
                .results
                .iter()
                .filter(|r| r.cell.sweep == Sweep::Lambda && r.cell.seed == seed)
                .filter_map(|r| match &r.outcome {
                    CellOutcome::Done { report } => Some((r.cell.lambda, report)),
                    _ => None,
                })
                .collect();
            if pts.len() < 2 {
                continue;
            }
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            for &k in ks {
                let ds: Option<Vec<f64>> = pts.iter().map(|(_, r)| r.at(k).and_then(|m| m.diversity)).collect();
                if let Some(ds) = ds {
                    let up = ds.windows(2).all(|w| w[1] >= w[0]);
                    lines.push(format!(
                        "seed {seed}: diversity@{k} {} in lambda",
                        if up { "non-decreasing" } else { "not monotone" }
                    ));
                }
            }
        }
        if lines.is_empty() {
            None
        } else {
            Some(lines.join("\n"))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::SigmaError;
    use crate::eval::MetricAtK;

    #[test]
    fn plan_covers_the_category_grid_and_shares_seeds() {
        let cfg = ExperimentConfig {
            seeds: vec![1, 2],
            ..Default::default()
        };
        let cells = plan(&cfg);
        let ks: Vec<usize> = cells
            .iter()
            .filter(|c| c.sweep == Sweep::Categories && c.seed == 1)
            .map(|c| c.k)
            .collect();
        assert_eq!(ks, vec![2, 4, 8, 16]);
        let variants: Vec<String> = cells
            .iter()
            .filter(|c| c.sweep == Sweep::Variant && c.seed == 2)
            .map(|c| c.variant.to_string())
            .collect();
        assert!(variants.contains(&"full".to_string()));
        assert!(variants.contains(&"uni_prior(1)".to_string()));
        assert_eq!(cutoffs(&cfg), vec![10, 20, 40]);
    }

    #[test]
    fn failed_cells_are_recorded_and_the_suite_continues() {
        let cfg = ExperimentConfig::default();
        let cells = plan(&cfg);
        let mut seen = 0;
        let results = run_cells(
            &cells,
            |c| {
                if c.variant == Variant::NoOrth {
                    Err(SigmaError::Eval("boom".into()))
                } else {
                    Ok(EvalReport {
                        split: Split::Test,
                        users: 1,
                        metrics: vec![MetricAtK {
                            k: 10,
                            recall: c.lambda,
                            ndcg: 0.0,
                            diversity: Some(c.lambda),
                        }],
                    })
                }
            },
            |_| seen += 1,
        );
        assert_eq!(seen, cells.len());
        let report = AblationReport {
            dataset: "toy".into(),
            results,
        };
        assert_eq!(report.failures().len(), 1);
        let t = report.table(&[10], &[10]);
        assert!(
            t.contains("FAILED: evaluation error: boom") || t.contains("FAILED"),
            "{t}"
        );
        assert!(t.contains("diversity@10 non-decreasing"), "{t}");
        assert!(!report.rows().is_empty());
    }
}

//! Acceptance run: one PASS / FAIL / BLOCKED line per criterion.
//!
//! The two criteria that need the full Office log only run when
//! `SIGMA_OFFICE_LOG` points at the raw ratings file (user, item, rating,
//! timestamp). They take hours; without the file they report BLOCKED.

mod common;

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sigma_core::ablation::{self, AblationReport, Cell, Sweep};
use sigma_core::autograd::Graph;
use sigma_core::config::ExperimentConfig;
use sigma_core::corpus::load_interactions;
use sigma_core::eval::{diversity_at_k, evaluate, CategoryMap, EvalReport, RankedList, Split};
use sigma_core::gaussian::{gumbel_softmax_hard, kl_to_standard, mc_kl, DiagGaussian, GaussianMixture};
use sigma_core::nn::SeqLayout;
use sigma_core::sequence::{mixture_kl, MixturePrior, SequencePosterior};
use sigma_core::{Matrix, PreparedCorpus, TrainConfig, Trainer, Variant};

use common::{checks, Term};

enum Outcome {
    Pass(String),
    Fail(String),
    Blocked(String),
}

fn line(text: &str) {
    // bypasses the test harness capture so the lines land in the log
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{text}");
    let _ = out.flush();
}

fn run(name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Outcome::Fail(msg)
    });
    let secs = start.elapsed().as_secs_f64();
    let (tag, detail, ok) = match outcome {
        Outcome::Pass(d) => ("PASS", d, true),
        Outcome::Fail(d) => ("FAIL", d, false),
        Outcome::Blocked(d) => ("BLOCKED", d, true),
    };
    line(&format!("[acceptance] {tag:<7} {name}: {detail} ({secs:.1}s)"));
    ok
}

fn kl_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let d = rng.random_range(1..=16);
        let mean: Vec<f64> = (0..d).map(|_| rng.random_range(-1.5..1.5)).collect();
        let std: Vec<f64> = (0..d).map(|_| rng.random_range(0.4..2.0)).collect();
        let q = DiagGaussian::new(mean, std).unwrap();
        let exact = kl_to_standard(&q);
        let est = mc_kl(
            &q,
            &GaussianMixture::single(DiagGaussian::standard(d)),
            100_000,
            &mut rng,
        )
        .unwrap();
        let tol = (0.02 * exact.abs()).max(0.01);
        let err = (est - exact).abs();
        if err > tol {
            return Outcome::Fail(format!("d={d}: closed form {exact:.4}, estimate {est:.4}"));
        }
        worst = worst.max(err / tol);
    }
    let took = start.elapsed();
    if took > Duration::from_secs(60) {
        return Outcome::Fail(format!("took {took:?}"));
    }
    Outcome::Pass(format!("100 Gaussians, worst error {:.0}% of tolerance", worst * 100.0))
}

fn gumbel_calibration() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let n = 100_000;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let k = rng.random_range(2..=16);
        let logits: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let probs: Vec<f64> = logits.iter().map(|l| l.exp() / z).collect();
        let mut counts = vec![0usize; k];
        let mut u = vec![0.0; k];
        for _ in 0..n {
            u.iter_mut().for_each(|x| *x = rng.random::<f64>());
            counts[gumbel_softmax_hard(&logits, 0.5, &u).unwrap().index] += 1;
        }
        for j in 0..k {
            let gap = (counts[j] as f64 / n as f64 - probs[j]).abs();
            if gap > 0.02 {
                return Outcome::Fail(format!("k={k}, category {j}: gap {gap:.4}"));
            }
            worst = worst.max(gap);
        }
    }
    let took = start.elapsed();
    if took > Duration::from_secs(60) {
        return Outcome::Fail(format!("took {took:?}"));
    }
    Outcome::Pass(format!("20 logit vectors, worst gap {worst:.4}"))
}

fn collapsed_mixture_kl() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (d, k, n) = (6, 3, 10_000);
    let mean: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let log_std: Vec<f64> = (0..d).map(|_| rng.random_range(-0.7..0.7)).collect();
    let tile = |v: &[f64], rows: usize| Matrix::from_f64(rows, d, &v.repeat(rows));
    let mut g = Graph::<f64>::new();
    let layout = SeqLayout::new(&mut g, &vec![true; n], 1, n);
    let post = SequencePosterior {
        mean: g.constant(tile(&mean, n)),
        log_std: g.constant(tile(&log_std, n)),
        layout,
    };
    let eps = Matrix::<f64>::randn(n, d, 1.0, &mut rng);
    let z: Vec<f64> = (0..n * d)
        .map(|i| mean[i % d] + log_std[i % d].exp() * eps.data()[i])
        .collect();
    let z = g.constant(Matrix::from_vec(n, d, z));
    let mut w = Vec::with_capacity(n * k);
    for _ in 0..n {
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
        let s: f64 = raw.iter().sum();
        w.extend(raw.iter().map(|x| x / s));
    }
    let prior = MixturePrior {
        means: g.constant(tile(&mean, n * k)),
        log_stds: g.constant(tile(&log_std, n * k)),
        weights: g.constant(Matrix::from_vec(n, k, w)),
    };
    let kl = mixture_kl(&mut g, z, &post, prior, false).unwrap();
    let avg = g.scalar_value(kl) / n as f64;
    if avg.abs() <= 0.02 {
        Outcome::Pass(format!("mean per-position estimate {avg:.2e} over {n} samples"))
    } else {
        Outcome::Fail(format!("mean per-position estimate {avg:.4}"))
    }
}

fn gradient_checks() -> Outcome {
    for (i, term) in [Term::Orth, Term::MieRecon, Term::SgmRecon].into_iter().enumerate() {
        checks::gradients(term, i as u64 + 1);
    }
    Outcome::Pass(format!(
        "orthogonality, interest and sequence reconstruction within {} relative",
        checks::GRAD_TOL
    ))
}

fn structural() -> Outcome {
    checks::outputs_ignore_later_items();
    checks::front_padding_leaves_scores_unchanged();
    checks::subsequences_conserve_length_and_order();
    checks::assignment_and_intensity_rows_lie_on_the_simplex();
    Outcome::Pass(format!(
        "causal suffix perturbation, front padding, subsequence lengths, simplex rows on {} batches each",
        checks::BATCHES
    ))
}

fn office_log() -> Option<PathBuf> {
    std::env::var_os("SIGMA_OFFICE_LOG")
        .map(PathBuf::from)
        .filter(|p| p.exists())
}

fn office_corpus(path: &Path) -> PreparedCorpus {
    let log = load_interactions(path, None).unwrap();
    PreparedCorpus::prepare("office", &log, 5).unwrap()
}

fn office_run(corpus: &PreparedCorpus, variant: Variant, seed: u64) -> EvalReport {
    let cfg = TrainConfig {
        variant,
        seed,
        ..Default::default()
    };
    let mut t = Trainer::<f32>::new(&cfg, corpus).unwrap();
    t.fit(corpus, None, None).unwrap();
    evaluate(&t.model, corpus, &[20, 40], Split::Test, None, cfg.batch_size).unwrap()
}

const NO_OFFICE: &str = "needs the Office ratings log (set SIGMA_OFFICE_LOG) and hours of training; \
not available in this environment";

fn office_end_to_end() -> Outcome {
    let Some(path) = office_log() else {
        return Outcome::Blocked(NO_OFFICE.into());
    };
    let corpus = office_corpus(&path);
    let full = office_run(&corpus, Variant::Full, 42);
    let small = office_run(&corpus, Variant::UniPrior(1e-4), 42);
    let unit = office_run(&corpus, Variant::UniPrior(1.0), 42);
    let r20 = full.at(20).unwrap().recall;
    let (f, s, u) = (full.at(40).unwrap(), small.at(40).unwrap(), unit.at(40).unwrap());
    let ordered = f.recall > s.recall && s.recall > u.recall && f.ndcg > s.ndcg && s.ndcg > u.ndcg;
    let margin = f.ndcg / u.ndcg - 1.0;
    let detail = format!(
        "R@20 {r20:.4}; R@40 {:.4} > {:.4} > {:.4}; N@40 {:.4} > {:.4} > {:.4}; margin {:.1}%",
        f.recall,
        s.recall,
        u.recall,
        f.ndcg,
        s.ndcg,
        u.ndcg,
        margin * 100.0
    );
    if r20 >= 0.12 && ordered && margin >= 0.15 {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn office_orthogonality() -> Outcome {
    let Some(path) = office_log() else {
        return Outcome::Blocked(NO_OFFICE.into());
    };
    let corpus = office_corpus(&path);
    let mut wins = 0;
    let mut detail = Vec::new();
    for seed in [42, 43, 44] {
        let full = office_run(&corpus, Variant::Full, seed).at(20).unwrap().ndcg;
        let no = office_run(&corpus, Variant::NoOrth, seed).at(20).unwrap().ndcg;
        if no < full {
            wins += 1;
        }
        detail.push(format!("seed {seed}: {full:.4} vs {no:.4}"));
    }
    let d = detail.join("; ");
    if wins >= 2 {
        Outcome::Pass(d)
    } else {
        Outcome::Fail(d)
    }
}

fn diversity() -> Outcome {
    let list = |items: &[u32]| RankedList {
        user: 0,
        items: items.to_vec(),
        scores: vec![0.0; items.len()],
    };
    let mut same = CategoryMap::new();
    for i in 1..=4 {
        same.insert(i, ["drama".to_string(), format!("g{i}")]);
    }
    let mut c = CategoryMap::new();
    c.insert(1, ["a", "b"]);
    c.insert(2, ["b"]);
    c.insert(3, ["c"]);
    c.insert(5, ["d"]);
    let got = [
        diversity_at_k(&[list(&[1, 2, 3, 4])], &same, 4).unwrap(),
        diversity_at_k(&[list(&[2, 3, 5])], &c, 3).unwrap(),
        diversity_at_k(&[list(&[1, 2, 3])], &c, 3).unwrap(),
    ];
    if got != [0.0, 1.0, 2.0 / 3.0] {
        return Outcome::Fail(format!("examples gave {got:?}"));
    }

    // weight sweep on a small genre-labeled corpus
    let n = 50;
    let corpus = common::toy_corpus(40, n, 8);
    let mut genres = CategoryMap::new();
    for i in 1..=n as u32 {
        genres.insert(i, [format!("g{}", i % 5)]);
    }
    let mut cfg = ExperimentConfig {
        train: TrainConfig {
            max_epochs: 1,
            ..common::small_config(Variant::Full)
        },
        ..Default::default()
    };
    cfg.ablate.variants.clear();
    cfg.ablate.categories.clear();
    let cells: Vec<Cell> = ablation::plan(&cfg);
    assert!(cells.iter().all(|c| c.sweep == Sweep::Lambda));
    let results = ablation::run_cells(
        &cells,
        |c| ablation::train_and_test::<f32>(c, &cfg, &corpus, Some(&genres)),
        |_| {},
    );
    let report = AblationReport {
        dataset: "toy".into(),
        results,
    };
    let table = report.table(&cfg.eval.ks, &cfg.ablate.diversity_ks);
    let wanted = ["R@10", "N@10", "D@10", "R@40", "N@40", "D@40"];
    if !report.failures().is_empty() || !wanted.iter().all(|h| table.contains(h)) {
        return Outcome::Fail(format!("sweep table incomplete:\n{table}"));
    }
    let trend = report.diversity_trend(&cfg.ablate.diversity_ks).unwrap_or_default();
    Outcome::Pass(format!(
        "examples 0, 1, 2/3 exact; sweep tabulates {} weights ({})",
        cells.len(),
        trend.replace('\n', "; ")
    ))
}

fn determinism() -> Outcome {
    checks::determinism();
    Outcome::Pass("epochs 0..2 losses and final metrics identical across runs".into())
}

#[test]
fn acceptance() {
    type Criterion = (&'static str, fn() -> Outcome);
    let criteria: Vec<Criterion> = vec![
        ("KL closed form vs Monte Carlo", kl_oracle),
        ("Gumbel-softmax pick frequencies", gumbel_calibration),
        ("mixture KL with collapsed prior", collapsed_mixture_kl),
        ("gradient checks", gradient_checks),
        ("structural invariants", structural),
        (
            "Office end-to-end accuracy and prior ablation ordering",
            office_end_to_end,
        ),
        ("Office orthogonality ablation direction", office_orthogonality),
        ("diversity metric and weight sweep report", diversity),
        ("determinism", determinism),
    ];
    let mut failed = Vec::new();
    for (name, f) in criteria {
        if !run(name, f) {
            failed.push(name);
        }
    }
    assert!(failed.is_empty(), "failed: {failed:?}");
}

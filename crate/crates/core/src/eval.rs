//! Ranking metrics, diversity, and full-catalog evaluation.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::Serialize;

use crate::corpus::{IdMap, PreparedCorpus};
use crate::error::{Result, SigmaError};
use crate::model::SigmaModel;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Top-K items of one user, best first.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankedList {
    pub user: u32,
    pub items: Vec<u32>,
    pub scores: Vec<f64>,
}

/// `a` ranks before `b`: higher score first, ties by lower index. NaN sorts last.
fn before<T: Scalar>(sa: T, a: usize, sb: T, b: usize) -> bool {
    match (sa.is_nan(), sb.is_nan()) {
        (true, true) => a < b,
        (true, false) => false,
        (false, true) => true,
        _ => sa > sb || (sa == sb && a < b),
    }
}

/// Top `k` of a score row whose column `i` is item `i + 1`; `k` is clipped to the
/// catalog size.
pub fn top_k<T: Scalar>(user: u32, scores: &[T], k: usize) -> RankedList {
    let k = k.min(scores.len());
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    let cmp = |&a: &usize, &b: &usize| {
        if before(scores[a], a, scores[b], b) {
            std::cmp::Ordering::Less
        } else if a == b {
            std::cmp::Ordering::Equal
        } else {
            std::cmp::Ordering::Greater
        }
    };
    if k > 0 && k < idx.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(cmp);
    idx.truncate(k);
    RankedList {
        user,
        items: idx.iter().map(|&i| i as u32 + 1).collect(),
        scores: idx.iter().map(|&i| scores[i].as_f64()).collect(),
    }
}

/// 1-based rank of item `target` (≥ 1) under the same ordering as [`top_k`].
pub fn rank_of<T: Scalar>(scores: &[T], target: u32) -> Result<usize> {
    let t = target as usize;
    if t == 0 || t > scores.len() {
        return Err(SigmaError::Eval(format!(
            "target {target} outside catalog of {}",
            scores.len()
        )));
    }
    let t = t - 1;
    let st = scores[t];
    Ok(1 + (0..scores.len())
        .filter(|&i| i != t && before(scores[i], i, st, t))
        .count())
}

pub fn recall_from_rank(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

/// `1 / log₂(rank + 1)` inside the cutoff.
pub fn ndcg_from_rank(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

fn position(list: &RankedList, target: u32) -> Option<usize> {
    list.items.iter().position(|&i| i == target).map(|p| p + 1)
}

pub fn recall_at_k(list: &RankedList, target: u32, k: usize) -> Result<f64> {
    if target == 0 {
        return Err(SigmaError::Eval("padding id is not a valid target".into()));
    }
    Ok(position(list, target).map_or(0.0, |r| recall_from_rank(r, k)))
}

pub fn ndcg_at_k(list: &RankedList, target: u32, k: usize) -> Result<f64> {
    if target == 0 {
        return Err(SigmaError::Eval("padding id is not a valid target".into()));
    }
    Ok(position(list, target).map_or(0.0, |r| ndcg_from_rank(r, k)))
}

/// Genre labels per catalog item.
#[derive(Clone, Debug, Default)]
pub struct CategoryMap {
    labels: HashMap<u32, BTreeSet<String>>,
}

impl CategoryMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert<S: Into<String>>(&mut self, item: u32, labels: impl IntoIterator<Item = S>) {
        self.labels
            .entry(item)
            .or_default()
            .extend(labels.into_iter().map(Into::into));
    }

    pub fn get(&self, item: u32) -> Option<&BTreeSet<String>> {
        self.labels.get(&item).filter(|s| !s.is_empty())
    }

    /// Same category iff the label sets intersect.
    pub fn same(&self, a: u32, b: u32) -> bool {
        match (self.get(a), self.get(b)) {
            (Some(x), Some(y)) => !x.is_disjoint(y),
            _ => false,
        }
    }

    /// Reads `item::title::A|B` or `item<sep>A|B` lines (sep: tab or comma),
    /// mapping raw ids through `items`. Unknown raw ids are skipped.
    pub fn load(path: &Path, items: &IdMap) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SigmaError::io(path, e))?;
        let mut map = CategoryMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = if line.contains("::") {
                line.split("::").collect()
            } else if line.contains('\t') {
                line.split('\t').collect()
            } else {
                line.splitn(2, ',').collect()
            };
            if fields.len() < 2 {
                return Err(SigmaError::Parse {
                    path: path.to_path_buf(),
                    line: n + 1,
                    msg: "expected an item id and a genre list".into(),
                });
            }
            let Some(id) = items.get(fields[0].trim()) else {
                continue;
            };
            let genres = fields[fields.len() - 1];
            map.insert(id, genres.split('|').map(str::trim).filter(|g| !g.is_empty()));
        }
        Ok(map)
    }
}

/// Mean over lists of the fraction of top-K pairs in different categories.
pub fn diversity_at_k(lists: &[RankedList], categories: &CategoryMap, k: usize) -> Result<f64> {
    if k < 2 {
        return Err(SigmaError::Eval(format!("diversity needs K ≥ 2, got {k}")));
    }
    let mut missing = BTreeSet::new();
    for l in lists {
        for &i in l.items.iter().take(k) {
            if categories.get(i).is_none() {
                missing.insert(i);
            }
        }
    }
    if !missing.is_empty() {
        let shown: Vec<String> = missing.iter().take(20).map(|i| i.to_string()).collect();
        return Err(SigmaError::Eval(format!(
            "{} items have no genre labels: {}{}",
            missing.len(),
            shown.join(", "),
            if missing.len() > 20 { ", ..." } else { "" }
        )));
    }
    if lists.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for l in lists {
        let items = &l.items[..k.min(l.items.len())];
        let mut differ = 0usize;
        for a in 0..items.len() {
            for b in a + 1..items.len() {
                if !categories.same(items[a], items[b]) {
                    differ += 1;
                }
            }
        }
        total += differ as f64 / (k * (k - 1) / 2) as f64;
    }
    Ok(total / lists.len() as f64)
}

/// Anything that can score the catalog given item histories.
pub trait Scorer {
    type Scalar: Scalar;
    fn num_items(&self) -> usize;
    /// One row per history; column `i` scores item `i + 1`.
    fn score(&self, histories: &[&[u32]]) -> Result<Matrix<Self::Scalar>>;
}

impl<T: Scalar> Scorer for SigmaModel<T> {
    type Scalar = T;

    fn num_items(&self) -> usize {
        SigmaModel::num_items(self)
    }

    fn score(&self, histories: &[&[u32]]) -> Result<Matrix<T>> {
        SigmaModel::score(self, histories, self.config.batch_size)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Validation,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricAtK {
    pub k: usize,
    pub recall: f64,
    pub ndcg: f64,
    pub diversity: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub split: Split,
    pub users: usize,
    pub metrics: Vec<MetricAtK>,
}

impl EvalReport {
    pub fn at(&self, k: usize) -> Option<&MetricAtK> {
        self.metrics.iter().find(|m| m.k == k)
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:?} users: {}\n", self.split, self.users);
        s.push_str(&format!(
            "{:>5}  {:>8}  {:>8}  {:>9}\n",
            "K", "Recall", "NDCG", "Diversity"
        ));
        for m in &self.metrics {
            let d = m.diversity.map_or("-".to_string(), |d| format!("{d:.4}"));
            s.push_str(&format!("{:>5}  {:>8.4}  {:>8.4}  {:>9}\n", m.k, m.recall, m.ndcg, d));
        }
        s
    }
}

/// Leave-one-out evaluation over the full catalog, no history filtering.
/// Validation conditions on the training prefix; test adds the validation item.
pub fn evaluate<S: Scorer>(
    scorer: &S,
    corpus: &PreparedCorpus,
    ks: &[usize],
    split: Split,
    categories: Option<&CategoryMap>,
    chunk: usize,
) -> Result<EvalReport> {
    if scorer.num_items() != corpus.num_items() {
        return Err(SigmaError::Incompatible(format!(
            "model scores {} items, corpus has {}",
            scorer.num_items(),
            corpus.num_items()
        )));
    }
    if ks.is_empty() || ks.contains(&0) {
        return Err(SigmaError::Eval("need positive cutoffs".into()));
    }
    let kmax = *ks.iter().max().expect("nonempty");
    let mut recall = vec![0.0; ks.len()];
    let mut ndcg = vec![0.0; ks.len()];
    let mut lists = Vec::new();
    let chunk = chunk.max(1);
    for part in corpus.splits.chunks(chunk) {
        let owned: Vec<Vec<u32>> = part
            .iter()
            .map(|s| match split {
                Split::Validation => s.val_history().to_vec(),
                Split::Test => s.test_history(),
            })
            .collect();
        let hist: Vec<&[u32]> = owned.iter().map(Vec::as_slice).collect();
        let scores = scorer.score(&hist)?;
        for (r, s) in part.iter().enumerate() {
            let target = match split {
                Split::Validation => s.val_target,
                Split::Test => s.test_target,
            };
            let rank = rank_of(scores.row(r), target)?;
            for (i, &k) in ks.iter().enumerate() {
                recall[i] += recall_from_rank(rank, k);
                ndcg[i] += ndcg_from_rank(rank, k);
            }
            if categories.is_some() {
                lists.push(top_k(s.train.user, scores.row(r), kmax));
            }
        }
    }
    let n = corpus.splits.len().max(1) as f64;
    let mut metrics = Vec::with_capacity(ks.len());
    for (i, &k) in ks.iter().enumerate() {
        let diversity = match categories {
            Some(c) if k >= 2 => Some(diversity_at_k(&lists, c, k)?),
            _ => None,
        };
        metrics.push(MetricAtK {
            k,
            recall: recall[i] / n,
            ndcg: ndcg[i] / n,
            diversity,
        });
    }
    Ok(EvalReport {
        split,
        users: corpus.splits.len(),
        metrics,
    })
}

/// One machine-readable metric record.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub dataset: String,
    pub variant: String,
    pub lambda: f64,
    pub k: usize,
    pub seed: u64,
    pub metric: String,
    #[serde(rename = "K")]
    pub cutoff: usize,
    pub value: f64,
}

pub fn metric_rows(
    report: &EvalReport,
    dataset: &str,
    variant: &str,
    lambda: f64,
    k: usize,
    seed: u64,
) -> Vec<MetricRow> {
    let mut rows = Vec::new();
    for m in &report.metrics {
        let mut push = |name: &str, value: f64| {
            rows.push(MetricRow {
                dataset: dataset.to_string(),
                variant: variant.to_string(),
                lambda,
                k,
                seed,
                metric: name.to_string(),
                cutoff: m.k,
                value,
            })
        };
        push("recall", m.recall);
        push("ndcg", m.ndcg);
        if let Some(d) = m.diversity {
            push("diversity", d);
        }
    }
    rows
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn list(items: &[u32]) -> RankedList {
        RankedList {
            user: 0,
            items: items.to_vec(),
            scores: (0..items.len()).rev().map(|v| v as f64).collect(),
        }
    }

    #[test]
    fn recall_and_ndcg_examples() {
        let items: Vec<u32> = (1..=50).collect();
        let l = list(&items);
        assert_eq!(recall_at_k(&l, 1, 20).unwrap(), 1.0);
        assert_eq!(recall_at_k(&l, 21, 20).unwrap(), 0.0);
        assert_eq!(recall_at_k(&l, 21, 40).unwrap(), 1.0);
        assert_eq!(ndcg_at_k(&l, 1, 20).unwrap(), 1.0);
        assert!((ndcg_at_k(&l, 2, 20).unwrap() - 0.6309).abs() < 1e-4);
        assert!((ndcg_at_k(&l, 2, 20).unwrap() - 1.0 / 3f64.log2()).abs() < 1e-15);
        for t in 1..=5 {
            assert_eq!(ndcg_at_k(&l, t, 1).unwrap(), recall_at_k(&l, t, 1).unwrap());
        }
        assert!(recall_at_k(&l, 0, 5).is_err());
    }

    #[test]
    fn top_k_orders_by_score_then_index() {
        let s = [0.5f64, 2.0, 0.5, 3.0, 0.5];
        let l = top_k(7, &s, 10);
        assert_eq!(l.items, vec![4, 2, 1, 3, 5]);
        assert_eq!(l.user, 7);
        assert_eq!(top_k(0, &s, 2).items, vec![4, 2]);
        for t in 1..=5u32 {
            let pos = l.items.iter().position(|&i| i == t).unwrap() + 1;
            assert_eq!(rank_of(&s, t).unwrap(), pos);
        }
        assert!(rank_of(&s, 6).is_err());
        let nan = [f64::NAN, 1.0];
        assert_eq!(top_k(0, &nan, 2).items, vec![2, 1]);
    }

    #[test]
    fn diversity_examples() {
        let mut c = CategoryMap::new();
        c.insert(1, ["a", "b"]);
        c.insert(2, ["b"]);
        c.insert(3, ["c"]);
        c.insert(4, ["a", "x"]);
        c.insert(5, ["d"]);
        let mut same = CategoryMap::new();
        for i in 1..=4 {
            same.insert(i, ["drama", &format!("g{i}")[..]]);
        }
        assert_eq!(diversity_at_k(&[list(&[1, 2, 3, 4])], &same, 4).unwrap(), 0.0);
        assert_eq!(diversity_at_k(&[list(&[2, 3, 5])], &c, 3).unwrap(), 1.0);
        // one overlapping pair among three
        let d = diversity_at_k(&[list(&[1, 2, 3])], &c, 3).unwrap();
        assert_eq!(d, 2.0 / 3.0);
        // permutation invariance
        assert_eq!(diversity_at_k(&[list(&[3, 1, 2])], &c, 3).unwrap(), d);
        let err = diversity_at_k(&[list(&[1, 9])], &c, 2).unwrap_err();
        assert!(err.to_string().contains('9'));
        assert!(diversity_at_k(&[list(&[1, 2])], &c, 1).is_err());
    }

    struct Fixed {
        n: usize,
        seed: u64,
        oracle: Option<Vec<u32>>,
    }

    impl Scorer for Fixed {
        type Scalar = f64;
        fn num_items(&self) -> usize {
            self.n
        }
        fn score(&self, histories: &[&[u32]]) -> Result<Matrix<f64>> {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed + histories[0].len() as u64);
            let mut m = Matrix::zeros(histories.len(), self.n);
            for r in 0..histories.len() {
                for c in 0..self.n {
                    m.set(r, c, rng.random::<f64>());
                }
            }
            if let Some(o) = &self.oracle {
                for (r, h) in histories.iter().enumerate() {
                    // the oracle knows the next item from the history's last entry
                    let next = o[*h.last().unwrap() as usize];
                    m.set(r, next as usize - 1, 10.0);
                }
            }
            Ok(m)
        }
    }

    fn synthetic(users: usize, n: usize, seed: u64) -> PreparedCorpus {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seqs: Vec<Vec<u32>> = (0..users)
            .map(|_| {
                (0..rng.random_range(4..9))
                    .map(|_| rng.random_range(1..=n as u32))
                    .collect()
            })
            .collect();
        PreparedCorpus::from_sequences("toy", n, &seqs).unwrap()
    }

    #[test]
    fn random_ranker_recall_matches_binomial_bounds() {
        let corpus = synthetic(5000, 1000, 1);
        let r = evaluate(
            &Fixed {
                n: 1000,
                seed: 3,
                oracle: None,
            },
            &corpus,
            &[20, 40],
            Split::Test,
            None,
            97,
        )
        .unwrap();
        let r20 = r.at(20).unwrap().recall;
        assert!((0.015..=0.025).contains(&r20), "{r20}");
        assert!(r.at(40).unwrap().recall >= r20);
        assert!(r.at(40).unwrap().ndcg >= r.at(20).unwrap().ndcg);
    }

    #[test]
    fn perfect_ranker_scores_one() {
        // each user's sequence is a chain i → i+1, so the next item is known
        let n = 30u32;
        let seqs: Vec<Vec<u32>> = (0..40).map(|u| (0..6).map(|t| (u + t) % n + 1).collect()).collect();
        let corpus = PreparedCorpus::from_sequences("chain", n as usize, &seqs).unwrap();
        let next: Vec<u32> = (0..=n).map(|i| i % n + 1).collect();
        let s = Fixed {
            n: n as usize,
            seed: 0,
            oracle: Some(next),
        };
        for split in [Split::Validation, Split::Test] {
            let r = evaluate(&s, &corpus, &[1, 20], split, None, 7).unwrap();
            assert!(r.metrics.iter().all(|m| m.recall == 1.0 && m.ndcg == 1.0));
        }
    }

    #[test]
    fn evaluate_is_deterministic_and_checks_catalog() {
        let corpus = synthetic(50, 40, 2);
        let s = Fixed {
            n: 40,
            seed: 9,
            oracle: None,
        };
        let a = evaluate(&s, &corpus, &[20], Split::Test, None, 16).unwrap();
        let b = evaluate(&s, &corpus, &[20], Split::Test, None, 16).unwrap();
        assert_eq!(a, b);
        let bad = Fixed {
            n: 41,
            seed: 9,
            oracle: None,
        };
        assert!(matches!(
            evaluate(&bad, &corpus, &[20], Split::Test, None, 16),
            Err(SigmaError::Incompatible(_))
        ));
    }

    #[test]
    fn metric_rows_carry_all_keys() {
        let report = EvalReport {
            split: Split::Test,
            users: 3,
            metrics: vec![MetricAtK {
                k: 20,
                recall: 0.5,
                ndcg: 0.25,
                diversity: Some(0.1),
            }],
        };
        let rows = metric_rows(&report, "toy", "full", 1e-4, 4, 7);
        assert_eq!(rows.len(), 3);
        let json = serde_json::to_value(&rows[0]).unwrap();
        for key in ["dataset", "variant", "lambda", "k", "seed", "metric", "K", "value"] {
            assert!(json.get(key).is_some(), "{key}");
        }
    }
}

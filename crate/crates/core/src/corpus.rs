//! Interaction logs, k-core filtering, leave-one-out splits and padded batches.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SigmaError};

/// Item index reserved for front padding.
pub const PAD: u32 = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    pub rating: f64,
    pub timestamp: i64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InteractionLog {
    /// In file order; ties in timestamp are broken by this order.
    pub records: Vec<Interaction>,
}

impl InteractionLog {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    /// Every rating counts as implicit feedback.
    Amazon,
    /// Ratings at or above a threshold (4 by default) count as positive.
    Movielens,
}

impl DatasetKind {
    pub fn default_threshold(self) -> Option<f64> {
        match self {
            DatasetKind::Amazon => None,
            DatasetKind::Movielens => Some(4.0),
        }
    }
}

impl std::str::FromStr for DatasetKind {
    type Err = SigmaError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "amazon" => Ok(DatasetKind::Amazon),
            "movielens" => Ok(DatasetKind::Movielens),
            other => Err(SigmaError::Config(format!(
                "unknown dataset type `{other}` (expected amazon or movielens)"
            ))),
        }
    }
}

fn open_text(path: &Path) -> Result<Box<dyn BufRead>> {
    let mut file = File::open(path).map_err(|e| SigmaError::io(path, e))?;
    let mut magic = [0u8; 2];
    let n = file.read(&mut magic).map_err(|e| SigmaError::io(path, e))?;
    let file = File::open(path).map_err(|e| SigmaError::io(path, e))?;
    if n == 2 && magic == [0x1f, 0x8b] {
        Ok(Box::new(BufReader::new(GzDecoder::new(file))))
    } else {
        Ok(Box::new(BufReader::new(file)))
    }
}

fn split_fields(line: &str) -> Vec<&str> {
    if line.contains("::") {
        line.split("::").collect()
    } else if line.contains('\t') {
        line.split('\t').collect()
    } else {
        line.split(',').collect()
    }
}

/// Reads `user, item, rating, timestamp` lines (tab, comma or `::` separated,
/// optionally gzip-compressed). A first line whose rating or timestamp does
/// not parse is treated as a header.
pub fn load_interactions(path: &Path, positive_threshold: Option<f64>) -> Result<InteractionLog> {
    let reader = open_text(path)?;
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| SigmaError::io(path, e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields = split_fields(line);
        let parse_err = |msg: String| SigmaError::Parse {
            path: path.to_path_buf(),
            line: lineno,
            msg,
        };
        if fields.len() < 4 {
            return Err(parse_err(format!(
                "expected 4 fields (user, item, rating, timestamp), found {}",
                fields.len()
            )));
        }
        let rating = fields[2].trim().parse::<f64>();
        let timestamp = fields[3].trim().parse::<f64>();
        let (rating, timestamp) = match (rating, timestamp) {
            (Ok(r), Ok(t)) => (r, t as i64),
            _ if lineno == 1 => continue,
            (Err(_), _) => return Err(parse_err(format!("bad rating `{}`", fields[2]))),
            (_, Err(_)) => return Err(parse_err(format!("bad timestamp `{}`", fields[3]))),
        };
        if positive_threshold.is_some_and(|th| rating < th) {
            continue;
        }
        records.push(Interaction {
            user: fields[0].trim().to_string(),
            item: fields[1].trim().to_string(),
            rating,
            timestamp,
        });
    }
    if records.is_empty() {
        return Err(SigmaError::EmptyCorpus(format!(
            "no interactions kept from {}",
            path.display()
        )));
    }
    Ok(InteractionLog { records })
}

/// Bijection between raw ids and contiguous indices starting at `offset`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IdMap {
    offset: u32,
    raw: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl IdMap {
    pub fn new(offset: u32) -> Self {
        IdMap {
            offset,
            raw: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn intern(&mut self, raw: &str) -> u32 {
        if let Some(&i) = self.index.get(raw) {
            return i;
        }
        let i = self.offset + self.raw.len() as u32;
        self.raw.push(raw.to_string());
        self.index.insert(raw.to_string(), i);
        i
    }

    pub fn get(&self, raw: &str) -> Option<u32> {
        self.index.get(raw).copied()
    }

    pub fn raw(&self, index: u32) -> Option<&str> {
        index
            .checked_sub(self.offset)
            .and_then(|i| self.raw.get(i as usize))
            .map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    /// Rebuilds the lookup table after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .raw
            .iter()
            .enumerate()
            .map(|(i, r)| (r.clone(), self.offset + i as u32))
            .collect();
    }
}

/// Log after k-core filtering, with users mapped to `0..U` and items to `1..=N`.
#[derive(Clone, Debug)]
pub struct FilteredLog {
    pub log: InteractionLog,
    pub users: IdMap,
    pub items: IdMap,
}

/// Removes users and items with fewer than `min_count` records, repeatedly,
/// until every survivor meets the bound.
pub fn filter_kcore(log: &InteractionLog, min_count: usize) -> Result<FilteredLog> {
    if min_count == 0 {
        return Err(SigmaError::Config("min_count must be at least 1".into()));
    }
    let mut alive: Vec<&Interaction> = log.records.iter().collect();
    loop {
        let mut user_deg: HashMap<&str, usize> = HashMap::new();
        let mut item_deg: HashMap<&str, usize> = HashMap::new();
        for r in &alive {
            *user_deg.entry(r.user.as_str()).or_default() += 1;
            *item_deg.entry(r.item.as_str()).or_default() += 1;
        }
        let before = alive.len();
        alive.retain(|r| user_deg[r.user.as_str()] >= min_count && item_deg[r.item.as_str()] >= min_count);
        if alive.len() == before {
            break;
        }
    }
    if alive.is_empty() {
        return Err(SigmaError::EmptyCorpus(format!(
            "{min_count}-core filtering removed every interaction"
        )));
    }
    let mut users = IdMap::new(0);
    let mut items = IdMap::new(1);
    for r in &alive {
        users.intern(&r.user);
        items.intern(&r.item);
    }
    Ok(FilteredLog {
        log: InteractionLog {
            records: alive.into_iter().cloned().collect(),
        },
        users,
        items,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSequence {
    pub user: u32,
    /// Item indices in ascending timestamp order.
    pub items: Vec<u32>,
}

impl UserSequence {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Groups the filtered log per user, sorted by timestamp (stable on file order).
pub fn build_sequences(filtered: &FilteredLog) -> Vec<UserSequence> {
    let mut per_user: Vec<Vec<(i64, u32)>> = vec![Vec::new(); filtered.users.len()];
    for r in &filtered.log.records {
        let u = filtered.users.get(&r.user).expect("user interned");
        let i = filtered.items.get(&r.item).expect("item interned");
        per_user[u as usize].push((r.timestamp, i));
    }
    per_user
        .into_iter()
        .enumerate()
        .map(|(u, mut events)| {
            events.sort_by_key(|&(t, _)| t);
            UserSequence {
                user: u as u32,
                items: events.into_iter().map(|(_, i)| i).collect(),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeaveOneOut {
    pub train: UserSequence,
    pub val_target: u32,
    pub test_target: u32,
}

impl LeaveOneOut {
    /// History used to score the validation target.
    pub fn val_history(&self) -> &[u32] {
        &self.train.items
    }

    /// History used to score the test target: training items plus the validation item.
    pub fn test_history(&self) -> Vec<u32> {
        let mut h = self.train.items.clone();
        h.push(self.val_target);
        h
    }
}

/// Last item for test, second to last for validation, the rest for training.
/// Returns `None` for sequences shorter than 3.
pub fn split_leave_one_out(seq: &UserSequence) -> Option<LeaveOneOut> {
    let n = seq.items.len();
    if n < 3 {
        return None;
    }
    Some(LeaveOneOut {
        train: UserSequence {
            user: seq.user,
            items: seq.items[..n - 2].to_vec(),
        },
        val_target: seq.items[n - 2],
        test_target: seq.items[n - 1],
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaddedRow {
    pub ids: Vec<u32>,
    pub mask: Vec<bool>,
}

impl PaddedRow {
    pub fn unpad(&self) -> Vec<u32> {
        self.ids
            .iter()
            .zip(&self.mask)
            .filter(|(_, &m)| m)
            .map(|(&i, _)| i)
            .collect()
    }
}

/// Keeps the most recent `max_len` items and front-pads with [`PAD`].
pub fn pad_truncate(items: &[u32], max_len: usize) -> PaddedRow {
    assert!(max_len >= 1, "max_len must be positive");
    let kept = &items[items.len().saturating_sub(max_len)..];
    let pad = max_len - kept.len();
    let mut ids = vec![PAD; pad];
    ids.extend_from_slice(kept);
    let mut mask = vec![false; pad];
    mask.extend(std::iter::repeat_n(true, kept.len()));
    PaddedRow { ids, mask }
}

/// Front-padded id matrix with per-position next-item targets.
///
/// Rows are padded to the longest (truncated) sequence in the batch rather
/// than to `max_len`; outputs at real positions do not depend on the number
/// of leading pads.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch {
    pub users: Vec<u32>,
    pub width: usize,
    /// `rows × width`, row-major.
    pub ids: Vec<u32>,
    pub mask: Vec<bool>,
    /// Next item for each position, [`PAD`] where there is none.
    pub targets: Vec<u32>,
}

impl SequenceBatch {
    /// Training batch: inputs are `items[..n-1]`, targets `items[1..]`.
    pub fn for_training(seqs: &[&UserSequence], max_len: usize) -> Self {
        let rows: Vec<(u32, &[u32], &[u32])> = seqs
            .iter()
            .map(|s| {
                let n = s.items.len();
                let inputs = &s.items[..n.saturating_sub(1)];
                let targets = if n > 0 { &s.items[1..] } else { &s.items[..] };
                (s.user, inputs, targets)
            })
            .collect();
        Self::assemble(&rows, max_len)
    }

    /// Inference batch over histories; every target is [`PAD`].
    pub fn for_inference(histories: &[(u32, &[u32])], max_len: usize) -> Self {
        let rows: Vec<(u32, &[u32], &[u32])> = histories.iter().map(|&(u, h)| (u, h, &[][..])).collect();
        Self::assemble(&rows, max_len)
    }

    fn assemble(rows: &[(u32, &[u32], &[u32])], max_len: usize) -> Self {
        let width = rows
            .iter()
            .map(|(_, x, _)| x.len().min(max_len))
            .max()
            .unwrap_or(0)
            .max(1);
        let mut ids = Vec::with_capacity(rows.len() * width);
        let mut mask = Vec::with_capacity(rows.len() * width);
        let mut targets = Vec::with_capacity(rows.len() * width);
        for &(_, inputs, tgts) in rows {
            let row = pad_truncate(inputs, width);
            let kept = inputs.len().min(width);
            let pad = width - kept;
            ids.extend_from_slice(&row.ids);
            mask.extend_from_slice(&row.mask);
            targets.extend(std::iter::repeat_n(PAD, pad));
            if tgts.is_empty() {
                targets.extend(std::iter::repeat_n(PAD, kept));
            } else {
                targets.extend_from_slice(&tgts[tgts.len() - kept..]);
            }
        }
        SequenceBatch {
            users: rows.iter().map(|r| r.0).collect(),
            width,
            ids,
            mask,
            targets,
        }
    }

    pub fn rows(&self) -> usize {
        self.users.len()
    }

    pub fn row_ids(&self, r: usize) -> &[u32] {
        &self.ids[r * self.width..(r + 1) * self.width]
    }

    pub fn row_mask(&self, r: usize) -> &[bool] {
        &self.mask[r * self.width..(r + 1) * self.width]
    }

    /// Flat indices of positions that carry a next-item target.
    pub fn target_positions(&self) -> Vec<usize> {
        (0..self.ids.len())
            .filter(|&p| self.mask[p] && self.targets[p] != PAD)
            .collect()
    }

    /// Flat index of the last real position of each row.
    pub fn last_positions(&self) -> Vec<usize> {
        (0..self.rows()).map(|r| (r + 1) * self.width - 1).collect()
    }

    /// Position within the real (unpadded) part of the row, 0 for the first item.
    pub fn relative_positions(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.ids.len());
        for r in 0..self.rows() {
            let pad = self.row_mask(r).iter().take_while(|m| !**m).count();
            for t in 0..self.width {
                out.push(t.saturating_sub(pad));
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub avg_seq_len: f64,
}

impl DatasetStats {
    pub fn table(&self, name: &str) -> String {
        format!(
            "{:<12} {:>8} {:>8} {:>14} {:>15}\n{:<12} {:>8} {:>8} {:>14} {:>15.1}\n",
            "Dataset",
            "#Users",
            "#Items",
            "#Interactions",
            "Avg. seq. len.",
            name,
            self.users,
            self.items,
            self.interactions,
            self.avg_seq_len
        )
    }
}

/// Output of the preparation pipeline.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PreparedCorpus {
    pub dataset: String,
    pub users: IdMap,
    pub items: IdMap,
    pub splits: Vec<LeaveOneOut>,
    pub stats: DatasetStats,
    /// Users dropped for having fewer than three interactions.
    pub excluded_short: usize,
}

impl PreparedCorpus {
    pub fn prepare(name: &str, log: &InteractionLog, min_count: usize) -> Result<Self> {
        let filtered = filter_kcore(log, min_count)?;
        let sequences = build_sequences(&filtered);
        let interactions: usize = sequences.iter().map(UserSequence::len).sum();
        let stats = DatasetStats {
            users: sequences.len(),
            items: filtered.items.len(),
            interactions,
            avg_seq_len: interactions as f64 / sequences.len() as f64,
        };
        let mut splits = Vec::with_capacity(sequences.len());
        let mut excluded_short = 0;
        for s in &sequences {
            match split_leave_one_out(s) {
                Some(split) => splits.push(split),
                None => excluded_short += 1,
            }
        }
        if splits.is_empty() {
            return Err(SigmaError::EmptyCorpus(
                "no user has the three interactions a split needs".into(),
            ));
        }
        Ok(PreparedCorpus {
            dataset: name.to_string(),
            users: filtered.users,
            items: filtered.items,
            splits,
            stats,
            excluded_short,
        })
    }

    /// Builds a corpus directly from index sequences (items already in `1..=n_items`).
    pub fn from_sequences(name: &str, n_items: usize, sequences: &[Vec<u32>]) -> Result<Self> {
        let mut users = IdMap::new(0);
        let mut items = IdMap::new(1);
        for i in 1..=n_items {
            items.intern(&format!("i{i}"));
        }
        let mut splits = Vec::new();
        let mut excluded_short = 0;
        for (u, s) in sequences.iter().enumerate() {
            if let Some(&bad) = s.iter().find(|&&i| i == PAD || i as usize > n_items) {
                return Err(SigmaError::Shape(format!("item {bad} outside catalog 1..={n_items}")));
            }
            let user = users.intern(&format!("u{u}"));
            match split_leave_one_out(&UserSequence { user, items: s.clone() }) {
                Some(split) => splits.push(split),
                None => excluded_short += 1,
            }
        }
        if splits.is_empty() {
            return Err(SigmaError::EmptyCorpus("no splittable sequence".into()));
        }
        let interactions = sequences.iter().map(Vec::len).sum::<usize>();
        Ok(PreparedCorpus {
            dataset: name.to_string(),
            stats: DatasetStats {
                users: sequences.len(),
                items: n_items,
                interactions,
                avg_seq_len: interactions as f64 / sequences.len() as f64,
            },
            users,
            items,
            splits,
            excluded_short,
        })
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| SigmaError::io(path, e))?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| SigmaError::io(path, e))?;
        let mut corpus: PreparedCorpus = serde_json::from_reader(BufReader::new(file))?;
        corpus.users.reindex();
        corpus.items.reindex();
        Ok(corpus)
    }

    /// Content hash binding checkpoints to the data they were trained on.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.dataset.as_bytes());
        h.update((self.items.len() as u64).to_le_bytes());
        for s in &self.splits {
            h.update(s.train.user.to_le_bytes());
            for i in &s.train.items {
                h.update(i.to_le_bytes());
            }
            h.update(s.val_target.to_le_bytes());
            h.update(s.test_target.to_le_bytes());
        }
        let digest = h.finalize();
        digest.iter().take(16).map(|b| format!("{b:02x}")).collect()
    }
}

/// Shuffled fixed-size batches over training sequences; single consumer.
pub struct BatchIter<'a> {
    seqs: Vec<&'a UserSequence>,
    batch_size: usize,
    max_len: usize,
    cursor: usize,
}

impl<'a> BatchIter<'a> {
    /// Sequences with fewer than two training items carry no target and are skipped.
    pub fn new<R: Rng + ?Sized>(splits: &'a [LeaveOneOut], batch_size: usize, max_len: usize, rng: &mut R) -> Self {
        let mut seqs: Vec<&UserSequence> = splits.iter().map(|s| &s.train).filter(|s| s.items.len() >= 2).collect();
        seqs.shuffle(rng);
        BatchIter {
            seqs,
            batch_size: batch_size.max(1),
            max_len,
            cursor: 0,
        }
    }

    pub fn num_batches(&self) -> usize {
        self.seqs.len().div_ceil(self.batch_size)
    }
}

impl Iterator for BatchIter<'_> {
    type Item = SequenceBatch;

    fn next(&mut self) -> Option<SequenceBatch> {
        if self.cursor >= self.seqs.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.seqs.len());
        let batch = SequenceBatch::for_training(&self.seqs[self.cursor..end], self.max_len);
        self.cursor = end;
        Some(batch)
    }
}

//! Interaction logs, vocabularies, leave-one-out splits and padded batches.
//!
//! The on-disk format is UTF-8 TSV with the header
//! `user_id\titem_id\texpl_id\ttimestamp`, one interaction per line, timestamps in
//! integer Unix seconds.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const HEADER: [&str; 4] = ["user_id", "item_id", "expl_id", "timestamp"];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("expected header `user_id\\titem_id\\texpl_id\\ttimestamp`")]
    Header,
    #[error("no interactions to build a corpus from")]
    NoInteractions,
    #[error("corpus is empty after dropping {dropped} users with fewer than 3 interactions")]
    EmptyCorpus { dropped: usize },
    #[error("sequence has {0} interactions, at least 3 are needed for a split")]
    TooShort(usize),
    #[error("id `{0}` contains a tab or newline")]
    BadId(String),
    #[error("{kind} id `{id}` is not in the model's vocabulary")]
    UnknownId { kind: &'static str, id: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    pub expl_id: String,
    pub timestamp: i64,
}

fn parse_error(line: u64, message: impl Into<String>) -> DataError {
    DataError::Parse {
        line,
        message: message.into(),
    }
}

pub fn load_interactions(path: impl AsRef<Path>) -> Result<Vec<Interaction>, DataError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_interactions(file)
}

pub fn read_interactions(reader: impl std::io::Read) -> Result<Vec<Interaction>, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .quoting(false)
        .flexible(true)
        .has_headers(true)
        .from_reader(reader);
    let header = rdr.headers()?;
    if header.iter().collect::<Vec<_>>() != HEADER {
        return Err(DataError::Header);
    }
    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != 4 {
            return Err(parse_error(
                line,
                format!("expected 4 fields, found {}", record.len()),
            ));
        }
        let field = |i: usize| -> Result<String, DataError> {
            let v = record[i].trim();
            if v.is_empty() {
                Err(parse_error(line, format!("missing {}", HEADER[i])))
            } else {
                Ok(v.to_string())
            }
        };
        let raw_ts = field(3)?;
        let timestamp: i64 = raw_ts
            .parse()
            .map_err(|_| parse_error(line, format!("timestamp `{raw_ts}` is not an integer")))?;
        if timestamp < 0 {
            return Err(parse_error(line, format!("negative timestamp {timestamp}")));
        }
        rows.push(Interaction {
            user_id: field(0)?,
            item_id: field(1)?,
            expl_id: field(2)?,
            timestamp,
        });
    }
    Ok(rows)
}

pub fn write_interactions(path: impl AsRef<Path>, rows: &[Interaction]) -> Result<(), DataError> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut w = csv::WriterBuilder::new()
        .delimiter(b'\t')
        .quote_style(csv::QuoteStyle::Never)
        .from_writer(file);
    w.write_record(HEADER)?;
    for r in rows {
        for id in [&r.user_id, &r.item_id, &r.expl_id] {
            if id.contains(['\t', '\n', '\r']) {
                return Err(DataError::BadId(id.clone()));
            }
        }
        w.write_record([&r.user_id, &r.item_id, &r.expl_id, &r.timestamp.to_string()])?;
    }
    w.flush().map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(())
}

/// Dense index over raw string ids, in first-seen order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    ids: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_ids(ids: Vec<String>) -> Self {
        let index = ids.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Self { ids, index }
    }

    pub fn intern(&mut self, id: &str) -> usize {
        if let Some(&i) = self.index.get(id) {
            return i;
        }
        self.ids.push(id.to_string());
        self.index.insert(id.to_string(), self.ids.len() - 1);
        self.ids.len() - 1
    }

    pub fn get(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn id(&self, index: usize) -> &str {
        &self.ids[index]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// One user's chronologically ordered history.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionSequence {
    pub user_index: usize,
    pub items: Vec<usize>,
    pub expls: Vec<usize>,
    pub times: Vec<i64>,
}

impl InteractionSequence {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn prefix(&self, len: usize) -> InteractionSequence {
        InteractionSequence {
            user_index: self.user_index,
            items: self.items[..len].to_vec(),
            expls: self.expls[..len].to_vec(),
            times: self.times[..len].to_vec(),
        }
    }

    /// The most recent `max_len` interactions.
    pub fn suffix(&self, max_len: usize) -> InteractionSequence {
        let start = self.len().saturating_sub(max_len);
        InteractionSequence {
            user_index: self.user_index,
            items: self.items[start..].to_vec(),
            expls: self.expls[start..].to_vec(),
            times: self.times[start..].to_vec(),
        }
    }

    /// Mean gap between consecutive timestamps in seconds (0 for a single step).
    pub fn mean_interval(&self) -> f64 {
        if self.len() < 2 {
            return 0.0;
        }
        (self.times[self.len() - 1] - self.times[0]) as f64 / (self.len() - 1) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub item: usize,
    pub expl: usize,
    pub time: i64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitSequence {
    pub train: InteractionSequence,
    pub valid: Step,
    pub test: Step,
}

impl SplitSequence {
    /// History visible when predicting the test interaction.
    pub fn test_input(&self) -> InteractionSequence {
        let mut s = self.train.clone();
        s.items.push(self.valid.item);
        s.expls.push(self.valid.expl);
        s.times.push(self.valid.time);
        s
    }
}

pub fn split_leave_one_out(seq: &InteractionSequence) -> Result<SplitSequence, DataError> {
    let n = seq.len();
    if n < 3 {
        return Err(DataError::TooShort(n));
    }
    let step = |i: usize| Step {
        item: seq.items[i],
        expl: seq.expls[i],
        time: seq.times[i],
    };
    Ok(SplitSequence {
        train: seq.prefix(n - 2),
        valid: step(n - 2),
        test: step(n - 1),
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Corpus {
    pub users: Vec<String>,
    pub sequences: Vec<InteractionSequence>,
    pub items: Vocab,
    pub expls: Vocab,
    pub dropped_users: usize,
}

impl Corpus {
    pub fn splits(&self) -> Vec<SplitSequence> {
        self.sequences
            .iter()
            .map(|s| split_leave_one_out(s).expect("corpus sequences have at least 3 steps"))
            .collect()
    }

    pub fn interaction_count(&self) -> usize {
        self.sequences.iter().map(InteractionSequence::len).sum()
    }

    /// The same histories indexed by another pair of vocabularies, e.g. those of
    /// a trained checkpoint. Every id must be present in the new vocabularies.
    pub fn reindex(&self, items: &Vocab, expls: &Vocab) -> Result<Corpus, DataError> {
        let map = |from: &Vocab, to: &Vocab, kind: &'static str, v: &[usize]| {
            v.iter()
                .map(|&i| {
                    let id = from.id(i);
                    to.get(id).ok_or_else(|| DataError::UnknownId { kind, id: id.to_string() })
                })
                .collect::<Result<Vec<usize>, DataError>>()
        };
        let sequences = self
            .sequences
            .iter()
            .map(|s| {
                Ok(InteractionSequence {
                    user_index: s.user_index,
                    items: map(&self.items, items, "item", &s.items)?,
                    expls: map(&self.expls, expls, "explanation", &s.expls)?,
                    times: s.times.clone(),
                })
            })
            .collect::<Result<Vec<_>, DataError>>()?;
        Ok(Corpus {
            users: self.users.clone(),
            sequences,
            items: items.clone(),
            expls: expls.clone(),
            dropped_users: self.dropped_users,
        })
    }
}

/// Groups interactions per user, orders each history by `(timestamp, file order)`,
/// drops users with fewer than three interactions and indexes the survivors.
pub fn build_corpus(interactions: &[Interaction]) -> Result<Corpus, DataError> {
    if interactions.is_empty() {
        return Err(DataError::NoInteractions);
    }
    let mut user_order: Vec<&str> = Vec::new();
    let mut by_user: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, r) in interactions.iter().enumerate() {
        by_user
            .entry(r.user_id.as_str())
            .or_insert_with(|| {
                user_order.push(r.user_id.as_str());
                Vec::new()
            })
            .push(i);
    }

    let mut items = Vocab::default();
    let mut expls = Vocab::default();
    let mut users = Vec::new();
    let mut sequences = Vec::new();
    let mut dropped_users = 0;
    for user in user_order {
        let mut rows = by_user.remove(user).unwrap_or_default();
        if rows.len() < 3 {
            dropped_users += 1;
            continue;
        }
        // stable: ties keep file order
        rows.sort_by_key(|&i| interactions[i].timestamp);
        let user_index = users.len();
        users.push(user.to_string());
        sequences.push(InteractionSequence {
            user_index,
            items: rows.iter().map(|&i| items.intern(&interactions[i].item_id)).collect(),
            expls: rows.iter().map(|&i| expls.intern(&interactions[i].expl_id)).collect(),
            times: rows.iter().map(|&i| interactions[i].timestamp).collect(),
        });
    }
    if sequences.is_empty() {
        return Err(DataError::EmptyCorpus {
            dropped: dropped_users,
        });
    }
    Ok(Corpus {
        users,
        sequences,
        items,
        expls,
        dropped_users,
    })
}

/// Right-padded block of sequences. Padded cells hold 0 and are masked out.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub user_indices: Vec<usize>,
    pub items: Vec<Vec<usize>>,
    pub expls: Vec<Vec<usize>>,
    pub times: Vec<Vec<i64>>,
    pub mask: Vec<Vec<bool>>,
    pub lengths: Vec<usize>,
}

impl Batch {
    pub fn from_sequences(seqs: &[InteractionSequence], max_len: usize) -> Batch {
        let trimmed: Vec<InteractionSequence> = seqs.iter().map(|s| s.suffix(max_len)).collect();
        let width = trimmed.iter().map(InteractionSequence::len).max().unwrap_or(0);
        let pad = |v: &[usize]| {
            let mut row = v.to_vec();
            row.resize(width, 0);
            row
        };
        Batch {
            user_indices: trimmed.iter().map(|s| s.user_index).collect(),
            items: trimmed.iter().map(|s| pad(&s.items)).collect(),
            expls: trimmed.iter().map(|s| pad(&s.expls)).collect(),
            times: trimmed
                .iter()
                .map(|s| {
                    let mut row = s.times.clone();
                    row.resize(width, 0);
                    row
                })
                .collect(),
            mask: trimmed
                .iter()
                .map(|s| (0..width).map(|j| j < s.len()).collect())
                .collect(),
            lengths: trimmed.iter().map(InteractionSequence::len).collect(),
        }
    }

    pub fn size(&self) -> usize {
        self.lengths.len()
    }

    pub fn width(&self) -> usize {
        self.mask.first().map_or(0, Vec::len)
    }

    /// The unpadded sequence in row `b`; only cells under the mask are read.
    pub fn sequence(&self, b: usize) -> InteractionSequence {
        let n = self.lengths[b];
        InteractionSequence {
            user_index: self.user_indices[b],
            items: self.items[b][..n].to_vec(),
            expls: self.expls[b][..n].to_vec(),
            times: self.times[b][..n].to_vec(),
        }
    }
}

/// Shuffles with `seed`, truncates each sequence to its last `max_len` steps and
/// packs consecutive groups of `batch_size`.
pub fn make_batches(
    sequences: &[InteractionSequence],
    batch_size: usize,
    max_len: usize,
    seed: u64,
) -> Vec<Batch> {
    assert!(batch_size >= 1, "batch_size must be positive");
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
        .chunks(batch_size)
        .map(|chunk| {
            let seqs: Vec<InteractionSequence> = chunk.iter().map(|&i| sequences[i].clone()).collect();
            Batch::from_sequences(&seqs, max_len)
        })
        .collect()
}

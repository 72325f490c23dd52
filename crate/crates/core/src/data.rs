//! Event sequences, datasets, JSON Lines I/O and padded batching.
//!
//! On disk a dataset is one JSON object per line:
//!
//! ```text
//! {"K": 5, "events": [{"t": 0.31, "k": 2}, {"t": 1.7, "k": 5}]}
//! ```
//!
//! Types are 1-based in files and 0-based in memory. Any external event
//! dataset can be used after converting each sequence into this shape:
//! times as floats in a consistent unit, strictly increasing, and types
//! renumbered to `1..=K` with the same `K` on every line.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Offset applied per rank to break ties between equal timestamps.
pub const DUPLICATE_NUDGE: f64 = 1e-9;

/// One sequence of typed events with strictly increasing times.
#[derive(Clone, Debug, PartialEq)]
pub struct EventSequence {
    times: Vec<f64>,
    types: Vec<usize>,
}

impl EventSequence {
    /// Validates equal lengths, finite strictly increasing times and
    /// non-empty content. Types are 0-based.
    pub fn new(times: Vec<f64>, types: Vec<usize>) -> Result<Self> {
        if times.len() != types.len() {
            return Err(Error::LengthMismatch {
                what: "types",
                expected: times.len(),
                got: types.len(),
            });
        }
        if times.is_empty() {
            return Err(Error::SequenceTooShort { len: 0, min: 1 });
        }
        for (i, w) in times.windows(2).enumerate() {
            if !(w[1] > w[0]) {
                return Err(Error::NonIncreasingTimestamps { index: i + 1 });
            }
        }
        if let Some(index) = times.iter().position(|t| !t.is_finite()) {
            return Err(Error::NonIncreasingTimestamps { index });
        }
        Ok(EventSequence { times, types })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn types(&self) -> &[usize] {
        &self.types
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Leading `n` events.
    pub fn prefix(&self, n: usize) -> Result<Self> {
        let n = n.min(self.len());
        EventSequence::new(self.times[..n].to_vec(), self.types[..n].to_vec())
    }

    /// Gaps `t_i − t_{i−1}` with `t_0 = 0`.
    pub fn gaps(&self) -> Vec<f64> {
        let mut prev = 0.0;
        self.times
            .iter()
            .map(|&t| {
                let g = t - prev;
                prev = t;
                g
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.jsonl",
            Split::Dev => "dev.jsonl",
            Split::Test => "test.jsonl",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub num_types: usize,
    pub split: Option<Split>,
    pub sequences: Vec<EventSequence>,
}

#[derive(Serialize, Deserialize)]
struct EventRecord {
    t: f64,
    k: i64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SequenceRecord {
    #[serde(rename = "K")]
    k: i64,
    events: Vec<EventRecord>,
}

impl Dataset {
    /// Checks that `K` is positive and every type is in range.
    pub fn new(num_types: usize, sequences: Vec<EventSequence>) -> Result<Self> {
        if num_types == 0 {
            return Err(Error::Config("number of event types must be positive".into()));
        }
        for seq in &sequences {
            if let Some(&k) = seq.types.iter().find(|&&k| k >= num_types) {
                return Err(Error::TypeOutOfRange { k: k + 1, num_types });
            }
        }
        Ok(Dataset {
            num_types,
            split: None,
            sequences,
        })
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = Some(split);
        self
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Number of events across all sequences.
    pub fn num_events(&self) -> usize {
        self.sequences.iter().map(EventSequence::len).sum()
    }

    /// Mean inter-event gap over all sequences (first events excluded).
    pub fn mean_gap(&self) -> Option<f64> {
        let (sum, n) = self.sequences.iter().fold((0.0, 0usize), |(s, n), seq| {
            let t = seq.times();
            (s + (t[t.len() - 1] - t[0]), n + t.len() - 1)
        });
        (n > 0 && sum > 0.0).then(|| sum / n as f64)
    }

    /// Copy with every timestamp divided by `scale`.
    pub fn rescaled(&self, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Config(format!("time scale must be positive, got {scale}")));
        }
        let sequences = self
            .sequences
            .iter()
            .map(|s| EventSequence::new(s.times.iter().map(|t| t / scale).collect(), s.types.clone()))
            .collect::<Result<_>>()?;
        Ok(Dataset {
            sequences,
            ..self.clone()
        })
    }

    /// Parses one sequence per non-blank line. Errors cite the 1-based line.
    pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let io_err = |source| Error::Io {
            path: path.to_path_buf(),
            source,
        };
        let reader = BufReader::new(File::open(path).map_err(io_err)?);
        let mut num_types = None;
        let mut sequences = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(io_err)?;
            if line.trim().is_empty() {
                continue;
            }
            let line_no = i + 1;
            let schema = |field, message: String| Error::Schema {
                path: path.to_path_buf(),
                line: line_no,
                field,
                message,
            };
            let rec: SequenceRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                message: e.to_string(),
            })?;
            if rec.k < 1 {
                return Err(schema("K", format!("must be at least 1, got {}", rec.k)));
            }
            let k = rec.k as usize;
            match num_types {
                None => num_types = Some(k),
                Some(prev) if prev != k => {
                    return Err(schema("K", format!("{k} differs from {prev} on earlier lines")));
                }
                _ => {}
            }
            if rec.events.is_empty() {
                return Err(schema("events", "sequence is empty".into()));
            }
            let mut times = Vec::with_capacity(rec.events.len());
            let mut types = Vec::with_capacity(rec.events.len());
            for (j, ev) in rec.events.iter().enumerate() {
                if !ev.t.is_finite() {
                    return Err(schema("t", format!("event {} has non-finite time", j + 1)));
                }
                if ev.k < 1 || ev.k > rec.k {
                    return Err(schema("k", format!("event {} has type {} outside 1..={}", j + 1, ev.k, rec.k)));
                }
                times.push(ev.t);
                types.push(ev.k as usize - 1);
            }
            if let Some(j) = times.windows(2).position(|w| w[1] < w[0]) {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: line_no,
                    message: format!("timestamps decrease at event {}", j + 2),
                });
            }
            let nudged = break_ties(&mut times);
            if nudged > 0 {
                log::warn!(
                    "{}:{line_no}: {nudged} duplicate timestamp(s) offset by {DUPLICATE_NUDGE:e} per rank",
                    path.display()
                );
            }
            let seq = EventSequence::new(times, types).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                message: e.to_string(),
            })?;
            sequences.push(seq);
        }
        let num_types = num_types.ok_or_else(|| Error::Schema {
            path: path.to_path_buf(),
            line: 0,
            field: "events",
            message: "file contains no sequences".into(),
        })?;
        Dataset::new(num_types, sequences)
    }

    /// Writes one line per sequence. Floats use the shortest representation
    /// that parses back to the same bits.
    pub fn save_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io_err = |source| Error::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
        for seq in &self.sequences {
            let rec = SequenceRecord {
                k: self.num_types as i64,
                events: seq
                    .times
                    .iter()
                    .zip(&seq.types)
                    .map(|(&t, &k)| EventRecord { t, k: k as i64 + 1 })
                    .collect(),
            };
            let line = serde_json::to_string(&rec).map_err(|e| Error::Checkpoint(e.to_string()))?;
            writeln!(out, "{line}").map_err(io_err)?;
        }
        out.flush().map_err(io_err)
    }

    /// Batches in dataset order.
    pub fn batches(&self, batch_size: usize) -> Vec<Batch> {
        let order: Vec<usize> = (0..self.len()).collect();
        self.batches_in_order(&order, batch_size)
    }

    /// Batches following `order` (sequence indices). Each batch remembers
    /// the dataset index of its rows.
    pub fn batches_in_order(&self, order: &[usize], batch_size: usize) -> Vec<Batch> {
        order
            .chunks(batch_size.max(1))
            .map(|ids| Batch::new(&self.sequences, ids))
            .collect()
    }
}

/// Within runs of equal timestamps, adds `rank · DUPLICATE_NUDGE` to the
/// `rank`-th repeat. Returns how many times were changed.
fn break_ties(times: &mut [f64]) -> usize {
    let mut changed = 0;
    let mut rank = 0;
    let mut prev = times.first().copied().unwrap_or(0.0);
    for t in times.iter_mut().skip(1) {
        let orig = *t;
        if orig == prev {
            rank += 1;
            *t += rank as f64 * DUPLICATE_NUDGE;
            changed += 1;
        } else {
            rank = 0;
        }
        prev = orig;
    }
    changed
}

/// Marker stored in padded type slots.
pub const PAD_TYPE: usize = usize::MAX;

/// Sequences padded to a common length `max_len`, stored row-major as
/// `[size, max_len]`. Padded slots repeat the last real time, hold
/// [`PAD_TYPE`] and are `false` in `mask`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub max_len: usize,
    pub times: Vec<f64>,
    pub types: Vec<usize>,
    pub mask: Vec<bool>,
    pub lengths: Vec<usize>,
    /// Index of each row in the originating dataset.
    pub ids: Vec<usize>,
}

impl Batch {
    pub fn new(sequences: &[EventSequence], ids: &[usize]) -> Self {
        let size = ids.len();
        let max_len = ids.iter().map(|&i| sequences[i].len()).max().unwrap_or(0);
        let mut batch = Batch {
            size,
            max_len,
            times: Vec::with_capacity(size * max_len),
            types: Vec::with_capacity(size * max_len),
            mask: Vec::with_capacity(size * max_len),
            lengths: Vec::with_capacity(size),
            ids: ids.to_vec(),
        };
        for &i in ids {
            let seq = &sequences[i];
            let pad = max_len - seq.len();
            let last = seq.times[seq.len() - 1];
            batch.times.extend_from_slice(&seq.times);
            batch.times.extend(std::iter::repeat_n(last, pad));
            batch.types.extend_from_slice(&seq.types);
            batch.types.extend(std::iter::repeat_n(PAD_TYPE, pad));
            batch.mask.extend(std::iter::repeat_n(true, seq.len()));
            batch.mask.extend(std::iter::repeat_n(false, pad));
            batch.lengths.push(seq.len());
        }
        batch
    }

    /// Single-row batch holding `seq` unpadded.
    pub fn single(seq: &EventSequence) -> Self {
        Batch::new(std::slice::from_ref(seq), &[0])
    }

    pub fn row_times(&self, row: usize) -> &[f64] {
        &self.times[row * self.max_len..row * self.max_len + self.lengths[row]]
    }

    pub fn row_types(&self, row: usize) -> &[usize] {
        &self.types[row * self.max_len..row * self.max_len + self.lengths[row]]
    }
}

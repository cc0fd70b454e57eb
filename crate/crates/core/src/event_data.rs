//! Marked event sequences, dataset splits and the line-delimited JSON format.
//!
//! Each line of a dataset file holds one sequence:
//!
//! ```text
//! {"T": 10.0, "events": [[1.0, 1], [2.5, 2]]}
//! ```
//!
//! Marks are 1-based on disk and 0-based in memory; the parser is the only
//! place that converts between the two.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest admissible inter-event time. The log-normal density is undefined
/// at zero, so ties are rejected.
pub const TAU_MIN: f64 = 1e-8;

/// A single event. `mark` is 0-based.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time: f64,
    pub mark: usize,
}

impl Event {
    pub fn new(time: f64, mark: usize) -> Self {
        Self { time, mark }
    }
}

/// Events observed on the window `(0, window_end)`, strictly increasing in time.
#[derive(Debug, Clone, PartialEq)]
pub struct EventSequence {
    events: Vec<Event>,
    window_end: f64,
}

impl EventSequence {
    pub fn new(events: Vec<Event>, window_end: f64) -> Result<Self> {
        if !(window_end.is_finite() && window_end > 0.0) {
            return Err(Error::InvalidSequence(format!(
                "window end must be positive and finite, got {window_end}"
            )));
        }
        let mut prev = 0.0;
        for (i, e) in events.iter().enumerate() {
            if !e.time.is_finite() || e.time < 0.0 {
                return Err(Error::InvalidSequence(format!(
                    "event {i} has invalid time {}",
                    e.time
                )));
            }
            let tau = e.time - prev;
            if tau < TAU_MIN {
                return Err(Error::InvalidSequence(format!(
                    "times must be strictly increasing: event {i} at {} follows {prev} (gap {tau:e} < {TAU_MIN:e})",
                    e.time
                )));
            }
            prev = e.time;
        }
        if let Some(last) = events.last() {
            if last.time >= window_end {
                return Err(Error::InvalidSequence(format!(
                    "last event at {} is not before window end {window_end}",
                    last.time
                )));
            }
        }
        Ok(Self { events, window_end })
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn window_end(&self) -> f64 {
        self.window_end
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn last_time(&self) -> f64 {
        self.events.last().map_or(0.0, |e| e.time)
    }

    /// Largest mark index in the sequence, if any.
    pub fn max_mark(&self) -> Option<usize> {
        self.events.iter().map(|e| e.mark).max()
    }

    /// Mean gap `t_N / N`, or `None` for an empty sequence.
    pub fn mean_gap(&self) -> Option<f64> {
        (!self.events.is_empty()).then(|| self.last_time() / self.events.len() as f64)
    }
}

/// One inter-event time with the mark of the event that opened the gap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gap {
    pub tau: f64,
    pub prev_mark: Option<usize>,
}

/// `(t_i - t_{i-1}, k_{i-1})` for every event, with `t_0 = 0` and no previous
/// mark for the first event.
pub fn inter_event_times(seq: &EventSequence) -> Vec<Gap> {
    let mut prev_time = 0.0;
    let mut prev_mark = None;
    seq.events
        .iter()
        .map(|e| {
            let gap = Gap {
                tau: e.time - prev_time,
                prev_mark,
            };
            prev_time = e.time;
            prev_mark = Some(e.mark);
            gap
        })
        .collect()
}

/// Duration `T - t_N` during which no event was observed.
pub fn censored_tail(seq: &EventSequence) -> f64 {
    seq.window_end - seq.last_time()
}

/// Sequences grouped into named splits over a shared mark alphabet of size `num_marks`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    num_marks: usize,
    splits: BTreeMap<String, Vec<EventSequence>>,
}

impl Dataset {
    pub fn new(num_marks: usize) -> Result<Self> {
        if num_marks == 0 {
            return Err(Error::InvalidSequence("mark alphabet must be non-empty".into()));
        }
        Ok(Self {
            num_marks,
            splits: BTreeMap::new(),
        })
    }

    pub fn num_marks(&self) -> usize {
        self.num_marks
    }

    /// Adds a split. Names must be unique and every mark must be below `num_marks`.
    pub fn add_split(&mut self, name: &str, sequences: Vec<EventSequence>) -> Result<()> {
        if self.splits.contains_key(name) {
            return Err(Error::InvalidSequence(format!("duplicate split name {name:?}")));
        }
        for (i, seq) in sequences.iter().enumerate() {
            if let Some(m) = seq.max_mark() {
                if m >= self.num_marks {
                    return Err(Error::Validation {
                        line: i + 1,
                        msg: format!("mark {} out of range 1..={}", m + 1, self.num_marks),
                    });
                }
            }
        }
        self.splits.insert(name.to_string(), sequences);
        Ok(())
    }

    pub fn split(&self, name: &str) -> Option<&[EventSequence]> {
        self.splits.get(name).map(Vec::as_slice)
    }

    pub fn split_names(&self) -> impl Iterator<Item = &str> {
        self.splits.keys().map(String::as_str)
    }

    /// Total number of events in a split (0 for a missing split).
    pub fn token_count(&self, name: &str) -> usize {
        self.split(name)
            .map_or(0, |s| s.iter().map(EventSequence::len).sum())
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Break ties and near-ties by spacing offending events `TAU_MIN + U[0, TAU_MIN)` apart.
    pub jitter: bool,
    pub seed: u64,
}

/// Anything the loader changed or inferred while reading a file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadReport {
    /// 1-based line numbers whose window end was missing and set to `t_N + t_N / N`.
    pub defaulted_window: Vec<usize>,
    pub jittered_events: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    #[serde(rename = "T", default, skip_serializing_if = "Option::is_none")]
    window_end: Option<f64>,
    events: Vec<(f64, i64)>,
}

fn parse_record(
    line_no: usize,
    line: &str,
    num_marks: usize,
    opts: &LoadOptions,
    rng: &mut ChaCha8Rng,
    report: &mut LoadReport,
) -> Result<EventSequence> {
    let record: Record = serde_json::from_str(line).map_err(|e| Error::Parse {
        line: line_no,
        msg: e.to_string(),
    })?;
    let invalid = |msg: String| Error::Validation { line: line_no, msg };

    let mut events = Vec::with_capacity(record.events.len());
    let mut prev = 0.0_f64;
    for (i, &(time, mark)) in record.events.iter().enumerate() {
        if mark < 1 || mark as u64 > num_marks as u64 {
            return Err(invalid(format!(
                "event {i}: mark {mark} out of range 1..={num_marks}"
            )));
        }
        let mut time = time;
        if opts.jitter && time >= prev && time - prev < TAU_MIN {
            time = prev + TAU_MIN + rng.random::<f64>() * TAU_MIN;
            report.jittered_events += 1;
        }
        prev = time;
        events.push(Event::new(time, (mark - 1) as usize));
    }

    let window_end = match record.window_end {
        Some(t) => t,
        None => {
            let n = events.len();
            if n == 0 {
                return Err(invalid("empty sequence without a window end `T`".into()));
            }
            report.defaulted_window.push(line_no);
            let t_n = events[n - 1].time;
            t_n + t_n / n as f64
        }
    };
    EventSequence::new(events, window_end).map_err(|e| match e {
        Error::InvalidSequence(msg) => invalid(msg),
        other => other,
    })
}

/// Reads sequences from a line-delimited file. Blank lines are skipped.
pub fn load_sequences(
    path: &Path,
    num_marks: usize,
    opts: &LoadOptions,
) -> Result<(Vec<EventSequence>, LoadReport)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = LoadReport::default();
    let mut sequences = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        sequences.push(parse_record(
            idx + 1,
            &line,
            num_marks,
            opts,
            &mut rng,
            &mut report,
        )?);
    }
    if !report.defaulted_window.is_empty() {
        log::warn!(
            "{}: {} record(s) had no window end; defaulted to t_N + mean gap",
            path.display(),
            report.defaulted_window.len()
        );
    }
    Ok((sequences, report))
}

/// Loads a single file as the `train` split.
pub fn load_dataset(path: &Path, num_marks: usize) -> Result<Dataset> {
    let (sequences, _) = load_sequences(path, num_marks, &LoadOptions::default())?;
    let mut ds = Dataset::new(num_marks)?;
    ds.add_split("train", sequences)?;
    Ok(ds)
}

/// Serializes one sequence as a single line (no trailing newline).
pub fn format_record(events: &[Event], window_end: Option<f64>) -> String {
    let record = Record {
        window_end,
        events: events
            .iter()
            .map(|e| (e.time, e.mark as i64 + 1))
            .collect(),
    };
    serde_json::to_string(&record).expect("records always serialize")
}

pub fn write_sequences<W: Write>(mut out: W, sequences: &[EventSequence]) -> std::io::Result<()> {
    for seq in sequences {
        writeln!(out, "{}", format_record(seq.events(), Some(seq.window_end())))?;
    }
    Ok(())
}

/// Writes sequences to `path` in the line format.
pub fn write_dataset(path: &Path, sequences: &[EventSequence]) -> Result<()> {
    let mut buf = Vec::new();
    write_sequences(&mut buf, sequences).map_err(|e| Error::io(path, e))?;
    crate::io::write_atomic(path, &buf)
}

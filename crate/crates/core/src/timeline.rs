//! Timestamped documents, resolved events and the causal information mask.
//!
//! The predictor only ever sees a [`MaskedState`]: the question plus the
//! documents published at or before the event cutoff. Outcome, resolution time
//! and resolver confidence live on [`EventRecord`] and have no path into the
//! masked view.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;
pub const SECONDS_PER_DAY: i64 = 86_400;
/// Number of most recent visible documents kept in a masked state.
pub const DEFAULT_MAX_VISIBLE_DOCS: usize = 16;

#[derive(Debug, Error)]
pub enum TimelineError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unsupported schema_version {found} (expected {SCHEMA_VERSION})")]
    SchemaVersion { found: u32 },
    #[error("line {line}: duplicate event_id {event_id:?}")]
    DuplicateEventId { line: usize, event_id: String },
    #[error("record {event_id:?}: invalid field `{field}`: {message}")]
    Structural {
        event_id: String,
        field: &'static str,
        message: String,
    },
    #[error("empty dataset file (missing header line)")]
    MissingHeader,
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

/// Integer seconds since the Unix epoch, UTC.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Timestamp(pub i64);

impl Timestamp {
    pub const fn from_secs(seconds_utc: i64) -> Self {
        Timestamp(seconds_utc)
    }

    pub const fn secs(self) -> i64 {
        self.0
    }

    pub const fn plus_secs(self, delta: i64) -> Self {
        Timestamp(self.0 + delta)
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceDoc {
    pub doc_id: String,
    pub published_at: Timestamp,
    pub features: Vec<f64>,
    #[serde(default)]
    pub text: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainTag {
    Politics,
    Economics,
    Corporate,
    Science,
    Other,
}

impl DomainTag {
    pub const ALL: [DomainTag; 5] = [
        DomainTag::Politics,
        DomainTag::Economics,
        DomainTag::Corporate,
        DomainTag::Science,
        DomainTag::Other,
    ];
}

/// Realized binary outcome. Serialized as the integer 0 or 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Outcome {
    No,
    Yes,
}

impl Outcome {
    pub fn from_bit(bit: u8) -> Option<Self> {
        match bit {
            0 => Some(Outcome::No),
            1 => Some(Outcome::Yes),
            _ => None,
        }
    }

    pub fn bit(self) -> u8 {
        match self {
            Outcome::No => 0,
            Outcome::Yes => 1,
        }
    }

    pub fn as_f64(self) -> f64 {
        f64::from(self.bit())
    }

    pub fn flipped(self) -> Self {
        match self {
            Outcome::No => Outcome::Yes,
            Outcome::Yes => Outcome::No,
        }
    }
}

impl Serialize for Outcome {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(self.bit())
    }
}

impl<'de> Deserialize<'de> for Outcome {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let bit = u64::deserialize(d)?;
        u8::try_from(bit)
            .ok()
            .and_then(Outcome::from_bit)
            .ok_or_else(|| serde::de::Error::custom(format!("outcome must be 0 or 1, found {bit}")))
    }
}

/// A resolved binary question: predicted at `cutoff`, resolved at
/// `resolution_time`, guaranteed to resolve by `resolution_deadline`.
#[derive(Debug, Clone, PartialEq)]
pub struct EventRecord {
    pub event_id: String,
    pub question: String,
    pub cutoff: Timestamp,
    pub resolution_deadline: Timestamp,
    pub domain_tag: DomainTag,
    pub outcome: Outcome,
    pub resolution_time: Timestamp,
    pub resolver_confidence: f64,
}

/// The predictor's view of an event. Carries no outcome-bearing field.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedState {
    pub event_id: String,
    pub question: String,
    pub cutoff: Timestamp,
    pub visible_docs: Vec<SourceDoc>,
}

/// Applies the temporal mask with the default visible-document cap.
pub fn mask_state(event: &EventRecord, corpus: &[SourceDoc]) -> MaskedState {
    mask_state_with_limit(event, corpus, DEFAULT_MAX_VISIBLE_DOCS)
}

/// Keeps the documents with `published_at <= cutoff`, in ascending time
/// order (ties by `doc_id`), truncated to the `max_docs` most recent.
pub fn mask_state_with_limit(
    event: &EventRecord,
    corpus: &[SourceDoc],
    max_docs: usize,
) -> MaskedState {
    let mut visible: Vec<&SourceDoc> = corpus
        .iter()
        .filter(|d| d.published_at <= event.cutoff)
        .collect();
    visible.sort_by(|a, b| {
        a.published_at
            .cmp(&b.published_at)
            .then_with(|| a.doc_id.cmp(&b.doc_id))
    });
    let skip = visible.len().saturating_sub(max_docs);
    MaskedState {
        event_id: event.event_id.clone(),
        question: event.question.clone(),
        cutoff: event.cutoff,
        visible_docs: visible.into_iter().skip(skip).cloned().collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitLabel {
    Train,
    Test,
}

impl fmt::Display for SplitLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitLabel::Train => "train",
            SplitLabel::Test => "test",
        })
    }
}

impl SplitLabel {
    /// Train cutoffs are strictly before the boundary; test cutoffs are at or after it.
    pub fn admits(self, cutoff: Timestamp, boundary: Timestamp) -> bool {
        match self {
            SplitLabel::Train => cutoff < boundary,
            SplitLabel::Test => cutoff >= boundary,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub event: EventRecord,
    /// Input documents attached to this event.
    pub docs: Vec<SourceDoc>,
}

impl DatasetRecord {
    pub fn masked_state(&self) -> MaskedState {
        mask_state(&self.event, &self.docs)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub feature_dim: usize,
    pub split_label: SplitLabel,
    pub split_boundary: Timestamp,
    pub records: Vec<DatasetRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Drops records whose resolver confidence is below `threshold`.
    pub fn retain_confident(&mut self, threshold: f64) -> usize {
        let before = self.records.len();
        self.records
            .retain(|r| r.event.resolver_confidence >= threshold);
        before - self.records.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum LeakageRule {
    /// An input document is published after the cutoff.
    DocAfterCutoff { doc_id: String },
    /// The cutoff is not strictly before the resolution time.
    CutoffNotBeforeResolution,
    /// The resolution time is past the resolution deadline.
    ResolutionAfterDeadline,
    /// The cutoff falls on the wrong side of the split boundary.
    SplitBoundary { split_label: SplitLabel },
}

impl LeakageRule {
    pub fn code(&self) -> &'static str {
        match self {
            LeakageRule::DocAfterCutoff { .. } => "a",
            LeakageRule::CutoffNotBeforeResolution => "b",
            LeakageRule::SplitBoundary { .. } => "c",
            LeakageRule::ResolutionAfterDeadline => "d",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub event_id: String,
    #[serde(flatten)]
    pub rule: LeakageRule,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.rule {
            LeakageRule::DocAfterCutoff { doc_id } => {
                write!(
                    f,
                    "{}: rule (a) doc {doc_id:?} published after cutoff",
                    self.event_id
                )
            }
            LeakageRule::CutoffNotBeforeResolution => {
                write!(
                    f,
                    "{}: rule (b) cutoff not strictly before resolution_time",
                    self.event_id
                )
            }
            LeakageRule::SplitBoundary { split_label } => {
                write!(
                    f,
                    "{}: rule (c) cutoff violates the {split_label} split boundary",
                    self.event_id
                )
            }
            LeakageRule::ResolutionAfterDeadline => {
                write!(
                    f,
                    "{}: rule (d) resolution_time after resolution_deadline",
                    self.event_id
                )
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LeakageReport {
    pub violations: Vec<Violation>,
}

impl LeakageReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

fn check_structure(dataset: &Dataset, record: &DatasetRecord) -> Result<(), TimelineError> {
    let ev = &record.event;
    let structural = |field, message: String| TimelineError::Structural {
        event_id: ev.event_id.clone(),
        field,
        message,
    };
    if ev.event_id.is_empty() {
        return Err(structural("event_id", "empty".into()));
    }
    if !(0.0..=1.0).contains(&ev.resolver_confidence) {
        return Err(structural(
            "resolver_confidence",
            format!("{} outside [0, 1]", ev.resolver_confidence),
        ));
    }
    let mut seen = HashSet::new();
    for doc in &record.docs {
        if !seen.insert(doc.doc_id.as_str()) {
            return Err(structural(
                "docs.doc_id",
                format!("duplicate doc_id {:?}", doc.doc_id),
            ));
        }
        if doc.features.len() != dataset.feature_dim {
            return Err(structural(
                "docs.features",
                format!(
                    "doc {:?} has {} features, expected {}",
                    doc.doc_id,
                    doc.features.len(),
                    dataset.feature_dim
                ),
            ));
        }
        if doc.features.iter().any(|x| !x.is_finite()) {
            return Err(structural(
                "docs.features",
                format!("doc {:?} has a non-finite feature", doc.doc_id),
            ));
        }
    }
    Ok(())
}

/// Lists every temporal-leakage violation in `dataset`.
///
/// Structural problems (wrong feature dimension, duplicate doc ids, confidence
/// out of range) are reported as errors rather than violations.
pub fn validate_no_leakage(dataset: &Dataset) -> Result<LeakageReport, TimelineError> {
    let mut report = LeakageReport::default();
    for record in &dataset.records {
        check_structure(dataset, record)?;
        let ev = &record.event;
        let mut push = |rule| {
            report.violations.push(Violation {
                event_id: ev.event_id.clone(),
                rule,
            })
        };
        for doc in record.docs.iter().filter(|d| d.published_at > ev.cutoff) {
            push(LeakageRule::DocAfterCutoff {
                doc_id: doc.doc_id.clone(),
            });
        }
        if ev.cutoff >= ev.resolution_time {
            push(LeakageRule::CutoffNotBeforeResolution);
        }
        if ev.resolution_time > ev.resolution_deadline {
            push(LeakageRule::ResolutionAfterDeadline);
        }
        if !dataset
            .split_label
            .admits(ev.cutoff, dataset.split_boundary)
        {
            push(LeakageRule::SplitBoundary {
                split_label: dataset.split_label,
            });
        }
    }
    Ok(report)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderLine {
    schema_version: u32,
    feature_dim: usize,
    split_label: SplitLabel,
    split_boundary: Timestamp,
}

#[derive(Serialize, Deserialize)]
struct DocLine {
    doc_id: String,
    published_at: Timestamp,
    features: Vec<f64>,
    text: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    event_id: String,
    question: String,
    cutoff: Timestamp,
    resolution_deadline: Timestamp,
    outcome: Outcome,
    resolution_time: Timestamp,
    resolver_confidence: f64,
    domain_tag: DomainTag,
    docs: Vec<DocLine>,
}

/// Serializes a dataset as JSONL: one header line, then one record per line.
pub fn write_dataset_to<W: Write>(dataset: &Dataset, mut out: W) -> Result<(), TimelineError> {
    let header = HeaderLine {
        schema_version: SCHEMA_VERSION,
        feature_dim: dataset.feature_dim,
        split_label: dataset.split_label,
        split_boundary: dataset.split_boundary,
    };
    writeln!(
        out,
        "{}",
        serde_json::to_string(&header).expect("header serializes")
    )?;
    for record in &dataset.records {
        let ev = &record.event;
        let line = RecordLine {
            event_id: ev.event_id.clone(),
            question: ev.question.clone(),
            cutoff: ev.cutoff,
            resolution_deadline: ev.resolution_deadline,
            outcome: ev.outcome,
            resolution_time: ev.resolution_time,
            resolver_confidence: ev.resolver_confidence,
            domain_tag: ev.domain_tag,
            docs: record
                .docs
                .iter()
                .map(|d| DocLine {
                    doc_id: d.doc_id.clone(),
                    published_at: d.published_at,
                    features: d.features.clone(),
                    text: d.text.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_string(&line).map_err(|e| TimelineError::Structural {
            event_id: ev.event_id.clone(),
            field: "record",
            message: e.to_string(),
        })?;
        writeln!(out, "{json}")?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<(), TimelineError> {
    let file = File::create(path)?;
    write_dataset_to(dataset, BufWriter::new(file))
}

/// Parses a JSONL dataset. Errors carry 1-based line numbers.
pub fn read_dataset_from<R: BufRead>(input: R) -> Result<Dataset, TimelineError> {
    let mut lines = input.lines().enumerate();
    let header: HeaderLine = loop {
        match lines.next() {
            None => return Err(TimelineError::MissingHeader),
            Some((_, line)) if line.as_ref().map(|l| l.trim().is_empty()).unwrap_or(false) => {
                continue
            }
            Some((i, line)) => {
                let line = line?;
                break serde_json::from_str(&line).map_err(|e| TimelineError::Parse {
                    line: i + 1,
                    message: format!("invalid header: {e}"),
                })?;
            }
        }
    };
    if header.schema_version != SCHEMA_VERSION {
        return Err(TimelineError::SchemaVersion {
            found: header.schema_version,
        });
    }

    let mut records = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in lines {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RecordLine = serde_json::from_str(&line).map_err(|e| TimelineError::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        if !(0.0..=1.0).contains(&rec.resolver_confidence) {
            return Err(TimelineError::Parse {
                line: lineno,
                message: format!(
                    "resolver_confidence must be in [0, 1], found {}",
                    rec.resolver_confidence
                ),
            });
        }
        if let Some(doc) = rec
            .docs
            .iter()
            .find(|d| d.features.len() != header.feature_dim)
        {
            return Err(TimelineError::Parse {
                line: lineno,
                message: format!(
                    "doc {:?} has {} features, expected feature_dim {}",
                    doc.doc_id,
                    doc.features.len(),
                    header.feature_dim
                ),
            });
        }
        if !ids.insert(rec.event_id.clone()) {
            return Err(TimelineError::DuplicateEventId {
                line: lineno,
                event_id: rec.event_id,
            });
        }
        records.push(DatasetRecord {
            event: EventRecord {
                event_id: rec.event_id,
                question: rec.question,
                cutoff: rec.cutoff,
                resolution_deadline: rec.resolution_deadline,
                domain_tag: rec.domain_tag,
                outcome: rec.outcome,
                resolution_time: rec.resolution_time,
                resolver_confidence: rec.resolver_confidence,
            },
            docs: rec
                .docs
                .into_iter()
                .map(|d| SourceDoc {
                    doc_id: d.doc_id,
                    published_at: d.published_at,
                    features: d.features,
                    text: d.text,
                })
                .collect(),
        });
    }
    Ok(Dataset {
        feature_dim: header.feature_dim,
        split_label: header.split_label,
        split_boundary: header.split_boundary,
        records,
    })
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset, TimelineError> {
    let file = File::open(path)?;
    read_dataset_from(BufReader::new(file))
}

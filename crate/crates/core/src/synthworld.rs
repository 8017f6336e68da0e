//! Synthetic temporal worlds with known conditional outcome probabilities.
//!
//! Each event owns a small corpus:
//!
//! - pre-cutoff *signal* docs: `x[0]` set to the relevance marker, remaining
//!   coordinates the event's latent state plus per-doc noise;
//! - pre-cutoff and post-cutoff *noise* docs: marker `0`, standard normal elsewhere;
//! - post-cutoff *revelation* docs announcing the outcome, read only by the resolver.
//!
//! The ground-truth probability is `logistic(w . mean(signal features))` and
//! the outcome is drawn from it. The dataset keeps only pre-cutoff docs; the
//! full corpus goes to the [`HiddenCorpus`] that [`resolve`] reads.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, StreamRng};
use crate::timeline::{
    Dataset, DatasetRecord, DomainTag, EventRecord, Outcome, SourceDoc, SplitLabel, Timestamp,
    SECONDS_PER_DAY,
};

/// 2024-07-01T00:00:00Z.
pub const DEFAULT_START: Timestamp = Timestamp(1_719_792_000);
const REVELATION_PREFIX: &str = "RESOLUTION";

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid world config: {0}")]
    Config(String),
    #[error("unknown event_id {0:?}")]
    UnknownEvent(String),
    #[error("sidecar line {line}: {message}")]
    Sidecar { line: usize, message: String },
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HorizonRange {
    pub min_secs: i64,
    pub max_secs: i64,
}

impl HorizonRange {
    pub fn days(min: i64, max: i64) -> Self {
        HorizonRange {
            min_secs: min * SECONDS_PER_DAY,
            max_secs: max * SECONDS_PER_DAY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub seed: u64,
    pub n_events: usize,
    pub feature_dim: usize,
    pub horizon_range: HorizonRange,
    pub link_weights: Vec<f64>,
    pub noise_docs_per_event: usize,
    pub signal_docs_per_event: usize,
    pub unresolvable_fraction: f64,
    pub confidence_threshold: f64,
    /// Fraction of resolvable events whose revelation confidence falls below the threshold.
    pub low_confidence_fraction: f64,
    /// Probability that a revelation doc reports the flipped outcome.
    pub resolution_noise: f64,
    /// Standard deviation of per-doc noise around the latent state.
    pub signal_noise: f64,
    /// Value of the relevance coordinate `x[0]` on signal docs (noise docs carry 0).
    pub relevance_marker: f64,
    pub start: Timestamp,
    /// Cutoffs are spread over `[start, start + cutoff_span_secs)`.
    pub cutoff_span_secs: i64,
    /// Pre-cutoff docs are published within this window before the cutoff.
    pub lookback_secs: i64,
}

impl WorldConfig {
    /// Link weights used when none are given: no weight on the relevance
    /// marker, decaying alternating weights on the latent coordinates.
    pub fn default_link_weights(feature_dim: usize) -> Vec<f64> {
        (0..feature_dim)
            .map(|j| {
                if j == 0 {
                    0.0
                } else {
                    let sign = if j % 2 == 1 { 1.0 } else { -1.0 };
                    sign * 1.5 / (j as f64).sqrt()
                }
            })
            .collect()
    }

    pub fn with_seed(seed: u64, n_events: usize, feature_dim: usize) -> Self {
        WorldConfig {
            seed,
            n_events,
            feature_dim,
            horizon_range: HorizonRange::days(1, 42),
            link_weights: Self::default_link_weights(feature_dim),
            noise_docs_per_event: 2,
            signal_docs_per_event: 4,
            unresolvable_fraction: 0.0,
            confidence_threshold: 0.8,
            low_confidence_fraction: 0.0,
            resolution_noise: 0.0,
            signal_noise: 0.25,
            relevance_marker: 3.0,
            start: DEFAULT_START,
            cutoff_span_secs: 300 * SECONDS_PER_DAY,
            lookback_secs: 14 * SECONDS_PER_DAY,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let fail = |m: String| Err(SynthError::Config(m));
        if self.feature_dim == 0 {
            return fail("feature_dim must be positive".into());
        }
        if self.link_weights.len() != self.feature_dim {
            return fail(format!(
                "link_weights has {} entries, feature_dim is {}",
                self.link_weights.len(),
                self.feature_dim
            ));
        }
        if self.link_weights.iter().any(|w| !w.is_finite()) {
            return fail("link_weights must be finite".into());
        }
        let h = self.horizon_range;
        if h.min_secs < SECONDS_PER_DAY || h.min_secs > h.max_secs {
            return fail(format!(
                "horizon range [{}, {}] s needs 1 day <= min <= max",
                h.min_secs, h.max_secs
            ));
        }
        if self.signal_docs_per_event == 0 {
            return fail("signal_docs_per_event must be positive".into());
        }
        if !(0.0..1.0).contains(&self.unresolvable_fraction) {
            return fail(format!(
                "unresolvable_fraction {} outside [0, 1)",
                self.unresolvable_fraction
            ));
        }
        if !(self.confidence_threshold > 0.0 && self.confidence_threshold <= 1.0) {
            return fail(format!(
                "confidence_threshold {} outside (0, 1]",
                self.confidence_threshold
            ));
        }
        for (name, v) in [
            ("low_confidence_fraction", self.low_confidence_fraction),
            ("resolution_noise", self.resolution_noise),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{name} {v} outside [0, 1]"));
            }
        }
        if !self.relevance_marker.is_finite() || self.relevance_marker == 0.0 {
            return fail("relevance_marker must be finite and non-zero".into());
        }
        if !(self.signal_noise >= 0.0 && self.signal_noise.is_finite()) {
            return fail("signal_noise must be finite and non-negative".into());
        }
        if self.cutoff_span_secs < self.n_events as i64 {
            return fail("cutoff_span_secs must allow distinct cutoffs for every event".into());
        }
        if self.lookback_secs < 0 {
            return fail("lookback_secs must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub event_id: String,
    pub true_probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolutionOutcome {
    pub event_id: String,
    pub resolved: bool,
    pub outcome: Option<Outcome>,
    pub resolution_time: Option<Timestamp>,
    pub confidence: f64,
}

/// One event's full (unmasked) document stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventCorpus {
    pub event_id: String,
    pub cutoff: Timestamp,
    pub resolution_deadline: Timestamp,
    pub docs: Vec<SourceDoc>,
}

/// The resolver's view: every document, including post-cutoff sources.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HiddenCorpus {
    pub events: BTreeMap<String, EventCorpus>,
}

impl HiddenCorpus {
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<(), SynthError> {
        let mut out = BufWriter::new(File::create(path)?);
        for ev in self.events.values() {
            writeln!(
                out,
                "{}",
                serde_json::to_string(ev).expect("corpus serializes")
            )?;
        }
        out.flush()?;
        Ok(())
    }
}

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// `logistic(w . mean(signal features))`.
///
/// Docs are summed in `doc_id` order so the result does not depend on the
/// order the caller collected them in.
pub fn link_probability(link_weights: &[f64], signal_docs: &[&SourceDoc]) -> f64 {
    let mut signal_docs = signal_docs.to_vec();
    signal_docs.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
    let n = signal_docs.len() as f64;
    let z: f64 = link_weights
        .iter()
        .enumerate()
        .map(|(j, w)| w * signal_docs.iter().map(|d| d.features[j]).sum::<f64>() / n)
        .sum();
    logistic(z)
}

fn is_signal_doc(doc: &SourceDoc) -> bool {
    doc.doc_id
        .rsplit('-')
        .next()
        .is_some_and(|s| s.starts_with('s'))
}

fn revelation_text(event_id: &str, outcome: Outcome, confidence: f64) -> String {
    format!(
        "{REVELATION_PREFIX} event={event_id} outcome={} confidence={confidence:.6}",
        outcome.bit()
    )
}

fn parse_revelation(text: &str, event_id: &str) -> Option<(Outcome, f64)> {
    let mut parts = text.split_whitespace();
    if parts.next()? != REVELATION_PREFIX {
        return None;
    }
    let mut outcome = None;
    let mut confidence = None;
    let mut matches_event = false;
    for kv in parts {
        let (k, v) = kv.split_once('=')?;
        match k {
            "event" => matches_event = v == event_id,
            "outcome" => outcome = Outcome::from_bit(v.parse().ok()?),
            "confidence" => confidence = v.parse::<f64>().ok(),
            _ => {}
        }
    }
    matches_event.then_some((outcome?, confidence?))
}

/// Determines an event's outcome from post-cutoff sources.
///
/// Only revelation docs published in `(cutoff, deadline]` with confidence at
/// or above `confidence_threshold` count; the earliest one fixes the
/// resolution time. There is deliberately no parameter through which policy
/// outputs or training state could reach this function.
pub fn resolve(
    event_id: &str,
    corpus: &HiddenCorpus,
    confidence_threshold: f64,
) -> Result<ResolutionOutcome, SynthError> {
    let ev = corpus
        .events
        .get(event_id)
        .ok_or_else(|| SynthError::UnknownEvent(event_id.to_string()))?;
    let mut best: Option<(Timestamp, Outcome, f64)> = None;
    let mut max_confidence: f64 = 0.0;
    for doc in &ev.docs {
        if doc.published_at <= ev.cutoff || doc.published_at > ev.resolution_deadline {
            continue;
        }
        let Some((outcome, confidence)) = doc
            .text
            .as_deref()
            .and_then(|t| parse_revelation(t, event_id))
        else {
            continue;
        };
        max_confidence = max_confidence.max(confidence);
        if confidence < confidence_threshold {
            continue;
        }
        if best.is_none_or(|(t, _, _)| doc.published_at < t) {
            best = Some((doc.published_at, outcome, confidence));
        }
    }
    Ok(match best {
        Some((t, outcome, confidence)) => ResolutionOutcome {
            event_id: event_id.to_string(),
            resolved: true,
            outcome: Some(outcome),
            resolution_time: Some(t),
            confidence,
        },
        None => ResolutionOutcome {
            event_id: event_id.to_string(),
            resolved: false,
            outcome: None,
            resolution_time: None,
            confidence: max_confidence,
        },
    })
}

/// A generated world. `records`, `ground_truth` are aligned and in cutoff order.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    pub records: Vec<DatasetRecord>,
    pub ground_truth: Vec<GroundTruth>,
    pub hidden: HiddenCorpus,
    /// Events generated but discarded by the resolver.
    pub discarded: usize,
}

impl World {
    /// Recomputes an event's ground-truth probability from its stored signal docs.
    pub fn recompute_truth(&self, record: &DatasetRecord) -> f64 {
        let signal: Vec<&SourceDoc> = record.docs.iter().filter(|d| is_signal_doc(d)).collect();
        link_probability(&self.config.link_weights, &signal)
    }

    /// Splits chronologically: the first `round(train_fraction * n)` records are train.
    ///
    /// The boundary is the first test cutoff; cutoffs are distinct so every
    /// train cutoff is strictly before it.
    pub fn split(&self, train_fraction: f64) -> Result<(Dataset, Dataset), SynthError> {
        if !(0.0..=1.0).contains(&train_fraction) {
            return Err(SynthError::Config(format!(
                "train_fraction {train_fraction} outside [0, 1]"
            )));
        }
        let n_train = (train_fraction * self.records.len() as f64).round() as usize;
        let (train, test) = self.records.split_at(n_train);
        let boundary = match (test.first(), train.last()) {
            (Some(r), _) => r.event.cutoff,
            (None, Some(r)) => r.event.cutoff.plus_secs(1),
            (None, None) => self.config.start,
        };
        let make = |records: &[DatasetRecord], split_label| Dataset {
            feature_dim: self.config.feature_dim,
            split_label,
            split_boundary: boundary,
            records: records.to_vec(),
        };
        Ok((make(train, SplitLabel::Train), make(test, SplitLabel::Test)))
    }

    pub fn truth_for(&self, dataset: &Dataset) -> Vec<GroundTruth> {
        let by_id: BTreeMap<&str, &GroundTruth> = self
            .ground_truth
            .iter()
            .map(|g| (g.event_id.as_str(), g))
            .collect();
        dataset
            .records
            .iter()
            .filter_map(|r| by_id.get(r.event.event_id.as_str()).map(|g| (*g).clone()))
            .collect()
    }
}

struct EventDraft {
    cutoff: Timestamp,
    deadline: Timestamp,
    domain: DomainTag,
    docs: Vec<SourceDoc>,
    truth: f64,
}

fn normal(rng: &mut StreamRng) -> f64 {
    rng.sample(StandardNormal)
}

fn draft_event(
    config: &WorldConfig,
    rng: &mut StreamRng,
    index: usize,
    event_id: &str,
) -> EventDraft {
    let d = config.feature_dim;
    let slot = config.cutoff_span_secs / config.n_events.max(1) as i64;
    let cutoff = config
        .start
        .plus_secs(index as i64 * slot + rng.gen_range(0..slot.max(1)));
    let horizon = rng.gen_range(config.horizon_range.min_secs..=config.horizon_range.max_secs);
    let deadline = cutoff.plus_secs(horizon);
    let domain = DomainTag::ALL[rng.gen_range(0..DomainTag::ALL.len())];
    let pre_time = |rng: &mut StreamRng| cutoff.plus_secs(-rng.gen_range(0..=config.lookback_secs));
    let post_time = |rng: &mut StreamRng| cutoff.plus_secs(rng.gen_range(1..=horizon));

    let latent: Vec<f64> = (1..d).map(|_| normal(rng)).collect();
    let mut docs = Vec::new();
    for k in 0..config.signal_docs_per_event {
        let mut features = vec![config.relevance_marker];
        features.extend(latent.iter().map(|z| z + config.signal_noise * normal(rng)));
        docs.push(SourceDoc {
            doc_id: format!("{event_id}-s{k}"),
            published_at: pre_time(rng),
            features,
            text: None,
        });
    }
    let noise_features = |rng: &mut StreamRng| {
        let mut f = vec![0.0];
        f.extend((1..d).map(|_| normal(rng)));
        f
    };
    for k in 0..config.noise_docs_per_event {
        let features = noise_features(rng);
        docs.push(SourceDoc {
            doc_id: format!("{event_id}-n{k}"),
            published_at: pre_time(rng),
            features,
            text: None,
        });
    }
    for k in 0..config.noise_docs_per_event {
        let features = noise_features(rng);
        docs.push(SourceDoc {
            doc_id: format!("{event_id}-p{k}"),
            published_at: post_time(rng),
            features,
            text: None,
        });
    }
    let signal: Vec<&SourceDoc> = docs.iter().filter(|d| is_signal_doc(d)).collect();
    let truth = link_probability(&config.link_weights, &signal);
    EventDraft {
        cutoff,
        deadline,
        domain,
        docs,
        truth,
    }
}

/// Generates a world. Deterministic in `config.seed`; single RNG stream.
pub fn generate_world(config: &WorldConfig) -> Result<World, SynthError> {
    config.validate()?;
    let mut rng = rng::stream(rng::derive_seed(config.seed, rng::tags::WORLD, 0));
    let mut records = Vec::new();
    let mut ground_truth = Vec::new();
    let mut hidden = HiddenCorpus::default();
    let mut discarded = 0;

    for index in 0..config.n_events {
        let event_id = format!("ev{index:05}");
        let mut draft = draft_event(config, &mut rng, index, &event_id);
        let outcome = if rng.gen::<f64>() < draft.truth {
            Outcome::Yes
        } else {
            Outcome::No
        };
        let resolvable = rng.gen::<f64>() >= config.unresolvable_fraction;
        let low_confidence = rng.gen::<f64>() < config.low_confidence_fraction;
        let confidence = if low_confidence {
            config.confidence_threshold * rng.gen::<f64>()
        } else {
            config.confidence_threshold + (1.0 - config.confidence_threshold) * rng.gen::<f64>()
        };
        let n_revelations = if resolvable { rng.gen_range(1..=3) } else { 0 };
        for k in 0..n_revelations {
            let published_at = draft
                .cutoff
                .plus_secs(rng.gen_range(1..=(draft.deadline.secs() - draft.cutoff.secs())));
            let reported = if rng.gen::<f64>() < config.resolution_noise {
                outcome.flipped()
            } else {
                outcome
            };
            let mut features = vec![0.0; config.feature_dim];
            features[0] = -1.0;
            draft.docs.push(SourceDoc {
                doc_id: format!("{event_id}-r{k}"),
                published_at,
                features,
                text: Some(revelation_text(&event_id, reported, confidence)),
            });
        }
        hidden.events.insert(
            event_id.clone(),
            EventCorpus {
                event_id: event_id.clone(),
                cutoff: draft.cutoff,
                resolution_deadline: draft.deadline,
                docs: draft.docs.clone(),
            },
        );

        let resolution = resolve(&event_id, &hidden, config.confidence_threshold)?;
        let (Some(resolved_outcome), Some(resolution_time)) =
            (resolution.outcome, resolution.resolution_time)
        else {
            discarded += 1;
            continue;
        };
        let mut input_docs: Vec<SourceDoc> = draft
            .docs
            .into_iter()
            .filter(|d| d.published_at <= draft.cutoff)
            .collect();
        input_docs.sort_by(|a, b| {
            a.published_at
                .cmp(&b.published_at)
                .then_with(|| a.doc_id.cmp(&b.doc_id))
        });
        records.push(DatasetRecord {
            event: EventRecord {
                event_id: event_id.clone(),
                question: format!(
                    "Will the tracked {} indicator for {event_id} resolve YES by {}?",
                    serde_json::to_value(draft.domain)
                        .expect("tag")
                        .as_str()
                        .unwrap_or("other"),
                    draft.deadline
                ),
                cutoff: draft.cutoff,
                resolution_deadline: draft.deadline,
                domain_tag: draft.domain,
                outcome: resolved_outcome,
                resolution_time,
                resolver_confidence: resolution.confidence,
            },
            docs: input_docs,
        });
        ground_truth.push(GroundTruth {
            event_id,
            true_probability: draft.truth,
        });
    }

    Ok(World {
        config: config.clone(),
        records,
        ground_truth,
        hidden,
        discarded,
    })
}

pub fn write_ground_truth(truth: &[GroundTruth], path: impl AsRef<Path>) -> Result<(), SynthError> {
    let mut out = BufWriter::new(File::create(path)?);
    for g in truth {
        writeln!(
            out,
            "{}",
            serde_json::to_string(g).expect("ground truth serializes")
        )?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_ground_truth(path: impl AsRef<Path>) -> Result<Vec<GroundTruth>, SynthError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let g: GroundTruth = serde_json::from_str(&line).map_err(|e| SynthError::Sidecar {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(g);
    }
    Ok(out)
}

//! Stochastic trajectory policy over masked states.
//!
//! A trajectory is `selection_steps` evidence selections followed by one
//! probability-bin emission:
//!
//! ```text
//! step t < T:  doc_t ~ softmax_i(a_t . x_i)              (with replacement)
//! context:     c = mean(x_doc_0, ..., x_doc_{T-1})        (null_context if no docs)
//! emission:    bin ~ softmax_b(phi_b . (E [c; 1]))
//! p          = clamp(bin / (B - 1))
//! ```
//!
//! `phi` is a fixed bin basis. With [`EmissionBasis::OneHot`] the emission
//! head is an unrestricted `B x (d + 1)` matrix; the default
//! [`EmissionBasis::LogitQuadratic`] uses `phi_b = [u_b, -u_b^2 / 2]` where
//! `u_b` is the log-odds of the bin's probability, so the emission is a
//! discretised logistic-normal whose location and precision are linear in the
//! context.
//!
//! All parameters start at zero, which is the uniform policy.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::scoring::{clamp_probability, Probability};
use crate::timeline::{MaskedState, SourceDoc};

pub const DEFAULT_BINS: usize = 101;
pub const DEFAULT_SELECTION_STEPS: usize = 2;
pub const CHECKPOINT_FORMAT: &str = "foresight-policy";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("non-finite logits in parameter block `{0}`")]
    NonFiniteLogits(&'static str),
    #[error("non-finite value in parameter block `{0}`")]
    NonFiniteParams(&'static str),
    #[error("action out of range: {0}")]
    ActionOutOfRange(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("doc {0:?} has no text for the hashed-text featurizer")]
    MissingText(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, PolicyError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmissionBasis {
    #[default]
    LogitQuadratic,
    OneHot,
}

impl EmissionBasis {
    pub fn dim(self, bins: usize) -> usize {
        match self {
            EmissionBasis::LogitQuadratic => 2,
            EmissionBasis::OneHot => bins,
        }
    }

    /// Row-major `bins x dim` basis matrix.
    fn matrix(self, bins: usize) -> Vec<f64> {
        match self {
            EmissionBasis::LogitQuadratic => (0..bins)
                .flat_map(|b| {
                    let p = bin_probability(b, bins).value();
                    let u = (p / (1.0 - p)).ln();
                    [u, -0.5 * u * u]
                })
                .collect(),
            EmissionBasis::OneHot => {
                let mut m = vec![0.0; bins * bins];
                for b in 0..bins {
                    m[b * bins + b] = 1.0;
                }
                m
            }
        }
    }
}

/// Probability reported for an emitted bin.
pub fn bin_probability(bin: usize, bins: usize) -> Probability {
    clamp_probability(bin as f64 / (bins - 1) as f64).expect("finite bin center")
}

/// Policy parameters. Also used as the gradient type (same shape).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub feature_dim: usize,
    pub bins: usize,
    pub selection_steps: usize,
    pub basis: EmissionBasis,
    /// `selection_steps x feature_dim`, row-major.
    pub attention: Vec<f64>,
    /// `basis.dim(bins) x (feature_dim + 1)`, row-major; last column is the bias.
    pub emission: Vec<f64>,
    /// Context used when no document is visible.
    pub null_context: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(
        feature_dim: usize,
        bins: usize,
        selection_steps: usize,
        basis: EmissionBasis,
    ) -> Self {
        assert!(bins >= 2, "need at least two probability bins");
        PolicyParams {
            feature_dim,
            bins,
            selection_steps,
            basis,
            attention: vec![0.0; selection_steps * feature_dim],
            emission: vec![0.0; basis.dim(bins) * (feature_dim + 1)],
            null_context: vec![0.0; feature_dim],
        }
    }

    pub fn with_defaults(feature_dim: usize) -> Self {
        Self::zeros(
            feature_dim,
            DEFAULT_BINS,
            DEFAULT_SELECTION_STEPS,
            EmissionBasis::default(),
        )
    }

    /// Zero-valued parameters with the same shape as `self`.
    pub fn zeros_like(&self) -> Self {
        Self::zeros(
            self.feature_dim,
            self.bins,
            self.selection_steps,
            self.basis,
        )
    }

    pub fn basis_dim(&self) -> usize {
        self.basis.dim(self.bins)
    }

    pub fn num_params(&self) -> usize {
        self.attention.len() + self.emission.len() + self.null_context.len()
    }

    pub fn check_shape(&self) -> Result<()> {
        let want = Self::zeros(
            self.feature_dim,
            self.bins.max(2),
            self.selection_steps,
            self.basis,
        );
        if self.bins < 2 {
            return Err(PolicyError::Shape("bins must be at least 2".into()));
        }
        for (name, got, expected) in [
            ("attention", self.attention.len(), want.attention.len()),
            ("emission", self.emission.len(), want.emission.len()),
            (
                "null_context",
                self.null_context.len(),
                want.null_context.len(),
            ),
        ] {
            if got != expected {
                return Err(PolicyError::Shape(format!(
                    "{name} has {got} entries, expected {expected}"
                )));
            }
        }
        Ok(())
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.feature_dim == other.feature_dim
            && self.bins == other.bins
            && self.selection_steps == other.selection_steps
            && self.basis == other.basis
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, block) in self.blocks() {
            if block.iter().any(|x| !x.is_finite()) {
                return Err(PolicyError::NonFiniteParams(name));
            }
        }
        Ok(())
    }

    fn blocks(&self) -> [(&'static str, &[f64]); 3] {
        [
            ("attention", &self.attention),
            ("emission", &self.emission),
            ("null_context", &self.null_context),
        ]
    }

    fn blocks_mut(&mut self) -> [&mut Vec<f64>; 3] {
        [
            &mut self.attention,
            &mut self.emission,
            &mut self.null_context,
        ]
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.blocks()
            .iter()
            .flat_map(|(_, b)| b.iter().copied())
            .collect()
    }

    /// Inverse of [`flatten`](Self::flatten) for a template shape.
    pub fn unflatten_like(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.num_params() {
            return Err(PolicyError::Shape(format!(
                "flat vector has {} entries, expected {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut out = self.clone();
        let mut rest = flat;
        for block in out.blocks_mut() {
            let (head, tail) = rest.split_at(block.len());
            block.copy_from_slice(head);
            rest = tail;
        }
        Ok(out)
    }

    /// `self + scale * direction`, leaving `self` untouched.
    pub fn add_scaled(&self, direction: &Self, scale: f64) -> Result<Self> {
        if !self.same_shape(direction) {
            return Err(PolicyError::Shape(
                "parameter and direction shapes differ".into(),
            ));
        }
        let mut out = self.clone();
        for (dst, src) in out.blocks_mut().into_iter().zip(direction.blocks()) {
            for (d, s) in dst.iter_mut().zip(src.1) {
                *d += scale * s;
            }
        }
        Ok(out)
    }

    /// In-place `self += scale * other`; shapes must already match.
    pub(crate) fn axpy(&mut self, scale: f64, other: &Self) {
        for (dst, src) in self.blocks_mut().into_iter().zip(other.blocks()) {
            for (d, s) in dst.iter_mut().zip(src.1) {
                *d += scale * s;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.blocks()
            .iter()
            .flat_map(|(_, b)| b.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn attention_row(&self, step: usize) -> &[f64] {
        &self.attention[step * self.feature_dim..(step + 1) * self.feature_dim]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeaturizerMode {
    #[default]
    NumericPassthrough,
    HashedText,
}

/// Maps a document to the policy's input vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Featurizer {
    pub mode: FeaturizerMode,
    pub dim: usize,
    pub salt: u64,
}

impl Featurizer {
    pub fn passthrough(dim: usize) -> Self {
        Featurizer {
            mode: FeaturizerMode::NumericPassthrough,
            dim,
            salt: 0,
        }
    }

    pub fn hashed_text(dim: usize, salt: u64) -> Self {
        Featurizer {
            mode: FeaturizerMode::HashedText,
            dim,
            salt,
        }
    }
}

fn fnv1a(salt: u64, bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ salt;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Passthrough returns `doc.features`; hashed-text maps lowercase alphanumeric
/// tokens to `dim` signed buckets and L2-normalises.
pub fn featurize(doc: &SourceDoc, f: &Featurizer) -> Result<Vec<f64>> {
    match f.mode {
        FeaturizerMode::NumericPassthrough => {
            if doc.features.len() != f.dim {
                return Err(PolicyError::Shape(format!(
                    "doc {:?} has {} features, featurizer expects {}",
                    doc.doc_id,
                    doc.features.len(),
                    f.dim
                )));
            }
            Ok(doc.features.clone())
        }
        FeaturizerMode::HashedText => {
            let text = doc
                .text
                .as_deref()
                .ok_or_else(|| PolicyError::MissingText(doc.doc_id.clone()))?;
            let mut v = vec![0.0; f.dim];
            for token in text
                .split(|c: char| !c.is_alphanumeric())
                .filter(|t| !t.is_empty())
            {
                let h = fnv1a(f.salt, token.to_lowercase().as_bytes());
                let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
                v[(h % f.dim as u64) as usize] += sign;
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                v.iter_mut().for_each(|x| *x /= norm);
            }
            Ok(v)
        }
    }
}

/// A featurized masked state: what the policy actually conditions on.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub event_id: String,
    pub doc_ids: Vec<String>,
    pub features: Vec<Vec<f64>>,
}

impl Observation {
    pub fn from_state(state: &MaskedState, featurizer: &Featurizer) -> Result<Self> {
        let features = state
            .visible_docs
            .iter()
            .map(|d| featurize(d, featurizer))
            .collect::<Result<Vec<_>>>()?;
        Ok(Observation {
            event_id: state.event_id.clone(),
            doc_ids: state
                .visible_docs
                .iter()
                .map(|d| d.doc_id.clone())
                .collect(),
            features,
        })
    }

    pub fn num_docs(&self) -> usize {
        self.features.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub event_id: String,
    /// `None` for a selection step taken with no visible documents.
    pub selected_doc_ids: Vec<Option<String>>,
    pub selected_indices: Vec<Option<usize>>,
    pub emitted_bin: usize,
    pub p: Probability,
    pub step_log_probs: Vec<f64>,
    pub total_log_prob: f64,
}

fn log_softmax(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter_mut().for_each(|l| *l -= lse);
}

fn sample_index<R: Rng>(log_probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, lp) in log_probs.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    // rounding left u above the accumulated mass; take the last positive entry
    log_probs
        .iter()
        .rposition(|lp| lp.exp() > 0.0)
        .unwrap_or(log_probs.len() - 1)
}

/// Per-observation log-probabilities over documents for one selection step.
fn attention_log_probs(params: &PolicyParams, obs: &Observation, step: usize) -> Result<Vec<f64>> {
    let row = params.attention_row(step);
    let mut logits: Vec<f64> = obs
        .features
        .iter()
        .map(|x| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect();
    if logits.iter().any(|l: &f64| !l.is_finite()) {
        return Err(PolicyError::NonFiniteLogits("attention"));
    }
    log_softmax(&mut logits);
    Ok(logits)
}

fn context(params: &PolicyParams, obs: &Observation, selections: &[Option<usize>]) -> Vec<f64> {
    let picked: Vec<usize> = selections.iter().flatten().copied().collect();
    if picked.is_empty() {
        return params.null_context.clone();
    }
    let mut c = vec![0.0; params.feature_dim];
    for &i in &picked {
        for (cj, xj) in c.iter_mut().zip(&obs.features[i]) {
            *cj += xj;
        }
    }
    let n = picked.len() as f64;
    c.iter_mut().for_each(|cj| *cj /= n);
    c
}

/// Emission head evaluated at one context.
struct Emission {
    augmented: Vec<f64>,
    log_probs: Vec<f64>,
    basis: Vec<f64>,
}

impl Emission {
    fn new(params: &PolicyParams, ctx: &[f64]) -> Result<Self> {
        let k = params.basis_dim();
        let cols = params.feature_dim + 1;
        let mut augmented = ctx.to_vec();
        augmented.push(1.0);
        let coeff: Vec<f64> = (0..k)
            .map(|r| {
                params.emission[r * cols..(r + 1) * cols]
                    .iter()
                    .zip(&augmented)
                    .map(|(w, c)| w * c)
                    .sum()
            })
            .collect();
        let basis = params.basis.matrix(params.bins);
        let mut log_probs: Vec<f64> = (0..params.bins)
            .map(|b| {
                basis[b * k..(b + 1) * k]
                    .iter()
                    .zip(&coeff)
                    .map(|(f, c)| f * c)
                    .sum()
            })
            .collect();
        if log_probs.iter().any(|l| !l.is_finite()) {
            return Err(PolicyError::NonFiniteLogits("emission"));
        }
        log_softmax(&mut log_probs);
        Ok(Emission {
            augmented,
            log_probs,
            basis,
        })
    }

    /// `phi_bin - E_pi[phi]`, the score of the emitted bin w.r.t. the coefficients.
    fn coefficient_score(&self, bin: usize, k: usize) -> Vec<f64> {
        let mut s = self.basis[bin * k..(bin + 1) * k].to_vec();
        for (b, lp) in self.log_probs.iter().enumerate() {
            let pb = lp.exp();
            for (r, sr) in s.iter_mut().enumerate() {
                *sr -= pb * self.basis[b * k + r];
            }
        }
        s
    }
}

/// Samples one trajectory. Deterministic in `(params, obs, seed)`.
pub fn sample_trajectory(
    params: &PolicyParams,
    obs: &Observation,
    seed: u64,
) -> Result<Trajectory> {
    let mut rng = rng::stream(seed);
    let mut selected_indices = Vec::with_capacity(params.selection_steps);
    let mut step_log_probs = Vec::with_capacity(params.selection_steps + 1);
    for step in 0..params.selection_steps {
        if obs.num_docs() == 0 {
            // consume the draw so the emission stream does not depend on doc count
            let _: f64 = rng.gen();
            selected_indices.push(None);
            step_log_probs.push(0.0);
            continue;
        }
        let lps = attention_log_probs(params, obs, step)?;
        let i = sample_index(&lps, &mut rng);
        selected_indices.push(Some(i));
        step_log_probs.push(lps[i]);
    }
    let emission = Emission::new(params, &context(params, obs, &selected_indices))?;
    let bin = sample_index(&emission.log_probs, &mut rng);
    step_log_probs.push(emission.log_probs[bin]);
    Ok(Trajectory {
        event_id: obs.event_id.clone(),
        selected_doc_ids: selected_indices
            .iter()
            .map(|i| i.map(|i| obs.doc_ids[i].clone()))
            .collect(),
        selected_indices,
        emitted_bin: bin,
        p: bin_probability(bin, params.bins),
        total_log_prob: step_log_probs.iter().sum(),
        step_log_probs,
    })
}

fn check_actions(params: &PolicyParams, obs: &Observation, traj: &Trajectory) -> Result<()> {
    if traj.selected_indices.len() != params.selection_steps {
        return Err(PolicyError::ActionOutOfRange(format!(
            "{} selections for {} steps",
            traj.selected_indices.len(),
            params.selection_steps
        )));
    }
    for sel in &traj.selected_indices {
        match (sel, obs.num_docs()) {
            (None, 0) => {}
            (Some(i), n) if *i < n => {}
            (sel, n) => {
                return Err(PolicyError::ActionOutOfRange(format!(
                    "selection {sel:?} with {n} visible docs"
                )));
            }
        }
    }
    if traj.emitted_bin >= params.bins {
        return Err(PolicyError::ActionOutOfRange(format!(
            "bin {} with {} bins",
            traj.emitted_bin, params.bins
        )));
    }
    Ok(())
}

/// Recomputes the total log-probability of `traj` under `params`.
pub fn trajectory_log_prob(
    params: &PolicyParams,
    obs: &Observation,
    traj: &Trajectory,
) -> Result<f64> {
    check_actions(params, obs, traj)?;
    let mut total = 0.0;
    for (step, sel) in traj.selected_indices.iter().enumerate() {
        if let Some(i) = sel {
            total += attention_log_probs(params, obs, step)?[*i];
        }
    }
    let emission = Emission::new(params, &context(params, obs, &traj.selected_indices))?;
    Ok(total + emission.log_probs[traj.emitted_bin])
}

/// Exact gradient of `trajectory_log_prob` with respect to every parameter.
pub fn log_prob_gradient(
    params: &PolicyParams,
    obs: &Observation,
    traj: &Trajectory,
) -> Result<PolicyParams> {
    let mut grad = params.zeros_like();
    accumulate_log_prob_gradient(params, obs, traj, 1.0, &mut grad)?;
    Ok(grad)
}

/// `grad += weight * d log pi(traj) / d params`.
pub(crate) fn accumulate_log_prob_gradient(
    params: &PolicyParams,
    obs: &Observation,
    traj: &Trajectory,
    weight: f64,
    grad: &mut PolicyParams,
) -> Result<()> {
    check_actions(params, obs, traj)?;
    let d = params.feature_dim;
    for (step, sel) in traj.selected_indices.iter().enumerate() {
        let Some(chosen) = *sel else { continue };
        let lps = attention_log_probs(params, obs, step)?;
        let row = &mut grad.attention[step * d..(step + 1) * d];
        for (i, x) in obs.features.iter().enumerate() {
            let coef = weight * (f64::from(u8::from(i == chosen)) - lps[i].exp());
            for (g, xj) in row.iter_mut().zip(x) {
                *g += coef * xj;
            }
        }
    }

    let ctx = context(params, obs, &traj.selected_indices);
    let emission = Emission::new(params, &ctx)?;
    let k = params.basis_dim();
    let cols = d + 1;
    let score = emission.coefficient_score(traj.emitted_bin, k);
    for (r, sr) in score.iter().enumerate() {
        for (j, cj) in emission.augmented.iter().enumerate() {
            grad.emission[r * cols + j] += weight * sr * cj;
        }
    }
    if obs.num_docs() == 0 {
        for j in 0..d {
            let dj: f64 = (0..k)
                .map(|r| score[r] * params.emission[r * cols + j])
                .sum();
            grad.null_context[j] += weight * dj;
        }
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    params: PolicyParams,
}

pub fn save_params(params: &PolicyParams, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer(
        &mut out,
        &CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            params: params.clone(),
        },
    )
    .map_err(|e| PolicyError::Checkpoint(e.to_string()))?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

pub fn load_params(path: impl AsRef<Path>) -> Result<PolicyParams> {
    let file: CheckpointFile = serde_json::from_reader(BufReader::new(File::open(path)?))
        .map_err(|e| PolicyError::Checkpoint(e.to_string()))?;
    if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
        return Err(PolicyError::Checkpoint(format!(
            "unsupported checkpoint {} v{}",
            file.format, file.version
        )));
    }
    file.params.check_shape()?;
    file.params.check_finite()?;
    Ok(file.params)
}

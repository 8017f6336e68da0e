//! Group-relative policy optimisation over resolved events.
//!
//! For each event the policy samples `K` trajectories from the same masked
//! state. Each trajectory's reward is the log score of its emitted
//! probability against the resolved outcome, and its advantage is the reward
//! minus the group mean. The update ascends
//!
//! ```text
//! g = (1 / N) * sum_groups sum_i A_i * grad log pi(tau_i)
//! ```
//!
//! where `N` is the number of groups in the batch.

use std::cmp::Ordering;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{
    self, accumulate_log_prob_gradient, EmissionBasis, Featurizer, FeaturizerMode, Observation,
    PolicyError, PolicyParams, Trajectory,
};
use crate::rng::{self, tags};
use crate::scoring::{
    self, log_score, median_ensemble, MetricsReport, ReportConfig, ScoredPrediction, ScoringError,
};
use crate::timeline::{
    mask_state_with_limit, validate_no_leakage, Dataset, EventRecord, SourceDoc, SplitLabel,
    TimelineError, DEFAULT_MAX_VISIBLE_DOCS,
};

#[derive(Debug, Error)]
pub enum GrpoError {
    #[error("group needs at least 2 rewards, got {0}")]
    GroupTooSmall(usize),
    #[error("non-finite reward at index {0}")]
    NonFiniteReward(usize),
    #[error(
        "event {event_id:?} was discarded by the resolver (confidence {confidence} < {threshold})"
    )]
    Discarded {
        event_id: String,
        confidence: f64,
        threshold: f64,
    },
    #[error("dataset failed leakage validation with {count} violation(s); first: {first}")]
    Leakage { count: usize, first: String },
    #[error("expected a {expected} split, found {found}")]
    Split {
        expected: SplitLabel,
        found: SplitLabel,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("checkpoint hook failed: {0}")]
    Hook(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Timeline(#[from] TimelineError),
}

type Result<T> = std::result::Result<T, GrpoError>;

/// `rewards - mean(rewards)`.
pub fn compute_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(GrpoError::GroupTooSmall(rewards.len()));
    }
    if let Some(i) = rewards.iter().position(|r| !r.is_finite()) {
        return Err(GrpoError::NonFiniteReward(i));
    }
    let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
    Ok(rewards.iter().map(|r| r - mean).collect())
}

/// Mean-centred advantages divided by the group standard deviation.
/// A group with identical rewards gets all-zero advantages.
pub fn compute_normalized_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    let centred = compute_advantages(rewards)?;
    let std = (centred.iter().map(|a| a * a).sum::<f64>() / centred.len() as f64).sqrt();
    if std == 0.0 {
        return Ok(centred);
    }
    Ok(centred.iter().map(|a| a / std).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Group {
    pub event_id: String,
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

/// How groups are rolled out, independent of the parameters being trained.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutOptions {
    pub k: usize,
    pub featurizer: Featurizer,
    pub max_visible_docs: usize,
    pub confidence_threshold: f64,
    pub normalize_advantages: bool,
}

impl RolloutOptions {
    pub fn passthrough(feature_dim: usize, k: usize) -> Self {
        RolloutOptions {
            k,
            featurizer: Featurizer::passthrough(feature_dim),
            max_visible_docs: DEFAULT_MAX_VISIBLE_DOCS,
            confidence_threshold: 0.0,
            normalize_advantages: false,
        }
    }
}

/// Masks the event's corpus and featurizes the visible docs.
pub fn observe(
    event: &EventRecord,
    corpus: &[SourceDoc],
    opts: &RolloutOptions,
) -> Result<Observation> {
    let state = mask_state_with_limit(event, corpus, opts.max_visible_docs);
    Ok(Observation::from_state(&state, &opts.featurizer)?)
}

/// Samples `K` trajectories for an already-built observation.
///
/// Only the policy and the observation decide the trajectories; the
/// outcome is used afterwards, to score them.
pub fn sample_group(
    params: &PolicyParams,
    obs: &Observation,
    k: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    (0..k)
        .map(|i| {
            Ok(policy::sample_trajectory(
                params,
                obs,
                rng::derive_seed(seed, tags::TRAJECTORY, i as u64),
            )?)
        })
        .collect()
}

fn score_group(
    event: &EventRecord,
    trajectories: Vec<Trajectory>,
    normalize: bool,
) -> Result<Group> {
    let rewards: Vec<f64> = trajectories
        .iter()
        .map(|t| log_score(t.p, event.outcome))
        .collect();
    let advantages = if normalize {
        compute_normalized_advantages(&rewards)?
    } else {
        compute_advantages(&rewards)?
    };
    Ok(Group {
        event_id: event.event_id.clone(),
        trajectories,
        rewards,
        advantages,
    })
}

fn check_resolved(event: &EventRecord, threshold: f64) -> Result<()> {
    if event.resolver_confidence < threshold {
        return Err(GrpoError::Discarded {
            event_id: event.event_id.clone(),
            confidence: event.resolver_confidence,
            threshold,
        });
    }
    Ok(())
}

/// Masks the state, samples `K` trajectories and scores them against the outcome.
pub fn run_group(
    params: &PolicyParams,
    event: &EventRecord,
    corpus: &[SourceDoc],
    opts: &RolloutOptions,
    seed: u64,
) -> Result<(Group, Observation)> {
    check_resolved(event, opts.confidence_threshold)?;
    let obs = observe(event, corpus, opts)?;
    let trajectories = sample_group(params, &obs, opts.k, seed)?;
    Ok((
        score_group(event, trajectories, opts.normalize_advantages)?,
        obs,
    ))
}

fn check_pairs(params: &PolicyParams, groups: &[Group], states: &[Observation]) -> Result<()> {
    if groups.is_empty() {
        return Err(GrpoError::Shape("no groups".into()));
    }
    if groups.len() != states.len() {
        return Err(GrpoError::Shape(format!(
            "{} groups but {} states",
            groups.len(),
            states.len()
        )));
    }
    for (g, s) in groups.iter().zip(states) {
        if g.event_id != s.event_id {
            return Err(GrpoError::Shape(format!(
                "group {:?} paired with state {:?}",
                g.event_id, s.event_id
            )));
        }
        if g.trajectories.len() != g.advantages.len() {
            return Err(GrpoError::Shape(format!(
                "group {:?} has mismatched advantages",
                g.event_id
            )));
        }
    }
    params.check_shape()?;
    Ok(())
}

/// `(1/N) sum_groups sum_i A_i log pi(tau_i)`; its gradient is the update direction.
pub fn surrogate_objective(
    params: &PolicyParams,
    groups: &[Group],
    states: &[Observation],
) -> Result<f64> {
    check_pairs(params, groups, states)?;
    let mut total = 0.0;
    for (g, s) in groups.iter().zip(states) {
        for (t, a) in g.trajectories.iter().zip(&g.advantages) {
            total += a * policy::trajectory_log_prob(params, s, t)?;
        }
    }
    Ok(total / groups.len() as f64)
}

/// Gradient of [`surrogate_objective`].
///
/// Per-group contributions are computed in parallel and summed in
/// `event_id` order, so the result does not depend on the thread count.
pub fn update_direction(
    params: &PolicyParams,
    groups: &[Group],
    states: &[Observation],
) -> Result<PolicyParams> {
    check_pairs(params, groups, states)?;
    let mut parts: Vec<(usize, PolicyParams)> = groups
        .par_iter()
        .zip(states.par_iter())
        .enumerate()
        .map(|(slot, (g, s))| {
            let mut grad = params.zeros_like();
            for (t, &a) in g.trajectories.iter().zip(&g.advantages) {
                if a != 0.0 {
                    accumulate_log_prob_gradient(params, s, t, a, &mut grad)?;
                }
            }
            Ok((slot, grad))
        })
        .collect::<Result<_>>()?;
    parts.sort_by(|a, b| {
        groups[a.0]
            .event_id
            .cmp(&groups[b.0].event_id)
            .then(a.0.cmp(&b.0))
    });
    let mut direction = params.zeros_like();
    let scale = 1.0 / groups.len() as f64;
    for (_, g) in &parts {
        direction.axpy(scale, g);
    }
    if direction.flatten().iter().any(|x| !x.is_finite()) {
        return Err(GrpoError::NonFiniteGradient);
    }
    Ok(direction)
}

/// Returns `params + learning_rate * g`; the input is not modified.
pub fn policy_update(
    params: &PolicyParams,
    groups: &[Group],
    states: &[Observation],
    learning_rate: f64,
) -> Result<PolicyParams> {
    let direction = update_direction(params, groups, states)?;
    Ok(params.add_scaled(&direction, learning_rate)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Trajectories per event.
    pub k: usize,
    pub batch_events: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub seed: u64,
    /// Checkpoint interval in steps; 0 disables checkpoints.
    pub eval_every: usize,
    pub normalize_advantages: bool,
    pub confidence_threshold: f64,
    pub max_visible_docs: usize,
    pub bins: usize,
    pub selection_steps: usize,
    pub basis: EmissionBasis,
    pub featurizer_mode: FeaturizerMode,
    pub hash_salt: u64,
    /// Seed for the train-split evaluation at checkpoints.
    pub eval_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k: 4,
            batch_events: 32,
            learning_rate: 0.05,
            steps: 160,
            seed: 0,
            eval_every: 20,
            normalize_advantages: false,
            confidence_threshold: 0.8,
            max_visible_docs: DEFAULT_MAX_VISIBLE_DOCS,
            bins: policy::DEFAULT_BINS,
            selection_steps: policy::DEFAULT_SELECTION_STEPS,
            basis: EmissionBasis::default(),
            featurizer_mode: FeaturizerMode::NumericPassthrough,
            hash_salt: 0,
            eval_seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(GrpoError::Config(format!(
                "k = {} (need at least 2)",
                self.k
            )));
        }
        if self.batch_events == 0 {
            return Err(GrpoError::Config("batch_events must be at least 1".into()));
        }
        if !self.learning_rate.is_finite() {
            return Err(GrpoError::Config("learning_rate must be finite".into()));
        }
        if self.bins < 2 {
            return Err(GrpoError::Config("bins must be at least 2".into()));
        }
        if self.max_visible_docs == 0 {
            return Err(GrpoError::Config(
                "max_visible_docs must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn featurizer(&self, feature_dim: usize) -> Featurizer {
        Featurizer {
            mode: self.featurizer_mode,
            dim: feature_dim,
            salt: self.hash_salt,
        }
    }

    pub fn rollout_options(&self, feature_dim: usize) -> RolloutOptions {
        RolloutOptions {
            k: self.k,
            featurizer: self.featurizer(feature_dim),
            max_visible_docs: self.max_visible_docs,
            confidence_threshold: self.confidence_threshold,
            normalize_advantages: self.normalize_advantages,
        }
    }

    pub fn initial_params(&self, feature_dim: usize) -> PolicyParams {
        PolicyParams::zeros(feature_dim, self.bins, self.selection_steps, self.basis)
    }

    pub fn eval_options(&self, feature_dim: usize, mode: EvalMode, seed: u64) -> EvalOptions {
        EvalOptions {
            mode,
            seed,
            allow_train: false,
            featurizer: self.featurizer(feature_dim),
            max_visible_docs: self.max_visible_docs,
            report: ReportConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub mean_reward: f64,
    pub mean_abs_advantage: f64,
    pub grad_norm: f64,
    pub mean_p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub split: SplitLabel,
    pub report: MetricsReport,
}

/// Append-only training history.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

impl TrainLog {
    /// One JSON step record per line.
    pub fn steps_jsonl(&self) -> String {
        self.steps
            .iter()
            .map(|s| serde_json::to_string(s).expect("step record serializes") + "\n")
            .collect()
    }

    /// `step,split,log_score,brier,ece,ci_lo,ci_hi`; the interval is the Brier bootstrap CI.
    pub fn evals_csv(&self) -> String {
        let mut out = String::from("step,split,log_score,brier,ece,ci_lo,ci_hi\n");
        for e in &self.evals {
            let r = &e.report;
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                e.step,
                e.split,
                r.mean_log_score,
                r.mean_brier,
                r.ece,
                r.brier_ci.lo,
                r.brier_ci.hi
            ));
        }
        out
    }

    pub fn curve(&self, split: SplitLabel) -> Vec<&EvalRecord> {
        self.evals.iter().filter(|e| e.split == split).collect()
    }
}

/// Everything needed to resume training deterministically. The sampling
/// streams are pure functions of `(config.seed, step)`, so the next step
/// index is the whole RNG state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainCheckpoint {
    pub next_step: usize,
    pub rng_seed: u64,
    pub config: TrainConfig,
    pub params: PolicyParams,
    pub log: TrainLog,
}

/// Called at step 0 and every `eval_every` steps with the current parameters.
/// Returned records are appended to the log.
pub type CheckpointHook<'a> =
    dyn FnMut(&TrainCheckpoint) -> std::result::Result<Vec<EvalRecord>, String> + 'a;

struct EpochOrder {
    epoch: usize,
    order: Vec<usize>,
}

impl EpochOrder {
    fn index(&mut self, seed: u64, n: usize, position: usize) -> usize {
        let epoch = position / n;
        if epoch != self.epoch || self.order.is_empty() {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng::stream(rng::derive_seed(
                seed,
                tags::EPOCH_SHUFFLE,
                epoch as u64,
            )));
            *self = EpochOrder { epoch, order };
        }
        self.order[position % n]
    }
}

fn checked_train_set(config: &TrainConfig, dataset: &Dataset) -> Result<Dataset> {
    config.validate()?;
    if dataset.split_label != SplitLabel::Train {
        return Err(GrpoError::Split {
            expected: SplitLabel::Train,
            found: dataset.split_label,
        });
    }
    let report = validate_no_leakage(dataset)?;
    if let Some(first) = report.violations.first() {
        return Err(GrpoError::Leakage {
            count: report.violations.len(),
            first: first.to_string(),
        });
    }
    let mut data = dataset.clone();
    data.retain_confident(config.confidence_threshold);
    if data.is_empty() {
        return Err(GrpoError::Config(
            "no confidently resolved training events".into(),
        ));
    }
    Ok(data)
}

/// Trains from zero-initialised parameters.
pub fn train(config: &TrainConfig, dataset: &Dataset) -> Result<(PolicyParams, TrainLog)> {
    let out = train_with(config, dataset, None, &mut |_| Ok(Vec::new()))?;
    Ok((out.params, out.log))
}

/// Trains, optionally resuming from a checkpoint, invoking `hook` at checkpoints.
///
/// The loop validates the dataset for leakage before step 0 and only ever
/// sees the training split; held-out evaluation belongs to the hook's owner.
pub fn train_with(
    config: &TrainConfig,
    dataset: &Dataset,
    resume: Option<TrainCheckpoint>,
    hook: &mut CheckpointHook<'_>,
) -> Result<TrainCheckpoint> {
    let data = checked_train_set(config, dataset)?;
    let d = data.feature_dim;
    let opts = config.rollout_options(d);
    let observations: Vec<Observation> = data
        .records
        .par_iter()
        .map(|r| observe(&r.event, &r.docs, &opts))
        .collect::<Result<_>>()?;

    let mut state = match resume {
        Some(ck) => {
            if ck.rng_seed != config.seed || !ck.params.same_shape(&config.initial_params(d)) {
                return Err(GrpoError::Config(
                    "checkpoint does not match the training config".into(),
                ));
            }
            ck
        }
        None => TrainCheckpoint {
            next_step: 0,
            rng_seed: config.seed,
            config: config.clone(),
            params: config.initial_params(d),
            log: TrainLog::default(),
        },
    };
    state.config = config.clone();
    let n = data.len();
    let mut epochs = EpochOrder {
        epoch: 0,
        order: Vec::new(),
    };

    let mut checkpoint = |state: &mut TrainCheckpoint| -> Result<()> {
        if config.eval_every == 0 {
            return Ok(());
        }
        let train_eval = evaluate_observations(
            &state.params,
            &data,
            &observations,
            EvalMode::Single,
            config.eval_seed,
            &ReportConfig::default(),
        )?;
        state.log.evals.push(EvalRecord {
            step: state.next_step,
            split: SplitLabel::Train,
            report: train_eval.report,
        });
        let extra = hook(state).map_err(GrpoError::Hook)?;
        state.log.evals.extend(extra);
        Ok(())
    };

    if state.next_step == 0 && state.log.evals.is_empty() {
        checkpoint(&mut state)?;
    }
    while state.next_step < config.steps {
        let step = state.next_step;
        let slots: Vec<(usize, usize)> = (0..config.batch_events)
            .map(|j| {
                let position = step * config.batch_events + j;
                (position, epochs.index(config.seed, n, position))
            })
            .collect();
        let rollouts: Vec<(Group, usize)> = slots
            .par_iter()
            .map(|&(position, idx)| {
                let event = &data.records[idx].event;
                check_resolved(event, opts.confidence_threshold)?;
                let seed = rng::derive_seed(config.seed, tags::ROLLOUT, position as u64);
                let trajectories = sample_group(&state.params, &observations[idx], opts.k, seed)?;
                Ok((
                    score_group(event, trajectories, opts.normalize_advantages)?,
                    idx,
                ))
            })
            .collect::<Result<_>>()?;
        let (groups, states): (Vec<Group>, Vec<Observation>) = rollouts
            .into_iter()
            .map(|(g, idx)| (g, observations[idx].clone()))
            .unzip();
        let direction = update_direction(&state.params, &groups, &states)?;
        state.params = state.params.add_scaled(&direction, config.learning_rate)?;

        let total = (groups.len() * opts.k) as f64;
        state.log.steps.push(StepRecord {
            step,
            mean_reward: groups.iter().flat_map(|g| &g.rewards).sum::<f64>() / total,
            mean_abs_advantage: groups
                .iter()
                .flat_map(|g| &g.advantages)
                .map(|a| a.abs())
                .sum::<f64>()
                / total,
            grad_norm: direction.norm(),
            mean_p: groups
                .iter()
                .flat_map(|g| &g.trajectories)
                .map(|t| t.p.value())
                .sum::<f64>()
                / total,
        });
        state.next_step += 1;
        if config.eval_every > 0 && state.next_step % config.eval_every == 0 {
            checkpoint(&mut state)?;
        }
    }
    Ok(state)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    /// One sampled trajectory per event.
    Single,
    /// Median of seven independent trajectories per event.
    Ensemble7,
}

impl EvalMode {
    pub fn samples(self) -> usize {
        match self {
            EvalMode::Single => 1,
            EvalMode::Ensemble7 => 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub mode: EvalMode,
    pub seed: u64,
    /// Permit evaluating a train-split dataset.
    pub allow_train: bool,
    pub featurizer: Featurizer,
    pub max_visible_docs: usize,
    pub report: ReportConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub predictions: Vec<ScoredPrediction>,
}

fn evaluate_observations(
    params: &PolicyParams,
    dataset: &Dataset,
    observations: &[Observation],
    mode: EvalMode,
    seed: u64,
    report_config: &ReportConfig,
) -> Result<Evaluation> {
    let predictions: Vec<ScoredPrediction> = dataset
        .records
        .par_iter()
        .zip(observations.par_iter())
        .enumerate()
        .map(|(i, (record, obs))| {
            let samples = (0..mode.samples())
                .map(|k| {
                    let s = rng::derive_seed(seed, tags::EVAL, (i * 8 + k) as u64);
                    Ok(policy::sample_trajectory(params, obs, s)?.p)
                })
                .collect::<Result<Vec<_>>>()?;
            let p = median_ensemble(&samples)?;
            Ok(ScoredPrediction::new(
                record.event.event_id.clone(),
                p,
                record.event.outcome,
            ))
        })
        .collect::<Result<_>>()?;
    let report = scoring::report(&predictions, report_config)?;
    Ok(Evaluation {
        report,
        predictions,
    })
}

/// Scores the policy on a held-out split.
pub fn evaluate(
    params: &PolicyParams,
    dataset: &Dataset,
    opts: &EvalOptions,
) -> Result<Evaluation> {
    if dataset.split_label != SplitLabel::Test && !opts.allow_train {
        return Err(GrpoError::Split {
            expected: SplitLabel::Test,
            found: dataset.split_label,
        });
    }
    params.check_shape()?;
    if params.feature_dim != opts.featurizer.dim {
        return Err(GrpoError::Shape(format!(
            "policy expects {} features, featurizer produces {}",
            params.feature_dim, opts.featurizer.dim
        )));
    }
    let ropts = RolloutOptions {
        k: 1,
        featurizer: opts.featurizer.clone(),
        max_visible_docs: opts.max_visible_docs,
        confidence_threshold: 0.0,
        normalize_advantages: false,
    };
    let observations: Vec<Observation> = dataset
        .records
        .par_iter()
        .map(|r| observe(&r.event, &r.docs, &ropts))
        .collect::<Result<_>>()?;
    evaluate_observations(
        params,
        dataset,
        &observations,
        opts.mode,
        opts.seed,
        &opts.report,
    )
}

/// Fraction of successive pairs in `values` that do not increase.
pub fn non_increasing_fraction(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 1.0;
    }
    let ok = values
        .windows(2)
        .filter(|w| w[1].partial_cmp(&w[0]) != Some(Ordering::Greater))
        .count();
    ok as f64 / (values.len() - 1) as f64
}

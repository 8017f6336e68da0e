use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use foresight_core::grpo::{
    evaluate, non_increasing_fraction, train_with, EvalMode, EvalRecord, GrpoError, TrainCheckpoint,
};
use foresight_core::policy::{load_params, save_params, PolicyParams};
use foresight_core::scoring::MetricsReport;
use foresight_core::synthworld::{
    generate_world, read_ground_truth, write_ground_truth, SynthError, WorldConfig,
};
use foresight_core::timeline::{
    read_dataset, validate_no_leakage, write_dataset, Dataset, SplitLabel, TimelineError,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ModeSelection, RunConfig};

#[derive(Debug, Error)]
pub enum Failure {
    /// Leakage, split or other validation failure.
    #[error("{0}")]
    Domain(String),
    /// Malformed input, bad configuration or I/O.
    #[error("{0}")]
    Structural(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Domain(_) => 1,
            Failure::Structural(_) => 2,
        }
    }
}

impl From<GrpoError> for Failure {
    fn from(e: GrpoError) -> Self {
        match e {
            GrpoError::Leakage { .. } | GrpoError::Split { .. } | GrpoError::Discarded { .. } => {
                Failure::Domain(e.to_string())
            }
            other => Failure::Structural(other.to_string()),
        }
    }
}

fn structural(context: impl std::fmt::Display) -> impl FnOnce(std::io::Error) -> Failure {
    move |e| Failure::Structural(format!("{context}: {e}"))
}

impl From<TimelineError> for Failure {
    fn from(e: TimelineError) -> Self {
        Failure::Structural(e.to_string())
    }
}

impl From<SynthError> for Failure {
    fn from(e: SynthError) -> Self {
        Failure::Structural(e.to_string())
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(structural(path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).expect("value serializes") + "\n";
    write_text(path, &text)
}

fn ensure_dir(path: &Path) -> Result<(), Failure> {
    fs::create_dir_all(path).map_err(structural(path.display()))
}

/// Wall-clock facts live in their own file so content files stay byte-identical.
#[derive(Serialize)]
struct RunMeta {
    command: &'static str,
    started_unix_secs: u64,
    elapsed_secs: f64,
    threads: usize,
}

fn write_meta(
    out: &Path,
    command: &'static str,
    started: SystemTime,
    clock: Instant,
) -> Result<(), Failure> {
    let meta = RunMeta {
        command,
        started_unix_secs: started
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        elapsed_secs: clock.elapsed().as_secs_f64(),
        threads: rayon::current_num_threads(),
    };
    write_json(&out.join(format!("{command}_meta.json")), &meta)
}

fn load_clean(path: &Path) -> Result<Dataset, Failure> {
    let dataset = read_dataset(path)?;
    let report = validate_no_leakage(&dataset)?;
    if let Some(first) = report.violations.first() {
        return Err(Failure::Domain(format!(
            "{}: {} leakage violation(s); first: {first}",
            path.display(),
            report.violations.len()
        )));
    }
    Ok(dataset)
}

fn required<'a>(path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path, Failure> {
    path.as_deref()
        .ok_or_else(|| Failure::Structural(format!("missing {what}")))
}

#[derive(Serialize)]
struct WorldSummary<'a> {
    world: &'a WorldConfig,
    train_fraction: f64,
    split_boundary: i64,
    train_events: usize,
    test_events: usize,
    discarded_events: usize,
}

pub fn generate(cfg: &RunConfig) -> Result<(), Failure> {
    let (started, clock) = (SystemTime::now(), Instant::now());
    let world_config = cfg.world_config();
    let world = generate_world(&world_config)?;
    let (train_set, test_set) = world.split(cfg.train_fraction)?;
    for split in [&train_set, &test_set] {
        let report = validate_no_leakage(split)?;
        if !report.is_clean() {
            return Err(Failure::Domain(format!(
                "generated {} split is not clean",
                split.split_label
            )));
        }
    }
    ensure_dir(&cfg.out)?;
    write_dataset(&train_set, cfg.out.join("train.jsonl"))?;
    write_dataset(&test_set, cfg.out.join("test.jsonl"))?;
    write_ground_truth(&world.ground_truth, cfg.out.join("ground_truth.jsonl"))?;
    world
        .hidden
        .write_jsonl(cfg.out.join("hidden_corpus.jsonl"))?;
    write_json(
        &cfg.out.join("world.json"),
        &WorldSummary {
            world: &world_config,
            train_fraction: cfg.train_fraction,
            split_boundary: train_set.split_boundary.0,
            train_events: train_set.len(),
            test_events: test_set.len(),
            discarded_events: world.discarded,
        },
    )?;
    write_meta(&cfg.out, "generate", started, clock)?;
    println!(
        "generated {} events ({} discarded by the resolver): train {}, test {}, split boundary {}",
        world_config.n_events,
        world.discarded,
        train_set.len(),
        test_set.len(),
        train_set.split_boundary.0
    );
    Ok(())
}

pub fn validate(path: &Path) -> Result<(), Failure> {
    let dataset = read_dataset(path)?;
    let report = validate_no_leakage(&dataset)?;
    if report.is_clean() {
        println!("ok: {} records, no leakage violations", dataset.len());
        return Ok(());
    }
    for v in &report.violations {
        println!("violation {v}");
    }
    Err(Failure::Domain(format!(
        "{} leakage violation(s)",
        report.violations.len()
    )))
}

fn checkpoint_paths(dir: &Path, step: usize) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("step{step}.json")),
        dir.join(format!("step{step}.state.json")),
    )
}

fn save_checkpoint(dir: &Path, state: &TrainCheckpoint) -> Result<(), Failure> {
    let (policy_path, state_path) = checkpoint_paths(dir, state.next_step);
    save_params(&state.params, &policy_path).map_err(|e| Failure::Structural(e.to_string()))?;
    write_json(&state_path, state)
}

pub fn train(cfg: &RunConfig, resume: Option<&Path>) -> Result<(), Failure> {
    let (started, clock) = (SystemTime::now(), Instant::now());
    let train_config = cfg.train_config();
    let train_set = read_dataset(required(&cfg.train_data, "--data (training split)")?)?;
    let test_set = match &cfg.test_data {
        Some(p) => Some(load_clean(p)?),
        None => None,
    };
    let resume_state: Option<TrainCheckpoint> = match resume {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(structural(p.display()))?;
            Some(
                serde_json::from_str(&text)
                    .map_err(|e| Failure::Structural(format!("{}: {e}", p.display())))?,
            )
        }
        None => None,
    };

    let ckpt_dir = cfg.out.join("checkpoints");
    ensure_dir(&ckpt_dir)?;
    let d = train_set.feature_dim;
    let mut hook = |ck: &TrainCheckpoint| -> Result<Vec<EvalRecord>, String> {
        let mut extra = Vec::new();
        if let Some(test) = &test_set {
            let opts = ck
                .config
                .eval_options(d, EvalMode::Single, ck.config.eval_seed);
            let ev = evaluate(&ck.params, test, &opts).map_err(|e| e.to_string())?;
            extra.push(EvalRecord {
                step: ck.next_step,
                split: SplitLabel::Test,
                report: ev.report,
            });
        }
        // the saved state already holds this checkpoint's records so a resume
        // reproduces the uninterrupted log
        let mut saved = ck.clone();
        saved.log.evals.extend(extra.iter().cloned());
        save_checkpoint(&ckpt_dir, &saved).map_err(|e| e.to_string())?;
        Ok(extra)
    };
    let final_state = train_with(&train_config, &train_set, resume_state, &mut hook)?;
    let (policy_path, _) = checkpoint_paths(&ckpt_dir, final_state.next_step);
    if !policy_path.exists() {
        save_checkpoint(&ckpt_dir, &final_state)?;
    }

    write_text(
        &cfg.out.join("train_log.jsonl"),
        &final_state.log.steps_jsonl(),
    )?;
    write_text(&cfg.out.join("evals.csv"), &final_state.log.evals_csv())?;
    write_json(&cfg.out.join("train_config.json"), &train_config)?;
    write_meta(&cfg.out, "train", started, clock)?;

    println!(
        "trained {} steps; checkpoint {}",
        final_state.next_step,
        policy_path.display()
    );
    for split in [SplitLabel::Train, SplitLabel::Test] {
        if let Some(last) = final_state.log.curve(split).last() {
            println!(
                "  {split} at step {}: brier {:.4}, ece {:.4}, log score {:.4}",
                last.step, last.report.mean_brier, last.report.ece, last.report.mean_log_score
            );
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PredictionRow {
    event_id: String,
    p: f64,
    y: u8,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EvalEntry {
    model: String,
    mode: EvalMode,
    report: MetricsReport,
}

fn mode_name(mode: EvalMode) -> &'static str {
    match mode {
        EvalMode::Single => "single",
        EvalMode::Ensemble7 => "ensemble7",
    }
}

fn modes(selection: ModeSelection) -> Vec<EvalMode> {
    match selection {
        ModeSelection::Single => vec![EvalMode::Single],
        ModeSelection::Ensemble7 => vec![EvalMode::Ensemble7],
        ModeSelection::Both => vec![EvalMode::Single, EvalMode::Ensemble7],
    }
}

fn metrics_table(entries: &[EvalEntry]) -> String {
    let mut md = String::from("| Model | Mode | N | Log score | Brier | ECE | Brier 95% CI |\n|---|---|---|---|---|---|---|\n");
    for e in entries {
        let r = &e.report;
        md.push_str(&format!(
            "| {} | {} | {} | {:.4} | {:.4} | {:.4} | [{:.4}, {:.4}] |\n",
            e.model,
            mode_name(e.mode),
            r.n,
            r.mean_log_score,
            r.mean_brier,
            r.ece,
            r.brier_ci.lo,
            r.brier_ci.hi
        ));
    }
    md
}

pub fn eval(cfg: &RunConfig, baseline_untrained: bool, allow_train: bool) -> Result<(), Failure> {
    let (started, clock) = (SystemTime::now(), Instant::now());
    let dataset = load_clean(required(&cfg.test_data, "--data (dataset to score)")?)?;
    if dataset.split_label == SplitLabel::Train && !allow_train {
        return Err(Failure::Domain(
            "refusing to score a train split without --allow-train".into(),
        ));
    }
    let d = dataset.feature_dim;
    let train_config = cfg.train_config();
    let mut models: Vec<(&str, PolicyParams)> = Vec::new();
    if baseline_untrained {
        models.push(("untrained", train_config.initial_params(d)));
    }
    if let Some(path) = &cfg.checkpoint {
        if !path.exists() {
            return Err(Failure::Structural(format!(
                "checkpoint {} not found",
                path.display()
            )));
        }
        let params = load_params(path)
            .map_err(|e| Failure::Structural(format!("{}: {e}", path.display())))?;
        models.push(("trained", params));
    }
    if models.is_empty() {
        return Err(Failure::Structural(
            "nothing to evaluate: pass --checkpoint and/or --baseline-untrained".into(),
        ));
    }

    ensure_dir(&cfg.out)?;
    let mut entries = Vec::new();
    for (model, params) in &models {
        for mode in modes(cfg.mode) {
            let mut opts = train_config.eval_options(d, mode, cfg.seed);
            opts.allow_train = allow_train;
            let ev = evaluate(params, &dataset, &opts)?;
            let stem = format!("eval_{model}_{}", mode_name(mode));
            write_json(&cfg.out.join(format!("{stem}.json")), &ev.report)?;
            write_text(
                &cfg.out.join(format!("{stem}_bins.csv")),
                &ev.report.bin_table_csv(),
            )?;
            let rows: String = ev
                .predictions
                .iter()
                .map(|s| {
                    let row = PredictionRow {
                        event_id: s.event_id.clone(),
                        p: s.p.value(),
                        y: s.y,
                    };
                    serde_json::to_string(&row).expect("row serializes") + "\n"
                })
                .collect();
            write_text(&cfg.out.join(format!("{stem}_predictions.jsonl")), &rows)?;
            entries.push(EvalEntry {
                model: model.to_string(),
                mode,
                report: ev.report,
            });
        }
    }
    let mut csv = String::from("model,mode,n,log_score,brier,ece,brier_ci_lo,brier_ci_hi\n");
    for e in &entries {
        let r = &e.report;
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            e.model,
            mode_name(e.mode),
            r.n,
            r.mean_log_score,
            r.mean_brier,
            r.ece,
            r.brier_ci.lo,
            r.brier_ci.hi
        ));
    }
    write_text(&cfg.out.join("eval_table.csv"), &csv)?;
    write_text(&cfg.out.join("eval_table.md"), &metrics_table(&entries))?;
    write_json(&cfg.out.join("eval_summary.json"), &entries)?;
    write_meta(&cfg.out, "eval", started, clock)?;
    print!("{}", metrics_table(&entries));
    Ok(())
}

#[derive(Debug, Serialize)]
struct ModelComparison {
    mode: EvalMode,
    brier_ratio: f64,
    ece_ratio: f64,
}

#[derive(Debug, Serialize)]
struct OracleRow {
    model: String,
    mode: EvalMode,
    /// Mean of `q(1 - q) + (p - q)^2`: expected Brier given the true probabilities.
    expected_brier: f64,
    gap_to_bayes: f64,
}

#[derive(Debug, Serialize)]
struct CurveSummary {
    checkpoints: usize,
    brier_non_increasing: f64,
    ece_non_increasing: f64,
}

#[derive(Debug, Serialize)]
struct Report {
    entries: Vec<EvalEntry>,
    trained_vs_untrained: Vec<ModelComparison>,
    bayes_brier: Option<f64>,
    oracle: Vec<OracleRow>,
    test_curve: Option<CurveSummary>,
}

fn read_predictions(path: &Path) -> Result<Vec<PredictionRow>, Failure> {
    let text = fs::read_to_string(path).map_err(structural(path.display()))?;
    text.lines()
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Failure::Structural(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

fn test_curve(train_dir: &Path) -> Result<CurveSummary, Failure> {
    let path = train_dir.join("evals.csv");
    let text = fs::read_to_string(&path).map_err(structural(path.display()))?;
    let mut brier = Vec::new();
    let mut ece = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        let bad = || Failure::Structural(format!("{}:{}: malformed row", path.display(), i + 1));
        if cols.len() != 7 {
            return Err(bad());
        }
        if cols[1] == "test" {
            brier.push(cols[3].parse::<f64>().map_err(|_| bad())?);
            ece.push(cols[4].parse::<f64>().map_err(|_| bad())?);
        }
    }
    Ok(CurveSummary {
        checkpoints: brier.len(),
        brier_non_increasing: non_increasing_fraction(&brier),
        ece_non_increasing: non_increasing_fraction(&ece),
    })
}

pub fn report(cfg: &RunConfig, eval_dir: &Path, train_dir: Option<&Path>) -> Result<(), Failure> {
    let (started, clock) = (SystemTime::now(), Instant::now());
    let summary_path = eval_dir.join("eval_summary.json");
    let text = fs::read_to_string(&summary_path).map_err(structural(summary_path.display()))?;
    let entries: Vec<EvalEntry> = serde_json::from_str(&text)
        .map_err(|e| Failure::Structural(format!("{}: {e}", summary_path.display())))?;

    let find =
        |model: &str, mode: EvalMode| entries.iter().find(|e| e.model == model && e.mode == mode);
    let trained_vs_untrained = [EvalMode::Single, EvalMode::Ensemble7]
        .into_iter()
        .filter_map(|mode| {
            let (t, u) = (find("trained", mode)?, find("untrained", mode)?);
            Some(ModelComparison {
                mode,
                brier_ratio: t.report.mean_brier / u.report.mean_brier,
                ece_ratio: t.report.ece / u.report.ece,
            })
        })
        .collect();

    let mut bayes_brier = None;
    let mut oracle = Vec::new();
    if let Some(truth_path) = &cfg.truth {
        let truth: HashMap<String, f64> = read_ground_truth(truth_path)?
            .into_iter()
            .map(|g| (g.event_id, g.true_probability))
            .collect();
        for e in &entries {
            let rows = read_predictions(&eval_dir.join(format!(
                "eval_{}_{}_predictions.jsonl",
                e.model,
                mode_name(e.mode)
            )))?;
            let mut bayes = 0.0;
            let mut expected = 0.0;
            for r in &rows {
                let q = *truth.get(&r.event_id).ok_or_else(|| {
                    Failure::Structural(format!("no ground truth for {}", r.event_id))
                })?;
                bayes += q * (1.0 - q);
                expected += q * (1.0 - q) + (r.p - q).powi(2);
            }
            let n = rows.len() as f64;
            bayes_brier = Some(bayes / n);
            oracle.push(OracleRow {
                model: e.model.clone(),
                mode: e.mode,
                expected_brier: expected / n,
                gap_to_bayes: (expected - bayes) / n,
            });
        }
    }
    let test_curve = train_dir.map(test_curve).transpose()?;

    let report = Report {
        entries,
        trained_vs_untrained,
        bayes_brier,
        oracle,
        test_curve,
    };
    let mut md = metrics_table(&report.entries);
    for c in &report.trained_vs_untrained {
        md.push_str(&format!(
            "\nTrained / untrained ({}): Brier {:.3}, ECE {:.3}\n",
            mode_name(c.mode),
            c.brier_ratio,
            c.ece_ratio
        ));
    }
    if let Some(b) = report.bayes_brier {
        md.push_str(&format!("\nBayes Brier: {b:.4}\n"));
        for o in &report.oracle {
            md.push_str(&format!(
                "Expected Brier, {} {}: {:.4} (gap {:.4})\n",
                o.model,
                mode_name(o.mode),
                o.expected_brier,
                o.gap_to_bayes
            ));
        }
    }
    if let Some(c) = &report.test_curve {
        md.push_str(&format!(
            "\nTest curve over {} checkpoints: Brier non-increasing {:.0}% of pairs, ECE {:.0}%\n",
            c.checkpoints,
            100.0 * c.brier_non_increasing,
            100.0 * c.ece_non_increasing
        ));
    }
    ensure_dir(&cfg.out)?;
    write_text(&cfg.out.join("report.md"), &md)?;
    write_json(&cfg.out.join("report.json"), &report)?;
    write_meta(&cfg.out, "report", started, clock)?;
    print!("{md}");
    Ok(())
}

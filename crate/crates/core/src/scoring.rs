//! Proper scoring rules, calibration error, ensembling and bootstrap intervals.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::timeline::Outcome;

pub const PROB_MIN: f64 = 0.001;
pub const PROB_MAX: f64 = 0.999;
pub const ECE_BINS: usize = 10;
pub const DEFAULT_RESAMPLES: usize = 1000;
pub const DEFAULT_LEVEL: f64 = 0.95;
pub const DEFAULT_BOOTSTRAP_SEED: u64 = 20_250_201;

#[derive(Debug, Error, PartialEq)]
pub enum ScoringError {
    #[error("probability must be finite, got {0}")]
    NonFinite(f64),
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("invalid bootstrap parameters: {0}")]
    Bootstrap(String),
}

/// A forecast probability, always inside `[PROB_MIN, PROB_MAX]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Probability(f64);

impl Probability {
    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Probability {
    type Error = ScoringError;

    fn try_from(raw: f64) -> Result<Self, Self::Error> {
        clamp_probability(raw)
    }
}

impl From<Probability> for f64 {
    fn from(p: Probability) -> f64 {
        p.0
    }
}

pub fn clamp_probability(raw: f64) -> Result<Probability, ScoringError> {
    if !raw.is_finite() {
        return Err(ScoringError::NonFinite(raw));
    }
    Ok(Probability(raw.clamp(PROB_MIN, PROB_MAX)))
}

/// `y ln p + (1 - y) ln(1 - p)`, natural log. This is the training reward.
pub fn log_score(p: Probability, y: Outcome) -> f64 {
    match y {
        Outcome::Yes => p.0.ln(),
        Outcome::No => (1.0 - p.0).ln(),
    }
}

pub fn brier(p: Probability, y: Outcome) -> f64 {
    let d = p.0 - y.as_f64();
    d * d
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPrediction {
    pub event_id: String,
    pub p: Probability,
    pub y: u8,
    pub log_score: f64,
    pub brier: f64,
}

impl ScoredPrediction {
    pub fn new(event_id: impl Into<String>, p: Probability, y: Outcome) -> Self {
        ScoredPrediction {
            event_id: event_id.into(),
            p,
            y: y.bit(),
            log_score: log_score(p, y),
            brier: brier(p, y),
        }
    }

    pub fn outcome(&self) -> Outcome {
        Outcome::from_bit(self.y).expect("scored outcome is a bit")
    }
}

/// One row of the reliability table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinRow {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean_p: Option<f64>,
    pub frequency: Option<f64>,
}

impl BinRow {
    pub fn gap(&self) -> Option<f64> {
        Some((self.mean_p? - self.frequency?).abs())
    }
}

fn bin_edge(k: usize) -> f64 {
    k as f64 / ECE_BINS as f64
}

/// Bins are `[0, 0.1), [0.1, 0.2), ..., [0.9, 1.0]`.
pub fn bin_index(p: f64) -> usize {
    (1..ECE_BINS).take_while(|&k| p >= bin_edge(k)).count()
}

fn bin_table(predictions: &[(Probability, Outcome)]) -> Vec<BinRow> {
    let mut count = [0usize; ECE_BINS];
    let mut sum_p = [0.0f64; ECE_BINS];
    let mut sum_y = [0.0f64; ECE_BINS];
    for &(p, y) in predictions {
        let b = bin_index(p.0);
        count[b] += 1;
        sum_p[b] += p.0;
        sum_y[b] += y.as_f64();
    }
    (0..ECE_BINS)
        .map(|b| {
            let n = count[b] as f64;
            BinRow {
                lo: bin_edge(b),
                hi: bin_edge(b + 1),
                count: count[b],
                mean_p: (count[b] > 0).then(|| sum_p[b] / n),
                frequency: (count[b] > 0).then(|| sum_y[b] / n),
            }
        })
        .collect()
}

fn ece_from_table(rows: &[BinRow], n: usize) -> f64 {
    rows.iter()
        .filter_map(|r| r.gap().map(|g| r.count as f64 / n as f64 * g))
        .sum()
}

/// Count-weighted expected calibration error over 10 equal-width bins.
pub fn ece(predictions: &[(Probability, Outcome)]) -> Result<(f64, Vec<BinRow>), ScoringError> {
    if predictions.is_empty() {
        return Err(ScoringError::Empty("ece"));
    }
    let rows = bin_table(predictions);
    Ok((ece_from_table(&rows, predictions.len()), rows))
}

/// Maximum calibration gap over non-empty bins.
pub fn mce(predictions: &[(Probability, Outcome)]) -> Result<f64, ScoringError> {
    let (_, rows) = ece(predictions)?;
    Ok(rows.iter().filter_map(BinRow::gap).fold(0.0, f64::max))
}

/// Median for odd counts, mean of the two central order statistics for even counts.
pub fn median_ensemble(samples: &[Probability]) -> Result<Probability, ScoringError> {
    if samples.is_empty() {
        return Err(ScoringError::Empty("median_ensemble"));
    }
    let mut v: Vec<f64> = samples.iter().map(|p| p.0).collect();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    let m = if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    };
    clamp_probability(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

/// Linear-interpolated quantile of sorted data.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Percentile bootstrap of an arbitrary statistic over `items`.
pub fn bootstrap_statistic<T: Clone>(
    items: &[T],
    statistic: impl Fn(&[T]) -> f64,
    resamples: usize,
    level: f64,
    seed: u64,
) -> Result<Interval, ScoringError> {
    if items.is_empty() {
        return Err(ScoringError::Empty("bootstrap"));
    }
    if resamples == 0 {
        return Err(ScoringError::Bootstrap("resamples must be positive".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(ScoringError::Bootstrap(format!(
            "level {level} outside (0, 1)"
        )));
    }
    let mut rng = rng::stream(rng::derive_seed(
        seed,
        rng::tags::BOOTSTRAP,
        items.len() as u64,
    ));
    let mut buf = items.to_vec();
    let mut stats: Vec<f64> = (0..resamples)
        .map(|_| {
            for slot in buf.iter_mut() {
                *slot = items[rng.gen_range(0..items.len())].clone();
            }
            statistic(&buf)
        })
        .collect();
    stats.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Ok(Interval {
        lo: quantile_sorted(&stats, tail),
        hi: quantile_sorted(&stats, 1.0 - tail),
    })
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Percentile bootstrap interval for the mean of `values`.
pub fn bootstrap_ci(
    values: &[f64],
    resamples: usize,
    level: f64,
    seed: u64,
) -> Result<(f64, f64), ScoringError> {
    let iv = bootstrap_statistic(values, mean, resamples, level, seed)?;
    Ok((iv.lo, iv.hi))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub resamples: usize,
    pub level: f64,
    pub seed: u64,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig {
            resamples: DEFAULT_RESAMPLES,
            level: DEFAULT_LEVEL,
            seed: DEFAULT_BOOTSTRAP_SEED,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub mean_log_score: f64,
    pub mean_brier: f64,
    pub ece: f64,
    pub mce: f64,
    pub log_score_ci: Interval,
    pub brier_ci: Interval,
    pub ece_ci: Interval,
    pub bins: Vec<BinRow>,
}

impl MetricsReport {
    /// Reliability table as CSV, one row per bin.
    pub fn bin_table_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,count,mean_p,frequency\n");
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.bins {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.lo,
                r.hi,
                r.count,
                opt(r.mean_p),
                opt(r.frequency)
            );
        }
        out
    }
}

fn widen_to(iv: Interval, point: f64) -> Interval {
    Interval {
        lo: iv.lo.min(point),
        hi: iv.hi.max(point),
    }
}

/// Aggregates log score, Brier and ECE with bootstrap intervals.
///
/// Resampled ECE is biased upward, so its percentile interval can sit above
/// the point estimate; all reported intervals are widened to contain the point.
pub fn report(
    predictions: &[ScoredPrediction],
    config: &ReportConfig,
) -> Result<MetricsReport, ScoringError> {
    if predictions.is_empty() {
        return Err(ScoringError::Empty("report"));
    }
    let pairs: Vec<(Probability, Outcome)> =
        predictions.iter().map(|s| (s.p, s.outcome())).collect();
    let logs: Vec<f64> = predictions.iter().map(|s| s.log_score).collect();
    let briers: Vec<f64> = predictions.iter().map(|s| s.brier).collect();
    let (ece_value, bins) = ece(&pairs)?;
    let mce_value = bins.iter().filter_map(BinRow::gap).fold(0.0, f64::max);

    let mean_log_score = mean(&logs);
    let mean_brier = mean(&briers);
    let seed = |k: u64| rng::derive_seed(config.seed, rng::tags::BOOTSTRAP, k);
    let log_score_ci = bootstrap_statistic(&logs, mean, config.resamples, config.level, seed(0))?;
    let brier_ci = bootstrap_statistic(&briers, mean, config.resamples, config.level, seed(1))?;
    let ece_ci = bootstrap_statistic(
        &pairs,
        |s| ece_from_table(&bin_table(s), s.len()),
        config.resamples,
        config.level,
        seed(2),
    )?;
    Ok(MetricsReport {
        n: predictions.len(),
        mean_log_score,
        mean_brier,
        ece: ece_value,
        mce: mce_value,
        log_score_ci: widen_to(log_score_ci, mean_log_score),
        brier_ci: widen_to(brier_ci, mean_brier),
        ece_ci: widen_to(ece_ci, ece_value),
        bins,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(x: f64) -> Probability {
        clamp_probability(x).unwrap()
    }

    const Y: Outcome = Outcome::Yes;
    const N: Outcome = Outcome::No;

    #[test]
    fn log_score_values() {
        assert!((log_score(p(0.5), Y) - -std::f64::consts::LN_2).abs() < 1e-15);
        assert!((log_score(p(0.999), Y) - (-0.001_000_500_333_583_5)).abs() < 1e-15);
        assert!((log_score(p(0.001), Y) - (-6.907_755_278_982_137)).abs() < 1e-12);
        assert_eq!(log_score(p(0.3), N), 0.7f64.ln());
    }

    #[test]
    fn brier_values() {
        assert!((brier(p(0.7), Y) - 0.09).abs() < 1e-15);
        assert_eq!(brier(p(0.5), N), 0.25);
        assert!((brier(p(0.999), N) - 0.998001).abs() < 1e-15);
    }

    #[test]
    fn clamp_bounds() {
        assert_eq!(clamp_probability(1.0).unwrap().value(), 0.999);
        assert_eq!(clamp_probability(0.5).unwrap().value(), 0.5);
        assert_eq!(clamp_probability(-3.0).unwrap().value(), 0.001);
        assert!(clamp_probability(f64::NAN).is_err());
        assert!(clamp_probability(f64::INFINITY).is_err());
    }

    #[test]
    fn ece_all_confident_and_right() {
        let preds = vec![(p(0.999), Y); 20];
        let (e, rows) = ece(&preds).unwrap();
        assert!((e - 0.001).abs() < 1e-12);
        assert_eq!(rows[9].count, 20);
    }

    #[test]
    fn ece_hand_worked_four_points() {
        let preds = [(p(0.05), N), (p(0.05), N), (p(0.95), Y), (p(0.95), N)];
        let (e, rows) = ece(&preds).unwrap();
        assert!((e - 0.25).abs() < 1e-15, "{e}");
        assert_eq!(rows[0].count, 2);
        assert_eq!(rows[9].count, 2);
        assert_eq!(rows.iter().map(|r| r.count).sum::<usize>(), 4);
    }

    #[test]
    fn ece_empty_is_error() {
        assert_eq!(ece(&[]).unwrap_err(), ScoringError::Empty("ece"));
    }

    #[test]
    fn bin_edges() {
        assert_eq!(bin_index(0.001), 0);
        assert_eq!(bin_index(0.1), 1);
        assert_eq!(bin_index(0.0999), 0);
        assert_eq!(bin_index(0.9), 9);
        assert_eq!(bin_index(0.999), 9);
        assert_eq!(bin_index(1.0), 9);
    }

    #[test]
    fn mce_is_max_gap() {
        let preds = [(p(0.05), N), (p(0.05), N), (p(0.95), Y), (p(0.95), N)];
        assert!((mce(&preds).unwrap() - 0.45).abs() < 1e-12);
    }

    #[test]
    fn median_examples() {
        let seven: Vec<_> = [0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8].map(p).to_vec();
        assert_eq!(median_ensemble(&seven).unwrap().value(), 0.5);
        assert_eq!(median_ensemble(&[p(0.9)]).unwrap().value(), 0.9);
        assert!(
            (median_ensemble(&[0.2, 0.4, 0.6, 0.8].map(p))
                .unwrap()
                .value()
                - 0.5)
                .abs()
                < 1e-15
        );
        assert!(median_ensemble(&[]).is_err());
    }

    #[test]
    fn bootstrap_constant_sequence() {
        let (lo, hi) = bootstrap_ci(&[0.3; 50], 1000, 0.95, 1).unwrap();
        assert!((lo - 0.3).abs() < 1e-12 && (hi - 0.3).abs() < 1e-12);
        assert!(lo <= hi);
    }

    #[test]
    fn bootstrap_contains_mean_for_default_seed() {
        let vals: Vec<f64> = (0..200).map(|i| ((i * 37) % 101) as f64 / 101.0).collect();
        let (lo, hi) = bootstrap_ci(
            &vals,
            DEFAULT_RESAMPLES,
            DEFAULT_LEVEL,
            DEFAULT_BOOTSTRAP_SEED,
        )
        .unwrap();
        let m = mean(&vals);
        assert!(lo <= m && m <= hi, "{lo} {m} {hi}");
    }

    #[test]
    fn bootstrap_is_reproducible() {
        let vals: Vec<f64> = (0..100).map(|i| (i as f64).sin()).collect();
        assert_eq!(
            bootstrap_ci(&vals, 500, 0.9, 3).unwrap(),
            bootstrap_ci(&vals, 500, 0.9, 3).unwrap()
        );
    }

    #[test]
    fn bootstrap_width_scales_inverse_sqrt_n() {
        let balanced = |n: usize| -> Vec<f64> { (0..n).map(|i| (i % 2) as f64).collect() };
        let (lo1, hi1) = bootstrap_ci(&balanced(250), 2000, 0.95, 11).unwrap();
        let (lo4, hi4) = bootstrap_ci(&balanced(1000), 2000, 0.95, 11).unwrap();
        let ratio = (hi4 - lo4) / (hi1 - lo1);
        assert!((0.4..=0.6).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn bootstrap_rejects_bad_input() {
        assert!(bootstrap_ci(&[], 100, 0.95, 0).is_err());
        assert!(bootstrap_ci(&[1.0], 0, 0.95, 0).is_err());
        assert!(bootstrap_ci(&[1.0], 10, 1.5, 0).is_err());
    }

    #[test]
    fn report_perfect_forecaster() {
        let preds: Vec<_> = (0..100)
            .map(|i| {
                let y = if i % 3 == 0 { Y } else { N };
                ScoredPrediction::new(format!("e{i}"), p(y.as_f64()), y)
            })
            .collect();
        let r = report(&preds, &ReportConfig::default()).unwrap();
        assert!((r.mean_brier - 0.000_001).abs() < 1e-12);
        assert!((r.ece - 0.001).abs() < 1e-12);
        assert_eq!(r.bins.iter().map(|b| b.count).sum::<usize>(), 100);
    }

    #[test]
    fn report_constant_half_on_balanced_outcomes() {
        let preds: Vec<_> = (0..200)
            .map(|i| ScoredPrediction::new(format!("e{i}"), p(0.5), if i % 2 == 0 { Y } else { N }))
            .collect();
        let r = report(&preds, &ReportConfig::default()).unwrap();
        assert!((r.mean_log_score + std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(r.mean_brier, 0.25);
        assert!(r.ece.abs() < 1e-12);
        for (iv, x) in [
            (r.log_score_ci, r.mean_log_score),
            (r.brier_ci, r.mean_brier),
            (r.ece_ci, r.ece),
        ] {
            assert!(iv.contains(x));
        }
    }

    #[test]
    fn bin_table_csv_has_header_and_ten_rows() {
        let preds = vec![ScoredPrediction::new("a", p(0.42), Y)];
        let csv = report(&preds, &ReportConfig::default())
            .unwrap()
            .bin_table_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines.len(), 11);
        assert_eq!(lines[5], "0.4,0.5,1,0.42,1");
        assert_eq!(lines[1], "0,0.1,0,,");
    }

    fn argbest(q: f64, score: impl Fn(f64, f64) -> f64) -> f64 {
        (1..100)
            .map(|k| k as f64 / 100.0)
            .max_by(|&a, &b| score(q, a).total_cmp(&score(q, b)))
            .unwrap()
    }

    #[test]
    fn log_score_is_strictly_proper_on_grid() {
        for k in 1..=19 {
            let q = k as f64 * 0.05;
            let best = argbest(q, |q, x| {
                q * log_score(p(x), Y) + (1.0 - q) * log_score(p(x), N)
            });
            assert!((best - q).abs() <= 0.01 + 1e-12, "q={q} best={best}");
        }
    }

    #[test]
    fn brier_is_strictly_proper_on_grid() {
        for k in 1..=19 {
            let q = k as f64 * 0.05;
            let best = argbest(q, |q, x| -(q * brier(p(x), Y) + (1.0 - q) * brier(p(x), N)));
            assert!((best - q).abs() <= 0.01 + 1e-12, "q={q} best={best}");
        }
    }

    proptest! {
        #[test]
        fn score_ranges(x in -1.0f64..2.0, bit in 0u8..2) {
            let y = Outcome::from_bit(bit).unwrap();
            let pr = p(x);
            prop_assert!(pr.value() >= PROB_MIN && pr.value() <= PROB_MAX);
            let ls = log_score(pr, y);
            prop_assert!(ls <= 0.0 && ls >= PROB_MIN.ln() - 1e-15);
            let b = brier(pr, y);
            prop_assert!((0.0..1.0).contains(&b));
        }

        #[test]
        fn ece_in_unit_interval(xs in proptest::collection::vec((0.0f64..1.0, 0u8..2), 1..60)) {
            let preds: Vec<_> = xs.iter().map(|&(x, b)| (p(x), Outcome::from_bit(b).unwrap())).collect();
            let (e, rows) = ece(&preds).unwrap();
            prop_assert!((0.0..=1.0).contains(&e));
            prop_assert_eq!(rows.iter().map(|r| r.count).sum::<usize>(), preds.len());
        }

        #[test]
        fn median_is_permutation_invariant(mut xs in proptest::collection::vec(0.0f64..1.0, 1..15), rot in 0usize..15) {
            let before = median_ensemble(&xs.iter().map(|&x| p(x)).collect::<Vec<_>>()).unwrap();
            let len = xs.len();
            xs.rotate_left(rot % len);
            xs.reverse();
            let after = median_ensemble(&xs.iter().map(|&x| p(x)).collect::<Vec<_>>()).unwrap();
            prop_assert_eq!(before, after);
        }
    }

    #[test]
    fn ece_zero_when_single_bin_matches_base_rate() {
        // four outcomes, one positive: base rate 0.25, all predictions in bin [0.2, 0.3)
        let preds = [(p(0.25), Y), (p(0.25), N), (p(0.25), N), (p(0.25), N)];
        assert_eq!(ece(&preds).unwrap().0, 0.0);
    }
}

use foresight_core::rng;
use foresight_core::scoring::{
    clamp_probability, ece, report, Probability, ReportConfig, ScoredPrediction,
};
use foresight_core::timeline::Outcome;
use rand::Rng;

/// Independent ECE: scan each of the ten intervals and collect its members.
fn brute_force_ece(pairs: &[(f64, u8)]) -> f64 {
    let n = pairs.len() as f64;
    let mut total = 0.0;
    for k in 0..10 {
        let lo = k as f64 / 10.0;
        let hi = (k + 1) as f64 / 10.0;
        let members: Vec<&(f64, u8)> = pairs
            .iter()
            .filter(|(p, _)| *p >= lo && (*p < hi || (k == 9 && *p <= hi)))
            .collect();
        if members.is_empty() {
            continue;
        }
        let m = members.len() as f64;
        let mean_p = members.iter().map(|(p, _)| p).sum::<f64>() / m;
        let freq = members.iter().map(|(_, y)| f64::from(*y)).sum::<f64>() / m;
        total += m / n * (mean_p - freq).abs();
    }
    total
}

fn typed(pairs: &[(f64, u8)]) -> Vec<(Probability, Outcome)> {
    pairs
        .iter()
        .map(|&(p, y)| (clamp_probability(p).unwrap(), Outcome::from_bit(y).unwrap()))
        .collect()
}

#[test]
fn ece_matches_brute_force_on_1000_random_pairs() {
    let mut rng = rng::stream(1000);
    for _ in 0..20 {
        let mut pairs: Vec<(f64, u8)> = (0..1000)
            .map(|_| (rng.gen_range(0.001..=0.999), rng.gen_range(0..2u8)))
            .collect();
        // plant exact edge values so the half-open convention is exercised
        for (i, k) in (1..10).enumerate() {
            pairs[i].0 = k as f64 / 10.0;
        }
        let (module, _) = ece(&typed(&pairs)).unwrap();
        let oracle = brute_force_ece(&pairs);
        assert!((module - oracle).abs() < 1e-12, "{module} vs {oracle}");
    }
}

/// In decimal the answer is 0.25; the double nearest 0.95 sits just below it,
/// so the correctly rounded result is one ulp under 0.25.
#[test]
fn hand_worked_four_point_example() {
    let pairs = [(0.05, 0), (0.05, 0), (0.95, 1), (0.95, 0)];
    let (value, rows) = ece(&typed(&pairs)).unwrap();
    assert!((value - 0.25).abs() <= 0.25 * f64::EPSILON, "{value}");
    assert_eq!(value, brute_force_ece(&pairs));
    assert_eq!((rows[0].count, rows[9].count), (2, 2));
}

#[test]
fn report_means_match_direct_formulas() {
    let mut rng = rng::stream(3);
    let preds: Vec<ScoredPrediction> = (0..400)
        .map(|i| {
            let p = clamp_probability(rng.gen_range(0.0..1.0)).unwrap();
            ScoredPrediction::new(
                format!("e{i}"),
                p,
                Outcome::from_bit(rng.gen_range(0..2)).unwrap(),
            )
        })
        .collect();
    let r = report(&preds, &ReportConfig::default()).unwrap();
    let n = preds.len() as f64;
    let log: f64 = preds
        .iter()
        .map(|s| {
            let (p, y) = (s.p.value(), f64::from(s.y));
            y * p.ln() + (1.0 - y) * (1.0 - p).ln()
        })
        .sum::<f64>()
        / n;
    let brier: f64 = preds
        .iter()
        .map(|s| (s.p.value() - f64::from(s.y)).powi(2))
        .sum::<f64>()
        / n;
    assert!((r.mean_log_score - log).abs() < 1e-12);
    assert!((r.mean_brier - brier).abs() < 1e-12);
    let pairs: Vec<(f64, u8)> = preds.iter().map(|s| (s.p.value(), s.y)).collect();
    assert!((r.ece - brute_force_ece(&pairs)).abs() < 1e-12);
    assert!(r.brier_ci.contains(r.mean_brier) && r.log_score_ci.contains(r.mean_log_score));
    assert!(r.ece_ci.contains(r.ece));
}

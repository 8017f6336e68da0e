use foresight_core::grpo::{
    compute_advantages, policy_update, run_group, sample_group, surrogate_objective,
    update_direction, Group, RolloutOptions,
};
use foresight_core::policy::{sample_trajectory, EmissionBasis, Observation, PolicyParams};
use foresight_core::rng;
use foresight_core::scoring::log_score;
use foresight_core::synthworld::{generate_world, WorldConfig};
use foresight_core::timeline::{DomainTag, EventRecord, Outcome, Timestamp};
use rand::Rng;

fn random_params<R: Rng>(rng: &mut R, d: usize) -> PolicyParams {
    let zero = PolicyParams::zeros(d, 101, 2, EmissionBasis::LogitQuadratic);
    let flat: Vec<f64> = (0..zero.num_params())
        .map(|_| rng.gen_range(-0.4..0.4))
        .collect();
    let mut p = zero.unflatten_like(&flat).unwrap();
    p.emission[2 * d + 1] = 1.0;
    p
}

fn random_obs<R: Rng>(rng: &mut R, id: &str, docs: usize, d: usize) -> Observation {
    Observation {
        event_id: id.into(),
        doc_ids: (0..docs).map(|i| format!("{id}-d{i}")).collect(),
        features: (0..docs)
            .map(|_| (0..d).map(|_| rng.gen_range(-1.5..1.5)).collect())
            .collect(),
    }
}

fn random_group<R: Rng>(rng: &mut R, params: &PolicyParams, obs: &Observation) -> Group {
    let trajectories = sample_group(params, obs, 4, rng.gen()).unwrap();
    let y = Outcome::from_bit(rng.gen_range(0..2)).unwrap();
    let rewards: Vec<f64> = trajectories.iter().map(|t| log_score(t.p, y)).collect();
    Group {
        event_id: obs.event_id.clone(),
        advantages: compute_advantages(&rewards).unwrap(),
        trajectories,
        rewards,
    }
}

fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-2))
        .fold(0.0, f64::max)
}

#[test]
fn update_direction_matches_finite_differences_of_surrogate() {
    let mut rng = rng::stream(2718);
    let d = 3;
    let params = random_params(&mut rng, d);
    let states: Vec<Observation> = (0..5)
        .map(|i| random_obs(&mut rng, &format!("e{i}"), 1 + i, d))
        .collect();
    let groups: Vec<Group> = states
        .iter()
        .map(|s| random_group(&mut rng, &params, s))
        .collect();

    let check = |groups: &[Group], states: &[Observation]| {
        let analytic = update_direction(&params, groups, states).unwrap().flatten();
        let base = params.flatten();
        let h = 1e-5;
        let numeric: Vec<f64> = (0..base.len())
            .map(|i| {
                let (mut plus, mut minus) = (base.clone(), base.clone());
                plus[i] += h;
                minus[i] -= h;
                let jp =
                    surrogate_objective(&params.unflatten_like(&plus).unwrap(), groups, states)
                        .unwrap();
                let jm =
                    surrogate_objective(&params.unflatten_like(&minus).unwrap(), groups, states)
                        .unwrap();
                (jp - jm) / (2.0 * h)
            })
            .collect();
        max_relative_error(&analytic, &numeric)
    };

    for i in 0..5 {
        let err = check(&groups[i..=i], &states[i..=i]);
        assert!(err < 1e-4, "group {i}: relative error {err}");
    }
    let err = check(&groups, &states);
    assert!(err < 1e-4, "all groups: relative error {err}");
}

#[test]
fn advantages_center_on_10000_random_groups() {
    let mut rng = rng::stream(10_000);
    for _ in 0..10_000 {
        let k = rng.gen_range(2..9);
        let rewards: Vec<f64> = (0..k).map(|_| rng.gen_range(-6.9..0.0)).collect();
        let a = compute_advantages(&rewards).unwrap();
        assert!(a.iter().sum::<f64>().abs() < 1e-12);
    }
}

/// Rewards and shifts on a 2^-20 grid keep every sum and difference exact,
/// so the shifted advantages must match bit for bit.
#[test]
fn constant_shift_leaves_advantages_bit_identical_on_10000_groups() {
    let mut rng = rng::stream(10_001);
    let grid = |rng: &mut rng::StreamRng, lo: i64, hi: i64| {
        rng.gen_range(lo..hi) as f64 / (1u64 << 20) as f64
    };
    for _ in 0..10_000 {
        let rewards: Vec<f64> = (0..4).map(|_| grid(&mut rng, -7 << 20, 0)).collect();
        let c = grid(&mut rng, -8 << 20, 8 << 20);
        let shifted: Vec<f64> = rewards.iter().map(|r| r + c).collect();
        let a = compute_advantages(&rewards).unwrap();
        let b = compute_advantages(&shifted).unwrap();
        assert_eq!(
            a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }
}

#[test]
fn constant_shift_moves_advantages_by_rounding_only_for_arbitrary_reals() {
    let mut rng = rng::stream(10_002);
    for _ in 0..10_000 {
        let rewards: Vec<f64> = (0..4).map(|_| rng.gen_range(-6.9..0.0)).collect();
        let c: f64 = rng.gen_range(-8.0..8.0);
        let shifted: Vec<f64> = rewards.iter().map(|r| r + c).collect();
        let a = compute_advantages(&rewards).unwrap();
        let b = compute_advantages(&shifted).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn shifted_rewards_give_the_same_update_direction() {
    let mut rng = rng::stream(5);
    let params = random_params(&mut rng, 3);
    let states: Vec<Observation> = (0..3)
        .map(|i| random_obs(&mut rng, &format!("e{i}"), 3, 3))
        .collect();
    let groups: Vec<Group> = states
        .iter()
        .map(|s| {
            let mut g = random_group(&mut rng, &params, s);
            g.rewards = (0..4)
                .map(|_| -(rng.gen_range(0..1 << 20) as f64) / 65536.0)
                .collect();
            g.advantages = compute_advantages(&g.rewards).unwrap();
            g
        })
        .collect();
    let shifted: Vec<Group> = groups
        .iter()
        .map(|g| {
            let rewards: Vec<f64> = g.rewards.iter().map(|r| r + 3.25).collect();
            Group {
                advantages: compute_advantages(&rewards).unwrap(),
                rewards,
                ..g.clone()
            }
        })
        .collect();
    assert_eq!(
        update_direction(&params, &groups, &states).unwrap(),
        update_direction(&params, &shifted, &states).unwrap()
    );
}

#[test]
fn zero_learning_rate_and_zero_advantages_are_identities() {
    let mut rng = rng::stream(6);
    let params = random_params(&mut rng, 3);
    let states: Vec<Observation> = (0..3)
        .map(|i| random_obs(&mut rng, &format!("e{i}"), 2, 3))
        .collect();
    let groups: Vec<Group> = states
        .iter()
        .map(|s| random_group(&mut rng, &params, s))
        .collect();
    assert_eq!(
        policy_update(&params, &groups, &states, 0.0).unwrap(),
        params
    );

    let flat: Vec<Group> = groups
        .iter()
        .map(|g| Group {
            rewards: vec![-0.5; 4],
            advantages: vec![0.0; 4],
            ..g.clone()
        })
        .collect();
    assert_eq!(
        policy_update(&params, &flat, &states, 0.05).unwrap(),
        params
    );
}

fn lone_event(outcome: Outcome) -> EventRecord {
    EventRecord {
        event_id: "solo".into(),
        question: "Will it happen?".into(),
        cutoff: Timestamp(1_000),
        resolution_deadline: Timestamp(100_000),
        domain_tag: DomainTag::Other,
        outcome,
        resolution_time: Timestamp(5_000),
        resolver_confidence: 1.0,
    }
}

#[test]
fn micro_world_drives_p_towards_the_top_bin() {
    let bins = 5;
    let event = lone_event(Outcome::Yes);
    // brute force: the expected reward of a point mass on each bin peaks at the top bin
    let best = (0..bins)
        .max_by(|&a, &b| {
            let ra = log_score(
                foresight_core::policy::bin_probability(a, bins),
                Outcome::Yes,
            );
            let rb = log_score(
                foresight_core::policy::bin_probability(b, bins),
                Outcome::Yes,
            );
            ra.total_cmp(&rb)
        })
        .unwrap();
    assert_eq!(best, bins - 1);

    let mut params = PolicyParams::zeros(2, bins, 2, EmissionBasis::LogitQuadratic);
    let opts = RolloutOptions::passthrough(2, 4);
    for step in 0..200 {
        let (group, obs) = run_group(&params, &event, &[], &opts, step).unwrap();
        params = policy_update(&params, &[group], &[obs], 0.05).unwrap();
    }
    let obs = Observation {
        event_id: "solo".into(),
        doc_ids: Vec::new(),
        features: Vec::new(),
    };
    let mean_p: f64 = (0..2000)
        .map(|s| {
            sample_trajectory(&params, &obs, 1_000_000 + s)
                .unwrap()
                .p
                .value()
        })
        .sum::<f64>()
        / 2000.0;
    assert!(mean_p > 0.9, "mean p {mean_p}");
}

#[test]
fn poisoned_outcomes_change_no_trajectory() {
    let world = generate_world(&WorldConfig::with_seed(77, 60, 4)).unwrap();
    let params = {
        let mut rng = rng::stream(1);
        random_params(&mut rng, 4)
    };
    let opts = RolloutOptions::passthrough(4, 4);
    for (i, r) in world.records.iter().enumerate() {
        let mut poisoned = r.event.clone();
        poisoned.outcome = poisoned.outcome.flipped();
        poisoned.resolution_time = poisoned.resolution_deadline;
        let (clean, clean_obs) = run_group(&params, &r.event, &r.docs, &opts, i as u64).unwrap();
        let (dirty, dirty_obs) = run_group(&params, &poisoned, &r.docs, &opts, i as u64).unwrap();
        assert_eq!(clean.trajectories, dirty.trajectories);
        assert_eq!(clean_obs, dirty_obs);
        let expected: Vec<f64> = dirty
            .trajectories
            .iter()
            .map(|t| log_score(t.p, poisoned.outcome))
            .collect();
        assert_eq!(dirty.rewards, expected);
    }
}

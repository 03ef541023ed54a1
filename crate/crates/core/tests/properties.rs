//! Property tests for the invariants of spaces, tuners, sessions and the
//! master policy.

use std::collections::{BTreeMap, BTreeSet};

use chopt::events::{replay, EventBody, ExitCause};
use chopt::ids::{SessionId, TrialId};
use chopt::master::{apportion, rebalance, rebalance_target, ClusterConfig, ClusterState};
use chopt::orchestrator::{Session, SessionDemand};
use chopt::simcluster::WorkloadSpec;
use chopt::space::{
    log_uniform_from_unit, parse_config, Assignment, CheckpointStep, ChoptConfig, Condition,
    HyperparamSpace, Order, ParamSpec, Parameters, PbtConfig, Termination, TuneConfig, Value,
};
use chopt::tuners::{median_rule, pbt_decision, pbt_quantile_size, rank, CheckpointView, Decision};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn hierarchical_space() -> HyperparamSpace {
    HyperparamSpace::new(
        vec![
            ParamSpec::categorical("optimizer", ["sgd", "adam"]),
            ParamSpec::float_uniform("momentum", 0.5, 0.99, Some((0.0, 1.0))),
            ParamSpec::float_log_uniform("beta", 0.9, 0.999, Some((0.5, 0.9999))),
            ParamSpec::int_uniform("layers", 1, 8, Some((1, 16))),
            ParamSpec::float_log_uniform("lr", 1e-4, 1e-1, Some((1e-5, 1.0))),
        ],
        vec![
            Condition::new("momentum", "optimizer", ["sgd"]),
            Condition::new("beta", "optimizer", ["adam"]),
        ],
        vec![],
        BTreeMap::new(),
    )
    .unwrap()
}

fn population() -> impl Strategy<Value = Vec<(TrialId, f64)>> {
    prop::collection::vec(-1.0e3f64..1.0e3, 1..40).prop_map(|ms| {
        ms.into_iter()
            .enumerate()
            .map(|(i, m)| (TrialId(i as u32 + 1), m))
            .collect()
    })
}

fn order() -> impl Strategy<Value = Order> {
    prop_oneof![Just(Order::Descending), Just(Order::Ascending)]
}

fn small_session(seed: u64, step: CheckpointStep, stop_ratio: f64, max: u64) -> Session {
    let space = HyperparamSpace::flat(vec![ParamSpec::categorical(
        "depth",
        [20i64, 92, 110, 122, 134, 140],
    )])
    .unwrap();
    let config = ChoptConfig {
        space,
        measure: "test/accuracy".into(),
        order: Order::Descending,
        step,
        population: 4,
        tune: TuneConfig::RandomSearch,
        termination: Termination {
            max_session_number: Some(max),
            ..Default::default()
        },
        stop_ratio,
        seed: Some(seed),
        workload: Some(WorkloadSpec::deep_bias(40, 0.01, seed)),
    };
    Session::new(SessionId(1), config).unwrap()
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Tick,
    Shrink(u32),
    Grow(u32),
}

fn ops() -> impl Strategy<Value = Vec<Op>> {
    prop::collection::vec(
        prop_oneof![
            6 => Just(Op::Tick),
            1 => (1u32..6).prop_map(Op::Shrink),
            1 => (1u32..6).prop_map(Op::Grow),
        ],
        1..120,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sampled_assignments_satisfy_the_space(seed in any::<u64>()) {
        let space = hierarchical_space();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..20 {
            let a = space.sample(&mut rng);
            prop_assert_eq!(space.check_assignment(&a), Ok(()));
            let sgd = a.get("optimizer") == Some(&Value::from("sgd"));
            prop_assert_eq!(a.contains("momentum"), sgd);
            prop_assert_eq!(a.contains("beta"), !sgd);
            for p in space.params() {
                if let Some(v) = a.get(&p.name) {
                    prop_assert!(p.admits(v));
                    if let (Parameters::Range { lo, hi }, Some(x)) = (&p.parameters, v.as_f64()) {
                        prop_assert!(*lo <= x && x <= *hi, "{} = {} outside [{}, {}]", p.name, x, lo, hi);
                    }
                }
            }
        }
    }

    #[test]
    fn log_uniform_splits_at_the_geometric_mean(
        lo in 1e-6f64..1.0,
        ratio in 1.5f64..1e4,
        u in 0.0f64..1.0,
    ) {
        let hi = lo * ratio;
        let x = log_uniform_from_unit(lo, hi, u);
        let mid = (lo * hi).sqrt();
        let tol = 1e-9 * hi;
        prop_assert!(x >= lo - tol && x <= hi + tol);
        if u < 0.5 {
            prop_assert!(x <= mid + tol);
        } else {
            prop_assert!(x >= mid - tol);
        }
    }

    #[test]
    fn perturbation_stays_within_p_range(seed in any::<u64>(), factor in 0.1f64..10.0) {
        let space = hierarchical_space();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = space.sample(&mut rng);
        for p in space.params() {
            if let Some(v) = a.get(&p.name) {
                let moved = p.perturb_value(v, factor);
                prop_assert!(p.admits(&moved), "{} -> {:?}", p.name, moved);
            }
        }
        let perturbed = space.perturb(&a, &mut rng, &PbtConfig::default().perturb);
        prop_assert_eq!(space.check_assignment(&perturbed), Ok(()));
    }

    #[test]
    fn narrowed_space_samples_inside_the_new_range(
        seed in any::<u64>(),
        a in 1u32..100,
        b in 1u32..100,
    ) {
        prop_assume!(a != b);
        let (lo, hi) = (1e-4 * f64::from(a.min(b)) * 10.0, 1e-4 * f64::from(a.max(b)) * 10.0);
        let space = hierarchical_space();
        let narrowed = space
            .narrow(&BTreeMap::from([("lr".to_string(), Parameters::Range { lo, hi })]))
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..20 {
            let x = narrowed.sample(&mut rng).numeric("lr").unwrap();
            prop_assert!(lo <= x && x <= hi * (1.0 + 1e-12));
        }
    }

    #[test]
    fn config_documents_round_trip(
        step in prop_oneof![Just(CheckpointStep::Disabled), (1u32..50).prop_map(CheckpointStep::Every)],
        population in 1u32..64,
        order in order(),
        max in 1u64..10_000,
        time in prop::option::of(1u64..10_000),
        threshold in prop::option::of(-10.0f64..10.0),
        stop_ratio in 0.0f64..=1.0,
        seed in prop::option::of(any::<u32>()),
        tuner in 0u8..3,
    ) {
        prop_assume!(tuner != 2 || step != CheckpointStep::Disabled);
        let tune = match tuner {
            0 => TuneConfig::RandomSearch,
            1 => TuneConfig::Pbt(PbtConfig::default()),
            _ => TuneConfig::Hyperband(chopt::space::HyperbandConfig { resource_limit: 27, eta: 3 }),
        };
        let config = ChoptConfig {
            space: hierarchical_space(),
            measure: "valid/loss".into(),
            order,
            step,
            population,
            tune,
            termination: Termination { time, max_session_number: Some(max), performance_threshold: threshold },
            stop_ratio,
            seed: seed.map(u64::from),
            workload: None,
        };
        let again = parse_config(config.to_pretty_string().as_bytes()).unwrap();
        prop_assert_eq!(again, config);
    }

    #[test]
    fn ranking_is_dual_under_order_inversion(pop in population()) {
        let desc: Vec<TrialId> = rank(&pop, Order::Descending).into_iter().map(|p| p.0).collect();
        let negated: Vec<(TrialId, f64)> = pop.iter().map(|&(id, m)| (id, -m)).collect();
        let asc: Vec<TrialId> = rank(&negated, Order::Ascending).into_iter().map(|p| p.0).collect();
        prop_assert_eq!(desc, asc);
    }

    #[test]
    fn median_rule_never_stops_the_best_trial(pop in population(), order in order()) {
        let (best, metric) = rank(&pop, order)[0];
        let view = CheckpointView { trial: best, step_index: 1, metric, population_metrics: &pop, order };
        prop_assert_eq!(median_rule(&view).unwrap(), Decision::Continue);
    }

    #[test]
    fn median_rule_matches_direct_comparison(pop in population(), order in order(), pick in any::<prop::sample::Index>()) {
        let (trial, metric) = pop[pick.index(pop.len())];
        let mut sorted: Vec<f64> = pop.iter().map(|p| p.1).collect();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let med = if n % 2 == 1 { sorted[n / 2] } else { (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0 };
        let worse = match order { Order::Descending => metric < med, Order::Ascending => metric > med };
        let view = CheckpointView { trial, step_index: 1, metric, population_metrics: &pop, order };
        let want = if worse { Decision::Stop } else { Decision::Continue };
        prop_assert_eq!(median_rule(&view).unwrap(), want);
    }

    #[test]
    fn pbt_sources_come_from_the_top_group(pop in population(), order in order(), seed in any::<u64>()) {
        let space = HyperparamSpace::flat(vec![ParamSpec::float_uniform("lr", 0.0, 1.0, Some((0.0, 1.0)))]).unwrap();
        let assignments: BTreeMap<TrialId, Assignment> = pop
            .iter()
            .map(|&(id, _)| (id, [("lr".to_string(), Value::Float(0.5))].into_iter().collect()))
            .collect();
        let lookup = |id: TrialId| assignments.get(&id);
        let config = PbtConfig::default();
        let ranked = rank(&pop, order);
        let q = pbt_quantile_size(config.quantile, pop.len());
        prop_assert!(q <= pop.len() / 2);
        let top: BTreeSet<TrialId> = ranked[..q].iter().map(|p| p.0).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (pos, &(trial, metric)) in ranked.iter().enumerate() {
            let view = CheckpointView { trial, step_index: 1, metric, population_metrics: &pop, order };
            match pbt_decision(&view, &config, &space, &lookup, &mut rng).unwrap() {
                Decision::ExploitExplore { source, .. } => {
                    prop_assert!(pos >= pop.len() - q);
                    prop_assert!(top.contains(&source));
                }
                Decision::Continue => prop_assert!(pos < pop.len() - q),
                Decision::Stop => prop_assert!(false, "PBT never stops"),
            }
        }
    }

    #[test]
    fn apportion_respects_total_and_limits(
        total in 0u32..500,
        entries in prop::collection::vec((0u64..50, 0u32..100), 1..12),
    ) {
        let weights: Vec<u64> = entries.iter().map(|e| e.0).collect();
        let limits: Vec<u32> = entries.iter().map(|e| e.1).collect();
        let out = apportion(total, &weights, &limits);
        let absorbable: u32 = entries.iter().filter(|e| e.0 > 0).map(|e| e.1).sum();
        prop_assert_eq!(out.iter().sum::<u32>(), total.min(absorbable));
        for ((o, l), w) in out.iter().zip(&limits).zip(&weights) {
            prop_assert!(o <= l);
            if *w == 0 {
                prop_assert_eq!(*o, 0);
            }
        }
    }

    #[test]
    fn rebalance_keeps_within_capacity_and_caps(
        capacity in 10u32..400,
        demand_frac in 0.0f64..1.0,
        sessions in prop::collection::vec((0u32..60, prop::option::of(0u32..80)), 1..8),
    ) {
        let mut cluster = ClusterState::new(&ClusterConfig::new(capacity));
        let demand = (f64::from(capacity) * demand_frac) as u32;
        let demands: Vec<SessionDemand> = sessions
            .iter()
            .enumerate()
            .map(|(i, &(grant, cap))| SessionDemand {
                id: SessionId(i as u32 + 1),
                grant: cap.map_or(grant, |c| grant.min(c)),
                cap,
            })
            .collect();
        cluster.grants = demands.iter().map(|d| (d.id, d.grant)).collect();
        let plan = rebalance(&cluster, demand, &demands, &BTreeSet::new());
        let mut after: BTreeMap<SessionId, u32> = cluster.grants.clone();
        for (id, cmd) in &plan.commands {
            let g = after.get_mut(id).unwrap();
            match *cmd {
                chopt::master::Command::Grow(n) => *g += n,
                chopt::master::Command::Shrink(n) => *g -= n,
            }
        }
        let total: u32 = after.values().sum();
        let floor: u32 = demands.iter().map(|d| d.cap.map_or(1, |c| c.min(1))).sum();
        prop_assert_eq!(total, plan.target);
        prop_assert!(total <= capacity.max(floor));
        if floor <= capacity.saturating_sub(demand + cluster.headroom) {
            prop_assert!(total + demand + cluster.headroom <= capacity);
        }
        for d in &demands {
            if let Some(cap) = d.cap {
                prop_assert!(after[&d.id] <= cap.max(d.grant));
            }
        }
    }

    #[test]
    fn rebalance_target_is_monotone_in_demand(
        capacity in 10u32..400,
        d1 in 0u32..400,
        d2 in 0u32..400,
        n in 1usize..6,
    ) {
        let cluster = ClusterState::new(&ClusterConfig::new(capacity));
        let demands: Vec<SessionDemand> = (0..n)
            .map(|i| SessionDemand { id: SessionId(i as u32 + 1), grant: 1, cap: None })
            .collect();
        let (lo, hi) = (d1.min(d2), d1.max(d2));
        prop_assert!(rebalance_target(&cluster, hi, &demands) <= rebalance_target(&cluster, lo, &demands));
    }

    #[test]
    fn disabled_step_never_stops_trials(seed in any::<u64>(), grant in 1u32..8) {
        let mut s = small_session(seed, CheckpointStep::Disabled, 0.5, 12);
        let log = s.run_with_grant(grant, 10_000).unwrap();
        let tuner_exits = log
            .iter()
            .filter(|e| matches!(e.body, EventBody::TrialExited { cause: ExitCause::Tuner, .. }))
            .count();
        prop_assert_eq!(tuner_exits, 0);
    }

    #[test]
    fn logs_replay_to_a_partition_with_live_within_grant(
        seed in any::<u64>(),
        stop_ratio in prop_oneof![Just(0.0), Just(0.5), Just(1.0)],
        ops in ops(),
    ) {
        let mut s = small_session(seed, CheckpointStep::Every(3), stop_ratio, 30);
        let mut log = s.start(0);
        log.extend(s.grow(3, 0));
        let mut now = 0;
        for op in ops {
            now += 1;
            let events = match op {
                Op::Tick => s.tick(now).unwrap(),
                Op::Shrink(n) => s.shrink(n, now),
                Op::Grow(n) => {
                    let stopped_before = s.stop_pool().len();
                    let events = s.grow(n, now);
                    let created = events.iter().filter(|e| matches!(e.body, EventBody::TrialCreated { .. })).count();
                    let revived = events.iter().filter(|e| matches!(e.body, EventBody::TrialRevived { .. })).count();
                    if created > 0 {
                        prop_assert_eq!(revived, stopped_before, "fresh trials created while the stop pool was non-empty");
                    }
                    events
                }
            };
            log.extend(events);
            prop_assert!(s.live().len() as u32 <= s.grant());
        }
        let observed = replay(SessionId(1), &log).unwrap();
        prop_assert_eq!(&observed, &s.observed());
        let pools = observed.pools();
        let mut all: Vec<TrialId> = pools
            .live
            .iter()
            .chain(&pools.stop_pool)
            .chain(&pools.dead_pool)
            .chain(&pools.finished)
            .copied()
            .collect();
        let n = all.len();
        all.sort();
        all.dedup();
        prop_assert_eq!(all.len(), n);
        prop_assert_eq!(n as u64, observed.trials_created);
        prop_assert!(observed.live_count() as u32 <= observed.grant);
    }
}

mod common;

use std::collections::BTreeMap;

use beliefplan::config::RunConfig;
use beliefplan::learner::*;
use beliefplan::model::Model;
use beliefplan::nn::{Graph, ParameterStore, StepSchedule, Tensor};
use beliefplan::runner::{run_episode, BeliefStep, EpisodeRun, PolicySettings};
use beliefplan::simulator::{Scenario, ScenarioKind};
use common::{param_grad_error, scenario, toy_config, FD_TOLERANCE};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn transition(z: Vec<f64>, option: usize, reward: f64, z_next: Vec<f64>, done: bool) -> Transition {
    Transition { z, option, reward, z_next, done }
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn values(store: &ParameterStore) -> Vec<Vec<f64>> {
    store.ids().map(|id| store.value(id).data().to_vec()).collect()
}

#[test]
fn repeated_transition_reaches_the_bellman_fixed_point() {
    let mut cfg = toy_config();
    cfg.online.target_sync = 10;
    let model = Model::new(&cfg, 3).unwrap();
    let mut pair = QNetworkPair::new(&cfg, &model, 11, StepSchedule::constant(1e-2)).unwrap();
    let z = vec![0.3, -0.2, 0.5, 0.1, -0.4, 0.2, 0.0, 0.6];
    let tr = transition(z.clone(), 4, 1.0, z.clone(), false);
    for _ in 0..30_000 {
        pair.update(&[&tr]).unwrap();
    }
    let q = pair.q1_values(&z).unwrap()[4];
    let fixed = 1.0 / (1.0 - cfg.online.gamma_q);
    assert!((q - fixed).abs() / fixed < 0.05, "Q = {q}");
}

#[test]
fn done_transition_targets_the_reward() {
    let cfg = toy_config();
    let model = Model::new(&cfg, 0).unwrap();
    let pair = QNetworkPair::new(&cfg, &model, 1, StepSchedule::constant(1e-3)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let trs: Vec<Transition> = (0..5)
        .map(|i| transition(random_vec(&mut rng, 8), i, -3.25 + i as f64, random_vec(&mut rng, 8), true))
        .collect();
    let refs: Vec<&Transition> = trs.iter().collect();
    let y = pair.targets(&refs).unwrap();
    for (t, y) in trs.iter().zip(y) {
        assert_eq!(y, t.reward);
    }
}

/// Clipped double-Q target computed from the two target networks directly.
fn target_oracle(pair: &QNetworkPair, tr: &Transition) -> f64 {
    let z = Tensor::matrix(1, tr.z_next.len(), tr.z_next.clone()).unwrap();
    let v1 = pair.q1.values(&pair.target1, &z).unwrap().data().to_vec();
    let v2 = pair.q2.values(&pair.target2, &z).unwrap().data().to_vec();
    let a = (0..v1.len()).fold(0, |b, i| if v1[i] > v1[b] { i } else { b });
    tr.reward + pair.gamma * v1[a].min(v2[a])
}

#[test]
fn targets_clip_to_the_smaller_twin() {
    let cfg = toy_config();
    let model = Model::new(&cfg, 0).unwrap();
    let mut pair = QNetworkPair::new(&cfg, &model, 1, StepSchedule::constant(1e-3)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let trs: Vec<Transition> = (0..20)
        .map(|_| transition(random_vec(&mut rng, 8), 0, rng.random_range(-1.0..1.0), random_vec(&mut rng, 8), false))
        .collect();
    let refs: Vec<&Transition> = trs.iter().collect();
    let y = pair.targets(&refs).unwrap();
    for (t, y) in trs.iter().zip(&y) {
        assert!((y - target_oracle(&pair, t)).abs() < 1e-12);
    }

    // Shift twin two's output bias: down makes it the minimum, up leaves twin one.
    let bias = pair.q2.net.layers.last().unwrap().bias;
    for shift in [-50.0, 50.0] {
        let mut shifted = pair.clone();
        for b in shifted.target2.value_mut(bias).data_mut() {
            *b += shift;
        }
        let ys = shifted.targets(&refs).unwrap();
        for (t, (&y0, &y1)) in trs.iter().zip(y.iter().zip(&ys)) {
            assert!((y1 - target_oracle(&shifted, t)).abs() < 1e-12);
            if shift < 0.0 {
                assert!(y1 < y0);
            } else {
                let z = Tensor::matrix(1, 8, t.z_next.clone()).unwrap();
                let v1 = pair.q1.values(&pair.target1, &z).unwrap().data().to_vec();
                let max = v1.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                assert!((y1 - (t.reward + pair.gamma * max)).abs() < 1e-12);
            }
        }
    }
    // Only the target networks matter.
    let mut perturbed = pair.clone();
    for store in [&mut perturbed.q1_store, &mut perturbed.q2_store] {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            for v in store.value_mut(id).data_mut() {
                *v = -3.0 * *v + 1.0;
            }
        }
    }
    assert_eq!(perturbed.targets(&refs).unwrap(), y);
    pair.update(&refs).unwrap();
}

#[test]
fn twins_are_independent_and_targets_sync() {
    let mut cfg = toy_config();
    cfg.online.target_sync = 3;
    let model = Model::new(&cfg, 0).unwrap();
    let mut pair = QNetworkPair::new(&cfg, &model, 9, StepSchedule::constant(1e-2)).unwrap();
    assert_eq!(values(&pair.q1_store), values(&model.q_store));
    assert_ne!(values(&pair.q1_store), values(&pair.q2_store));
    let tr = transition(vec![0.1; 8], 2, 1.0, vec![0.2; 8], false);
    let before = values(&pair.target1);
    pair.update(&[&tr]).unwrap();
    pair.update(&[&tr]).unwrap();
    assert_eq!(values(&pair.target1), before);
    assert_ne!(values(&pair.q1_store), before);
    pair.update(&[&tr]).unwrap();
    assert_eq!(values(&pair.target1), values(&pair.q1_store));
    assert_eq!(values(&pair.target2), values(&pair.q2_store));
}

#[test]
fn replay_is_fifo_and_seeded() {
    let mut buf = ReplayBuffer::new(3, 7);
    for i in 0..5 {
        buf.push(transition(vec![i as f64], 0, i as f64, vec![], false));
        assert!(buf.len() <= 3);
    }
    assert_eq!(buf.len(), 3);
    assert_eq!(buf.oldest().unwrap().reward, 2.0);

    let fill = |seed| {
        let mut b = ReplayBuffer::new(100, seed);
        for i in 0..50 {
            b.push(transition(vec![], 0, i as f64, vec![], false));
        }
        b
    };
    let draw = |b: &mut ReplayBuffer| -> Vec<f64> { b.sample(10).iter().map(|t| t.reward).collect() };
    let (mut a, mut b, mut c) = (fill(1), fill(1), fill(2));
    for _ in 0..5 {
        let x = draw(&mut a);
        assert_eq!(x, draw(&mut b));
        let mut dedup = x.clone();
        dedup.sort_by(f64::total_cmp);
        dedup.dedup();
        assert_eq!(dedup.len(), 10);
    }
    assert_ne!(draw(&mut a), draw(&mut c));
    assert_eq!(a.sample(80).len(), 50);
}

#[test]
fn replay_sampling_covers_the_buffer_uniformly() {
    let mut b = ReplayBuffer::new(10, 3);
    for i in 0..10 {
        b.push(transition(vec![], 0, i as f64, vec![], false));
    }
    let mut counts = [0usize; 10];
    for _ in 0..5000 {
        for t in b.sample(3) {
            counts[t.reward as usize] += 1;
        }
    }
    for c in counts {
        assert!((1350..1650).contains(&c), "{counts:?}");
    }
}

#[test]
fn exploration_schedule() {
    assert_eq!(exploration_rate(0.8, 0.05, 0, 1000), 0.8);
    assert!((exploration_rate(0.8, 0.05, 250, 1000) - 0.425).abs() < 1e-12);
    assert_eq!(exploration_rate(0.8, 0.05, 500, 1000), 0.05);
    assert_eq!(exploration_rate(0.8, 0.05, 999, 1000), 0.05);
    let mut last = f64::INFINITY;
    for s in 0..1200 {
        let l = exploration_rate(0.8, 0.05, s, 1000);
        assert!(l <= last);
        last = l;
    }
}

fn snapshots(cfg: &RunConfig, seeds: std::ops::Range<u64>) -> Vec<Snapshot> {
    let mut out = Vec::new();
    for seed in seeds {
        let sc = scenario(ScenarioKind::ALL[seed as usize % 3], seed);
        out.extend(expert_snapshots(cfg, &sc).unwrap());
    }
    out
}

#[test]
fn expert_snapshots_hold_local_futures() {
    let cfg = toy_config();
    let sc = scenario(ScenarioKind::Intersection, 4);
    let snaps = expert_snapshots(&cfg, &sc).unwrap();
    assert_eq!(snaps.len(), (sc.duration - 1) / cfg.offline.snapshot_stride);
    for s in &snaps {
        assert!(s.targets.len() <= cfg.observation.tracked);
        for (id, truth) in &s.targets {
            let r = s.obs.row_of(*id).unwrap();
            assert!(s.obs.agent_current(r));
            assert_eq!(truth.points.len(), cfg.model.future);
            // The first future point is one step from the anchor.
            if truth.valid[0] {
                let [x, y] = truth.points[0];
                assert!(x.hypot(y) < 3.0);
            }
        }
    }
}

#[test]
fn offline_training_rejects_empty_data() {
    let cfg = toy_config();
    let mut model = Model::new(&cfg, 0).unwrap();
    assert!(offline_train(&cfg, &mut model, &[], 0).is_err());
}

#[test]
fn offline_schedule_halves_every_five_epochs() {
    let mut cfg = toy_config();
    cfg.offline.epochs = 11;
    let snaps: Vec<Snapshot> = snapshots(&cfg, 0..1).into_iter().take(2).collect();
    let mut model = Model::new(&cfg, 0).unwrap();
    let report = offline_train(&cfg, &mut model, &snaps, 0).unwrap();
    assert_eq!(report.learning_rates[0], 2e-4);
    assert_eq!(report.learning_rates[5], 1e-4);
    assert_eq!(report.learning_rates[10], 5e-5);
}

#[test]
fn offline_loss_decreases() {
    let mut cfg = toy_config();
    cfg.offline.epochs = 8;
    cfg.offline.learning_rate = 3e-3;
    let snaps = snapshots(&cfg, 0..3);
    let mut model = Model::new(&cfg, 1).unwrap();
    let report = offline_train(&cfg, &mut model, &snaps, 5).unwrap();
    assert!(report.epoch_losses.last().unwrap() < &report.epoch_losses[0], "{:?}", report.epoch_losses);
}

#[test]
fn offline_training_memorizes_one_snapshot() {
    let mut cfg = toy_config();
    cfg.offline.epochs = 500;
    cfg.offline.weight_decay = 0.0;
    let snap = snapshots(&cfg, 0..1).into_iter().find(|s| !s.targets.is_empty()).unwrap();
    let mut model = Model::new(&cfg, 2).unwrap();
    let before = snapshot_min_ade(&model, &snap).unwrap().unwrap();
    offline_train_with(
        &cfg,
        &mut model,
        std::slice::from_ref(&snap),
        0,
        StepSchedule { base: 1e-2, factor: 0.5, every: 100 },
    )
    .unwrap();
    let after = snapshot_min_ade(&model, &snap).unwrap().unwrap();
    assert!(after < 0.1, "minADE {before} -> {after}");
}

#[test]
fn offline_training_is_deterministic() {
    let mut cfg = toy_config();
    cfg.offline.epochs = 2;
    let snaps = snapshots(&cfg, 0..1);
    let run = || {
        let mut model = Model::new(&cfg, 0).unwrap();
        let r = offline_train(&cfg, &mut model, &snaps, 3).unwrap();
        (r, values(&model.encoder_store))
    };
    assert_eq!(run(), run());
}

fn recorded_run(cfg: &RunConfig, model: &Model, sc: &Scenario) -> EpisodeRun {
    let settings = PolicySettings {
        use_belief: true,
        use_q_prior: false,
        exploration: 1.0,
        record_beliefs: true,
        keep_predictions: false,
        keep_trees: false,
    };
    run_episode(cfg, model, sc, &settings, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
}

fn index_of(sc: &Scenario) -> BTreeMap<u32, usize> {
    sc.agents.iter().enumerate().map(|(i, a)| (a.id, i)).collect()
}

fn chain_loss(model: &Model, belief: &ParameterStore, steps: &[BeliefStep], run: &EpisodeRun, sc: &Scenario) -> f64 {
    let mut g = Graph::new();
    let l = hindsight_loss(
        &mut g,
        &model.belief,
        belief,
        &model.decoder,
        &model.decoder_store,
        steps,
        &run.frames,
        &index_of(sc),
    )
    .unwrap()
    .unwrap();
    g.value(l).data()[0]
}

#[test]
fn hindsight_gradient_through_three_updates() {
    let mut cfg = toy_config();
    cfg.model.hidden = 4;
    cfg.model.decoder_hidden = 6;
    cfg.model.future = 6;
    let sc = scenario(ScenarioKind::Intersection, 1);
    let mut model = Model::new(&cfg, 4).unwrap();
    let run = recorded_run(&cfg, &model, &sc);
    let steps = &run.beliefs[0..4];
    assert!(steps[0].records.iter().all(|r| r.previous.is_none()));
    assert!(steps[1..].iter().all(|s| s.records.iter().any(|r| r.previous.is_some())));
    let index_of = index_of(&sc);
    let Model { belief, belief_store, decoder, decoder_store, .. } = &mut model;
    let frames = &run.frames;
    let err = param_grad_error(belief_store, &|g, s| {
        hindsight_loss(g, belief, s, decoder, decoder_store, steps, frames, &index_of).unwrap().unwrap()
    });
    assert!(err < FD_TOLERANCE, "belief {err}");
    let bs = belief_store.clone();
    let err = param_grad_error(decoder_store, &|g, s| {
        hindsight_loss(g, belief, &bs, decoder, s, steps, frames, &index_of).unwrap().unwrap()
    });
    assert!(err < FD_TOLERANCE, "decoder {err}");
}

#[test]
fn agents_without_future_contribute_nothing() {
    let cfg = toy_config();
    let sc = scenario(ScenarioKind::Merge, 2);
    let model = Model::new(&cfg, 0).unwrap();
    let run = recorded_run(&cfg, &model, &sc);
    let steps = run.beliefs[3..8].to_vec();
    let base = chain_loss(&model, &model.belief_store, &steps, &run, &sc);
    let mut extended = steps.clone();
    let mut last = steps[4].clone();
    last.t = run.frames.len() - 1;
    extended.push(last);
    assert_eq!(chain_loss(&model, &model.belief_store, &extended, &run, &sc), base);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]
    #[test]
    fn hindsight_loss_ignores_agent_order(seed in 0u64..1000) {
        let cfg = toy_config();
        let sc = scenario(ScenarioKind::Intersection, seed % 7);
        let model = Model::new(&cfg, seed).unwrap();
        let run = recorded_run(&cfg, &model, &sc);
        let steps = run.beliefs[..10.min(run.beliefs.len())].to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shuffled = steps.clone();
        for s in &mut shuffled {
            rand::seq::SliceRandom::shuffle(s.records.as_mut_slice(), &mut rng);
        }
        let a = chain_loss(&model, &model.belief_store, &steps, &run, &sc);
        let b = chain_loss(&model, &model.belief_store, &shuffled, &run, &sc);
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }
}

fn short_online(cfg: &mut RunConfig, steps: usize) {
    cfg.online.steps = steps;
    cfg.online.batch = 4;
    cfg.online.eval_interval = steps + 1;
}

#[test]
fn online_training_freezes_the_encoder() {
    let mut cfg = toy_config();
    short_online(&mut cfg, 150);
    let pool: Vec<Scenario> = (0..2).map(|s| scenario(ScenarioKind::ALL[s as usize], s)).collect();
    let mut model = Model::new(&cfg, 0).unwrap();
    let start = model.clone();
    let report = online_train(&cfg, &mut model, &pool, &[], 0, |_, _| Ok(())).unwrap();
    assert!(report.episodes >= 1);
    assert!(!report.hindsight_losses.is_empty());
    assert_eq!(values(&model.encoder_store), values(&start.encoder_store));
    assert_ne!(values(&model.belief_store), values(&start.belief_store));
    assert_ne!(values(&model.decoder_store), values(&start.decoder_store));
    assert_ne!(values(&model.q_store), values(&start.q_store));
}

#[test]
fn full_exploration_never_plans() {
    let mut cfg = toy_config();
    short_online(&mut cfg, 300);
    cfg.online.lambda_start = 1.0;
    cfg.online.lambda_end = 1.0;
    let pool = vec![scenario(ScenarioKind::LaneFollow, 3)];
    let mut model = Model::new(&cfg, 0).unwrap();
    let report = online_train(&cfg, &mut model, &pool, &[], 1, |_, _| Ok(())).unwrap();
    assert!(report.episodes >= 1);
    assert_eq!(report.planner_calls, 0);
}

#[test]
fn online_training_logs_each_interval() {
    let mut cfg = toy_config();
    short_online(&mut cfg, 200);
    cfg.online.eval_interval = 100;
    let pool = vec![scenario(ScenarioKind::Merge, 1)];
    let held = vec![scenario(ScenarioKind::Merge, 9)];
    let mut model = Model::new(&cfg, 0).unwrap();
    let mut seen = Vec::new();
    let report = online_train(&cfg, &mut model, &pool, &held, 2, |_, row| {
        seen.push(row.step);
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, vec![100, 200]);
    assert_eq!(report.rows.len(), 2);
    assert!(report.rows.iter().all(|r| r.metrics.episodes == 1 && r.seed == 2));
    assert!(online_train(&cfg, &mut model, &[], &held, 2, |_, _| Ok(())).is_err());
}

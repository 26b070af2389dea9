//! Offline encoder/decoder training, replay-buffered twin Q-learning and
//! hindsight training of the belief update and decoder.

use std::collections::{BTreeMap, VecDeque};

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::belief::BeliefNet;
use crate::config::RunConfig;
use crate::decoder::{mode_ades, Decoder, FutureTrajectory};
use crate::error::{Error, Result};
use crate::model::{Model, QNet};
use crate::nn::{AdamW, Graph, ParameterStore, StepSchedule, Tensor, Var};
use crate::runner::{
    realized_future, run_episode, run_suite, BeliefStep, EpisodeRun, EpisodeSummary, PolicySettings, SeedMetrics,
};
use crate::simulator::{observe, replay_expert, Episode, Frame, Observation, Scenario};

pub use crate::runner::Transition;

/// An observation with the realized futures of its tracked agents, each in
/// that agent's anchor frame.
#[derive(Clone, Debug)]
pub struct Snapshot {
    pub scenario: String,
    pub obs: Observation,
    pub targets: Vec<(u32, FutureTrajectory)>,
}

/// Snapshots every `snapshot_stride` steps of the scenario's expert replay.
pub fn expert_snapshots(cfg: &RunConfig, scenario: &Scenario) -> Result<Vec<Snapshot>> {
    let frames = replay_expert(scenario, &cfg.simulator)?;
    let stride = cfg.offline.snapshot_stride.max(1);
    let mut ep = Episode::new(scenario, &cfg.simulator)?;
    let mut out = Vec::new();
    for t in 0..scenario.duration {
        if t > 0 && t % stride == 0 {
            out.push(snapshot_at(cfg, &ep, &frames)?);
        }
        let p = scenario.ego.expert[t + 1];
        let a = (p.v - scenario.ego.expert[t].v) / scenario.dt;
        ep.termination = None;
        ep.step(&crate::geometry::CartesianState { a, ..p.to_state() })?;
    }
    Ok(out)
}

fn snapshot_at(cfg: &RunConfig, ep: &Episode, frames: &[Frame]) -> Result<Snapshot> {
    let obs = observe(ep, &cfg.observation);
    let index_of: BTreeMap<u32, usize> = ep.scenario.agents.iter().enumerate().map(|(i, a)| (a.id, i)).collect();
    let targets = (1..obs.agents)
        .filter(|&r| obs.agent_current(r))
        .take(cfg.observation.tracked)
        .map(|r| {
            let id = obs.agent_ids[r].expect("current rows hold agents");
            let truth = realized_future(frames, index_of[&id], ep.t, cfg.model.future);
            (id, truth.to_local(&obs.agent_anchor[r]))
        })
        .collect();
    Ok(Snapshot { scenario: ep.scenario.id.clone(), obs, targets })
}

/// Mixture loss of decoding the tracked agents' tokens directly.
pub fn snapshot_loss(g: &mut Graph, model: &Model, snap: &Snapshot) -> Result<Option<Var>> {
    let enc = model.encoder.encode_graph(g, &model.encoder_store, &snap.obs)?;
    let mut rows = Vec::new();
    let mut truths = Vec::new();
    for (id, truth) in &snap.targets {
        let row = snap.obs.row_of(*id).and_then(|r| enc.index_of(r));
        if let Some(i) = row {
            rows.push(i);
            truths.push(truth);
        }
    }
    if rows.is_empty() {
        return Ok(None);
    }
    let x = g.gather_rows(enc.tokens, &rows);
    let d = model.decoder.forward(g, &model.decoder_store, x)?;
    let pairs: Vec<(usize, &FutureTrajectory)> = truths.into_iter().enumerate().collect();
    Ok(model.decoder.loss_graph(g, &d, &pairs))
}

/// Mean over tracked agents of the token-decoded minADE, in anchor frames.
pub fn snapshot_min_ade(model: &Model, snap: &Snapshot) -> Result<Option<f64>> {
    let scene = model.encoder.encode_scene(&model.encoder_store, &snap.obs)?;
    let mut ades = Vec::new();
    for (id, truth) in &snap.targets {
        let Some(r) = snap.obs.row_of(*id) else { continue };
        let x = Tensor::matrix(1, scene.tokens.cols(), scene.token(r).to_vec())?;
        let gmm = &model.decoder.decode(&model.decoder_store, &x, &[(*id, scene.anchors[r])], 0)?[0];
        if let Some(a) = mode_ades(gmm, truth) {
            ades.push(a.into_iter().fold(f64::INFINITY, f64::min));
        }
    }
    Ok((!ades.is_empty()).then(|| ades.iter().sum::<f64>() / ades.len() as f64))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OfflineReport {
    pub epoch_losses: Vec<f64>,
    pub learning_rates: Vec<f64>,
}

pub fn offline_schedule(cfg: &RunConfig) -> StepSchedule {
    StepSchedule { base: cfg.offline.learning_rate, factor: 0.5, every: cfg.offline.halve_every }
}

/// Trains encoder and decoder on `snapshots` for `cfg.offline.epochs`
/// epochs of shuffled minibatches.
pub fn offline_train(cfg: &RunConfig, model: &mut Model, snapshots: &[Snapshot], seed: u64) -> Result<OfflineReport> {
    offline_train_with(cfg, model, snapshots, seed, offline_schedule(cfg))
}

pub fn offline_train_with(
    cfg: &RunConfig,
    model: &mut Model,
    snapshots: &[Snapshot],
    seed: u64,
    schedule: StepSchedule,
) -> Result<OfflineReport> {
    if snapshots.iter().all(|s| s.targets.is_empty()) {
        return Err(Error::Config("offline training needs at least one snapshot with a tracked agent".into()));
    }
    let mut opt_e = AdamW::new(&model.encoder_store, schedule.clone(), cfg.offline.weight_decay);
    let mut opt_d = AdamW::new(&model.decoder_store, schedule, cfg.offline.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..snapshots.len()).collect();
    let mut report = OfflineReport::default();
    let batch = cfg.offline.batch.max(1);
    for epoch in 0..cfg.offline.epochs {
        opt_e.set_progress(epoch as u64);
        opt_d.set_progress(epoch as u64);
        report.learning_rates.push(opt_e.learning_rate());
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0usize;
        for chunk in order.chunks(batch) {
            model.encoder_store.zero_grad();
            model.decoder_store.zero_grad();
            let mut used = 0usize;
            for &i in chunk {
                let mut g = Graph::new();
                let Some(loss) = snapshot_loss(&mut g, model, &snapshots[i])? else {
                    continue;
                };
                total += g.value(loss).data()[0];
                used += 1;
                let grads = g.backward(loss);
                model.encoder_store.accumulate(&g, &grads);
                model.decoder_store.accumulate(&g, &grads);
            }
            if used == 0 {
                continue;
            }
            count += used;
            model.encoder_store.scale_grads(1.0 / used as f64);
            model.decoder_store.scale_grads(1.0 / used as f64);
            opt_e.step(&mut model.encoder_store)?;
            opt_d.step(&mut model.decoder_store)?;
        }
        let loss = total / count.max(1) as f64;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("offline loss became {loss} in epoch {}", epoch + 1)));
        }
        log::info!("offline epoch {}: loss {loss:.4}", epoch + 1);
        report.epoch_losses.push(loss);
    }
    Ok(report)
}

/// FIFO ring of transitions with a seeded sampler.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    pub capacity: usize,
    items: VecDeque<Transition>,
    rng: ChaCha8Rng,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, seed: u64) -> Self {
        ReplayBuffer {
            capacity,
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn oldest(&self) -> Option<&Transition> {
        self.items.front()
    }

    /// `batch` distinct transitions, uniformly.
    pub fn sample(&mut self, batch: usize) -> Vec<&Transition> {
        let picks = index::sample(&mut self.rng, self.items.len(), batch.min(self.items.len()));
        picks.iter().map(|i| &self.items[i]).collect()
    }
}

/// Online twins and their target copies.
#[derive(Clone, Debug)]
pub struct QNetworkPair {
    pub q1: QNet,
    pub q1_store: ParameterStore,
    pub q2: QNet,
    pub q2_store: ParameterStore,
    pub target1: ParameterStore,
    pub target2: ParameterStore,
    opt1: AdamW,
    opt2: AdamW,
    pub updates: u64,
    pub sync_every: u64,
    pub gamma: f64,
}

impl QNetworkPair {
    /// Twin one starts from the model's Q-network; twin two is freshly
    /// initialized from `seed`.
    pub fn new(cfg: &RunConfig, model: &Model, seed: u64, schedule: StepSchedule) -> Result<Self> {
        let q1 = model.q.clone();
        let q1_store = model.q_store.clone();
        let mut q2_store = ParameterStore::new(seed);
        let width = q1_store.value(q1.net.layers[0].weight).shape()[1];
        let options = q1_store.value(q1.net.layers.last().expect("layers").weight).shape()[1];
        let q2 = QNet::new(&mut q2_store, "q", cfg.model.hidden, width, options)?;
        let opt1 = AdamW::new(&q1_store, schedule.clone(), cfg.online.weight_decay);
        let opt2 = AdamW::new(&q2_store, schedule, cfg.online.weight_decay);
        Ok(QNetworkPair {
            target1: q1_store.clone(),
            target2: q2_store.clone(),
            q1,
            q1_store,
            q2,
            q2_store,
            opt1,
            opt2,
            updates: 0,
            sync_every: cfg.online.target_sync.max(1) as u64,
            gamma: cfg.online.gamma_q,
        })
    }

    pub fn set_progress(&mut self, progress: u64) {
        self.opt1.set_progress(progress);
        self.opt2.set_progress(progress);
    }

    fn stack(rows: impl Iterator<Item = Vec<f64>>, n: usize) -> Result<Tensor> {
        let data: Vec<f64> = rows.flatten().collect();
        let d = data.len() / n.max(1);
        Tensor::matrix(n, d, data)
    }

    /// Clipped double-Q targets from the target twins only.
    pub fn targets(&self, batch: &[&Transition]) -> Result<Vec<f64>> {
        let n = batch.len();
        let next = Self::stack(batch.iter().map(|t| t.z_next.clone()), n)?;
        let v1 = self.q1.values(&self.target1, &next)?;
        let v2 = self.q2.values(&self.target2, &next)?;
        Ok(batch
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if t.done {
                    return t.reward;
                }
                let row = v1.row_slice(i);
                let mut best = 0;
                for a in 1..row.len() {
                    if row[a] > row[best] {
                        best = a;
                    }
                }
                t.reward + self.gamma * row[best].min(v2.row_slice(i)[best])
            })
            .collect())
    }

    fn regress(q: &QNet, store: &mut ParameterStore, opt: &mut AdamW, batch: &[&Transition], y: &[f64]) -> Result<f64> {
        let n = batch.len();
        let z = Self::stack(batch.iter().map(|t| t.z.clone()), n)?;
        let mut g = Graph::new();
        let x = g.constant(z);
        let values = q.net.forward(&mut g, store, x)?;
        let k = g.value(values).cols();
        let mut mask = vec![0.0; n * k];
        for (i, t) in batch.iter().enumerate() {
            mask[i * k + t.option] = 1.0;
        }
        let mask = g.constant(Tensor::matrix(n, k, mask)?);
        let picked = g.mul(values, mask);
        let ones = g.constant(Tensor::filled(vec![k, 1], 1.0));
        let q_sa = g.matmul(picked, ones);
        let target = g.constant(Tensor::matrix(n, 1, y.to_vec())?);
        let diff = g.sub(q_sa, target);
        let sq = g.square(diff);
        let loss = g.mean(sq);
        let value = g.value(loss).data()[0];
        store.zero_grad();
        let grads = g.backward(loss);
        store.accumulate(&g, &grads);
        opt.step(store)?;
        Ok(value)
    }

    /// One regression step of both twins toward the shared targets; the
    /// targets are re-synced every `sync_every` updates. Returns the mean
    /// squared error of the two twins before the step.
    pub fn update(&mut self, batch: &[&Transition]) -> Result<f64> {
        let y = self.targets(batch)?;
        let l1 = Self::regress(&self.q1, &mut self.q1_store, &mut self.opt1, batch, &y)?;
        let l2 = Self::regress(&self.q2, &mut self.q2_store, &mut self.opt2, batch, &y)?;
        self.updates += 1;
        if self.updates.is_multiple_of(self.sync_every) {
            self.target1.copy_values_from(&self.q1_store)?;
            self.target2.copy_values_from(&self.q2_store)?;
        }
        Ok(0.5 * (l1 + l2))
    }

    pub fn q1_values(&self, z: &[f64]) -> Result<Vec<f64>> {
        let t = Tensor::matrix(1, z.len(), z.to_vec())?;
        Ok(self.q1.values(&self.q1_store, &t)?.row_slice(0).to_vec())
    }
}

/// Samples a batch and updates the pair; `None` while the buffer holds fewer
/// than `batch` transitions.
pub fn q_update(buffer: &mut ReplayBuffer, pair: &mut QNetworkPair, batch: usize) -> Result<Option<f64>> {
    if buffer.len() < batch {
        return Ok(None);
    }
    let sample: Vec<Transition> = buffer.sample(batch).into_iter().cloned().collect();
    let refs: Vec<&Transition> = sample.iter().collect();
    pair.update(&refs).map(Some)
}

/// Mixture loss of every belief prediction in `steps` against the realized
/// futures in `frames`, with gradients through the belief updates linked
/// across the steps. Beliefs entering from before the first step are
/// constants.
#[allow(clippy::too_many_arguments)]
pub fn hindsight_loss(
    g: &mut Graph,
    belief: &BeliefNet,
    belief_store: &ParameterStore,
    decoder: &Decoder,
    decoder_store: &ParameterStore,
    steps: &[BeliefStep],
    frames: &[Frame],
    index_of: &BTreeMap<u32, usize>,
) -> Result<Option<Var>> {
    let d = belief.hidden;
    let mut live: BTreeMap<u32, Var> = BTreeMap::new();
    let mut rows: Vec<Var> = Vec::new();
    let mut truths: Vec<FutureTrajectory> = Vec::new();
    for step in steps {
        let updates: Vec<usize> = (0..step.records.len()).filter(|&i| step.records[i].previous.is_some()).collect();
        let mut out = BTreeMap::new();
        if !updates.is_empty() {
            let n = updates.len();
            let z: Vec<f64> = updates.iter().flat_map(|&i| step.records[i].token.clone()).collect();
            let a: Vec<f64> = updates.iter().flat_map(|&i| step.records[i].action.clone()).collect();
            let aw = a.len() / n;
            let prev: Vec<Var> = updates
                .iter()
                .map(|&i| {
                    let r = &step.records[i];
                    match live.get(&r.agent_id) {
                        Some(&v) => Ok(v),
                        None => Ok(g.constant(Tensor::matrix(1, d, r.previous.clone().expect("update row"))?)),
                    }
                })
                .collect::<Result<_>>()?;
            let zv = g.constant(Tensor::matrix(n, d, z)?);
            let av = g.constant(Tensor::matrix(n, aw, a)?);
            let pv = g.concat_rows(&prev);
            let new = belief.update_graph(g, belief_store, zv, pv, av)?;
            for (j, &i) in updates.iter().enumerate() {
                out.insert(i, g.slice_rows(new, j, 1));
            }
        }
        for (i, r) in step.records.iter().enumerate() {
            let v = match out.get(&i) {
                Some(&v) => v,
                None => g.constant(Tensor::matrix(1, d, r.vector.clone())?),
            };
            live.insert(r.agent_id, v);
            let Some(&idx) = index_of.get(&r.agent_id) else {
                continue;
            };
            let truth = realized_future(frames, idx, step.t, decoder.steps).to_local(&r.anchor);
            if truth.valid_steps() > 0 {
                rows.push(v);
                truths.push(truth);
            }
        }
    }
    if rows.is_empty() {
        return Ok(None);
    }
    let x = g.concat_rows(&rows);
    let dec = decoder.forward(g, decoder_store, x)?;
    let pairs: Vec<(usize, &FutureTrajectory)> = truths.iter().enumerate().collect();
    Ok(decoder.loss_graph(g, &dec, &pairs))
}

/// Optimizers for the parts trained online.
#[derive(Clone, Debug)]
pub struct HindsightOptimizers {
    pub belief: AdamW,
    pub decoder: AdamW,
}

impl HindsightOptimizers {
    pub fn new(model: &Model, schedule: StepSchedule, weight_decay: f64) -> Self {
        HindsightOptimizers {
            belief: AdamW::new(&model.belief_store, schedule.clone(), weight_decay),
            decoder: AdamW::new(&model.decoder_store, schedule, weight_decay),
        }
    }

    pub fn set_progress(&mut self, progress: u64) {
        self.belief.set_progress(progress);
        self.decoder.set_progress(progress);
    }
}

/// One optimizer step per chunk of `bptt` consecutive steps of the episode.
/// Returns the mean chunk loss, `None` when nothing had a valid future.
pub fn hindsight_update(
    model: &mut Model,
    opts: &mut HindsightOptimizers,
    run: &EpisodeRun,
    scenario: &Scenario,
    bptt: usize,
) -> Result<Option<f64>> {
    let index_of: BTreeMap<u32, usize> = scenario.agents.iter().enumerate().map(|(i, a)| (a.id, i)).collect();
    let mut losses = Vec::new();
    for chunk in run.beliefs.chunks(bptt.max(1)) {
        let mut g = Graph::new();
        let loss = hindsight_loss(
            &mut g,
            &model.belief,
            &model.belief_store,
            &model.decoder,
            &model.decoder_store,
            chunk,
            &run.frames,
            &index_of,
        )?;
        let Some(loss) = loss else { continue };
        losses.push(g.value(loss).data()[0]);
        model.belief_store.zero_grad();
        model.decoder_store.zero_grad();
        let grads = g.backward(loss);
        model.belief_store.accumulate(&g, &grads);
        model.decoder_store.accumulate(&g, &grads);
        opts.belief.step(&mut model.belief_store)?;
        opts.decoder.step(&mut model.decoder_store)?;
    }
    Ok((!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64))
}

/// Exploration probability after `step` environment steps: linear from
/// `start` to `end` over the first half of `total`, then constant.
pub fn exploration_rate(start: f64, end: f64, step: usize, total: usize) -> f64 {
    let half = (total / 2).max(1);
    if step >= half {
        end
    } else {
        start + (end - start) * step as f64 / half as f64
    }
}

/// One row of the online training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingRow {
    pub step: usize,
    pub lambda: f64,
    pub seed: u64,
    pub metrics: SeedMetrics,
}

#[derive(Clone, Debug, Default)]
pub struct OnlineReport {
    pub rows: Vec<TrainingRow>,
    pub episodes: usize,
    pub planner_calls: usize,
    pub q_losses: Vec<f64>,
    pub hindsight_losses: Vec<f64>,
}

/// Online training over `pool`: episodes with exploration, twin Q updates
/// after each episode (one per decision) and hindsight training of the
/// belief update and decoder. Evaluates on `held_out` every
/// `eval_interval` steps. The encoder is never modified. On return
/// `model.q_store` holds twin one.
pub fn online_train(
    cfg: &RunConfig,
    model: &mut Model,
    pool: &[Scenario],
    held_out: &[Scenario],
    seed: u64,
    mut on_eval: impl FnMut(&Model, &TrainingRow) -> Result<()>,
) -> Result<OnlineReport> {
    if pool.is_empty() {
        return Err(Error::Config("online training needs at least one scenario".into()));
    }
    let on = &cfg.online;
    let schedule = StepSchedule { base: on.learning_rate, factor: on.decay, every: on.decay_every };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buffer = ReplayBuffer::new(on.replay_capacity, seed ^ 0x5eed);
    let mut pair = QNetworkPair::new(cfg, model, seed.wrapping_mul(4).wrapping_add(7), schedule.clone())?;
    let mut opts = HindsightOptimizers::new(model, schedule, on.weight_decay);
    let mut report = OnlineReport::default();
    let mut steps = 0usize;
    let mut next_eval = on.eval_interval.max(1);
    while steps < on.steps {
        let lambda = exploration_rate(on.lambda_start, on.lambda_end, steps, on.steps);
        let scenario = &pool[rng.random_range(0..pool.len())];
        let settings = PolicySettings {
            use_belief: true,
            use_q_prior: true,
            exploration: lambda,
            record_beliefs: true,
            keep_predictions: false,
            keep_trees: false,
        };
        model.q_store.copy_values_from(&pair.q1_store)?;
        let run = run_episode(cfg, model, scenario, &settings, &mut rng)?;
        steps += run.summary.task_time;
        report.episodes += 1;
        report.planner_calls += run.summary.plans;
        pair.set_progress(steps as u64);
        opts.set_progress(steps as u64);
        for tr in &run.transitions {
            buffer.push(tr.clone());
            if let Some(l) = q_update(&mut buffer, &mut pair, on.batch)? {
                report.q_losses.push(l);
            }
        }
        if let Some(l) = hindsight_update(model, &mut opts, &run, scenario, on.bptt)? {
            report.hindsight_losses.push(l);
        }
        while steps >= next_eval {
            model.q_store.copy_values_from(&pair.q1_store)?;
            let metrics = evaluate_model(cfg, model, held_out, &PolicySettings::evaluation(cfg), seed)?;
            let row = TrainingRow {
                step: next_eval,
                lambda: exploration_rate(on.lambda_start, on.lambda_end, steps, on.steps),
                seed,
                metrics,
            };
            log::info!("online step {}: success {:?}", row.step, row.metrics.success_rate);
            on_eval(model, &row)?;
            report.rows.push(row);
            next_eval += on.eval_interval.max(1);
        }
    }
    model.q_store.copy_values_from(&pair.q1_store)?;
    Ok(report)
}

/// Runs every scenario once and aggregates the summaries.
pub fn evaluate_model(
    cfg: &RunConfig,
    model: &Model,
    scenarios: &[Scenario],
    settings: &PolicySettings,
    seed: u64,
) -> Result<SeedMetrics> {
    let runs = run_suite(cfg, model, scenarios, settings, seed)?;
    let summaries: Vec<EpisodeSummary> = runs.into_iter().map(|r| r.summary).collect();
    Ok(SeedMetrics::from_summaries(seed, &summaries))
}

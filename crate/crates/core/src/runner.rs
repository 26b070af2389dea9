//! Closed-loop episodes: observe, encode, track beliefs, plan, execute.

use std::collections::{BTreeMap, VecDeque};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::belief::{BeliefRecord, BeliefTracker, TrackedToken};
use crate::config::RunConfig;
use crate::decoder::{consistency, min_ade, score_accuracy, FutureTrajectory, TrajectoryGmm};
use crate::error::Result;
use crate::geometry::{frenet_to_cartesian, project_to_frenet, rollout_macro_action, CartesianState, Pose};
use crate::model::Model;
use crate::nn::Tensor;
use crate::planner::{root_prior, AgentFuture, FrozenBelief, OptionSet, PlanContext, Planner, TreeDump};
use crate::simulator::{observe, Episode, Frame, Scenario, Termination};

/// How the agent acts during an episode.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicySettings {
    /// Predict from tracked beliefs; otherwise decode each frame's tokens.
    pub use_belief: bool,
    /// Root prior from the Q-network; otherwise uniform.
    pub use_q_prior: bool,
    /// Probability of a uniformly random option at each decision.
    pub exploration: f64,
    /// Keep belief records for hindsight training.
    pub record_beliefs: bool,
    pub keep_predictions: bool,
    pub keep_trees: bool,
}

impl PolicySettings {
    pub fn evaluation(cfg: &RunConfig) -> Self {
        PolicySettings {
            use_belief: cfg.evaluation.use_belief,
            use_q_prior: cfg.evaluation.use_q_prior,
            exploration: 0.0,
            record_beliefs: false,
            keep_predictions: false,
            keep_trees: false,
        }
    }
}

/// One macro-action decision with its summed reward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub z: Vec<f64>,
    pub option: usize,
    pub reward: f64,
    pub z_next: Vec<f64>,
    pub done: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: usize,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub v: f64,
    pub a: f64,
    pub reward: f64,
    pub r_col: f64,
    pub r_prog: f64,
    pub r_expert: f64,
    pub option: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub scenario: String,
    pub kind: String,
    pub success: bool,
    pub termination: String,
    pub reward: f64,
    pub task_time: usize,
    pub log_divergence: f64,
    pub min_ade: Option<f64>,
    pub consistency: Option<f64>,
    pub score_accuracy: Option<f64>,
    pub decisions: usize,
    pub plans: usize,
}

/// Predictions made at one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepPredictions {
    pub t: usize,
    pub predictions: Vec<TrajectoryGmm>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeliefStep {
    pub t: usize,
    pub records: Vec<BeliefRecord>,
}

#[derive(Clone, Debug)]
pub struct EpisodeRun {
    pub summary: EpisodeSummary,
    pub trace: Vec<TraceRow>,
    pub transitions: Vec<Transition>,
    /// Wall-clock time of each planner call, milliseconds.
    pub planner_ms: Vec<f64>,
    pub frames: Vec<Frame>,
    pub beliefs: Vec<BeliefStep>,
    pub predictions: Vec<StepPredictions>,
    pub trees: Vec<(usize, TreeDump)>,
}

/// States of option `o` executed from `ego` along the ego route, ignoring
/// the corridor. A full stop along the heading when `ego` cannot be
/// projected.
pub fn option_rollout(
    options: &OptionSet,
    o: usize,
    ego: &CartesianState,
    path: &crate::geometry::ReferencePath,
) -> Vec<CartesianState> {
    let m = &options.actions[o];
    match project_to_frenet(ego, path, f64::INFINITY) {
        Ok(p) => frenet_to_cartesian(&rollout_macro_action(&p.state, m), path, m.accel).0,
        Err(_) => vec![CartesianState { v: 0.0, a: 0.0, ..*ego }; m.steps],
    }
}

/// Realized future of agent `index` after step `t`, up to `steps` points,
/// valid where the episode reached that step.
pub fn realized_future(frames: &[Frame], index: usize, t: usize, steps: usize) -> FutureTrajectory {
    let mut points = Vec::with_capacity(steps);
    let mut valid = Vec::with_capacity(steps);
    for k in 1..=steps {
        match frames.get(t + k) {
            Some(f) => {
                let p = &f.agents[index];
                points.push([p.x, p.y]);
                valid.push(true);
            }
            None => {
                points.push([0.0, 0.0]);
                valid.push(false);
            }
        }
    }
    FutureTrajectory { points, valid }
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Runs one episode to termination.
pub fn run_episode(
    cfg: &RunConfig,
    model: &Model,
    scenario: &Scenario,
    settings: &PolicySettings,
    rng: &mut ChaCha8Rng,
) -> Result<EpisodeRun> {
    let options = OptionSet::from_config(&cfg.planner)?;
    let planner = Planner { cfg: &cfg.planner, options: &options };
    let k = options.len();
    let mut ep = Episode::new(scenario, &cfg.simulator)?;
    let index_of: BTreeMap<u32, usize> = scenario.agents.iter().enumerate().map(|(i, a)| (a.id, i)).collect();
    let mut tracker = BeliefTracker::new(cfg.online.forget_steps);
    let mut latest: BTreeMap<u32, TrajectoryGmm> = BTreeMap::new();
    let mut executed = vec![*ep.ego()];
    let mut pending: VecDeque<CartesianState> = VecDeque::new();
    let mut open: Option<Transition> = None;
    let mut current_option = 0;
    let mut prev_fresh: Vec<TrajectoryGmm> = Vec::new();
    let mut run = EpisodeRun {
        summary: EpisodeSummary {
            scenario: scenario.id.clone(),
            kind: scenario.kind.name().to_string(),
            success: false,
            termination: String::new(),
            reward: 0.0,
            task_time: 0,
            log_divergence: 0.0,
            min_ade: None,
            consistency: None,
            score_accuracy: None,
            decisions: 0,
            plans: 0,
        },
        trace: Vec::new(),
        transitions: Vec::new(),
        planner_ms: Vec::new(),
        frames: Vec::new(),
        beliefs: Vec::new(),
        predictions: Vec::new(),
        trees: Vec::new(),
    };
    let mut all_predictions: Vec<StepPredictions> = Vec::new();
    let mut consistencies = Vec::new();
    let forget = cfg.online.forget_steps;

    while !ep.done() {
        let t = ep.t;
        let obs = observe(&ep, &cfg.observation);
        let scene = model.encoder.encode_scene(&model.encoder_store, &obs)?;
        let ego_token = scene.ego_token().to_vec();
        let tokens: Vec<TrackedToken> = scene
            .tracked
            .iter()
            .map(|&r| TrackedToken {
                agent_id: scene.agent_ids[r].expect("tracked rows hold agents"),
                token: scene.token(r).to_vec(),
                anchor: scene.anchors[r],
            })
            .collect();
        let (inputs, meta): (Vec<Vec<f64>>, Vec<(u32, Pose)>) = if settings.use_belief {
            let tail = executed.len().saturating_sub(cfg.model.ego_steps);
            let records = tracker.step(&model.belief, &model.belief_store, t, &tokens, &executed[tail..])?;
            let out = records.iter().map(|r| (r.vector.clone(), (r.agent_id, r.anchor))).unzip();
            if settings.record_beliefs {
                run.beliefs.push(BeliefStep { t, records });
            }
            out
        } else {
            tokens.iter().map(|tk| (tk.token.clone(), (tk.agent_id, tk.anchor))).unzip()
        };
        let fresh = if inputs.is_empty() {
            Vec::new()
        } else {
            let d = cfg.model.hidden;
            let x = Tensor::matrix(inputs.len(), d, inputs.concat())?;
            model.decoder.decode(&model.decoder_store, &x, &meta, t)?
        };
        if let Some(c) = consistency(&fresh, &prev_fresh) {
            consistencies.push(c);
        }
        for g in &fresh {
            latest.insert(g.agent_id, g.clone());
        }
        latest.retain(|_, g| t - g.created_at <= forget);
        all_predictions.push(StepPredictions { t, predictions: fresh.clone() });
        prev_fresh = fresh;

        if pending.is_empty() || cfg.planner.replan_every_step {
            if let Some(mut tr) = open.take() {
                tr.z_next = ego_token.clone();
                run.transitions.push(tr);
            }
            let explore = settings.exploration > 0.0 && rng.random_bool(settings.exploration.min(1.0));
            let (option, rollout) = if explore {
                let o = rng.random_range(0..k);
                (o, option_rollout(&options, o, ep.ego(), ep.ego_route()))
            } else {
                let belief = FrozenBelief {
                    agents: latest
                        .values()
                        .filter_map(|g| {
                            let a = &scenario.agents[*index_of.get(&g.agent_id)?];
                            Some(AgentFuture::from_gmm(g, a.length, a.width, t, cfg.planner.horizon))
                        })
                        .collect(),
                };
                let ctx = PlanContext {
                    path: ep.ego_route(),
                    belief: &belief,
                    ego_length: scenario.ego.length,
                    ego_width: scenario.ego.width,
                    corridor: cfg.simulator.corridor,
                };
                let prior = if settings.use_q_prior {
                    let z = Tensor::matrix(1, ego_token.len(), ego_token.clone())?;
                    root_prior(model.q.values(&model.q_store, &z)?.row_slice(0))
                } else {
                    vec![1.0 / k as f64; k]
                };
                let start = Instant::now();
                let (res, tree) = planner.plan(ep.ego(), &ctx, &prior)?;
                run.planner_ms.push(start.elapsed().as_secs_f64() * 1e3);
                run.summary.plans += 1;
                if let Some(why) = &res.diagnostic {
                    log::debug!("{} t={t}: {why}", scenario.id);
                }
                if settings.keep_trees {
                    run.trees.push((t, tree.dump()));
                }
                (res.sequence[0], res.first_rollout)
            };
            run.summary.decisions += 1;
            current_option = option;
            pending = rollout.into();
            open = Some(Transition { z: ego_token, option, reward: 0.0, z_next: Vec::new(), done: false });
        }

        let next = pending.pop_front().expect("a decision fills the queue");
        let step = ep.step(&next)?;
        executed.push(*ep.ego());
        if let Some(tr) = open.as_mut() {
            tr.reward += step.reward;
        }
        let e = ep.ego();
        run.trace.push(TraceRow {
            t: step.t,
            x: e.x,
            y: e.y,
            heading: e.heading,
            v: e.v,
            a: e.a,
            reward: step.reward,
            r_col: step.r_col,
            r_prog: step.r_prog,
            r_expert: step.r_expert,
            option: current_option,
        });
    }
    if let Some(mut tr) = open.take() {
        let obs = observe(&ep, &cfg.observation);
        tr.z_next = model.encoder.encode_scene(&model.encoder_store, &obs)?.ego_token().to_vec();
        tr.done = true;
        run.transitions.push(tr);
    }

    let frames = ep.frames().to_vec();
    let mut ades = Vec::new();
    let mut hits = Vec::new();
    for step in &all_predictions {
        for g in &step.predictions {
            let truth = realized_future(&frames, index_of[&g.agent_id], step.t, g.steps);
            if let Some(a) = min_ade(g, &truth) {
                ades.push(a);
            }
            if let Some(h) = score_accuracy(g, &truth) {
                hits.push(if h { 1.0 } else { 0.0 });
            }
        }
    }
    let termination = ep.termination.expect("episode finished");
    let s = &mut run.summary;
    s.success = termination == Termination::Goal;
    s.termination = termination.name().to_string();
    s.reward = ep.total_reward;
    s.task_time = ep.t;
    s.log_divergence = ep.log_divergence();
    s.min_ade = mean(&ades);
    s.consistency = mean(&consistencies);
    s.score_accuracy = mean(&hits);
    if settings.keep_predictions {
        run.predictions = all_predictions;
    }
    run.frames = frames;
    Ok(run)
}

/// Runs every scenario once; episode `i` draws from a generator seeded with
/// `seed + i`, so settings compared on one list stay paired.
pub fn run_suite(
    cfg: &RunConfig,
    model: &Model,
    scenarios: &[Scenario],
    settings: &PolicySettings,
    seed: u64,
) -> Result<Vec<EpisodeRun>> {
    scenarios
        .iter()
        .enumerate()
        .map(|(i, sc)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            run_episode(cfg, model, sc, settings, &mut rng)
        })
        .collect()
}

/// Mean and sample standard deviation, `None` for an empty slice.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    let m = mean(values)?;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() - 1) as f64
    } else {
        0.0
    };
    Some((m, var.sqrt()))
}

/// `mean±std` with two decimals, or `-` when there is nothing to report.
pub fn format_mean_std(values: &[f64]) -> String {
    match mean_std(values) {
        Some((m, s)) => format!("{m:.2}±{s:.2}"),
        None => "-".into(),
    }
}

pub type MetricFn = fn(&SeedMetrics) -> Option<f64>;

/// Aggregate metrics over the episodes of one seed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub episodes: usize,
    pub success_rate: Option<f64>,
    pub reward: Option<f64>,
    pub task_time: Option<f64>,
    pub log_divergence: Option<f64>,
    pub min_ade: Option<f64>,
    pub consistency: Option<f64>,
    pub score_accuracy: Option<f64>,
}

impl SeedMetrics {
    pub fn from_summaries(seed: u64, runs: &[EpisodeSummary]) -> Self {
        let pick = |f: &dyn Fn(&EpisodeSummary) -> Option<f64>| -> Option<f64> {
            let v: Vec<f64> = runs.iter().filter_map(f).collect();
            mean(&v)
        };
        SeedMetrics {
            seed,
            episodes: runs.len(),
            success_rate: pick(&|r| Some(if r.success { 1.0 } else { 0.0 })),
            reward: pick(&|r| Some(r.reward)),
            task_time: pick(&|r| Some(r.task_time as f64)),
            log_divergence: pick(&|r| Some(r.log_divergence)),
            min_ade: pick(&|r| r.min_ade),
            consistency: pick(&|r| r.consistency),
            score_accuracy: pick(&|r| r.score_accuracy),
        }
    }

    /// Metric names and accessors in report order.
    pub fn columns() -> [(&'static str, MetricFn); 7] {
        [
            ("success_rate", |m| m.success_rate),
            ("reward", |m| m.reward),
            ("task_time", |m| m.task_time),
            ("log_divergence", |m| m.log_divergence),
            ("min_ade", |m| m.min_ade),
            ("consistency", |m| m.consistency),
            ("score_accuracy", |m| m.score_accuracy),
        ]
    }
}

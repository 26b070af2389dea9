//! Macro-action tree search over frozen trajectory beliefs.

use serde::{Deserialize, Serialize};

use crate::config::{CollisionMode, CostWeights, PlannerConfig};
use crate::decoder::TrajectoryGmm;
use crate::error::{Error, Result};
use crate::geometry::{
    frenet_to_cartesian, obb_overlap, project_to_frenet, rollout_macro_action, wrap_angle, CartesianState, FrenetState,
    MacroAction, OrientedBox, ReferencePath,
};
use crate::nn::tensor::softmax;

/// The discrete macro-actions available at every node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptionSet {
    pub actions: Vec<MacroAction>,
}

impl OptionSet {
    /// Each acceleration paired with zero lateral speed, and with every
    /// lateral speed when listed in `lateral_accelerations`.
    pub fn from_config(p: &PlannerConfig) -> Result<Self> {
        let mut actions = Vec::new();
        for &a in &p.accelerations {
            let lats: Vec<f64> =
                if p.lateral_accelerations.contains(&a) { p.lateral_speeds.clone() } else { vec![0.0] };
            for v in lats {
                let m = MacroAction { accel: a, lateral_speed: v, steps: p.option_length, dt: p.dt };
                if actions.contains(&m) {
                    return Err(Error::Config(format!("duplicate option ({a}, {v})")));
                }
                actions.push(m);
            }
        }
        if actions.is_empty() {
            return Err(Error::Config("the option set is empty".into()));
        }
        Ok(OptionSet { actions })
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Index of the zero-action option used by leaf rollouts.
    pub fn idle(&self) -> usize {
        self.find(0.0, 0.0).unwrap_or(0)
    }

    /// Index of the hardest straight brake.
    pub fn full_brake(&self) -> usize {
        let mut best = 0;
        for (i, m) in self.actions.iter().enumerate() {
            let b = &self.actions[best];
            if m.lateral_speed == 0.0 && (b.lateral_speed != 0.0 || m.accel < b.accel) {
                best = i;
            }
        }
        best
    }

    pub fn find(&self, accel: f64, lateral_speed: f64) -> Option<usize> {
        self.actions.iter().position(|m| m.accel == accel && m.lateral_speed == lateral_speed)
    }
}

/// One predicted future of an agent, resampled onto planner steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeFuture {
    pub prob: f64,
    /// Global pose at planner step `k + 1`.
    pub poses: Vec<[f64; 3]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentFuture {
    pub agent_id: u32,
    pub length: f64,
    pub width: f64,
    pub modes: Vec<ModeFuture>,
}

impl AgentFuture {
    /// Converts a prediction made at `gmm.created_at` into poses for planner
    /// steps `1..=horizon` starting at time `now`. Steps past the prediction
    /// repeat its last point.
    pub fn from_gmm(gmm: &TrajectoryGmm, length: f64, width: f64, now: usize, horizon: usize) -> Self {
        let shift = now.saturating_sub(gmm.created_at);
        let last = gmm.steps - 1;
        let modes = (0..gmm.modes)
            .map(|m| {
                let pts = gmm.global_mode(m);
                let mut heading = gmm.anchor.heading;
                let mut prev = [gmm.anchor.x, gmm.anchor.y];
                if shift > 0 {
                    prev = pts[(shift - 1).min(last)];
                }
                let poses = (0..horizon)
                    .map(|k| {
                        let p = pts[(shift + k).min(last)];
                        let (dx, dy) = (p[0] - prev[0], p[1] - prev[1]);
                        if dx.hypot(dy) > 1e-3 {
                            heading = dy.atan2(dx);
                        }
                        prev = p;
                        [p[0], p[1], heading]
                    })
                    .collect();
                ModeFuture { prob: gmm.probs[m], poses }
            })
            .collect();
        AgentFuture { agent_id: gmm.agent_id, length, width, modes }
    }

    /// Indices of the modes counted by the collision term.
    pub fn qualifying(&self, mode: CollisionMode, p_threshold: f64) -> Vec<usize> {
        match mode {
            CollisionMode::Threshold => (0..self.modes.len()).filter(|&m| self.modes[m].prob >= p_threshold).collect(),
            CollisionMode::ArgmaxOnly => {
                let mut best = 0;
                for m in 1..self.modes.len() {
                    if self.modes[m].prob > self.modes[best].prob {
                        best = m;
                    }
                }
                if self.modes.is_empty() {
                    vec![]
                } else {
                    vec![best]
                }
            }
        }
    }
}

/// Predicted futures held fixed for the duration of one search.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FrozenBelief {
    pub agents: Vec<AgentFuture>,
}

/// Fixed inputs shared by every node of one search.
#[derive(Clone, Debug)]
pub struct PlanContext<'a> {
    pub path: &'a ReferencePath,
    pub belief: &'a FrozenBelief,
    pub ego_length: f64,
    pub ego_width: f64,
    pub corridor: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub collision: f64,
    pub comfort: f64,
    pub route: f64,
    pub speed: f64,
    pub total: f64,
}

/// State carried across a segment boundary for the rate terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentStart {
    pub state: CartesianState,
    pub frenet: FrenetState,
    pub accel: f64,
}

/// Collision term: over agents and qualifying modes, the mode probability
/// when the ego box overlaps the mode's box at any step of the segment.
/// `first_step` is the planner step of `rollout[0]`, counted from 1.
pub fn collision_cost(
    rollout: &[CartesianState],
    first_step: usize,
    ctx: &PlanContext,
    mode: CollisionMode,
    p_threshold: f64,
) -> f64 {
    let ego: Vec<OrientedBox> =
        rollout.iter().map(|s| OrientedBox::new(s.x, s.y, s.heading, ctx.ego_length, ctx.ego_width)).collect();
    let mut total = 0.0;
    for agent in &ctx.belief.agents {
        for m in agent.qualifying(mode, p_threshold) {
            let fut = &agent.modes[m];
            let hit = ego.iter().enumerate().any(|(k, eb)| {
                let idx = (first_step + k - 1).min(fut.poses.len() - 1);
                let [x, y, h] = fut.poses[idx];
                obb_overlap(eb, &OrientedBox::new(x, y, h, agent.length, agent.width))
            });
            if hit {
                total += fut.prob;
            }
        }
    }
    total
}

/// Weighted segment cost. `frenet` and `rollout` are the segment's states,
/// `start` the state the segment leaves from.
#[allow(clippy::too_many_arguments)]
pub fn segment_cost(
    frenet: &[FrenetState],
    rollout: &[CartesianState],
    start: &SegmentStart,
    first_step: usize,
    dt: f64,
    ctx: &PlanContext,
    cfg: &PlannerConfig,
) -> CostBreakdown {
    let n = rollout.len() as f64;
    let collision = collision_cost(rollout, first_step, ctx, cfg.collision_mode, cfg.p_threshold);
    let mut accel = 0.0;
    let mut jerk = 0.0;
    let mut lateral = 0.0;
    let mut route = 0.0;
    let mut speed = 0.0;
    let mut prev_v = start.frenet.s_dot;
    let mut prev_a = start.accel;
    let mut prev_h = start.state.heading;
    for (f, c) in frenet.iter().zip(rollout) {
        let a = (f.s_dot - prev_v) / dt;
        accel += a.abs();
        jerk += ((a - prev_a) / dt).abs();
        lateral += (c.v * wrap_angle(c.heading - prev_h) / dt).abs();
        route += f.l.abs();
        speed += (c.v - ctx.path.speed_limit_at(f.s)).abs();
        prev_v = f.s_dot;
        prev_a = a;
        prev_h = c.heading;
    }
    let comfort = (accel + jerk + lateral) / n;
    let (route, speed) = (route / n, speed / n);
    CostBreakdown { collision, comfort, route, speed, total: weighted(&cfg.weights, collision, comfort, route, speed) }
}

fn weighted(w: &CostWeights, collision: f64, comfort: f64, route: f64, speed: f64) -> f64 {
    w.collision * collision + w.comfort * comfort + w.route * route + w.speed * speed
}

/// Softmax of Q-values over the root options.
pub fn root_prior(q_values: &[f64]) -> Vec<f64> {
    softmax(q_values)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Child {
    Unexpanded,
    Pruned,
    Node(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub parent: Option<usize>,
    pub depth: usize,
    pub option: Option<usize>,
    pub end: SegmentStart,
    pub cost: CostBreakdown,
    pub visits: u64,
    /// Times this node ended an iteration (its expansion plus revisits at
    /// full depth).
    pub evaluations: u64,
    pub value_sum: f64,
    pub prior: Vec<f64>,
    pub children: Vec<Child>,
}

impl TreeNode {
    /// Mean discounted return; 0 before the first visit.
    pub fn q(&self) -> f64 {
        if self.visits == 0 {
            0.0
        } else {
            self.value_sum / self.visits as f64
        }
    }
}

/// Exploration-weighted score of a child with mean value `q`, `visits`
/// visits, prior `prior`, under a parent visited `parent_visits` times.
pub fn uct_score(q: f64, visits: u64, prior: f64, parent_visits: u64, c_p: f64) -> f64 {
    let np = parent_visits.max(1) as f64;
    q + prior * c_p * (2.0 * np.ln() / (visits as f64 + 1.0)).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchTree {
    pub nodes: Vec<TreeNode>,
    pub depth: usize,
}

impl SearchTree {
    /// Child maximizing [`uct_score`]; ties go to the lowest option index.
    /// `None` when every child is pruned.
    pub fn select_child(&self, node: usize, c_p: f64) -> Option<usize> {
        let n = &self.nodes[node];
        let mut best: Option<(f64, usize)> = None;
        for (i, c) in n.children.iter().enumerate() {
            let (q, visits) = match c {
                Child::Pruned => continue,
                Child::Unexpanded => (0.0, 0),
                Child::Node(id) => (self.nodes[*id].q(), self.nodes[*id].visits),
            };
            let score = uct_score(q, visits, n.prior[i], n.visits, c_p);
            if best.is_none_or(|(b, _)| score > b) {
                best = Some((score, i));
            }
        }
        best.map(|(_, i)| i)
    }

    /// Child with the most visits, ties to the higher value then the lower
    /// index.
    pub fn best_child(&self, node: usize) -> Option<usize> {
        let mut best: Option<(u64, f64, usize)> = None;
        for (i, c) in self.nodes[node].children.iter().enumerate() {
            if let Child::Node(id) = c {
                let n = &self.nodes[*id];
                let better = match best {
                    None => true,
                    Some((v, q, _)) => n.visits > v || (n.visits == v && n.q() > q),
                };
                if better {
                    best = Some((n.visits, n.q(), i));
                }
            }
        }
        best.map(|(_, _, i)| i)
    }

    pub fn child(&self, node: usize, option: usize) -> Option<usize> {
        match self.nodes[node].children[option] {
            Child::Node(id) => Some(id),
            _ => None,
        }
    }

    /// Greedy most-visited option sequence from the root.
    pub fn principal_variation(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut node = 0;
        while let Some(o) = self.best_child(node) {
            out.push(o);
            node = self.child(node, o).expect("best child exists");
        }
        out
    }

    pub fn dump(&self) -> TreeDump {
        TreeDump {
            depth: self.depth,
            nodes: self
                .nodes
                .iter()
                .enumerate()
                .map(|(id, n)| DumpNode {
                    id,
                    parent: n.parent,
                    depth: n.depth,
                    option: n.option,
                    visits: n.visits,
                    q: n.q(),
                    prior: n.parent.map(|p| self.nodes[p].prior[n.option.expect("non-root has option")]),
                    cost: n.cost.total,
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpNode {
    pub id: usize,
    pub parent: Option<usize>,
    pub depth: usize,
    pub option: Option<usize>,
    pub visits: u64,
    pub q: f64,
    /// Prior of this node's option at its parent.
    pub prior: Option<f64>,
    pub cost: f64,
}

/// JSON-serializable tree snapshot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeDump {
    pub depth: usize,
    pub nodes: Vec<DumpNode>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanResult {
    /// Option indices, first to execute first.
    pub sequence: Vec<usize>,
    /// States of the first option, one per step.
    pub first_rollout: Vec<CartesianState>,
    pub root_visits: Vec<u64>,
    pub root_q: Vec<f64>,
    pub root_prior: Vec<f64>,
    pub diagnostic: Option<String>,
}

pub struct Planner<'a> {
    pub cfg: &'a PlannerConfig,
    pub options: &'a OptionSet,
}

impl Planner<'_> {
    fn segment_discount(&self) -> f64 {
        self.cfg.gamma.powf(self.cfg.option_length as f64 * self.cfg.dt)
    }

    /// Rolls option `o` out of `start`; `None` when it leaves the corridor.
    fn expand_segment(
        &self,
        start: &SegmentStart,
        o: usize,
        depth: usize,
        ctx: &PlanContext,
    ) -> Option<(SegmentStart, CostBreakdown, Vec<CartesianState>)> {
        let m = &self.options.actions[o];
        let frenet = rollout_macro_action(&start.frenet, m);
        if frenet.iter().any(|f| f.l.abs() > ctx.corridor) {
            return None;
        }
        let (cart, _) = frenet_to_cartesian(&frenet, ctx.path, m.accel);
        let first_step = depth * self.cfg.option_length + 1;
        let cost = segment_cost(&frenet, &cart, start, first_step, self.cfg.dt, ctx, self.cfg);
        let n = frenet.len();
        let accel = if n >= 2 {
            (frenet[n - 1].s_dot - frenet[n - 2].s_dot) / self.cfg.dt
        } else {
            (frenet[0].s_dot - start.frenet.s_dot) / self.cfg.dt
        };
        let end = SegmentStart {
            state: *cart.last().expect("non-empty option"),
            frenet: *frenet.last().expect("non-empty option"),
            accel,
        };
        Some((end, cost, cart))
    }

    /// Costs of idle segments from `start` at `depth` to the search depth.
    fn default_rollout(&self, start: &SegmentStart, depth: usize, max_depth: usize, ctx: &PlanContext) -> Vec<f64> {
        let idle = self.options.idle();
        let mut costs = Vec::new();
        let mut s = *start;
        for d in depth..max_depth {
            match self.expand_segment(&s, idle, d, ctx) {
                Some((end, cost, _)) => {
                    costs.push(cost.total);
                    s = end;
                }
                None => break,
            }
        }
        costs
    }

    /// Runs the search from `ego` and returns the chosen sequence along with
    /// the tree.
    pub fn plan(&self, ego: &CartesianState, ctx: &PlanContext, prior: &[f64]) -> Result<(PlanResult, SearchTree)> {
        let k = self.options.len();
        if prior.len() != k {
            return Err(Error::Shape(format!("prior has {} entries for {k} options", prior.len())));
        }
        if self.cfg.iterations == 0 {
            return Err(Error::Config("planner iterations must be at least 1".into()));
        }
        let depth = (self.cfg.horizon / self.cfg.option_length).max(1);
        let root_frenet = match project_to_frenet(ego, ctx.path, ctx.corridor) {
            Ok(p) => p.state,
            Err(e) => return Ok((self.brake_fallback(ego, prior, format!("{e}")), self.empty_tree(ego, prior, depth))),
        };
        let mut tree = SearchTree {
            nodes: vec![TreeNode {
                parent: None,
                depth: 0,
                option: None,
                end: SegmentStart { state: *ego, frenet: root_frenet, accel: ego.a },
                cost: CostBreakdown::default(),
                visits: 0,
                evaluations: 0,
                value_sum: 0.0,
                prior: prior.to_vec(),
                children: vec![Child::Unexpanded; k],
            }],
            depth,
        };
        let uniform = vec![1.0 / k as f64; k];
        let discount = self.segment_discount();
        for _ in 0..self.cfg.iterations {
            let mut node = 0;
            let mut tail: Vec<f64> = Vec::new();
            loop {
                if tree.nodes[node].depth == depth {
                    tree.nodes[node].evaluations += 1;
                    break;
                }
                let Some(o) = tree.select_child(node, self.cfg.c_p) else {
                    // Dead end: evaluate in place.
                    tree.nodes[node].evaluations += 1;
                    break;
                };
                match tree.nodes[node].children[o] {
                    Child::Node(id) => node = id,
                    Child::Pruned => unreachable!("pruned children are never selected"),
                    Child::Unexpanded => {
                        let d = tree.nodes[node].depth;
                        let start = tree.nodes[node].end;
                        match self.expand_segment(&start, o, d, ctx) {
                            None => {
                                tree.nodes[node].children[o] = Child::Pruned;
                                continue;
                            }
                            Some((end, cost, _)) => {
                                let id = tree.nodes.len();
                                tree.nodes.push(TreeNode {
                                    parent: Some(node),
                                    depth: d + 1,
                                    option: Some(o),
                                    end,
                                    cost,
                                    visits: 0,
                                    evaluations: 1,
                                    value_sum: 0.0,
                                    prior: uniform.clone(),
                                    children: vec![Child::Unexpanded; k],
                                });
                                tree.nodes[node].children[o] = Child::Node(id);
                                if self.cfg.leaf_rollout {
                                    tail = self.default_rollout(&end, d + 1, depth, ctx);
                                }
                                node = id;
                                break;
                            }
                        }
                    }
                }
            }
            // Back up: each node receives the negative discounted cost from
            // its own segment onward.
            let mut ret = tail.iter().rev().fold(0.0, |acc, c| -c + discount * acc);
            let mut cur = Some(node);
            while let Some(id) = cur {
                let n = &mut tree.nodes[id];
                if n.parent.is_some() {
                    ret = -n.cost.total + discount * ret;
                }
                n.visits += 1;
                n.value_sum += ret;
                cur = n.parent;
            }
        }
        let sequence = tree.principal_variation();
        if sequence.is_empty() {
            return Ok((self.brake_fallback(ego, prior, "no option stays inside the corridor".into()), tree));
        }
        let (_, _, first_rollout) =
            self.expand_segment(&tree.nodes[0].end, sequence[0], 0, ctx).expect("chosen option is feasible");
        let root = &tree.nodes[0];
        let (root_visits, root_q) = root
            .children
            .iter()
            .map(|c| match c {
                Child::Node(id) => (tree.nodes[*id].visits, tree.nodes[*id].q()),
                _ => (0, 0.0),
            })
            .unzip();
        let result =
            PlanResult { sequence, first_rollout, root_visits, root_q, root_prior: prior.to_vec(), diagnostic: None };
        Ok((result, tree))
    }

    fn empty_tree(&self, ego: &CartesianState, prior: &[f64], depth: usize) -> SearchTree {
        SearchTree {
            nodes: vec![TreeNode {
                parent: None,
                depth: 0,
                option: None,
                end: SegmentStart { state: *ego, frenet: FrenetState::default(), accel: ego.a },
                cost: CostBreakdown::default(),
                visits: 0,
                evaluations: 0,
                value_sum: 0.0,
                prior: prior.to_vec(),
                children: vec![Child::Pruned; self.options.len()],
            }],
            depth,
        }
    }

    /// Straight-line full brake along the current heading.
    fn brake_fallback(&self, ego: &CartesianState, prior: &[f64], why: String) -> PlanResult {
        let o = self.options.full_brake();
        let m = &self.options.actions[o];
        let start = FrenetState { s: 0.0, s_dot: ego.v.max(0.0), l: 0.0, l_dot: 0.0 };
        let (sin, cos) = ego.heading.sin_cos();
        let first_rollout = rollout_macro_action(&start, m)
            .into_iter()
            .map(|f| CartesianState {
                x: ego.x + f.s * cos,
                y: ego.y + f.s * sin,
                heading: ego.heading,
                v: f.s_dot,
                a: m.accel,
            })
            .collect();
        PlanResult {
            sequence: vec![o],
            first_rollout,
            root_visits: vec![0; self.options.len()],
            root_q: vec![0.0; self.options.len()],
            root_prior: prior.to_vec(),
            diagnostic: Some(why),
        }
    }
}

/// Discounted cost of executing `sequence` from `ego` without search; `None`
/// when any option leaves the corridor. Matches the value the search assigns
/// to a full-depth path.
pub fn sequence_cost(
    cfg: &PlannerConfig,
    options: &OptionSet,
    ego: &CartesianState,
    ctx: &PlanContext,
    sequence: &[usize],
) -> Option<f64> {
    let planner = Planner { cfg, options };
    let frenet = project_to_frenet(ego, ctx.path, ctx.corridor).ok()?.state;
    let mut s = SegmentStart { state: *ego, frenet, accel: ego.a };
    let discount = planner.segment_discount();
    let mut total = 0.0;
    let mut weight = 1.0;
    for (d, &o) in sequence.iter().enumerate() {
        let (end, cost, _) = planner.expand_segment(&s, o, d, ctx)?;
        total += weight * cost.total;
        weight *= discount;
        s = end;
    }
    Some(total)
}

use serde::{Deserialize, Serialize};

use super::scenario::{AgentTrack, Scenario, TrackPoint};
use crate::config::SimulatorConfig;
use crate::error::{Error, Result};
use crate::geometry::{obb_overlap, project_to_frenet, CartesianState, OrientedBox, ReferencePath};

/// Intelligent-driver-model constants; the desired speed comes from the route.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Idm {
    pub headway: f64,
    pub max_accel: f64,
    pub comfort_decel: f64,
    pub min_gap: f64,
    pub max_decel: f64,
}

impl Default for Idm {
    fn default() -> Self {
        Idm { headway: 1.5, max_accel: 2.0, comfort_decel: 3.0, min_gap: 2.0, max_decel: 9.0 }
    }
}

impl Idm {
    /// Acceleration for speed `v` toward `desired`, given the bumper gap to a
    /// leader and the closing speed `v - v_leader`.
    pub fn accel(&self, v: f64, desired: f64, leader: Option<(f64, f64)>) -> f64 {
        let free = 1.0 - (v / desired.max(0.1)).powi(4);
        let interaction = match leader {
            Some((gap, closing)) => {
                let wanted = self.min_gap
                    + (v * self.headway + v * closing / (2.0 * (self.max_accel * self.comfort_decel).sqrt())).max(0.0);
                (wanted / gap.max(0.01)).powi(2)
            }
            None => 0.0,
        };
        (self.max_accel * (free - interaction)).max(-self.max_decel)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    Collision,
    OffRoute,
    Goal,
    Timeout,
}

impl Termination {
    pub fn name(self) -> &'static str {
        match self {
            Termination::Collision => "collision",
            Termination::OffRoute => "off-route",
            Termination::Goal => "goal",
            Termination::Timeout => "timeout",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub t: usize,
    pub reward: f64,
    pub r_col: f64,
    pub r_prog: f64,
    pub r_expert: f64,
    pub done: bool,
    pub termination: Option<Termination>,
}

/// World state at one step: the ego and every scenario agent, in scenario order.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub ego: CartesianState,
    pub agents: Vec<TrackPoint>,
}

#[derive(Clone, Debug)]
struct Follower {
    index: usize,
    s: f64,
    v: f64,
}

/// One closed-loop run of a scenario.
#[derive(Clone, Debug)]
pub struct Episode<'a> {
    pub scenario: &'a Scenario,
    config: SimulatorConfig,
    idm: Idm,
    followers: Vec<Follower>,
    frames: Vec<Frame>,
    pub t: usize,
    pub total_reward: f64,
    pub termination: Option<Termination>,
}

impl<'a> Episode<'a> {
    pub fn new(scenario: &'a Scenario, config: &SimulatorConfig) -> Result<Self> {
        scenario.validate()?;
        let mut followers = Vec::new();
        for (index, a) in scenario.agents.iter().enumerate() {
            if a.reactive {
                let route = a.route.as_ref().expect("validated");
                let p = project_to_frenet(&a.track[0].to_state(), route, f64::INFINITY)?;
                followers.push(Follower { index, s: p.state.s, v: a.track[0].v });
            }
        }
        let mut ego = scenario.ego.expert[0].to_state();
        ego.a = 0.0;
        let frame = Frame { ego, agents: scenario.agents.iter().map(|a| a.track[0]).collect() };
        Ok(Episode {
            scenario,
            config: config.clone(),
            idm: Idm::default(),
            followers,
            frames: vec![frame],
            t: 0,
            total_reward: 0.0,
            termination: None,
        })
    }

    pub fn done(&self) -> bool {
        self.termination.is_some()
    }

    pub fn ego(&self) -> &CartesianState {
        &self.frames[self.t].ego
    }

    pub fn frame(&self, t: usize) -> &Frame {
        &self.frames[t]
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn ego_route(&self) -> &ReferencePath {
        &self.scenario.ego.route
    }

    pub fn ego_box(&self, s: &CartesianState) -> OrientedBox {
        let e = &self.scenario.ego;
        OrientedBox::new(s.x, s.y, s.heading, e.length, e.width)
    }

    pub fn agent_box(a: &AgentTrack, p: &TrackPoint) -> OrientedBox {
        OrientedBox::new(p.x, p.y, p.heading, a.length, a.width)
    }

    /// Advances one step with the ego placed at `ego_next`.
    pub fn step(&mut self, ego_next: &CartesianState) -> Result<StepResult> {
        if self.done() {
            return Err(Error::Usage("cannot step a finished episode".into()));
        }
        let prev = &self.frames[self.t];
        let next_t = self.t + 1;
        let mut agents: Vec<TrackPoint> = self.scenario.agents.iter().map(|a| a.track[next_t]).collect();
        let moves = self.follower_moves(prev);
        for (f, (s, v)) in self.followers.iter_mut().zip(moves) {
            f.s = s;
            f.v = v;
            let route = self.scenario.agents[f.index].route.as_ref().expect("validated");
            let ([x, y], heading) = route.point_at(s);
            agents[f.index] = TrackPoint { x, y, heading, v };
        }
        let r_prog = (ego_next.x - prev.ego.x).hypot(ego_next.y - prev.ego.y);
        let expert = &self.scenario.ego.expert[next_t];
        let r_expert = (ego_next.x - expert.x).hypot(ego_next.y - expert.y);
        self.frames.push(Frame { ego: *ego_next, agents });
        self.t = next_t;
        let termination = self.check_termination();
        let r_col = if termination == Some(Termination::Collision) { self.config.collision_penalty } else { 0.0 };
        let reward = r_col + r_prog - self.config.expert_weight * r_expert;
        self.total_reward += reward;
        self.termination = termination;
        Ok(StepResult { t: next_t, reward, r_col, r_prog, r_expert, done: termination.is_some(), termination })
    }

    fn follower_moves(&self, prev: &Frame) -> Vec<(f64, f64)> {
        let dt = self.scenario.dt;
        let sc = self.scenario;
        self.followers
            .iter()
            .map(|f| {
                let me = &sc.agents[f.index];
                let route = me.route.as_ref().expect("validated");
                let mut leader: Option<(f64, f64, f64)> = None;
                let mut consider = |state: CartesianState, length: f64| {
                    if let Ok(p) = project_to_frenet(&state, route, f64::INFINITY) {
                        let ahead = p.state.s - f.s;
                        if !p.clamped && p.state.l.abs() <= 2.0 && ahead > 0.0 && ahead < 150.0 {
                            let gap = ahead - 0.5 * (me.length + length);
                            if leader.is_none_or(|(g, ..)| gap < g) {
                                leader = Some((gap, f.v - p.state.s_dot, p.state.s));
                            }
                        }
                    }
                };
                consider(prev.ego, sc.ego.length);
                for (j, other) in sc.agents.iter().enumerate() {
                    if j != f.index {
                        consider(prev.agents[j].to_state(), other.length);
                    }
                }
                let desired = route.speed_limit_at(f.s);
                let a = self.idm.accel(f.v, desired, leader.map(|(g, c, _)| (g, c)));
                let v = (f.v + a * dt).max(0.0);
                // Trapezoidal position update, exact for a stop within the step.
                let s = if f.v + a * dt < 0.0 { f.s + f.v * f.v / (2.0 * -a) } else { f.s + 0.5 * (f.v + v) * dt };
                (s, v)
            })
            .collect()
    }

    /// Termination at the current step; collision takes precedence over
    /// leaving the route, reaching the goal and running out of time.
    pub fn check_termination(&self) -> Option<Termination> {
        let frame = &self.frames[self.t];
        let ego_box = self.ego_box(&frame.ego);
        let collided =
            self.scenario.agents.iter().zip(&frame.agents).any(|(a, p)| obb_overlap(&ego_box, &Self::agent_box(a, p)));
        if collided {
            return Some(Termination::Collision);
        }
        let route = &self.scenario.ego.route;
        let proj = project_to_frenet(&frame.ego, route, f64::INFINITY).expect("infinite corridor");
        if proj.state.l.abs() > self.config.corridor {
            return Some(Termination::OffRoute);
        }
        if proj.state.s >= self.scenario.ego.goal_s {
            return Some(Termination::Goal);
        }
        if self.t >= self.scenario.duration {
            return Some(Termination::Timeout);
        }
        None
    }

    /// Mean per-step distance between the ego and the expert log.
    pub fn log_divergence(&self) -> f64 {
        if self.t == 0 {
            return 0.0;
        }
        let total: f64 = (1..=self.t)
            .map(|k| {
                let e = &self.frames[k].ego;
                let x = &self.scenario.ego.expert[k];
                (e.x - x.x).hypot(e.y - x.y)
            })
            .sum();
        total / self.t as f64
    }
}

/// Plays the expert log to the end of the scenario, ignoring termination
/// other than the clock, and returns every frame.
pub fn replay_expert(scenario: &Scenario, config: &SimulatorConfig) -> Result<Vec<Frame>> {
    let mut ep = Episode::new(scenario, config)?;
    let mut prev = scenario.ego.expert[0];
    for k in 1..=scenario.duration {
        let p = scenario.ego.expert[k];
        let a = (p.v - prev.v) / scenario.dt;
        let state = CartesianState { a, ..p.to_state() };
        ep.termination = None;
        ep.step(&state)?;
        prev = p;
    }
    Ok(ep.frames)
}

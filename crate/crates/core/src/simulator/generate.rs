//! Synthetic scenario suite. Every non-ego agent that matters carries one of
//! two intents whose trajectories coincide until a reveal step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::episode::replay_expert;
use super::scenario::{
    AgentTrack, EgoSpec, LaneType, MapPolyline, Scenario, ScenarioKind, TrackPoint, SCENARIO_SCHEMA_VERSION,
};
use crate::config::SimulatorConfig;
use crate::error::{Error, Result};
use crate::geometry::{obb_overlap, OrientedBox, ReferencePath};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub duration: usize,
    pub dt: f64,
    /// Upper bound on non-ego agents.
    pub max_agents: usize,
    pub speed_limit: f64,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        GeneratorParams { duration: 200, dt: 0.1, max_agents: 8, speed_limit: 10.0 }
    }
}

const EGO_LENGTH: f64 = 4.6;
const EGO_WIDTH: f64 = 1.9;
const SPACING: f64 = 2.0;

/// Points every `SPACING` meters along a polyline, ends included.
fn resample(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let path = ReferencePath::with_uniform_limit(points.to_vec(), 1.0).expect("valid polyline");
    let n = (path.length() / SPACING).ceil() as usize;
    (0..=n).map(|k| path.point_at(path.length() * k as f64 / n as f64).0).collect()
}

/// Shifts a polyline sideways by `d` (left positive).
fn offset(points: &[[f64; 2]], d: f64) -> Vec<[f64; 2]> {
    let n = points.len();
    (0..n)
        .map(|i| {
            let a = points[i.saturating_sub(1)];
            let b = points[(i + 1).min(n - 1)];
            let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
            let len = dx.hypot(dy);
            [points[i][0] - d * dy / len, points[i][1] + d * dx / len]
        })
        .collect()
}

fn path(points: Vec<[f64; 2]>, limit: f64) -> ReferencePath {
    ReferencePath::with_uniform_limit(points, limit).expect("generator paths are valid")
}

/// Target-speed phases: from `start_step` on, move toward `speed` with the
/// given acceleration magnitude.
#[derive(Clone, Copy, Debug)]
struct Phase {
    start_step: usize,
    speed: f64,
    rate: f64,
}

fn drive(route: &ReferencePath, s0: f64, v0: f64, phases: &[Phase], steps: usize, dt: f64) -> Vec<TrackPoint> {
    drive_along(route, s0, v0, phases, steps, dt).into_iter().map(|(_, p)| p).collect()
}

/// Integrates a phase schedule along `route` from `(s0, v0)`, returning the
/// arc length with each point.
fn drive_along(
    route: &ReferencePath,
    s0: f64,
    v0: f64,
    phases: &[Phase],
    steps: usize,
    dt: f64,
) -> Vec<(f64, TrackPoint)> {
    let mut s = s0;
    let mut v = v0;
    let mut out = Vec::with_capacity(steps + 1);
    let point = |s: f64, v: f64| {
        let ([x, y], heading) = route.point_at(s);
        (s, TrackPoint { x, y, heading, v })
    };
    out.push(point(s, v));
    for k in 0..steps {
        let phase = phases.iter().rev().find(|p| p.start_step <= k);
        let next_v = match phase {
            Some(p) if v < p.speed => (v + p.rate * dt).min(p.speed),
            Some(p) if v > p.speed => (v - p.rate * dt).max(p.speed),
            _ => v,
        };
        s += 0.5 * (v + next_v) * dt;
        v = next_v;
        out.push(point(s, v));
    }
    out
}

fn car(rng: &mut ChaCha8Rng) -> (f64, f64) {
    (rng.random_range(4.2..4.9), rng.random_range(1.8..2.0))
}

struct Builder {
    rng: ChaCha8Rng,
    params: GeneratorParams,
    map: Vec<MapPolyline>,
    agents: Vec<AgentTrack>,
}

impl Builder {
    fn polyline(&mut self, lane_type: LaneType, points: Vec<[f64; 2]>) {
        let id = self.map.len() as u32 + 1;
        self.map.push(MapPolyline { id, lane_type, points });
    }

    fn agent(&mut self, track: Vec<TrackPoint>, intent: Option<&str>, reveal: Option<usize>) -> usize {
        let (length, width) = car(&mut self.rng);
        self.agents.push(AgentTrack {
            id: self.agents.len() as u32 + 1,
            length,
            width,
            reactive: false,
            route: None,
            intent: intent.map(str::to_string),
            reveal_step: reveal,
            track,
            occlusions: Vec::new(),
        });
        self.agents.len() - 1
    }

    fn follower(&mut self, route: ReferencePath, s0: f64, v0: f64) {
        let ([x, y], heading) = route.point_at(s0);
        let (length, width) = car(&mut self.rng);
        let start = TrackPoint { x, y, heading, v: v0 };
        self.agents.push(AgentTrack {
            id: self.agents.len() as u32 + 1,
            length,
            width,
            reactive: true,
            route: Some(route),
            intent: None,
            reveal_step: None,
            track: vec![start; self.params.duration + 1],
            occlusions: Vec::new(),
        });
    }

    fn chance(&mut self, p: f64) -> bool {
        self.rng.random_bool(p)
    }

    fn reveal(&mut self) -> usize {
        self.rng.random_range(10..=25)
    }
}

/// Creates one scenario; identical `(kind, seed, params)` give identical output.
pub fn generate_scenario(kind: ScenarioKind, seed: u64, params: &GeneratorParams) -> Result<Scenario> {
    if params.duration == 0 || !(params.dt > 0.0) || !(params.speed_limit > 0.0) {
        return Err(Error::Config("generator needs positive duration, dt and speed limit".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(kind as u64 + 1);
    let mut b = Builder { rng, params: params.clone(), map: Vec::new(), agents: Vec::new() };
    let ego = match kind {
        ScenarioKind::Intersection => intersection(&mut b)?,
        ScenarioKind::Merge => merge(&mut b)?,
        ScenarioKind::LaneFollow => lane_follow(&mut b)?,
    };
    let mut agents = b.agents;
    agents.truncate(params.max_agents);
    let mut scenario = Scenario {
        schema_version: SCENARIO_SCHEMA_VERSION,
        id: format!("{}-{seed}", kind.name()),
        kind,
        seed,
        dt: params.dt,
        duration: params.duration,
        map: b.map,
        agents,
        ego,
    };
    scenario.ego.expert = expert_log(&scenario, params.speed_limit);
    let frames = replay_expert(
        &scenario,
        &SimulatorConfig { dt: params.dt, duration: params.duration, ..SimulatorConfig::default() },
    )?;
    for (i, a) in scenario.agents.iter_mut().enumerate() {
        if a.reactive {
            a.track = frames.iter().map(|f| f.agents[i]).collect();
        }
    }
    scenario.validate()?;
    Ok(scenario)
}

fn ego_spec(route: ReferencePath, goal_s: f64, s0: f64, v0: f64) -> EgoSpec {
    let ([x, y], heading) = route.point_at(s0);
    EgoSpec {
        length: EGO_LENGTH,
        width: EGO_WIDTH,
        route,
        // Only the start is known until the expert search runs.
        expert: vec![TrackPoint { x, y, heading, v: v0 }],
        goal_s,
    }
}

fn intersection(b: &mut Builder) -> Result<EgoSpec> {
    let lim = b.params.speed_limit;
    let n = b.params.duration;
    let dt = b.params.dt;
    let ego_route = path(vec![[-40.0, 0.0], [70.0, 0.0]], lim);
    let v0 = b.rng.random_range(6.0..9.0);
    let ego = ego_spec(ego_route, 95.0, 5.0, v0);
    let ego_arrival = 35.0 / v0;

    b.polyline(LaneType::Lane, resample(&[[-80.0, 0.0], [70.0, 0.0]]));
    b.polyline(LaneType::Lane, resample(&[[70.0, 3.5], [-80.0, 3.5]]));
    b.polyline(LaneType::Edge, resample(&[[-80.0, -1.75], [-3.5, -1.75]]));
    b.polyline(LaneType::Edge, resample(&[[3.5, -1.75], [70.0, -1.75]]));
    b.polyline(LaneType::Lane, resample(&[[1.75, -60.0], [1.75, 60.0]]));
    b.polyline(LaneType::Lane, resample(&[[-1.75, 60.0], [-1.75, -60.0]]));
    b.polyline(LaneType::Crosswalk, resample(&[[-3.5, -6.0], [3.5, -6.0]]));
    b.polyline(LaneType::Crosswalk, resample(&[[3.5, 9.5], [-3.5, 9.5]]));

    let crossing = |b: &mut Builder, route: ReferencePath, stop_s: f64, conflict_s: f64| {
        let v = b.rng.random_range(6.0..9.0);
        let arrival = ego_arrival + b.rng.random_range(-1.0..1.0);
        let s0 = (conflict_s - v * arrival).max(0.0);
        // Latest reveal that still allows a 4 m/s² stop before the line.
        let latest = ((stop_s - s0 - v * v / 8.0) / v / dt).floor();
        let yield_ok = latest >= 10.0;
        let reveal = if yield_ok { b.rng.random_range(10..=(latest as usize).min(25)) } else { b.reveal() };
        let go = !yield_ok || b.chance(0.5);
        let phases = if go {
            vec![Phase { start_step: reveal, speed: lim, rate: 1.0 }]
        } else {
            let d = stop_s - (s0 + v * reveal as f64 * dt);
            let release = b.rng.random_range(90..=120);
            vec![
                Phase { start_step: reveal, speed: 0.0, rate: v * v / (2.0 * d) },
                Phase { start_step: release, speed: lim, rate: 2.0 },
            ]
        };
        let track = drive(&route, s0, v, &phases, n, dt);
        b.agent(track, Some(if go { "go" } else { "yield" }), Some(reveal))
    };

    let first = crossing(b, path(vec![[1.75, -60.0], [1.75, 60.0]], lim), 54.0, 60.0);
    if b.chance(0.4) {
        let start = b.rng.random_range(3..10);
        let len = b.rng.random_range(5..15);
        b.agents[first].occlusions.push([start, start + len]);
    }
    if b.chance(0.5) {
        crossing(b, path(vec![[-1.75, 60.0], [-1.75, -60.0]], lim), 50.5, 60.0);
    }
    if b.chance(0.7) {
        let gap = b.rng.random_range(12.0..20.0);
        b.follower(path(vec![[-80.0, 0.0], [70.0, 0.0]], lim), 45.0 - gap, v0);
    }
    if b.chance(0.5) {
        let v = b.rng.random_range(6.0..9.0);
        let route = path(vec![[70.0, 3.5], [-80.0, 3.5]], lim);
        let s0 = b.rng.random_range(0.0..30.0);
        b.agent(drive(&route, s0, v, &[], n, dt), None, None);
    }
    Ok(ego)
}

fn merge(b: &mut Builder) -> Result<EgoSpec> {
    let lim = b.params.speed_limit;
    let n = b.params.duration;
    let dt = b.params.dt;
    let ego_route = path(vec![[-40.0, 0.0], [110.0, 0.0]], lim);
    let v0 = b.rng.random_range(7.0..9.0);
    let ego = ego_spec(ego_route, 125.0, 5.0, v0);

    let ramp_pts = vec![
        [-60.0, -3.5],
        [20.0, -3.5],
        [25.0, -3.3],
        [30.0, -2.7],
        [35.0, -1.7],
        [40.0, -0.6],
        [45.0, 0.0],
        [110.0, 0.0],
    ];
    b.polyline(LaneType::Lane, resample(&[[-80.0, 0.0], [110.0, 0.0]]));
    b.polyline(LaneType::Lane, resample(&[[-80.0, 3.5], [110.0, 3.5]]));
    b.polyline(LaneType::Lane, resample(&ramp_pts[..7]));
    b.polyline(LaneType::Edge, resample(&[[-80.0, 5.25], [110.0, 5.25]]));
    b.polyline(LaneType::Edge, resample(&[[-60.0, -5.25], [20.0, -5.25], [45.0, -1.75], [110.0, -1.75]]));

    let ramp = path(ramp_pts, lim);
    let v = v0 + b.rng.random_range(-0.5..0.5);
    // Ramp starts 20 m behind the ego route origin.
    let s0 = 25.0 + b.rng.random_range(-5.0..5.0);
    let reveal = b.reveal();
    let ahead = b.chance(0.5);
    let phases = if ahead {
        vec![Phase { start_step: reveal, speed: lim + 1.0, rate: 1.5 }]
    } else {
        vec![Phase { start_step: reveal, speed: 4.0, rate: 2.0 }, Phase { start_step: 90, speed: lim, rate: 1.5 }]
    };
    b.agent(
        drive(&ramp, s0, v, &phases, n, dt),
        Some(if ahead { "merge-ahead" } else { "merge-behind" }),
        Some(reveal),
    );
    if b.chance(0.7) {
        let gap = b.rng.random_range(12.0..20.0);
        b.follower(path(vec![[-80.0, 0.0], [110.0, 0.0]], lim), 45.0 - gap, v0);
    }
    if b.chance(0.5) {
        let v = b.rng.random_range(7.0..10.0);
        let route = path(vec![[-80.0, 3.5], [110.0, 3.5]], lim);
        let s0 = b.rng.random_range(30.0..60.0);
        b.agent(drive(&route, s0, v, &[], n, dt), None, None);
    }
    Ok(ego)
}

fn lane_follow(b: &mut Builder) -> Result<EgoSpec> {
    let lim = b.params.speed_limit;
    let n = b.params.duration;
    let dt = b.params.dt;
    let radius = b.rng.random_range(30.0..60.0);
    let sweep = b.rng.random_range(0.6..1.2);
    let mut centre = vec![[-30.0, 0.0], [0.0, 0.0]];
    let arc_steps = ((radius * sweep) / SPACING).ceil() as usize;
    for k in 1..=arc_steps {
        let a = sweep * k as f64 / arc_steps as f64;
        centre.push([radius * a.sin(), radius * (1.0 - a.cos())]);
    }
    let end = *centre.last().unwrap();
    centre.push([end[0] + 30.0 * sweep.cos(), end[1] + 30.0 * sweep.sin()]);
    let route = path(centre.clone(), lim);
    let v0 = b.rng.random_range(6.0..9.0);
    let goal = route.length() - 10.0;
    let ego = ego_spec(route.clone(), goal, 10.0, v0);

    b.polyline(LaneType::Lane, resample(&centre));
    let left = offset(&centre, 3.5);
    b.polyline(LaneType::Lane, resample(&left));
    b.polyline(LaneType::Edge, resample(&offset(&centre, -1.75)));
    b.polyline(LaneType::Edge, resample(&offset(&centre, 5.25)));

    let gap = b.rng.random_range(15.0..30.0);
    let v = b.rng.random_range(6.0..9.0);
    let reveal = b.reveal();
    let brake = b.chance(0.5);
    let phases = if brake {
        let hold = b.rng.random_range(20..40);
        let decel = b.rng.random_range(3.0..4.0);
        vec![
            Phase { start_step: reveal, speed: 0.0, rate: decel },
            Phase { start_step: reveal + 30 + hold, speed: lim, rate: 1.5 },
        ]
    } else {
        let cruise = b.rng.random_range(7.0..10.0);
        vec![Phase { start_step: reveal, speed: cruise, rate: 1.0 }]
    };
    b.agent(drive(&route, 10.0 + gap, v, &phases, n, dt), Some(if brake { "brake" } else { "cruise" }), Some(reveal));
    if b.chance(0.7) {
        let back = b.rng.random_range(12.0..20.0);
        let mut pts = vec![[-30.0 - back - 10.0, 0.0]];
        pts.extend_from_slice(&centre);
        b.follower(path(pts, lim), 20.0, v0);
    }
    if b.chance(0.5) {
        let v = b.rng.random_range(6.0..10.0);
        let lane = path(left, lim);
        let s0 = b.rng.random_range(0.0..40.0);
        b.agent(drive(&lane, s0, v, &[], n, dt), None, None);
    }
    Ok(ego)
}

/// Searches simple speed profiles for the one that reaches the goal soonest
/// (or travels furthest) while keeping an inflated ego box clear of every
/// replayed agent.
fn expert_log(sc: &Scenario, limit: f64) -> Vec<TrackPoint> {
    let start = sc.ego.expert[0];
    let route = &sc.ego.route;
    let s0 =
        crate::geometry::project_to_frenet(&start.to_state(), route, f64::INFINITY).expect("infinite corridor").state.s;
    let n = sc.duration;
    let dt = sc.dt;
    let switch_steps: Vec<usize> = (0..=20).map(|k| k * 5).chain([n + 1]).collect();
    let mut best: Option<((usize, f64), Vec<TrackPoint>)> = None;
    let mut fallback: Option<(usize, Vec<TrackPoint>)> = None;
    for v1 in 0..=(limit.floor() as usize) {
        for &t1 in &switch_steps {
            let phases = [
                Phase { start_step: 0, speed: v1 as f64, rate: if (v1 as f64) < start.v { 3.0 } else { 2.0 } },
                Phase { start_step: t1, speed: limit, rate: 2.0 },
            ];
            let along = drive_along(route, s0, start.v, &phases, n, dt);
            let mut reached = None;
            let mut first_hit = None;
            for (k, (s, p)) in along.iter().enumerate() {
                if *s >= sc.ego.goal_s {
                    reached = Some(k);
                    break;
                }
                let ego = OrientedBox::new(p.x, p.y, p.heading, EGO_LENGTH + 1.0, EGO_WIDTH + 0.6);
                let hit = sc.agents.iter().filter(|a| !a.reactive).any(|a| {
                    let q = &a.track[k];
                    obb_overlap(&ego, &OrientedBox::new(q.x, q.y, q.heading, a.length + 1.0, a.width + 0.6))
                });
                if hit {
                    first_hit = Some(k);
                    break;
                }
            }
            let track: Vec<TrackPoint> = along.into_iter().map(|(_, p)| p).collect();
            match first_hit {
                None => {
                    let score = match reached {
                        Some(k) => (k, 0.0),
                        None => (n + 1, -track.last().map(|p| p.distance(&start)).unwrap_or(0.0)),
                    };
                    if best.as_ref().is_none_or(|(b, _)| score < *b) {
                        best = Some((score, track));
                    }
                }
                Some(k) => {
                    if fallback.as_ref().is_none_or(|(f, _)| k > *f) {
                        fallback = Some((k, track));
                    }
                }
            }
        }
    }
    best.map(|(_, t)| t).or(fallback.map(|(_, t)| t)).expect("profile grid is non-empty")
}

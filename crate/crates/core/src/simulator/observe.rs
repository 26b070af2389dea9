use serde::{Deserialize, Serialize};

use super::episode::Episode;
use super::scenario::{TrackPoint, EGO_ID};
use crate::config::ObservationConfig;
use crate::geometry::{wrap_angle, Pose};

/// Per-step agent features: x, y, heading, vx, vy, length, width, valid.
pub const AGENT_FEATURES: usize = 8;
/// Per-waypoint map features: x, y, heading, lane-type one-hot (3).
pub const MAP_FEATURES: usize = 6;

/// Agent history and map blocks, each row in its own local frame.
///
/// Agent data is laid out `[agent][step][feature]` with step `history - 1`
/// the current one; map data `[polyline][waypoint][feature]`. Invalid
/// entries are zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub t: usize,
    pub agents: usize,
    pub history: usize,
    pub polylines: usize,
    pub waypoints: usize,
    /// Row ids; row 0 is the ego, padding rows are `None`.
    pub agent_ids: Vec<Option<u32>>,
    pub agent_data: Vec<f64>,
    pub agent_valid: Vec<bool>,
    pub agent_anchor: Vec<Pose>,
    pub map_data: Vec<f64>,
    pub map_valid: Vec<bool>,
    pub map_anchor: Vec<Pose>,
}

impl Observation {
    /// Row has at least one valid history step.
    pub fn agent_present(&self, row: usize) -> bool {
        let h = self.history;
        self.agent_valid[row * h..(row + 1) * h].iter().any(|&v| v)
    }

    /// Row is observed at the current step.
    pub fn agent_current(&self, row: usize) -> bool {
        self.agent_valid[row * self.history + self.history - 1]
    }

    pub fn map_present(&self, row: usize) -> bool {
        let w = self.waypoints;
        self.map_valid[row * w..(row + 1) * w].iter().any(|&v| v)
    }

    pub fn row_of(&self, id: u32) -> Option<usize> {
        self.agent_ids.iter().position(|&r| r == Some(id))
    }

    /// Applies one rigid transform to every anchor. Features are local, so
    /// this is the whole effect of moving the scene.
    pub fn transform_anchors(&mut self, by: &Pose) {
        for a in self.agent_anchor.iter_mut().chain(self.map_anchor.iter_mut()) {
            *a = by.compose(a);
        }
    }
}

fn agent_features(p: &TrackPoint, anchor: &Pose, length: f64, width: f64) -> [f64; AGENT_FEATURES] {
    let (x, y) = anchor.to_local(p.x, p.y);
    let (vx, vy) = (p.v * p.heading.cos(), p.v * p.heading.sin());
    let (lvx, lvy) = anchor.rotate_in(vx, vy);
    [x, y, wrap_angle(p.heading - anchor.heading), lvx, lvy, length, width, 1.0]
}

/// Splits polylines into chunks of `waypoints` consecutive points that share
/// their end points.
pub fn map_chunks(points: &[[f64; 2]], waypoints: usize) -> Vec<&[[f64; 2]]> {
    let stride = waypoints - 1;
    let mut out = Vec::new();
    let mut start = 0;
    loop {
        let end = (start + waypoints).min(points.len());
        out.push(&points[start..end]);
        if end == points.len() {
            break;
        }
        start += stride;
    }
    out
}

/// Distance to the ego, insertion order, points and lane type.
type RankedChunk<'a> = (f64, usize, &'a [[f64; 2]], [f64; 3]);

fn segment_heading(chunk: &[[f64; 2]], k: usize) -> f64 {
    let (a, b) = if k + 1 < chunk.len() {
        (chunk[k], chunk[k + 1])
    } else if k > 0 {
        (chunk[k - 1], chunk[k])
    } else {
        return 0.0;
    };
    (b[1] - a[1]).atan2(b[0] - a[0])
}

/// Builds the observation at the episode's current step.
pub fn observe(ep: &Episode, cfg: &ObservationConfig) -> Observation {
    let sc = ep.scenario;
    let t = ep.t;
    let (na, th) = (cfg.agents, cfg.history);
    let (nm, nw) = (cfg.polylines, cfg.waypoints);
    let ego_now = ep.ego();
    let window = |k: usize| (t + k + 1).checked_sub(th);

    // Candidate rows: (distance, id, scenario index or None for the ego).
    let mut candidates: Vec<(f64, u32, usize)> = Vec::new();
    for (i, a) in sc.agents.iter().enumerate() {
        let latest = (0..th).rev().filter_map(window).find(|&tk| a.visible_at(tk));
        if let Some(tk) = latest {
            let p = &ep.frame(tk).agents[i];
            let d = (p.x - ego_now.x).hypot(p.y - ego_now.y);
            candidates.push((d, a.id, i));
        }
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    candidates.truncate(na - 1);

    let mut agent_ids = vec![None; na];
    let mut agent_data = vec![0.0; na * th * AGENT_FEATURES];
    let mut agent_valid = vec![false; na * th];
    let mut agent_anchor = vec![Pose::default(); na];

    let mut fill_row = |row: usize, id: u32, sample: &dyn Fn(usize) -> Option<TrackPoint>, size: (f64, f64)| {
        agent_ids[row] = Some(id);
        let Some(anchor_pt) = (0..th).rev().find_map(sample) else {
            return;
        };
        let anchor = Pose::new(anchor_pt.x, anchor_pt.y, anchor_pt.heading);
        agent_anchor[row] = anchor;
        for k in 0..th {
            if let Some(p) = sample(k) {
                let base = (row * th + k) * AGENT_FEATURES;
                agent_data[base..base + AGENT_FEATURES].copy_from_slice(&agent_features(&p, &anchor, size.0, size.1));
                agent_valid[row * th + k] = true;
            }
        }
    };
    let ego_sample = |k: usize| window(k).map(|tk| TrackPoint::from_state(&ep.frame(tk).ego));
    fill_row(0, EGO_ID, &ego_sample, (sc.ego.length, sc.ego.width));
    for (r, &(_, id, i)) in candidates.iter().enumerate() {
        let a = &sc.agents[i];
        let sample = |k: usize| window(k).filter(|&tk| a.visible_at(tk)).map(|tk| ep.frame(tk).agents[i]);
        fill_row(r + 1, id, &sample, (a.length, a.width));
    }

    // Map chunks ranked by nearest waypoint to the ego.
    let mut chunks: Vec<RankedChunk> = Vec::new();
    for poly in &sc.map {
        for c in map_chunks(&poly.points, nw) {
            let d = c.iter().map(|p| (p[0] - ego_now.x).hypot(p[1] - ego_now.y)).fold(f64::INFINITY, f64::min);
            chunks.push((d, chunks.len(), c, poly.lane_type.one_hot()));
        }
    }
    chunks.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    chunks.truncate(nm);
    let mut map_data = vec![0.0; nm * nw * MAP_FEATURES];
    let mut map_valid = vec![false; nm * nw];
    let mut map_anchor = vec![Pose::default(); nm];
    for (row, (_, _, chunk, onehot)) in chunks.iter().enumerate() {
        let anchor = Pose::new(chunk[0][0], chunk[0][1], segment_heading(chunk, 0));
        map_anchor[row] = anchor;
        for (k, p) in chunk.iter().enumerate() {
            let (x, y) = anchor.to_local(p[0], p[1]);
            let h = wrap_angle(segment_heading(chunk, k) - anchor.heading);
            let base = (row * nw + k) * MAP_FEATURES;
            map_data[base..base + MAP_FEATURES].copy_from_slice(&[x, y, h, onehot[0], onehot[1], onehot[2]]);
            map_valid[row * nw + k] = true;
        }
    }

    Observation {
        t,
        agents: na,
        history: th,
        polylines: nm,
        waypoints: nw,
        agent_ids,
        agent_data,
        agent_valid,
        agent_anchor,
        map_data,
        map_valid,
        map_anchor,
    }
}

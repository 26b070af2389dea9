use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CartesianState, ReferencePath};

pub const SCENARIO_SCHEMA_VERSION: u32 = 1;
/// Agent id reserved for the ego vehicle in observations.
pub const EGO_ID: u32 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    Intersection,
    Merge,
    LaneFollow,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 3] = [ScenarioKind::Intersection, ScenarioKind::Merge, ScenarioKind::LaneFollow];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::Intersection => "intersection",
            ScenarioKind::Merge => "merge",
            ScenarioKind::LaneFollow => "lane-follow",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown scenario kind `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LaneType {
    Lane,
    Edge,
    Crosswalk,
}

impl LaneType {
    pub fn one_hot(self) -> [f64; 3] {
        match self {
            LaneType::Lane => [1.0, 0.0, 0.0],
            LaneType::Edge => [0.0, 1.0, 0.0],
            LaneType::Crosswalk => [0.0, 0.0, 1.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapPolyline {
    pub id: u32,
    pub lane_type: LaneType,
    pub points: Vec<[f64; 2]>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrackPoint {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub v: f64,
}

impl TrackPoint {
    pub fn from_state(s: &CartesianState) -> Self {
        TrackPoint { x: s.x, y: s.y, heading: s.heading, v: s.v }
    }

    pub fn to_state(self) -> CartesianState {
        CartesianState { x: self.x, y: self.y, heading: self.heading, v: self.v, a: 0.0 }
    }

    pub fn distance(&self, other: &TrackPoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentTrack {
    pub id: u32,
    pub length: f64,
    pub width: f64,
    /// Reactive agents follow `route` with a car-following law instead of
    /// replaying `track`.
    pub reactive: bool,
    #[serde(default)]
    pub route: Option<ReferencePath>,
    #[serde(default)]
    pub intent: Option<String>,
    /// Step after which the intent branches diverge.
    #[serde(default)]
    pub reveal_step: Option<usize>,
    /// One entry per step `0..=duration`, recorded with the expert ego.
    pub track: Vec<TrackPoint>,
    /// Half-open `[start, end)` step intervals during which the agent is hidden.
    #[serde(default)]
    pub occlusions: Vec<[usize; 2]>,
}

impl AgentTrack {
    pub fn visible_at(&self, t: usize) -> bool {
        !self.occlusions.iter().any(|&[a, b]| t >= a && t < b)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EgoSpec {
    pub length: f64,
    pub width: f64,
    pub route: ReferencePath,
    /// Expert log, one entry per step `0..=duration`; entry 0 is the start.
    pub expert: Vec<TrackPoint>,
    /// Route arc length at which the task is complete.
    pub goal_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub schema_version: u32,
    pub id: String,
    pub kind: ScenarioKind,
    pub seed: u64,
    pub dt: f64,
    pub duration: usize,
    pub map: Vec<MapPolyline>,
    pub agents: Vec<AgentTrack>,
    pub ego: EgoSpec,
}

fn finite(p: &TrackPoint) -> bool {
    p.x.is_finite() && p.y.is_finite() && p.heading.is_finite() && p.v.is_finite()
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Format(format!("scenario {}: {m}", self.id)));
        if self.schema_version != SCENARIO_SCHEMA_VERSION {
            return bad(format!("unsupported schema version {}", self.schema_version));
        }
        if !(self.dt > 0.0) || self.duration == 0 {
            return bad("dt and duration must be positive".into());
        }
        let n = self.duration + 1;
        if self.ego.expert.len() != n || !self.ego.expert.iter().all(finite) {
            return bad(format!("expert log must hold {n} finite entries"));
        }
        if !(self.ego.length > 0.0 && self.ego.width > 0.0) {
            return bad("ego size must be positive".into());
        }
        let mut ids = std::collections::BTreeSet::new();
        for a in &self.agents {
            if a.id == EGO_ID || !ids.insert(a.id) {
                return bad(format!("agent id {} is reserved or repeated", a.id));
            }
            if a.track.len() != n || !a.track.iter().all(finite) {
                return bad(format!("agent {} track must hold {n} finite entries", a.id));
            }
            if !(a.length > 0.0 && a.width > 0.0) {
                return bad(format!("agent {} size must be positive", a.id));
            }
            if a.reactive && a.route.is_none() {
                return bad(format!("reactive agent {} has no route", a.id));
            }
            if a.occlusions.iter().any(|&[s, e]| s >= e || e > n) {
                return bad(format!("agent {} has an invalid occlusion interval", a.id));
            }
        }
        for p in &self.map {
            if p.points.is_empty() {
                return bad(format!("polyline {} is empty", p.id));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: Scenario = serde_json::from_str(text).map_err(|e| Error::Format(format!("scenario: {e}")))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn agent(&self, id: u32) -> Option<&AgentTrack> {
        self.agents.iter().find(|a| a.id == id)
    }
}

/// Loads every `*.json` scenario in a directory, sorted by file name.
pub fn load_dir(dir: &Path) -> Result<Vec<Scenario>> {
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths.iter().map(|p| Scenario::load(p)).collect()
}

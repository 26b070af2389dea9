use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Piecewise-linear route with per-segment heading, cumulative arc length and
/// speed limit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PathSpec", into = "PathSpec")]
pub struct ReferencePath {
    points: Vec<[f64; 2]>,
    headings: Vec<f64>,
    arc: Vec<f64>,
    speed_limits: Vec<f64>,
}

/// Serialized form: waypoints plus per-segment limits.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PathSpec {
    pub points: Vec<[f64; 2]>,
    pub speed_limits: Vec<f64>,
}

impl TryFrom<PathSpec> for ReferencePath {
    type Error = Error;
    fn try_from(spec: PathSpec) -> Result<Self> {
        ReferencePath::new(spec.points, spec.speed_limits)
    }
}

impl From<ReferencePath> for PathSpec {
    fn from(p: ReferencePath) -> Self {
        PathSpec { points: p.points, speed_limits: p.speed_limits }
    }
}

impl ReferencePath {
    pub fn new(points: Vec<[f64; 2]>, speed_limits: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::Config("a reference path needs at least two waypoints".into()));
        }
        if speed_limits.len() != points.len() - 1 {
            return Err(Error::Config(format!(
                "{} segments but {} speed limits",
                points.len() - 1,
                speed_limits.len()
            )));
        }
        let mut headings = Vec::with_capacity(points.len() - 1);
        let mut arc = vec![0.0];
        for w in points.windows(2) {
            let dx = w[1][0] - w[0][0];
            let dy = w[1][1] - w[0][1];
            let len = dx.hypot(dy);
            if !(len > 0.0) || !len.is_finite() {
                return Err(Error::Config("reference path has a degenerate segment".into()));
            }
            headings.push(dy.atan2(dx));
            arc.push(arc.last().unwrap() + len);
        }
        Ok(ReferencePath { points, headings, arc, speed_limits })
    }

    pub fn with_uniform_limit(points: Vec<[f64; 2]>, limit: f64) -> Result<Self> {
        let n = points.len().saturating_sub(1);
        Self::new(points, vec![limit; n])
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn segment_count(&self) -> usize {
        self.headings.len()
    }

    pub fn length(&self) -> f64 {
        *self.arc.last().unwrap()
    }

    pub fn heading(&self, segment: usize) -> f64 {
        self.headings[segment]
    }

    pub fn arc_start(&self, segment: usize) -> f64 {
        self.arc[segment]
    }

    pub fn segment_length(&self, segment: usize) -> f64 {
        self.arc[segment + 1] - self.arc[segment]
    }

    pub fn speed_limit(&self, segment: usize) -> f64 {
        self.speed_limits[segment]
    }

    pub fn speed_limits(&self) -> &[f64] {
        &self.speed_limits
    }

    /// Segment containing arc length `s`; a junction belongs to the earlier
    /// segment. Values outside `[0, length]` map to the end segments.
    pub fn segment_at(&self, s: f64) -> usize {
        let last = self.segment_count() - 1;
        // First segment whose end reaches s.
        let idx = self.arc[1..].partition_point(|&end| end < s);
        idx.min(last)
    }

    pub fn speed_limit_at(&self, s: f64) -> f64 {
        self.speed_limits[self.segment_at(s)]
    }

    /// Point at arc length `s` (clamped to the path) and the segment heading.
    pub fn point_at(&self, s: f64) -> ([f64; 2], f64) {
        let s = s.clamp(0.0, self.length());
        let k = self.segment_at(s);
        let t = s - self.arc[k];
        let (sin, cos) = self.headings[k].sin_cos();
        let a = self.points[k];
        ([a[0] + t * cos, a[1] + t * sin], self.headings[k])
    }
}

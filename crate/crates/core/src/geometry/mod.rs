//! Reference paths, Frenet conversions, macro-action kinematics and
//! oriented-box overlap.

mod frenet;
mod obb;
mod path;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

pub use frenet::{
    frenet_to_cartesian, project_to_frenet, rollout_macro_action, CartesianState, FrenetState, MacroAction, Projection,
};
pub use obb::{obb_overlap, OrientedBox};
pub use path::ReferencePath;

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut x = (a + PI).rem_euclid(2.0 * PI) - PI;
    if x <= -PI {
        x += 2.0 * PI;
    }
    x
}

/// Planar pose used as the origin of a local frame.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Pose { x, y, heading }
    }

    /// Expresses a global point in this pose's frame.
    pub fn to_local(&self, px: f64, py: f64) -> (f64, f64) {
        let (s, c) = self.heading.sin_cos();
        let dx = px - self.x;
        let dy = py - self.y;
        (c * dx + s * dy, -s * dx + c * dy)
    }

    /// Maps a point of this pose's frame to global coordinates.
    pub fn to_global(&self, lx: f64, ly: f64) -> (f64, f64) {
        let (s, c) = self.heading.sin_cos();
        (self.x + c * lx - s * ly, self.y + s * lx + c * ly)
    }

    /// Rotates a global vector into this frame.
    pub fn rotate_in(&self, vx: f64, vy: f64) -> (f64, f64) {
        let (s, c) = self.heading.sin_cos();
        (c * vx + s * vy, -s * vx + c * vy)
    }

    /// `other` expressed relative to this pose: `(Δx, Δy, Δheading)`.
    pub fn relative(&self, other: &Pose) -> Pose {
        let (x, y) = self.to_local(other.x, other.y);
        Pose::new(x, y, wrap_angle(other.heading - self.heading))
    }

    /// Applies the rigid transform described by `self` to `p`.
    pub fn compose(&self, p: &Pose) -> Pose {
        let (x, y) = self.to_global(p.x, p.y);
        Pose::new(x, y, wrap_angle(self.heading + p.heading))
    }
}

use serde::{Deserialize, Serialize};

use super::path::ReferencePath;
use super::wrap_angle;
use crate::error::{Error, Result};

/// Path-relative state: arc length `s`, lateral offset `l` (left positive)
/// and their rates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FrenetState {
    pub s: f64,
    pub s_dot: f64,
    pub l: f64,
    pub l_dot: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CartesianState {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub v: f64,
    pub a: f64,
}

impl CartesianState {
    pub fn velocity(&self) -> (f64, f64) {
        let (s, c) = self.heading.sin_cos();
        (self.v * c, self.v * s)
    }
}

/// Constant longitudinal acceleration and lateral speed held for `steps`
/// intervals of `dt` seconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacroAction {
    pub accel: f64,
    pub lateral_speed: f64,
    pub steps: usize,
    pub dt: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub state: FrenetState,
    /// The point lies before the path start or past its end.
    pub clamped: bool,
}

/// Projects a Cartesian state onto the nearest point of `path`.
///
/// Ties between segments go to the smaller segment index. A lateral offset
/// beyond `corridor` is an [`Error::OffRoute`].
pub fn project_to_frenet(state: &CartesianState, path: &ReferencePath, corridor: f64) -> Result<Projection> {
    let pts = path.points();
    let mut best: Option<(f64, usize, f64, f64)> = None;
    for (k, &a) in pts.iter().enumerate().take(path.segment_count()) {
        let (sin, cos) = path.heading(k).sin_cos();
        let len = path.segment_length(k);
        let t = (state.x - a[0]) * cos + (state.y - a[1]) * sin;
        let tc = t.clamp(0.0, len);
        let qx = a[0] + tc * cos - state.x;
        let qy = a[1] + tc * sin - state.y;
        let d2 = qx * qx + qy * qy;
        if best.is_none_or(|(bd, ..)| d2 < bd) {
            best = Some((d2, k, t, tc));
        }
    }
    let (d2, k, t, tc) = best.expect("path has segments");
    let a = pts[k];
    let (sin, cos) = path.heading(k).sin_cos();
    let cross = cos * (state.y - a[1]) - sin * (state.x - a[0]);
    let last = path.segment_count() - 1;
    let clamped = (k == 0 && t < 0.0) || (k == last && t > path.segment_length(k));
    let l = if clamped || tc == t {
        cross
    } else {
        // Nearest point is an interior vertex.
        cross.signum() * d2.sqrt()
    };
    if l.abs() > corridor {
        return Err(Error::OffRoute { offset: l, corridor });
    }
    let (vx, vy) = state.velocity();
    Ok(Projection {
        state: FrenetState {
            s: path.arc_start(k) + tc,
            s_dot: (vx * cos + vy * sin).max(0.0),
            l,
            l_dot: -vx * sin + vy * cos,
        },
        clamped,
    })
}

/// Constant-acceleration longitudinal and constant-speed lateral motion
/// sampled at `k · dt`, `k = 1..=steps`. Once the longitudinal speed reaches
/// zero it stays there for the rest of the action.
pub fn rollout_macro_action(start: &FrenetState, m: &MacroAction) -> Vec<FrenetState> {
    let stop_time = if m.accel < 0.0 { Some(start.s_dot / -m.accel) } else { None };
    (1..=m.steps)
        .map(|k| {
            let tau = k as f64 * m.dt;
            let (s, s_dot) = match stop_time {
                Some(ts) if tau >= ts => (start.s + start.s_dot * ts + 0.5 * m.accel * ts * ts, 0.0),
                _ => (start.s + start.s_dot * tau + 0.5 * m.accel * tau * tau, start.s_dot + m.accel * tau),
            };
            FrenetState { s, s_dot, l: start.l + m.lateral_speed * tau, l_dot: m.lateral_speed }
        })
        .collect()
}

/// Maps Frenet states back to Cartesian ones. `accel` is reported as each
/// state's acceleration. The flag is set when any `s` fell outside the path.
pub fn frenet_to_cartesian(states: &[FrenetState], path: &ReferencePath, accel: f64) -> (Vec<CartesianState>, bool) {
    let mut clamped = false;
    let out = states
        .iter()
        .map(|f| {
            if f.s < 0.0 || f.s > path.length() {
                clamped = true;
            }
            let ([px, py], heading) = path.point_at(f.s);
            let (sin, cos) = heading.sin_cos();
            CartesianState {
                x: px - f.l * sin,
                y: py + f.l * cos,
                heading: wrap_angle(heading + f.l_dot.atan2(f.s_dot)),
                v: f.s_dot.hypot(f.l_dot),
                a: accel,
            }
        })
        .collect();
    (out, clamped)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn straight() -> ReferencePath {
        ReferencePath::with_uniform_limit(vec![[0.0, 0.0], [100.0, 0.0]], 10.0).unwrap()
    }

    #[test]
    fn axis_aligned_projection() {
        let st = CartesianState { x: 3.0, y: 2.0, heading: 0.0, v: 4.0, a: 0.0 };
        let p = project_to_frenet(&st, &straight(), 5.0).unwrap();
        assert_eq!(p.state, FrenetState { s: 3.0, s_dot: 4.0, l: 2.0, l_dot: 0.0 });
        assert!(!p.clamped);
    }

    #[test]
    fn on_path_has_zero_offset_and_corridor_is_enforced() {
        let on = CartesianState { x: 42.0, ..Default::default() };
        assert_eq!(project_to_frenet(&on, &straight(), 1.0).unwrap().state.l, 0.0);
        let off = CartesianState { x: 42.0, y: -3.0, ..Default::default() };
        assert!(matches!(project_to_frenet(&off, &straight(), 2.0), Err(Error::OffRoute { .. })));
    }

    #[test]
    fn beyond_end_is_flagged() {
        let st = CartesianState { x: 105.0, y: 1.0, ..Default::default() };
        let p = project_to_frenet(&st, &straight(), 5.0).unwrap();
        assert!(p.clamped);
        assert_eq!(p.state.s, 100.0);
        assert_eq!(p.state.l, 1.0);
    }

    #[test]
    fn rollout_matches_closed_form() {
        let start = FrenetState { s: 0.0, s_dot: 5.0, l: 0.0, l_dot: 0.0 };
        let m = MacroAction { accel: 1.0, lateral_speed: 0.0, steps: 20, dt: 0.1 };
        let r = rollout_macro_action(&start, &m);
        assert_eq!(r.len(), 20);
        let last = r[19];
        // 0 + 5·2 + ½·1·2² = 12
        assert!((last.s - 12.0).abs() < 1e-12);
        assert!((last.s_dot - 7.0).abs() < 1e-12);
    }

    #[test]
    fn rollout_clamps_velocity() {
        let start = FrenetState { s: 2.0, s_dot: 1.0, l: 0.5, l_dot: 0.0 };
        let m = MacroAction { accel: -4.0, lateral_speed: 0.0, steps: 10, dt: 0.1 };
        let r = rollout_macro_action(&start, &m);
        // Stops at τ = 0.25 having covered 1·0.25 − 2·0.0625 = 0.125 m.
        assert!((r[1].s_dot - 0.2).abs() < 1e-12);
        for f in &r[2..] {
            assert_eq!(f.s_dot, 0.0);
            assert!((f.s - 2.125).abs() < 1e-12);
        }
        assert!(r.windows(2).all(|w| w[1].s >= w[0].s));
        assert!(r.iter().all(|f| f.l == 0.5));
    }

    #[test]
    fn straight_path_to_cartesian() {
        let f = FrenetState { s: 11.0, s_dot: 3.0, l: 2.0, l_dot: 0.0 };
        let (c, clamped) = frenet_to_cartesian(&[f], &straight(), 1.0);
        assert!(!clamped);
        assert_eq!((c[0].x, c[0].y, c[0].heading, c[0].v, c[0].a), (11.0, 2.0, 0.0, 3.0, 1.0));
    }
}

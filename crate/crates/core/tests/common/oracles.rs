//! Independently coded evaluators and random instance generators.

use beliefplan::decoder::{FutureTrajectory, TrajectoryGmm};
use beliefplan::geometry::{OrientedBox, Pose, ReferencePath};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_gmm(rng: &mut ChaCha8Rng, modes: usize, steps: usize, anchor: Pose) -> TrajectoryGmm {
    let mut probs: Vec<f64> = (0..modes).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= total);
    TrajectoryGmm {
        agent_id: 1,
        anchor,
        created_at: 0,
        modes,
        steps,
        means: (0..modes * steps).map(|_| [rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0)]).collect(),
        sigmas: (0..modes * steps).map(|_| [rng.random_range(0.05..3.0), rng.random_range(0.05..3.0)]).collect(),
        probs,
    }
}

pub fn random_truth(rng: &mut ChaCha8Rng, steps: usize) -> FutureTrajectory {
    let mut valid: Vec<bool> = (0..steps).map(|_| rng.random_bool(0.8)).collect();
    valid[0] = true;
    FutureTrajectory {
        points: (0..steps).map(|_| [rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0)]).collect(),
        valid,
    }
}

pub fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
    Pose::new(rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0), rng.random_range(-3.0..3.0))
}

/// Loss from the bivariate normal log-density in matrix form, without the
/// shared helpers and dropping the constant `ln 2π`.
pub fn loss_oracle(p: &TrajectoryGmm, t: &FutureTrajectory) -> f64 {
    let mut best = (f64::INFINITY, 0);
    for m in 0..p.modes {
        let mut d = 0.0;
        let mut n = 0.0;
        for k in 0..p.steps {
            if t.valid[k] {
                let mu = p.means[m * p.steps + k];
                d += ((t.points[k][0] - mu[0]).powi(2) + (t.points[k][1] - mu[1]).powi(2)).sqrt();
                n += 1.0;
            }
        }
        if d / n < best.0 {
            best = (d / n, m);
        }
    }
    let m = best.1;
    let mut nll = 0.0;
    let mut n = 0.0;
    for k in 0..p.steps {
        if t.valid[k] {
            let mu = p.means[m * p.steps + k];
            let sg = p.sigmas[m * p.steps + k];
            // Full 2×2 covariance form: ½ rᵀΣ⁻¹r + ½ ln det Σ.
            let cov = [[sg[0] * sg[0], 0.0], [0.0, sg[1] * sg[1]]];
            let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
            let inv = [[cov[1][1] / det, -cov[0][1] / det], [-cov[1][0] / det, cov[0][0] / det]];
            let r = [t.points[k][0] - mu[0], t.points[k][1] - mu[1]];
            let quad = r[0] * (inv[0][0] * r[0] + inv[0][1] * r[1]) + r[1] * (inv[1][0] * r[0] + inv[1][1] * r[1]);
            nll += 0.5 * quad + 0.5 * det.ln();
            n += 1.0;
        }
    }
    nll / n - p.probs[m].ln()
}

/// Homogeneous-matrix transform of a local point into the world frame.
fn to_world(anchor: &Pose, p: [f64; 2]) -> [f64; 2] {
    let (s, c) = anchor.heading.sin_cos();
    let t = [[c, -s, anchor.x], [s, c, anchor.y]];
    [t[0][0] * p[0] + t[0][1] * p[1] + t[0][2], t[1][0] * p[0] + t[1][1] * p[1] + t[1][2]]
}

/// World-frame average displacement of every mode against `t`.
pub fn mode_ades_oracle(p: &TrajectoryGmm, t: &FutureTrajectory) -> Vec<f64> {
    (0..p.modes)
        .map(|m| {
            let (mut s, mut n) = (0.0, 0.0);
            for k in 0..p.steps {
                if t.valid[k] {
                    let g = to_world(&p.anchor, p.means[m * p.steps + k]);
                    s += ((g[0] - t.points[k][0]).powi(2) + (g[1] - t.points[k][1]).powi(2)).sqrt();
                    n += 1.0;
                }
            }
            s / n
        })
        .collect()
}

pub fn min_ade_oracle(p: &TrajectoryGmm, t: &FutureTrajectory) -> f64 {
    mode_ades_oracle(p, t).into_iter().fold(f64::INFINITY, f64::min)
}

/// Whether the most probable mode is also the closest one.
pub fn score_accuracy_oracle(p: &TrajectoryGmm, t: &FutureTrajectory) -> bool {
    let ades = mode_ades_oracle(p, t);
    let closest = (0..p.modes).fold(0, |b, m| if ades[m] < ades[b] { m } else { b });
    let likely = (0..p.modes).fold(0, |b, m| if p.probs[m] > p.probs[b] { m } else { b });
    closest == likely
}

/// Mean squared world-frame gap between the current prediction and the
/// previous one advanced by a step, averaged over shared agents and modes.
pub fn consistency_oracle(current: &[TrajectoryGmm], previous: &[TrajectoryGmm]) -> Option<f64> {
    let mut per_agent = Vec::new();
    for c in current {
        let Some(p) = previous.iter().find(|p| p.agent_id == c.agent_id) else {
            continue;
        };
        let steps = c.steps.min(p.steps);
        let modes = c.modes.min(p.modes);
        let mut sum = 0.0;
        for m in 0..modes {
            let mut gap = 0.0;
            for k in 1..steps {
                let a = to_world(&c.anchor, c.means[m * c.steps + k - 1]);
                let b = to_world(&p.anchor, p.means[m * p.steps + k]);
                gap += (a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1]);
            }
            sum += gap / (steps - 1) as f64;
        }
        per_agent.push(sum / modes as f64);
    }
    (!per_agent.is_empty()).then(|| per_agent.iter().sum::<f64>() / per_agent.len() as f64)
}

pub fn random_curved_path(rng: &mut ChaCha8Rng) -> ReferencePath {
    let n = rng.random_range(3..9);
    let mut pts = vec![[rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0)]];
    let mut heading: f64 = rng.random_range(-3.0..3.0);
    for _ in 1..n {
        heading += rng.random_range(-0.6..0.6);
        let len = rng.random_range(5.0..30.0);
        let last = *pts.last().unwrap();
        pts.push([last[0] + len * heading.cos(), last[1] + len * heading.sin()]);
    }
    ReferencePath::with_uniform_limit(pts, 10.0).unwrap()
}

/// Position and speed after `tau` seconds of constant acceleration, holding
/// at rest once the speed reaches zero.
pub fn closed_form(s0: f64, v0: f64, a: f64, tau: f64) -> (f64, f64) {
    if a < 0.0 && v0 + a * tau < 0.0 {
        let ts = -v0 / a;
        (s0 + v0 * ts + 0.5 * a * ts * ts, 0.0)
    } else {
        (s0 + v0 * tau + 0.5 * a * tau * tau, v0 + a * tau)
    }
}

/// Dense grid test: does any sample point on a `step` grid lie in both boxes?
pub fn grid_overlap(a: &OrientedBox, b: &OrientedBox, step: f64) -> bool {
    let bounds = |o: &OrientedBox| {
        let r = o.circumradius();
        (o.center[0] - r, o.center[0] + r, o.center[1] - r, o.center[1] + r)
    };
    let (ax0, ax1, ay0, ay1) = bounds(a);
    let (bx0, bx1, by0, by1) = bounds(b);
    let (x0, x1, y0, y1) = (ax0.max(bx0), ax1.min(bx1), ay0.max(by0), ay1.min(by1));
    if x0 > x1 || y0 > y1 {
        return false;
    }
    let mut x = (x0 / step).floor() * step;
    while x <= x1 {
        let mut y = (y0 / step).floor() * step;
        while y <= y1 {
            if a.contains(x, y) && b.contains(x, y) {
                return true;
            }
            y += step;
        }
        x += step;
    }
    false
}

pub fn inflate(b: &OrientedBox, d: f64) -> OrientedBox {
    OrientedBox { length: b.length + 2.0 * d, width: b.width + 2.0 * d, ..*b }
}

pub fn random_box(rng: &mut ChaCha8Rng) -> OrientedBox {
    OrientedBox::new(
        rng.random_range(-2.5..2.5),
        rng.random_range(-2.5..2.5),
        rng.random_range(-3.2..3.2),
        rng.random_range(0.5..3.0),
        rng.random_range(0.3..1.5),
    )
}

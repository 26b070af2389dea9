//! Trajectory decoder producing per-agent Gaussian mixtures, the mixture
//! training loss and the prediction metrics.

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::encoder::POSITION_SCALE;
use crate::error::Result;
use crate::geometry::Pose;
use crate::nn::{Graph, Mlp, ParameterStore, Tensor, Var};

/// `M` modes of `T_f` future positions with per-step standard deviations and
/// one probability per mode, expressed in the agent's anchor frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryGmm {
    pub agent_id: u32,
    pub anchor: Pose,
    pub created_at: usize,
    pub modes: usize,
    pub steps: usize,
    /// `[mode][step]` means.
    pub means: Vec<[f64; 2]>,
    pub sigmas: Vec<[f64; 2]>,
    pub probs: Vec<f64>,
}

impl TrajectoryGmm {
    pub fn mean(&self, mode: usize, step: usize) -> [f64; 2] {
        self.means[mode * self.steps + step]
    }

    pub fn sigma(&self, mode: usize, step: usize) -> [f64; 2] {
        self.sigmas[mode * self.steps + step]
    }

    pub fn global_mean(&self, mode: usize, step: usize) -> [f64; 2] {
        let [x, y] = self.mean(mode, step);
        let (gx, gy) = self.anchor.to_global(x, y);
        [gx, gy]
    }

    /// Means of one mode in global coordinates.
    pub fn global_mode(&self, mode: usize) -> Vec<[f64; 2]> {
        (0..self.steps).map(|k| self.global_mean(mode, k)).collect()
    }

    pub fn most_likely(&self) -> usize {
        argmax(&self.probs)
    }
}

/// Realized future positions with a validity flag per step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FutureTrajectory {
    pub points: Vec<[f64; 2]>,
    pub valid: Vec<bool>,
}

impl FutureTrajectory {
    pub fn valid_steps(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Same trajectory expressed in `pose`'s frame.
    pub fn to_local(&self, pose: &Pose) -> FutureTrajectory {
        FutureTrajectory {
            points: self
                .points
                .iter()
                .map(|p| {
                    let (x, y) = pose.to_local(p[0], p[1]);
                    [x, y]
                })
                .collect(),
            valid: self.valid.clone(),
        }
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x < v[best] {
            best = i;
        }
    }
    best
}

/// Mean displacement of `points` from the valid truth steps; `None` when no
/// step is valid.
fn ade(points: impl Iterator<Item = [f64; 2]>, truth: &FutureTrajectory) -> Option<f64> {
    let mut total = 0.0;
    let mut count = 0;
    for ((p, t), &ok) in points.zip(&truth.points).zip(&truth.valid) {
        if ok {
            total += (p[0] - t[0]).hypot(p[1] - t[1]);
            count += 1;
        }
    }
    (count > 0).then(|| total / count as f64)
}

/// Average displacement of every mode, in the prediction's frame.
pub fn mode_ades(pred: &TrajectoryGmm, truth: &FutureTrajectory) -> Option<Vec<f64>> {
    (0..pred.modes).map(|m| ade((0..pred.steps).map(|k| pred.mean(m, k)), truth)).collect()
}

/// Mode closest to the truth by average displacement; ties go to the lower
/// index.
pub fn positive_mode(pred: &TrajectoryGmm, truth: &FutureTrajectory) -> Option<usize> {
    mode_ades(pred, truth).map(|a| argmin(&a))
}

/// Mixture loss on the positive mode: mean over valid steps of the Gaussian
/// term, minus the log probability of that mode. `truth` must be in the
/// prediction's anchor frame. `None` when no future step is valid.
pub fn gmm_loss(pred: &TrajectoryGmm, truth: &FutureTrajectory) -> Option<f64> {
    let m = positive_mode(pred, truth)?;
    let mut total = 0.0;
    let mut count = 0;
    for k in 0..pred.steps {
        if !truth.valid[k] {
            continue;
        }
        let [mx, my] = pred.mean(m, k);
        let [sx, sy] = pred.sigma(m, k);
        let [tx, ty] = truth.points[k];
        let zx = (tx - mx) / sx;
        let zy = (ty - my) / sy;
        total += sx.ln() + sy.ln() + 0.5 * (zx * zx + zy * zy);
        count += 1;
    }
    Some(total / count as f64 - pred.probs[m].ln())
}

/// Minimum over modes of the average displacement, with `truth` in global
/// coordinates.
pub fn min_ade(pred: &TrajectoryGmm, truth: &FutureTrajectory) -> Option<f64> {
    (0..pred.modes)
        .map(|m| ade(pred.global_mode(m).into_iter(), truth))
        .collect::<Option<Vec<f64>>>()
        .map(|a| a.into_iter().fold(f64::INFINITY, f64::min))
}

/// Whether the most probable mode is also the closest one (global `truth`).
pub fn score_accuracy(pred: &TrajectoryGmm, truth: &FutureTrajectory) -> Option<bool> {
    let ades: Vec<f64> = (0..pred.modes).map(|m| ade(pred.global_mode(m).into_iter(), truth)).collect::<Option<_>>()?;
    Some(argmax(&pred.probs) == argmin(&ades))
}

/// Prediction change between consecutive frames for one agent: mean over
/// modes and overlapping steps of the squared distance between
/// `current[m][τ]` and `previous[m][τ + 1]`, both in global coordinates.
pub fn consistency_pair(current: &TrajectoryGmm, previous: &TrajectoryGmm) -> f64 {
    let steps = current.steps.min(previous.steps);
    let mut total = 0.0;
    for m in 0..current.modes.min(previous.modes) {
        let mut inner = 0.0;
        for k in 0..steps - 1 {
            let a = current.global_mean(m, k);
            let b = previous.global_mean(m, k + 1);
            inner += (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
        }
        total += inner / (steps - 1) as f64;
    }
    total / current.modes.min(previous.modes) as f64
}

/// Average of [`consistency_pair`] over agents present in both frames
/// (matched by agent id); `None` when no agent is.
pub fn consistency(current: &[TrajectoryGmm], previous: &[TrajectoryGmm]) -> Option<f64> {
    let pairs: Vec<f64> = current
        .iter()
        .filter_map(|c| previous.iter().find(|p| p.agent_id == c.agent_id).map(|p| consistency_pair(c, p)))
        .collect();
    (!pairs.is_empty()).then(|| pairs.iter().sum::<f64>() / pairs.len() as f64)
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub modes: usize,
    pub steps: usize,
    pub sigma_floor: f64,
    net: Mlp,
}

/// Graph handles for a decoded batch: `raw` holds `M·T_f` rows of
/// `(μx, μy, σx, σy)` per input row (already scaled and floored) and
/// `log_probs` is `rows × M`.
pub struct DecodedGraph {
    pub trajectories: Var,
    pub log_probs: Var,
}

impl Decoder {
    pub fn new(store: &mut ParameterStore, model: &ModelConfig) -> Result<Self> {
        let out = model.modes * model.future * 4 + model.modes;
        let net = Mlp::new(store, "decoder.net", &[model.hidden, model.decoder_hidden, out])?;
        Ok(Decoder { modes: model.modes, steps: model.future, sigma_floor: model.sigma_floor, net })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<DecodedGraph> {
        let rows = g.value(x).rows();
        let per = self.modes * self.steps;
        let y = self.net.forward(g, store, x)?;
        let traj = g.slice_cols(y, 0, per * 4);
        let traj = g.reshape(traj, rows * per, 4);
        let mu = g.slice_cols(traj, 0, 2);
        let mu = g.scale(mu, POSITION_SCALE);
        let sig = g.slice_cols(traj, 2, 2);
        let sig = g.softplus(sig);
        let sig = g.scale(sig, POSITION_SCALE);
        let sig = g.add_scalar(sig, self.sigma_floor);
        let trajectories = g.concat_cols(&[mu, sig]);
        let logits = g.slice_cols(y, per * 4, self.modes);
        let log_probs = g.log_softmax_rows(logits);
        Ok(DecodedGraph { trajectories, log_probs })
    }

    /// Reads row `row` of a decoded batch into a mixture.
    pub fn extract(
        &self,
        g: &Graph,
        d: &DecodedGraph,
        row: usize,
        agent_id: u32,
        anchor: Pose,
        created_at: usize,
    ) -> TrajectoryGmm {
        let per = self.modes * self.steps;
        let t = g.value(d.trajectories);
        let mut means = Vec::with_capacity(per);
        let mut sigmas = Vec::with_capacity(per);
        for k in 0..per {
            let r = t.row_slice(row * per + k);
            means.push([r[0], r[1]]);
            sigmas.push([r[2], r[3]]);
        }
        let lp = g.value(d.log_probs).row_slice(row);
        let probs: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
        let total: f64 = probs.iter().sum();
        TrajectoryGmm {
            agent_id,
            anchor,
            created_at,
            modes: self.modes,
            steps: self.steps,
            means,
            sigmas,
            probs: probs.into_iter().map(|p| p / total).collect(),
        }
    }

    /// Decodes plain vectors (`rows × D`) into mixtures.
    pub fn decode(
        &self,
        store: &ParameterStore,
        inputs: &Tensor,
        meta: &[(u32, Pose)],
        created_at: usize,
    ) -> Result<Vec<TrajectoryGmm>> {
        let mut g = Graph::new();
        let x = g.constant(inputs.clone());
        let d = self.forward(&mut g, store, x)?;
        Ok(meta.iter().enumerate().map(|(i, &(id, anchor))| self.extract(&g, &d, i, id, anchor, created_at)).collect())
    }

    /// Mean mixture loss over the rows of a decoded batch, each paired with
    /// its truth in the row's anchor frame. Rows without valid steps are
    /// skipped; returns `None` when nothing contributes.
    pub fn loss_graph(&self, g: &mut Graph, d: &DecodedGraph, truths: &[(usize, &FutureTrajectory)]) -> Option<Var> {
        let per = self.modes * self.steps;
        let mut picks = Vec::new();
        let mut target = Vec::new();
        let mut weights = Vec::new();
        let mut prob_picks = Vec::new();
        let mut terms = 0usize;
        for &(row, truth) in truths {
            let n_valid = truth.valid_steps();
            if n_valid == 0 {
                continue;
            }
            let t = g.value(d.trajectories);
            let ades: Vec<f64> = (0..self.modes)
                .map(|m| {
                    let pts = (0..self.steps).map(|k| {
                        let r = t.row_slice(row * per + m * self.steps + k);
                        [r[0], r[1]]
                    });
                    ade(pts, truth).expect("valid steps exist")
                })
                .collect();
            let m = argmin(&ades);
            for k in 0..self.steps {
                if truth.valid[k] {
                    picks.push(row * per + m * self.steps + k);
                    target.extend(truth.points[k]);
                    weights.push(1.0 / n_valid as f64);
                }
            }
            prob_picks.push(row * self.modes + m);
            terms += 1;
        }
        if terms == 0 {
            return None;
        }
        let n = picks.len();
        let sel = g.gather_rows(d.trajectories, &picks);
        let mu = g.slice_cols(sel, 0, 2);
        let sig = g.slice_cols(sel, 2, 2);
        let truth = g.constant(Tensor::matrix(n, 2, target).expect("target shape"));
        let diff = g.sub(truth, mu);
        let z = g.div(diff, sig);
        let z2 = g.square(z);
        let half = g.scale(z2, 0.5);
        let log_sig = g.ln(sig);
        let per_step = g.add(log_sig, half);
        let w: Vec<f64> = weights.iter().flat_map(|&w| [w, w]).collect();
        let w = g.constant(Tensor::matrix(n, 2, w).expect("weight shape"));
        let weighted = g.mul(per_step, w);
        let gauss = g.sum(weighted);
        let rows = g.value(d.log_probs).rows();
        let lp = g.reshape(d.log_probs, rows * self.modes, 1);
        let chosen = g.gather_rows(lp, &prob_picks);
        let lp_sum = g.sum(chosen);
        let total = g.sub(gauss, lp_sum);
        Some(g.scale(total, 1.0 / terms as f64))
    }
}

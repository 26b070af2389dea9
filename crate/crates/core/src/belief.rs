//! Recurrent latent beliefs over tracked agents, updated each step from the
//! agent's scene token and the ego's recent trajectory in that agent's frame.

use std::collections::BTreeMap;

use crate::config::{GateKind, ModelConfig};
use crate::encoder::POSITION_SCALE;
use crate::error::{Error, Result};
use crate::geometry::{CartesianState, Pose};
use crate::nn::{Graph, GruCell, Mlp, ParameterStore, Tensor, Var};

/// Ego poses `(Δx, Δy, Δheading)` expressed in `anchor`'s frame.
pub fn ego_relative_action(plan: &[CartesianState], anchor: &Pose) -> Vec<[f64; 3]> {
    plan.iter()
        .map(|s| {
            let r = anchor.relative(&Pose::new(s.x, s.y, s.heading));
            [r.x, r.y, r.heading]
        })
        .collect()
}

/// Network input for an ego-relative action: positions scaled, flattened.
pub fn action_features(action: &[[f64; 3]]) -> Vec<f64> {
    action.iter().flat_map(|r| [r[0] / POSITION_SCALE, r[1] / POSITION_SCALE, r[2]]).collect()
}

#[derive(Clone, Debug)]
pub struct BeliefNet {
    pub hidden: usize,
    pub ego_steps: usize,
    pub action: Mlp,
    pub gate: Mlp,
    pub gru: GruCell,
    scalar_gate: bool,
}

impl BeliefNet {
    pub fn new(store: &mut ParameterStore, model: &ModelConfig) -> Result<Self> {
        let d = model.hidden;
        let gate_out = match model.gate {
            GateKind::Channel => d,
            GateKind::Scalar => 1,
        };
        Ok(BeliefNet {
            hidden: d,
            ego_steps: model.ego_steps,
            action: Mlp::new(store, "belief.action", &[model.ego_steps * 3, d, d])?,
            gate: Mlp::new(store, "belief.gate", &[2 * d, d, gate_out])?,
            gru: GruCell::new(store, "belief.gru", d, d)?,
            scalar_gate: model.gate == GateKind::Scalar,
        })
    }

    /// Gate values for a batch, `rows × D` (a scalar gate is broadcast).
    pub fn gate_graph(&self, g: &mut Graph, store: &ParameterStore, prev: Var, e: Var) -> Result<Var> {
        let joined = g.concat_cols(&[prev, e]);
        let logits = self.gate.forward(g, store, joined)?;
        let gate = g.sigmoid(logits);
        if self.scalar_gate {
            let ones = g.constant(Tensor::filled(vec![1, self.hidden], 1.0));
            Ok(g.matmul(gate, ones))
        } else {
            Ok(gate)
        }
    }

    /// One update for a batch: `z`, `prev` are `rows × D`, `action` is
    /// `rows × 3·ego_steps`.
    pub fn update_graph(&self, g: &mut Graph, store: &ParameterStore, z: Var, prev: Var, action: Var) -> Result<Var> {
        let (zr, pr) = (g.value(z), g.value(prev));
        if zr.cols() != self.hidden || pr.cols() != self.hidden || zr.rows() != pr.rows() {
            return Err(Error::Config(format!("belief update expects matching rows × {} inputs", self.hidden)));
        }
        let e = self.action.forward(g, store, action)?;
        let gate = self.gate_graph(g, store, prev, e)?;
        let influence = g.mul(gate, e);
        let input = g.add(z, influence);
        self.gru.forward(g, store, input, prev)
    }

    /// Pads (by repeating the first pose) or truncates to the model length,
    /// keeping the most recent poses.
    pub fn fit_plan(&self, plan: &[CartesianState]) -> Vec<CartesianState> {
        let k = self.ego_steps;
        if plan.is_empty() {
            return Vec::new();
        }
        if plan.len() >= k {
            plan[plan.len() - k..].to_vec()
        } else {
            let mut out = vec![plan[0]; k - plan.len()];
            out.extend_from_slice(plan);
            out
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentBelief {
    pub agent_id: u32,
    pub vector: Vec<f64>,
    pub anchor: Pose,
    pub updated_at: usize,
}

/// What happened to one agent during a tracker step; enough to replay the
/// update on a graph later.
#[derive(Clone, Debug, PartialEq)]
pub struct BeliefRecord {
    pub agent_id: u32,
    pub token: Vec<f64>,
    pub action: Vec<f64>,
    /// Vector before the update; `None` when the belief was initialized.
    pub previous: Option<Vec<f64>>,
    pub vector: Vec<f64>,
    pub anchor: Pose,
}

/// Input for one tracked agent at the current step.
#[derive(Clone, Debug)]
pub struct TrackedToken {
    pub agent_id: u32,
    pub token: Vec<f64>,
    pub anchor: Pose,
}

#[derive(Clone, Debug, Default)]
pub struct BeliefTracker {
    pub beliefs: BTreeMap<u32, LatentBelief>,
    pub t: usize,
    pub forget_after: usize,
}

impl BeliefTracker {
    pub fn new(forget_after: usize) -> Self {
        BeliefTracker { beliefs: BTreeMap::new(), t: 0, forget_after }
    }

    /// Updates known agents, initializes new ones as `tanh(z)`, keeps absent
    /// ones unchanged and evicts those unseen for more than `forget_after`
    /// steps. `ego_recent` is the ego's executed trajectory ending now.
    pub fn step(
        &mut self,
        net: &BeliefNet,
        store: &ParameterStore,
        t: usize,
        tokens: &[TrackedToken],
        ego_recent: &[CartesianState],
    ) -> Result<Vec<BeliefRecord>> {
        self.t = t;
        let plan = net.fit_plan(ego_recent);
        let mut records = Vec::with_capacity(tokens.len());
        let mut update_rows = Vec::new();
        for tok in tokens {
            let action = if plan.is_empty() {
                vec![0.0; 3 * net.ego_steps]
            } else {
                action_features(&ego_relative_action(&plan, &tok.anchor))
            };
            match self.beliefs.get(&tok.agent_id) {
                Some(prev) => {
                    update_rows.push(records.len());
                    records.push(BeliefRecord {
                        agent_id: tok.agent_id,
                        token: tok.token.clone(),
                        action,
                        previous: Some(prev.vector.clone()),
                        vector: Vec::new(),
                        anchor: tok.anchor,
                    });
                }
                None => records.push(BeliefRecord {
                    agent_id: tok.agent_id,
                    token: tok.token.clone(),
                    action,
                    previous: None,
                    vector: tok.token.iter().map(|v| v.tanh()).collect(),
                    anchor: tok.anchor,
                }),
            }
        }
        if !update_rows.is_empty() {
            let d = net.hidden;
            let n = update_rows.len();
            let mut g = Graph::new();
            let gather = |f: &dyn Fn(&BeliefRecord) -> &[f64], w: usize| {
                let data: Vec<f64> = update_rows.iter().flat_map(|&i| f(&records[i]).to_vec()).collect();
                Tensor::matrix(n, w, data)
            };
            let z = g.constant(gather(&|r| &r.token, d)?);
            let prev = g.constant(gather(&|r| r.previous.as_deref().unwrap(), d)?);
            let a = g.constant(gather(&|r| &r.action, 3 * net.ego_steps)?);
            let out = net.update_graph(&mut g, store, z, prev, a)?;
            let values = g.value(out);
            for (k, &i) in update_rows.iter().enumerate() {
                records[i].vector = values.row_slice(k).to_vec();
            }
        }
        for r in &records {
            self.beliefs.insert(
                r.agent_id,
                LatentBelief { agent_id: r.agent_id, vector: r.vector.clone(), anchor: r.anchor, updated_at: t },
            );
        }
        let forget = self.forget_after;
        self.beliefs.retain(|_, b| t - b.updated_at <= forget);
        Ok(records)
    }
}

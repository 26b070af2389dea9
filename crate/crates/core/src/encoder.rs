//! Scene encoder: per-agent history GRU, per-polyline MLP with max-pooling,
//! and relational attention whose keys carry relative-pose encodings.

use crate::config::{ModelConfig, ObservationConfig};
use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::nn::{Graph, GruCell, LayerNorm, Linear, Mlp, ParameterStore, Tensor, Var};
use crate::simulator::{Observation, AGENT_FEATURES, MAP_FEATURES};

/// Positions and speeds enter the networks divided by this (meters, m/s).
pub const POSITION_SCALE: f64 = 10.0;
const SIZE_SCALE: f64 = 5.0;
const RELATIVE_SCALE: f64 = 20.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenKind {
    Agent,
    Map,
}

/// Scene tokens for every agent row followed by every map row. Rows without
/// data are zero and marked invalid.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneEncoding {
    pub tokens: Tensor,
    pub valid: Vec<bool>,
    pub anchors: Vec<Pose>,
    pub kinds: Vec<TokenKind>,
    pub agent_ids: Vec<Option<u32>>,
    /// Agent rows chosen for belief tracking, nearest first.
    pub tracked: Vec<usize>,
}

impl SceneEncoding {
    pub fn token(&self, row: usize) -> &[f64] {
        self.tokens.row_slice(row)
    }

    pub fn ego_token(&self) -> &[f64] {
        self.token(0)
    }
}

#[derive(Clone, Debug)]
struct AttentionLayer {
    pe: Mlp,
    norm1: LayerNorm,
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    norm2: LayerNorm,
    ffn: Mlp,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub hidden: usize,
    pub heads: usize,
    pub tracked: usize,
    history: GruCell,
    map: Mlp,
    layers: Vec<AttentionLayer>,
}

/// Graph-side result of [`Encoder::encode_graph`]: one token row per present
/// element, with its row in the full scene layout.
pub struct EncodedScene {
    pub tokens: Var,
    pub rows: Vec<usize>,
    pub tracked: Vec<usize>,
}

impl EncodedScene {
    /// Position of a full-layout row among the computed tokens.
    pub fn index_of(&self, row: usize) -> Option<usize> {
        self.rows.iter().position(|&r| r == row)
    }
}

fn scale_agent(f: &[f64]) -> [f64; AGENT_FEATURES] {
    [
        f[0] / POSITION_SCALE,
        f[1] / POSITION_SCALE,
        f[2],
        f[3] / POSITION_SCALE,
        f[4] / POSITION_SCALE,
        f[5] / SIZE_SCALE,
        f[6] / SIZE_SCALE,
        f[7],
    ]
}

fn scale_map(f: &[f64]) -> [f64; MAP_FEATURES] {
    [f[0] / POSITION_SCALE, f[1] / POSITION_SCALE, f[2], f[3], f[4], f[5]]
}

impl Encoder {
    pub fn new(store: &mut ParameterStore, model: &ModelConfig, obs: &ObservationConfig) -> Result<Self> {
        let d = model.hidden;
        let history = GruCell::new(store, "encoder.history", AGENT_FEATURES, d)?;
        let map = Mlp::new(store, "encoder.map", &[MAP_FEATURES, d, d])?;
        let mut layers = Vec::with_capacity(model.layers);
        for l in 0..model.layers {
            let p = format!("encoder.layer{l}");
            layers.push(AttentionLayer {
                pe: Mlp::new(store, &format!("{p}.pe"), &[4, d, d])?,
                norm1: LayerNorm::new(store, &format!("{p}.norm1"), d)?,
                query: Linear::new(store, &format!("{p}.query"), d, d)?,
                key: Linear::new(store, &format!("{p}.key"), d, d)?,
                value: Linear::new(store, &format!("{p}.value"), d, d)?,
                out: Linear::new(store, &format!("{p}.out"), d, d)?,
                norm2: LayerNorm::new(store, &format!("{p}.norm2"), d)?,
                ffn: Mlp::new(store, &format!("{p}.ffn"), &[d, 2 * d, d])?,
            });
        }
        Ok(Encoder { hidden: d, heads: model.heads, tracked: obs.tracked, history, map, layers })
    }

    /// Final history GRU state per agent row listed in `rows`; invalid steps
    /// leave the state unchanged.
    pub fn encode_history(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        obs: &Observation,
        rows: &[usize],
    ) -> Result<Var> {
        let d = self.hidden;
        let th = obs.history;
        let mut h = g.constant(Tensor::zeros(vec![rows.len(), d]));
        for k in 0..th {
            let mask: Vec<bool> = rows.iter().map(|&r| obs.agent_valid[r * th + k]).collect();
            if !mask.iter().any(|&m| m) {
                continue;
            }
            let mut x = Vec::with_capacity(rows.len() * AGENT_FEATURES);
            for &r in rows {
                let base = (r * th + k) * AGENT_FEATURES;
                x.extend(scale_agent(&obs.agent_data[base..base + AGENT_FEATURES]));
            }
            let x = g.constant(Tensor::matrix(rows.len(), AGENT_FEATURES, x)?);
            let next = self.history.forward(g, store, x, h)?;
            h = g.select_rows(next, h, &mask);
        }
        Ok(h)
    }

    /// Waypoint MLP followed by a max over each listed polyline's valid waypoints.
    pub fn encode_map(&self, g: &mut Graph, store: &ParameterStore, obs: &Observation, rows: &[usize]) -> Result<Var> {
        let nw = obs.waypoints;
        let mut x = Vec::with_capacity(rows.len() * nw * MAP_FEATURES);
        let mut mask = Vec::with_capacity(rows.len() * nw);
        for &r in rows {
            for k in 0..nw {
                let base = (r * nw + k) * MAP_FEATURES;
                x.extend(scale_map(&obs.map_data[base..base + MAP_FEATURES]));
                mask.push(obs.map_valid[r * nw + k]);
            }
        }
        let x = g.constant(Tensor::matrix(rows.len() * nw, MAP_FEATURES, x)?);
        let y = self.map.forward(g, store, x)?;
        Ok(g.group_max(y, nw, &mask))
    }

    /// Relative pose of every anchor `j` in every anchor `i`'s frame, as
    /// `(Δx, Δy, sin Δh, cos Δh)` rows in `(i, j)` order.
    pub fn relative_features(anchors: &[Pose]) -> Tensor {
        let n = anchors.len();
        let mut data = Vec::with_capacity(n * n * 4);
        for a in anchors {
            for b in anchors {
                let r = a.relative(b);
                data.extend([r.x / RELATIVE_SCALE, r.y / RELATIVE_SCALE, r.heading.sin(), r.heading.cos()]);
            }
        }
        Tensor::matrix(n * n, 4, data).expect("pair features")
    }

    /// Attention stack over tokens `h` (all valid) anchored at `anchors`.
    pub fn relational_attention(&self, g: &mut Graph, store: &ParameterStore, h: Var, anchors: &[Pose]) -> Result<Var> {
        let n = anchors.len();
        if g.value(h).rows() != n {
            return Err(Error::Shape("one anchor per token required".into()));
        }
        let rel = g.constant(Self::relative_features(anchors));
        let mask = vec![true; n];
        let mut x = h;
        for layer in &self.layers {
            let e = layer.pe.forward(g, store, rel)?;
            let xn = layer.norm1.forward(g, store, x)?;
            let q = layer.query.forward(g, store, xn)?;
            let kv = g.pair_broadcast(xn, e);
            let k = layer.key.forward(g, store, kv)?;
            let v = layer.value.forward(g, store, kv)?;
            let att = g.attention(q, k, v, self.heads, &mask);
            let o = layer.out.forward(g, store, att)?;
            x = g.add(x, o);
            let xn = layer.norm2.forward(g, store, x)?;
            let f = layer.ffn.forward(g, store, xn)?;
            x = g.add(x, f);
        }
        Ok(x)
    }

    /// Full encoder on the present rows of `obs`, kept on the graph.
    pub fn encode_graph(&self, g: &mut Graph, store: &ParameterStore, obs: &Observation) -> Result<EncodedScene> {
        let agent_rows: Vec<usize> = (0..obs.agents).filter(|&r| obs.agent_present(r)).collect();
        let map_rows: Vec<usize> = (0..obs.polylines).filter(|&r| obs.map_present(r)).collect();
        let mut parts = Vec::new();
        if !agent_rows.is_empty() {
            parts.push(self.encode_history(g, store, obs, &agent_rows)?);
        }
        if !map_rows.is_empty() {
            parts.push(self.encode_map(g, store, obs, &map_rows)?);
        }
        let mut anchors: Vec<Pose> = agent_rows.iter().map(|&r| obs.agent_anchor[r]).collect();
        anchors.extend(map_rows.iter().map(|&r| obs.map_anchor[r]));
        let mut rows = agent_rows.clone();
        rows.extend(map_rows.iter().map(|&r| obs.agents + r));
        let tokens = if parts.is_empty() {
            g.constant(Tensor::zeros(vec![0, self.hidden]))
        } else {
            let h = g.concat_rows(&parts);
            self.relational_attention(g, store, h, &anchors)?
        };
        let tracked = (1..obs.agents).filter(|&r| obs.agent_current(r)).take(self.tracked).collect();
        Ok(EncodedScene { tokens, rows, tracked })
    }

    pub fn encode_scene(&self, store: &ParameterStore, obs: &Observation) -> Result<SceneEncoding> {
        let mut g = Graph::new();
        let enc = self.encode_graph(&mut g, store, obs)?;
        let n = obs.agents + obs.polylines;
        let d = self.hidden;
        let mut tokens = vec![0.0; n * d];
        let mut valid = vec![false; n];
        let values = g.value(enc.tokens);
        for (i, &row) in enc.rows.iter().enumerate() {
            tokens[row * d..(row + 1) * d].copy_from_slice(values.row_slice(i));
            valid[row] = true;
        }
        let mut anchors = obs.agent_anchor.clone();
        anchors.extend_from_slice(&obs.map_anchor);
        let mut kinds = vec![TokenKind::Agent; obs.agents];
        kinds.extend(std::iter::repeat_n(TokenKind::Map, obs.polylines));
        Ok(SceneEncoding {
            tokens: Tensor::matrix(n, d, tokens)?,
            valid,
            anchors,
            kinds,
            agent_ids: obs.agent_ids.clone(),
            tracked: enc.tracked,
        })
    }
}

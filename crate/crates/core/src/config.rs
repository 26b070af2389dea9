//! Run configuration: every tunable with its default, loaded from TOML.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub observation: ObservationConfig,
    pub model: ModelConfig,
    pub planner: PlannerConfig,
    pub simulator: SimulatorConfig,
    pub offline: OfflineConfig,
    pub online: OnlineConfig,
    pub evaluation: EvaluationConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObservationConfig {
    /// Agent rows including the ego at row 0.
    pub agents: usize,
    pub history: usize,
    pub polylines: usize,
    pub waypoints: usize,
    /// Agents whose beliefs are tracked and predicted.
    pub tracked: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateKind {
    Channel,
    Scalar,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub modes: usize,
    pub future: usize,
    /// Length of the ego trajectory fed to the belief update.
    pub ego_steps: usize,
    pub decoder_hidden: usize,
    pub q_hidden: usize,
    pub gate: GateKind,
    pub sigma_floor: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CollisionMode {
    /// Modes with probability at least `p_threshold`.
    Threshold,
    /// Only the most likely mode of each agent.
    ArgmaxOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostWeights {
    pub collision: f64,
    pub comfort: f64,
    pub route: f64,
    pub speed: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerConfig {
    pub option_length: usize,
    pub dt: f64,
    /// Planning horizon in steps; search depth is `horizon / option_length`.
    pub horizon: usize,
    pub iterations: usize,
    pub gamma: f64,
    pub c_p: f64,
    pub p_threshold: f64,
    pub collision_mode: CollisionMode,
    pub weights: CostWeights,
    pub accelerations: Vec<f64>,
    pub lateral_speeds: Vec<f64>,
    /// Accelerations that are combined with nonzero lateral speeds.
    pub lateral_accelerations: Vec<f64>,
    /// Evaluate new leaves with a zero-action rollout to the horizon.
    pub leaf_rollout: bool,
    /// Replan every step instead of after each executed option.
    pub replan_every_step: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulatorConfig {
    pub dt: f64,
    pub duration: usize,
    /// Largest lateral offset from the route before the episode ends.
    pub corridor: f64,
    pub collision_penalty: f64,
    pub expert_weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OfflineConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub halve_every: u64,
    pub weight_decay: f64,
    pub batch: usize,
    /// Snapshot stride within each expert replay.
    pub snapshot_stride: usize,
    pub scenarios: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OnlineConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub decay: f64,
    pub decay_every: u64,
    pub weight_decay: f64,
    pub replay_capacity: usize,
    pub batch: usize,
    pub gamma_q: f64,
    pub target_sync: usize,
    pub bptt: usize,
    pub lambda_start: f64,
    pub lambda_end: f64,
    pub forget_steps: usize,
    pub eval_interval: usize,
    pub eval_scenarios: usize,
    pub scenarios: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub scenarios: usize,
    pub seeds: Vec<u64>,
    pub use_q_prior: bool,
    /// Use recurrent beliefs; otherwise decode each frame from the encoder.
    pub use_belief: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            seed: 0,
            observation: ObservationConfig::default(),
            model: ModelConfig::default(),
            planner: PlannerConfig::default(),
            simulator: SimulatorConfig::default(),
            offline: OfflineConfig::default(),
            online: OnlineConfig::default(),
            evaluation: EvaluationConfig::default(),
        }
    }
}

impl Default for ObservationConfig {
    fn default() -> Self {
        ObservationConfig { agents: 16, history: 20, polylines: 50, waypoints: 20, tracked: 8 }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 16,
            layers: 2,
            heads: 2,
            modes: 6,
            future: 80,
            ego_steps: 20,
            decoder_hidden: 64,
            q_hidden: 64,
            gate: GateKind::Channel,
            sigma_floor: 0.01,
        }
    }
}

impl Default for CostWeights {
    fn default() -> Self {
        CostWeights { collision: 10.0, comfort: 0.1, route: 0.5, speed: 0.5 }
    }
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            option_length: 20,
            dt: 0.1,
            horizon: 80,
            iterations: 100,
            gamma: 0.8,
            c_p: 100.0,
            p_threshold: 0.15,
            collision_mode: CollisionMode::Threshold,
            weights: CostWeights::default(),
            accelerations: vec![-4.0, -2.0, 0.0, 1.0, 3.0],
            lateral_speeds: vec![-1.0, 0.0, 1.0],
            lateral_accelerations: vec![-2.0, 0.0, 1.0],
            leaf_rollout: true,
            replan_every_step: false,
        }
    }
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        SimulatorConfig { dt: 0.1, duration: 200, corridor: 3.0, collision_penalty: -10.0, expert_weight: 0.01 }
    }
}

impl Default for OfflineConfig {
    fn default() -> Self {
        OfflineConfig {
            epochs: 40,
            learning_rate: 2e-4,
            halve_every: 5,
            weight_decay: 0.01,
            batch: 8,
            snapshot_stride: 10,
            scenarios: 60,
        }
    }
}

impl Default for OnlineConfig {
    fn default() -> Self {
        OnlineConfig {
            steps: 20_000,
            learning_rate: 3e-4,
            decay: 0.7,
            decay_every: 50_000,
            weight_decay: 0.01,
            replay_capacity: 100_000,
            batch: 128,
            gamma_q: 0.99,
            target_sync: 500,
            bptt: 10,
            lambda_start: 0.8,
            lambda_end: 0.05,
            forget_steps: 10,
            eval_interval: 5_000,
            eval_scenarios: 10,
            scenarios: 60,
        }
    }
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig { scenarios: 50, seeds: vec![0, 1, 2], use_q_prior: true, use_belief: true }
    }
}

fn check(ok: bool, msg: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(msg.to_string()))
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        check(self.schema_version == CONFIG_SCHEMA_VERSION, "unsupported config schema version")?;
        let o = &self.observation;
        check(o.agents >= 1, "observation.agents must include the ego")?;
        check(o.history >= 1 && o.waypoints >= 2, "history and waypoints must be positive")?;
        check(o.tracked < o.agents, "observation.tracked must be below observation.agents")?;
        let m = &self.model;
        check(m.hidden > 0 && m.layers > 0, "model dimensions must be positive")?;
        check(m.heads > 0 && m.hidden.is_multiple_of(m.heads), "model.heads must divide model.hidden")?;
        check(m.modes > 0 && m.future >= 2 && m.ego_steps > 0, "model horizons must be positive")?;
        check(m.sigma_floor > 0.0, "model.sigma_floor must be positive")?;
        let p = &self.planner;
        check(p.option_length >= 1, "planner.option_length must be at least 1")?;
        check(p.horizon >= p.option_length, "planner.horizon must cover one option")?;
        check(p.dt > 0.0 && p.iterations >= 1, "planner.dt and iterations must be positive")?;
        check((0.0..1.0).contains(&p.p_threshold), "planner.p_threshold must lie in [0, 1)")?;
        check(p.gamma > 0.0 && p.gamma <= 1.0, "planner.gamma must lie in (0, 1]")?;
        check(!p.accelerations.is_empty(), "planner.accelerations is empty")?;
        let s = &self.simulator;
        check(s.dt > 0.0 && s.duration >= 1 && s.corridor > 0.0, "simulator settings must be positive")?;
        let q = &self.online;
        check(q.batch >= 1 && q.replay_capacity >= q.batch, "replay capacity must hold a batch")?;
        check(q.bptt >= 1 && q.target_sync >= 1, "online.bptt and target_sync must be positive")?;
        check(
            (0.0..=1.0).contains(&q.lambda_start) && (0.0..=1.0).contains(&q.lambda_end),
            "exploration rates must lie in [0, 1]",
        )?;
        check(self.offline.batch >= 1, "offline.batch must be positive")?;
        Ok(())
    }

    /// Search depth in options.
    pub fn depth(&self) -> usize {
        (self.planner.horizon / self.planner.option_length).max(1)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Loads `path`; when it does not exist the defaults are written there.
    pub fn load_or_init(path: &Path) -> Result<Self> {
        if path.exists() {
            Self::from_toml(&fs::read_to_string(path)?)
        } else {
            let cfg = RunConfig::default();
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(path, cfg.to_toml())?;
            Ok(cfg)
        }
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

//! Episode environment: scenarios, replayed and reactive agents, rewards,
//! termination and observations.

mod episode;
mod generate;
mod observe;
mod scenario;

pub use episode::{replay_expert, Episode, Frame, Idm, StepResult, Termination};
pub use generate::{generate_scenario, GeneratorParams};
pub use observe::{map_chunks, observe, Observation, AGENT_FEATURES, MAP_FEATURES};
pub use scenario::{
    load_dir, AgentTrack, EgoSpec, LaneType, MapPolyline, Scenario, ScenarioKind, TrackPoint, EGO_ID,
    SCENARIO_SCHEMA_VERSION,
};

//! The learned components bundled for checkpointing.

use std::path::Path;

use crate::belief::BeliefNet;
use crate::config::RunConfig;
use crate::decoder::Decoder;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::nn::checkpoint::SCHEMA_VERSION;
use crate::nn::{Checkpoint, CheckpointMeta, Graph, Mlp, ParameterStore, Tensor};

/// Q-value network: ego token to one value per option.
#[derive(Clone, Debug)]
pub struct QNet {
    pub net: Mlp,
}

impl QNet {
    pub fn new(store: &mut ParameterStore, name: &str, hidden: usize, width: usize, options: usize) -> Result<Self> {
        Ok(QNet { net: Mlp::new(store, name, &[hidden, width, options])? })
    }

    /// Values for a batch of tokens (`rows × D`).
    pub fn values(&self, store: &ParameterStore, tokens: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(tokens.clone());
        let y = self.net.forward(&mut g, store, x)?;
        Ok(g.value(y).clone())
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub encoder: Encoder,
    pub encoder_store: ParameterStore,
    pub belief: BeliefNet,
    pub belief_store: ParameterStore,
    pub decoder: Decoder,
    pub decoder_store: ParameterStore,
    pub q: QNet,
    pub q_store: ParameterStore,
}

impl Model {
    pub fn new(cfg: &RunConfig, seed: u64) -> Result<Self> {
        let base = seed.wrapping_mul(4);
        let mut encoder_store = ParameterStore::new(base);
        let mut belief_store = ParameterStore::new(base + 1);
        let mut decoder_store = ParameterStore::new(base + 2);
        let mut q_store = ParameterStore::new(base + 3);
        let encoder = Encoder::new(&mut encoder_store, &cfg.model, &cfg.observation)?;
        let belief = BeliefNet::new(&mut belief_store, &cfg.model)?;
        let decoder = Decoder::new(&mut decoder_store, &cfg.model)?;
        let q = QNet::new(&mut q_store, "q", cfg.model.hidden, cfg.model.q_hidden, option_count(cfg))?;
        Ok(Model { encoder, encoder_store, belief, belief_store, decoder, decoder_store, q, q_store })
    }

    pub fn checkpoint(&self, cfg: &RunConfig, component: &str, seed: u64) -> Checkpoint {
        let meta = CheckpointMeta {
            schema_version: SCHEMA_VERSION,
            component: component.to_string(),
            hidden_dim: cfg.model.hidden,
            modes: cfg.model.modes,
            future_steps: cfg.model.future,
            seed,
            config_hash: cfg.hash(),
        };
        Checkpoint::from_stores(meta, &[&self.encoder_store, &self.belief_store, &self.decoder_store, &self.q_store])
    }

    pub fn save(&self, path: &Path, cfg: &RunConfig, component: &str, seed: u64) -> Result<()> {
        self.checkpoint(cfg, component, seed).save(path)
    }

    pub fn from_checkpoint(cfg: &RunConfig, ck: &Checkpoint) -> Result<Self> {
        let m = &ck.meta;
        if m.hidden_dim != cfg.model.hidden || m.modes != cfg.model.modes || m.future_steps != cfg.model.future {
            return Err(Error::Config(format!(
                "checkpoint dimensions (D={}, M={}, T_f={}) differ from the configuration",
                m.hidden_dim, m.modes, m.future_steps
            )));
        }
        let mut model = Model::new(cfg, m.seed)?;
        ck.apply_to_stores(&mut [
            &mut model.encoder_store,
            &mut model.belief_store,
            &mut model.decoder_store,
            &mut model.q_store,
        ])?;
        Ok(model)
    }

    pub fn load(path: &Path, cfg: &RunConfig) -> Result<(Self, CheckpointMeta)> {
        if !path.exists() {
            return Err(Error::Config(format!("checkpoint {} does not exist", path.display())));
        }
        let ck = Checkpoint::load(path)?;
        Ok((Self::from_checkpoint(cfg, &ck)?, ck.meta))
    }
}

/// Number of macro-action options the configuration defines.
pub fn option_count(cfg: &RunConfig) -> usize {
    let p = &cfg.planner;
    p.accelerations.iter().map(|a| if p.lateral_accelerations.contains(a) { p.lateral_speeds.len() } else { 1 }).sum()
}

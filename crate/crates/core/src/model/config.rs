use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instance::ProblemKind;

/// What the model consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputVariant {
    /// Distance matrix only; node embeddings come from the precoder.
    EdgeInput,
    /// Node coordinates (plus demand for CVRP); no precoder.
    NodeInput,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub problem: ProblemKind,
    pub embed_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub precoder_layers: usize,
    pub node_encoder_layers: usize,
    pub gcn_layers: usize,
    pub mlp_layers: usize,
    pub k: usize,
    pub clip_c: f64,
    pub onehot_pool: usize,
    pub mix_hidden: usize,
    pub variant: InputVariant,
    pub use_precoder: bool,
    pub use_node_encoder: bool,
    pub use_graph_encoder: bool,
    /// Stabilizer in the edge-gate denominator.
    pub gate_xi: f64,
    pub bn_eps: f64,
}

impl ModelConfig {
    pub fn new(problem: ProblemKind) -> Self {
        ModelConfig {
            problem,
            embed_dim: 256,
            heads: 16,
            ff_dim: 512,
            precoder_layers: 1,
            node_encoder_layers: 6,
            gcn_layers: 6,
            mlp_layers: 3,
            k: 20,
            clip_c: 10.0,
            onehot_pool: 512,
            mix_hidden: 16,
            variant: InputVariant::EdgeInput,
            use_precoder: true,
            use_node_encoder: true,
            use_graph_encoder: true,
            gate_xi: 1e-5,
            bn_eps: 1e-5,
        }
    }

    /// Small configuration used for gradient checks and invariant sweeps.
    pub fn tiny(problem: ProblemKind) -> Self {
        ModelConfig {
            embed_dim: 8,
            heads: 2,
            ff_dim: 16,
            precoder_layers: 1,
            node_encoder_layers: 1,
            gcn_layers: 1,
            mlp_layers: 1,
            k: 3,
            onehot_pool: 32,
            mix_hidden: 4,
            ..ModelConfig::new(problem)
        }
    }

    pub fn with_embed_dim(mut self, h: usize) -> Self {
        self.embed_dim = h;
        self
    }

    pub fn node_variant(mut self) -> Self {
        self.variant = InputVariant::NodeInput;
        self.use_precoder = false;
        self
    }

    /// True when node embeddings come from the mixed-score precoder.
    pub fn precoder_active(&self) -> bool {
        self.variant == InputVariant::EdgeInput && self.use_precoder
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.embed_dim;
        if h == 0 || self.heads == 0 || h % self.heads != 0 {
            return Err(Error::Config(format!("embed_dim {h} must be a positive multiple of heads {}", self.heads)));
        }
        if h % 2 != 0 {
            return Err(Error::Config("embed_dim must be even (edge features split in halves)".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if !(self.clip_c > 0.0) {
            return Err(Error::Config("clip_c must be positive".into()));
        }
        if self.precoder_active() && self.precoder_layers == 0 {
            return Err(Error::Config("precoder enabled with zero layers".into()));
        }
        if self.use_graph_encoder && self.mlp_layers == 0 && self.gcn_layers == 0 {
            return Err(Error::Config("graph encoder has neither GCN nor MLP layers".into()));
        }
        if !self.use_graph_encoder && !self.use_node_encoder {
            return Err(Error::Config("at least one encoder stream must be enabled".into()));
        }
        if self.variant == InputVariant::NodeInput && self.problem == ProblemKind::Atsp {
            return Err(Error::Config("node-input variant needs coordinates; ATSP has none".into()));
        }
        Ok(())
    }

    /// Largest instance size (node count) the model can embed.
    pub fn max_nodes(&self) -> usize {
        if self.precoder_active() {
            self.onehot_pool
        } else {
            usize::MAX
        }
    }

    /// Neighbour count actually used for an `n`-node instance.
    pub fn effective_k(&self, n: usize) -> usize {
        self.k.min(n.saturating_sub(1)).max(1)
    }

    pub fn node_feature_dim(&self) -> usize {
        match self.problem {
            ProblemKind::Cvrp => 4,
            _ => 2,
        }
    }
}

//! The EFormer policy: precoder, graph and node encoders, dual-stream decoder.

mod augment;
pub mod config;
mod forward;
pub mod params;
mod rollout;

use std::sync::Arc;

use rand::seq::index::sample;

pub use augment::{augmented_solve, dihedral, instance_label, max_augmentations};
pub use config::{InputVariant, ModelConfig};
pub use forward::{EncodeInput, StepContext};
pub(crate) use forward::{encode, Ctx};
pub(crate) use rollout::rollout_on_tape;
pub use params::ParamStore;
pub use rollout::{DecodeMode, Policy, RolloutBatch, RolloutOptions, StepTrace};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::instance::ProblemInstance;
use crate::rng::seeded;
use crate::sparse::SparseGraph;
use crate::tensor::{Scalar, Tensor};

/// Seed of the canonical one-hot assignment used when none is given.
pub const CANONICAL_ASSIGNMENT_SEED: u64 = 0;

/// `n` distinct pool indices drawn uniformly without replacement.
pub fn sample_onehot_assignment(n: usize, pool: usize, seed: u64) -> Result<Vec<usize>> {
    if n > pool {
        return Err(Error::Capacity(format!("{n} nodes exceed one-hot pool of {pool}")));
    }
    Ok(sample(&mut seeded(seed), pool, n).into_vec())
}

/// A configuration together with its parameters.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

/// Selection distribution at one decoding step.
#[derive(Clone, Debug)]
pub struct DecoderOutput {
    /// `t x n` probabilities.
    pub probs: Vec<Vec<f64>>,
    /// `t x n` clipped scores `C tanh(.)` before masking.
    pub scores: Vec<Vec<f64>>,
}

fn to_f64<T: Scalar>(t: &Tensor<T>) -> Tensor<f64> {
    t.cast()
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ParamStore::init(&config, seed)?;
        Ok(Model { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        params.check_layout(&config)?;
        Ok(Model { config, params })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model { config: self.config.clone(), params: self.params.cast() }
    }

    fn with_ctx<R>(&self, f: impl FnOnce(&mut Ctx<'_, T>) -> Result<R>) -> Result<R> {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &self.params, &self.config);
        f(&mut ctx)
    }

    /// Temporary node embeddings `h^(P)` (`n x h`).
    pub fn precoder_forward(&self, instance: &ProblemInstance, assignment: &[usize]) -> Result<Tensor<f64>> {
        if !self.config.precoder_active() {
            return Err(Error::Config("precoder is disabled in this configuration".into()));
        }
        self.with_ctx(|ctx| {
            let dist = Arc::new(forward::dist_tensor(instance));
            let v = forward::precoder(ctx, instance, dist, assignment)?;
            Ok(to_f64(ctx.tape.value(v)))
        })
    }

    /// Row-stochastic per-head attention weights of the precoder's first layer.
    pub fn precoder_attention(&self, instance: &ProblemInstance, assignment: &[usize]) -> Result<Vec<Tensor<f64>>> {
        if !self.config.precoder_active() {
            return Err(Error::Config("precoder is disabled in this configuration".into()));
        }
        self.with_ctx(|ctx| {
            let dist = Arc::new(forward::dist_tensor(instance));
            forward::precoder(ctx, instance, dist, assignment)?;
            let att = ctx.tap("precoder.attention").ok_or_else(|| Error::Numeric("no attention recorded".into()))?;
            let w = ctx.tape.attention_weights(att).expect("attention node");
            Ok(w.iter().map(to_f64).collect())
        })
    }

    /// Graph-encoder embeddings `h^G` for input embeddings `h_in` (`n x h`).
    pub fn graph_encoder_forward(&self, h_in: &Tensor<f64>, sparse: &SparseGraph) -> Result<Tensor<f64>> {
        if !self.config.use_graph_encoder {
            return Err(Error::Config("graph encoder is disabled in this configuration".into()));
        }
        if sparse.k != self.config.effective_k(sparse.n) {
            return Err(Error::Numeric(format!("sparse graph has k = {}, configuration expects {}", sparse.k, self.config.effective_k(sparse.n))));
        }
        self.with_ctx(|ctx| {
            let x = ctx.tape.constant(h_in.cast());
            let v = forward::graph_encoder(ctx, x, sparse)?;
            Ok(to_f64(ctx.tape.value(v)))
        })
    }

    /// Edge gates `eta` of the first GCN layer: one row per sparse edge in
    /// [`SparseGraph::edges`] order, one column per channel.
    pub fn edge_gates(&self, h_in: &Tensor<f64>, sparse: &SparseGraph) -> Result<Tensor<f64>> {
        if !self.config.use_graph_encoder || self.config.gcn_layers == 0 {
            return Err(Error::Config("configuration has no GCN layers".into()));
        }
        self.with_ctx(|ctx| {
            let x = ctx.tape.constant(h_in.cast());
            forward::graph_encoder(ctx, x, sparse)?;
            let eta = ctx.tap("gcn.eta").expect("gate recorded");
            Ok(to_f64(ctx.tape.value(eta)))
        })
    }

    /// Node-encoder embeddings `h^N` for input embeddings `h_in` (`n x h`).
    pub fn node_encoder_forward(&self, h_in: &Tensor<f64>) -> Result<Tensor<f64>> {
        if !self.config.use_node_encoder {
            return Err(Error::Config("node encoder is disabled in this configuration".into()));
        }
        if !h_in.all_finite() {
            return Err(Error::Numeric("node encoder input contains non-finite values".into()));
        }
        self.with_ctx(|ctx| {
            let x = ctx.tape.constant(h_in.cast());
            let v = forward::node_encoder(ctx, x);
            Ok(to_f64(ctx.tape.value(v)))
        })
    }

    /// Encodes `instance` and evaluates one decoding step for the given context.
    pub fn decoder_step(&self, instance: &ProblemInstance, input: &EncodeInput, step: &StepContext) -> Result<DecoderOutput> {
        self.with_ctx(|ctx| {
            let enc = encode(ctx, instance, input)?;
            let out = forward::decode_step(ctx, &enc, step)?;
            let lp = ctx.tape.value(out.log_probs);
            let sc = ctx.tape.value(out.scores);
            let rows = lp.rows;
            Ok(DecoderOutput {
                probs: (0..rows).map(|r| lp.row(r).iter().map(|x| x.as_f64().exp()).collect()).collect(),
                scores: (0..rows).map(|r| sc.row(r).iter().map(|x| x.as_f64()).collect()).collect(),
            })
        })
    }

    /// Multi-start rollout with the canonical one-hot assignment (edge input)
    /// or the instance coordinates (node input). `seed` drives sampling.
    pub fn rollout(&self, instance: &ProblemInstance, n_starts: usize, mode: DecodeMode, seed: u64) -> Result<RolloutBatch> {
        let opts = RolloutOptions { n_starts, policy: mode.into(), input: EncodeInput::default(), sample_seed: seed, trace: false };
        self.rollout_with(instance, &opts)
    }
}

#[cfg(test)]
mod tests;

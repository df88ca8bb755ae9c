//! Named learnable arrays.
//!
//! Names follow `module.layer.role`, for example `gcn.2.w3`,
//! `node_encoder.0.bn1.gamma` or `decoder.w1_g`. Layerless arrays omit
//! the layer component.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng as _;

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::instance::ProblemKind;
use crate::rng::seeded;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    /// U(-1/sqrt(fan_in), 1/sqrt(fan_in))
    FanIn(usize),
    Const(f64),
}

#[derive(Clone, Debug)]
pub struct ParamStore<T: Scalar> {
    names: Vec<String>,
    values: Vec<Arc<Tensor<T>>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn empty() -> Self {
        ParamStore { names: Vec::new(), values: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        let name = name.into();
        if let Some(&id) = self.index.get(&name) {
            self.values[id] = Arc::new(value);
            return;
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(Arc::new(value));
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn get(&self, id: usize) -> &Arc<Tensor<T>> {
        &self.values[id]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.values[id].as_ref())
    }

    /// Mutable access; clones the array first if a tape still shares it.
    pub fn get_mut(&mut self, id: usize) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.values[id])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter().map(|v| v.as_ref()))
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.all_finite())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|v| Arc::new(v.cast())).collect(),
            index: self.index.clone(),
        }
    }

    /// Checks that names and shapes match `layout` exactly.
    pub fn check_layout(&self, config: &ModelConfig) -> Result<()> {
        let expected = layout(config);
        if expected.len() != self.len() {
            return Err(Error::Incompatible(format!("expected {} parameter arrays, found {}", expected.len(), self.len())));
        }
        for spec in expected {
            let t = self.by_name(&spec.name).ok_or_else(|| Error::Incompatible(format!("missing parameter `{}`", spec.name)))?;
            if t.shape() != (spec.rows, spec.cols) {
                return Err(Error::Incompatible(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    spec.name,
                    t.shape(),
                    (spec.rows, spec.cols)
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Spec {
    name: String,
    rows: usize,
    cols: usize,
    init: Init,
}

fn spec(name: impl Into<String>, rows: usize, cols: usize, init: Init) -> Spec {
    Spec { name: name.into(), rows, cols, init }
}

fn linear(out: &mut Vec<Spec>, prefix: &str, fan_in: usize, fan_out: usize, bias: bool) {
    out.push(spec(format!("{prefix}.w"), fan_in, fan_out, Init::FanIn(fan_in)));
    if bias {
        out.push(spec(format!("{prefix}.b"), 1, fan_out, Init::FanIn(fan_in)));
    }
}

fn norm(out: &mut Vec<Spec>, prefix: &str, width: usize) {
    out.push(spec(format!("{prefix}.gamma"), 1, width, Init::Const(1.0)));
    out.push(spec(format!("{prefix}.beta"), 1, width, Init::Const(0.0)));
}

/// Every learnable array the configuration needs, in creation order.
fn layout(c: &ModelConfig) -> Vec<Spec> {
    let h = c.embed_dim;
    let mut s = Vec::new();
    if c.precoder_active() {
        s.push(spec("precoder.row_embed", 1, h, Init::FanIn(h)));
        s.push(spec("precoder.pool", c.onehot_pool, h, Init::FanIn(h)));
        if c.problem == ProblemKind::Cvrp {
            linear(&mut s, "precoder.demand", 2, h, false);
        }
        for l in 0..c.precoder_layers {
            let p = format!("precoder.{l}");
            for role in ["wq", "wk", "wv"] {
                s.push(spec(format!("{p}.{role}"), h, h, Init::FanIn(h)));
            }
            linear(&mut s, &format!("{p}.out"), h, h, true);
            let m = c.mix_hidden;
            s.push(spec(format!("{p}.mix_w1"), c.heads, 2 * m, Init::FanIn(2)));
            s.push(spec(format!("{p}.mix_b1"), c.heads, m, Init::FanIn(2)));
            s.push(spec(format!("{p}.mix_w2"), c.heads, m, Init::FanIn(m)));
            s.push(spec(format!("{p}.mix_b2"), c.heads, 1, Init::FanIn(m)));
            linear(&mut s, &format!("{p}.ff1"), h, c.ff_dim, true);
            linear(&mut s, &format!("{p}.ff2"), c.ff_dim, h, true);
        }
    } else {
        linear(&mut s, "input", c.node_feature_dim(), h, true);
    }
    if c.use_graph_encoder {
        s.push(spec("gcn.a1", h, h, Init::FanIn(h)));
        s.push(spec("gcn.a2", 1, h / 2, Init::FanIn(1)));
        s.push(spec("gcn.b3", 1, h / 2, Init::FanIn(1)));
        s.push(spec("gcn.a3", 1, h / 2, Init::FanIn(1)));
        for l in 0..c.gcn_layers {
            for role in ["w1", "w2", "w3", "w4", "w5"] {
                s.push(spec(format!("gcn.{l}.{role}"), h, h, Init::FanIn(h)));
            }
            norm(&mut s, &format!("gcn.{l}.bn_node"), h);
            norm(&mut s, &format!("gcn.{l}.bn_edge"), h);
        }
        for l in 0..c.mlp_layers {
            linear(&mut s, &format!("mlp.{l}"), h, h, true);
        }
    }
    if c.use_node_encoder {
        for l in 0..c.node_encoder_layers {
            let p = format!("node_encoder.{l}");
            for role in ["wq", "wk", "wv"] {
                s.push(spec(format!("{p}.{role}"), h, h, Init::FanIn(h)));
            }
            linear(&mut s, &format!("{p}.out"), h, h, true);
            norm(&mut s, &format!("{p}.bn1"), h);
            linear(&mut s, &format!("{p}.ff1"), h, c.ff_dim, true);
            linear(&mut s, &format!("{p}.ff2"), c.ff_dim, h, true);
            norm(&mut s, &format!("{p}.bn2"), h);
        }
    }
    for (on, tag) in [(c.use_graph_encoder, "g"), (c.use_node_encoder, "n")] {
        if !on {
            continue;
        }
        for role in ["wk", "wv", "w1", "w2", "w3"] {
            s.push(spec(format!("decoder.{role}_{tag}"), h, h, Init::FanIn(h)));
        }
        s.push(spec(format!("decoder.placeholder_{tag}"), 1, h, Init::FanIn(h)));
    }
    if c.problem == ProblemKind::Cvrp {
        s.push(spec("decoder.capacity", 1, h, Init::FanIn(1)));
    }
    s
}

impl<T: Scalar> ParamStore<T> {
    /// Fresh parameters for `config`, deterministic in `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(seed);
        let mut store = ParamStore::empty();
        for sp in layout(config) {
            let data = (0..sp.rows * sp.cols)
                .map(|_| match sp.init {
                    Init::FanIn(f) => {
                        let b = 1.0 / (f as f64).sqrt();
                        T::of(rng.gen_range(-b..b))
                    }
                    Init::Const(v) => T::of(v),
                })
                .collect();
            store.insert(sp.name, Tensor::from_vec(sp.rows, sp.cols, data));
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_matches_layout() {
        let c = ModelConfig::tiny(ProblemKind::Cvrp);
        let a = ParamStore::<f64>::init(&c, 3).unwrap();
        let b = ParamStore::<f64>::init(&c, 3).unwrap();
        assert_eq!(a.len(), b.len());
        for ((na, ta), (nb, tb)) in a.iter().zip(b.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta, tb);
        }
        a.check_layout(&c).unwrap();
        assert!(a.all_finite());
        assert!(a.by_name("decoder.capacity").is_some());
        assert!(a.by_name("precoder.demand.w").is_some());
    }

    #[test]
    fn ablated_streams_have_no_parameters() {
        let mut c = ModelConfig::tiny(ProblemKind::Tsp);
        c.use_node_encoder = false;
        let p = ParamStore::<f32>::init(&c, 0).unwrap();
        assert!(p.iter().all(|(n, _)| !n.starts_with("node_encoder") && !n.ends_with("_n")));
        assert!(p.check_layout(&ModelConfig::tiny(ProblemKind::Tsp)).is_err());
    }

    #[test]
    fn node_variant_replaces_precoder_with_input_projection() {
        let c = ModelConfig::tiny(ProblemKind::Tsp).node_variant();
        let p = ParamStore::<f32>::init(&c, 0).unwrap();
        assert!(p.by_name("input.w").is_some());
        assert!(p.iter().all(|(n, _)| !n.starts_with("precoder")));
    }
}

//! Forward computation of the policy on a [`Tape`].

use std::sync::Arc;

use super::config::ModelConfig;
use super::params::ParamStore;
use crate::autodiff::{Mask, MixVars, Tape, Var};
use crate::error::{Error, Result};
use crate::instance::{ProblemInstance, ProblemKind};
use crate::sparse::{knn_sparsify, SparseGraph};
use crate::tensor::{Scalar, Tensor};

/// Binds named parameters onto a tape.
pub(crate) struct Ctx<'a, T: Scalar> {
    pub tape: &'a mut Tape<T>,
    pub params: &'a ParamStore<T>,
    pub config: &'a ModelConfig,
    /// Intermediate variables kept for inspection, by role.
    pub taps: Vec<(&'static str, Var)>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, params: &'a ParamStore<T>, config: &'a ModelConfig) -> Self {
        Ctx { tape, params, config, taps: Vec::new() }
    }

    pub fn tap(&self, role: &str) -> Option<Var> {
        self.taps.iter().find(|(r, _)| *r == role).map(|&(_, v)| v)
    }

    pub fn p(&mut self, name: &str) -> Var {
        let id = self.params.id(name).unwrap_or_else(|| panic!("parameter `{name}` missing from store"));
        self.tape.param(id, self.params.get(id))
    }

    fn linear(&mut self, x: Var, prefix: &str) -> Var {
        let w = self.p(&format!("{prefix}.w"));
        let y = self.tape.matmul(x, w);
        match self.params.id(&format!("{prefix}.b")) {
            Some(_) => {
                let b = self.p(&format!("{prefix}.b"));
                self.tape.add_row(y, b)
            }
            None => y,
        }
    }

    fn feed_forward(&mut self, x: Var, prefix: &str) -> Var {
        let hidden = self.linear(x, &format!("{prefix}.ff1"));
        let hidden = self.tape.relu(hidden);
        self.linear(hidden, &format!("{prefix}.ff2"))
    }

    fn norm(&mut self, x: Var, prefix: &str) -> Var {
        let g = self.p(&format!("{prefix}.gamma"));
        let b = self.p(&format!("{prefix}.beta"));
        let eps = T::of(self.config.bn_eps);
        self.tape.batch_norm(x, g, b, eps)
    }

    fn broadcast_rows(&mut self, row: Var, n: usize) -> Var {
        self.tape.gather_rows(row, Arc::new(vec![0; n]))
    }
}

/// Node features for the coordinate-input path: `[x, y]`, plus
/// `[demand / capacity, is_depot]` for CVRP.
pub(crate) fn node_features<T: Scalar>(instance: &ProblemInstance, coords: &[[f64; 2]]) -> Tensor<T> {
    let f = if instance.kind == ProblemKind::Cvrp { 4 } else { 2 };
    let mut t = Tensor::zeros(instance.n, f);
    for (i, p) in coords.iter().enumerate() {
        t.set(i, 0, T::of(p[0]));
        t.set(i, 1, T::of(p[1]));
        if f == 4 {
            let cap = instance.capacity.unwrap_or(1).max(1) as f64;
            t.set(i, 2, T::of(instance.demand(i) as f64 / cap));
            t.set(i, 3, T::of(if i == 0 { 1.0 } else { 0.0 }));
        }
    }
    t
}

pub(crate) fn dist_tensor<T: Scalar>(instance: &ProblemInstance) -> Tensor<T> {
    Tensor::from_f64(instance.n, instance.n, instance.dist.as_slice())
}

/// Temporary node embeddings from the distance matrix and a one-hot
/// assignment (indices into the pool).
pub(crate) fn precoder<T: Scalar>(ctx: &mut Ctx<'_, T>, instance: &ProblemInstance, dist: Arc<Tensor<T>>, assignment: &[usize]) -> Result<Var> {
    let n = instance.n;
    let c = ctx.config;
    if assignment.len() != n {
        return Err(Error::Argument(format!("one-hot assignment has {} rows for {n} nodes", assignment.len())));
    }
    if let Some(&bad) = assignment.iter().find(|&&a| a >= c.onehot_pool) {
        return Err(Error::Capacity(format!("one-hot index {bad} outside pool of {}", c.onehot_pool)));
    }
    if !dist.all_finite() {
        return Err(Error::Numeric("distance matrix contains non-finite values".into()));
    }
    let pool = ctx.p("precoder.pool");
    let col = ctx.tape.gather_rows(pool, Arc::new(assignment.to_vec()));
    let row_embed = ctx.p("precoder.row_embed");
    let mut row = ctx.broadcast_rows(row_embed, n);
    if instance.kind == ProblemKind::Cvrp {
        let feats = node_features::<T>(instance, &vec![[0.0, 0.0]; n]);
        let mut demand_feats = Tensor::zeros(n, 2);
        for i in 0..n {
            demand_feats.set(i, 0, feats.at(i, 2));
            demand_feats.set(i, 1, feats.at(i, 3));
        }
        let df = ctx.tape.constant(demand_feats);
        let emb = ctx.linear(df, "precoder.demand");
        row = ctx.tape.add(row, emb);
    }
    for l in 0..c.precoder_layers {
        let p = format!("precoder.{l}");
        let wq = ctx.p(&format!("{p}.wq"));
        let wk = ctx.p(&format!("{p}.wk"));
        let wv = ctx.p(&format!("{p}.wv"));
        let q = ctx.tape.matmul(row, wq);
        let k = ctx.tape.matmul(col, wk);
        let v = ctx.tape.matmul(col, wv);
        let mix = MixVars {
            w1: ctx.p(&format!("{p}.mix_w1")),
            b1: ctx.p(&format!("{p}.mix_b1")),
            w2: ctx.p(&format!("{p}.mix_w2")),
            b2: ctx.p(&format!("{p}.mix_b2")),
        };
        let att = ctx.tape.mixed_score_attention(q, k, v, Arc::clone(&dist), mix, c.heads);
        ctx.taps.push(("precoder.attention", att));
        let att = ctx.linear(att, &format!("{p}.out"));
        let hat = ctx.tape.add(row, att);
        let ff = ctx.feed_forward(hat, &p);
        row = ctx.tape.add(hat, ff);
    }
    Ok(row)
}

/// Linear projection of node features (coordinate-input path).
pub(crate) fn input_projection<T: Scalar>(ctx: &mut Ctx<'_, T>, instance: &ProblemInstance, coords: &[[f64; 2]]) -> Var {
    let feats = ctx.tape.constant(node_features(instance, coords));
    ctx.linear(feats, "input")
}

/// Residual gated GCN over the sparse graph followed by the MLP stack.
pub(crate) fn graph_encoder<T: Scalar>(ctx: &mut Ctx<'_, T>, h_in: Var, sparse: &SparseGraph) -> Result<Var> {
    let n = sparse.n;
    let (rows, cols) = ctx.tape.value(h_in).shape();
    if rows != n || cols != ctx.config.embed_dim {
        return Err(Error::Numeric(format!("graph encoder input is {rows}x{cols}, expected {n}x{}", ctx.config.embed_dim)));
    }
    let a1 = ctx.p("gcn.a1");
    let mut x = ctx.tape.matmul(h_in, a1);
    if ctx.config.gcn_layers > 0 {
        let edges = sparse.edges();
        let src = Arc::new(edges.iter().map(|e| e.0).collect::<Vec<_>>());
        let dst = Arc::new(edges.iter().map(|e| e.1).collect::<Vec<_>>());
        let weights = Tensor::from_vec(edges.len(), 1, edges.iter().map(|&(i, j)| T::of(sparse.edge_weight[i * n + j])).collect());
        let codes = Tensor::from_vec(edges.len(), 1, edges.iter().map(|&(i, j)| T::of(sparse.code(i, j) as f64)).collect());
        let wcol = ctx.tape.constant(weights);
        let ccol = ctx.tape.constant(codes);
        let a2 = ctx.p("gcn.a2");
        let b3 = ctx.p("gcn.b3");
        let a3 = ctx.p("gcn.a3");
        let we = ctx.tape.matmul(wcol, a2);
        let we = ctx.tape.add_row(we, b3);
        let ce = ctx.tape.matmul(ccol, a3);
        let mut e = ctx.tape.concat_cols(&[we, ce]);
        let xi = T::of(ctx.config.gate_xi);
        for l in 0..ctx.config.gcn_layers {
            let p = format!("gcn.{l}");
            let w1 = ctx.p(&format!("{p}.w1"));
            let w2 = ctx.p(&format!("{p}.w2"));
            let w3 = ctx.p(&format!("{p}.w3"));
            let w4 = ctx.p(&format!("{p}.w4"));
            let w5 = ctx.p(&format!("{p}.w5"));
            // node update with edge gates
            let ux = ctx.tape.matmul(x, w1);
            let vx = ctx.tape.matmul(x, w2);
            let gate = ctx.tape.sigmoid(e);
            let denom = ctx.tape.scatter_add_rows(gate, Arc::clone(&src), n);
            let denom = ctx.tape.gather_rows(denom, Arc::clone(&src));
            let denom = ctx.tape.add_scalar(denom, xi);
            let eta = ctx.tape.div(gate, denom);
            ctx.taps.push(("gcn.eta", eta));
            let vx_j = ctx.tape.gather_rows(vx, Arc::clone(&dst));
            let msg = ctx.tape.mul(eta, vx_j);
            let agg = ctx.tape.scatter_add_rows(msg, Arc::clone(&src), n);
            let pre = ctx.tape.add(ux, agg);
            let pre = ctx.norm(pre, &format!("{p}.bn_node"));
            let act = ctx.tape.relu(pre);
            let x_next = ctx.tape.add(x, act);
            // edge update
            let ew = ctx.tape.matmul(e, w3);
            let ax = ctx.tape.matmul(x, w4);
            let bx = ctx.tape.matmul(x, w5);
            let ax_i = ctx.tape.gather_rows(ax, Arc::clone(&src));
            let bx_j = ctx.tape.gather_rows(bx, Arc::clone(&dst));
            let pre_e = ctx.tape.add(ew, ax_i);
            let pre_e = ctx.tape.add(pre_e, bx_j);
            let pre_e = ctx.norm(pre_e, &format!("{p}.bn_edge"));
            let act_e = ctx.tape.relu(pre_e);
            e = ctx.tape.add(e, act_e);
            x = x_next;
        }
    }
    for l in 0..ctx.config.mlp_layers {
        x = ctx.linear(x, &format!("mlp.{l}"));
        if l + 1 < ctx.config.mlp_layers {
            x = ctx.tape.relu(x);
        }
    }
    Ok(x)
}

/// Self-attention encoder: MHA and FF sublayers, each with a residual
/// connection and batch normalization.
pub(crate) fn node_encoder<T: Scalar>(ctx: &mut Ctx<'_, T>, h_in: Var) -> Var {
    let mut h = h_in;
    for l in 0..ctx.config.node_encoder_layers {
        let p = format!("node_encoder.{l}");
        let wq = ctx.p(&format!("{p}.wq"));
        let wk = ctx.p(&format!("{p}.wk"));
        let wv = ctx.p(&format!("{p}.wv"));
        let q = ctx.tape.matmul(h, wq);
        let k = ctx.tape.matmul(h, wk);
        let v = ctx.tape.matmul(h, wv);
        let att = ctx.tape.attention(q, k, v, ctx.config.heads, None);
        ctx.taps.push(("node_encoder.attention", att));
        let att = ctx.linear(att, &format!("{p}.out"));
        let res = ctx.tape.add(h, att);
        let hat = ctx.norm(res, &format!("{p}.bn1"));
        let ff = ctx.feed_forward(hat, &p);
        let res = ctx.tape.add(hat, ff);
        h = ctx.norm(res, &format!("{p}.bn2"));
    }
    h
}

/// Per-stream decoder tensors, computed once per encoding.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Stream {
    pub keys: Var,
    pub values: Var,
    /// `(n + 1) x h` query contributions of each node (last row: placeholder)
    /// as the first node and as the current node.
    pub first_table: Var,
    pub last_table: Var,
    pub w3: Var,
}

/// Everything the decoder needs for one instance encoding.
#[derive(Clone, Debug)]
pub(crate) struct Encoded {
    pub n: usize,
    pub(crate) graph: Option<Stream>,
    pub(crate) node: Option<Stream>,
    pub(crate) key_sum: Var,
    pub(crate) capacity: Option<Var>,
}

/// Per-call encoding options.
#[derive(Clone, Debug, Default)]
pub struct EncodeInput {
    /// Pool indices for the precoder column stream.
    pub assignment: Option<Vec<usize>>,
    /// Coordinates overriding the instance's (symmetry augmentation).
    pub coords: Option<Vec<[f64; 2]>>,
}

fn make_stream<T: Scalar>(ctx: &mut Ctx<'_, T>, emb: Var, tag: &str) -> Stream {
    let wk = ctx.p(&format!("decoder.wk_{tag}"));
    let wv = ctx.p(&format!("decoder.wv_{tag}"));
    let w1 = ctx.p(&format!("decoder.w1_{tag}"));
    let w2 = ctx.p(&format!("decoder.w2_{tag}"));
    let w3 = ctx.p(&format!("decoder.w3_{tag}"));
    let ph = ctx.p(&format!("decoder.placeholder_{tag}"));
    let keys = ctx.tape.matmul(emb, wk);
    let values = ctx.tape.matmul(emb, wv);
    let ext = ctx.tape.concat_rows(&[emb, ph]);
    let first_table = ctx.tape.matmul(ext, w1);
    let last_table = ctx.tape.matmul(ext, w2);
    Stream { keys, values, first_table, last_table, w3 }
}

/// Runs the input stage and both encoders, then precomputes decoder keys.
pub(crate) fn encode<T: Scalar>(ctx: &mut Ctx<'_, T>, instance: &ProblemInstance, input: &EncodeInput) -> Result<Encoded> {
    let c = ctx.config;
    let n = instance.n;
    if instance.kind != c.problem {
        return Err(Error::Config(format!("model trained for {} cannot solve {}", c.problem, instance.kind)));
    }
    if n < 2 {
        return Err(Error::Argument("instance needs at least 2 nodes".into()));
    }
    let h0 = if c.precoder_active() {
        if n > c.onehot_pool {
            return Err(Error::Capacity(format!("instance has {n} nodes, one-hot pool holds {}", c.onehot_pool)));
        }
        let default: Vec<usize>;
        let assignment = match &input.assignment {
            Some(a) => a.as_slice(),
            None => {
                default = super::sample_onehot_assignment(n, c.onehot_pool, super::CANONICAL_ASSIGNMENT_SEED)?;
                &default
            }
        };
        precoder(ctx, instance, Arc::new(dist_tensor(instance)), assignment)?
    } else {
        let coords = input
            .coords
            .as_ref()
            .or(instance.coords.as_ref())
            .ok_or_else(|| Error::Config("coordinate-input model needs node coordinates".into()))?;
        if coords.iter().any(|p| !(p[0].is_finite() && p[1].is_finite())) {
            return Err(Error::Numeric("non-finite coordinates".into()));
        }
        input_projection(ctx, instance, coords)
    };
    let graph = if c.use_graph_encoder {
        let sparse = knn_sparsify(instance, c.effective_k(n))?;
        let hg = graph_encoder(ctx, h0, &sparse)?;
        Some(make_stream(ctx, hg, "g"))
    } else {
        None
    };
    let node = if c.use_node_encoder {
        let hn = node_encoder(ctx, h0);
        Some(make_stream(ctx, hn, "n"))
    } else {
        None
    };
    let key_sum = match (&graph, &node) {
        (Some(g), Some(nn)) => ctx.tape.add(g.keys, nn.keys),
        (Some(g), None) => g.keys,
        (None, Some(nn)) => nn.keys,
        (None, None) => unreachable!("validated: at least one stream"),
    };
    let capacity = (c.problem == ProblemKind::Cvrp).then(|| ctx.p("decoder.capacity"));
    Ok(Encoded { n, graph, node, key_sum, capacity })
}

/// Decoder context for a batch of trajectories at one step.
#[derive(Clone, Debug)]
pub struct StepContext {
    /// First node per trajectory; the node count `n` stands for "none yet".
    pub first: Vec<usize>,
    /// Current node per trajectory; `n` stands for "none yet".
    pub last: Vec<usize>,
    /// `t x n`, `true` = not selectable.
    pub mask: Mask,
    /// Remaining capacity / capacity, CVRP only.
    pub load_ratio: Option<Vec<f64>>,
}

/// Output of one decoding step on the tape.
pub(crate) struct StepVars {
    /// Clipped compatibilities `C tanh(.)` before masking, `t x n`.
    pub scores: Var,
    /// Masked log-probabilities, `t x n`.
    pub log_probs: Var,
}

pub(crate) fn decode_step<T: Scalar>(ctx: &mut Ctx<'_, T>, enc: &Encoded, step: &StepContext) -> Result<StepVars> {
    let t = step.first.len();
    let n = enc.n;
    if step.last.len() != t || step.mask.len() != t * n {
        return Err(Error::Argument("step context shapes disagree".into()));
    }
    if step.first.iter().chain(&step.last).any(|&i| i > n) {
        return Err(Error::Argument(format!("step context node index above {n}")));
    }
    for r in 0..t {
        if step.mask[r * n..(r + 1) * n].iter().all(|&m| m) {
            return Err(Error::Decode(format!("trajectory {r} has every node masked")));
        }
    }
    let first = Arc::new(step.first.clone());
    let last = Arc::new(step.last.clone());
    let mut query: Option<Var> = None;
    for s in [enc.graph, enc.node].into_iter().flatten() {
        let f = ctx.tape.gather_rows(s.first_table, Arc::clone(&first));
        let l = ctx.tape.gather_rows(s.last_table, Arc::clone(&last));
        let qs = ctx.tape.add(f, l);
        query = Some(match query {
            Some(q) => ctx.tape.add(q, qs),
            None => qs,
        });
    }
    let mut q = query.expect("at least one stream");
    if let (Some(cap), Some(ratio)) = (enc.capacity, &step.load_ratio) {
        let col = ctx.tape.constant(Tensor::from_f64(t, 1, ratio));
        let term = ctx.tape.matmul(col, cap);
        q = ctx.tape.add(q, term);
    }
    let mut glimpse: Option<Var> = None;
    for s in [enc.graph, enc.node].into_iter().flatten() {
        let a = ctx.tape.attention(q, s.keys, s.values, ctx.config.heads, Some(Arc::clone(&step.mask)));
        let mapped = ctx.tape.matmul(a, s.w3);
        glimpse = Some(match glimpse {
            Some(g) => ctx.tape.add(g, mapped),
            None => mapped,
        });
    }
    let glimpse = glimpse.expect("at least one stream");
    let logits = ctx.tape.matmul_t(glimpse, false, enc.key_sum, true);
    let inv = T::one() / T::of(ctx.config.embed_dim as f64).sqrt();
    let logits = ctx.tape.scale(logits, inv);
    let clipped = ctx.tape.tanh(logits);
    let scores = ctx.tape.scale(clipped, T::of(ctx.config.clip_c));
    let log_probs = ctx.tape.masked_log_softmax(scores, Some(Arc::clone(&step.mask)));
    Ok(StepVars { scores, log_probs })
}

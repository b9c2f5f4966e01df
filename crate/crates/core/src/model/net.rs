use super::{AttnIds, FfIds, LnIds, ModelError, PolicyParams, DYNAMIC_FEATURES, STATIC_FEATURES};
use crate::tensor::{Tape, Tensor, TensorError, Var};
use crate::vrp::{Instance, TaskSpec};

/// Forward computation recorded on a tape bound to one parameter set.
pub struct Net<'p> {
    pub tape: Tape<'p>,
    vars: Vec<Var>,
    params: &'p PolicyParams,
}

/// Result of soft clustering.
#[derive(Clone, Copy, Debug)]
pub struct ClusterOutput {
    /// `[N_c × d]` centers after the final residual and normalization.
    pub centers: Var,
    /// `[(n+1) × N_c]` mixing coefficients of the final iteration.
    pub psi: Var,
    /// Centers of the final iteration before the residual step, `ψᵀH`.
    pub pre_residual: Var,
}

/// Everything the decoder needs from one encoder pass.
#[derive(Clone, Debug)]
pub struct EncodedInstance {
    pub h: Var,
    pub clusters: ClusterOutput,
    nodes: usize,
    h_top: Var,
    center_row: Var,
    center_shares: Var,
    dec_kv: Vec<(Var, Var)>,
    pointer_keys: Var,
}

impl EncodedInstance {
    pub fn nodes(&self) -> usize {
        self.nodes
    }
}

/// Per-agent decoder inputs for one step.
#[derive(Clone, Debug, Default)]
pub struct StepInput {
    pub positions: Vec<usize>,
    /// First customer of each agent (the depot before any move).
    pub first: Vec<usize>,
    pub dynamic: Vec<[f64; DYNAMIC_FEATURES]>,
    /// Nodes already removed from each agent's cluster centers.
    pub subtracted: Vec<Vec<bool>>,
    /// Feasible next nodes per agent; every row needs a `true`.
    pub feasible: Vec<Vec<bool>>,
}

impl StepInput {
    pub fn agents(&self) -> usize {
        self.positions.len()
    }
}

#[derive(Clone, Debug)]
pub struct DecodeStep {
    /// `[a × (n+1)]`; infeasible entries are 0 here and carry no mass.
    pub log_probs: Var,
    /// Agent contexts before the decoder layers.
    pub contexts: Var,
    /// Agent contexts after the decoder layers.
    pub outputs: Var,
    /// Agents transformed by each decoder layer, ascending.
    pub selected: Vec<Vec<usize>>,
}

/// Top `k` indices of `scores` by value, ties to the lower index, returned
/// in ascending index order.
fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut chosen = order[..k].to_vec();
    chosen.sort_unstable();
    chosen
}

pub(crate) fn static_features(instance: &Instance) -> Tensor {
    let n1 = instance.coords.len();
    let mut data = Vec::with_capacity(n1 * STATIC_FEATURES);
    for i in 0..n1 {
        let [x, y] = instance.coords[i];
        let [o, c] = instance.time_windows[i];
        data.extend_from_slice(&[x, y, instance.demand[i], o, c]);
    }
    Tensor::matrix(n1, STATIC_FEATURES, data).expect("sizes agree")
}

impl<'p> Net<'p> {
    pub fn new(params: &'p PolicyParams) -> Self {
        let mut tape = Tape::with_params(params.tensors());
        let vars = tape.bind_params();
        Net { tape, vars, params }
    }

    pub fn params(&self) -> &'p PolicyParams {
        self.params
    }

    fn p(&self, id: usize) -> Var {
        self.vars[id]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    /// Row-wise projection of the static features; the depot has its own
    /// weights.
    pub fn embed(&mut self, instance: &Instance) -> Result<Var, ModelError> {
        let feats = static_features(instance);
        let depot = self.tape.constant(Tensor::row_vector(feats.row(0).to_vec()));
        let rest = Tensor::matrix(instance.n(), STATIC_FEATURES, feats.data()[STATIC_FEATURES..].to_vec())?;
        let customers = self.tape.constant(rest);
        let ids = &self.params.ids;
        let (dw, db, cw, cb) = (self.p(ids.depot_w), self.p(ids.depot_b), self.p(ids.cust_w), self.p(ids.cust_b));
        let depot = self.tape.linear(depot, dw, db)?;
        let customers = self.tape.linear(customers, cw, cb)?;
        Ok(self.tape.concat_rows(&[depot, customers])?)
    }

    fn attention_block(
        &mut self,
        x: Var,
        keys: Var,
        values: Var,
        ids: &AttnIds,
        mask: Option<Vec<bool>>,
    ) -> Result<Var, ModelError> {
        let q = self.tape.matmul(x, self.p(ids.wq))?;
        let att = self.tape.attention(q, keys, values, self.params.config().heads, mask)?;
        Ok(self.tape.linear(att, self.p(ids.wo), self.p(ids.bo))?)
    }

    fn ff(&mut self, x: Var, ids: &FfIds) -> Result<Var, ModelError> {
        let h = self.tape.linear(x, self.p(ids.w1), self.p(ids.b1))?;
        let h = self.tape.relu(h)?;
        Ok(self.tape.linear(h, self.p(ids.w2), self.p(ids.b2))?)
    }

    fn add_norm(&mut self, x: Var, y: Var, ids: &LnIds) -> Result<Var, ModelError> {
        let s = self.tape.add(x, y)?;
        Ok(self.tape.layer_norm(s, self.p(ids.gain), self.p(ids.bias))?)
    }

    /// Encoder layer: self-attention, then a feed-forward replaced by the
    /// top-k of m expert MLPs. Returns the layer output and the `[N × m]`
    /// gate matrix (zero for unselected experts).
    pub fn moe_layer(&mut self, h: Var, layer: usize) -> Result<(Var, Tensor), ModelError> {
        let ids = self.params.ids.enc[layer].clone();
        let k = self.tape.matmul(h, self.p(ids.attn.wk))?;
        let v = self.tape.matmul(h, self.p(ids.attn.wv))?;
        let att = self.attention_block(h, k, v, &ids.attn, None)?;
        let ht = self.add_norm(h, att, &ids.ln1)?;

        let logits = self.tape.matmul(ht, self.p(ids.gate))?;
        let (rows, m) = (self.value(logits).rows(), self.value(logits).cols());
        let top = self.params.config().top_k;
        let mut mask = vec![true; rows * m];
        for i in 0..rows {
            for e in top_k(self.value(logits).row(i), top) {
                mask[i * m + e] = false;
            }
        }
        let gates = self.tape.softmax(logits, Some(mask.clone()))?;
        let d = self.params.config().d;
        let mut mixed = self.tape.constant(Tensor::zeros(&[rows, d]));
        for (e, expert) in ids.experts.iter().enumerate() {
            let routed: Vec<usize> = (0..rows).filter(|&i| !mask[i * m + e]).collect();
            if routed.is_empty() {
                continue;
            }
            let x = self.tape.gather_rows(ht, &routed)?;
            let y = self.ff(x, expert)?;
            let g = self.tape.select_col(gates, e)?;
            let g = self.tape.gather_rows(g, &routed)?;
            let y = self.tape.scale_rows(y, g)?;
            mixed = self.tape.scatter_add_rows(mixed, y, &routed)?;
        }
        let out = self.add_norm(ht, mixed, &ids.ln2)?;
        Ok((out, self.value(gates).clone()))
    }

    /// Embedding followed by every encoder layer.
    pub fn encode_nodes(&mut self, instance: &Instance) -> Result<Var, ModelError> {
        let mut h = self.embed(instance)?;
        for layer in 0..self.params.config().enc_layers {
            h = self.moe_layer(h, layer)?.0;
        }
        Ok(h)
    }

    /// Prompt-conditioned soft clustering of node embeddings `h`.
    pub fn cluster(&mut self, h: Var, task: TaskSpec) -> Result<ClusterOutput, ModelError> {
        let cfg = self.params.config();
        let ids = &self.params.ids;
        let (prompt_w, wh, wc, c0) = (self.p(ids.prompt), self.p(ids.cluster_h), self.p(ids.cluster_c), self.p(ids.centers0));
        let ln = ids.cluster_ln.clone();
        let gamma = self.tape.constant(Tensor::row_vector(task.onehot().to_vec()));
        let alpha = self.tape.matmul(gamma, prompt_w)?;
        let alpha_rows = self.tape.gather_rows(alpha, &vec![0; cfg.n_clusters])?;
        let hh = self.tape.matmul(h, wh)?;
        let inv_sqrt = 1.0 / (cfg.d as f64).sqrt();
        let mut centers = c0;
        let mut last = None;
        for _ in 0..cfg.cluster_iters {
            let cat = self.tape.concat_cols(&[centers, alpha_rows])?;
            let chat = self.tape.matmul(cat, wc)?;
            let scores = self.tape.matmul_nt(hh, chat)?;
            let scores = self.tape.scale(scores, inv_sqrt)?;
            let psi = self.tape.softmax(scores, None)?;
            let pre = self.tape.matmul_tn(psi, h)?;
            let s = self.tape.add(chat, pre)?;
            centers = self.tape.layer_norm(s, self.p(ln.gain), self.p(ln.bias))?;
            last = Some((psi, pre));
        }
        let (psi, pre_residual) = last.expect("at least one iteration");
        Ok(ClusterOutput {
            centers,
            psi,
            pre_residual,
        })
    }

    /// Runs the encoder once and precomputes every per-instance decoder
    /// term.
    pub fn encode(&mut self, instance: &Instance) -> Result<EncodedInstance, ModelError> {
        let cfg = self.params.config().clone();
        let d = cfg.d;
        let h = self.encode_nodes(instance)?;
        let clusters = self.cluster(h, instance.task)?;
        let ids = self.params.ids.clone();
        let combine = self.p(ids.combine_w);

        // The combine weight splits into a block for the current node and
        // one block per center, so the center term is linear in the
        // centers and visited-node subtractions can be applied per agent
        // as a single matrix product.
        let top = self.tape.gather_rows(combine, &(0..d).collect::<Vec<_>>())?;
        let h_top = self.tape.matmul(h, top)?;
        let rest = self.tape.gather_rows(combine, &(d..(1 + cfg.n_clusters) * d).collect::<Vec<_>>())?;
        let flat = self.tape.reshape(clusters.centers, 1, cfg.n_clusters * d)?;
        let center_row = self.tape.matmul(flat, rest)?;
        let center_row = self.tape.add(center_row, self.p(ids.combine_b))?;
        let mut center_shares = None;
        for j in 0..cfg.n_clusters {
            let block = self.tape.gather_rows(combine, &((1 + j) * d..(2 + j) * d).collect::<Vec<_>>())?;
            let hw = self.tape.matmul(h, block)?;
            let w = self.tape.select_col(clusters.psi, j)?;
            let term = self.tape.scale_rows(hw, w)?;
            center_shares = Some(match center_shares {
                None => term,
                Some(acc) => self.tape.add(acc, term)?,
            });
        }
        let dec_kv = ids
            .dec
            .iter()
            .map(|l| Ok((self.tape.matmul(h, self.p(l.attn.wk))?, self.tape.matmul(h, self.p(l.attn.wv))?)))
            .collect::<Result<Vec<_>, TensorError>>()?;
        let pointer_keys = self.tape.matmul(h, self.p(ids.pointer_k))?;
        Ok(EncodedInstance {
            h,
            clusters,
            nodes: instance.coords.len(),
            h_top,
            center_row,
            center_shares: center_shares.expect("at least one cluster"),
            dec_kv,
            pointer_keys,
        })
    }

    /// One mixture-of-depths layer over agent contexts `ctx`.
    ///
    /// The top `⌈β·a⌉` agents by router score attend to the node
    /// embeddings and go through the feed-forward; their result is scaled
    /// by the router score and added back. Every other row is copied
    /// unchanged. `masked` marks nodes each agent may not attend to.
    pub fn mod_layer(
        &mut self,
        ctx: Var,
        layer: usize,
        enc: &EncodedInstance,
        masked: &[bool],
    ) -> Result<(Var, Vec<usize>), ModelError> {
        let ids = self.params.ids.dec[layer].clone();
        let agents = self.value(ctx).rows();
        let n1 = enc.nodes;
        if masked.len() != agents * n1 {
            return Err(ModelError::Input(format!("mask has {} entries for {agents}×{n1}", masked.len())));
        }
        let scores = self.tape.matmul(ctx, self.p(ids.router))?;
        let chosen = top_k(self.value(scores).data(), self.params.config().mod_tokens(agents));
        let x = self.tape.gather_rows(ctx, &chosen)?;
        let sub_mask: Vec<bool> = chosen
            .iter()
            .flat_map(|&a| masked[a * n1..(a + 1) * n1].iter().copied())
            .collect();
        let (k, v) = enc.dec_kv[layer];
        let att = self.attention_block(x, k, v, &ids.attn, Some(sub_mask))?;
        let y = self.add_norm(x, att, &ids.ln1)?;
        let f = self.ff(y, &ids.ff)?;
        let f = self.add_norm(y, f, &ids.ln2)?;
        let r = self.tape.gather_rows(scores, &chosen)?;
        let scaled = self.tape.scale_rows(f, r)?;
        let out = self.tape.scatter_add_rows(ctx, scaled, &chosen)?;
        Ok((out, chosen))
    }

    /// Agent contexts from positions, first moves, per-agent cluster
    /// centers and dynamic features.
    pub fn contexts(&mut self, enc: &EncodedInstance, input: &StepInput) -> Result<Var, ModelError> {
        let a = input.agents();
        let n1 = enc.nodes;
        let bad = input.first.len() != a
            || input.dynamic.len() != a
            || input.subtracted.len() != a
            || input.feasible.len() != a
            || input.subtracted.iter().chain(&input.feasible).any(|r| r.len() != n1)
            || input.positions.iter().chain(&input.first).any(|&p| p >= n1);
        if a == 0 || bad {
            return Err(ModelError::Input(format!("inconsistent step input for {a} agents and {n1} nodes")));
        }
        let dyn_w = self.p(self.params.ids.dyn_w);
        let cur = self.tape.gather_rows(enc.h_top, &input.positions)?;
        let ctx = self.tape.add_row(cur, enc.center_row)?;
        let visited: Vec<f64> = input
            .subtracted
            .iter()
            .flatten()
            .map(|&s| if s { 1.0 } else { 0.0 })
            .collect();
        let visited = self.tape.constant(Tensor::matrix(a, n1, visited)?);
        let removed = self.tape.matmul(visited, enc.center_shares)?;
        let ctx = self.tape.sub(ctx, removed)?;
        let first = self.tape.gather_rows(enc.h, &input.first)?;
        let ctx = self.tape.add(ctx, first)?;
        let dynamic = Tensor::matrix(a, DYNAMIC_FEATURES, input.dynamic.iter().flatten().copied().collect())?;
        let dynamic = self.tape.constant(dynamic);
        let dynamic = self.tape.matmul(dynamic, dyn_w)?;
        Ok(self.tape.add(ctx, dynamic)?)
    }

    /// Next-node log-probabilities for every agent of one instance.
    pub fn decode_step(&mut self, enc: &EncodedInstance, input: &StepInput) -> Result<DecodeStep, ModelError> {
        let contexts = self.contexts(enc, input)?;
        if let Some(row) = input.feasible.iter().position(|r| !r.iter().any(|f| *f)) {
            return Err(TensorError::Degenerate { op: "decode_step", row }.into());
        }
        let masked: Vec<bool> = input.feasible.iter().flatten().map(|f| !f).collect();
        let mut x = contexts;
        let mut selected = Vec::with_capacity(self.params.config().dec_layers);
        for layer in 0..self.params.config().dec_layers {
            let (next, chosen) = self.mod_layer(x, layer, enc, &masked)?;
            x = next;
            selected.push(chosen);
        }
        let logits = self.pointer_head(enc, x)?;
        let log_probs = self.tape.log_softmax(logits, Some(masked))?;
        Ok(DecodeStep {
            log_probs,
            contexts,
            outputs: x,
            selected,
        })
    }

    /// Clipped pointer logits `U·tanh(q·kᵀ/√d)` before masking.
    fn pointer_head(&mut self, enc: &EncodedInstance, outputs: Var) -> Result<Var, ModelError> {
        let cfg = self.params.config();
        let q = self.tape.matmul(outputs, self.p(self.params.ids.pointer_q))?;
        let logits = self.tape.matmul_nt(q, enc.pointer_keys)?;
        let logits = self.tape.scale(logits, 1.0 / (cfg.d as f64).sqrt())?;
        let logits = self.tape.tanh(logits)?;
        Ok(self.tape.scale(logits, cfg.clip)?)
    }

    /// Pointer logits before masking, for inspection.
    pub fn pointer_logits(&mut self, enc: &EncodedInstance, outputs: Var) -> Result<Tensor, ModelError> {
        let v = self.pointer_head(enc, outputs)?;
        Ok(self.value(v).clone())
    }
}

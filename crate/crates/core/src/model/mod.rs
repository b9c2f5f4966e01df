//! Policy network: node embedding, mixture-of-experts encoder, prompt
//! conditioned soft clustering, mixture-of-depths decoder and a clipped
//! pointer head.
//!
//! Parameters live in [`PolicyParams`], a flat list of named tensors with a
//! layout derived only from [`ModelConfig`]. Forward passes are recorded on
//! a [`Tape`](crate::tensor::Tape) by [`Net`] so training can differentiate
//! them.

mod cluster;
mod net;

pub use cluster::{update_clusters, ClusterState};
pub use net::{ClusterOutput, DecodeStep, EncodedInstance, Net, StepInput};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::stream_rng;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("node {node} was already subtracted from the cluster centers")]
    DoubleSubtraction { node: usize },
    #[error("bad decoder input: {0}")]
    Input(String),
}

/// Static node features per row: x, y, demand, window open, window close.
pub const STATIC_FEATURES: usize = 5;
/// Dynamic agent features per row: load, route length, clock, open flag.
pub const DYNAMIC_FEATURES: usize = 4;
/// Constraint prompt width (open, time window, duration limit, backhaul).
pub const PROMPT_FEATURES: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub ff: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub experts: usize,
    pub top_k: usize,
    pub n_clusters: usize,
    pub cluster_iters: usize,
    /// Fraction β of agent contexts each decoder layer transforms.
    pub mod_capacity: f64,
    /// Pointer logit clip U.
    pub clip: f64,
}

impl Default for ModelConfig {
    /// Desk-scale widths with the full architecture shape.
    fn default() -> Self {
        ModelConfig {
            d: 64,
            heads: 4,
            ff: 128,
            enc_layers: 3,
            dec_layers: 3,
            experts: 4,
            top_k: 2,
            n_clusters: 5,
            cluster_iters: 5,
            mod_capacity: 0.1,
            clip: 10.0,
        }
    }
}

impl ModelConfig {
    pub fn check(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return bad(format!("d={} must be a positive multiple of heads={}", self.d, self.heads));
        }
        if self.ff == 0 || self.enc_layers == 0 || self.dec_layers == 0 {
            return bad("ff width and layer counts must be positive".into());
        }
        if self.experts == 0 || self.top_k == 0 || self.top_k > self.experts {
            return bad(format!("need 1 <= top_k={} <= experts={}", self.top_k, self.experts));
        }
        if self.n_clusters == 0 || self.cluster_iters == 0 {
            return bad("cluster count and iterations must be positive".into());
        }
        if !(self.mod_capacity > 0.0 && self.mod_capacity <= 1.0) {
            return bad(format!("mod_capacity {} must lie in (0, 1]", self.mod_capacity));
        }
        if !(self.clip > 0.0 && self.clip.is_finite()) {
            return bad("clip must be positive".into());
        }
        Ok(())
    }

    /// Number of agent contexts a decoder layer transforms out of `agents`.
    pub fn mod_tokens(&self, agents: usize) -> usize {
        mod_token_count(self.mod_capacity, agents)
    }
}

/// `⌈β·a⌉`, guarded against products like `0.1·30 = 3.0000000000000004`.
pub fn mod_token_count(beta: f64, agents: usize) -> usize {
    let raw = beta * agents as f64;
    let rounded = raw.round();
    let tokens = if (raw - rounded).abs() < 1e-9 { rounded } else { raw.ceil() };
    (tokens as usize).clamp(1.min(agents), agents)
}

#[derive(Clone, Debug)]
pub(crate) struct AttnIds {
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub bo: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct FfIds {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct LnIds {
    pub gain: usize,
    pub bias: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct EncLayerIds {
    pub attn: AttnIds,
    pub ln1: LnIds,
    pub gate: usize,
    pub experts: Vec<FfIds>,
    pub ln2: LnIds,
}

#[derive(Clone, Debug)]
pub(crate) struct DecLayerIds {
    pub router: usize,
    pub attn: AttnIds,
    pub ln1: LnIds,
    pub ff: FfIds,
    pub ln2: LnIds,
}

#[derive(Clone, Debug)]
pub(crate) struct Ids {
    pub depot_w: usize,
    pub depot_b: usize,
    pub cust_w: usize,
    pub cust_b: usize,
    pub enc: Vec<EncLayerIds>,
    pub prompt: usize,
    pub cluster_h: usize,
    pub cluster_c: usize,
    pub centers0: usize,
    pub cluster_ln: LnIds,
    pub combine_w: usize,
    pub combine_b: usize,
    pub dyn_w: usize,
    pub dec: Vec<DecLayerIds>,
    pub pointer_q: usize,
    pub pointer_k: usize,
}

enum Init {
    Uniform(f64),
    Zeros,
    Ones,
}

struct Builder<'r> {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    rng: Option<&'r mut ChaCha8Rng>,
}

impl Builder<'_> {
    fn add(&mut self, name: String, rows: usize, cols: usize, init: Init) -> usize {
        let len = rows * cols;
        let data = match (init, self.rng.as_deref_mut()) {
            (Init::Uniform(s), Some(rng)) => (0..len).map(|_| rng.gen_range(-s..s)).collect(),
            (Init::Ones, _) => vec![1.0; len],
            _ => vec![0.0; len],
        };
        self.names.push(name);
        self.tensors.push(Tensor::matrix(rows, cols, data).expect("sizes agree"));
        self.tensors.len() - 1
    }

    fn weight(&mut self, name: String, rows: usize, cols: usize) -> usize {
        self.add(name, rows, cols, Init::Uniform(1.0 / (rows as f64).sqrt()))
    }

    fn bias(&mut self, name: String, cols: usize) -> usize {
        self.add(name, 1, cols, Init::Zeros)
    }

    fn attn(&mut self, p: &str, d: usize) -> AttnIds {
        AttnIds {
            wq: self.weight(format!("{p}.wq"), d, d),
            wk: self.weight(format!("{p}.wk"), d, d),
            wv: self.weight(format!("{p}.wv"), d, d),
            wo: self.weight(format!("{p}.wo"), d, d),
            bo: self.bias(format!("{p}.bo"), d),
        }
    }

    fn ff(&mut self, p: &str, d: usize, ff: usize) -> FfIds {
        FfIds {
            w1: self.weight(format!("{p}.w1"), d, ff),
            b1: self.bias(format!("{p}.b1"), ff),
            w2: self.weight(format!("{p}.w2"), ff, d),
            b2: self.bias(format!("{p}.b2"), d),
        }
    }

    fn ln(&mut self, p: &str, d: usize) -> LnIds {
        LnIds {
            gain: self.add(format!("{p}.gain"), 1, d, Init::Ones),
            bias: self.bias(format!("{p}.bias"), d),
        }
    }
}

fn layout(cfg: &ModelConfig, rng: Option<&mut ChaCha8Rng>) -> (Vec<String>, Vec<Tensor>, Ids) {
    let d = cfg.d;
    let mut b = Builder {
        names: Vec::new(),
        tensors: Vec::new(),
        rng,
    };
    let depot_w = b.weight("embed.depot.w".into(), STATIC_FEATURES, d);
    let depot_b = b.bias("embed.depot.b".into(), d);
    let cust_w = b.weight("embed.customer.w".into(), STATIC_FEATURES, d);
    let cust_b = b.bias("embed.customer.b".into(), d);
    let enc = (0..cfg.enc_layers)
        .map(|l| {
            let p = format!("encoder.{l}");
            EncLayerIds {
                attn: b.attn(&format!("{p}.attn"), d),
                ln1: b.ln(&format!("{p}.ln1"), d),
                gate: b.weight(format!("{p}.gate"), d, cfg.experts),
                experts: (0..cfg.experts)
                    .map(|e| b.ff(&format!("{p}.expert{e}"), d, cfg.ff))
                    .collect(),
                ln2: b.ln(&format!("{p}.ln2"), d),
            }
        })
        .collect();
    let prompt = b.weight("cluster.prompt".into(), PROMPT_FEATURES, d);
    let cluster_h = b.weight("cluster.wh".into(), d, d);
    let cluster_c = b.weight("cluster.wc".into(), 2 * d, d);
    let centers0 = b.add("cluster.centers0".into(), cfg.n_clusters, d, Init::Uniform(1.0));
    let cluster_ln = b.ln("cluster.ln", d);
    let combine_w = b.weight("decoder.combine.w".into(), (1 + cfg.n_clusters) * d, d);
    let combine_b = b.bias("decoder.combine.b".into(), d);
    let dyn_w = b.weight("decoder.dynamic.w".into(), DYNAMIC_FEATURES, d);
    let dec = (0..cfg.dec_layers)
        .map(|l| {
            let p = format!("decoder.{l}");
            DecLayerIds {
                router: b.weight(format!("{p}.router"), d, 1),
                attn: b.attn(&format!("{p}.attn"), d),
                ln1: b.ln(&format!("{p}.ln1"), d),
                ff: b.ff(&format!("{p}.ff"), d, cfg.ff),
                ln2: b.ln(&format!("{p}.ln2"), d),
            }
        })
        .collect();
    let pointer_q = b.weight("pointer.wq".into(), d, d);
    let pointer_k = b.weight("pointer.wk".into(), d, d);
    let ids = Ids {
        depot_w,
        depot_b,
        cust_w,
        cust_b,
        enc,
        prompt,
        cluster_h,
        cluster_c,
        centers0,
        cluster_ln,
        combine_w,
        combine_b,
        dyn_w,
        dec,
        pointer_q,
        pointer_k,
    };
    (b.names, b.tensors, ids)
}

/// All learnable weights, in a deterministic order fixed by the config.
#[derive(Clone, Debug)]
pub struct PolicyParams {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    pub(crate) ids: Ids,
}

impl PartialEq for PolicyParams {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.tensors == other.tensors
    }
}

impl PolicyParams {
    /// Fresh parameters drawn from a dedicated RNG stream of `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.check()?;
        let mut rng = stream_rng(seed, u64::MAX);
        let (names, tensors, ids) = layout(&config, Some(&mut rng));
        Ok(PolicyParams {
            config,
            names,
            tensors,
            ids,
        })
    }

    /// Rebuilds parameters from stored tensors, checking the layout.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor>) -> Result<Self, ModelError> {
        config.check()?;
        let (names, template, ids) = layout(&config, None);
        if template.len() != tensors.len() {
            return Err(ModelError::Config(format!(
                "expected {} tensors, found {}",
                template.len(),
                tensors.len()
            )));
        }
        for ((name, want), got) in names.iter().zip(&template).zip(&tensors) {
            if want.shape() != got.shape() {
                return Err(ModelError::Config(format!(
                    "{name}: expected shape {:?}, found {:?}",
                    want.shape(),
                    got.shape()
                )));
            }
            if !got.is_finite() {
                return Err(ModelError::Config(format!("{name} holds non-finite values")));
            }
        }
        Ok(PolicyParams {
            config,
            names,
            tensors,
            ids,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Zero tensors shaped like every parameter, for gradient accumulation.
    pub fn zeros_like(&self) -> Vec<Tensor> {
        self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect()
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Coarse grouping used in reports: the name up to its second dot
    /// (`encoder.0`, `cluster.wh`, `pointer.wq`, ...).
    pub fn group_of(name: &str) -> &str {
        match name.match_indices('.').nth(1) {
            Some((i, _)) => &name[..i],
            None => name,
        }
    }
}

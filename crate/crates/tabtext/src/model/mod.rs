//! Compact transformer encoder for tokenized records.
//!
//! The forward pass is split at the embedding layer: `embed` produces the
//! token embedding matrix and `encode_from_embeddings` runs the trunk, so
//! attribution code can interpolate between an input's embeddings and the
//! all-pad baseline and differentiate the trunk alone. Two attention modes
//! are supported: `absolute` adds learned position rows to the embeddings,
//! `disentangled` keeps embeddings position-free and injects relative
//! positions inside attention (content-to-position and position-to-content
//! score terms over a shared relative embedding table, clipped to a window).

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};

use std::cell::RefCell;
use std::fmt;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tape, Tensor, TensorError, Var};
use crate::tokenizer::NUM_SPECIALS;

/// Layer-norm stabilizer used throughout the trunk.
pub const LN_EPS: f64 = 1e-5;
/// Additive logit for masked-out key positions. exp of this underflows to
/// exactly zero in f64, so masked positions get strictly zero attention.
const MASK_BIAS: f64 = -1e9;
const INIT_STD: f64 = 0.02;

/// Ceiling on the derived parameter count; keeps checkpoint loading from
/// allocating unbounded memory on hostile headers.
pub const MAX_PARAMETERS: u64 = 16_777_216;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model config: {0}")]
    BadConfig(String),
    #[error("sequence of {len} tokens exceeds max_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("attention mask of {mask} entries does not match {seq} positions")]
    MaskMismatch { mask: usize, seq: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    Absolute,
    Disentangled,
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionMode::Absolute => "absolute",
            AttentionMode::Disentangled => "disentangled",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub vocab: usize,
    pub max_len: usize,
    /// Relative-position clipping window; offsets bucket into `[-window, window)`.
    pub window: usize,
    pub attention: AttentionMode,
    pub num_classes: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk_default()
    }
}

impl ModelConfig {
    /// Defaults sized for minutes-scale CPU training.
    pub fn desk_default() -> Self {
        Self {
            layers: 2,
            hidden: 64,
            heads: 4,
            ffn: 256,
            vocab: 2048,
            max_len: 192,
            window: 32,
            attention: AttentionMode::Disentangled,
            num_classes: 2,
            dropout: 0.1,
            seed: 0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::BadConfig(msg));
        if self.layers == 0 || self.layers > 64 {
            return bad(format!("layers {} outside 1..=64", self.layers));
        }
        if self.hidden == 0 || self.hidden > 4096 {
            return bad(format!("hidden {} outside 1..=4096", self.hidden));
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return bad(format!(
                "heads {} must be nonzero and divide hidden {}",
                self.heads, self.hidden
            ));
        }
        if self.ffn == 0 || self.ffn > 65536 {
            return bad(format!("ffn {} outside 1..=65536", self.ffn));
        }
        if self.vocab <= NUM_SPECIALS as usize || self.vocab > 1_048_576 {
            return bad(format!(
                "vocab {} outside {}..=1048576",
                self.vocab,
                NUM_SPECIALS + 1
            ));
        }
        if self.max_len < 2 || self.max_len > 8192 {
            return bad(format!("max_len {} outside 2..=8192", self.max_len));
        }
        if self.window == 0 || self.window > 4096 {
            return bad(format!("window {} outside 1..=4096", self.window));
        }
        if self.num_classes < 2 || self.num_classes > 1024 {
            return bad(format!("num_classes {} outside 2..=1024", self.num_classes));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        let count = count_parameters(self);
        if count > MAX_PARAMETERS {
            return bad(format!(
                "parameter count {count} exceeds supported maximum {MAX_PARAMETERS}"
            ));
        }
        Ok(())
    }
}

/// Name and shape of every parameter tensor, in initialization order. This is
/// the single source of truth shared by initialization, the count formula
/// check, and checkpoint validation.
pub fn param_specs(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = config.hidden;
    let mut specs: Vec<(String, Vec<usize>)> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>| specs.push((name, shape));
    push("embed.token".into(), vec![config.vocab, d]);
    match config.attention {
        AttentionMode::Absolute => push("embed.pos".into(), vec![config.max_len, d]),
        AttentionMode::Disentangled => push("embed.rel".into(), vec![2 * config.window, d]),
    }
    push("embed.norm.gamma".into(), vec![d]);
    push("embed.norm.beta".into(), vec![d]);
    for l in 0..config.layers {
        for proj in ["wq", "wk", "wv", "wo"] {
            push(format!("layer{l}.attn.{proj}"), vec![d, d]);
            push(format!("layer{l}.attn.{}", proj.replace('w', "b")), vec![d]);
        }
        push(format!("layer{l}.attn.norm.gamma"), vec![d]);
        push(format!("layer{l}.attn.norm.beta"), vec![d]);
        push(format!("layer{l}.ffn.w1"), vec![d, config.ffn]);
        push(format!("layer{l}.ffn.b1"), vec![config.ffn]);
        push(format!("layer{l}.ffn.w2"), vec![config.ffn, d]);
        push(format!("layer{l}.ffn.b2"), vec![d]);
        push(format!("layer{l}.ffn.norm.gamma"), vec![d]);
        push(format!("layer{l}.ffn.norm.beta"), vec![d]);
    }
    push("mlm.dense.w".into(), vec![d, d]);
    push("mlm.dense.b".into(), vec![d]);
    push("mlm.norm.gamma".into(), vec![d]);
    push("mlm.norm.beta".into(), vec![d]);
    push("mlm.bias".into(), vec![config.vocab]);
    push("cls.w".into(), vec![d, config.num_classes]);
    push("cls.b".into(), vec![config.num_classes]);
    specs
}

/// Closed-form parameter count for a config. The MLM decoder weight is the
/// token embedding (tied), so it contributes nothing beyond its bias.
pub fn count_parameters(config: &ModelConfig) -> u64 {
    let d = config.hidden as u64;
    let v = config.vocab as u64;
    let f = config.ffn as u64;
    let c = config.num_classes as u64;
    let positional = match config.attention {
        AttentionMode::Absolute => config.max_len as u64 * d,
        AttentionMode::Disentangled => 2 * config.window as u64 * d,
    };
    let per_layer = 4 * (d * d + d) + 2 * d + (d * f + f) + (f * d + d) + 2 * d;
    let mlm = d * d + d + 2 * d + v;
    let cls = d * c + c;
    v * d + positional + 2 * d + config.layers as u64 * per_layer + mlm + cls
}

/// Named parameter tensors in registry order.
#[derive(Debug, Clone)]
pub struct Parameters {
    map: IndexMap<String, Tensor>,
}

impl Parameters {
    fn init(config: &ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut map = IndexMap::new();
        for (name, shape) in param_specs(config) {
            let tensor = if shape.len() == 1 {
                if name.ends_with(".gamma") {
                    Tensor::full(&shape, 1.0)
                } else {
                    Tensor::zeros(&shape)
                }
            } else {
                Tensor::randn(&shape, INIT_STD, &mut rng)
            };
            map.insert(name, tensor);
        }
        Self { map }
    }

    pub(crate) fn from_map(map: IndexMap<String, Tensor>) -> Self {
        Self { map }
    }

    /// Panics on an unknown name; parameter sets are fixed by the config.
    pub fn get(&self, name: &str) -> &Tensor {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn total_elements(&self) -> u64 {
        self.map.values().map(|t| t.len() as u64).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(Tensor::all_finite)
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Parameters,
}

impl Model {
    /// Fresh model with seeded normal init (std 0.02) for matrices, ones for
    /// norm gains, zeros for every other vector.
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let params = Parameters::init(&config);
        Ok(Self { config, params })
    }

    /// Bind parameters onto a tape for a forward pass without dropout.
    pub fn bind<'a>(&'a self, tape: &'a Tape) -> Forward<'a> {
        self.bind_inner(tape, None, false)
    }

    /// Bind for training: dropout is active (when configured) and draws from
    /// the given generator.
    pub fn bind_training<'a>(&'a self, tape: &'a Tape, rng: ChaCha8Rng) -> Forward<'a> {
        self.bind_inner(tape, Some(RefCell::new(rng)), false)
    }

    /// Bind with parameters as constants: backward passes track gradients
    /// only for explicitly created leaves (used for input attribution).
    pub fn bind_frozen<'a>(&'a self, tape: &'a Tape) -> Forward<'a> {
        self.bind_inner(tape, None, true)
    }

    fn bind_inner<'a>(
        &'a self,
        tape: &'a Tape,
        rng: Option<RefCell<ChaCha8Rng>>,
        frozen: bool,
    ) -> Forward<'a> {
        let vars = self
            .params
            .iter()
            .map(|(name, tensor)| {
                let var = if frozen {
                    tape.constant(tensor.clone())
                } else {
                    tape.leaf(tensor.clone())
                };
                (name.to_string(), var)
            })
            .collect();
        Forward {
            model: self,
            tape,
            vars,
            dropout_rng: rng,
        }
    }
}

/// A model bound to a tape: parameter leaves plus the forward operations.
pub struct Forward<'a> {
    model: &'a Model,
    tape: &'a Tape,
    vars: IndexMap<String, Var>,
    dropout_rng: Option<RefCell<ChaCha8Rng>>,
}

impl<'a> Forward<'a> {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
    }

    /// Replace a parameter leaf with an externally supplied tape value
    /// (used by gradient checks that perturb a single tensor).
    pub fn override_var(&mut self, name: &str, var: Var) {
        let slot = self
            .vars
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"));
        *slot = var;
    }

    pub fn tape(&self) -> &Tape {
        self.tape
    }

    /// Every parameter's tape leaf, in registry order, for gradient readout.
    pub fn param_vars(&self) -> impl Iterator<Item = (&str, Var)> + '_ {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }

    fn maybe_dropout(&self, x: Var) -> Result<Var, TensorError> {
        match (&self.dropout_rng, self.model.config.dropout) {
            (Some(rng), rate) if rate > 0.0 => {
                self.tape.dropout(x, rate, &mut *rng.borrow_mut())
            }
            _ => Ok(x),
        }
    }

    /// Token embeddings `[seq, hidden]`; absolute mode adds learned position
    /// rows, disentangled mode leaves content embeddings position-free.
    pub fn embed(&self, ids: &[u32]) -> Result<Var, ModelError> {
        let cfg = &self.model.config;
        if ids.is_empty() {
            return Err(ModelError::SequenceTooLong {
                len: 0,
                max: cfg.max_len,
            });
        }
        if ids.len() > cfg.max_len {
            return Err(ModelError::SequenceTooLong {
                len: ids.len(),
                max: cfg.max_len,
            });
        }
        let e = self.tape.embedding_lookup(self.var("embed.token"), ids)?;
        match cfg.attention {
            AttentionMode::Absolute => {
                let pos = self.tape.slice_rows(self.var("embed.pos"), 0..ids.len())?;
                Ok(self.tape.add(e, pos)?)
            }
            AttentionMode::Disentangled => Ok(e),
        }
    }

    /// Run the trunk on an embedding matrix. Masked positions contribute no
    /// attention weight anywhere; their own outputs are not meaningful.
    pub fn encode_from_embeddings(&self, e: Var, mask: &[u8]) -> Result<Var, ModelError> {
        let (hidden, _) = self.encode_collecting_probs(e, mask, false)?;
        Ok(hidden)
    }

    /// As [`Forward::encode_from_embeddings`], also returning every layer's
    /// per-head attention rows (diagnostic).
    pub fn encode_with_attention(
        &self,
        e: Var,
        mask: &[u8],
    ) -> Result<(Var, Vec<Vec<Var>>), ModelError> {
        self.encode_collecting_probs(e, mask, true)
    }

    fn encode_collecting_probs(
        &self,
        e: Var,
        mask: &[u8],
        collect: bool,
    ) -> Result<(Var, Vec<Vec<Var>>), ModelError> {
        let cfg = &self.model.config;
        let shape = self.tape.shape(e);
        let [n, d] = shape[..] else {
            return Err(TensorError::ShapeMismatch {
                op: "encode_from_embeddings",
                lhs: shape,
                rhs: vec![0, cfg.hidden],
            }
            .into());
        };
        if d != cfg.hidden {
            return Err(TensorError::ShapeMismatch {
                op: "encode_from_embeddings",
                lhs: vec![n, d],
                rhs: vec![n, cfg.hidden],
            }
            .into());
        }
        if mask.len() != n {
            return Err(ModelError::MaskMismatch {
                mask: mask.len(),
                seq: n,
            });
        }

        let mut bias_row = vec![0.0; n];
        for (j, &m) in mask.iter().enumerate() {
            if m == 0 {
                bias_row[j] = MASK_BIAS;
            }
        }
        let bias_data: Vec<f64> = bias_row
            .iter()
            .cycle()
            .take(n * n)
            .copied()
            .collect();
        let mask_bias = self
            .tape
            .constant(Tensor::new(vec![n, n], bias_data).map_err(TensorError::from)?);

        let mut h = self.tape.layer_norm(
            e,
            self.var("embed.norm.gamma"),
            self.var("embed.norm.beta"),
            LN_EPS,
        )?;
        h = self.maybe_dropout(h)?;
        let mut probs_per_layer = Vec::new();
        for l in 0..cfg.layers {
            let (attn_out, probs) = self.attention(l, h, mask_bias, n)?;
            if collect {
                probs_per_layer.push(probs);
            }
            let attn_out = self.maybe_dropout(attn_out)?;
            let res = self.tape.add(h, attn_out)?;
            h = self.tape.layer_norm(
                res,
                self.var(&format!("layer{l}.attn.norm.gamma")),
                self.var(&format!("layer{l}.attn.norm.beta")),
                LN_EPS,
            )?;

            let f = self.tape.matmul(h, self.var(&format!("layer{l}.ffn.w1")))?;
            let f = self.tape.add(f, self.var(&format!("layer{l}.ffn.b1")))?;
            let f = self.tape.gelu(f)?;
            let f = self.tape.matmul(f, self.var(&format!("layer{l}.ffn.w2")))?;
            let f = self.tape.add(f, self.var(&format!("layer{l}.ffn.b2")))?;
            let f = self.maybe_dropout(f)?;
            let res = self.tape.add(h, f)?;
            h = self.tape.layer_norm(
                res,
                self.var(&format!("layer{l}.ffn.norm.gamma")),
                self.var(&format!("layer{l}.ffn.norm.beta")),
                LN_EPS,
            )?;
        }
        Ok((h, probs_per_layer))
    }

    fn attention(
        &self,
        layer: usize,
        h: Var,
        mask_bias: Var,
        n: usize,
    ) -> Result<(Var, Vec<Var>), TensorError> {
        let cfg = &self.model.config;
        let t = self.tape;
        let hd = cfg.head_dim();
        let p = |suffix: &str| self.var(&format!("layer{layer}.attn.{suffix}"));

        let q = t.add(t.matmul(h, p("wq"))?, p("bq"))?;
        let k = t.add(t.matmul(h, p("wk"))?, p("bk"))?;
        let v = t.add(t.matmul(h, p("wv"))?, p("bv"))?;

        // Relative tables are projected by this layer's own content
        // projections (shared table, per-layer view), without biases: a bias
        // there is constant across keys and cancels in the softmax.
        let rel = match cfg.attention {
            AttentionMode::Disentangled => {
                let r = self.var("embed.rel");
                Some((t.matmul(r, p("wk"))?, t.matmul(r, p("wq"))?))
            }
            AttentionMode::Absolute => None,
        };

        let mut head_outs = Vec::with_capacity(cfg.heads);
        let mut head_probs = Vec::with_capacity(cfg.heads);
        for head in 0..cfg.heads {
            let cols = head * hd..(head + 1) * hd;
            let qh = t.slice_cols(q, cols.clone())?;
            let kh = t.slice_cols(k, cols.clone())?;
            let vh = t.slice_cols(v, cols.clone())?;
            let mut scores = t.matmul(qh, t.transpose(kh)?)?;
            let scale = match &rel {
                Some((rel_k, rel_q)) => {
                    let krh = t.slice_cols(*rel_k, cols.clone())?;
                    let c2p =
                        t.relative_gather_q(t.matmul(qh, t.transpose(krh)?)?, n, cfg.window)?;
                    let qrh = t.slice_cols(*rel_q, cols.clone())?;
                    let p2c =
                        t.relative_gather_k(t.matmul(kh, t.transpose(qrh)?)?, n, cfg.window)?;
                    scores = t.add(t.add(scores, c2p)?, p2c)?;
                    1.0 / (3.0 * hd as f64).sqrt()
                }
                None => 1.0 / (hd as f64).sqrt(),
            };
            let scored = t.add(t.scale(scores, scale)?, mask_bias)?;
            let probs = t.softmax(scored)?;
            head_probs.push(probs);
            head_outs.push(t.matmul(probs, vh)?);
        }
        let concat = t.concat_cols(&head_outs)?;
        let out = t.add(t.matmul(concat, p("wo"))?, p("bo"))?;
        Ok((out, head_probs))
    }

    /// Classification logits `[1, num_classes]` from the CLS (first) position.
    pub fn classify_logits(&self, hidden: Var) -> Result<Var, ModelError> {
        let t = self.tape;
        let cls = t.slice_rows(hidden, 0..1)?;
        Ok(t.add(t.matmul(cls, self.var("cls.w"))?, self.var("cls.b"))?)
    }

    /// Full classification pass from raw ids.
    pub fn classify(&self, ids: &[u32], mask: &[u8]) -> Result<Var, ModelError> {
        let e = self.embed(ids)?;
        let h = self.encode_from_embeddings(e, mask)?;
        self.classify_logits(h)
    }

    /// Pre-softmax logit of one class as a scalar (the attribution target).
    pub fn class_score(&self, logits: Var, class: usize) -> Result<Var, ModelError> {
        let t = self.tape;
        let col = t.slice_cols(logits, class..class + 1)?;
        Ok(t.sum(col)?)
    }

    /// Per-position vocabulary logits `[seq, vocab]`; the decoder weight is
    /// the token embedding table (tied).
    pub fn mlm_logits(&self, hidden: Var) -> Result<Var, ModelError> {
        let t = self.tape;
        let x = t.matmul(hidden, self.var("mlm.dense.w"))?;
        let x = t.add(x, self.var("mlm.dense.b"))?;
        let x = t.gelu(x)?;
        let x = t.layer_norm(
            x,
            self.var("mlm.norm.gamma"),
            self.var("mlm.norm.beta"),
            LN_EPS,
        )?;
        let decoder = t.transpose(self.var("embed.token"))?;
        Ok(t.add(t.matmul(x, decoder)?, self.var("mlm.bias"))?)
    }
}

/// Softmax probability of class 1 from a `[1, num_classes]` logits tensor.
pub fn positive_probability(logits: &Tensor) -> f64 {
    let row = logits.data();
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&z| (z - max).exp()).collect();
    exps[1] / exps.iter().sum::<f64>()
}

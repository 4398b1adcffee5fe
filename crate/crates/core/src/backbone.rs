//! Shared transformer substrate: embeddings, encoder stacks, sequence-merging
//! decoder stacks, and the dense output projection.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{uniform, xavier_uniform, ParamId, ParamStore};
use crate::tensor::Matrix;
use crate::vocab::PAD;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Small,
    Regular,
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Preset::Small => "small",
            Preset::Regular => "regular",
        })
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "small" => Ok(Preset::Small),
            "regular" => Ok(Preset::Regular),
            _ => Err(Error::InvalidArgument(format!("unknown preset `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    /// Temperature applied to question scores before the softmax.
    pub k: f64,
    /// Selection / verification threshold.
    pub p_th: f64,
    pub preset: Preset,
}

impl ModelConfig {
    pub fn from_preset(preset: Preset, vocab_size: usize) -> Self {
        let (d_model, n_layers, n_heads, ffn_dim) = match preset {
            Preset::Regular => (64, 2, 4, 128),
            Preset::Small => (32, 1, 2, 64),
        };
        Self {
            vocab_size,
            d_model,
            n_layers,
            n_heads,
            ffn_dim,
            max_len: 64,
            k: 4.0,
            p_th: 0.5,
            preset,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.k >= 1.0) {
            return Err(Error::Config(format!("k = {} must be >= 1", self.k)));
        }
        if !(self.p_th > 0.0 && self.p_th < 1.0) {
            return Err(Error::Config(format!("p_th = {} must be in (0, 1)", self.p_th)));
        }
        if self.vocab_size < 2 || self.max_len == 0 {
            return Err(Error::Config("vocab_size >= 2 and max_len >= 1 required".into()));
        }
        Ok(())
    }
}

/// Encoded token states plus which positions are real (not padding).
#[derive(Clone, Debug)]
pub struct EncodedSequence {
    pub states: Var,
    pub keep: Vec<bool>,
}

impl EncodedSequence {
    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }
}

pub fn padding_keep(ids: &[usize]) -> Vec<bool> {
    ids.iter().map(|&i| i != PAD).collect()
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: store.add(format!("{name}.w"), xavier_uniform(rng, fan_in, fan_out)),
            b: store.add(format!("{name}.b"), Matrix::zeros(1, fan_out)),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Matrix::filled(1, width, 1.0)),
            beta: store.add(format!("{name}.beta"), Matrix::zeros(1, width)),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

#[derive(Clone, Debug)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, d: usize, hidden: usize) -> Self {
        Self {
            up: Linear::new(store, rng, &format!("{name}.up"), d, hidden),
            down: Linear::new(store, rng, &format!("{name}.down"), hidden, d),
        }
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.up.forward(g, x);
        let h = g.gelu(h);
        self.down.forward(g, h)
    }
}

#[derive(Clone, Debug)]
struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, d: usize, heads: usize) -> Self {
        Self {
            q: Linear::new(store, rng, &format!("{name}.q"), d, d),
            k: Linear::new(store, rng, &format!("{name}.k"), d, d),
            v: Linear::new(store, rng, &format!("{name}.v"), d, d),
            o: Linear::new(store, rng, &format!("{name}.o"), d, d),
            heads,
        }
    }

    fn key_values(&self, g: &mut Graph, y: Var) -> (Var, Var) {
        (self.k.forward(g, y), self.v.forward(g, y))
    }

    /// Scaled dot-product attention of projected queries over projected
    /// keys/values; `keep` masks key positions.
    fn attend(&self, g: &mut Graph, q: Var, k: Var, v: Var, keep: &[bool]) -> Var {
        let d = g.shape(q).1;
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let keep = if keep.iter().all(|&b| b) { None } else { Some(keep) };
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                let (a, b) = (h * dh, (h + 1) * dh);
                (g.slice_cols(q, a, b), g.slice_cols(k, a, b), g.slice_cols(v, a, b))
            };
            let scores = g.matmul_nt(qh, kh);
            let scores = g.scale(scores, scale);
            let probs = g.softmax_rows(scores, keep);
            heads.push(g.matmul(probs, vh));
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)
        };
        self.o.forward(g, merged)
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    attn: MultiHeadAttention,
    norm1: LayerNorm,
    ffn: FeedForward,
    norm2: LayerNorm,
}

impl EncoderLayer {
    fn forward(&self, g: &mut Graph, x: Var, keep: &[bool]) -> Var {
        let q = self.attn.q.forward(g, x);
        let (k, v) = self.attn.key_values(g, x);
        let a = self.attn.attend(g, q, k, v, keep);
        let h = g.add(x, a);
        let h = self.norm1.forward(g, h);
        let f = self.ffn.forward(g, h);
        let out = g.add(h, f);
        self.norm2.forward(g, out)
    }
}

/// Bidirectional post-norm transformer encoder.
#[derive(Clone, Debug)]
pub struct Encoder {
    layers: Vec<EncoderLayer>,
}

impl Encoder {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, cfg: &ModelConfig) -> Self {
        let layers = (0..cfg.n_layers)
            .map(|l| {
                let p = format!("{name}.{l}");
                EncoderLayer {
                    attn: MultiHeadAttention::new(store, rng, &format!("{p}.attn"), cfg.d_model, cfg.n_heads),
                    norm1: LayerNorm::new(store, &format!("{p}.norm1"), cfg.d_model),
                    ffn: FeedForward::new(store, rng, &format!("{p}.ffn"), cfg.d_model, cfg.ffn_dim),
                    norm2: LayerNorm::new(store, &format!("{p}.norm2"), cfg.d_model),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, keep: &[bool]) -> Var {
        self.layers.iter().fold(x, |h, layer| layer.forward(g, h, keep))
    }
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    self_attn: MultiHeadAttention,
    norm1: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm2: LayerNorm,
    ffn: FeedForward,
    norm3: LayerNorm,
}

impl DecoderLayer {
    fn self_block(&self, g: &mut Graph, x: Var, keep: &[bool]) -> Var {
        let q = self.self_attn.q.forward(g, x);
        let (k, v) = self.self_attn.key_values(g, x);
        let a = self.self_attn.attend(g, q, k, v, keep);
        let h = g.add(x, a);
        self.norm1.forward(g, h)
    }

    fn cross_block(&self, g: &mut Graph, h: Var, q: Var, kv: (Var, Var), keep: &[bool]) -> Var {
        let c = self.cross_attn.attend(g, q, kv.0, kv.1, keep);
        let h2 = g.add(h, c);
        let h2 = self.norm2.forward(g, h2);
        let f = self.ffn.forward(g, h2);
        let out = g.add(h2, f);
        self.norm3.forward(g, out)
    }
}

/// Projected keys/values of the secondary sequence for every decoder layer.
#[derive(Clone, Debug)]
pub struct DecoderMemory {
    kv: Vec<(Var, Var)>,
    keep: Vec<bool>,
}

/// Merges a primary sequence `x` with a secondary sequence `y`: bidirectional
/// self-attention over `x`, then cross-attention from `x` to `y`. The output
/// has one row per row of `x`.
#[derive(Clone, Debug)]
pub struct Decoder {
    layers: Vec<DecoderLayer>,
}

impl Decoder {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let layers = (0..cfg.n_layers)
            .map(|l| {
                let p = format!("{name}.{l}");
                DecoderLayer {
                    self_attn: MultiHeadAttention::new(store, rng, &format!("{p}.self"), d, cfg.n_heads),
                    norm1: LayerNorm::new(store, &format!("{p}.norm1"), d),
                    cross_attn: MultiHeadAttention::new(store, rng, &format!("{p}.cross"), d, cfg.n_heads),
                    norm2: LayerNorm::new(store, &format!("{p}.norm2"), d),
                    ffn: FeedForward::new(store, rng, &format!("{p}.ffn"), d, cfg.ffn_dim),
                    norm3: LayerNorm::new(store, &format!("{p}.norm3"), d),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn memory(&self, g: &mut Graph, y: &EncodedSequence) -> DecoderMemory {
        DecoderMemory {
            kv: self
                .layers
                .iter()
                .map(|l| l.cross_attn.key_values(g, y.states))
                .collect(),
            keep: y.keep.clone(),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: &EncodedSequence, y: &EncodedSequence) -> Var {
        let mem = self.memory(g, y);
        self.forward_many(g, x, std::slice::from_ref(&mem))[0]
    }

    /// Decodes `x` against several memories. Work that depends on `x` alone
    /// (the first self-attention block and its cross-attention queries) is
    /// computed once and shared by every branch.
    pub fn forward_many(&self, g: &mut Graph, x: &EncodedSequence, mems: &[DecoderMemory]) -> Vec<Var> {
        let Some((first, rest)) = self.layers.split_first() else {
            return vec![x.states; mems.len()];
        };
        let h = first.self_block(g, x.states, &x.keep);
        let q = first.cross_attn.q.forward(g, h);
        mems.iter()
            .map(|mem| {
                let mut out = first.cross_block(g, h, q, mem.kv[0], &mem.keep);
                for (l, layer) in rest.iter().enumerate() {
                    let h = layer.self_block(g, out, &x.keep);
                    let q = layer.cross_attn.q.forward(g, h);
                    out = layer.cross_block(g, h, q, mem.kv[l + 1], &mem.keep);
                }
                out
            })
            .collect()
    }
}

/// Sine/cosine rows of the given amplitude. Only the starting point of the
/// position table; it is trained like any other parameter.
fn sinusoid(rows: usize, cols: usize, amplitude: f64) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for pos in 0..rows {
        for i in 0..cols {
            let freq = 1.0 / 10_000f64.powf((i / 2 * 2) as f64 / cols as f64);
            let angle = pos as f64 * freq;
            m.set(pos, i, amplitude * if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    m
}

/// Word and position tables shared by every encoder.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    pub word: ParamId,
    pub position: ParamId,
}

impl EmbeddingTable {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: &ModelConfig) -> Self {
        Self {
            word: store.add("embed.word", uniform(rng, cfg.vocab_size, cfg.d_model, 0.5)),
            position: store.add("embed.position", sinusoid(cfg.max_len, cfg.d_model, 0.3)),
        }
    }

    /// Row `t` is `word[ids[t]] + position[t]`.
    pub fn embed(&self, g: &mut Graph, ids: &[usize]) -> Result<Var> {
        let positions: Vec<usize> = (0..ids.len()).collect();
        self.embed_at(g, ids, &positions)
    }

    /// Row `t` is `word[ids[t]] + position[positions[t]]`; lets a span keep
    /// the positions it has in its sentence.
    pub fn embed_at(&self, g: &mut Graph, ids: &[usize], positions: &[usize]) -> Result<Var> {
        let (vocab, _) = g.params().get(self.word).shape();
        let (max_len, _) = g.params().get(self.position).shape();
        if ids.is_empty() {
            return Err(Error::Sequence("cannot embed an empty sequence".into()));
        }
        if ids.len() > max_len {
            return Err(Error::Sequence(format!(
                "sequence length {} exceeds max_len {max_len}",
                ids.len()
            )));
        }
        if positions.len() != ids.len() {
            return Err(Error::Sequence(format!(
                "{} positions for {} tokens",
                positions.len(),
                ids.len()
            )));
        }
        if let Some(&bad) = positions.iter().find(|&&p| p >= max_len) {
            return Err(Error::Sequence(format!("position {bad} exceeds max_len {max_len}")));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Sequence(format!("token id {bad} >= vocab size {vocab}")));
        }
        let w = g.param(self.word);
        let p = g.param(self.position);
        let words = g.gather(w, ids);
        let pos = g.gather(p, positions);
        Ok(g.add(words, pos))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Sentence,
    Question,
    Answer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderId {
    /// Answer extraction: merges the sentence with the question.
    Answer,
    /// Question selection: merges the sentence with the answer.
    Selection,
}

/// The full transformer network shared by the question-selection and
/// answer-extraction sub-models. Only the embeddings and the sentence and
/// question encoders are used by both.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub embeddings: EmbeddingTable,
    pub sentence_encoder: Encoder,
    pub question_encoder: Encoder,
    pub answer_encoder: Encoder,
    pub answer_decoder: Decoder,
    pub selection_decoder: Decoder,
    pub dense: Linear,
}

impl Backbone {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: &ModelConfig) -> Self {
        Self {
            embeddings: EmbeddingTable::new(store, rng, cfg),
            sentence_encoder: Encoder::new(store, rng, "enc_s", cfg),
            question_encoder: Encoder::new(store, rng, "enc_q", cfg),
            answer_encoder: Encoder::new(store, rng, "enc_a", cfg),
            answer_decoder: Decoder::new(store, rng, "dec_ae", cfg),
            selection_decoder: Decoder::new(store, rng, "dec_qs", cfg),
            dense: Linear::new(store, rng, "dense", cfg.d_model, 1),
        }
    }

    pub fn encode(&self, g: &mut Graph, ids: &[usize], which: Stream) -> Result<EncodedSequence> {
        let positions: Vec<usize> = (0..ids.len()).collect();
        self.encode_at(g, ids, &positions, which)
    }

    pub fn encode_at(
        &self,
        g: &mut Graph,
        ids: &[usize],
        positions: &[usize],
        which: Stream,
    ) -> Result<EncodedSequence> {
        let x = self.embeddings.embed_at(g, ids, positions)?;
        let keep = padding_keep(ids);
        let encoder = match which {
            Stream::Sentence => &self.sentence_encoder,
            Stream::Question => &self.question_encoder,
            Stream::Answer => &self.answer_encoder,
        };
        let states = encoder.forward(g, x, &keep);
        Ok(EncodedSequence { states, keep })
    }

    pub fn decode_merge(
        &self,
        g: &mut Graph,
        x: &EncodedSequence,
        y: &EncodedSequence,
        which: DecoderId,
    ) -> EncodedSequence {
        let decoder = match which {
            DecoderId::Answer => &self.answer_decoder,
            DecoderId::Selection => &self.selection_decoder,
        };
        EncodedSequence {
            states: decoder.forward(g, x, y),
            keep: x.keep.clone(),
        }
    }

    /// One logit per row of `h`, as an `L × 1` node.
    pub fn dense(&self, g: &mut Graph, h: Var) -> Var {
        self.dense.forward(g, h)
    }
}

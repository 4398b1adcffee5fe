//! The trainable network (transformer or recurrent) together with its
//! configuration, vocabulary and parameters.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::backbone::{Backbone, DecoderId, EncodedSequence, ModelConfig, Stream};
use crate::corpus::AnswerMask;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::recurrent::RecurrentNet;
use crate::tensor::Matrix;
use crate::vocab::Vocabulary;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Transformer,
    /// Bidirectional LSTM encoders merged by additive attention.
    Recurrent,
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Architecture::Transformer => "transformer",
            Architecture::Recurrent => "recurrent",
        })
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "transformer" => Ok(Architecture::Transformer),
            "recurrent" | "bilstm" => Ok(Architecture::Recurrent),
            _ => Err(Error::InvalidArgument(format!("unknown architecture `{s}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub enum Network {
    Transformer(Backbone),
    Recurrent(RecurrentNet),
}

impl Network {
    pub fn encode(&self, g: &mut Graph, ids: &[usize], which: Stream) -> Result<EncodedSequence> {
        match self {
            Network::Transformer(b) => b.encode(g, ids, which),
            Network::Recurrent(r) => r.encode(g, ids, which),
        }
    }

    /// Encodes an answer span with the positions its words have in the
    /// sentence, so the merge with the sentence can line the two up.
    pub fn encode_answer(&self, g: &mut Graph, ids: &[usize], answer: &AnswerMask) -> Result<EncodedSequence> {
        let positions = answer.positions();
        match self {
            Network::Transformer(b) => b.encode_at(g, ids, &positions, Stream::Answer),
            Network::Recurrent(r) => r.encode_at(g, ids, &positions, Stream::Answer),
        }
    }

    /// Per-token states of the sentence merged with the answer; their mean
    /// is the vector compared against each question.
    pub fn selection_states(&self, g: &mut Graph, s: &EncodedSequence, a: &EncodedSequence) -> Var {
        match self {
            Network::Transformer(b) => b.decode_merge(g, s, a, DecoderId::Selection).states,
            Network::Recurrent(r) => r.selection_states(g, s, a),
        }
    }

    /// Raw per-token answer logits (`L × 1`) of the sentence for every
    /// question. Sentence-only work is shared between questions.
    pub fn answer_logits_many(&self, g: &mut Graph, s: &EncodedSequence, qs: &[EncodedSequence]) -> Vec<Var> {
        match self {
            Network::Transformer(b) => {
                let mems: Vec<_> = qs.iter().map(|q| b.answer_decoder.memory(g, q)).collect();
                let hs = b.answer_decoder.forward_many(g, s, &mems);
                hs.into_iter().map(|h| b.dense(g, h)).collect()
            }
            Network::Recurrent(r) => qs
                .iter()
                .map(|q| {
                    let h = r.answer_states(g, s, q);
                    r.dense(g, h)
                })
                .collect(),
        }
    }
}

/// A network with everything needed to run or resume it.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub arch: Architecture,
    pub vocab: Vocabulary,
    pub params: ParamStore,
    net: Network,
}

impl Model {
    /// Freshly initialised weights; identical seeds give identical weights.
    pub fn new(config: ModelConfig, arch: Architecture, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.vocab_size != vocab.len() {
            return Err(Error::VocabularyMismatch(format!(
                "config vocab_size {} but vocabulary has {} words",
                config.vocab_size,
                vocab.len()
            )));
        }
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = match arch {
            Architecture::Transformer => Network::Transformer(Backbone::new(&mut params, &mut rng, &config)),
            Architecture::Recurrent => Network::Recurrent(RecurrentNet::new(&mut params, &mut rng, &config)),
        };
        Ok(Self {
            config,
            arch,
            vocab,
            params,
            net,
        })
    }

    /// Rebuilds a model and fills its parameters by name. Every parameter
    /// must be present with the right shape, and no extras are allowed.
    pub fn from_parts(
        config: ModelConfig,
        arch: Architecture,
        vocab: Vocabulary,
        values: impl IntoIterator<Item = (String, Matrix)>,
    ) -> Result<Self> {
        let mut model = Self::new(config, arch, vocab, 0)?;
        let mut seen = vec![false; model.params.len()];
        for (name, value) in values {
            let id = model
                .params
                .find(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter `{name}`")))?;
            let slot = model.params.get_mut(id);
            if slot.shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    value.shape(),
                    slot.shape()
                )));
            }
            *slot = value;
            seen[id.0] = true;
        }
        if let Some(i) = seen.iter().position(|&s| !s) {
            return Err(Error::Checkpoint(format!(
                "missing parameter `{}`",
                model.params.name(crate::params::ParamId(i))
            )));
        }
        Ok(model)
    }

    pub fn net(&self) -> &Network {
        &self.net
    }

    /// Token ids of a sentence, checked against `max_len`.
    pub fn sentence_ids<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<usize>> {
        let ids = self.vocab.encode(tokens);
        self.check_len(&ids)?;
        Ok(ids)
    }

    pub fn question_ids(&self, question: &str) -> Result<Vec<usize>> {
        let ids = self.vocab.encode_text(question);
        self.check_len(&ids)?;
        Ok(ids)
    }

    /// Token ids of the answer words (the masked positions, in order).
    pub fn answer_ids<S: AsRef<str>>(&self, tokens: &[S], answer: &AnswerMask) -> Result<Vec<usize>> {
        if answer.len() != tokens.len() {
            return Err(Error::Sequence(format!(
                "answer mask length {} differs from sentence length {}",
                answer.len(),
                tokens.len()
            )));
        }
        let words: Vec<&str> = answer.positions().into_iter().map(|i| tokens[i].as_ref()).collect();
        if words.is_empty() {
            return Err(Error::Sequence("empty answer".into()));
        }
        Ok(self.vocab.encode(&words))
    }

    fn check_len(&self, ids: &[usize]) -> Result<()> {
        if ids.is_empty() || ids.len() > self.config.max_len {
            return Err(Error::Sequence(format!(
                "sequence length {} outside 1..={}",
                ids.len(),
                self.config.max_len
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Preset;

    fn vocab() -> Vocabulary {
        Vocabulary::from_words(
            ["<pad>", "<unk>", "a", "b", "c"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        )
    }

    #[test]
    fn same_seed_same_weights_and_roundtrip_by_name() {
        let mut cfg = ModelConfig::from_preset(Preset::Small, 5);
        cfg.d_model = 8;
        for arch in [Architecture::Transformer, Architecture::Recurrent] {
            let a = Model::new(cfg.clone(), arch, vocab(), 7).unwrap();
            let b = Model::new(cfg.clone(), arch, vocab(), 7).unwrap();
            assert_eq!(a.params, b.params);
            let values: Vec<_> = a.params.iter().map(|(_, n, m)| (n.to_string(), m.clone())).collect();
            let c = Model::from_parts(cfg.clone(), arch, vocab(), values.clone()).unwrap();
            assert_eq!(a.params, c.params);
            let short = values[1..].to_vec();
            assert!(Model::from_parts(cfg.clone(), arch, vocab(), short).is_err());
        }
    }

    #[test]
    fn vocab_size_must_match() {
        let cfg = ModelConfig::from_preset(Preset::Small, 6);
        assert!(matches!(
            Model::new(cfg, Architecture::Transformer, vocab(), 0),
            Err(Error::VocabularyMismatch(_))
        ));
    }

    #[test]
    fn answer_ids_follow_mask() {
        let cfg = ModelConfig::from_preset(Preset::Small, 5);
        let m = Model::new(cfg, Architecture::Transformer, vocab(), 0).unwrap();
        let toks = ["a", "b", "c"];
        let ids = m.answer_ids(&toks, &AnswerMask::from_span(3, 1, 3)).unwrap();
        assert_eq!(ids, vec![3, 4]);
        assert!(m.answer_ids(&toks, &AnswerMask::new(vec![false; 3])).is_err());
    }
}

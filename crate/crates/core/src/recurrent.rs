//! Bidirectional LSTM encoders with additive attention merging, used by the
//! recurrent supervised baseline.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::backbone::{padding_keep, EmbeddingTable, EncodedSequence, Linear, ModelConfig, Stream};
use crate::error::Result;
use crate::params::{uniform, xavier_uniform, ParamId, ParamStore};
use crate::tensor::Matrix;

#[derive(Clone, Debug)]
struct Lstm {
    wx: ParamId,
    wh: ParamId,
    b: ParamId,
    hidden: usize,
}

impl Lstm {
    fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, input: usize, hidden: usize) -> Self {
        let mut bias = Matrix::zeros(1, 4 * hidden);
        // forget gate starts open
        for c in hidden..2 * hidden {
            bias.set(0, c, 1.0);
        }
        Self {
            wx: store.add(format!("{name}.wx"), xavier_uniform(rng, input, 4 * hidden)),
            wh: store.add(format!("{name}.wh"), xavier_uniform(rng, hidden, 4 * hidden)),
            b: store.add(format!("{name}.b"), bias),
            hidden,
        }
    }

    /// Runs over `positions` in the given order and returns one hidden row per
    /// visited position (same order).
    fn run(&self, g: &mut Graph, x: Var, positions: &[usize]) -> Vec<Var> {
        let h_dim = self.hidden;
        let wx = g.param(self.wx);
        let wh = g.param(self.wh);
        let b = g.param(self.b);
        let xw = g.matmul(x, wx);
        let xw = g.add_row(xw, b);
        let mut h = g.constant(Matrix::zeros(1, h_dim));
        let mut c = g.constant(Matrix::zeros(1, h_dim));
        let mut out = Vec::with_capacity(positions.len());
        for &t in positions {
            let xt = g.slice_rows(xw, t, t + 1);
            let hw = g.matmul(h, wh);
            let gates = g.add(xt, hw);
            let i = g.slice_cols(gates, 0, h_dim);
            let i = g.sigmoid(i);
            let f = g.slice_cols(gates, h_dim, 2 * h_dim);
            let f = g.sigmoid(f);
            let cand = g.slice_cols(gates, 2 * h_dim, 3 * h_dim);
            let cand = g.tanh(cand);
            let o = g.slice_cols(gates, 3 * h_dim, 4 * h_dim);
            let o = g.sigmoid(o);
            let fc = g.mul(f, c);
            let ic = g.mul(i, cand);
            c = g.add(fc, ic);
            let tc = g.tanh(c);
            h = g.mul(o, tc);
            out.push(h);
        }
        out
    }
}

#[derive(Clone, Debug)]
struct BiLstm {
    forward: Lstm,
    backward: Lstm,
}

impl BiLstm {
    fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, d: usize) -> Self {
        let hidden = d / 2;
        Self {
            forward: Lstm::new(store, rng, &format!("{name}.fwd"), d, hidden),
            backward: Lstm::new(store, rng, &format!("{name}.bwd"), d, d - hidden),
        }
    }

    /// `L × d` states; padded rows are zero and never visited.
    fn encode(&self, g: &mut Graph, x: Var, keep: &[bool]) -> Var {
        let real: Vec<usize> = (0..keep.len()).filter(|&t| keep[t]).collect();
        let rev: Vec<usize> = real.iter().rev().copied().collect();
        let fw = self.forward.run(g, x, &real);
        let mut bw = self.backward.run(g, x, &rev);
        bw.reverse();
        let d = self.forward.hidden + self.backward.hidden;
        let mut rows = Vec::with_capacity(keep.len());
        let mut k = 0;
        for &kept in keep {
            if kept {
                rows.push(g.concat_cols(&[fw[k], bw[k]]));
                k += 1;
            } else {
                rows.push(g.constant(Matrix::zeros(1, d)));
            }
        }
        g.concat_rows(&rows)
    }
}

/// Additive attention from every row of `x` over `y`, combined with `x`
/// through a tanh output layer.
#[derive(Clone, Debug)]
struct AttentionMerge {
    proj_x: Linear,
    proj_y: ParamId,
    v: ParamId,
    out: Linear,
}

impl AttentionMerge {
    fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, d: usize) -> Self {
        Self {
            proj_x: Linear::new(store, rng, &format!("{name}.px"), d, d),
            proj_y: store.add(format!("{name}.py"), xavier_uniform(rng, d, d)),
            v: store.add(format!("{name}.v"), uniform(rng, 1, d, (3.0 / d as f64).sqrt())),
            out: Linear::new(store, rng, &format!("{name}.out"), 2 * d, d),
        }
    }

    fn forward(&self, g: &mut Graph, x: &EncodedSequence, y: &EncodedSequence) -> Var {
        let p = self.proj_x.forward(g, x.states);
        let py = g.param(self.proj_y);
        let q = g.matmul(y.states, py);
        let v = g.param(self.v);
        let e = g.additive_scores(p, q, v);
        let keep = if y.keep.iter().all(|&b| b) {
            None
        } else {
            Some(y.keep.as_slice())
        };
        let a = g.softmax_rows(e, keep);
        let ctx = g.matmul(a, y.states);
        let both = g.concat_cols(&[x.states, ctx]);
        let h = self.out.forward(g, both);
        g.tanh(h)
    }
}

#[derive(Clone, Debug)]
pub struct RecurrentNet {
    embeddings: EmbeddingTable,
    sentence_encoder: BiLstm,
    question_encoder: BiLstm,
    answer_encoder: BiLstm,
    answer_merge: AttentionMerge,
    selection_merge: AttentionMerge,
    dense: Linear,
}

impl RecurrentNet {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        Self {
            embeddings: EmbeddingTable::new(store, rng, cfg),
            sentence_encoder: BiLstm::new(store, rng, "lstm_s", d),
            question_encoder: BiLstm::new(store, rng, "lstm_q", d),
            answer_encoder: BiLstm::new(store, rng, "lstm_a", d),
            answer_merge: AttentionMerge::new(store, rng, "merge_ae", d),
            selection_merge: AttentionMerge::new(store, rng, "merge_qs", d),
            dense: Linear::new(store, rng, "dense", d, 1),
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
        let enc = match which {
            Stream::Sentence => &self.sentence_encoder,
            Stream::Question => &self.question_encoder,
            Stream::Answer => &self.answer_encoder,
        };
        let states = enc.encode(g, x, &keep);
        Ok(EncodedSequence { states, keep })
    }

    pub fn selection_states(&self, g: &mut Graph, s: &EncodedSequence, a: &EncodedSequence) -> Var {
        self.selection_merge.forward(g, s, a)
    }

    pub fn answer_states(&self, g: &mut Graph, s: &EncodedSequence, q: &EncodedSequence) -> Var {
        self.answer_merge.forward(g, s, q)
    }

    pub fn dense(&self, g: &mut Graph, h: Var) -> Var {
        self.dense.forward(g, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Preset;
    use crate::params::Gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn recurrent_gradients_match_finite_differences() {
        let mut cfg = ModelConfig::from_preset(Preset::Small, 9);
        cfg.d_model = 4;
        cfg.max_len = 6;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = RecurrentNet::new(&mut store, &mut rng, &cfg);
        let loss = |g: &mut Graph, net: &RecurrentNet| {
            let s = net.encode(g, &[2, 3, 4, 0], Stream::Sentence).unwrap();
            let q = net.encode(g, &[5, 6], Stream::Question).unwrap();
            let a = net.encode(g, &[3], Stream::Answer).unwrap();
            let h = net.answer_states(g, &s, &q);
            let l = net.dense(g, h);
            let sel = net.selection_states(g, &s, &a);
            let sq = g.mul(sel, sel);
            let t1 = g.sum(l);
            let t2 = g.sum(sq);
            g.add(t1, t2)
        };
        let mut grads = Gradients::zeros_like(&store);
        {
            let mut g = Graph::new(&store);
            let l = loss(&mut g, &net);
            g.backward(l, &mut grads);
        }
        let eps = 1e-6;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            for i in 0..store.get(id).len() {
                let orig = store.get(id).data()[i];
                let eval = |v: f64, store: &mut ParamStore| {
                    store.get_mut(id).data_mut()[i] = v;
                    let mut g = Graph::new(store);
                    let l = loss(&mut g, &net);
                    g.value(l).item()
                };
                let up = eval(orig + eps, &mut store);
                let down = eval(orig - eps, &mut store);
                store.get_mut(id).data_mut()[i] = orig;
                let num = (up - down) / (2.0 * eps);
                let ana = grads.get(id).data()[i];
                let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-7);
                assert!(
                    rel < 1e-4 || (num - ana).abs() < 1e-8,
                    "{} [{i}] {ana} vs {num}",
                    store.name(id)
                );
            }
        }
    }
}

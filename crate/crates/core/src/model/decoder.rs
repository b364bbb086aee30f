//! Attentive LSTM response decoder.
//!
//! The decoder LSTM initializes its hidden state from a linear map of the
//! dialog vector (cell state zero), consumes [previous context vector;
//! previous token embedding] per step, re-attends over the utterance
//! vectors, and projects [hidden; context] to the vocabulary distribution.
//! Inference offers greedy decoding and length-bounded beam search ranked
//! by average per-token log-probability, ties broken toward the
//! lexicographically smaller token sequence.

use super::{Encoded, Fw};
use crate::data::{DialogExample, EOS, SOS};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, TensorId};

/// Decoder recurrent state on the tape.
#[derive(Debug, Clone, Copy)]
pub struct DecState {
    pub h: TensorId,
    pub c: TensorId,
    pub f: TensorId,
}

impl<'a, F: Real> Fw<'a, F> {
    /// s_0 = W_g h_d + b_g, cell zeroed, first context vector from s_0.
    pub(crate) fn dec_init(&mut self, enc: &Encoded) -> Result<DecState> {
        let dec = &self.idx.dec;
        let h0 = self.tape.matmul(enc.h_d, self.leaves[dec.w_g])?;
        let h0 = self.tape.add_bias(h0, self.leaves[dec.b_g])?;
        let c0 = self.tape.zeros(vec![1, self.config.hidden]);
        let (_, f0) = self.dec_attend(h0, enc)?;
        Ok(DecState { h: h0, c: c0, f: f0 })
    }

    /// Additive attention over utterance vectors:
    /// score_i = W_n^T tanh(W_s s + W_h u_i), masked softmax, weighted sum.
    pub(crate) fn dec_attend(&mut self, s: TensorId, enc: &Encoded) -> Result<(TensorId, TensorId)> {
        if enc.n_utt == 0 {
            return Err(Error::Shape("decoder attention: no utterances".into()));
        }
        let dec = &self.idx.dec;
        let d = self.config.hidden;
        let ws = self.tape.matmul(s, self.leaves[dec.w_s])?;
        let ws = self.tape.reshape(ws, vec![d])?;
        let wh = self.tape.matmul(enc.utt_reps, self.leaves[dec.w_h])?;
        let pre = self.tape.add_bias(wh, ws)?;
        let t = self.tape.tanh(pre);
        let scores = self.tape.matmul(t, self.leaves[dec.w_n])?;
        let scores = self.tape.reshape(scores, vec![1, enc.n_utt])?;
        let gamma = self.tape.softmax(scores, 1)?;
        self.trace_attention("decoder_gamma".into(), gamma);
        let f = self.tape.matmul(gamma, enc.utt_reps)?;
        Ok((gamma, f))
    }

    /// One decode step: consumes `prev_token`, returns vocabulary logits
    /// [1, V] and the advanced state.
    pub(crate) fn dec_step(
        &mut self,
        state: &DecState,
        prev_token: u32,
        enc: &Encoded,
    ) -> Result<(TensorId, DecState)> {
        let dec_lstm = self.idx.dec.lstm.clone();
        let e = self.embed_tokens(&[prev_token])?;
        let x = self.tape.concat_cols(&[state.f, e])?;
        let (h, c) = self.lstm_step(&dec_lstm, x, state.h, state.c, self.config.hidden)?;
        let (_, f) = self.dec_attend(h, enc)?;
        let dec = &self.idx.dec;
        let out_in = self.tape.concat_cols(&[h, f])?;
        let logits = self.tape.matmul(out_in, self.leaves[dec.w_v])?;
        let logits = self.tape.add_bias(logits, self.leaves[dec.b_v])?;
        Ok((logits, DecState { h, c, f }))
    }

    /// Sum of -log P(target_t) under teacher forcing. Targets are the gold
    /// response followed by eos; inputs are sos followed by the response.
    pub(crate) fn teacher_forced_nll(
        &mut self,
        enc: &Encoded,
        response: &[u32],
    ) -> Result<(TensorId, usize)> {
        let mut inputs = Vec::with_capacity(response.len() + 1);
        inputs.push(SOS);
        inputs.extend_from_slice(response);
        let mut targets: Vec<usize> = response.iter().map(|&t| t as usize).collect();
        targets.push(EOS as usize);

        let mut state = self.dec_init(enc)?;
        let mut rows = Vec::with_capacity(inputs.len());
        for &tok in &inputs {
            let (logits, next) = self.dec_step(&state, tok, enc)?;
            if self.trace.is_some() {
                let p = self.tape.softmax(logits, 1)?;
                if let Some(t) = self.trace.as_deref_mut() {
                    t.output_dists.push(p);
                }
            }
            rows.push(logits);
            state = next;
        }
        let all = self.tape.concat0(&rows)?;
        let logp = self.tape.log_softmax(all, 1)?;
        let n = targets.len();
        let picked = self.tape.pick_per_row(logp, targets)?;
        let total = self.tape.sum(picked);
        Ok((self.tape.scale(total, -1.0), n))
    }
}

// ── search ───────────────────────────────────────────────────────────

/// A partial decode: emitted tokens (no sos/eos), cumulative
/// log-probability over all scored steps, and the step count (content
/// tokens plus the eos step when one was taken).
#[derive(Debug, Clone)]
pub struct BeamHypothesis {
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    pub steps: usize,
}

impl BeamHypothesis {
    pub fn avg_log_prob(&self) -> f64 {
        self.log_prob / self.steps.max(1) as f64
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BeamParams {
    pub beam: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for BeamParams {
    fn default() -> Self {
        BeamParams { beam: 4, min_len: 10, max_len: 20 }
    }
}

/// Anything beam search can drive: a cloneable state, a start distribution,
/// and an advance function. Log-probabilities are plain f64 rows over the
/// vocabulary.
pub trait BeamModel {
    type State: Clone;
    /// State after consuming start-of-sequence plus the first distribution.
    fn start(&mut self) -> Result<(Self::State, Vec<f64>)>;
    /// Consume `token` from `state`; return the next state + distribution.
    fn advance(&mut self, state: &Self::State, token: u32) -> Result<(Self::State, Vec<f64>)>;
}

struct Live<S> {
    tokens: Vec<u32>,
    log_prob: f64,
    state: S,
    dist: Vec<f64>,
}

/// Length-bounded beam search. Eos is masked from the distribution until
/// `min_len` content tokens exist; hypotheses finalize on eos or at
/// `max_len` content tokens. The winner maximizes average per-step
/// log-probability; exact ties go to the lexicographically smaller token
/// sequence.
pub fn beam_search<M: BeamModel>(model: &mut M, params: &BeamParams) -> Result<BeamHypothesis> {
    if params.beam == 0 || params.min_len == 0 || params.max_len < params.min_len {
        return Err(Error::Config(format!(
            "invalid beam parameters: beam {} lengths [{}, {}]",
            params.beam, params.min_len, params.max_len
        )));
    }
    let (s0, d0) = model.start()?;
    let mut live = vec![Live { tokens: Vec::new(), log_prob: 0.0, state: s0, dist: d0 }];
    let mut finished: Vec<BeamHypothesis> = Vec::new();

    while !live.is_empty() {
        // (source index, token, cumulative log-prob, is_eos)
        let mut candidates: Vec<(usize, u32, f64, bool)> = Vec::new();
        for (si, hyp) in live.iter().enumerate() {
            let eos_allowed = hyp.tokens.len() >= params.min_len;
            for (tok, &lp) in hyp.dist.iter().enumerate() {
                let tok = tok as u32;
                if tok == EOS && !eos_allowed {
                    continue;
                }
                if !lp.is_finite() {
                    continue;
                }
                candidates.push((si, tok, hyp.log_prob + lp, tok == EOS));
            }
        }
        candidates.sort_by(|a, b| {
            b.2.partial_cmp(&a.2)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| {
                    let seq_a = (&live[a.0].tokens, a.1);
                    let seq_b = (&live[b.0].tokens, b.1);
                    seq_a.cmp(&seq_b)
                })
        });
        candidates.truncate(params.beam);

        let mut next_live = Vec::new();
        for (si, tok, lp, is_eos) in candidates {
            let src = &live[si];
            if is_eos {
                finished.push(BeamHypothesis {
                    tokens: src.tokens.clone(),
                    log_prob: lp,
                    steps: src.tokens.len() + 1,
                });
            } else {
                let mut tokens = src.tokens.clone();
                tokens.push(tok);
                if tokens.len() >= params.max_len {
                    finished.push(BeamHypothesis { tokens, log_prob: lp, steps: params.max_len });
                } else {
                    let (state, dist) = model.advance(&src.state, tok)?;
                    next_live.push(Live { tokens, log_prob: lp, state, dist });
                }
            }
        }
        live = next_live;
    }

    finished
        .into_iter()
        .min_by(|a, b| {
            b.avg_log_prob()
                .partial_cmp(&a.avg_log_prob())
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.tokens.cmp(&b.tokens))
        })
        .ok_or_else(|| Error::Config("beam search finished no hypothesis".into()))
}

/// Greedy decoding: the argmax token at every step (smaller id on ties),
/// under the same length bounds as beam search.
pub fn greedy_decode<M: BeamModel>(model: &mut M, params: &BeamParams) -> Result<BeamHypothesis> {
    let (mut state, mut dist) = model.start()?;
    let mut tokens = Vec::new();
    let mut log_prob = 0.0;
    let mut steps = 0;
    loop {
        let eos_allowed = tokens.len() >= params.min_len;
        let mut best: Option<(u32, f64)> = None;
        for (tok, &lp) in dist.iter().enumerate() {
            let tok = tok as u32;
            if tok == EOS && !eos_allowed {
                continue;
            }
            if !lp.is_finite() {
                continue;
            }
            if best.map_or(true, |(_, b)| lp > b) {
                best = Some((tok, lp));
            }
        }
        let (tok, lp) = best.ok_or_else(|| Error::Config("greedy: no admissible token".into()))?;
        log_prob += lp;
        steps += 1;
        if tok == EOS {
            break;
        }
        tokens.push(tok);
        if tokens.len() >= params.max_len {
            break;
        }
        let (ns, nd) = model.advance(&state, tok)?;
        state = ns;
        dist = nd;
    }
    Ok(BeamHypothesis { tokens, log_prob, steps })
}

/// Beam-searchable view of the trained decoder over one encoded example.
pub struct MrgDecoder<'m, F: Real> {
    pub model: &'m super::Mrg<F>,
    pub tape: &'m mut Tape<F>,
    pub leaves: &'m [TensorId],
    pub encoded: &'m Encoded,
}

impl<'m, F: Real> MrgDecoder<'m, F> {
    fn dist_of(&mut self, logits: TensorId) -> Result<Vec<f64>> {
        let logp = self.tape.log_softmax(logits, 1)?;
        Ok(self.tape.values(logp).iter().map(|v| v.as_f64()).collect())
    }
}

impl<'m, F: Real> BeamModel for MrgDecoder<'m, F> {
    type State = DecState;

    fn start(&mut self) -> Result<(DecState, Vec<f64>)> {
        let (logits, state) = {
            let mut fw = self.model.fw(self.tape, self.leaves, None);
            let s0 = fw.dec_init(self.encoded)?;
            fw.dec_step(&s0, SOS, self.encoded)?
        };
        let dist = self.dist_of(logits)?;
        Ok((state, dist))
    }

    fn advance(&mut self, state: &DecState, token: u32) -> Result<(DecState, Vec<f64>)> {
        let (logits, next) = {
            let mut fw = self.model.fw(self.tape, self.leaves, None);
            fw.dec_step(state, token, self.encoded)?
        };
        let dist = self.dist_of(logits)?;
        Ok((next, dist))
    }
}

impl<F: Real> super::Mrg<F> {
    /// Decodes one example with beam search (or greedy when beam == 1 is
    /// requested through `params.beam`).
    pub fn decode(
        &self,
        tape: &mut Tape<F>,
        leaves: &[TensorId],
        ex: &DialogExample,
        params: &BeamParams,
    ) -> Result<BeamHypothesis> {
        let encoded = self.encode(tape, leaves, ex, None)?;
        let mut dec = MrgDecoder { model: self, tape, leaves, encoded: &encoded };
        beam_search(&mut dec, params)
    }
}

#[cfg(test)]
mod tests {
    use super::super::{Ablation, ModelConfig, Mrg, Trace};
    use super::*;
    use crate::data::ContextWindow;

    fn model() -> Mrg<f64> {
        let cfg = ModelConfig {
            vocab_size: 9,
            emb_dim: 4,
            hidden: 8,
            layers: 1,
            heads: 2,
            window: ContextWindow { max_utterances: 3, tokens_per_utterance: 4, max_response_len: 6 },
            init_std: 0.2,
        };
        Mrg::init(cfg, Ablation::default(), 51).unwrap()
    }

    fn example() -> crate::data::DialogExample {
        crate::data::DialogExample {
            utterances: vec![vec![4, 5, 6], vec![7, 8]],
            question: vec![5, 6, 4],
            answer_mask: vec![0, 1, 0, 0, 0],
            response: vec![5, 4, 7],
            utterance_tokens: vec![],
            question_tokens: vec![],
            response_tokens: vec![],
        }
    }

    #[test]
    fn init_state_identity_map_reproduces_dialog_vector() {
        let mut m = model();
        let d = m.config.hidden;
        let wg = m.params.slot_of("dec.w_g").unwrap();
        {
            let p = m.params.get_mut(wg);
            for v in p.values.iter_mut() {
                *v = 0.0;
            }
            for i in 0..d {
                p.values[i * d + i] = 1.0;
            }
        }
        let bg = m.params.slot_of("dec.b_g").unwrap();
        for v in m.params.get_mut(bg).values.iter_mut() {
            *v = 0.0;
        }
        let mut tape = Tape::new();
        let leaves = m.register(&mut tape, false).unwrap();
        let ex = example();
        let enc = m.encode(&mut tape, &leaves, &ex, None).unwrap();
        let s0 = {
            let mut fw = m.fw(&mut tape, &leaves, None);
            fw.dec_init(&enc).unwrap()
        };
        assert_eq!(tape.values(s0.h), tape.values(enc.h_d));
        assert!(tape.values(s0.c).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_utterance_attention_is_trivial() {
        let m = model();
        let mut tape = Tape::new();
        let leaves = m.register(&mut tape, false).unwrap();
        let mut ex = example();
        ex.utterances.truncate(1);
        ex.answer_mask.truncate(3);
        let enc = m.encode(&mut tape, &leaves, &ex, None).unwrap();
        let (gamma, f) = {
            let mut fw = m.fw(&mut tape, &leaves, None);
            let s0 = fw.dec_init(&enc).unwrap();
            fw.dec_attend(s0.h, &enc).unwrap()
        };
        assert_eq!(tape.values(gamma), &[1.0]);
        assert_eq!(tape.values(f), tape.values(enc.utt_reps));
    }

    #[test]
    fn zero_score_vector_gives_uniform_attention() {
        let mut m = model();
        let wn = m.params.slot_of("dec.attn.w_n").unwrap();
        for v in m.params.get_mut(wn).values.iter_mut() {
            *v = 0.0;
        }
        let mut tape = Tape::new();
        let leaves = m.register(&mut tape, false).unwrap();
        let ex = example();
        let enc = m.encode(&mut tape, &leaves, &ex, None).unwrap();
        let (gamma, _) = {
            let mut fw = m.fw(&mut tape, &leaves, None);
            let s0 = fw.dec_init(&enc).unwrap();
            fw.dec_attend(s0.h, &enc).unwrap()
        };
        for &g in tape.values(gamma) {
            assert!((g - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn step_distribution_sums_to_one_and_is_deterministic() {
        let m = model();
        let mut tape = Tape::new();
        let leaves = m.register(&mut tape, false).unwrap();
        let ex = example();
        let enc = m.encode(&mut tape, &leaves, &ex, None).unwrap();
        let (p1, p2) = {
            let mut fw = m.fw(&mut tape, &leaves, None);
            let s0 = fw.dec_init(&enc).unwrap();
            let (l1, _) = fw.dec_step(&s0, SOS, &enc).unwrap();
            let (l2, _) = fw.dec_step(&s0, SOS, &enc).unwrap();
            let p1 = fw.tape.softmax(l1, 1).unwrap();
            let p2 = fw.tape.softmax(l2, 1).unwrap();
            (p1, p2)
        };
        let v1 = tape.values(p1);
        assert!((v1.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(v1, tape.values(p2));
    }

    #[test]
    fn traced_output_distributions_are_stochastic() {
        let m = model();
        let mut tape = Tape::new();
        let leaves = m.register(&mut tape, false).unwrap();
        let ex = example();
        let mut trace = Trace::default();
        m.forward_example(&mut tape, &leaves, &ex, Some(&mut trace)).unwrap();
        assert_eq!(trace.output_dists.len(), ex.response.len() + 1);
        for &p in &trace.output_dists {
            let sum: f64 = tape.values(p).iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn beam_one_equals_greedy_exactly() {
        let m = model();
        let ex = example();
        for seed in 0..5u64 {
            let m2: Mrg<f64> = Mrg::init(m.config.clone(), Ablation::default(), seed).unwrap();
            let params = BeamParams { beam: 1, min_len: 2, max_len: 5 };
            let mut tape = Tape::new();
            let leaves = m2.register(&mut tape, false).unwrap();
            let enc = m2.encode(&mut tape, &leaves, &ex, None).unwrap();
            let beam = {
                let mut dec = MrgDecoder { model: &m2, tape: &mut tape, leaves: &leaves, encoded: &enc };
                beam_search(&mut dec, &params).unwrap()
            };
            let greedy = {
                let mut dec = MrgDecoder { model: &m2, tape: &mut tape, leaves: &leaves, encoded: &enc };
                greedy_decode(&mut dec, &params).unwrap()
            };
            assert_eq!(beam.tokens, greedy.tokens, "seed {seed}");
            assert!((beam.log_prob - greedy.log_prob).abs() < 1e-12);
        }
    }

    #[test]
    fn hypothesis_log_prob_matches_recomputed_sum() {
        let m = model();
        let ex = example();
        let params = BeamParams { beam: 3, min_len: 2, max_len: 5 };
        let mut tape = Tape::new();
        let leaves = m.register(&mut tape, false).unwrap();
        let enc = m.encode(&mut tape, &leaves, &ex, None).unwrap();
        let hyp = {
            let mut dec = MrgDecoder { model: &m, tape: &mut tape, leaves: &leaves, encoded: &enc };
            beam_search(&mut dec, &params).unwrap()
        };
        // Teacher-force the emitted sequence and re-sum its log probs.
        let mut recomputed = 0.0;
        let mut dec = MrgDecoder { model: &m, tape: &mut tape, leaves: &leaves, encoded: &enc };
        let (mut state, mut dist) = dec.start().unwrap();
        for &tok in &hyp.tokens {
            recomputed += dist[tok as usize];
            let (ns, nd) = dec.advance(&state, tok).unwrap();
            state = ns;
            dist = nd;
        }
        if hyp.steps == hyp.tokens.len() + 1 {
            recomputed += dist[EOS as usize];
        }
        assert!((recomputed - hyp.log_prob).abs() < 1e-5);
    }

    #[test]
    fn emitted_lengths_respect_bounds() {
        let ex = example();
        for seed in 0..20u64 {
            let m: Mrg<f64> = Mrg::init(model().config.clone(), Ablation::default(), seed).unwrap();
            let mut tape = Tape::new();
            let leaves = m.register(&mut tape, false).unwrap();
            let params = BeamParams { beam: 2, min_len: 3, max_len: 5 };
            let hyp = m.decode(&mut tape, &leaves, &ex, &params).unwrap();
            assert!(hyp.tokens.len() >= 3 && hyp.tokens.len() <= 5, "{:?}", hyp.tokens);
        }
    }
}

//! Hierarchical self-attention over the fused word representations:
//! word-level self-attention within each utterance, masked mean-pooling to
//! one vector per utterance, utterance-level self-attention across the
//! dialog, and a final mean into the dialog vector. No positional encoding
//! anywhere; order information lives in the Bi-LSTM and the memory
//! recurrence, which makes this sub-module permutation-equivariant in
//! isolation.

use super::{Encoded, Fw};
use crate::data::DialogExample;
use crate::error::Result;
use crate::tensor::{Real, TensorId};

impl<'a, F: Real> Fw<'a, F> {
    /// Word-level self-attention + pooling + utterance-level self-attention.
    /// Takes per-utterance [len_j, d] states, returns ([n_u, d], h_d [1, d]).
    pub(crate) fn hierarchical(&mut self, m_states: &[TensorId]) -> Result<(TensorId, TensorId)> {
        let d = self.config.hidden;
        let mut pooled = Vec::with_capacity(m_states.len());
        for (j, &m) in m_states.iter().enumerate() {
            let len = self.tape.shape(m)[0];
            let mask = vec![true; len];
            let states = if self.ablation.use_mam {
                self.mam(&self.idx.word_mam.clone(), &format!("word_mam.u{j}"), m, &mask)?
            } else {
                m
            };
            let v = self.tape.mean_pool(states, 0, &mask)?;
            pooled.push(self.tape.reshape(v, vec![1, d])?);
        }
        let stacked = self.tape.concat0(&pooled)?;
        let n_u = m_states.len();
        let utt_reps = if self.ablation.use_mam {
            self.mam(&self.idx.utt_mam.clone(), "utt_mam", stacked, &vec![true; n_u])?
        } else {
            stacked
        };
        let h_d = self.tape.mean_pool(utt_reps, 0, &vec![true; n_u])?;
        let h_d = self.tape.reshape(h_d, vec![1, d])?;
        Ok((utt_reps, h_d))
    }

    /// Full encoder: Bi-LSTMs, the cross-attention stack, and the
    /// hierarchical pooling, producing everything the two heads consume.
    pub(crate) fn encode_example(&mut self, ex: &DialogExample) -> Result<Encoded> {
        let enc_q_f = self.idx.enc_q_f.clone();
        let enc_q_b = self.idx.enc_q_b.clone();
        let enc_ctx_f = self.idx.enc_ctx_f.clone();
        let enc_ctx_b = self.idx.enc_ctx_b.clone();

        let q_states = self.encode_sequence(&enc_q_f, &enc_q_b, &ex.question)?;
        let mut utt_states = Vec::with_capacity(ex.utterances.len());
        for utt in &ex.utterances {
            utt_states.push(self.encode_sequence(&enc_ctx_f, &enc_ctx_b, utt)?);
        }
        let fused = self.mcam_stack(&utt_states, q_states, ex.question.len())?;
        let (utt_reps, h_d) = self.hierarchical(&fused)?;
        Ok(Encoded {
            utt_reps,
            h_d,
            q_states,
            n_utt: ex.utterances.len(),
            q_len: ex.question.len(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::{Ablation, ModelConfig, Mrg};
    use crate::data::ContextWindow;
    use crate::tensor::{Tape, TensorId};

    fn model() -> Mrg<f64> {
        let cfg = ModelConfig {
            vocab_size: 10,
            emb_dim: 4,
            hidden: 8,
            layers: 1,
            heads: 2,
            window: ContextWindow { max_utterances: 4, tokens_per_utterance: 5, max_response_len: 5 },
            init_std: 0.2,
        };
        Mrg::init(cfg, Ablation::default(), 31).unwrap()
    }

    fn rand_mat(tape: &mut Tape<f64>, seed: u64, rows: usize, cols: usize) -> TensorId {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let vals: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        tape.constant(vals, vec![rows, cols]).unwrap()
    }

    #[test]
    fn single_utterance_dialog_vector_is_its_own_vector() {
        let m = model();
        let mut tape = Tape::new();
        let leaves = m.register(&mut tape, false).unwrap();
        let u = rand_mat(&mut tape, 3, 4, 8);
        let (reps, h_d) = {
            let mut fw = m.fw(&mut tape, &leaves, None);
            fw.hierarchical(&[u]).unwrap()
        };
        assert_eq!(tape.shape(reps), &[1, 8]);
        assert_eq!(tape.values(reps), tape.values(h_d));
    }

    #[test]
    fn identical_utterances_contribute_identically() {
        let m = model();
        let mut tape = Tape::new();
        let leaves = m.register(&mut tape, false).unwrap();
        let u = rand_mat(&mut tape, 5, 4, 8);
        let (reps, h_d) = {
            let mut fw = m.fw(&mut tape, &leaves, None);
            fw.hierarchical(&[u, u, u]).unwrap()
        };
        let v = tape.values(reps);
        let d = 8;
        for j in 1..3 {
            for k in 0..d {
                assert!((v[k] - v[j * d + k]).abs() < 1e-12);
            }
        }
        for k in 0..d {
            assert!((tape.values(h_d)[k] - v[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn permuting_utterances_permutes_reps_and_preserves_h_d() {
        let m = model();
        let mut tape = Tape::new();
        let leaves = m.register(&mut tape, false).unwrap();
        let a = rand_mat(&mut tape, 6, 3, 8);
        let b = rand_mat(&mut tape, 7, 2, 8);
        let c = rand_mat(&mut tape, 8, 4, 8);
        let (reps1, hd1) = {
            let mut fw = m.fw(&mut tape, &leaves, None);
            fw.hierarchical(&[a, b, c]).unwrap()
        };
        let (reps2, hd2) = {
            let mut fw = m.fw(&mut tape, &leaves, None);
            fw.hierarchical(&[c, a, b]).unwrap()
        };
        let d = 8;
        let v1 = tape.values(reps1).to_vec();
        let v2 = tape.values(reps2).to_vec();
        // rows (a,b,c) -> (c,a,b)
        for k in 0..d {
            assert!((v1[k] - v2[d + k]).abs() < 1e-9); // a
            assert!((v1[d + k] - v2[2 * d + k]).abs() < 1e-9); // b
            assert!((v1[2 * d + k] - v2[k]).abs() < 1e-9); // c
        }
        for k in 0..d {
            assert!((tape.values(hd1)[k] - tape.values(hd2)[k]).abs() < 1e-9);
        }
    }
}

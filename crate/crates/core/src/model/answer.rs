//! Answer selector: per-context-token extraction scores.
//!
//! The pooled question vector and the utterance vectors (zero-padded to the
//! fixed utterance count) concatenate into one feature vector; a two-layer
//! perceptron maps it to one logit per padded context position. Extraction
//! takes sigmoid(logit) > threshold at real positions; the loss is mean
//! binary cross-entropy over real positions only.

use super::{Encoded, Fw};
use crate::data::DialogExample;
use crate::error::Result;
use crate::tensor::{Real, TensorId};

pub const EXTRACT_THRESHOLD: f64 = 0.5;

impl<'a, F: Real> Fw<'a, F> {
    /// Answer logits [capacity] plus the masked-mean BCE loss against the
    /// gold grid.
    pub(crate) fn answer_scores(
        &mut self,
        enc: &Encoded,
        ex: &DialogExample,
    ) -> Result<(TensorId, TensorId)> {
        let logits = self.answer_logits(enc)?;
        let window = &self.config.window;
        let targets: Vec<F> = ex.answer_grid(window).iter().map(|&v| F::from_f64(v)).collect();
        let mask: Vec<F> = ex.position_grid(window).iter().map(|&v| F::from_f64(v)).collect();
        let loss = self.tape.bce_with_logits(logits, targets, mask)?;
        Ok((logits, loss))
    }

    pub(crate) fn answer_logits(&mut self, enc: &Encoded) -> Result<TensorId> {
        let d = self.config.hidden;
        let max_u = self.config.window.max_utterances;
        let q_mask = vec![true; enc.q_len];
        let h_q = self.tape.mean_pool(enc.q_states, 0, &q_mask)?;

        let mut parts = Vec::with_capacity(max_u + 1);
        for j in 0..max_u {
            if j < enc.n_utt {
                let row = self.tape.slice_rows(enc.utt_reps, j, 1)?;
                parts.push(self.tape.reshape(row, vec![d])?);
            } else {
                parts.push(self.tape.zeros(vec![d]));
            }
        }
        parts.push(h_q);
        let feat = self.tape.concat0(&parts)?;
        let feat = self.tape.reshape(feat, vec![1, (max_u + 1) * d])?;

        let a = &self.idx.answer;
        let hidden = self.tape.matmul(feat, self.leaves[a.w_e])?;
        let hidden = self.tape.add_bias(hidden, self.leaves[a.b_e])?;
        let hidden = self.tape.tanh(hidden);
        let logits = self.tape.matmul(hidden, self.leaves[a.w_f])?;
        let logits = self.tape.add_bias(logits, self.leaves[a.b_f])?;
        let cap = self.config.window.capacity();
        self.tape.reshape(logits, vec![cap])
    }
}

/// Indices of extracted tokens: sigmoid(logit) > threshold at real positions.
pub fn extract_answer_set(logits: &[f64], position_mask: &[f64], threshold: f64) -> Vec<usize> {
    logits
        .iter()
        .zip(position_mask)
        .enumerate()
        .filter(|(_, (&l, &m))| m != 0.0 && 1.0 / (1.0 + (-l).exp()) > threshold)
        .map(|(i, _)| i)
        .collect()
}

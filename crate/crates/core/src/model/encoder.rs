//! Shared embedding and bidirectional LSTM encoding.
//!
//! One weight set encodes every utterance, a second one the question. Each
//! direction runs 128 units (hidden/2) and the per-step outputs concatenate
//! to the model width. Computation covers true tokens only; when a caller
//! needs the padded layout it appends zero rows, so padding can never leak
//! into unmasked positions.

use super::{Fw, LstmIdx};
use crate::error::{Error, Result};
use crate::tensor::{Real, TensorId};

impl<'a, F: Real> Fw<'a, F> {
    /// Embedding rows for a token sequence: [len, emb_dim].
    pub(crate) fn embed_tokens(&mut self, ids: &[u32]) -> Result<TensorId> {
        let table = self.leaves[self.idx.embedding];
        let ids: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
        self.tape.embed(table, &ids)
    }

    /// One LSTM cell step. `x` is [1, input], state vectors are [1, hid].
    /// Gate layout along the 4*hid axis: input, forget, cell, output.
    pub(crate) fn lstm_step(
        &mut self,
        idx: &LstmIdx,
        x: TensorId,
        h: TensorId,
        c: TensorId,
        hid: usize,
    ) -> Result<(TensorId, TensorId)> {
        let wx = self.leaves[idx.w_x];
        let uh = self.leaves[idx.u_h];
        let b = self.leaves[idx.b];
        let xg = self.tape.matmul(x, wx)?;
        let hg = self.tape.matmul(h, uh)?;
        let pre = self.tape.add(xg, hg)?;
        let gates = self.tape.add_bias(pre, b)?;
        let i_g = self.tape.slice_cols(gates, 0, hid)?;
        let f_g = self.tape.slice_cols(gates, hid, hid)?;
        let g_g = self.tape.slice_cols(gates, 2 * hid, hid)?;
        let o_g = self.tape.slice_cols(gates, 3 * hid, hid)?;
        let i = self.tape.sigmoid(i_g);
        let f = self.tape.sigmoid(f_g);
        let g = self.tape.tanh(g_g);
        let o = self.tape.sigmoid(o_g);
        let fc = self.tape.mul(f, c)?;
        let ig = self.tape.mul(i, g)?;
        let c_new = self.tape.add(fc, ig)?;
        let c_act = self.tape.tanh(c_new);
        let h_new = self.tape.mul(o, c_act)?;
        Ok((h_new, c_new))
    }

    /// Bidirectional LSTM over embedded tokens [len, emb]. Only the first
    /// `true_len` rows are encoded; the remaining rows are assumed padding
    /// and come back as zeros, giving [len, hidden].
    pub(crate) fn birnn_encode(
        &mut self,
        fwd: &LstmIdx,
        bwd: &LstmIdx,
        embedded: TensorId,
        true_len: usize,
    ) -> Result<TensorId> {
        let len = self.tape.shape(embedded)[0];
        if true_len == 0 || true_len > len {
            return Err(Error::Shape(format!(
                "birnn_encode: true length {true_len} invalid for {len} embedded rows"
            )));
        }
        let h2 = self.config.hidden / 2;

        let mut h = self.tape.zeros(vec![1, h2]);
        let mut c = self.tape.zeros(vec![1, h2]);
        let mut fwd_states = Vec::with_capacity(true_len);
        for i in 0..true_len {
            let x = self.tape.slice_rows(embedded, i, 1)?;
            let (nh, nc) = self.lstm_step(fwd, x, h, c, h2)?;
            h = nh;
            c = nc;
            fwd_states.push(h);
        }

        let mut h = self.tape.zeros(vec![1, h2]);
        let mut c = self.tape.zeros(vec![1, h2]);
        let mut bwd_states = vec![TensorId(0); true_len];
        for i in (0..true_len).rev() {
            let x = self.tape.slice_rows(embedded, i, 1)?;
            let (nh, nc) = self.lstm_step(bwd, x, h, c, h2)?;
            h = nh;
            c = nc;
            bwd_states[i] = h;
        }

        let mut rows = Vec::with_capacity(true_len + 1);
        for i in 0..true_len {
            rows.push(self.tape.concat_cols(&[fwd_states[i], bwd_states[i]])?);
        }
        if true_len < len {
            rows.push(self.tape.zeros(vec![len - true_len, self.config.hidden]));
        }
        self.tape.concat0(&rows)
    }

    /// Embeds and encodes a token sequence at its true length: [len, hidden].
    pub(crate) fn encode_sequence(
        &mut self,
        fwd: &LstmIdx,
        bwd: &LstmIdx,
        tokens: &[u32],
    ) -> Result<TensorId> {
        let embedded = self.embed_tokens(tokens)?;
        self.birnn_encode(fwd, bwd, embedded, tokens.len())
    }
}

//! Memory-augmented cross attention.
//!
//! Utterances are processed in dialog order. At each layer the query input
//! is first refreshed by a gated memory updater that attends over the
//! stored memory slots (the previous utterance's representation at this
//! layer) concatenated with the current input:
//!
//!   s = cam(m, [memory; m])
//!   c = tanh(W_a m + W_b s)
//!   z = sigmoid(W_c m + W_d s)
//!   n = (1 - z) ⊙ c + z ⊙ m
//!
//! then the layer output is cam(n, question states). After an utterance
//! finishes, each layer's memory slots become that layer's output, padded
//! to the fixed slot count with masked zero rows. Memory starts as zeroed,
//! fully masked slots, so the first utterance attends only over itself.

use super::{Fw, GateTrace};
use crate::error::Result;
use crate::tensor::{Real, TensorId};

/// Per-layer memory carried across utterances: slot tensor [P, d] plus a
/// slot validity mask.
pub(crate) struct MemoryState {
    pub slots: Vec<TensorId>,
    pub masks: Vec<Vec<bool>>,
}

impl<'a, F: Real> Fw<'a, F> {
    pub(crate) fn fresh_memory(&mut self) -> MemoryState {
        let p = self.config.window.tokens_per_utterance;
        let d = self.config.hidden;
        let slots = (0..self.config.layers)
            .map(|_| self.tape.zeros(vec![p, d]))
            .collect();
        let masks = vec![vec![false; p]; self.config.layers];
        MemoryState { slots, masks }
    }

    /// Gated refresh of the layer input against the stored memory.
    pub(crate) fn memory_update(
        &mut self,
        layer: usize,
        m: TensorId,
        mem_slots: TensorId,
        mem_mask: &[bool],
        label: &str,
    ) -> Result<TensorId> {
        let n_cur = self.tape.shape(m)[0];
        let kv = self.tape.concat0(&[mem_slots, m])?;
        let mut kv_mask = mem_mask.to_vec();
        kv_mask.extend(std::iter::repeat(true).take(n_cur));
        let lidx = &self.idx.layers[layer];
        let s = self.cam(&lidx.mem_cam, &format!("{label}.mem_cam"), m, kv, &kv_mask)?;

        let ma = self.tape.matmul(m, self.leaves[lidx.w_a])?;
        let sb = self.tape.matmul(s, self.leaves[lidx.w_b])?;
        let c_pre = self.tape.add(ma, sb)?;
        let c = self.tape.tanh(c_pre);

        let mc = self.tape.matmul(m, self.leaves[lidx.w_c])?;
        let sd = self.tape.matmul(s, self.leaves[lidx.w_d])?;
        let z_pre = self.tape.add(mc, sd)?;
        let z = self.tape.sigmoid(z_pre);

        let keep = self.tape.mul(z, m)?;
        let one_minus_z = self.tape.one_minus(z)?;
        let write = self.tape.mul(one_minus_z, c)?;
        let n = self.tape.add(write, keep)?;

        if let Some(t) = self.trace.as_deref_mut() {
            t.memory_gates.push(GateTrace { c, z, m, n });
        }
        Ok(n)
    }

    /// Zero-pads a [len, d] tensor to the fixed slot count.
    fn pad_to_slots(&mut self, x: TensorId, len: usize) -> Result<(TensorId, Vec<bool>)> {
        let p = self.config.window.tokens_per_utterance;
        let d = self.config.hidden;
        let mut mask = vec![true; len];
        mask.resize(p, false);
        if len == p {
            return Ok((x, mask));
        }
        let pad = self.tape.zeros(vec![p - len, d]);
        Ok((self.tape.concat0(&[x, pad])?, mask))
    }

    /// Runs the full stack over every real utterance, in dialog order.
    /// Input and output are per-utterance [len_j, d] tensors.
    pub(crate) fn mcam_stack(
        &mut self,
        utt_states: &[TensorId],
        q_states: TensorId,
        q_len: usize,
    ) -> Result<Vec<TensorId>> {
        if !self.ablation.use_mcam {
            return Ok(utt_states.to_vec());
        }
        let q_mask = vec![true; q_len];
        let mut memory = self.fresh_memory();
        let mut outputs = Vec::with_capacity(utt_states.len());
        for (j, &h_x) in utt_states.iter().enumerate() {
            let len_j = self.tape.shape(h_x)[0];
            let mut m = h_x;
            let mut layer_outputs = Vec::with_capacity(self.config.layers);
            for l in 0..self.config.layers {
                let n = if self.ablation.use_memory_update {
                    self.memory_update(
                        l,
                        m,
                        memory.slots[l],
                        &memory.masks[l].clone(),
                        &format!("mcam.u{j}.l{l}"),
                    )?
                } else {
                    m
                };
                let lidx = &self.idx.layers[l];
                m = self.cam(&lidx.q_cam, &format!("mcam.u{j}.l{l}.q_cam"), n, q_states, &q_mask)?;
                layer_outputs.push(m);
            }
            for (l, &out) in layer_outputs.iter().enumerate() {
                let (slots, mask) = self.pad_to_slots(out, len_j)?;
                memory.slots[l] = slots;
                memory.masks[l] = mask;
            }
            outputs.push(m);
        }
        Ok(outputs)
    }
}

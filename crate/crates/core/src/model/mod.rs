//! The joint model: shared cross-hierarchical encoder, answer selector, and
//! response decoder.
//!
//! Per example the forward pass runs:
//! 1. shared embedding + one Bi-LSTM per utterance and one for the question;
//! 2. a stack of memory-augmented cross-attention layers fusing question
//!    words into dialog words, with a gated per-layer memory carried across
//!    utterances in dialog order;
//! 3. word-level self-attention + masked mean pooling into one vector per
//!    utterance, utterance-level self-attention across those, and a mean
//!    into the dialog vector;
//! 4. an MLP scoring every context position as answer/non-answer; and
//! 5. an attentive LSTM decoder emitting the response distribution.

mod answer;
mod attention;
mod decoder;
mod encoder;
mod hier;
mod mcam;

pub use answer::{extract_answer_set, EXTRACT_THRESHOLD};
pub use decoder::{beam_search, greedy_decode, BeamHypothesis, BeamModel, BeamParams, DecState, MrgDecoder};

use crate::data::{ContextWindow, DialogExample};
use crate::error::{Error, Result};
use crate::params::{GaussianInit, ParamSet};
use crate::tensor::{Real, Tape, TensorId};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub(crate) const LN_EPS: f64 = 1e-5;

/// Model geometry. `hidden` must be even (two Bi-LSTM directions) and
/// divisible by `heads`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub emb_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub window: ContextWindow,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 50_000,
            emb_dim: 128,
            hidden: 256,
            layers: 2,
            heads: 4,
            window: ContextWindow::default(),
            init_std: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 4 {
            return Err(Error::Config("vocab_size must cover the reserved tokens".into()));
        }
        if self.hidden == 0 || self.hidden % 2 != 0 {
            return Err(Error::Config(format!("hidden must be even, got {}", self.hidden)));
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads ({}) must divide hidden ({})",
                self.heads, self.hidden
            )));
        }
        if self.layers == 0 || self.emb_dim == 0 {
            return Err(Error::Config("layers and emb_dim must be positive".into()));
        }
        if self.window.max_utterances == 0 || self.window.tokens_per_utterance == 0 {
            return Err(Error::Config("context window must be non-empty".into()));
        }
        Ok(())
    }
}

/// Component switches mirroring the ablation arms. Parameters always exist;
/// disabled components are simply not wired into the forward pass.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct Ablation {
    pub use_mcam: bool,
    pub use_mam: bool,
    pub use_memory_update: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation { use_mcam: true, use_mam: true, use_memory_update: true }
    }
}

// ── parameter index ──────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub(crate) struct LstmIdx {
    pub w_x: usize,
    pub u_h: usize,
    pub b: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct CamIdx {
    pub wq: Vec<usize>,
    pub wk: Vec<usize>,
    pub wv: Vec<usize>,
    pub w_o: usize,
    pub b_o: usize,
    pub ln_gain: usize,
    pub ln_bias: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct LayerIdx {
    pub mem_cam: CamIdx,
    pub q_cam: CamIdx,
    pub w_a: usize,
    pub w_b: usize,
    pub w_c: usize,
    pub w_d: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct AnswerIdx {
    pub w_e: usize,
    pub b_e: usize,
    pub w_f: usize,
    pub b_f: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct DecIdx {
    pub w_g: usize,
    pub b_g: usize,
    pub lstm: LstmIdx,
    pub w_s: usize,
    pub w_h: usize,
    pub w_n: usize,
    pub w_v: usize,
    pub b_v: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct ModelIdx {
    pub embedding: usize,
    pub enc_ctx_f: LstmIdx,
    pub enc_ctx_b: LstmIdx,
    pub enc_q_f: LstmIdx,
    pub enc_q_b: LstmIdx,
    pub layers: Vec<LayerIdx>,
    pub word_mam: CamIdx,
    pub utt_mam: CamIdx,
    pub answer: AnswerIdx,
    pub dec: DecIdx,
}

enum Source<'a, F: Real> {
    Fresh(GaussianInit<'a>),
    Existing(&'a ParamSet<F>),
}

/// Builds parameters in a fixed order, either sampling fresh values or
/// pulling them (with shape validation) out of a loaded set.
struct Builder<'a, F: Real> {
    set: ParamSet<F>,
    source: Source<'a, F>,
    hidden: usize,
}

impl<'a, F: Real> Builder<'a, F> {
    fn tensor(&mut self, name: &str, shape: Vec<usize>, kind: InitKind) -> Result<usize> {
        let n: usize = shape.iter().product();
        let values = match &mut self.source {
            Source::Fresh(init) => match kind {
                InitKind::Gaussian => init.sample(n),
                InitKind::Ones => vec![F::one(); n],
                InitKind::Zeros => vec![F::zero(); n],
                InitKind::LstmBias => {
                    // Forget-gate slice starts at one hidden width.
                    let h = n / 4;
                    let mut v: Vec<F> = init.sample(n);
                    for x in v.iter_mut().skip(h).take(h) {
                        *x = F::one();
                    }
                    v
                }
            },
            Source::Existing(set) => {
                let p = set.by_name(name).ok_or_else(|| {
                    Error::Checkpoint(format!("missing parameter {name}"))
                })?;
                if p.shape != shape {
                    return Err(Error::Checkpoint(format!(
                        "parameter {name}: shape {:?} in file, {:?} expected",
                        p.shape, shape
                    )));
                }
                p.values.clone()
            }
        };
        Ok(self.set.add(name, shape, values))
    }

    fn lstm(&mut self, prefix: &str, input: usize, hid: usize) -> Result<LstmIdx> {
        Ok(LstmIdx {
            w_x: self.tensor(&format!("{prefix}.w_x"), vec![input, 4 * hid], InitKind::Gaussian)?,
            u_h: self.tensor(&format!("{prefix}.u_h"), vec![hid, 4 * hid], InitKind::Gaussian)?,
            b: self.tensor(&format!("{prefix}.b"), vec![4 * hid], InitKind::LstmBias)?,
        })
    }

    fn cam(&mut self, prefix: &str, heads: usize) -> Result<CamIdx> {
        let d = self.hidden;
        let dh = d / heads;
        let mut wq = Vec::new();
        let mut wk = Vec::new();
        let mut wv = Vec::new();
        for h in 0..heads {
            wq.push(self.tensor(&format!("{prefix}.h{h}.wq"), vec![d, dh], InitKind::Gaussian)?);
            wk.push(self.tensor(&format!("{prefix}.h{h}.wk"), vec![d, dh], InitKind::Gaussian)?);
            wv.push(self.tensor(&format!("{prefix}.h{h}.wv"), vec![d, dh], InitKind::Gaussian)?);
        }
        Ok(CamIdx {
            wq,
            wk,
            wv,
            w_o: self.tensor(&format!("{prefix}.w_o"), vec![d, d], InitKind::Gaussian)?,
            b_o: self.tensor(&format!("{prefix}.b_o"), vec![d], InitKind::Gaussian)?,
            ln_gain: self.tensor(&format!("{prefix}.ln_gain"), vec![d], InitKind::Ones)?,
            ln_bias: self.tensor(&format!("{prefix}.ln_bias"), vec![d], InitKind::Zeros)?,
        })
    }
}

// ── the model ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitKind {
    Gaussian,
    Ones,
    Zeros,
    LstmBias,
}

pub struct Mrg<F: Real> {
    pub config: ModelConfig,
    pub ablation: Ablation,
    pub params: ParamSet<F>,
    pub(crate) idx: ModelIdx,
}

impl<F: Real> Mrg<F> {
    fn build(config: ModelConfig, ablation: Ablation, source: Source<F>) -> Result<Self> {
        config.validate()?;
        let d = config.hidden;
        let h2 = d / 2;
        let mut b = Builder { set: ParamSet::new(), source, hidden: d };

        let embedding = b.tensor("embedding", vec![config.vocab_size, config.emb_dim], InitKind::Gaussian)?;
        let enc_ctx_f = b.lstm("enc_ctx.fwd", config.emb_dim, h2)?;
        let enc_ctx_b = b.lstm("enc_ctx.bwd", config.emb_dim, h2)?;
        let enc_q_f = b.lstm("enc_q.fwd", config.emb_dim, h2)?;
        let enc_q_b = b.lstm("enc_q.bwd", config.emb_dim, h2)?;

        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let mem_cam = b.cam(&format!("mcam.l{l}.mem_cam"), config.heads)?;
            let q_cam = b.cam(&format!("mcam.l{l}.q_cam"), config.heads)?;
            layers.push(LayerIdx {
                mem_cam,
                q_cam,
                w_a: b.tensor(&format!("mcam.l{l}.w_a"), vec![d, d], InitKind::Gaussian)?,
                w_b: b.tensor(&format!("mcam.l{l}.w_b"), vec![d, d], InitKind::Gaussian)?,
                w_c: b.tensor(&format!("mcam.l{l}.w_c"), vec![d, d], InitKind::Gaussian)?,
                w_d: b.tensor(&format!("mcam.l{l}.w_d"), vec![d, d], InitKind::Gaussian)?,
            });
        }

        let word_mam = b.cam("word_mam", config.heads)?;
        // Utterance-level attention runs over at most a handful of vectors;
        // one head is enough.
        let utt_mam = b.cam("utt_mam", 1)?;

        let concat_width = (config.window.max_utterances + 1) * d;
        let answer = AnswerIdx {
            w_e: b.tensor("answer.w_e", vec![concat_width, d], InitKind::Gaussian)?,
            b_e: b.tensor("answer.b_e", vec![d], InitKind::Gaussian)?,
            w_f: b.tensor("answer.w_f", vec![d, config.window.capacity()], InitKind::Gaussian)?,
            b_f: b.tensor("answer.b_f", vec![config.window.capacity()], InitKind::Gaussian)?,
        };

        let dec = DecIdx {
            w_g: b.tensor("dec.w_g", vec![d, d], InitKind::Gaussian)?,
            b_g: b.tensor("dec.b_g", vec![d], InitKind::Gaussian)?,
            lstm: b.lstm("dec.lstm", d + config.emb_dim, d)?,
            w_s: b.tensor("dec.attn.w_s", vec![d, d], InitKind::Gaussian)?,
            w_h: b.tensor("dec.attn.w_h", vec![d, d], InitKind::Gaussian)?,
            w_n: b.tensor("dec.attn.w_n", vec![d, 1], InitKind::Gaussian)?,
            w_v: b.tensor("dec.w_v", vec![2 * d, config.vocab_size], InitKind::Gaussian)?,
            b_v: b.tensor("dec.b_v", vec![config.vocab_size], InitKind::Gaussian)?,
        };

        Ok(Mrg {
            config,
            ablation,
            params: b.set,
            idx: ModelIdx {
                embedding,
                enc_ctx_f,
                enc_ctx_b,
                enc_q_f,
                enc_q_b,
                layers,
                word_mam,
                utt_mam,
                answer,
                dec,
            },
        })
    }

    /// Fresh Gaussian-initialized model; identical seeds give identical
    /// parameters regardless of ablation or task mode.
    pub fn init(config: ModelConfig, ablation: Ablation, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let init = GaussianInit::new(&mut rng, config.init_std);
        Self::build(config, ablation, Source::Fresh(init))
    }

    /// Rebuilds a model around an existing parameter set, validating every
    /// name and shape.
    pub fn from_params(config: ModelConfig, ablation: Ablation, set: &ParamSet<F>) -> Result<Self> {
        Self::build(config, ablation, Source::Existing(set))
    }

    /// Registers every parameter as a tape leaf; pass `trainable == false`
    /// for inference so backward skips the whole graph.
    pub fn register(&self, tape: &mut Tape<F>, trainable: bool) -> Result<Vec<TensorId>> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.values.clone(), p.shape.clone(), trainable))
            .collect()
    }
}

// ── forward context ──────────────────────────────────────────────────

/// Attention distributions and memory gates recorded during a traced
/// forward pass, for invariant checks.
#[derive(Debug, Default)]
pub struct Trace {
    /// (label, tensor) where each tensor holds row-stochastic attention.
    pub attentions: Vec<(String, TensorId)>,
    /// Memory updater internals per (layer, utterance): candidate c, gate z,
    /// previous m, blended n.
    pub memory_gates: Vec<GateTrace>,
    /// Decoder output distributions, one [1, V] row per step.
    pub output_dists: Vec<TensorId>,
}

#[derive(Debug, Clone, Copy)]
pub struct GateTrace {
    pub c: TensorId,
    pub z: TensorId,
    pub m: TensorId,
    pub n: TensorId,
}

/// Everything one forward pass needs. Submodule methods hang off this.
pub(crate) struct Fw<'a, F: Real> {
    pub tape: &'a mut Tape<F>,
    pub leaves: &'a [TensorId],
    pub config: &'a ModelConfig,
    pub ablation: Ablation,
    pub idx: &'a ModelIdx,
    pub trace: Option<&'a mut Trace>,
}

impl<'a, F: Real> Fw<'a, F> {
    pub fn trace_attention(&mut self, label: String, alpha: TensorId) {
        if let Some(t) = self.trace.as_deref_mut() {
            t.attentions.push((label, alpha));
        }
    }
}

/// Encoder-side outputs shared by the answer selector and the decoder.
pub struct Encoded {
    /// Utterance representations, one row per real utterance [n_u, d].
    pub utt_reps: TensorId,
    /// Dialog vector [1, d].
    pub h_d: TensorId,
    /// Question Bi-LSTM states [n_q, d].
    pub q_states: TensorId,
    pub n_utt: usize,
    pub q_len: usize,
}

/// Teacher-forced per-example outputs.
pub struct ExampleForward {
    pub encoded: Encoded,
    /// Sum of -log P(y_t) over response tokens + eos (scalar tensor).
    pub nll_sum: TensorId,
    pub n_target_tokens: usize,
    /// Masked mean BCE over context positions (scalar tensor).
    pub answer_loss: TensorId,
    /// Raw answer logits [capacity].
    pub answer_logits: TensorId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMode {
    Joint,
    ResponseOnly,
    AnswerOnly,
}

impl std::str::FromStr for TaskMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(TaskMode::Joint),
            "response_only" => Ok(TaskMode::ResponseOnly),
            "answer_only" => Ok(TaskMode::AnswerOnly),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for TaskMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TaskMode::Joint => "joint",
            TaskMode::ResponseOnly => "response_only",
            TaskMode::AnswerOnly => "answer_only",
        })
    }
}

impl<F: Real> Mrg<F> {
    pub(crate) fn fw<'a>(
        &'a self,
        tape: &'a mut Tape<F>,
        leaves: &'a [TensorId],
        trace: Option<&'a mut Trace>,
    ) -> Fw<'a, F> {
        Fw {
            tape,
            leaves,
            config: &self.config,
            ablation: self.ablation,
            idx: &self.idx,
            trace,
        }
    }

    /// Runs the shared encoder over one example's context and question.
    pub fn encode(
        &self,
        tape: &mut Tape<F>,
        leaves: &[TensorId],
        ex: &DialogExample,
        trace: Option<&mut Trace>,
    ) -> Result<Encoded> {
        let mut fw = self.fw(tape, leaves, trace);
        fw.encode_example(ex)
    }

    /// Teacher-forced forward pass producing both task losses.
    pub fn forward_example(
        &self,
        tape: &mut Tape<F>,
        leaves: &[TensorId],
        ex: &DialogExample,
        mut trace: Option<&mut Trace>,
    ) -> Result<ExampleForward> {
        let encoded = {
            let mut fw = self.fw(tape, leaves, trace.as_deref_mut());
            fw.encode_example(ex)?
        };
        let (answer_logits, answer_loss) = {
            let mut fw = self.fw(tape, leaves, trace.as_deref_mut());
            fw.answer_scores(&encoded, ex)?
        };
        let (nll_sum, n_target_tokens) = {
            let mut fw = self.fw(tape, leaves, trace.as_deref_mut());
            fw.teacher_forced_nll(&encoded, &ex.response)?
        };
        Ok(ExampleForward {
            encoded,
            nll_sum,
            n_target_tokens,
            answer_loss,
            answer_logits,
        })
    }

    /// Mean joint loss over a batch. The generation term is the batch mean
    /// of per-example summed NLL; the answer term is the batch mean of
    /// per-example masked-mean BCE, weighted by `lambda`. Single-task modes
    /// build only their own head, so the other head's parameters receive no
    /// gradient at all.
    pub fn batch_loss(
        &self,
        tape: &mut Tape<F>,
        leaves: &[TensorId],
        batch: &[&DialogExample],
        mode: TaskMode,
        lambda: f64,
    ) -> Result<BatchLoss> {
        if batch.is_empty() {
            return Err(Error::Config("batch_loss: empty batch".into()));
        }
        let mut nll_terms = Vec::new();
        let mut bce_terms = Vec::new();
        let mut total_targets = 0usize;
        for ex in batch {
            let encoded = {
                let mut fw = self.fw(tape, leaves, None);
                fw.encode_example(ex)?
            };
            if mode != TaskMode::AnswerOnly {
                let mut fw = self.fw(tape, leaves, None);
                let (nll, n) = fw.teacher_forced_nll(&encoded, &ex.response)?;
                nll_terms.push(nll);
                total_targets += n;
            }
            if mode != TaskMode::ResponseOnly {
                let mut fw = self.fw(tape, leaves, None);
                let (_, bce) = fw.answer_scores(&encoded, ex)?;
                bce_terms.push(bce);
            }
        }
        let inv_b = 1.0 / batch.len() as f64;
        let sum_terms = |terms: &[TensorId], tape: &mut Tape<F>| -> Result<Option<TensorId>> {
            if terms.is_empty() {
                return Ok(None);
            }
            let mut acc = terms[0];
            for &t in &terms[1..] {
                acc = tape.add(acc, t)?;
            }
            Ok(Some(tape.scale(acc, inv_b)))
        };
        let gen_mean = sum_terms(&nll_terms, tape)?;
        let ans_mean = sum_terms(&bce_terms, tape)?;
        let total = match (gen_mean, ans_mean) {
            (Some(g), Some(a)) => {
                let weighted = tape.scale(a, lambda);
                tape.add(g, weighted)?
            }
            (Some(g), None) => g,
            (None, Some(a)) => tape.scale(a, lambda),
            (None, None) => unreachable!("batch is non-empty"),
        };
        Ok(BatchLoss {
            total,
            gen_loss: gen_mean.map(|t| tape.values(t)[0].as_f64()),
            answer_loss: ans_mean.map(|t| tape.values(t)[0].as_f64()),
            total_value: tape.values(total)[0].as_f64(),
            n_target_tokens: total_targets,
        })
    }
}

pub struct BatchLoss {
    pub total: TensorId,
    pub gen_loss: Option<f64>,
    pub answer_loss: Option<f64>,
    pub total_value: f64,
    pub n_target_tokens: usize,
}

//! Joint training: Adagrad with value clipping, best-validation checkpoint
//! selection, and deterministic batching.
//!
//! Everything is a pure function of (config, corpus bytes): parameter
//! initialization, shuffling, and gradient accumulation all run in fixed
//! order off seeded generators, so identical seeds give bit-identical
//! checkpoints.

use crate::data::{DialogExample, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{extract_answer_set, Ablation, ModelConfig, Mrg, TaskMode, EXTRACT_THRESHOLD};
use crate::params::{Checkpoint, ParamSet};
use crate::tensor::{Real, Tape};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const ADAGRAD_EPS: f64 = 1e-8;

/// Full training configuration; the defaults mirror the reference setup
/// (batch 16, embedding 128, hidden 256, clip [-2, 2], vocabulary cap 50k,
/// beam 4 decoding bounded to [10, 20] steps).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub vocab_cap: usize,
    pub emb_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub clip: f64,
    pub lr: f64,
    pub adagrad_init_acc: f64,
    pub lambda_answer: f64,
    pub mode: TaskMode,
    pub seed: u64,
    pub init_std: f64,
    pub max_steps: usize,
    pub eval_every: usize,
    pub max_utterances: usize,
    pub tokens_per_utterance: usize,
    pub max_response_len: usize,
    pub beam: usize,
    pub min_decode: usize,
    pub max_decode: usize,
    pub char_level: bool,
    pub use_mcam: bool,
    pub use_mam: bool,
    pub use_memory_update: bool,
    /// Optional early stop: end training once the train-set per-token NLL
    /// and answer exact-match both reach their targets.
    pub target_train_nll: Option<f64>,
    pub target_train_em: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            vocab_cap: 50_000,
            emb_dim: 128,
            hidden: 256,
            layers: 2,
            heads: 4,
            clip: 2.0,
            lr: 0.15,
            adagrad_init_acc: 0.1,
            lambda_answer: 1.0,
            mode: TaskMode::Joint,
            seed: 0,
            init_std: 0.1,
            max_steps: 1000,
            eval_every: 100,
            max_utterances: 5,
            tokens_per_utterance: 20,
            max_response_len: 20,
            beam: 4,
            min_decode: 10,
            max_decode: 20,
            char_level: false,
            use_mcam: true,
            use_mam: true,
            use_memory_update: true,
            target_train_nll: None,
            target_train_em: None,
        }
    }
}

impl TrainConfig {
    pub fn window(&self) -> crate::data::ContextWindow {
        crate::data::ContextWindow {
            max_utterances: self.max_utterances,
            tokens_per_utterance: self.tokens_per_utterance,
            max_response_len: self.max_response_len,
        }
    }

    pub fn ablation(&self) -> Ablation {
        Ablation {
            use_mcam: self.use_mcam,
            use_mam: self.use_mam,
            use_memory_update: self.use_memory_update,
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            emb_dim: self.emb_dim,
            hidden: self.hidden,
            layers: self.layers,
            heads: self.heads,
            window: self.window(),
            init_std: self.init_std,
        }
    }

    pub fn tokenization(&self) -> crate::data::Tokenization {
        if self.char_level {
            crate::data::Tokenization::Char
        } else {
            crate::data::Tokenization::Whitespace
        }
    }

    pub fn beam_params(&self) -> crate::model::BeamParams {
        crate::model::BeamParams {
            beam: self.beam,
            min_len: self.min_decode,
            max_len: self.max_decode,
        }
    }

    /// Applies one `key = value` override; both the config file and CLI
    /// flags funnel through here.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |k: &str, v: &str| Error::Config(format!("bad value `{v}` for key `{k}`"));
        macro_rules! parse {
            ($field:expr, $ty:ty) => {{
                $field = value.parse::<$ty>().map_err(|_| bad(key, value))?;
            }};
        }
        match key {
            "batch_size" => parse!(self.batch_size, usize),
            "vocab_cap" => parse!(self.vocab_cap, usize),
            "emb_dim" => parse!(self.emb_dim, usize),
            "hidden" => parse!(self.hidden, usize),
            "layers" => parse!(self.layers, usize),
            "heads" => parse!(self.heads, usize),
            "clip" => parse!(self.clip, f64),
            "lr" => parse!(self.lr, f64),
            "adagrad_init_acc" => parse!(self.adagrad_init_acc, f64),
            "lambda_answer" => parse!(self.lambda_answer, f64),
            "mode" => self.mode = value.parse()?,
            "seed" => parse!(self.seed, u64),
            "init_std" => parse!(self.init_std, f64),
            "max_steps" => parse!(self.max_steps, usize),
            "eval_every" => parse!(self.eval_every, usize),
            "max_utterances" => parse!(self.max_utterances, usize),
            "tokens_per_utterance" => parse!(self.tokens_per_utterance, usize),
            "max_response_len" => parse!(self.max_response_len, usize),
            "beam" => parse!(self.beam, usize),
            "min_decode" => parse!(self.min_decode, usize),
            "max_decode" => parse!(self.max_decode, usize),
            "char_level" => parse!(self.char_level, bool),
            "use_mcam" => parse!(self.use_mcam, bool),
            "use_mam" => parse!(self.use_mam, bool),
            "use_memory_update" => parse!(self.use_memory_update, bool),
            "target_train_nll" => self.target_train_nll = Some(value.parse().map_err(|_| bad(key, value))?),
            "target_train_em" => self.target_train_em = Some(value.parse().map_err(|_| bad(key, value))?),
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Parses a flat `key = value` file with `#` comments.
    pub fn apply_file(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("config line {}: expected `key = value`", i + 1))
            })?;
            self.apply_kv(k.trim(), v.trim())?;
        }
        Ok(())
    }
}

// ── optimizer ────────────────────────────────────────────────────────

/// Adagrad with elementwise value clipping applied before the accumulator
/// update: g <- clamp(g, [-clip, clip]); acc += g^2;
/// theta -= lr * g / (sqrt(acc) + 1e-8).
pub struct Adagrad<F> {
    pub lr: f64,
    pub clip: f64,
    acc: Vec<Vec<F>>,
}

impl<F: Real> Adagrad<F> {
    pub fn new(params: &ParamSet<F>, lr: f64, clip: f64, init_acc: f64) -> Self {
        let acc = params
            .iter()
            .map(|p| vec![F::from_f64(init_acc); p.values.len()])
            .collect();
        Adagrad { lr, clip, acc }
    }

    pub fn accumulators(&self) -> &[Vec<F>] {
        &self.acc
    }

    pub fn set_accumulators(&mut self, acc: Vec<Vec<F>>) {
        self.acc = acc;
    }

    /// One update over every parameter; `grads` runs parallel to the
    /// parameter set, `None` meaning the tensor was off the loss path.
    pub fn step(&mut self, params: &mut ParamSet<F>, grads: &[Option<&[F]>]) -> Result<()> {
        let lr = F::from_f64(self.lr);
        let clip = F::from_f64(self.clip);
        let eps = F::from_f64(ADAGRAD_EPS);
        for (slot, grad) in grads.iter().enumerate() {
            let Some(grad) = grad else { continue };
            let name = params.get(slot).name.clone();
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGrad(name));
            }
            let acc = &mut self.acc[slot];
            let values = &mut params.get_mut(slot).values;
            for ((v, a), &g) in values.iter_mut().zip(acc.iter_mut()).zip(grad.iter()) {
                let g = g.min(clip).max(-clip);
                *a += g * g;
                *v = *v - lr * g / (a.sqrt() + eps);
            }
        }
        Ok(())
    }
}

// ── training loop ────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub train_config: TrainConfig,
    pub model_config: ModelConfig,
    pub step: usize,
    pub validation_loss: f64,
    pub vocab: Vec<String>,
}

pub struct TrainOutcome<F: Real> {
    /// Model holding the best-validation parameters.
    pub model: Mrg<F>,
    pub best_step: usize,
    pub best_val_loss: f64,
    pub steps_run: usize,
    pub history: Vec<EvalPoint>,
    pub stopped_early: bool,
    /// Accumulators matching the best parameters.
    pub accumulators: Vec<Vec<F>>,
    pub meta: CheckpointMeta,
}

impl<F: Real> TrainOutcome<F> {
    /// Packs parameters + optimizer accumulators + metadata into one
    /// checkpoint archive.
    pub fn checkpoint(&self) -> Result<Checkpoint<F>> {
        let mut tensors = ParamSet::new();
        for p in self.model.params.iter() {
            tensors.add(&p.name, p.shape.clone(), p.values.clone());
        }
        for (slot, acc) in self.accumulators.iter().enumerate() {
            let p = self.model.params.get(slot);
            tensors.add(&format!("adagrad_acc/{}", p.name), p.shape.clone(), acc.clone());
        }
        Ok(Checkpoint {
            tensors,
            meta_json: serde_json::to_string(&self.meta)?,
        })
    }
}

/// Restores a model (and optionally its accumulators) from a checkpoint.
pub fn model_from_checkpoint<F: Real>(ckpt: &Checkpoint<F>) -> Result<(Mrg<F>, CheckpointMeta, Vocabulary)> {
    let meta: CheckpointMeta = serde_json::from_str(&ckpt.meta_json)
        .map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
    let mut params = ParamSet::new();
    for p in ckpt.tensors.iter() {
        if !p.name.starts_with("adagrad_acc/") {
            params.add(&p.name, p.shape.clone(), p.values.clone());
        }
    }
    let model = Mrg::from_params(meta.model_config.clone(), meta.train_config.ablation(), &params)?;
    let vocab = Vocabulary::from_token_list(meta.vocab.clone())?;
    Ok((model, meta, vocab))
}

/// Teacher-forced corpus diagnostics: per-token NLL, answer exact match,
/// and answer F1 means.
pub fn corpus_teacher_metrics<F: Real>(
    model: &Mrg<F>,
    examples: &[DialogExample],
) -> Result<(f64, f64, f64)> {
    let window = model.config.window;
    let mut nll_sum = 0.0;
    let mut tokens = 0usize;
    let mut em_sum = 0.0;
    let mut f1_sum = 0.0;
    for ex in examples {
        let mut tape = Tape::new();
        let leaves = model.register(&mut tape, false)?;
        let out = model.forward_example(&mut tape, &leaves, ex, None)?;
        nll_sum += tape.values(out.nll_sum)[0].as_f64();
        tokens += out.n_target_tokens;
        let logits: Vec<f64> = tape.values(out.answer_logits).iter().map(|v| v.as_f64()).collect();
        let predicted = extract_answer_set(&logits, &ex.position_grid(&window), EXTRACT_THRESHOLD);
        let gold = ex.gold_answer_set(&window);
        let (em, f1) = crate::metrics::answer_metrics(&predicted, &gold);
        em_sum += em;
        f1_sum += f1;
    }
    let n = examples.len().max(1) as f64;
    Ok((nll_sum / tokens.max(1) as f64, em_sum / n, f1_sum / n))
}

/// Mean joint loss over a corpus at the configured task mode.
fn corpus_loss<F: Real>(
    model: &Mrg<F>,
    examples: &[DialogExample],
    mode: TaskMode,
    lambda: f64,
    batch: usize,
) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for chunk in examples.chunks(batch.max(1)) {
        let refs: Vec<&DialogExample> = chunk.iter().collect();
        let mut tape = Tape::new();
        let leaves = model.register(&mut tape, false)?;
        let loss = model.batch_loss(&mut tape, &leaves, &refs, mode, lambda)?;
        total += loss.total_value * chunk.len() as f64;
        n += chunk.len();
    }
    Ok(total / n.max(1) as f64)
}

/// Runs the full training loop and returns the best-validation outcome.
pub fn train_loop<F: Real>(
    cfg: &TrainConfig,
    train: &[DialogExample],
    val: &[DialogExample],
    vocab: &Vocabulary,
) -> Result<TrainOutcome<F>> {
    if train.is_empty() {
        return Err(Error::Config("training corpus is empty".into()));
    }
    if val.is_empty() {
        return Err(Error::Config("validation corpus is empty".into()));
    }
    let model_config = cfg.model_config(vocab.len());
    let mut model: Mrg<F> = Mrg::init(model_config.clone(), cfg.ablation(), cfg.seed)?;
    let mut optimizer = Adagrad::new(&model.params, cfg.lr, cfg.clip, cfg.adagrad_init_acc);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1));

    let mut history = Vec::new();
    let mut best_params = model.params.clone();
    let mut best_acc: Vec<Vec<F>> = optimizer.accumulators().to_vec();
    let mut best_val = corpus_loss(&model, val, cfg.mode, cfg.lambda_answer, cfg.batch_size)?;
    let mut best_step = 0usize;
    history.push(EvalPoint { step: 0, train_loss: f64::NAN, val_loss: best_val });

    let mut step = 0usize;
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut last_train_loss;

    'outer: while step < cfg.max_steps {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            if step >= cfg.max_steps {
                break 'outer;
            }
            let batch: Vec<&DialogExample> = chunk.iter().map(|&i| &train[i]).collect();
            let mut tape = Tape::new();
            let leaves = model.register(&mut tape, true)?;
            let loss = model.batch_loss(&mut tape, &leaves, &batch, cfg.mode, cfg.lambda_answer)?;
            tape.backward(loss.total)?;
            let grads: Vec<Option<&[F]>> = leaves.iter().map(|&id| tape.grad(id)).collect();
            optimizer.step(&mut model.params, &grads)?;
            last_train_loss = loss.total_value;
            step += 1;

            let interval_hit = cfg.eval_every > 0 && step % cfg.eval_every == 0;
            if interval_hit || step == cfg.max_steps {
                let val_loss = corpus_loss(&model, val, cfg.mode, cfg.lambda_answer, cfg.batch_size)?;
                history.push(EvalPoint { step, train_loss: last_train_loss, val_loss });
                if val_loss < best_val {
                    best_val = val_loss;
                    best_step = step;
                    best_params = model.params.clone();
                    best_acc = optimizer.accumulators().to_vec();
                }
                if let (Some(t_nll), Some(t_em)) = (cfg.target_train_nll, cfg.target_train_em) {
                    let (nll, em, _) = corpus_teacher_metrics(&model, train)?;
                    if nll < t_nll && em >= t_em {
                        // Early-stopped runs keep the final weights; they
                        // are the ones that met the target.
                        best_val = val_loss;
                        best_step = step;
                        best_params = model.params.clone();
                        best_acc = optimizer.accumulators().to_vec();
                        stopped_early = true;
                        break 'outer;
                    }
                }
            }
        }
    }

    let meta = CheckpointMeta {
        format_version: 1,
        train_config: cfg.clone(),
        model_config: model_config.clone(),
        step: best_step,
        validation_loss: best_val,
        vocab: vocab.tokens().to_vec(),
    };
    let best_model = Mrg::from_params(model_config, cfg.ablation(), &best_params)?;
    Ok(TrainOutcome {
        model: best_model,
        best_step,
        best_val_loss: best_val,
        steps_run: step,
        history,
        stopped_early,
        accumulators: best_acc,
        meta,
    })
}

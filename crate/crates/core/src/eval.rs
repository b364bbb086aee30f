//! Corpus evaluation and batch generation.
//!
//! Evaluation decodes every example with beam search, scores BLEU-1..4
//! (smoothing 7) and the bag-of-words embedding metrics against the gold
//! response, and scores the answer head by exact match and F1 of the
//! extracted token set. The embedding metrics default to the trained
//! embedding matrix; an external embedding file may replace it.

use crate::data::{DialogExample, Vocabulary, RESERVED};
use crate::error::Result;
use crate::metrics::{answer_metrics, bleu, bow_metrics, corpus_bleu, BowEmbeddings, EvalReport, ExampleEval};
use crate::model::{extract_answer_set, BeamParams, Mrg, EXTRACT_THRESHOLD};
use crate::tensor::{Real, Tape};
use serde::{Deserialize, Serialize};

/// Bag-of-words table from the trained embedding matrix (reserved tokens
/// excluded).
pub fn embeddings_from_model<F: Real>(model: &Mrg<F>, vocab: &Vocabulary) -> BowEmbeddings {
    let table = model.params.by_name("embedding").expect("embedding parameter");
    let dim = model.config.emb_dim;
    let mut emb = BowEmbeddings::new(dim);
    for (id, token) in vocab.tokens().iter().enumerate() {
        if id < RESERVED.len() {
            continue;
        }
        let row = table.values[id * dim..(id + 1) * dim]
            .iter()
            .map(|v| v.as_f64())
            .collect();
        emb.insert(token, row);
    }
    emb
}

fn ids_to_tokens(ids: &[u32], vocab: &Vocabulary) -> Vec<String> {
    ids.iter().map(|&id| vocab.token(id).to_string()).collect()
}

/// Decodes one example and returns (hypothesis tokens, predicted answer
/// grid indices).
pub fn decode_example<F: Real>(
    model: &Mrg<F>,
    vocab: &Vocabulary,
    ex: &DialogExample,
    beam: &BeamParams,
) -> Result<(Vec<String>, Vec<usize>)> {
    let mut tape = Tape::new();
    let leaves = model.register(&mut tape, false)?;
    let encoded = model.encode(&mut tape, &leaves, ex, None)?;
    let logits = {
        let mut fw = model.fw(&mut tape, &leaves, None);
        fw.answer_logits(&encoded)?
    };
    let logit_vals: Vec<f64> = tape.values(logits).iter().map(|v| v.as_f64()).collect();
    let predicted = extract_answer_set(
        &logit_vals,
        &ex.position_grid(&model.config.window),
        EXTRACT_THRESHOLD,
    );
    let hyp = {
        let mut dec = crate::model::MrgDecoder {
            model,
            tape: &mut tape,
            leaves: &leaves,
            encoded: &encoded,
        };
        crate::model::beam_search(&mut dec, beam)?
    };
    Ok((ids_to_tokens(&hyp.tokens, vocab), predicted))
}

/// Full evaluation over a corpus.
pub fn evaluate_corpus<F: Real>(
    model: &Mrg<F>,
    vocab: &Vocabulary,
    examples: &[DialogExample],
    beam: &BeamParams,
    embeddings: &BowEmbeddings,
    with_corpus_bleu: bool,
) -> Result<EvalReport> {
    let window = model.config.window;
    let mut per_example = Vec::with_capacity(examples.len());
    let mut pairs: Vec<(Vec<String>, Vec<String>)> = Vec::new();
    for ex in examples {
        let (hyp, predicted) = decode_example(model, vocab, ex, beam)?;
        let reference = &ex.response_tokens;
        let b1 = bleu(&hyp, reference, 1).score;
        let b2 = bleu(&hyp, reference, 2).score;
        let b3 = bleu(&hyp, reference, 3).score;
        let b4 = bleu(&hyp, reference, 4).score;
        let bow = bow_metrics(&hyp, reference, embeddings);
        let gold = ex.gold_answer_set(&window);
        let (em, f1) = answer_metrics(&predicted, &gold);
        per_example.push(ExampleEval {
            bleu1: b1,
            bleu2: b2,
            bleu3: b3,
            bleu4: b4,
            bow_average: bow.map(|(a, _, _)| a),
            bow_extrema: bow.map(|(_, x, _)| x),
            bow_greedy: bow.map(|(_, _, g)| g),
            answer_exact_match: em,
            answer_f1: f1,
            hypothesis: hyp.join(" "),
            reference: reference.join(" "),
        });
        pairs.push((hyp, reference.clone()));
    }
    let cb = if with_corpus_bleu {
        let borrowed: Vec<(&[String], &[String])> =
            pairs.iter().map(|(h, r)| (h.as_slice(), r.as_slice())).collect();
        Some(corpus_bleu(&borrowed, 4))
    } else {
        None
    };
    Ok(EvalReport::from_examples(per_example, cb))
}

/// One decoded record of the batch-generation output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratedRecord {
    pub utterances: Vec<String>,
    pub question: String,
    pub generated_response: String,
    pub predicted_answer_indices: Vec<usize>,
    pub predicted_answer_tokens: Vec<String>,
    pub gold_response: String,
}

/// Batch decode into serializable records.
pub fn generate_corpus<F: Real>(
    model: &Mrg<F>,
    vocab: &Vocabulary,
    examples: &[DialogExample],
    beam: &BeamParams,
) -> Result<Vec<GeneratedRecord>> {
    let tok_per_utt = model.config.window.tokens_per_utterance;
    examples
        .iter()
        .map(|ex| {
            let (hyp, predicted) = decode_example(model, vocab, ex, beam)?;
            let predicted_tokens = predicted
                .iter()
                .filter_map(|&grid| {
                    let j = grid / tok_per_utt;
                    let o = grid % tok_per_utt;
                    ex.utterance_tokens.get(j).and_then(|u| u.get(o)).cloned()
                })
                .collect();
            Ok(GeneratedRecord {
                utterances: ex.utterance_tokens.iter().map(|u| u.join(" ")).collect(),
                question: ex.question_tokens.join(" "),
                generated_response: hyp.join(" "),
                predicted_answer_indices: predicted,
                predicted_answer_tokens: predicted_tokens,
                gold_response: ex.response_tokens.join(" "),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_vocab, preprocess, ContextWindow, Tokenization};
    use crate::model::{Ablation, ModelConfig};
    use crate::synth::{synth_generate, SynthConfig};

    fn setup() -> (Mrg<f32>, Vocabulary, Vec<DialogExample>) {
        let records = synth_generate(5, 6, &SynthConfig::default()).unwrap();
        let vocab = build_vocab(&records, Tokenization::Whitespace, 100);
        let window = ContextWindow { max_utterances: 5, tokens_per_utterance: 20, max_response_len: 20 };
        let examples: Vec<DialogExample> = records
            .iter()
            .enumerate()
            .map(|(i, r)| preprocess(r, &vocab, &window, Tokenization::Whitespace, i + 1).unwrap())
            .collect();
        let cfg = ModelConfig {
            vocab_size: vocab.len(),
            emb_dim: 8,
            hidden: 8,
            layers: 1,
            heads: 2,
            window,
            init_std: 0.1,
        };
        let model = Mrg::init(cfg, Ablation::default(), 13).unwrap();
        (model, vocab, examples)
    }

    #[test]
    fn evaluation_is_deterministic_and_bounded() {
        let (model, vocab, examples) = setup();
        let beam = BeamParams { beam: 2, min_len: 2, max_len: 6 };
        let emb = embeddings_from_model(&model, &vocab);
        let a = evaluate_corpus(&model, &vocab, &examples, &beam, &emb, true).unwrap();
        let b = evaluate_corpus(&model, &vocab, &examples, &beam, &emb, true).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let m = &a.means;
        for v in [m.bleu1, m.bleu2, m.bleu3, m.bleu4, m.bow_average, m.bow_extrema, m.bow_greedy, m.answer_exact_match, m.answer_f1] {
            assert!((0.0..=1.0).contains(&v), "metric out of range: {v}");
        }
        assert_eq!(a.per_example.len(), examples.len());
    }

    #[test]
    fn generation_produces_full_records() {
        let (model, vocab, examples) = setup();
        let beam = BeamParams { beam: 2, min_len: 2, max_len: 6 };
        let records = generate_corpus(&model, &vocab, &examples, &beam).unwrap();
        assert_eq!(records.len(), examples.len());
        for r in &records {
            assert!(!r.generated_response.is_empty());
            assert!(!r.utterances.is_empty());
        }
    }
}

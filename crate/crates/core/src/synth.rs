//! Synthetic dialog corpus generator.
//!
//! Every example plants a nameable entity in the first utterance, leaves it
//! out of the final utterance, asks a templated question about the omitted
//! thing, marks exactly the entity token as the gold answer, and reuses the
//! entity in the gold response. Three template families stand in for the
//! three reasoning patterns (paraphrase / lexical match / pragmatics) with
//! a configurable mixture. Output is a pure function of (seed, config).

use crate::data::RawRecord;
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ENTITY_POOL: [&str; 12] = [
    "tiger", "garden", "violin", "rocket", "castle", "pancake", "lantern", "bicycle", "island",
    "engine", "puzzle", "mirror",
];

const OPENERS: [&str; 4] = ["oh", "hey", "hmm", "right"];
const CLOSERS: [&str; 4] = ["friend", "today", "indeed", "again"];

#[derive(Debug, Clone)]
pub struct SynthConfig {
    /// How many distinct entities to draw from (at most the pool size).
    pub n_entities: usize,
    /// Mixture weights of the three template families.
    pub family_weights: [f64; 3],
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_entities: ENTITY_POOL.len(),
            // Reported proportions of the three reasoning patterns.
            family_weights: [0.49, 0.285, 0.225],
        }
    }
}

struct Template {
    utterances: [&'static str; 3],
    question: &'static str,
    response: &'static str,
    /// Flat position of the entity token in the first utterance.
    answer_index: usize,
}

const FAMILIES: [Template; 3] = [
    // Paraphrasing: the question restates the final utterance.
    Template {
        utterances: [
            "i saw the {E} at the market today",
            "{O} tell me more",
            "it was so lovely",
        ],
        question: "what was so lovely",
        response: "the {E} was so lovely and i want it {C}",
        answer_index: 3,
    },
    // Lexical match: the question repeats words from the context.
    Template {
        utterances: [
            "my favorite is the {E}",
            "{O} why do you like it",
            "because it makes me happy",
        ],
        question: "what is my favorite",
        response: "the {E} is my favorite because it makes me happy {C}",
        answer_index: 4,
    },
    // Pragmatics: the question asks about an implied plan.
    Template {
        utterances: [
            "we could visit the {E} soon",
            "{O} that might be fun",
            "then we should plan it",
        ],
        question: "what should we plan to visit",
        response: "we should plan to visit the {E} very soon {C}",
        answer_index: 4,
    },
];

fn fill(template: &str, entity: &str, opener: &str, closer: &str) -> String {
    template
        .replace("{E}", entity)
        .replace("{O}", opener)
        .replace("{C}", closer)
}

/// Generates `n_examples` deterministic records.
pub fn synth_generate(seed: u64, n_examples: usize, config: &SynthConfig) -> Result<Vec<RawRecord>> {
    if n_examples == 0 {
        return Err(Error::Config("n_examples must be at least 1".into()));
    }
    if config.n_entities == 0 || config.n_entities > ENTITY_POOL.len() {
        return Err(Error::Config(format!(
            "entity pool holds {} entities, {} requested",
            ENTITY_POOL.len(),
            config.n_entities
        )));
    }
    let wsum: f64 = config.family_weights.iter().sum();
    if !(wsum > 0.0) || config.family_weights.iter().any(|&w| w < 0.0) {
        return Err(Error::Config("family weights must be non-negative and not all zero".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n_examples);
    for _ in 0..n_examples {
        let draw: f64 = rng.gen::<f64>() * wsum;
        let mut family = 0;
        let mut acc = 0.0;
        for (i, &w) in config.family_weights.iter().enumerate() {
            acc += w;
            if draw < acc {
                family = i;
                break;
            }
        }
        let t = &FAMILIES[family];
        let entity = ENTITY_POOL[rng.gen_range(0..config.n_entities)];
        let opener = OPENERS[rng.gen_range(0..OPENERS.len())];
        let closer = CLOSERS[rng.gen_range(0..CLOSERS.len())];

        records.push(RawRecord {
            utterances: t
                .utterances
                .iter()
                .map(|u| fill(u, entity, opener, closer))
                .collect(),
            question: fill(t.question, entity, opener, closer),
            answer_token_indices: vec![t.answer_index],
            response: fill(t.response, entity, opener, closer),
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_vocab, tokenize, Tokenization};

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig::default();
        let a = synth_generate(1, 8, &cfg).unwrap();
        let b = synth_generate(1, 8, &cfg).unwrap();
        assert_eq!(a, b);
        let c = synth_generate(2, 8, &cfg).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn every_answer_mask_nonempty_and_marks_the_entity() {
        let cfg = SynthConfig::default();
        let records = synth_generate(7, 200, &cfg).unwrap();
        for rec in &records {
            assert!(!rec.answer_token_indices.is_empty());
            let flat: Vec<String> = rec
                .utterances
                .iter()
                .flat_map(|u| tokenize(u, Tokenization::Whitespace))
                .collect();
            for &idx in &rec.answer_token_indices {
                let tok = &flat[idx];
                assert!(ENTITY_POOL.contains(&tok.as_str()), "index {idx} marks {tok}");
                // The entity is omitted from the final utterance.
                assert!(!rec.utterances.last().unwrap().contains(tok.as_str()));
            }
        }
    }

    #[test]
    fn gold_answer_tokens_appear_in_response() {
        let cfg = SynthConfig::default();
        let records = synth_generate(11, 300, &cfg).unwrap();
        for rec in &records {
            let flat: Vec<String> = rec
                .utterances
                .iter()
                .flat_map(|u| tokenize(u, Tokenization::Whitespace))
                .collect();
            let resp = tokenize(&rec.response, Tokenization::Whitespace);
            for &idx in &rec.answer_token_indices {
                assert!(resp.contains(&flat[idx]), "{} not in {:?}", flat[idx], resp);
            }
        }
    }

    #[test]
    fn vocabulary_fits_a_small_cap() {
        let cfg = SynthConfig::default();
        let records = synth_generate(3, 500, &cfg).unwrap();
        let vocab = build_vocab(&records, Tokenization::Whitespace, 50_000);
        assert!(vocab.len() <= 64, "vocabulary size {}", vocab.len());
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = SynthConfig::default();
        cfg.n_entities = 999;
        assert!(synth_generate(1, 1, &cfg).is_err());
        assert!(synth_generate(1, 0, &SynthConfig::default()).is_err());
        let mut zero = SynthConfig::default();
        zero.family_weights = [0.0, 0.0, 0.0];
        assert!(synth_generate(1, 1, &zero).is_err());
    }

    #[test]
    fn responses_are_at_least_ten_tokens() {
        let records = synth_generate(5, 100, &SynthConfig::default()).unwrap();
        for rec in &records {
            assert!(tokenize(&rec.response, Tokenization::Whitespace).len() >= 10);
        }
    }
}

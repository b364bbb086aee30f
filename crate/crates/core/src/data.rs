//! Corpus records, vocabulary, tokenization, and preprocessing.
//!
//! On disk a corpus is UTF-8 JSONL, one record per line:
//! `{"utterances": [...], "question": "...", "answer_token_indices": [...],
//!   "response": "..."}`. Answer indices point into the flattened tokenized
//! context; indices whose token falls to truncation are dropped, indices
//! outside the tokenized context are rejected.
//!
//! Preprocessing truncates to at most `max_utterances` utterances of
//! `tokens_per_utterance` tokens each (defaults 5 x 20 = a 100-token
//! context window) and is idempotent.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const SOS: u32 = 2;
pub const EOS: u32 = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<sos>", "<eos>"];

/// Fixed context window geometry shared by preprocessing and the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextWindow {
    pub max_utterances: usize,
    pub tokens_per_utterance: usize,
    pub max_response_len: usize,
}

impl Default for ContextWindow {
    fn default() -> Self {
        ContextWindow {
            max_utterances: 5,
            tokens_per_utterance: 20,
            max_response_len: 20,
        }
    }
}

impl ContextWindow {
    /// Flattened context capacity (answer-score vector length).
    pub fn capacity(&self) -> usize {
        self.max_utterances * self.tokens_per_utterance
    }
}

/// One line of a corpus file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RawRecord {
    pub utterances: Vec<String>,
    pub question: String,
    pub answer_token_indices: Vec<usize>,
    pub response: String,
}

/// Tokenization mode: whitespace for space-delimited text, character-level
/// for unsegmented scripts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Tokenization {
    Whitespace,
    Char,
}

pub fn tokenize(text: &str, mode: Tokenization) -> Vec<String> {
    match mode {
        Tokenization::Whitespace => text.split_whitespace().map(str::to_string).collect(),
        Tokenization::Char => text
            .chars()
            .filter(|c| !c.is_whitespace())
            .map(|c| c.to_string())
            .collect(),
    }
}

/// Token table with four reserved ids and a hard size cap.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, u32>,
}

impl Vocabulary {
    pub const MAX_SIZE: usize = 50_000;

    fn from_tokens(tokens: Vec<String>) -> Self {
        let mut id_to_token: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(tokens);
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary { id_to_token, token_to_id }
    }

    /// Ranks tokens by frequency (ties broken lexicographically) and keeps
    /// the most frequent ones after the four reserved slots.
    pub fn build<'a, I>(token_stream: I, max_size: usize) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for tok in token_stream {
            *counts.entry(tok).or_insert(0) += 1;
        }
        let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let cap = max_size.min(Self::MAX_SIZE).saturating_sub(RESERVED.len());
        ranked.truncate(cap);
        Self::from_tokens(ranked.into_iter().map(|(t, _)| t.to_string()).collect())
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    pub fn token(&self, id: u32) -> &str {
        self.id_to_token
            .get(id as usize)
            .map(String::as_str)
            .unwrap_or(RESERVED[UNK as usize])
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// One token per line; line k holds the token with id k + 4.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = std::fs::File::create(path)?;
        for tok in &self.id_to_token[RESERVED.len()..] {
            writeln!(out, "{tok}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(Self::from_tokens(text.lines().map(str::to_string).collect()))
    }

    /// Tokens in id order, reserved entries included.
    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn from_token_list(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Config("token list must start with the reserved tokens".into()));
        }
        Ok(Self::from_tokens(tokens[RESERVED.len()..].to_vec()))
    }
}

/// One preprocessed training/eval record.
#[derive(Debug, Clone, PartialEq)]
pub struct DialogExample {
    /// Truncated, unpadded token ids per utterance.
    pub utterances: Vec<Vec<u32>>,
    pub question: Vec<u32>,
    /// 0/1 per truncated context token (length = sum of utterance lengths).
    pub answer_mask: Vec<u8>,
    /// Truncated response token ids, without sos/eos.
    pub response: Vec<u32>,
    /// Token strings retained for metric computation.
    pub utterance_tokens: Vec<Vec<String>>,
    pub question_tokens: Vec<String>,
    pub response_tokens: Vec<String>,
}

impl DialogExample {
    pub fn context_len(&self) -> usize {
        self.utterances.iter().map(Vec::len).sum()
    }

    /// Answer mask laid out on the fixed padded grid: utterance j occupies
    /// positions [j * tokens_per_utterance, j * tokens_per_utterance + len).
    pub fn answer_grid(&self, window: &ContextWindow) -> Vec<f64> {
        let mut grid = vec![0.0; window.capacity()];
        let mut flat = 0;
        for (j, utt) in self.utterances.iter().enumerate() {
            for o in 0..utt.len() {
                if self.answer_mask[flat] != 0 {
                    grid[j * window.tokens_per_utterance + o] = 1.0;
                }
                flat += 1;
            }
        }
        grid
    }

    /// 1.0 where the padded grid holds a real token.
    pub fn position_grid(&self, window: &ContextWindow) -> Vec<f64> {
        let mut grid = vec![0.0; window.capacity()];
        for (j, utt) in self.utterances.iter().enumerate() {
            for o in 0..utt.len() {
                grid[j * window.tokens_per_utterance + o] = 1.0;
            }
        }
        grid
    }

    /// Gold answer positions on the padded grid.
    pub fn gold_answer_set(&self, window: &ContextWindow) -> Vec<usize> {
        self.answer_grid(window)
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Truncates tokenized utterances to the window. Idempotent.
pub fn truncate_utterances(mut utts: Vec<Vec<String>>, window: &ContextWindow) -> Vec<Vec<String>> {
    utts.truncate(window.max_utterances);
    for u in &mut utts {
        u.truncate(window.tokens_per_utterance);
    }
    utts
}

/// Builds a [`DialogExample`] from one raw record. Answer indices address
/// the flattened tokenized context before truncation; entries whose token is
/// cut away are dropped, entries beyond the tokenized context are malformed.
pub fn preprocess(
    record: &RawRecord,
    vocab: &Vocabulary,
    window: &ContextWindow,
    mode: Tokenization,
    line: usize,
) -> Result<DialogExample> {
    if record.utterances.is_empty() {
        return Err(Error::Data { line, msg: "record has no utterances".into() });
    }
    let full: Vec<Vec<String>> = record.utterances.iter().map(|u| tokenize(u, mode)).collect();
    if let Some(i) = full.iter().position(|u| u.is_empty()) {
        return Err(Error::Data { line, msg: format!("utterance {} is empty after tokenization", i + 1) });
    }
    let total_full: usize = full.iter().map(Vec::len).sum();

    // Map each surviving pre-truncation flat index to its truncated flat index.
    let kept = truncate_utterances(full.clone(), window);
    let mut survives: Vec<Option<usize>> = vec![None; total_full];
    {
        let mut flat_full = 0;
        let mut flat_kept = 0;
        for (j, u) in full.iter().enumerate() {
            for o in 0..u.len() {
                if j < kept.len() && o < kept[j].len() {
                    survives[flat_full] = Some(flat_kept);
                    flat_kept += 1;
                }
                flat_full += 1;
            }
        }
    }

    let kept_total: usize = kept.iter().map(Vec::len).sum();
    let mut answer_mask = vec![0u8; kept_total];
    for &idx in &record.answer_token_indices {
        if idx >= total_full {
            return Err(Error::Data {
                line,
                msg: format!("answer index {idx} out of range for a {total_full}-token context"),
            });
        }
        if let Some(k) = survives[idx] {
            answer_mask[k] = 1;
        }
    }

    let question_tokens = tokenize(&record.question, mode);
    if question_tokens.is_empty() {
        return Err(Error::Data { line, msg: "question is empty after tokenization".into() });
    }
    let mut question_tokens = question_tokens;
    question_tokens.truncate(window.tokens_per_utterance);

    let mut response_tokens = tokenize(&record.response, mode);
    if response_tokens.is_empty() {
        return Err(Error::Data { line, msg: "response is empty after tokenization".into() });
    }
    response_tokens.truncate(window.max_response_len);

    Ok(DialogExample {
        utterances: kept.iter().map(|u| vocab.encode(u)).collect(),
        question: vocab.encode(&question_tokens),
        answer_mask,
        response: vocab.encode(&response_tokens),
        utterance_tokens: kept,
        question_tokens,
        response_tokens,
    })
}

/// Parses a JSONL corpus file into raw records.
pub fn read_records(path: &Path) -> Result<Vec<RawRecord>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RawRecord = serde_json::from_str(&line).map_err(|e| Error::Data {
            line: i + 1,
            msg: format!("malformed record: {e}"),
        })?;
        records.push(rec);
    }
    Ok(records)
}

/// Loads and preprocesses a corpus file.
pub fn load_corpus(
    path: &Path,
    vocab: &Vocabulary,
    window: &ContextWindow,
    mode: Tokenization,
) -> Result<Vec<DialogExample>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut examples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RawRecord = serde_json::from_str(&line).map_err(|e| Error::Data {
            line: i + 1,
            msg: format!("malformed record: {e}"),
        })?;
        examples.push(preprocess(&rec, vocab, window, mode, i + 1)?);
    }
    Ok(examples)
}

pub fn write_records(path: &Path, records: &[RawRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for rec in records {
        serde_json::to_writer(&mut out, rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// All token strings of a record set, for vocabulary construction.
pub fn record_tokens(records: &[RawRecord], mode: Tokenization) -> Vec<String> {
    let mut tokens = Vec::new();
    for rec in records {
        for u in &rec.utterances {
            tokens.extend(tokenize(u, mode));
        }
        tokens.extend(tokenize(&rec.question, mode));
        tokens.extend(tokenize(&rec.response, mode));
    }
    tokens
}

/// Builds a vocabulary from raw records.
pub fn build_vocab(records: &[RawRecord], mode: Tokenization, max_size: usize) -> Vocabulary {
    let tokens = record_tokens(records, mode);
    Vocabulary::build(tokens.iter().map(String::as_str), max_size)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn window() -> ContextWindow {
        ContextWindow::default()
    }

    fn rec(utts: &[&str], q: &str, ans: &[usize], resp: &str) -> RawRecord {
        RawRecord {
            utterances: utts.iter().map(|s| s.to_string()).collect(),
            question: q.to_string(),
            answer_token_indices: ans.to_vec(),
            response: resp.to_string(),
        }
    }

    #[test]
    fn vocab_ranks_by_frequency_then_lexicographic() {
        let v = Vocabulary::build(["a", "a", "b"], 100);
        assert!(v.id("a") < v.id("b"));
        assert_eq!(v.id("a"), 4);

        let tie = Vocabulary::build(["z", "c", "z", "c"], 100);
        assert!(tie.id("c") < tie.id("z"));
    }

    #[test]
    fn vocab_max_size_keeps_reserved_plus_most_frequent() {
        // Ten distinct tokens with known counts; cap 6 leaves room for two.
        let stream = [
            "t0", "t0", "t0", "t1", "t1", "t2", "t3", "t4", "t5", "t6", "t7", "t8", "t9",
        ];
        let v = Vocabulary::build(stream, 6);
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("t0"), 4);
        assert_eq!(v.id("t1"), 5);
        for t in ["t2", "t3", "t9"] {
            assert_eq!(v.id(t), UNK);
        }
    }

    #[test]
    fn vocab_file_roundtrip() {
        let v = Vocabulary::build(["x", "y", "x"], 100);
        let dir = std::env::temp_dir().join("mrg_vocab_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("vocab.txt");
        v.save(&path).unwrap();
        let loaded = Vocabulary::load(&path).unwrap();
        assert_eq!(v, loaded);
        assert_eq!(loaded.id("x"), 4);
    }

    #[test]
    fn empty_file_loads_to_empty_corpus() {
        let dir = std::env::temp_dir().join("mrg_data_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        let v = Vocabulary::build(["a"], 100);
        let corpus = load_corpus(&path, &v, &window(), Tokenization::Whitespace).unwrap();
        assert!(corpus.is_empty());
    }

    #[test]
    fn long_utterance_truncated_and_indices_beyond_cut_dropped() {
        let long: Vec<String> = (0..30).map(|i| format!("w{i}")).collect();
        let record = rec(&[&long.join(" ")], "w0 where", &[0, 25], "w0 w1");
        let v = Vocabulary::build(long.iter().map(String::as_str), 100);
        let ex = preprocess(&record, &v, &window(), Tokenization::Whitespace, 1).unwrap();
        assert_eq!(ex.utterances[0].len(), 20);
        assert_eq!(ex.answer_mask.len(), 20);
        assert_eq!(ex.answer_mask[0], 1);
        assert_eq!(ex.answer_mask.iter().map(|&x| x as usize).sum::<usize>(), 1);
    }

    #[test]
    fn out_of_range_answer_index_rejected() {
        let record = rec(&["a b"], "q", &[2], "r");
        let v = Vocabulary::build(["a", "b", "q", "r"], 100);
        let err = preprocess(&record, &v, &window(), Tokenization::Whitespace, 7).unwrap_err();
        assert!(err.to_string().contains("line 7"), "{err}");
    }

    #[test]
    fn corpus_roundtrip_identical_ids() {
        let records = vec![
            rec(&["a b c", "d e"], "what d", &[3], "d a"),
            rec(&["x y"], "what x", &[0], "x z"),
        ];
        let dir = std::env::temp_dir().join("mrg_rt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("c.jsonl");
        write_records(&path, &records).unwrap();
        let back = read_records(&path).unwrap();
        assert_eq!(records, back);

        let v = build_vocab(&records, Tokenization::Whitespace, 100);
        let a = load_corpus(&path, &v, &window(), Tokenization::Whitespace).unwrap();
        let b = load_corpus(&path, &v, &window(), Tokenization::Whitespace).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn preprocessing_idempotent() {
        let utts: Vec<Vec<String>> = vec![
            (0..30).map(|i| format!("a{i}")).collect(),
            (0..5).map(|i| format!("b{i}")).collect(),
        ];
        let once = truncate_utterances(utts.clone(), &window());
        let twice = truncate_utterances(once.clone(), &window());
        assert_eq!(once, twice);
    }

    #[test]
    fn answer_grid_alignment() {
        let record = rec(&["a b c", "d e"], "q d", &[1, 3], "r d");
        let v = Vocabulary::build(["a", "b", "c", "d", "e", "q", "r"], 100);
        let ex = preprocess(&record, &v, &window(), Tokenization::Whitespace, 1).unwrap();
        let grid = ex.answer_grid(&window());
        assert_eq!(grid.len(), 100);
        assert_eq!(grid[1], 1.0);
        assert_eq!(grid[20], 1.0); // "d" at utterance 1, offset 0
        assert_eq!(grid.iter().sum::<f64>(), 2.0);
        let pos = ex.position_grid(&window());
        assert_eq!(pos.iter().sum::<f64>(), 5.0);
    }

    #[test]
    fn char_tokenization_skips_whitespace() {
        let toks = tokenize("ab c", Tokenization::Char);
        assert_eq!(toks, vec!["a", "b", "c"]);
    }

    #[test]
    fn unknown_tokens_map_to_unk() {
        let v = Vocabulary::build(["a"], 100);
        assert_eq!(v.encode(&["a".into(), "zz".into()]), vec![4, UNK]);
    }
}

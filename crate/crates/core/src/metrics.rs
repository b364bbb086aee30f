//! Automatic evaluation: sentence-level smoothed BLEU, bag-of-words
//! embedding similarity (Average / Extrema / Greedy), and answer set
//! metrics.
//!
//! BLEU uses smoothing method 7 when any modified precision is zero:
//! first zero precisions get the length-scaled add-k replacement
//! 1 / (2^k_i * 5 / ln(hyp_len)) over the same denominator, then every
//! order is replaced by the average of its neighbors (with p_0 = p_1 + 1
//! and an extra raw max_n+1 precision at the top). Pairs with no zero
//! counts score plain BLEU, so an identical pair is exactly 1.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;

const SMOOTH_K: f64 = 5.0;

#[derive(Debug, Clone, Copy)]
pub struct BleuScore {
    pub score: f64,
    /// True when smoothing had to replace zero counts.
    pub smoothed: bool,
    /// True when the hypothesis was empty (score forced to 0).
    pub empty_hypothesis: bool,
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts: HashMap<&[String], usize> = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram precision as (matches, total), total floored at 1.
fn modified_precision(hyp: &[String], refr: &[String], n: usize) -> (usize, usize) {
    let hyp_counts = ngram_counts(hyp, n);
    let ref_counts = ngram_counts(refr, n);
    let mut matches = 0;
    let mut total = 0;
    for (gram, &c) in &hyp_counts {
        total += c;
        matches += c.min(ref_counts.get(gram).copied().unwrap_or(0));
    }
    (matches, total.max(1))
}

/// Sentence-level BLEU up to `max_n`-grams with uniform weights, brevity
/// penalty, and smoothing 7 on zero counts.
pub fn bleu(hyp: &[String], refr: &[String], max_n: usize) -> BleuScore {
    assert!(max_n >= 1, "max_n must be at least 1");
    assert!(!refr.is_empty(), "reference must be non-empty");
    if hyp.is_empty() {
        return BleuScore { score: 0.0, smoothed: false, empty_hypothesis: true };
    }
    let precisions: Vec<(usize, usize)> = (1..=max_n).map(|n| modified_precision(hyp, refr, n)).collect();
    let mut p: Vec<f64> = precisions.iter().map(|&(m, t)| m as f64 / t as f64).collect();
    let needs_smoothing = precisions.iter().any(|&(m, _)| m == 0);
    if needs_smoothing {
        let hyp_len = hyp.len();
        // Length-scaled add-k replacement of zero counts.
        let mut incvnt = 1;
        for (i, &(m, t)) in precisions.iter().enumerate() {
            if m == 0 && hyp_len > 1 {
                let numerator = 1.0 / (2f64.powi(incvnt) * SMOOTH_K / (hyp_len as f64).ln());
                p[i] = numerator / t as f64;
                incvnt += 1;
            }
        }
        // Neighborhood averaging with p_0 = p_1 + 1 and a raw max_n+1 term.
        let (m_top, t_top) = modified_precision(hyp, refr, max_n + 1);
        let p_top = m_top as f64 / t_top as f64;
        let mut prev = p[0] + 1.0;
        for i in 0..max_n {
            let next = if i + 1 < max_n { p[i + 1] } else { p_top };
            let avg = (prev + p[i] + next) / 3.0;
            p[i] = avg;
            prev = avg;
        }
    }
    if p.iter().any(|&x| x <= 0.0) {
        return BleuScore { score: 0.0, smoothed: needs_smoothing, empty_hypothesis: false };
    }
    let log_mean = p.iter().map(|&x| x.ln()).sum::<f64>() / max_n as f64;
    let c = hyp.len() as f64;
    let r = refr.len() as f64;
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    BleuScore {
        score: (bp * log_mean.exp()).min(1.0),
        smoothed: needs_smoothing,
        empty_hypothesis: false,
    }
}

/// Corpus-level BLEU: pooled clipped counts and lengths, no smoothing.
pub fn corpus_bleu(pairs: &[(&[String], &[String])], max_n: usize) -> f64 {
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let mut c = 0usize;
    let mut r = 0usize;
    for (hyp, refr) in pairs {
        c += hyp.len();
        r += refr.len();
        for n in 1..=max_n {
            let (m, t) = modified_precision(hyp, refr, n);
            matches[n - 1] += m;
            totals[n - 1] += if hyp.len() >= n { t } else { 0 };
        }
    }
    if c == 0 || matches.iter().any(|&m| m == 0) {
        return 0.0;
    }
    let log_mean = (0..max_n)
        .map(|i| (matches[i] as f64 / totals[i].max(1) as f64).ln())
        .sum::<f64>()
        / max_n as f64;
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    (bp * log_mean.exp()).min(1.0)
}

// ── embedding metrics ────────────────────────────────────────────────

/// Token -> vector table for the bag-of-words metrics.
pub struct BowEmbeddings {
    map: HashMap<String, Vec<f64>>,
    dim: usize,
}

impl BowEmbeddings {
    pub fn new(dim: usize) -> Self {
        BowEmbeddings { map: HashMap::new(), dim }
    }

    pub fn insert(&mut self, token: &str, vector: Vec<f64>) {
        assert_eq!(vector.len(), self.dim);
        self.map.insert(token.to_string(), vector);
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.map.get(token).map(Vec::as_slice)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Vectors for the in-vocabulary tokens of an utterance.
    fn lookup(&self, tokens: &[String]) -> Vec<&[f64]> {
        tokens.iter().filter_map(|t| self.get(t)).collect()
    }

    /// Parses the external embedding format: one line per token, the token
    /// followed by whitespace-separated decimal values.
    pub fn parse(text: &str) -> crate::error::Result<Self> {
        let mut map = HashMap::new();
        let mut dim = None;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut it = line.split_whitespace();
            let token = it.next().unwrap().to_string();
            let vector: Vec<f64> = it
                .map(|v| {
                    v.parse::<f64>().map_err(|_| crate::error::Error::Data {
                        line: i + 1,
                        msg: format!("bad embedding value `{v}`"),
                    })
                })
                .collect::<crate::error::Result<_>>()?;
            match dim {
                None => dim = Some(vector.len()),
                Some(d) if d != vector.len() => {
                    return Err(crate::error::Error::Data {
                        line: i + 1,
                        msg: format!("embedding width {} does not match {d}", vector.len()),
                    })
                }
                _ => {}
            }
            map.insert(token, vector);
        }
        let dim = dim.ok_or(crate::error::Error::Data { line: 0, msg: "empty embedding file".into() })?;
        Ok(BowEmbeddings { map, dim })
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn mean_vector(vs: &[&[f64]], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for v in vs {
        for (o, x) in out.iter_mut().zip(v.iter()) {
            *o += x;
        }
    }
    for o in out.iter_mut() {
        *o /= vs.len() as f64;
    }
    out
}

/// Per-dimension value of largest magnitude; positive wins exact ties.
fn extrema_vector(vs: &[&[f64]], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for d in 0..dim {
        let mut best = 0.0f64;
        for v in vs {
            let x = v[d];
            if x.abs() > best.abs() || (x.abs() == best.abs() && x > best) {
                best = x;
            }
        }
        out[d] = best;
    }
    out
}

fn greedy_direction(from: &[&[f64]], to: &[&[f64]]) -> f64 {
    let mut total = 0.0;
    for a in from {
        let best = to
            .iter()
            .map(|b| cosine(a, b))
            .fold(f64::NEG_INFINITY, f64::max);
        total += best;
    }
    total / from.len() as f64
}

fn clamp01(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

/// (Average, Extrema, Greedy) similarities, or `None` when either side has
/// no in-vocabulary token (the caller counts such skips).
pub fn bow_metrics(
    hyp: &[String],
    refr: &[String],
    emb: &BowEmbeddings,
) -> Option<(f64, f64, f64)> {
    let hv = emb.lookup(hyp);
    let rv = emb.lookup(refr);
    if hv.is_empty() || rv.is_empty() {
        return None;
    }
    let dim = emb.dim();
    let average = cosine(&mean_vector(&hv, dim), &mean_vector(&rv, dim));
    let extrema = cosine(&extrema_vector(&hv, dim), &extrema_vector(&rv, dim));
    let greedy = 0.5 * (greedy_direction(&hv, &rv) + greedy_direction(&rv, &hv));
    Some((clamp01(average), clamp01(extrema), clamp01(greedy)))
}

// ── answer metrics ───────────────────────────────────────────────────

/// Exact match and set F1 between predicted and gold token index sets.
pub fn answer_metrics(predicted: &[usize], gold: &[usize]) -> (f64, f64) {
    use std::collections::BTreeSet;
    let p: BTreeSet<usize> = predicted.iter().copied().collect();
    let g: BTreeSet<usize> = gold.iter().copied().collect();
    let em = if p == g { 1.0 } else { 0.0 };
    if p.is_empty() && g.is_empty() {
        return (1.0, 1.0);
    }
    if p.is_empty() || g.is_empty() {
        return (em, 0.0);
    }
    let overlap = p.intersection(&g).count() as f64;
    if overlap == 0.0 {
        return (em, 0.0);
    }
    let precision = overlap / p.len() as f64;
    let recall = overlap / g.len() as f64;
    (em, 2.0 * precision * recall / (precision + recall))
}

// ── report ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct MetricMeans {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub bow_average: f64,
    pub bow_extrema: f64,
    pub bow_greedy: f64,
    pub answer_exact_match: f64,
    pub answer_f1: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExampleEval {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub bow_average: Option<f64>,
    pub bow_extrema: Option<f64>,
    pub bow_greedy: Option<f64>,
    pub answer_exact_match: f64,
    pub answer_f1: f64,
    pub hypothesis: String,
    pub reference: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_examples: usize,
    /// Examples without an in-vocabulary token on one side, skipped by the
    /// embedding metrics.
    pub bow_skipped: usize,
    pub means: MetricMeans,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus_bleu4: Option<f64>,
    pub per_example: Vec<ExampleEval>,
}

impl EvalReport {
    pub fn from_examples(per_example: Vec<ExampleEval>, corpus_bleu4: Option<f64>) -> Self {
        let n = per_example.len();
        let mut means = MetricMeans::default();
        let mut bow_n = 0usize;
        for e in &per_example {
            means.bleu1 += e.bleu1;
            means.bleu2 += e.bleu2;
            means.bleu3 += e.bleu3;
            means.bleu4 += e.bleu4;
            means.answer_exact_match += e.answer_exact_match;
            means.answer_f1 += e.answer_f1;
            if let (Some(a), Some(x), Some(g)) = (e.bow_average, e.bow_extrema, e.bow_greedy) {
                means.bow_average += a;
                means.bow_extrema += x;
                means.bow_greedy += g;
                bow_n += 1;
            }
        }
        let nf = n.max(1) as f64;
        means.bleu1 /= nf;
        means.bleu2 /= nf;
        means.bleu3 /= nf;
        means.bleu4 /= nf;
        means.answer_exact_match /= nf;
        means.answer_f1 /= nf;
        let bf = bow_n.max(1) as f64;
        means.bow_average /= bf;
        means.bow_extrema /= bf;
        means.bow_greedy /= bf;
        EvalReport {
            n_examples: n,
            bow_skipped: n - bow_n,
            means,
            corpus_bleu4,
            per_example,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn identical_pair_scores_one_for_all_orders() {
        let t = toks("a b c d e");
        for n in 1..=4 {
            let b = bleu(&t, &t, n);
            assert_eq!(b.score, 1.0, "order {n}");
            assert!(!b.smoothed);
        }
    }

    #[test]
    fn unigram_half_overlap_is_half() {
        let b = bleu(&toks("a b"), &toks("a c"), 1);
        assert_eq!(b.score, 0.5);
        assert!(!b.smoothed);
    }

    #[test]
    fn empty_hypothesis_scores_zero_with_flag() {
        let b = bleu(&[], &toks("a b"), 4);
        assert_eq!(b.score, 0.0);
        assert!(b.empty_hypothesis);
    }

    // Straight-line transcription of the smoothing-7 arithmetic for a
    // disjoint 5-token pair, written independently of the implementation.
    fn disjoint_five_token_oracle(max_n: usize) -> f64 {
        let hyp_len = 5.0f64;
        // Modified precisions: all numerators 0; denominators 5,4,3,2,1.
        let denoms = [5.0, 4.0, 3.0, 2.0, 1.0];
        let mut p = vec![0.0f64; max_n];
        let mut incvnt = 1;
        for i in 0..max_n {
            p[i] = (1.0 / (2f64.powi(incvnt) * 5.0 / hyp_len.ln())) / denoms[i];
            incvnt += 1;
        }
        let p_top = 0.0; // max_n+1 grams are also disjoint
        let mut prev = p[0] + 1.0;
        for i in 0..max_n {
            let next = if i + 1 < max_n { p[i + 1] } else { p_top };
            p[i] = (prev + p[i] + next) / 3.0;
            prev = p[i];
        }
        let log_mean = p.iter().map(|x| x.ln()).sum::<f64>() / max_n as f64;
        log_mean.exp() // brevity penalty is 1 at equal lengths
    }

    #[test]
    fn disjoint_pair_matches_hand_derived_smoothing_value() {
        let hyp = toks("a b c d e");
        let refr = toks("f g h i j");
        for n in 1..=4 {
            let got = bleu(&hyp, &refr, n);
            assert!(got.smoothed);
            let want = disjoint_five_token_oracle(n);
            assert!(
                (got.score - want).abs() < 1e-9,
                "order {n}: {} vs {want}",
                got.score
            );
        }
        // Frozen golden value for the 4-gram case.
        let golden = disjoint_five_token_oracle(4);
        assert!((golden - 0.08437841398036819).abs() < 1e-9, "oracle drifted: {golden}");
        assert!((bleu(&hyp, &refr, 4).score - 0.08437841398036819).abs() < 1e-9);
    }

    #[test]
    fn bleu_nonincreasing_in_n_on_mixed_pairs() {
        let cases = [
            ("a b c d e", "a b x y z"),
            ("a b c d e f g", "c d e q r"),
            ("x y", "x y z w"),
            ("a b c d e", "f g h i j"),
        ];
        for (h, r) in cases {
            let hv = toks(h);
            let rv = toks(r);
            let scores: Vec<f64> = (1..=4).map(|n| bleu(&hv, &rv, n).score).collect();
            for w in scores.windows(2) {
                assert!(w[0] >= w[1] - 1e-12, "{h} vs {r}: {scores:?}");
            }
        }
    }

    #[test]
    fn bleu_invariant_under_token_relabeling() {
        let hyp = toks("a b a c d");
        let refr = toks("a c d e");
        let before: Vec<f64> = (1..=4).map(|n| bleu(&hyp, &refr, n).score).collect();
        let relabel = |t: &[String]| -> Vec<String> {
            t.iter().map(|s| format!("tok_{s}_x")).collect()
        };
        let after: Vec<f64> = (1..=4)
            .map(|n| bleu(&relabel(&hyp), &relabel(&refr), n).score)
            .collect();
        assert_eq!(before, after);
    }

    fn fixture_embeddings() -> BowEmbeddings {
        let mut e = BowEmbeddings::new(3);
        e.insert("ha", vec![1.0, 0.0, 0.0]);
        e.insert("hb", vec![0.0, 1.0, 0.0]);
        e.insert("rc", vec![0.0, 0.0, 2.0]);
        e.insert("rd", vec![3.0, 4.0, 0.0]);
        e.insert("re", vec![-1.0, 0.0, 0.0]);
        e
    }

    #[test]
    fn bow_identical_utterances_score_one() {
        let e = fixture_embeddings();
        let t = toks("ha hb");
        let (a, x, g) = bow_metrics(&t, &t, &e).unwrap();
        assert!((a - 1.0).abs() < 1e-12);
        assert!((x - 1.0).abs() < 1e-12);
        assert!((g - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bow_orthogonal_tokens_score_zero() {
        let e = fixture_embeddings();
        let (a, x, g) = bow_metrics(&toks("ha"), &toks("rc"), &e).unwrap();
        assert_eq!((a, x, g), (0.0, 0.0, 0.0));
    }

    #[test]
    fn bow_hand_computed_two_vs_three_token_case() {
        // hyp {(1,0,0), (0,1,0)}, ref {(0,0,2), (3,4,0), (-1,0,0)}:
        //   average: cos((.5,.5,0), (2/3,4/3,2/3)) = sqrt(3)/2
        //   extrema: cos((1,1,0), (3,4,2)) = 7/sqrt(58)
        //   greedy:  ((0.6+0.8)/2 + (0+0.8+0)/3) / 2 = 29/60
        let e = fixture_embeddings();
        let (a, x, g) = bow_metrics(&toks("ha hb"), &toks("rc rd re"), &e).unwrap();
        assert!((a - 3f64.sqrt() / 2.0).abs() < 1e-9, "average {a}");
        assert!((x - 7.0 / 58f64.sqrt()).abs() < 1e-9, "extrema {x}");
        assert!((g - 29.0 / 60.0).abs() < 1e-9, "greedy {g}");
        // Frozen decimals from the straight-line hand computation.
        assert!((a - 0.8660254037844386).abs() < 1e-9);
        assert!((x - 0.9191450300180578).abs() < 1e-9);
        assert!((g - 0.48333333333333334).abs() < 1e-9);
    }

    #[test]
    fn bow_skips_out_of_vocabulary_sides() {
        let e = fixture_embeddings();
        assert!(bow_metrics(&toks("zz"), &toks("ha"), &e).is_none());
        assert!(bow_metrics(&toks("ha"), &toks("qq ww"), &e).is_none());
    }

    #[test]
    fn bow_average_and_extrema_ignore_token_order() {
        let e = fixture_embeddings();
        let (a1, x1, _) = bow_metrics(&toks("ha hb"), &toks("rc rd"), &e).unwrap();
        let (a2, x2, _) = bow_metrics(&toks("hb ha"), &toks("rd rc"), &e).unwrap();
        assert_eq!(a1, a2);
        assert_eq!(x1, x2);
    }

    #[test]
    fn answer_metric_table() {
        assert_eq!(answer_metrics(&[1, 2], &[1, 2]), (1.0, 1.0));
        assert_eq!(answer_metrics(&[], &[3]), (0.0, 0.0));
        assert_eq!(answer_metrics(&[], &[]), (1.0, 1.0));
        let (em, f1) = answer_metrics(&[0, 1], &[1, 2]);
        assert_eq!(em, 0.0);
        assert!((f1 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn embedding_file_parsing() {
        let e = BowEmbeddings::parse("tok 1.0 2.0\nother -0.5 0.25\n").unwrap();
        assert_eq!(e.get("tok").unwrap(), &[1.0, 2.0]);
        assert!(BowEmbeddings::parse("a 1.0\nb 1.0 2.0\n").is_err());
    }
}

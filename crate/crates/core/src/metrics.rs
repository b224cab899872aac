//! Character/word error rates, corpus BLEU and per-slot word error rates.

use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::synthdata::Grammar;

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tokenizer {
    /// Every character, spaces included.
    Chars,
    /// Whitespace-separated words.
    Words,
}

impl Tokenizer {
    pub fn tokens(self, s: &str) -> Vec<String> {
        match self {
            Tokenizer::Chars => s.chars().map(String::from).collect(),
            Tokenizer::Words => s.split_whitespace().map(String::from).collect(),
        }
    }
}

/// Corpus-level error rate: total edits over total reference tokens.
pub fn error_rate<S: AsRef<str>>(hyps: &[S], refs: &[S], tokenizer: Tokenizer) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(Error::argument(format!(
            "{} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    let (mut edits, mut total) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        let (h, r) = (tokenizer.tokens(h.as_ref()), tokenizer.tokens(r.as_ref()));
        edits += edit_distance(&h, &r);
        total += r.len();
    }
    if total == 0 {
        return Err(Error::argument("reference corpus has no tokens"));
    }
    Ok(edits as f64 / total as f64)
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    for g in tokens.windows(n) {
        *counts.entry(g).or_insert(0) += 1;
    }
    counts
}

/// Corpus BLEU over word tokens: clipped n-gram precisions up to order 4
/// (capped at the shortest reference length), uniform weights, brevity
/// penalty `exp(1 - r/c)` when the hypotheses are shorter.
pub fn bleu<S: AsRef<str>>(hyps: &[S], refs: &[S]) -> Result<f64> {
    if hyps.is_empty() || hyps.len() != refs.len() {
        return Err(Error::argument("BLEU needs a non-empty corpus of paired sentences"));
    }
    let hyps: Vec<Vec<String>> = hyps.iter().map(|h| Tokenizer::Words.tokens(h.as_ref())).collect();
    let refs: Vec<Vec<String>> = refs.iter().map(|r| Tokenizer::Words.tokens(r.as_ref())).collect();
    let max_n = refs.iter().map(Vec::len).min().unwrap_or(0).clamp(1, 4);
    let c: usize = hyps.iter().map(Vec::len).sum();
    let r: usize = refs.iter().map(Vec::len).sum();
    if c == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let (mut matched, mut possible) = (0usize, 0usize);
        for (h, rf) in hyps.iter().zip(&refs) {
            let ref_counts = ngram_counts(rf, n);
            for (g, count) in ngram_counts(h, n) {
                matched += count.min(ref_counts.get(g).copied().unwrap_or(0));
            }
            possible += h.len().saturating_sub(n - 1);
        }
        if matched == 0 {
            return Ok(0.0);
        }
        log_sum += (matched as f64 / possible as f64).ln();
    }
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    Ok(bp * (log_sum / max_n as f64).exp())
}

/// Fraction of sentences whose k-th word differs from the reference's k-th
/// word. Missing hypothesis words count as errors.
pub fn per_slot_wer<S: AsRef<str>>(hyps: &[S], refs: &[S], grammar: &Grammar) -> Result<Vec<f64>> {
    if hyps.is_empty() || hyps.len() != refs.len() {
        return Err(Error::argument("per-slot WER needs a non-empty corpus of paired sentences"));
    }
    let slots = grammar.slots().len();
    let mut errors = vec![0usize; slots];
    for (h, r) in hyps.iter().zip(refs) {
        let rw = Tokenizer::Words.tokens(r.as_ref());
        grammar.check_sentence(&rw)?;
        let hw = Tokenizer::Words.tokens(h.as_ref());
        for (k, e) in errors.iter_mut().enumerate() {
            if hw.get(k) != Some(&rw[k]) {
                *e += 1;
            }
        }
    }
    Ok(errors.into_iter().map(|e| e as f64 / hyps.len() as f64).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub cer: f64,
    pub wer: f64,
    pub bleu: f64,
    pub slot_wer: Vec<f64>,
}

impl EvalReport {
    pub fn compute<S: AsRef<str>>(hyps: &[S], refs: &[S], grammar: &Grammar) -> Result<Self> {
        Ok(EvalReport {
            cer: error_rate(hyps, refs, Tokenizer::Chars)?,
            wer: error_rate(hyps, refs, Tokenizer::Words)?,
            bleu: bleu(hyps, refs)?,
            slot_wer: per_slot_wer(hyps, refs, grammar)?,
        })
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "cer={:.6} wer={:.6} bleu={:.6}", self.cer, self.wer, self.bleu)?;
        for (k, w) in self.slot_wer.iter().enumerate() {
            write!(f, " wer{}={w:.6}", k + 1)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn chars(s: &str) -> Vec<char> {
        s.chars().collect()
    }

    /// Exhaustive recursion over the three edit operations.
    fn recursive_distance(a: &[char], b: &[char]) -> usize {
        match (a.split_first(), b.split_first()) {
            (None, _) => b.len(),
            (_, None) => a.len(),
            (Some((x, ar)), Some((y, br))) => {
                let sub = recursive_distance(ar, br) + usize::from(x != y);
                sub.min(recursive_distance(ar, b) + 1).min(recursive_distance(a, br) + 1)
            }
        }
    }

    #[test]
    fn edit_distance_examples() {
        assert_eq!(edit_distance(&chars("abc"), &chars("abc")), 0);
        assert_eq!(recursive_distance(&chars("kitten"), &chars("sitting")), 3);
        assert_eq!(edit_distance(&chars("kitten"), &chars("sitting")), 3);
        assert_eq!(edit_distance(&chars(""), &chars("abcd")), 4);
    }

    #[test]
    fn error_rate_examples() {
        assert_eq!(error_rate(&["bin blue"], &["bin blue"], Tokenizer::Words).unwrap(), 0.0);
        assert_eq!(error_rate(&["bin red"], &["bin blue"], Tokenizer::Words).unwrap(), 0.5);
        assert!(error_rate::<&str>(&[], &[], Tokenizer::Words).is_err());
        assert!(error_rate(&[""], &[""], Tokenizer::Chars).is_err());
        // Spaces count as characters.
        assert_eq!(error_rate(&["ab"], &["a b"], Tokenizer::Chars).unwrap(), 1.0 / 3.0);
    }

    #[test]
    fn bleu_examples() {
        let s = ["bin blue at a zero again", "place green with b eight soon"];
        assert_eq!(bleu(&s, &s).unwrap(), 1.0);
        assert_eq!(bleu(&["x y z w"], &["a b c d"]).unwrap(), 0.0);
        let v = bleu(&["a b c d"], &["a b c d e"]).unwrap();
        assert!((v - (-0.25f64).exp()).abs() < 1e-12);
        assert!((v - 0.7788).abs() < 1e-4);
        assert!(bleu(&["a b"], &["a b"]).unwrap() == 1.0);
        assert!(bleu(&["a c"], &["a b"]).unwrap() < 1.0);
    }

    #[test]
    fn per_slot_examples() {
        let g = Grammar::grid();
        let refs = ["bin blue at a zero again", "lay red by c two now"];
        assert_eq!(per_slot_wer(&refs, &refs, &g).unwrap(), vec![0.0; 6]);
        let hyps = ["bin blue at a one again", "lay red by c two now"];
        assert_eq!(per_slot_wer(&hyps, &refs, &g).unwrap(), vec![0.0, 0.0, 0.0, 0.0, 0.5, 0.0]);
        let short = ["bin blue", "lay red by c two now"];
        assert_eq!(per_slot_wer(&short, &refs, &g).unwrap()[2..], [0.5, 0.5, 0.5, 0.5]);
        assert!(per_slot_wer(&refs, &["bin blue at a zero", "x"], &g).is_err());
        let report = EvalReport::compute(&refs, &refs, &g).unwrap();
        assert_eq!(report.to_string(), "cer=0.000000 wer=0.000000 bleu=1.000000 wer1=0.000000 wer2=0.000000 wer3=0.000000 wer4=0.000000 wer5=0.000000 wer6=0.000000");
    }

    fn short_seq() -> impl Strategy<Value = Vec<char>> {
        proptest::collection::vec(prop::sample::select(vec!['a', 'b', 'c']), 0..8)
    }

    proptest! {
        #[test]
        fn edit_distance_is_a_metric(a in short_seq(), b in short_seq(), c in short_seq()) {
            let d = |x: &[char], y: &[char]| edit_distance(x, y);
            prop_assert_eq!(d(&a, &b), d(&b, &a));
            prop_assert_eq!(d(&a, &b) == 0, a == b);
            prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c));
        }

        #[test]
        fn error_rate_ignores_order(pairs in proptest::collection::vec((short_seq(), short_seq()), 1..6)) {
            let hyps: Vec<String> = pairs.iter().map(|(h, _)| h.iter().collect()).collect();
            let refs: Vec<String> = pairs.iter().map(|(_, r)| format!("x{}", r.iter().collect::<String>())).collect();
            let fwd = error_rate(&hyps, &refs, Tokenizer::Chars).unwrap();
            let (rh, rr): (Vec<String>, Vec<String>) = hyps.iter().cloned().zip(refs.iter().cloned()).rev().unzip();
            prop_assert_eq!(fwd, error_rate(&rh, &rr, Tokenizer::Chars).unwrap());
        }
    }
}

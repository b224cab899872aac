//! Connectionist temporal classification: loss, gradient, greedy decoding,
//! and an exhaustive reference for tiny instances.
//!
//! Class scores are `t x classes` row-major log-probabilities and the blank
//! is always the last class.

use crate::error::{Error, Result};
use crate::tensor::Real;

/// Output symbols; the CTC blank is the extra class after the last symbol.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Alphabet {
    symbols: Vec<char>,
}

impl Default for Alphabet {
    /// 26 lowercase letters and the space: 28 classes with the blank.
    fn default() -> Self {
        Alphabet { symbols: "abcdefghijklmnopqrstuvwxyz ".chars().collect() }
    }
}

impl Alphabet {
    pub fn new(symbols: &str) -> Result<Self> {
        let symbols: Vec<char> = symbols.chars().collect();
        for (i, c) in symbols.iter().enumerate() {
            if symbols[..i].contains(c) {
                return Err(Error::argument(format!("duplicate alphabet symbol {c:?}")));
            }
        }
        if symbols.is_empty() {
            return Err(Error::argument("alphabet needs at least one symbol"));
        }
        Ok(Alphabet { symbols })
    }

    pub fn blank(&self) -> usize {
        self.symbols.len()
    }

    pub fn num_classes(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn encode(&self, text: &str) -> Result<LabelSeq> {
        let indices = text
            .chars()
            .map(|ch| {
                self.symbols
                    .iter()
                    .position(|&s| s == ch)
                    .ok_or_else(|| Error::argument(format!("symbol {ch:?} not in alphabet")))
            })
            .collect::<Result<Vec<_>>>()?;
        LabelSeq::new(indices, text)
    }

    pub fn decode(&self, indices: &[usize]) -> String {
        indices.iter().filter_map(|&i| self.symbols.get(i)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSeq {
    pub indices: Vec<usize>,
    pub text: String,
}

impl LabelSeq {
    pub fn new(indices: Vec<usize>, text: impl Into<String>) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::argument("label sequence must not be empty"));
        }
        Ok(LabelSeq { indices, text: text.into() })
    }

    /// Adjacent equal pairs; each needs a blank between them.
    pub fn repeats(&self) -> usize {
        self.indices.windows(2).filter(|w| w[0] == w[1]).count()
    }

    /// Fewest frames that can emit this label.
    pub fn min_frames(&self) -> usize {
        self.indices.len() + self.repeats()
    }
}

#[derive(Clone, Debug)]
pub struct CtcOutput<T> {
    pub loss: T,
    /// Gradient with respect to the logits that produced the log-probabilities
    /// through a log-softmax: `softmax - posterior occupancy`.
    pub grad: Vec<T>,
    /// Log posterior probability of each class at each frame.
    pub log_occupancy: Vec<T>,
}

#[inline]
fn lse2<T: Real>(a: T, b: T) -> T {
    if a == T::neg_infinity() {
        return b;
    }
    if b == T::neg_infinity() {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

pub fn log_sum_exp<T: Real>(values: &[T]) -> T {
    let m = values.iter().copied().fold(T::neg_infinity(), T::max);
    if m == T::neg_infinity() {
        return m;
    }
    m + values.iter().map(|&v| (v - m).exp()).sum::<T>().ln()
}

/// Row-wise log-softmax of a `rows x cols` matrix.
pub fn log_softmax_rows<T: Real>(logits: &[T], cols: usize) -> Vec<T> {
    logits
        .chunks_exact(cols)
        .flat_map(|row| {
            let z = log_sum_exp(row);
            row.iter().map(move |&v| v - z)
        })
        .collect()
}

fn check_rows<T: Real>(log_probs: &[T], classes: usize) -> Result<usize> {
    if classes < 2 || log_probs.is_empty() || log_probs.len() % classes != 0 {
        return Err(Error::shape(format!(
            "{} log-probabilities do not form rows of {classes} classes",
            log_probs.len()
        )));
    }
    let tol = T::epsilon().sqrt() * T::lit(10.0);
    for (t, row) in log_probs.chunks_exact(classes).enumerate() {
        if row.iter().any(|v| v.is_nan() || *v == T::infinity()) {
            return Err(Error::Numeric(format!("non-finite log-probability at frame {t}")));
        }
        let z = log_sum_exp(row);
        if !(z.abs() <= tol) {
            return Err(Error::Contract(format!(
                "frame {t} log-probabilities are not normalized (log-sum {z})"
            )));
        }
    }
    Ok(log_probs.len() / classes)
}

/// Negative log-likelihood of `label` and its gradient via the
/// forward-backward recursions over the blank-interleaved label.
pub fn ctc_loss_grad<T: Real>(log_probs: &[T], classes: usize, label: &LabelSeq) -> Result<CtcOutput<T>> {
    let frames = check_rows(log_probs, classes)?;
    let blank = classes - 1;
    if let Some(&bad) = label.indices.iter().find(|&&i| i >= blank) {
        return Err(Error::argument(format!("label index {bad} is not below the blank {blank}")));
    }
    if frames < label.min_frames() {
        return Err(Error::Infeasible(format!(
            "{frames} frames cannot emit label {:?} (needs {})",
            label.text,
            label.min_frames()
        )));
    }
    let ext: Vec<usize> = std::iter::once(blank)
        .chain(label.indices.iter().flat_map(|&l| [l, blank]))
        .collect();
    let s_len = ext.len();
    let lp = |t: usize, k: usize| log_probs[t * classes + k];
    let skip = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];
    let ninf = T::neg_infinity();

    let mut alpha = vec![ninf; frames * s_len];
    alpha[0] = lp(0, ext[0]);
    alpha[1] = lp(0, ext[1]);
    for t in 1..frames {
        let (prev, cur) = alpha.split_at_mut(t * s_len);
        let prev = &prev[(t - 1) * s_len..];
        for s in 0..s_len {
            let mut a = prev[s];
            if s >= 1 {
                a = lse2(a, prev[s - 1]);
            }
            if skip(s) {
                a = lse2(a, prev[s - 2]);
            }
            cur[s] = if a == ninf { ninf } else { a + lp(t, ext[s]) };
        }
    }

    // beta[t][s]: log-probability of finishing from state s at frame t,
    // excluding frame t's own emission.
    let mut beta = vec![ninf; frames * s_len];
    let last = (frames - 1) * s_len;
    beta[last + s_len - 1] = T::zero();
    beta[last + s_len - 2] = T::zero();
    for t in (0..frames - 1).rev() {
        for s in 0..s_len {
            let next = |s2: usize| beta[(t + 1) * s_len + s2] + lp(t + 1, ext[s2]);
            let mut b = next(s);
            if s + 1 < s_len {
                b = lse2(b, next(s + 1));
            }
            if s + 2 < s_len && skip(s + 2) {
                b = lse2(b, next(s + 2));
            }
            beta[t * s_len + s] = b;
        }
    }

    let log_p = lse2(alpha[last + s_len - 1], alpha[last + s_len - 2]);
    if !log_p.is_finite() {
        return Err(Error::Numeric(format!("label {:?} has zero probability", label.text)));
    }

    let mut log_occupancy = vec![ninf; frames * classes];
    for t in 0..frames {
        for s in 0..s_len {
            let g = alpha[t * s_len + s] + beta[t * s_len + s];
            let slot = &mut log_occupancy[t * classes + ext[s]];
            *slot = lse2(*slot, g - log_p);
        }
    }
    let grad = log_probs
        .iter()
        .zip(&log_occupancy)
        .map(|(&l, &o)| l.exp() - o.exp())
        .collect();
    Ok(CtcOutput { loss: -log_p, grad, log_occupancy })
}

/// Collapses a frame-level path: merge repeats, then drop blanks.
pub fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != blank {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

/// Reference loss by enumerating all `classes^t` paths.
pub fn ctc_brute_force(log_probs: &[f64], classes: usize, label: &[usize]) -> Result<f64> {
    let frames = log_probs.len() / classes;
    let paths = (classes as f64).powi(frames as i32);
    if paths > 1e6 {
        return Err(Error::Size(format!("{paths} paths exceed the enumeration limit")));
    }
    let blank = classes - 1;
    let mut path = vec![0usize; frames];
    let mut total = 0.0f64;
    loop {
        if collapse(&path, blank) == label {
            total += path
                .iter()
                .enumerate()
                .map(|(t, &k)| log_probs[t * classes + k])
                .sum::<f64>()
                .exp();
        }
        // Odometer increment.
        let mut i = 0;
        loop {
            if i == frames {
                return Ok(-total.ln());
            }
            path[i] += 1;
            if path[i] < classes {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

/// Per-frame argmax (lowest index on ties), collapsed.
pub fn greedy_path<T: Real>(log_probs: &[T], classes: usize) -> Vec<usize> {
    let best: Vec<usize> = log_probs
        .chunks_exact(classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, row[0]), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect();
    collapse(&best, classes - 1)
}

pub fn greedy_decode<T: Real>(log_probs: &[T], alphabet: &Alphabet) -> String {
    alphabet.decode(&greedy_path(log_probs, alphabet.num_classes()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rows_from(probs: &[&[f64]]) -> Vec<f64> {
        probs.iter().flat_map(|r| r.iter().map(|p| p.ln())).collect()
    }

    fn random_log_probs(frames: usize, classes: usize, seed: u64) -> Vec<f64> {
        let logits: Vec<f64> = (0..frames * classes)
            .map(|i| 3.0 * (crate::rng::hash_unit(seed, i as u64) - 0.5))
            .collect();
        log_softmax_rows(&logits, classes)
    }

    #[test]
    fn single_frame() {
        let lp = rows_from(&[&[0.3, 0.7]]);
        let out = ctc_loss_grad(&lp, 2, &LabelSeq::new(vec![0], "a").unwrap()).unwrap();
        assert!((out.loss - -(0.3f64).ln()).abs() < 1e-15);
        let certain = [0.0, f64::NEG_INFINITY];
        let out = ctc_loss_grad(&certain, 2, &LabelSeq::new(vec![0], "a").unwrap()).unwrap();
        assert_eq!(out.loss, 0.0);
    }

    #[test]
    fn uniform_two_frames() {
        let lp = rows_from(&[&[0.5, 0.5], &[0.5, 0.5]]);
        let label = LabelSeq::new(vec![0], "a").unwrap();
        // Paths aa, a-, -a.
        let want = -(0.75f64).ln();
        assert!((ctc_loss_grad(&lp, 2, &label).unwrap().loss - want).abs() < 1e-15);
        assert!((ctc_brute_force(&lp, 2, &label.indices).unwrap() - want).abs() < 1e-15);
        assert!((want - 0.28768).abs() < 1e-5);
    }

    #[test]
    fn infeasible_and_unnormalized() {
        let lp = random_log_probs(2, 3, 1);
        let label = LabelSeq::new(vec![0, 0], "aa").unwrap();
        assert!(matches!(ctc_loss_grad(&lp, 3, &label), Err(Error::Infeasible(_))));
        assert_eq!(ctc_brute_force(&lp, 3, &label.indices).unwrap(), f64::INFINITY);
        let bad = vec![0.0; 6];
        let label = LabelSeq::new(vec![0], "a").unwrap();
        assert!(matches!(ctc_loss_grad(&bad, 3, &label), Err(Error::Contract(_))));
        assert!(matches!(ctc_brute_force(&vec![0.0; 13 * 3], 3, &[0]), Err(Error::Size(_))));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (frames, classes) = (4, 3);
        let label = LabelSeq::new(vec![0, 1], "ab").unwrap();
        let logits: Vec<f64> = (0..12).map(|i| crate::rng::hash_unit(5, i) * 2.0 - 1.0).collect();
        let loss = |z: &[f64]| ctc_loss_grad(&log_softmax_rows(z, classes), classes, &label).unwrap().loss;
        let out = ctc_loss_grad(&log_softmax_rows(&logits, classes), classes, &label).unwrap();
        let h = 1e-5;
        for i in 0..frames * classes {
            let mut up = logits.clone();
            up[i] += h;
            let mut down = logits.clone();
            down[i] -= h;
            let numeric = (loss(&up) - loss(&down)) / (2.0 * h);
            let rel = (out.grad[i] - numeric).abs() / out.grad[i].abs().max(numeric.abs()).max(1e-8);
            assert!(rel < 1e-6, "coord {i}: {} vs {numeric}", out.grad[i]);
        }
    }

    #[test]
    fn greedy_examples() {
        let alphabet = Alphabet::new("ab").unwrap();
        let onehot = |path: &[usize]| -> Vec<f64> {
            path.iter()
                .flat_map(|&k| (0..3).map(move |c| if c == k { 0.0 } else { -5.0 }))
                .collect()
        };
        assert_eq!(greedy_decode(&onehot(&[0, 0, 2, 1]), &alphabet), "ab");
        assert_eq!(greedy_decode(&onehot(&[2, 2, 2]), &alphabet), "");
        assert_eq!(greedy_decode(&onehot(&[0, 2, 0]), &alphabet), "aa");
        assert_eq!(greedy_path(&[0.0f64, 0.0, 0.0], 3), vec![0]);
    }

    #[test]
    fn alphabet_defaults() {
        let a = Alphabet::default();
        assert_eq!(a.num_classes(), 28);
        assert_eq!(a.blank(), 27);
        let l = a.encode("bin blue").unwrap();
        assert_eq!(l.indices[3], 26);
        assert_eq!(a.decode(&l.indices), "bin blue");
        assert!(a.encode("Bin").is_err());
        assert!(Alphabet::new("aa").is_err());
    }

    #[test]
    fn tiny_probabilities_stay_finite() {
        let classes = 3;
        let mut lp = Vec::new();
        for _ in 0..6 {
            let tiny = (1e-300f64).ln();
            let rest = (1.0 - 2e-300f64).ln();
            lp.extend_from_slice(&[tiny, tiny, rest]);
        }
        let out = ctc_loss_grad(&lp, classes, &LabelSeq::new(vec![0, 1], "ab").unwrap()).unwrap();
        assert!(out.loss.is_finite() && out.loss > 0.0);
        assert!(out.grad.iter().all(|g| g.is_finite()));
    }

    proptest! {
        #[test]
        fn occupancy_is_normalized(frames in 3usize..12, classes in 2usize..6, seed in 0u64..10_000, len in 1usize..3) {
            let lp = random_log_probs(frames, classes, seed);
            let indices: Vec<usize> = (0..len).map(|i| (crate::rng::hash_u64(seed, 99 + i as u64) as usize) % (classes - 1)).collect();
            let label = LabelSeq::new(indices, "").unwrap();
            prop_assume!(label.min_frames() <= frames);
            let out = ctc_loss_grad(&lp, classes, &label).unwrap();
            prop_assert!(out.loss >= 0.0 && out.loss.is_finite());
            for t in 0..frames {
                let s: f64 = out.log_occupancy[t * classes..(t + 1) * classes].iter().map(|v| v.exp()).sum();
                prop_assert!((s - 1.0).abs() < 1e-8);
            }
        }
    }
}

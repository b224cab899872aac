//! Synthetic "viseme" videos: each letter of a word maps to a mouth-like
//! ellipse, words map to 2-6 frames, sentences come from a slot grammar.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::ctc::{Alphabet, LabelSeq};
use crate::error::{Error, Result};
use crate::rng::{hash_normal, hash_unit, substream};
use crate::tensor::{write_vid5, Shape5, Tensor5};

const COMMANDS: [&str; 4] = ["bin", "lay", "place", "set"];
const COLORS: [&str; 4] = ["blue", "green", "red", "white"];
const PREPOSITIONS: [&str; 4] = ["at", "by", "in", "with"];
const DIGITS: [&str; 10] = ["zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine"];
const ADVERBS: [&str; 4] = ["again", "now", "please", "soon"];

pub const BACKGROUND: f64 = 0.3;
pub const LIP: f64 = 0.9;
pub const NOISE_SIGMA: f64 = 0.02;
const SUPERSAMPLE: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Grammar {
    slots: Vec<Vec<String>>,
}

impl Grammar {
    pub fn new(slots: Vec<Vec<String>>) -> Result<Self> {
        if slots.is_empty() {
            return Err(Error::argument("grammar needs at least one slot"));
        }
        for (k, slot) in slots.iter().enumerate() {
            if slot.is_empty() {
                return Err(Error::argument(format!("grammar slot {} is empty", k + 1)));
            }
            for (i, word) in slot.iter().enumerate() {
                if slot[..i].contains(word) {
                    return Err(Error::argument(format!("word {word:?} repeated in slot {}", k + 1)));
                }
                if word.is_empty() || !word.chars().all(|c| c.is_ascii_lowercase()) {
                    return Err(Error::argument(format!("word {word:?} has no viseme program")));
                }
            }
        }
        Ok(Grammar { slots })
    }

    /// command, color, preposition, letter (no "w"), digit, adverb.
    pub fn grid() -> Self {
        let owned = |words: &[&str]| words.iter().map(|w| w.to_string()).collect::<Vec<_>>();
        let letters = ('a'..='z').filter(|&c| c != 'w').map(String::from).collect();
        Grammar {
            slots: vec![
                owned(&COMMANDS),
                owned(&COLORS),
                owned(&PREPOSITIONS),
                letters,
                owned(&DIGITS),
                owned(&ADVERBS),
            ],
        }
    }

    /// The first `k` slots of the GRID grammar.
    pub fn reduced(k: usize) -> Result<Self> {
        let mut g = Self::grid();
        if k == 0 || k > g.slots.len() {
            return Err(Error::argument(format!("reduced grammar needs 1..=6 slots, got {k}")));
        }
        g.slots.truncate(k);
        Ok(g)
    }

    pub fn slots(&self) -> &[Vec<String>] {
        &self.slots
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.slots.iter().flatten().map(String::as_str)
    }

    pub fn check_sentence<S: AsRef<str>>(&self, words: &[S]) -> Result<()> {
        if words.len() != self.slots.len() {
            return Err(Error::argument(format!(
                "sentence has {} words, grammar has {} slots",
                words.len(),
                self.slots.len()
            )));
        }
        for (k, (w, slot)) in words.iter().zip(&self.slots).enumerate() {
            if !slot.iter().any(|s| s == w.as_ref()) {
                return Err(Error::argument(format!("{:?} is not a slot-{} word", w.as_ref(), k + 1)));
            }
        }
        Ok(())
    }

    /// Frames needed so that any sentence fits both as a video (word
    /// durations plus one neutral frame between words) and as a CTC target.
    pub fn frames_needed(&self) -> usize {
        let gaps = self.slots.len() - 1;
        let video: usize = self
            .slots
            .iter()
            .map(|s| s.iter().map(|w| word_duration(w)).max().unwrap_or(0))
            .sum::<usize>()
            + gaps;
        let label: usize = self
            .slots
            .iter()
            .map(|s| {
                s.iter()
                    .map(|w| w.len() + w.as_bytes().windows(2).filter(|p| p[0] == p[1]).count())
                    .max()
                    .unwrap_or(0)
            })
            .sum::<usize>()
            + gaps;
        video.max(label)
    }
}

/// Frame count of a word: one per letter plus a closing frame, kept in 2..=6.
pub fn word_duration(word: &str) -> usize {
    (word.chars().count() + 1).clamp(2, 6)
}

pub fn sample_sentence(grammar: &Grammar, seed: u64) -> LabelSeq {
    let words: Vec<&str> = grammar
        .slots
        .iter()
        .enumerate()
        .map(|(k, slot)| {
            let u = hash_unit(seed, k as u64);
            slot[((u * slot.len() as f64) as usize).min(slot.len() - 1)].as_str()
        })
        .collect();
    let text = words.join(" ");
    Alphabet::default().encode(&text).expect("grammar words are lowercase ASCII")
}

/// One rendered frame: a filled ellipse centred at `(0.5, 0.5 + offset)` in
/// unit coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameParams {
    pub height: f64,
    pub width: f64,
    pub offset: f64,
}

impl FrameParams {
    pub const NEUTRAL: FrameParams = FrameParams { height: 0.04, width: 0.5, offset: 0.0 };

    /// Mouth shape for a letter. Letters sharing a visual class get nearby
    /// shapes, so words with shared prefixes start alike.
    pub fn for_letter(c: char) -> Result<Self> {
        let (height, width) = match c {
            'a' => (0.55, 0.55),
            'e' => (0.35, 0.7),
            'i' => (0.25, 0.75),
            'o' => (0.5, 0.35),
            'u' => (0.3, 0.25),
            'y' => (0.28, 0.65),
            'b' => (0.06, 0.5),
            'p' => (0.08, 0.55),
            'm' => (0.05, 0.6),
            'f' => (0.14, 0.6),
            'v' => (0.16, 0.55),
            'w' => (0.22, 0.22),
            'q' => (0.26, 0.3),
            'r' => (0.24, 0.4),
            's' => (0.12, 0.72),
            'z' => (0.1, 0.68),
            'c' => (0.2, 0.62),
            'x' => (0.18, 0.7),
            't' => (0.2, 0.5),
            'd' => (0.22, 0.46),
            'n' => (0.18, 0.44),
            'l' => (0.3, 0.45),
            'k' => (0.4, 0.5),
            'g' => (0.42, 0.44),
            'h' => (0.45, 0.6),
            'j' => (0.32, 0.35),
            _ => return Err(Error::argument(format!("no viseme for {c:?}"))),
        };
        let offset = (c as u32 - 'a' as u32) as f64 / 25.0 * 0.16 - 0.08;
        Ok(FrameParams { height, width, offset })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisemeSpec {
    pub frames: Vec<FrameParams>,
}

impl VisemeSpec {
    /// Frame `k` of a `d`-frame word shows letter `k * len / d`.
    pub fn for_word(word: &str) -> Result<Self> {
        let letters: Vec<char> = word.chars().collect();
        if letters.is_empty() {
            return Err(Error::argument("empty word"));
        }
        let d = word_duration(word);
        let frames = (0..d)
            .map(|k| FrameParams::for_letter(letters[k * letters.len() / d]))
            .collect::<Result<_>>()?;
        Ok(VisemeSpec { frames })
    }
}

pub fn viseme_book(grammar: &Grammar) -> Result<HashMap<String, VisemeSpec>> {
    grammar.words().map(|w| Ok((w.to_string(), VisemeSpec::for_word(w)?))).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderConfig {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub noise_sigma: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig { t: 24, h: 32, w: 32, noise_sigma: NOISE_SIGMA }
    }
}

impl RenderConfig {
    pub fn for_grammar(grammar: &Grammar) -> Self {
        let d = RenderConfig::default();
        RenderConfig { t: d.t.max(grammar.frames_needed()), ..d }
    }
}

fn draw_frame(p: FrameParams, h: usize, w: usize, out: &mut [f32]) {
    let (cy, cx) = (0.5 + p.offset, 0.5);
    let (ry, rx) = (p.height / 2.0, p.width / 2.0);
    let s = SUPERSAMPLE as f64;
    for y in 0..h {
        for x in 0..w {
            let mut inside = 0usize;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let py = (y as f64 + (sy as f64 + 0.5) / s) / h as f64;
                    let px = (x as f64 + (sx as f64 + 0.5) / s) / w as f64;
                    let e = ((py - cy) / ry).powi(2) + ((px - cx) / rx).powi(2);
                    inside += usize::from(e <= 1.0);
                }
            }
            let cover = inside as f64 / (s * s);
            out[y * w + x] = (BACKGROUND + (LIP - BACKGROUND) * cover) as f32;
        }
    }
}

/// Renders a sentence as a `(1, 1, t, h, w)` clip: word frames separated by
/// one neutral frame, neutral frames after the last word, then noise.
pub fn render_video(
    sentence: &LabelSeq,
    specs: &HashMap<String, VisemeSpec>,
    noise_seed: u64,
    config: RenderConfig,
) -> Result<Tensor5<f32>> {
    let mut params = Vec::with_capacity(config.t);
    for (i, word) in sentence.text.split_whitespace().enumerate() {
        let spec = specs.get(word).ok_or_else(|| Error::argument(format!("no viseme spec for word {word:?}")))?;
        if i > 0 {
            params.push(FrameParams::NEUTRAL);
        }
        params.extend_from_slice(&spec.frames);
    }
    if params.len() > config.t {
        return Err(Error::argument(format!(
            "sentence {:?} needs {} frames but clips have {}",
            sentence.text,
            params.len(),
            config.t
        )));
    }
    params.resize(config.t, FrameParams::NEUTRAL);
    let shape = Shape5::new(1, 1, config.t, config.h, config.w)?;
    let mut video = Tensor5::<f32>::zeros(shape);
    let frame = config.h * config.w;
    for (t, chunk) in video.data_mut().chunks_mut(frame).enumerate() {
        draw_frame(params[t], config.h, config.w, chunk);
    }
    if config.noise_sigma > 0.0 {
        for (i, v) in video.data_mut().iter_mut().enumerate() {
            let noisy = *v as f64 + config.noise_sigma * hash_normal(noise_seed, i as u64);
            *v = noisy.clamp(0.0, 1.0) as f32;
        }
    }
    Ok(video)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    /// Relative to the corpus directory.
    pub video: PathBuf,
    pub sentence: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const TRAIN_FILE: &str = "train.tsv";
pub const VAL_FILE: &str = "val.tsv";
pub const CORPUS_INFO_FILE: &str = "corpus.cfg";

/// Samples whose split hash falls below 0.1 go to validation.
pub fn is_validation(seed: u64, index: usize) -> bool {
    hash_unit(substream(seed, "split"), index as u64) < 0.1
}

fn write_lines(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for s in samples {
        writeln!(out, "{}\t{}", s.video.display(), s.sentence)?;
    }
    out.flush()?;
    Ok(())
}

/// Writes `n` clips under `videos/`, their sentences under `labels/`, the full
/// manifest, the train/val manifests and a small info file with the slot
/// count and clip length.
pub fn gen_corpus(grammar: &Grammar, n: usize, seed: u64, out_dir: &Path) -> Result<Manifest> {
    if n == 0 {
        return Err(Error::argument("corpus needs at least one sample"));
    }
    let config = RenderConfig::for_grammar(grammar);
    let specs = viseme_book(grammar)?;
    fs::create_dir_all(out_dir.join("videos"))?;
    fs::create_dir_all(out_dir.join("labels"))?;
    let (sentence_seed, noise_seed) = (substream(seed, "sentence"), substream(seed, "noise"));
    let samples = (0..n)
        .into_par_iter()
        .map(|i| {
            let label = sample_sentence(grammar, crate::rng::mix(sentence_seed, i as u64));
            let video = render_video(&label, &specs, crate::rng::mix(noise_seed, i as u64), config)?;
            let rel = PathBuf::from(format!("videos/{i:06}.vid5"));
            let mut file = BufWriter::new(fs::File::create(out_dir.join(&rel))?);
            write_vid5(&video, &mut file)?;
            file.flush()?;
            fs::write(out_dir.join(format!("labels/{i:06}.txt")), format!("{}\n", label.text))?;
            Ok(Sample { video: rel, sentence: label.text })
        })
        .collect::<Result<Vec<_>>>()?;
    write_lines(&out_dir.join(MANIFEST_FILE), &samples)?;
    let mut manifest = Manifest { train: Vec::new(), val: Vec::new() };
    for (i, s) in samples.into_iter().enumerate() {
        if is_validation(seed, i) {
            manifest.val.push(s);
        } else {
            manifest.train.push(s);
        }
    }
    write_lines(&out_dir.join(TRAIN_FILE), &manifest.train)?;
    write_lines(&out_dir.join(VAL_FILE), &manifest.val)?;
    fs::write(
        out_dir.join(CORPUS_INFO_FILE),
        format!("slots = {}\nframes = {}\nseed = {seed}\nsamples = {n}\n", grammar.slots.len(), config.t),
    )?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<Vec<Sample>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let (video, sentence) = line
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("{}:{}: expected <path>\\t<sentence>", path.display(), i + 1)))?;
            Ok(Sample { video: PathBuf::from(video), sentence: sentence.to_string() })
        })
        .collect()
}

/// Slot count recorded by [`gen_corpus`]; falls back to the word count of
/// the first sentence for hand-made manifests.
pub fn corpus_grammar(dir: &Path, samples: &[Sample]) -> Result<Grammar> {
    let info = dir.join(CORPUS_INFO_FILE);
    let slots = if info.exists() {
        let text = fs::read_to_string(&info)?;
        text.lines()
            .filter_map(|l| l.split_once('='))
            .find(|(k, _)| k.trim() == "slots")
            .and_then(|(_, v)| v.trim().parse().ok())
            .ok_or_else(|| Error::Format(format!("{} has no slots entry", info.display())))?
    } else {
        samples
            .first()
            .map(|s| s.sentence.split_whitespace().count())
            .ok_or_else(|| Error::argument("empty manifest"))?
    };
    Grammar::reduced(slots)
}

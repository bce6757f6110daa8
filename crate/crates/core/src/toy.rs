//! Synthetic translation tasks with known answers.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::corpus::write_lines;
use crate::{Error, Result};

pub const TOY_VOCAB: usize = 20;
pub const MIN_LEN: usize = 4;
pub const MAX_LEN: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ToyTask {
    /// Target equals source.
    Copy,
    /// Target is the source read backwards.
    Reversal,
    /// Each source word maps to a fixed target word.
    Mapping,
}

impl fmt::Display for ToyTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ToyTask::Copy => "copy",
            ToyTask::Reversal => "reversal",
            ToyTask::Mapping => "mapping",
        })
    }
}

impl FromStr for ToyTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(ToyTask::Copy),
            "reversal" | "reverse" => Ok(ToyTask::Reversal),
            "mapping" | "map" => Ok(ToyTask::Mapping),
            other => Err(Error::Invalid(format!("unknown toy task {other:?}"))),
        }
    }
}

fn word(i: usize) -> String {
    format!("w{i}")
}

/// Fixed target word for `w{i}` in the mapping task.
fn mapped(i: usize) -> String {
    format!("v{}", (7 * i + 3) % TOY_VOCAB)
}

impl ToyTask {
    pub fn translate(self, src: &[usize]) -> Vec<String> {
        match self {
            ToyTask::Copy => src.iter().map(|&i| word(i)).collect(),
            ToyTask::Reversal => src.iter().rev().map(|&i| word(i)).collect(),
            ToyTask::Mapping => src.iter().map(|&i| mapped(i)).collect(),
        }
    }
}

fn random_sentence(rng: &mut ChaCha8Rng, vocab: usize) -> Vec<usize> {
    let len = rng.gen_range(MIN_LEN..=MAX_LEN);
    (0..len).map(|_| rng.gen_range(0..vocab)).collect()
}

/// `n` distinct random sentences over `vocab` symbols.
fn distinct_sentences(n: usize, vocab: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let s = random_sentence(rng, vocab);
        if seen.insert(s.clone()) {
            out.push(s);
        }
    }
    out
}

pub type TextPairs = Vec<(String, String)>;

/// Disjoint train and test pairs for a toy task.
pub fn toy_split(task: ToyTask, n_train: usize, n_test: usize, seed: u64) -> (TextPairs, TextPairs) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sents = distinct_sentences(n_train + n_test, TOY_VOCAB, &mut rng);
    let mut pairs: Vec<(String, String)> = sents
        .iter()
        .map(|s| {
            let src: Vec<String> = s.iter().map(|&i| word(i)).collect();
            (src.join(" "), task.translate(s).join(" "))
        })
        .collect();
    let test = pairs.split_off(n_train);
    (pairs, test)
}

pub const LANGUAGES: [&str; 3] = ["de", "es", "fr"];
pub const CONCEPTS: usize = 12;

/// The word language `lang` uses for concept `c`; each language permutes
/// the concepts differently.
pub fn lang_word(lang: &str, c: usize) -> String {
    let (mul, add) = match lang {
        "de" => (5, 1),
        "es" => (7, 4),
        _ => (1, 9),
    };
    format!("{lang}{}", (mul * c + add) % CONCEPTS)
}

/// One direction of the multilingual toy corpus.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DirectionCorpus {
    pub src_lang: String,
    pub tgt_lang: String,
    pub pairs: TextPairs,
}

/// All six directions between the three toy languages, each rendered from
/// its own random concept sentences.
pub fn multilingual(n_per_direction: usize, seed: u64) -> Vec<DirectionCorpus> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for s in LANGUAGES {
        for t in LANGUAGES {
            if s == t {
                continue;
            }
            let sents = distinct_sentences(n_per_direction, CONCEPTS, &mut rng);
            let render = |lang: &str, c: &[usize]| {
                c.iter().map(|&i| lang_word(lang, i)).collect::<Vec<_>>().join(" ")
            };
            out.push(DirectionCorpus {
                src_lang: s.to_string(),
                tgt_lang: t.to_string(),
                pairs: sents.iter().map(|c| (render(s, c), render(t, c))).collect(),
            });
        }
    }
    out
}

/// Deterministically shuffled copy, used to hold out monolingual text.
pub fn shuffled<T: Clone>(items: &[T], seed: u64) -> Vec<T> {
    let mut v = items.to_vec();
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    v
}

/// Sizes and seeds of the bundled toy corpora.
pub const COPY_SIZES: (usize, usize, usize) = (500, 100, 100);
pub const TASK_SIZES: (usize, usize, usize) = (2000, 200, 200);
pub const MULTI_PAIRS: usize = 300;

fn write_pairs(dir: &Path, name: &str, pairs: &[(String, String)], out: &mut Vec<PathBuf>) -> Result<()> {
    let (s, t): (Vec<String>, Vec<String>) = pairs.iter().cloned().unzip();
    for (ext, lines) in [("src", s), ("tgt", t)] {
        let rel = PathBuf::from(format!("{name}.{ext}"));
        write_lines(&dir.join(&rel), &lines)?;
        out.push(rel);
    }
    Ok(())
}

/// Write every toy corpus under `dir` and return the relative paths written.
///
/// ```text
/// copy/ reversal/ mapping/   {train,dev,test}.{src,tgt}
/// backtrans/                 train.{src,tgt} (first half of reversal/train)
///                            mono.tgt (targets of the second half)
/// multi/                     train.{s}-{t}.{s|t} for the six directions
/// ```
pub fn write_corpora(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mkdir = |sub: &str| {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))
    };
    for sub in ["copy", "reversal", "mapping", "backtrans", "multi"] {
        mkdir(sub)?;
    }
    for (task, (n_train, n_dev, n_test), seed) in [
        (ToyTask::Copy, COPY_SIZES, 11),
        (ToyTask::Reversal, TASK_SIZES, 12),
        (ToyTask::Mapping, TASK_SIZES, 13),
    ] {
        let (train, mut held) = toy_split(task, n_train, n_dev + n_test, seed);
        let test = held.split_off(n_dev);
        let name = task.to_string();
        write_pairs(dir, &format!("{name}/train"), &train, &mut out)?;
        write_pairs(dir, &format!("{name}/dev"), &held, &mut out)?;
        write_pairs(dir, &format!("{name}/test"), &test, &mut out)?;
        if task == ToyTask::Reversal {
            let half = n_train / 2;
            write_pairs(dir, "backtrans/train", &train[..half], &mut out)?;
            let mono: Vec<String> = train[half..].iter().map(|p| p.1.clone()).collect();
            let rel = PathBuf::from("backtrans/mono.tgt");
            write_lines(&dir.join(&rel), &mono)?;
            out.push(rel);
        }
    }
    for d in multilingual(MULTI_PAIRS, 14) {
        let (s, t) = (&d.src_lang, &d.tgt_lang);
        let (src, tgt): (Vec<String>, Vec<String>) = d.pairs.into_iter().unzip();
        for (lang, lines) in [(s, src), (t, tgt)] {
            let rel = PathBuf::from(format!("multi/train.{s}-{t}.{lang}"));
            write_lines(&dir.join(&rel), &lines)?;
            out.push(rel);
        }
    }
    Ok(out)
}

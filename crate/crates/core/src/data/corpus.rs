use std::fs;
use std::path::Path;

use super::bpe::BpeModel;
use super::vocab::{TagSet, TokenId, Vocab};
use crate::{Error, Result};

/// A tokenized sentence pair with the tags of its translation direction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pair {
    pub src: Vec<TokenId>,
    pub tgt: Vec<TokenId>,
    pub tags: TagSet,
}

impl Pair {
    /// Length of the concatenated sequence.
    pub fn concat_len(&self) -> usize {
        self.src.len() + self.tgt.len() + 3
    }
}

/// A tokenized target-language sentence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MonoSentence {
    pub tokens: Vec<TokenId>,
    pub tags: TagSet,
}

/// Lines of a UTF-8 text file, without trailing newline characters.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

/// Two aligned files, checked for equal line counts.
pub fn read_parallel(src: &Path, tgt: &Path) -> Result<Vec<(String, String)>> {
    let s = read_lines(src)?;
    let t = read_lines(tgt)?;
    if s.len() != t.len() {
        return Err(Error::Data(format!(
            "{} has {} lines but {} has {}",
            src.display(),
            s.len(),
            tgt.display(),
            t.len()
        )));
    }
    Ok(s.into_iter().zip(t).collect())
}

pub fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut text = String::new();
    for l in lines {
        text.push_str(l);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Optional subword segmentation applied before vocabulary lookup.
#[derive(Clone, Debug, Default)]
pub struct Segmenter {
    bpe: Option<BpeModel>,
}

impl Segmenter {
    pub fn new(bpe: Option<BpeModel>) -> Self {
        Self { bpe }
    }

    pub fn segment(&self, line: &str) -> String {
        match &self.bpe {
            Some(b) => b.encode_line(line).join(" "),
            None => line.split_whitespace().collect::<Vec<_>>().join(" "),
        }
    }

    pub fn encode(&self, vocab: &Vocab, line: &str) -> Vec<TokenId> {
        vocab.encode(&self.segment(line))
    }

    /// Inverse of [`Segmenter::segment`] on model output.
    pub fn detokenize(&self, vocab: &Vocab, ids: &[TokenId]) -> String {
        let toks: Vec<&str> = ids
            .iter()
            .map(|&i| vocab.token(i).unwrap_or("<unk>"))
            .collect();
        match &self.bpe {
            Some(_) => super::bpe::decode_tokens(&toks),
            None => toks.join(" "),
        }
    }
}

/// Tokenize aligned text pairs; pairs with an empty side are rejected.
pub fn encode_pairs(
    vocab: &Vocab,
    seg: &Segmenter,
    lines: &[(String, String)],
    tags: TagSet,
) -> Result<Vec<Pair>> {
    lines
        .iter()
        .enumerate()
        .map(|(i, (s, t))| {
            let src = seg.encode(vocab, s);
            let tgt = seg.encode(vocab, t);
            if src.is_empty() || tgt.is_empty() {
                return Err(Error::Data(format!("line {}: empty sentence in pair", i + 1)));
            }
            Ok(Pair { src, tgt, tags })
        })
        .collect()
}

pub fn encode_mono(
    vocab: &Vocab,
    seg: &Segmenter,
    lines: &[String],
    tags: TagSet,
) -> Result<Vec<MonoSentence>> {
    lines
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let tokens = seg.encode(vocab, l);
            if tokens.is_empty() {
                return Err(Error::Data(format!("line {}: empty monolingual sentence", i + 1)));
            }
            Ok(MonoSentence { tokens, tags })
        })
        .collect()
}

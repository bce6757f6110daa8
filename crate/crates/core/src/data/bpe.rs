//! Byte-pair-encoding subword segmentation.
//!
//! Learning works on whitespace-separated words split into characters.
//! Encoded output marks every non-final piece of a word with a trailing
//! `@@`, so decoding is "join with spaces, then drop `@@ `".

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use crate::{Error, Result};

pub const CONTINUATION: &str = "@@";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
}

impl BpeModel {
    pub fn from_merges(merges: Vec<(String, String)>) -> Self {
        let ranks = merges
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i))
            .collect();
        Self { merges, ranks }
    }

    /// Greedily learn up to `num_merges` merges, each time joining the most
    /// frequent adjacent symbol pair (lexicographically smallest on ties).
    /// Stops early once no pair occurs more than once.
    pub fn train<'a>(lines: impl IntoIterator<Item = &'a str>, num_merges: usize) -> Result<Self> {
        let mut word_counts: HashMap<&str, u64> = HashMap::new();
        for line in lines {
            for w in line.split_whitespace() {
                *word_counts.entry(w).or_default() += 1;
            }
        }
        if word_counts.is_empty() {
            return Err(Error::Data("cannot learn BPE from an empty corpus".into()));
        }
        let mut words: Vec<(Vec<String>, u64)> = word_counts
            .into_iter()
            .map(|(w, c)| (w.chars().map(String::from).collect(), c))
            .collect();
        words.sort();

        let mut merges = Vec::with_capacity(num_merges);
        while merges.len() < num_merges {
            let mut pairs: HashMap<(&str, &str), u64> = HashMap::new();
            for (syms, c) in &words {
                for w in syms.windows(2) {
                    *pairs.entry((&w[0], &w[1])).or_default() += c;
                }
            }
            let best = pairs
                .into_iter()
                .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)));
            let Some(((l, r), count)) = best else { break };
            if count < 2 {
                break;
            }
            let pair = (l.to_string(), r.to_string());
            for (syms, _) in &mut words {
                *syms = merge_pair(syms, &pair);
            }
            merges.push(pair);
        }
        Ok(Self::from_merges(merges))
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    /// Every symbol the model can emit for the given training characters:
    /// the single characters seen in merges plus all merge results.
    pub fn symbols(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for (l, r) in &self.merges {
            out.insert(format!("{l}{r}"));
            for s in [l, r] {
                if s.chars().count() == 1 {
                    out.insert(s.clone());
                }
            }
        }
        out
    }

    /// Segment one word, applying merges in learned order.
    pub fn encode_word(&self, word: &str) -> Vec<String> {
        let mut syms: Vec<String> = word.chars().map(String::from).collect();
        loop {
            let best = syms
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0].clone(), w[1].clone())))
                .min()
                .copied();
            let Some(rank) = best else { break };
            syms = merge_pair(&syms, &self.merges[rank]);
        }
        let last = syms.len() - 1;
        for s in &mut syms[..last] {
            s.push_str(CONTINUATION);
        }
        syms
    }

    pub fn encode_line(&self, line: &str) -> Vec<String> {
        line.split_whitespace()
            .flat_map(|w| self.encode_word(w))
            .collect()
    }

    /// FNV-1a over the merge file; recorded in checkpoints.
    pub fn fingerprint(&self) -> u64 {
        self.to_file_string()
            .bytes()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
                (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
            })
    }

    pub fn to_file_string(&self) -> String {
        let mut s = format!("bpe-merges {}\n", self.merges.len());
        for (l, r) in &self.merges {
            s.push_str(&format!("{l} {r}\n"));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        let n: usize = header
            .strip_prefix("bpe-merges ")
            .and_then(|n| n.trim().parse().ok())
            .ok_or_else(|| Error::Data(format!("bad BPE header {header:?}")))?;
        let mut merges = Vec::with_capacity(n);
        for (i, line) in lines.enumerate() {
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(l), Some(r), None) if !l.is_empty() && !r.is_empty() => {
                    merges.push((l.to_string(), r.to_string()))
                }
                _ => {
                    return Err(Error::Data(format!(
                        "bad BPE merge on line {}: {line:?}",
                        i + 2
                    )))
                }
            }
        }
        if merges.len() != n {
            return Err(Error::Data(format!(
                "BPE header announces {n} merges, file has {}",
                merges.len()
            )));
        }
        Ok(Self::from_merges(merges))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

/// Undo BPE segmentation: join tokens and remove continuation markers.
pub fn decode_tokens<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for (i, t) in tokens.iter().enumerate() {
        let t = t.as_ref();
        match t.strip_suffix(CONTINUATION) {
            Some(piece) => out.push_str(piece),
            None => {
                out.push_str(t);
                if i + 1 < tokens.len() {
                    out.push(' ');
                }
            }
        }
    }
    out
}

fn merge_pair(syms: &[String], pair: &(String, String)) -> Vec<String> {
    let mut out = Vec::with_capacity(syms.len());
    let mut i = 0;
    while i < syms.len() {
        if i + 1 < syms.len() && syms[i] == pair.0 && syms[i + 1] == pair.1 {
            out.push(format!("{}{}", pair.0, pair.1));
            i += 2;
        } else {
            out.push(syms[i].clone());
            i += 1;
        }
    }
    out
}

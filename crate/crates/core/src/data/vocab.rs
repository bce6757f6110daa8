use std::collections::HashMap;
use std::fs;
use std::ops::Range;
use std::path::Path;

use crate::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const SRC_BOS: TokenId = 2;
pub const SRC_EOS: TokenId = 3;
pub const TGT_BOS: TokenId = 4;
pub const TGT_EOS: TokenId = 5;
pub const MASK: TokenId = 6;

/// Reserved tokens, in id order.
pub const RESERVED: [&str; 7] = ["<pad>", "<unk>", "<s>", "</s>", "<t>", "</t>", "<m>"];

/// The four boundary symbols framing one concatenated pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TagSet {
    pub src_bos: TokenId,
    pub src_eos: TokenId,
    pub tgt_bos: TokenId,
    pub tgt_eos: TokenId,
}

impl TagSet {
    pub const GENERIC: TagSet = TagSet {
        src_bos: SRC_BOS,
        src_eos: SRC_EOS,
        tgt_bos: TGT_BOS,
        tgt_eos: TGT_EOS,
    };
}

impl Default for TagSet {
    fn default() -> Self {
        Self::GENERIC
    }
}

fn lang_tags(lang: &str) -> [String; 4] {
    [
        format!("<s_{lang}>"),
        format!("</s_{lang}>"),
        format!("<t_{lang}>"),
        format!("</t_{lang}>"),
    ]
}

/// Token ↔ id bijection. Reserved tokens take ids 0..7 in the order of
/// [`RESERVED`], followed by four direction tags per language
/// (`<s_xx> </s_xx> <t_xx> </t_xx>`), followed by ordinary tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    num_special: usize,
}

impl Vocab {
    pub fn new<I, S>(languages: &[String], tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        for lang in languages {
            all.extend(lang_tags(lang));
        }
        let num_special = all.len();
        all.extend(tokens.into_iter().map(Into::into));
        Self::from_tokens(all, num_special)
    }

    fn from_tokens(tokens: Vec<String>, num_special: usize) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Data(format!("invalid vocabulary token {t:?}")));
            }
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self {
            tokens,
            index,
            num_special,
        })
    }

    /// Vocabulary over whitespace tokens of `lines`, most frequent first,
    /// ties broken lexicographically.
    pub fn from_corpus<'a>(
        languages: &[String],
        lines: impl IntoIterator<Item = &'a str>,
    ) -> Result<Self> {
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for line in lines {
            for tok in line.split_whitespace() {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let reserved: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let tags: Vec<String> = languages.iter().flat_map(|l| lang_tags(l)).collect();
        let mut entries: Vec<(&str, u64)> = counts
            .into_iter()
            .filter(|(t, _)| !reserved.iter().any(|r| r == t) && !tags.iter().any(|r| r == t))
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        Self::new(languages, entries.into_iter().map(|(t, _)| t.to_string()))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Ids that are neither reserved nor direction tags.
    pub fn content_range(&self) -> Range<TokenId> {
        self.num_special as TokenId..self.tokens.len() as TokenId
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        (id as usize) < self.num_special
    }

    /// Languages with direction tags, in vocabulary order.
    pub fn languages(&self) -> Vec<String> {
        self.tokens[RESERVED.len()..self.num_special]
            .chunks(4)
            .filter_map(|c| c[0].strip_prefix("<s_")?.strip_suffix('>').map(String::from))
            .collect()
    }

    pub fn direction_tags(&self, src_lang: &str, tgt_lang: &str) -> Result<TagSet> {
        let [sb, se, _, _] = lang_tags(src_lang);
        let [_, _, tb, te] = lang_tags(tgt_lang);
        let get = |t: &str| {
            self.id(t)
                .ok_or_else(|| Error::Data(format!("no direction tag {t} in vocabulary")))
        };
        Ok(TagSet {
            src_bos: get(&sb)?,
            src_eos: get(&se)?,
            tgt_bos: get(&tb)?,
            tgt_eos: get(&te)?,
        })
    }

    /// Map whitespace tokens to ids, unknown tokens to `<unk>`.
    pub fn encode(&self, line: &str) -> Vec<TokenId> {
        line.split_whitespace()
            .map(|t| self.id(t).unwrap_or(UNK))
            .collect()
    }

    /// Map tokens to ids, failing on the first unknown token.
    pub fn encode_strict<'a>(&self, tokens: impl IntoIterator<Item = &'a str>) -> Result<Vec<TokenId>> {
        tokens
            .into_iter()
            .map(|t| {
                self.id(t)
                    .ok_or_else(|| Error::Data(format!("token {t:?} is not in the vocabulary")))
            })
            .collect()
    }

    /// Space-joined tokens; ids outside the vocabulary render as `<unk>`.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(RESERVED[UNK as usize]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// FNV-1a over the token list; recorded in checkpoints to catch
    /// vocabulary mismatches.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in &self.tokens {
            for b in t.bytes().chain(std::iter::once(b'\n')) {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    /// One token per line; line number is the id.
    pub fn to_file_string(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Data(format!(
                "vocabulary must start with the reserved tokens {RESERVED:?}"
            )));
        }
        let mut num_special = RESERVED.len();
        while num_special + 4 <= tokens.len() {
            let Some(lang) = tokens[num_special]
                .strip_prefix("<s_")
                .and_then(|t| t.strip_suffix('>'))
            else {
                break;
            };
            if tokens[num_special..num_special + 4] != lang_tags(lang) {
                break;
            }
            num_special += 4;
        }
        Self::from_tokens(tokens, num_special)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

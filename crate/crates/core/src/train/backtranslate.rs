use crate::data::{Pair, TagSet, TokenId};
use crate::decode::{beam_search, BeamConfig, NextTokenScorer};

/// Synthetic parallel data produced from target-side monolingual text.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BackTranslation {
    /// `(synthetic source, genuine target)` in input order, skips removed.
    pub pairs: Vec<(Vec<TokenId>, Vec<TokenId>)>,
    /// Input indices that produced no usable source.
    pub skipped: Vec<usize>,
}

impl BackTranslation {
    /// As forward-direction training pairs tagged with `tags`.
    pub fn into_pairs(self, tags: TagSet) -> Vec<Pair> {
        self.pairs
            .into_iter()
            .map(|(src, tgt)| Pair { src, tgt, tags })
            .collect()
    }
}

/// Translate each monolingual target sentence with a reverse-direction
/// model. `reverse_tags` are the tags of that reverse direction. Sentences
/// whose decode fails, runs out of length or comes back empty are skipped.
pub fn back_translate<S: NextTokenScorer + ?Sized>(
    reverse: &S,
    mono: &[Vec<TokenId>],
    reverse_tags: TagSet,
    beam: &BeamConfig,
) -> BackTranslation {
    let mut out = BackTranslation::default();
    for (i, e) in mono.iter().enumerate() {
        match beam_search(reverse, e, reverse_tags, beam) {
            Ok(r) if !r.truncated && !r.tokens.is_empty() => out.pairs.push((r.tokens, e.clone())),
            _ => out.skipped.push(i),
        }
    }
    out
}

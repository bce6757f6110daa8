//! Left-to-right search over the target side of a concatenated sequence.
//!
//! The model is fed the whole source up to and including `<t>`; search then
//! only extends target positions. Any [`NextTokenScorer`] can drive the
//! search, which keeps the algorithm testable against hand-written models.

use std::cmp::Ordering;

use tlm_tensor::kernels::log_softmax_row;
use tlm_tensor::Tape;

use crate::data::{ConcatExample, TagSet, TokenId};
use crate::model::{Model, Outputs, SeqInput};
use crate::{Error, Result};

/// Next-token distributions for a batch of target prefixes.
pub trait NextTokenScorer {
    /// Log-probabilities over the vocabulary for the token following each
    /// prefix (prefixes exclude `<t>`).
    fn next_log_probs(
        &self,
        src: &[TokenId],
        tags: TagSet,
        prefixes: &[&[TokenId]],
    ) -> Result<Vec<Vec<f32>>>;
}

/// `<s> src </s> <t> prefix`, with its boundary.
pub fn decoder_input(src: &[TokenId], tags: TagSet, prefix: &[TokenId]) -> (Vec<TokenId>, usize) {
    let mut ids = Vec::with_capacity(src.len() + prefix.len() + 3);
    ids.push(tags.src_bos);
    ids.extend_from_slice(src);
    ids.push(tags.src_eos);
    ids.push(tags.tgt_bos);
    ids.extend_from_slice(prefix);
    (ids, src.len() + 2)
}

impl NextTokenScorer for Model {
    fn next_log_probs(
        &self,
        src: &[TokenId],
        tags: TagSet,
        prefixes: &[&[TokenId]],
    ) -> Result<Vec<Vec<f32>>> {
        let seqs: Vec<(Vec<TokenId>, usize)> = prefixes
            .iter()
            .map(|p| decoder_input(src, tags, p))
            .collect();
        let inputs: Vec<SeqInput> = seqs
            .iter()
            .map(|(ids, b)| SeqInput {
                ids,
                boundary: *b,
            })
            .collect();
        let mut tape = Tape::inference();
        let bound = self.bind(&mut tape);
        let fwd = self.forward(&mut tape, &bound, &inputs, Outputs::Last, None)?;
        let logits = tape.value(fwd.logits);
        let vocab = logits.shape()[1];
        Ok((0..prefixes.len())
            .map(|r| {
                let mut lp = vec![0.0; vocab];
                log_softmax_row(logits.row(r), &mut lp);
                lp
            })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamConfig {
    pub beam_size: usize,
    /// Length-normalization exponent: hypotheses are ranked by
    /// `log_prob / len^alpha`.
    pub alpha: f64,
    /// Maximum number of generated tokens; `None` means `2·|src| + 10`.
    pub max_len: Option<usize>,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            beam_size: 4,
            alpha: 0.6,
            max_len: None,
        }
    }
}

impl BeamConfig {
    pub fn max_len_for(&self, src_len: usize) -> usize {
        self.max_len.unwrap_or(2 * src_len + 10)
    }
}

/// A partial or complete target sequence during search.
#[derive(Clone, Debug, PartialEq)]
pub struct BeamHypothesis {
    /// Generated tokens, including the final `</t>` when finished.
    pub tokens: Vec<TokenId>,
    pub log_prob: f64,
    pub finished: bool,
}

impl BeamHypothesis {
    pub fn normalized(&self, alpha: f64) -> f64 {
        if alpha == 0.0 || self.tokens.is_empty() {
            self.log_prob
        } else {
            self.log_prob / (self.tokens.len() as f64).powf(alpha)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeResult {
    /// Target tokens without the closing tag.
    pub tokens: Vec<TokenId>,
    pub log_prob: f64,
    pub score: f64,
    /// No hypothesis finished within the length limit.
    pub truncated: bool,
}

/// Higher score first; ties go to the lexicographically smaller token
/// sequence, then to the shorter one.
fn rank_order(a: &(f64, &[TokenId]), b: &(f64, &[TokenId])) -> Ordering {
    b.0.total_cmp(&a.0)
        .then_with(|| a.1.cmp(b.1))
        .then_with(|| a.1.len().cmp(&b.1.len()))
}

/// Beam search in which finished hypotheses keep their beam slot: once
/// `k` hypotheses have finished only `beam_size − k` stay alive, so a beam
/// of one is exactly greedy search.
pub fn beam_search<S: NextTokenScorer + ?Sized>(
    scorer: &S,
    src: &[TokenId],
    tags: TagSet,
    cfg: &BeamConfig,
) -> Result<DecodeResult> {
    if cfg.beam_size == 0 {
        return Err(Error::Invalid("beam size must be at least 1".into()));
    }
    let max_len = cfg.max_len_for(src.len());
    let mut alive = vec![BeamHypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    }];
    let mut finished: Vec<BeamHypothesis> = Vec::new();
    for _ in 0..max_len {
        let slots = cfg.beam_size - finished.len();
        if alive.is_empty() || slots == 0 {
            break;
        }
        let prefixes: Vec<&[TokenId]> = alive.iter().map(|h| h.tokens.as_slice()).collect();
        let dists = scorer.next_log_probs(src, tags, &prefixes)?;
        let mut cands: Vec<(f64, Vec<TokenId>)> = Vec::with_capacity(alive.len() * 8);
        for (h, lp) in alive.iter().zip(&dists) {
            for (tok, &l) in lp.iter().enumerate() {
                if l == f32::NEG_INFINITY {
                    continue;
                }
                let mut t = h.tokens.clone();
                t.push(tok as TokenId);
                cands.push((h.log_prob + l as f64, t));
            }
        }
        cands.sort_by(|a, b| rank_order(&(a.0, &a.1), &(b.0, &b.1)));
        cands.truncate(slots);
        alive.clear();
        for (log_prob, tokens) in cands {
            let done = *tokens.last().expect("non-empty") == tags.tgt_eos;
            let h = BeamHypothesis {
                tokens,
                log_prob,
                finished: done,
            };
            if done {
                finished.push(h);
            } else {
                alive.push(h);
            }
        }
    }
    let (pool, truncated) = if finished.is_empty() {
        (alive, true)
    } else {
        (finished, false)
    };
    let best = pool
        .into_iter()
        .map(|h| (h.normalized(cfg.alpha), h))
        .min_by(|a, b| rank_order(&(a.0, &a.1.tokens), &(b.0, &b.1.tokens)))
        .ok_or_else(|| Error::Invalid("search produced no hypothesis".into()))?;
    let (score, h) = best;
    let mut tokens = h.tokens;
    if h.finished {
        tokens.pop();
    }
    Ok(DecodeResult {
        tokens,
        log_prob: h.log_prob,
        score,
        truncated,
    })
}

/// Pick the most probable token at every step (smallest id on ties). The
/// score is the unnormalized log-probability.
pub fn greedy<S: NextTokenScorer + ?Sized>(
    scorer: &S,
    src: &[TokenId],
    tags: TagSet,
    max_len: usize,
) -> Result<DecodeResult> {
    let mut tokens = Vec::new();
    let mut log_prob = 0.0f64;
    for _ in 0..max_len {
        let lp = scorer.next_log_probs(src, tags, &[&tokens])?.remove(0);
        let (best, &l) = lp
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .ok_or_else(|| Error::Invalid("empty distribution".into()))?;
        log_prob += l as f64;
        if best as TokenId == tags.tgt_eos {
            return Ok(DecodeResult {
                tokens,
                log_prob,
                score: log_prob,
                truncated: false,
            });
        }
        tokens.push(best as TokenId);
    }
    Ok(DecodeResult {
        tokens,
        log_prob,
        score: log_prob,
        truncated: true,
    })
}

/// Joint `log P(f, e)` and conditional `log P(e | f)` of candidate targets.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairScore {
    pub joint: f64,
    pub conditional: f64,
}

/// Score every candidate both ways. The joint score adds the model's
/// next-token log-probabilities over the source span, which never see the
/// target and so contribute the same amount to every candidate.
pub fn score_joint_vs_conditional(
    model: &Model,
    src: &[TokenId],
    tags: TagSet,
    candidates: &[Vec<TokenId>],
) -> Result<Vec<PairScore>> {
    if candidates.is_empty() {
        return Ok(Vec::new());
    }
    let examples: Vec<ConcatExample> = candidates
        .iter()
        .map(|c| {
            ConcatExample::concat_pair(src, c, tags)
                .map(|e| e.with_reconstruction(crate::data::Reconstruction::Lm))
        })
        .collect::<Result<_>>()?;
    let inputs: Vec<SeqInput> = examples
        .iter()
        .map(|e| SeqInput {
            ids: e.input_ids(),
            boundary: e.boundary(),
        })
        .collect();
    let mut tape = Tape::inference();
    let bound = model.bind(&mut tape);
    let fwd = model.forward(&mut tape, &bound, &inputs, Outputs::All, None)?;
    let logits = tape.value(fwd.logits);
    let mut lp = vec![0.0f32; logits.shape()[1]];
    let mut out = Vec::with_capacity(candidates.len());
    for (s, ex) in examples.iter().enumerate() {
        let (mut joint, mut cond) = (0.0f64, 0.0f64);
        for p in 0..ex.len() {
            if ex.loss_weights()[p] == 0.0 {
                continue;
            }
            let Some(r) = fwd.row(s, p) else { continue };
            log_softmax_row(logits.row(r), &mut lp);
            let l = lp[ex.target_ids()[p] as usize] as f64;
            joint += l;
            if p >= ex.boundary() {
                cond += l;
            }
        }
        out.push(PairScore {
            joint,
            conditional: cond,
        });
    }
    Ok(out)
}

/// Candidate indices from best to worst (stable on ties).
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

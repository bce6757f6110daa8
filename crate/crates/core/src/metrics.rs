//! Corpus BLEU and perplexity.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use tlm_tensor::kernels::log_softmax_row;
use tlm_tensor::Tape;

use crate::data::{ConcatExample, Reconstruction};
use crate::model::{Model, Outputs, SeqInput};
use crate::{Error, Result};

const MAX_ORDER: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct BleuReport {
    /// 0–100.
    pub bleu: f64,
    /// Modified n-gram precisions p₁..p₄ as fractions.
    pub precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl fmt::Display for BleuReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p: Vec<String> = self
            .precisions
            .iter()
            .map(|p| format!("{:.1}", 100.0 * p))
            .collect();
        write!(
            f,
            "BLEU {:.2} ({}, BP={:.4}, hyp_len={}, ref_len={})",
            self.bleu,
            p.join("/"),
            self.brevity_penalty,
            self.hyp_len,
            self.ref_len
        )
    }
}

fn ngram_counts<'t, 'a>(toks: &'t [&'a str], n: usize) -> HashMap<&'t [&'a str], usize> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w).or_default() += 1;
        }
    }
    m
}

/// Corpus-level BLEU-4 with clipped counts, a single reference per
/// hypothesis and no smoothing. Sentences are split on whitespace.
pub fn corpus_bleu<H: AsRef<str>, R: AsRef<str>>(hyps: &[H], refs: &[R]) -> Result<BleuReport> {
    if hyps.len() != refs.len() {
        return Err(Error::Data(format!(
            "{} hypotheses but {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if hyps.is_empty() {
        return Err(Error::Data("BLEU of an empty corpus".into()));
    }
    let mut matched = [0usize; MAX_ORDER];
    let mut total = [0usize; MAX_ORDER];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hyps.iter().zip(refs) {
        let h: Vec<&str> = h.as_ref().split_whitespace().collect();
        let r: Vec<&str> = r.as_ref().split_whitespace().collect();
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=MAX_ORDER {
            let hc = ngram_counts(&h, n);
            let rc = ngram_counts(&r, n);
            for (g, c) in hc {
                matched[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
            }
            total[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    let mut precisions = [0.0; MAX_ORDER];
    for n in 0..MAX_ORDER {
        if total[n] > 0 {
            precisions[n] = matched[n] as f64 / total[n] as f64;
        }
    }
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp().min(1.0)
    };
    let bleu = if precisions.iter().all(|&p| p > 0.0) {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64;
        100.0 * brevity_penalty * log_mean.exp()
    } else {
        0.0
    };
    Ok(BleuReport {
        bleu,
        precisions,
        brevity_penalty,
        hyp_len,
        ref_len,
    })
}

/// Which positions count towards perplexity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum PplScope {
    /// Target-side predictions only; comparable across architectures.
    #[default]
    TargetOnly,
    /// Next-token predictions over the whole concatenation, i.e. the joint
    /// `P(f, e)`. Equal to `TargetOnly` for enc-dec models, which make no
    /// source-side predictions.
    FullSequence,
}

impl fmt::Display for PplScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PplScope::TargetOnly => "target",
            PplScope::FullSequence => "full",
        })
    }
}

impl FromStr for PplScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "target" | "target-only" => Ok(PplScope::TargetOnly),
            "full" | "full-sequence" => Ok(PplScope::FullSequence),
            other => Err(Error::Invalid(format!(
                "unknown perplexity scope {other:?} (expected target or full)"
            ))),
        }
    }
}

/// Summed negative log-likelihood and the number of scored positions.
pub fn total_nll(
    model: &Model,
    examples: &[ConcatExample],
    scope: PplScope,
    max_batch_tokens: usize,
) -> Result<(f64, usize)> {
    let mut nll = 0.0f64;
    let mut count = 0usize;
    let mut start = 0;
    while start < examples.len() {
        let mut end = start;
        let mut tokens = 0;
        while end < examples.len() && (end == start || tokens + examples[end].len() <= max_batch_tokens)
        {
            tokens += examples[end].len();
            end += 1;
        }
        let chunk: Vec<ConcatExample> = examples[start..end]
            .iter()
            .map(|ex| {
                let ex = if scope == PplScope::FullSequence && ex.boundary() > 0 {
                    ConcatExample::from_parts(
                        ex.input_ids().to_vec(),
                        ex.target_ids().to_vec(),
                        ex.loss_weights()
                            .iter()
                            .enumerate()
                            .map(|(p, &w)| if p >= ex.boundary() { w } else { 0.0 })
                            .collect(),
                        ex.boundary(),
                    )
                    .map(|e| e.with_reconstruction(Reconstruction::Lm))
                } else {
                    Ok(ex.clone())
                };
                ex
            })
            .collect::<Result<_>>()?;
        let (n, c) = chunk_nll(model, &chunk, scope)?;
        nll += n;
        count += c;
        start = end;
    }
    Ok((nll, count))
}

fn chunk_nll(model: &Model, chunk: &[ConcatExample], scope: PplScope) -> Result<(f64, usize)> {
    let mut tape = Tape::inference();
    let bound = model.bind(&mut tape);
    let inputs: Vec<SeqInput> = chunk
        .iter()
        .map(|e| SeqInput {
            ids: e.input_ids(),
            boundary: e.boundary(),
        })
        .collect();
    let fwd = model.forward(&mut tape, &bound, &inputs, Outputs::All, None)?;
    let logits = tape.value(fwd.logits);
    let vocab = logits.shape()[1];
    let mut logp = vec![0.0f32; vocab];
    let mut nll = 0.0f64;
    let mut count = 0;
    for (s, ex) in chunk.iter().enumerate() {
        for p in 0..ex.len() {
            let w = ex.loss_weights()[p];
            let in_scope = p >= ex.boundary() || scope == PplScope::FullSequence;
            if w == 0.0 || !in_scope {
                continue;
            }
            let Some(r) = fwd.row(s, p) else { continue };
            log_softmax_row(logits.row(r), &mut logp);
            nll -= logp[ex.target_ids()[p] as usize] as f64;
            count += 1;
        }
    }
    Ok((nll, count))
}

/// `exp` of the mean negative log-likelihood over the scope's positions.
pub fn perplexity(model: &Model, examples: &[ConcatExample], scope: PplScope) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Data("perplexity of an empty corpus".into()));
    }
    let (nll, count) = total_nll(model, examples, scope, 4096)?;
    if count == 0 {
        return Err(Error::Data("no scored positions for perplexity".into()));
    }
    let ppl = (nll / count as f64).exp();
    if !ppl.is_finite() {
        return Err(Error::Numeric {
            step: 0,
            msg: "perplexity is not finite".into(),
        });
    }
    Ok(ppl)
}

use tlm_tensor::{Tape, Var};

use crate::data::ConcatExample;
use crate::model::Forward;
use crate::{Error, Result};

/// The three loss statistics of one batch and the variable to minimize.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub l_mt: f64,
    pub l_re: f64,
    pub l_tlm: f64,
    pub lambda: f64,
    pub total: Var,
}

/// Per-row target ids and weights for the two loss terms.
pub(crate) fn loss_rows(
    fwd: &Forward,
    examples: &[&ConcatExample],
    rows: usize,
) -> (Vec<usize>, Vec<f32>, Vec<f32>) {
    let mut targets = vec![0usize; rows];
    let mut w_mt = vec![0.0f32; rows];
    let mut w_re = vec![0.0f32; rows];
    for (s, ex) in examples.iter().enumerate() {
        for p in 0..ex.len() {
            let Some(r) = fwd.row(s, p) else { continue };
            targets[r] = ex.target_ids()[p] as usize;
            let w = ex.loss_weights()[p];
            if p >= ex.boundary() {
                w_mt[r] = w;
            } else {
                w_re[r] = w;
            }
        }
    }
    (targets, w_mt, w_re)
}

/// `L_TLM = λ·L_RE + L_MT` over a packed batch.
///
/// `L_MT` averages target-side loss positions, `L_RE` source-side ones.
/// With `λ = 0` the reconstruction term is left out of the graph, so its
/// gradient contribution is exactly zero.
pub fn compute_tlm_loss(
    tape: &mut Tape,
    fwd: &Forward,
    examples: &[&ConcatExample],
    lambda: f64,
    eps_mt: f32,
    eps_re: f32,
) -> Result<LossParts> {
    if examples.len() + 1 != fwd.offsets.len() {
        return Err(Error::Invalid(format!(
            "{} examples for a forward pass over {} sequences",
            examples.len(),
            fwd.offsets.len() - 1
        )));
    }
    if !(lambda >= 0.0) {
        return Err(Error::Invalid(format!("lambda {lambda} must be non-negative")));
    }
    let rows = tape.value(fwd.logits).shape()[0];
    let (targets, w_mt, w_re) = loss_rows(fwd, examples, rows);
    if w_mt.iter().all(|&w| w == 0.0) {
        return Err(Error::Invalid("batch has no target-side loss positions".into()));
    }
    let mt = tape.cross_entropy(fwd.logits, &targets, &w_mt, eps_mt)?;
    let re = tape.cross_entropy(fwd.logits, &targets, &w_re, eps_re)?;
    let total = if lambda == 0.0 {
        mt
    } else {
        tape.lin_comb(&[(mt, 1.0), (re, lambda as f32)])?
    };
    Ok(LossParts {
        l_mt: tape.value(mt).data()[0] as f64,
        l_re: tape.value(re).data()[0] as f64,
        l_tlm: tape.value(total).data()[0] as f64,
        lambda,
        total,
    })
}

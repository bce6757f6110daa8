//! The encoder-only TLM network and the encoder-decoder baseline.
//!
//! Both share one token embedding table over the joint vocabulary, use
//! sinusoidal positions and pre-norm residual blocks, and (by default) tie
//! the output projection to the embedding table. Batches are packed: the
//! sequences of a batch are stacked row-wise with no padding, and attention
//! runs per sequence under that sequence's own mask.

mod checkpoint;
mod config;

use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tlm_tensor::{AttnSegment, Tape, Tensor, Var};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint};
pub use config::{ModelConfig, ParamCount, Variant};

use crate::data::TokenId;
use crate::mask::{AttentionMask, BoolMatrix};
use crate::{Error, Result};

const LN_EPS: f32 = 1e-5;
const ENC_LAYER_PARAMS: usize = 10;
const DEC_LAYER_PARAMS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    Embedding,
    Xavier,
    Ones,
    Zeros,
}

fn push_norm(specs: &mut Vec<(String, Vec<usize>, Init)>, name: &str, d: usize) {
    specs.push((format!("{name}.gain"), vec![d], Init::Ones));
    specs.push((format!("{name}.bias"), vec![d], Init::Zeros));
}

fn push_attn(specs: &mut Vec<(String, Vec<usize>, Init)>, name: &str, d: usize) {
    for w in ["wq", "wk", "wv", "wo"] {
        specs.push((format!("{name}.{w}"), vec![d, d], Init::Xavier));
    }
}

fn push_ffn(specs: &mut Vec<(String, Vec<usize>, Init)>, name: &str, d: usize, d_ff: usize) {
    specs.push((format!("{name}.w1"), vec![d, d_ff], Init::Xavier));
    specs.push((format!("{name}.w2"), vec![d_ff, d], Init::Xavier));
}

/// Names and shapes of every parameter tensor, in storage order.
fn param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.d_model;
    let mut specs = vec![("embed".to_string(), vec![cfg.vocab_size, d], Init::Embedding)];
    if !cfg.tie_embeddings {
        specs.push(("output".to_string(), vec![cfg.vocab_size, d], Init::Embedding));
    }
    let encoder = |specs: &mut Vec<_>, prefix: &str, n: usize| {
        for i in 0..n {
            let l = format!("{prefix}{i}");
            push_norm(specs, &format!("{l}.ln1"), d);
            push_attn(specs, &format!("{l}.attn"), d);
            push_norm(specs, &format!("{l}.ln2"), d);
            push_ffn(specs, &format!("{l}.ffn"), d, cfg.d_ff);
        }
    };
    match cfg.variant {
        Variant::EncOnly { layers } => encoder(&mut specs, "layer", layers),
        Variant::EncDec {
            enc_layers,
            dec_layers,
        } => {
            encoder(&mut specs, "enc", enc_layers);
            for i in 0..dec_layers {
                let l = format!("dec{i}");
                push_norm(&mut specs, &format!("{l}.ln1"), d);
                push_attn(&mut specs, &format!("{l}.self"), d);
                push_norm(&mut specs, &format!("{l}.ln2"), d);
                push_attn(&mut specs, &format!("{l}.cross"), d);
                push_norm(&mut specs, &format!("{l}.ln3"), d);
                push_ffn(&mut specs, &format!("{l}.ffn"), d, cfg.d_ff);
            }
        }
    }
    specs
}

/// One sequence of a batch: token ids and the index of the first
/// target-side position (0 for monolingual examples).
#[derive(Clone, Copy, Debug)]
pub struct SeqInput<'a> {
    pub ids: &'a [TokenId],
    pub boundary: usize,
}

/// Which positions get output logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outputs {
    /// Every position that has a prediction in this architecture.
    All,
    /// Only the final position of each sequence.
    Last,
}

/// Logits of a packed batch and the map from rows back to positions.
#[derive(Clone, Debug)]
pub struct Forward {
    pub logits: Var,
    /// Sequence position of each logits row, per sequence: rows
    /// `offsets[s]..offsets[s+1]` hold positions `first_pos[s]..`.
    pub offsets: Vec<usize>,
    pub first_pos: Vec<usize>,
}

impl Forward {
    pub fn row(&self, seq: usize, pos: usize) -> Option<usize> {
        let first = self.first_pos[seq];
        let r = self.offsets[seq] + pos.checked_sub(first)?;
        (r < self.offsets[seq + 1]).then_some(r)
    }
}

/// Parameters bound to a tape for one forward pass.
pub struct Bound {
    pub vars: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model as f32;
        let (names, params) = param_specs(&config)
            .into_iter()
            .map(|(name, shape, init)| {
                let n: usize = shape.iter().product();
                let data: Vec<f32> = match init {
                    Init::Ones => vec![1.0; n],
                    Init::Zeros => vec![0.0; n],
                    Init::Embedding => {
                        let a = 3f32.sqrt() / d.sqrt();
                        (0..n).map(|_| rng.gen_range(-a..a)).collect()
                    }
                    Init::Xavier => {
                        let a = (6.0 / (shape[0] + shape[1]) as f32).sqrt();
                        (0..n).map(|_| rng.gen_range(-a..a)).collect()
                    }
                };
                (name, Tensor::new(shape, data).expect("positive dims"))
            })
            .unzip();
        Ok(Self {
            config,
            names,
            params,
        })
    }

    /// A model whose every weight is zero: all logits vanish, so every
    /// prediction is the uniform distribution.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        for p in &mut m.params {
            p.data_mut().fill(0.0);
        }
        Ok(m)
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        names: Vec<String>,
        params: Vec<Tensor>,
    ) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != names.len() {
            return Err(Error::Checkpoint(format!(
                "config expects {} tensors, found {}",
                specs.len(),
                names.len()
            )));
        }
        for ((name, shape, _), (n, p)) in specs.iter().zip(names.iter().zip(&params)) {
            if name != n || shape.as_slice() != p.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {n} {:?} does not match expected {name} {shape:?}",
                    p.shape()
                )));
            }
        }
        Ok(Self {
            config,
            names,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Change the source-block variant used by the TLM mask.
    pub fn set_source_mask(&mut self, variant: crate::mask::SourceMask) {
        self.config.source_mask = variant;
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// Number of floats actually allocated for parameters.
    pub fn num_floats(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Record parameters on `tape`: trainable when the tape records
    /// gradients, constant otherwise.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let grads = tape.grad_enabled();
        let vars = self
            .params
            .iter()
            .map(|p| {
                if grads {
                    tape.param(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Gradients of every parameter after `tape.backward`, zeros where
    /// a parameter did not influence the loss.
    pub fn gradients(&self, tape: &Tape, bound: &Bound) -> Vec<Vec<f32>> {
        bound
            .vars
            .iter()
            .zip(&self.params)
            .map(|(&v, p)| match tape.grad(v) {
                Some(g) => g.to_vec(),
                None => vec![0.0; p.numel()],
            })
            .collect()
    }

    /// Forward pass over a packed batch, dispatching on the variant.
    /// Dropout is applied only when `rng` is given.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        batch: &[SeqInput],
        outputs: Outputs,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Forward> {
        if batch.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        for s in batch {
            if s.ids.is_empty() || s.boundary > s.ids.len() {
                return Err(Error::Invalid(format!(
                    "sequence of length {} with boundary {}",
                    s.ids.len(),
                    s.boundary
                )));
            }
            if s.ids.len() > self.config.max_len {
                return Err(Error::Invalid(format!(
                    "sequence length {} exceeds max_len {}",
                    s.ids.len(),
                    self.config.max_len
                )));
            }
            if let Some(&bad) = s.ids.iter().find(|&&t| t as usize >= self.config.vocab_size) {
                return Err(Error::Invalid(format!(
                    "token id {bad} outside vocabulary of {}",
                    self.config.vocab_size
                )));
            }
        }
        match self.config.variant {
            Variant::EncOnly { layers } => self.forward_tlm(tape, bound, batch, layers, outputs, rng),
            Variant::EncDec {
                enc_layers,
                dec_layers,
            } => self.forward_encdec(tape, bound, batch, enc_layers, dec_layers, outputs, rng),
        }
    }

    /// Forward with explicit masks, one per sequence (TLM only). Used to
    /// probe the network under masks other than the configured one.
    pub fn forward_tlm_masked(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        batch: &[(&[TokenId], &AttentionMask)],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Forward> {
        let Variant::EncOnly { layers } = self.config.variant else {
            return Err(Error::Invalid("explicit masks need an enc-only model".into()));
        };
        for (ids, m) in batch {
            if m.size() != ids.len() {
                return Err(Error::Invalid(format!(
                    "mask of size {} for a sequence of length {}",
                    m.size(),
                    ids.len()
                )));
            }
        }
        let seqs: Vec<&[TokenId]> = batch.iter().map(|(ids, _)| *ids).collect();
        let masks: Vec<&BoolMatrix> = batch.iter().map(|(_, m)| m.matrix()).collect();
        self.run_tlm(tape, bound, &seqs, &masks, layers, Outputs::All, rng)
    }

    fn forward_tlm(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        batch: &[SeqInput],
        layers: usize,
        outputs: Outputs,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Forward> {
        let masks: Vec<AttentionMask> = batch
            .iter()
            .map(|s| {
                if s.boundary == 0 || s.boundary == s.ids.len() {
                    Ok(AttentionMask::causal(s.ids.len()))
                } else {
                    AttentionMask::tlm(s.boundary, s.ids.len() - s.boundary, self.config.source_mask)
                }
            })
            .collect::<Result<_>>()?;
        let seqs: Vec<&[TokenId]> = batch.iter().map(|s| s.ids).collect();
        let mats: Vec<&BoolMatrix> = masks.iter().map(AttentionMask::matrix).collect();
        self.run_tlm(tape, bound, &seqs, &mats, layers, outputs, rng)
    }

    #[allow(clippy::too_many_arguments)]
    fn run_tlm(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        seqs: &[&[TokenId]],
        masks: &[&BoolMatrix],
        layers: usize,
        outputs: Outputs,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Forward> {
        let v = &bound.vars;
        let (x, offsets) = self.embed(tape, v[0], seqs, rng.as_deref_mut())?;
        let segments: Vec<AttnSegment> = seqs
            .iter()
            .zip(masks)
            .enumerate()
            .map(|(i, (s, m))| AttnSegment {
                q_start: offsets[i],
                q_len: s.len(),
                k_start: offsets[i],
                k_len: s.len(),
                allow: m.to_shared(),
            })
            .collect();
        let base = self.layer_base();
        let mut h = x;
        for l in 0..layers {
            let p = &v[base + l * ENC_LAYER_PARAMS..][..ENC_LAYER_PARAMS];
            h = self.encoder_layer(tape, p, h, &segments, rng.as_deref_mut())?;
        }
        let h = tape.layer_norm(h, None, None, LN_EPS)?;
        let first = vec![0; seqs.len()];
        self.project(tape, bound, h, offsets, first, seqs, outputs)
    }

    #[allow(clippy::too_many_arguments)]
    fn forward_encdec(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        batch: &[SeqInput],
        enc_layers: usize,
        dec_layers: usize,
        outputs: Outputs,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Forward> {
        if let Some(s) = batch.iter().find(|s| s.boundary == 0 || s.boundary == s.ids.len()) {
            return Err(Error::Invalid(format!(
                "enc-dec needs a source and a target span (length {}, boundary {})",
                s.ids.len(),
                s.boundary
            )));
        }
        let v = &bound.vars;
        let srcs: Vec<&[TokenId]> = batch.iter().map(|s| &s.ids[..s.boundary]).collect();
        let tgts: Vec<&[TokenId]> = batch.iter().map(|s| &s.ids[s.boundary..]).collect();

        let (xs, src_off) = self.embed(tape, v[0], &srcs, rng.as_deref_mut())?;
        let enc_segs: Vec<AttnSegment> = srcs
            .iter()
            .enumerate()
            .map(|(i, s)| full_segment(src_off[i], s.len(), src_off[i], s.len()))
            .collect();
        let base = self.layer_base();
        let mut h = xs;
        for l in 0..enc_layers {
            let p = &v[base + l * ENC_LAYER_PARAMS..][..ENC_LAYER_PARAMS];
            h = self.encoder_layer(tape, p, h, &enc_segs, rng.as_deref_mut())?;
        }
        let memory = tape.layer_norm(h, None, None, LN_EPS)?;

        let (xt, tgt_off) = self.embed(tape, v[0], &tgts, rng.as_deref_mut())?;
        let self_segs: Vec<AttnSegment> = tgts
            .iter()
            .enumerate()
            .map(|(i, t)| AttnSegment {
                q_start: tgt_off[i],
                q_len: t.len(),
                k_start: tgt_off[i],
                k_len: t.len(),
                allow: AttentionMask::causal(t.len()).matrix().to_shared(),
            })
            .collect();
        let cross_segs: Vec<AttnSegment> = tgts
            .iter()
            .enumerate()
            .map(|(i, t)| full_segment(tgt_off[i], t.len(), src_off[i], srcs[i].len()))
            .collect();
        let dbase = base + enc_layers * ENC_LAYER_PARAMS;
        let mut h = xt;
        for l in 0..dec_layers {
            let p = &v[dbase + l * DEC_LAYER_PARAMS..][..DEC_LAYER_PARAMS];
            h = self.decoder_layer(tape, p, h, memory, &self_segs, &cross_segs, rng.as_deref_mut())?;
        }
        let h = tape.layer_norm(h, None, None, LN_EPS)?;
        let first = batch.iter().map(|s| s.boundary).collect();
        self.project(tape, bound, h, tgt_off, first, &tgts, outputs)
    }

    fn layer_base(&self) -> usize {
        if self.config.tie_embeddings {
            1
        } else {
            2
        }
    }

    /// Token embeddings scaled by √d plus sinusoidal positions, positions
    /// counted from 0 within each sequence. Returns row offsets with a
    /// trailing total.
    fn embed(
        &self,
        tape: &mut Tape,
        table: Var,
        seqs: &[&[TokenId]],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, Vec<usize>)> {
        let d = self.config.d_model;
        let mut ids = Vec::new();
        let mut offsets = Vec::with_capacity(seqs.len() + 1);
        let mut pe = Vec::new();
        for s in seqs {
            offsets.push(ids.len());
            ids.extend(s.iter().map(|&t| t as usize));
            with_positions(d, s.len(), |table| pe.extend_from_slice(table));
        }
        offsets.push(ids.len());
        let e = tape.embedding(table, &ids)?;
        let e = tape.scale(e, (d as f32).sqrt());
        let pe = tape.constant(Tensor::new(vec![ids.len(), d], pe)?);
        let x = tape.add(e, pe)?;
        let x = self.dropout(tape, x, rng)?;
        Ok((x, offsets))
    }

    fn dropout(&self, tape: &mut Tape, x: Var, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        match rng {
            Some(r) if self.config.dropout > 0.0 => Ok(tape.dropout(x, self.config.dropout, r)?),
            _ => Ok(x),
        }
    }

    fn attention(
        &self,
        tape: &mut Tape,
        w: &[Var],
        query: Var,
        memory: Var,
        segs: &[AttnSegment],
    ) -> Result<Var> {
        let q = tape.matmul(query, w[0])?;
        let k = tape.matmul(memory, w[1])?;
        let v = tape.matmul(memory, w[2])?;
        let a = tape.attention(q, k, v, self.config.heads, segs.to_vec())?;
        Ok(tape.matmul(a, w[3])?)
    }

    fn ffn(&self, tape: &mut Tape, w1: Var, w2: Var, x: Var) -> Result<Var> {
        let h = tape.matmul(x, w1)?;
        let h = tape.relu(h);
        Ok(tape.matmul(h, w2)?)
    }

    fn encoder_layer(
        &self,
        tape: &mut Tape,
        p: &[Var],
        x: Var,
        segs: &[AttnSegment],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let h = tape.layer_norm(x, Some(p[0]), Some(p[1]), LN_EPS)?;
        let a = self.attention(tape, &p[2..6], h, h, segs)?;
        let a = self.dropout(tape, a, rng.as_deref_mut())?;
        let x = tape.add(x, a)?;
        let h = tape.layer_norm(x, Some(p[6]), Some(p[7]), LN_EPS)?;
        let f = self.ffn(tape, p[8], p[9], h)?;
        let f = self.dropout(tape, f, rng)?;
        Ok(tape.add(x, f)?)
    }

    #[allow(clippy::too_many_arguments)]
    fn decoder_layer(
        &self,
        tape: &mut Tape,
        p: &[Var],
        x: Var,
        memory: Var,
        self_segs: &[AttnSegment],
        cross_segs: &[AttnSegment],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let h = tape.layer_norm(x, Some(p[0]), Some(p[1]), LN_EPS)?;
        let a = self.attention(tape, &p[2..6], h, h, self_segs)?;
        let a = self.dropout(tape, a, rng.as_deref_mut())?;
        let x = tape.add(x, a)?;
        let h = tape.layer_norm(x, Some(p[6]), Some(p[7]), LN_EPS)?;
        let c = self.attention(tape, &p[8..12], h, memory, cross_segs)?;
        let c = self.dropout(tape, c, rng.as_deref_mut())?;
        let x = tape.add(x, c)?;
        let h = tape.layer_norm(x, Some(p[12]), Some(p[13]), LN_EPS)?;
        let f = self.ffn(tape, p[14], p[15], h)?;
        let f = self.dropout(tape, f, rng)?;
        Ok(tape.add(x, f)?)
    }

    #[allow(clippy::too_many_arguments)]
    fn project(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        h: Var,
        offsets: Vec<usize>,
        first_pos: Vec<usize>,
        seqs: &[&[TokenId]],
        outputs: Outputs,
    ) -> Result<Forward> {
        let out_w = bound.vars[if self.config.tie_embeddings { 0 } else { 1 }];
        let (h, offsets, first_pos) = match outputs {
            Outputs::All => (h, offsets, first_pos),
            Outputs::Last => {
                let rows: Vec<usize> = offsets[1..].iter().map(|&o| o - 1).collect();
                let h = tape.embedding(h, &rows)?;
                let first = first_pos
                    .iter()
                    .zip(seqs)
                    .map(|(f, s)| f + s.len() - 1)
                    .collect();
                (h, (0..=rows.len()).collect(), first)
            }
        };
        let logits = tape.matmul_t(h, out_w)?;
        Ok(Forward {
            logits,
            offsets,
            first_pos,
        })
    }
}

fn full_segment(q_start: usize, q_len: usize, k_start: usize, k_len: usize) -> AttnSegment {
    AttnSegment {
        q_start,
        q_len,
        k_start,
        k_len,
        allow: vec![true; q_len * k_len].into(),
    }
}

thread_local! {
    static POSITIONS: RefCell<(usize, Vec<f32>)> = const { RefCell::new((0, Vec::new())) };
}

/// Run `f` on the first `len` rows of the sinusoid table for width `d`.
fn with_positions<R>(d: usize, len: usize, f: impl FnOnce(&[f32]) -> R) -> R {
    POSITIONS.with(|cell| {
        let mut c = cell.borrow_mut();
        if c.0 != d {
            *c = (d, Vec::new());
        }
        let have = c.1.len() / d;
        for pos in have..len {
            c.1.extend(sinusoid(pos, d));
        }
        f(&c.1[..len * d])
    })
}

/// Sinusoidal encoding of one position.
pub fn sinusoid(pos: usize, d: usize) -> impl Iterator<Item = f32> {
    (0..d).map(move |i| {
        let rate = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / d as f64);
        let angle = pos as f64 * rate;
        if i % 2 == 0 {
            angle.sin() as f32
        } else {
            angle.cos() as f32
        }
    })
}

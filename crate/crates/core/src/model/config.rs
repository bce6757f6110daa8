use std::fmt;
use std::str::FromStr;

use crate::mask::SourceMask;
use crate::{Error, Result};

/// Architecture family plus layer counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// One stack over the concatenated source and target.
    EncOnly { layers: usize },
    /// Separate encoder and decoder stacks joined by cross attention.
    EncDec { enc_layers: usize, dec_layers: usize },
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::EncOnly { .. } => "enc-only",
            Variant::EncDec { .. } => "enc-dec",
        }
    }

    pub fn is_enc_only(&self) -> bool {
        matches!(self, Variant::EncOnly { .. })
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::EncOnly { layers } => write!(f, "enc-only {layers}"),
            Variant::EncDec {
                enc_layers,
                dec_layers,
            } => write!(f, "enc-dec {enc_layers}+{dec_layers}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub dropout: f32,
    pub tie_embeddings: bool,
    pub source_mask: SourceMask,
}

/// Learnable parameters itemized by component.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ParamCount {
    pub embeddings: usize,
    pub attention: usize,
    pub ffn: usize,
    pub norms: usize,
    pub output: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.embeddings + self.attention + self.ffn + self.norms + self.output
    }
}

impl fmt::Display for ParamCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "total {} (embeddings {}, attention {}, ffn {}, norms {}, output {})",
            self.total(),
            self.embeddings,
            self.attention,
            self.ffn,
            self.norms,
            self.output
        )
    }
}

impl ModelConfig {
    /// Small configuration used by the toy experiments.
    pub fn toy(variant: Variant, vocab_size: usize) -> Self {
        Self {
            variant,
            d_model: 64,
            d_ff: 128,
            heads: 4,
            vocab_size,
            max_len: 256,
            dropout: 0.1,
            tie_embeddings: true,
            source_mask: SourceMask::Full,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        let layers = match self.variant {
            Variant::EncOnly { layers } => layers,
            Variant::EncDec {
                enc_layers,
                dec_layers,
            } => enc_layers.min(dec_layers),
        };
        if layers == 0 {
            return bad(format!("{} needs at least one layer per stack", self.variant));
        }
        if self.d_model == 0 || self.d_ff == 0 || self.heads == 0 {
            return bad("d_model, d_ff and heads must be positive".into());
        }
        if self.d_model % self.heads != 0 {
            return bad(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            ));
        }
        if self.vocab_size == 0 || self.max_len == 0 {
            return bad("vocab_size and max_len must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Exact count of learnable parameters, derived symbolically.
    ///
    /// Projections carry no bias. Every residual block is preceded by a
    /// layer norm with gain and bias; the final norm of each stack has no
    /// parameters. An encoder layer therefore costs `4d² + 2·d·d_ff + 4d`
    /// and a decoder layer `8d² + 2·d·d_ff + 6d`.
    pub fn count_params(&self) -> ParamCount {
        let d = self.d_model;
        let attn = 4 * d * d;
        let ffn = 2 * d * self.d_ff;
        let norm = 2 * d;
        let (n_attn, n_ffn, n_norm) = match self.variant {
            Variant::EncOnly { layers } => (layers, layers, 2 * layers),
            Variant::EncDec {
                enc_layers,
                dec_layers,
            } => (
                enc_layers + 2 * dec_layers,
                enc_layers + dec_layers,
                2 * enc_layers + 3 * dec_layers,
            ),
        };
        ParamCount {
            embeddings: self.vocab_size * d,
            attention: n_attn * attn,
            ffn: n_ffn * ffn,
            norms: n_norm * norm,
            output: if self.tie_embeddings {
                0
            } else {
                self.vocab_size * d
            },
        }
    }

    /// `key = value` lines; parsed back by [`ModelConfig::from_record`].
    pub fn to_record(&self) -> String {
        let mut s = format!("variant = {}\n", self.variant.name());
        match self.variant {
            Variant::EncOnly { layers } => s.push_str(&format!("layers = {layers}\n")),
            Variant::EncDec {
                enc_layers,
                dec_layers,
            } => s.push_str(&format!(
                "enc_layers = {enc_layers}\ndec_layers = {dec_layers}\n"
            )),
        }
        s.push_str(&format!(
            "d_model = {}\nd_ff = {}\nheads = {}\nvocab_size = {}\nmax_len = {}\n\
             dropout = {}\ntie_embeddings = {}\nsource_mask = {}\n",
            self.d_model,
            self.d_ff,
            self.heads,
            self.vocab_size,
            self.max_len,
            self.dropout,
            self.tie_embeddings,
            self.source_mask
        ));
        s
    }

    pub fn from_record(text: &str) -> Result<Self> {
        let mut fields = std::collections::HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
                line: i + 1,
                msg: format!("expected key = value, got {line:?}"),
            })?;
            fields.insert(k.trim().to_string(), (i + 1, v.trim().to_string()));
        }
        let get = |k: &str| -> Result<&(usize, String)> {
            fields
                .get(k)
                .ok_or_else(|| Error::Checkpoint(format!("model record lacks {k}")))
        };
        fn num<T: FromStr>(entry: &(usize, String), key: &str) -> Result<T> {
            entry.1.parse().map_err(|_| Error::Config {
                line: entry.0,
                msg: format!("bad value {:?} for {key}", entry.1),
            })
        }
        let variant = match get("variant")?.1.as_str() {
            "enc-only" => Variant::EncOnly {
                layers: num(get("layers")?, "layers")?,
            },
            "enc-dec" => Variant::EncDec {
                enc_layers: num(get("enc_layers")?, "enc_layers")?,
                dec_layers: num(get("dec_layers")?, "dec_layers")?,
            },
            other => return Err(Error::Checkpoint(format!("unknown variant {other:?}"))),
        };
        let cfg = Self {
            variant,
            d_model: num(get("d_model")?, "d_model")?,
            d_ff: num(get("d_ff")?, "d_ff")?,
            heads: num(get("heads")?, "heads")?,
            vocab_size: num(get("vocab_size")?, "vocab_size")?,
            max_len: num(get("max_len")?, "max_len")?,
            dropout: num(get("dropout")?, "dropout")?,
            tie_embeddings: num(get("tie_embeddings")?, "tie_embeddings")?,
            source_mask: get("source_mask")?.1.parse()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

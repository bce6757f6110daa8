use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::vocab::{TagSet, TokenId, MASK, PAD};
use crate::mask::{AttentionMask, SourceMask};
use crate::{Error, Result};

/// Source-side reconstruction objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Reconstruction {
    /// Shifted: each source position predicts the next source token.
    Lm,
    /// Unshifted: each source position predicts its own (pre-noise) token.
    Ae,
}

impl fmt::Display for Reconstruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Reconstruction::Lm => "lm",
            Reconstruction::Ae => "ae",
        })
    }
}

impl FromStr for Reconstruction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lm" => Ok(Reconstruction::Lm),
            "ae" => Ok(Reconstruction::Ae),
            other => Err(Error::Invalid(format!(
                "unknown reconstruction task {other:?} (expected lm or ae)"
            ))),
        }
    }
}

/// One concatenated training item.
///
/// Layout for a pair is `<s> f₁..fₙ </s> <t> e₁..eₘ`; the source span has
/// `J = n + 2` positions and the target span `I = m + 1`. Target-side
/// positions always predict the next target token, ending in `</t>`.
/// Source-side targets are unset (weight 0) until
/// [`ConcatExample::with_reconstruction`] fills them in.
#[derive(Clone, Debug, PartialEq)]
pub struct ConcatExample {
    input_ids: Vec<TokenId>,
    target_ids: Vec<TokenId>,
    loss_weights: Vec<f32>,
    noise_applied: Vec<bool>,
    boundary: usize,
}

impl ConcatExample {
    pub fn concat_pair(src: &[TokenId], tgt: &[TokenId], tags: TagSet) -> Result<Self> {
        if src.is_empty() || tgt.is_empty() {
            return Err(Error::Data("source and target must be non-empty".into()));
        }
        let j = src.len() + 2;
        let mut input_ids = Vec::with_capacity(j + tgt.len() + 1);
        input_ids.push(tags.src_bos);
        input_ids.extend_from_slice(src);
        input_ids.push(tags.src_eos);
        input_ids.push(tags.tgt_bos);
        input_ids.extend_from_slice(tgt);

        let mut target_ids = vec![PAD; j];
        target_ids.extend_from_slice(tgt);
        target_ids.push(tags.tgt_eos);

        let mut loss_weights = vec![0.0; j];
        loss_weights.resize(input_ids.len(), 1.0);
        Ok(Self {
            noise_applied: vec![false; input_ids.len()],
            input_ids,
            target_ids,
            loss_weights,
            boundary: j,
        })
    }

    /// Target-only example with an empty source span, trained as plain
    /// language modeling: `<t> e₁..eₘ` predicting `e₁..eₘ </t>`.
    pub fn monolingual(tgt: &[TokenId], tags: TagSet) -> Result<Self> {
        if tgt.is_empty() {
            return Err(Error::Data("monolingual sentence must be non-empty".into()));
        }
        let mut input_ids = Vec::with_capacity(tgt.len() + 1);
        input_ids.push(tags.tgt_bos);
        input_ids.extend_from_slice(tgt);
        let mut target_ids = tgt.to_vec();
        target_ids.push(tags.tgt_eos);
        let n = input_ids.len();
        Ok(Self {
            input_ids,
            target_ids,
            loss_weights: vec![1.0; n],
            noise_applied: vec![false; n],
            boundary: 0,
        })
    }

    /// Assemble an example from raw arrays, checking their consistency.
    pub fn from_parts(
        input_ids: Vec<TokenId>,
        target_ids: Vec<TokenId>,
        loss_weights: Vec<f32>,
        boundary: usize,
    ) -> Result<Self> {
        let n = input_ids.len();
        if n == 0 || target_ids.len() != n || loss_weights.len() != n || boundary > n {
            return Err(Error::Data(format!(
                "inconsistent example: {n} inputs, {} targets, {} weights, boundary {boundary}",
                target_ids.len(),
                loss_weights.len()
            )));
        }
        if loss_weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Data("loss weights must be non-negative".into()));
        }
        Ok(Self {
            input_ids,
            target_ids,
            loss_weights,
            noise_applied: vec![false; n],
            boundary,
        })
    }

    pub fn with_reconstruction(mut self, task: Reconstruction) -> Self {
        let j = self.boundary;
        match task {
            Reconstruction::Lm => {
                for p in 0..j.saturating_sub(1) {
                    self.target_ids[p] = self.input_ids[p + 1];
                    self.loss_weights[p] = 1.0;
                }
            }
            Reconstruction::Ae => {
                for p in 0..j {
                    self.target_ids[p] = self.input_ids[p];
                    self.loss_weights[p] = 1.0;
                }
            }
        }
        self
    }

    /// Corrupt source content tokens in place (tags are never selected).
    /// Targets and loss weights are left untouched.
    pub fn apply_noise<R: Rng + ?Sized>(
        &mut self,
        spec: &NoiseSpec,
        replacement: Range<TokenId>,
        rng: &mut R,
    ) {
        if spec.select_prob <= 0.0 || self.boundary < 3 {
            return;
        }
        for p in 1..self.boundary - 1 {
            if rng.gen::<f64>() >= spec.select_prob {
                continue;
            }
            self.noise_applied[p] = true;
            let r = rng.gen::<f64>();
            if r < spec.mask_frac {
                self.input_ids[p] = MASK;
            } else if r < spec.mask_frac + spec.random_frac && !replacement.is_empty() {
                self.input_ids[p] = rng.gen_range(replacement.clone());
            }
        }
    }

    pub fn len(&self) -> usize {
        self.input_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input_ids.is_empty()
    }

    /// Index of the first target-side position (`J`).
    pub fn boundary(&self) -> usize {
        self.boundary
    }

    pub fn source_len(&self) -> usize {
        self.boundary
    }

    pub fn target_len(&self) -> usize {
        self.input_ids.len() - self.boundary
    }

    pub fn input_ids(&self) -> &[TokenId] {
        &self.input_ids
    }

    pub fn target_ids(&self) -> &[TokenId] {
        &self.target_ids
    }

    pub fn loss_weights(&self) -> &[f32] {
        &self.loss_weights
    }

    pub fn noise_applied(&self) -> &[bool] {
        &self.noise_applied
    }

    /// Source tokens between the tags.
    pub fn source_tokens(&self) -> &[TokenId] {
        if self.boundary < 2 {
            &[]
        } else {
            &self.input_ids[1..self.boundary - 1]
        }
    }

    /// Target tokens after `<t>`.
    pub fn target_tokens(&self) -> &[TokenId] {
        &self.input_ids[self.boundary + 1..]
    }

    /// Attention mask for this example; monolingual examples are causal.
    pub fn mask(&self, variant: SourceMask) -> AttentionMask {
        if self.boundary == 0 {
            AttentionMask::causal(self.len())
        } else {
            AttentionMask::tlm(self.boundary, self.target_len(), variant)
                .expect("both spans are non-empty by construction")
        }
    }
}

/// BERT-style corruption rates.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSpec {
    pub select_prob: f64,
    pub mask_frac: f64,
    pub random_frac: f64,
    pub keep_frac: f64,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            select_prob: 0.15,
            mask_frac: 0.8,
            random_frac: 0.1,
            keep_frac: 0.1,
            seed: 0,
        }
    }
}

impl NoiseSpec {
    pub fn disabled() -> Self {
        Self {
            select_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.select_prob) {
            return Err(Error::Invalid(format!(
                "noise select probability {} outside [0, 1]",
                self.select_prob
            )));
        }
        let fracs = [self.mask_frac, self.random_frac, self.keep_frac];
        if fracs.iter().any(|f| *f < 0.0) || (fracs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid(format!(
                "noise fractions {fracs:?} must be non-negative and sum to 1"
            )));
        }
        Ok(())
    }

    /// Generator for one example in one pass over the corpus, so that noise
    /// is resampled every epoch yet independent of batching order.
    pub fn rng_for(&self, epoch: u64, index: u64) -> ChaCha8Rng {
        example_rng(self.seed, epoch, index)
    }
}

/// Deterministic per-example generator derived from `(seed, epoch, index)`.
pub fn example_rng(seed: u64, epoch: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index);
    rng
}

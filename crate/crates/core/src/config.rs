//! Flat `key = value` run configuration.
//!
//! Lines are `key = value`; `#` starts a comment; blank lines are ignored.
//! Unknown or repeated keys are errors. Paths are resolved relative to the
//! directory of the config file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use tlm_tensor::AdamConfig;

use crate::data::{NoiseSpec, Reconstruction};
use crate::mask::SourceMask;
use crate::metrics::PplScope;
use crate::model::{ModelConfig, Variant};
use crate::train::{LambdaSchedule, ScheduleKind};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    // model
    pub variant: String,
    pub layers: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub max_len: usize,
    pub dropout: f32,
    pub tie_embeddings: bool,
    pub source_mask: SourceMask,
    // source reconstruction
    pub task: Reconstruction,
    pub noise: bool,
    pub select_prob: f64,
    pub mask_frac: f64,
    pub random_frac: f64,
    pub keep_frac: f64,
    pub schedule: ScheduleKind,
    /// 0 means 10% of `steps`.
    pub tau: u64,
    pub two_step_start: f64,
    pub two_step_knee: f64,
    pub two_step_divisor: f64,
    pub two_step_floor: f64,
    pub label_smoothing: f32,
    /// Defaults to `label_smoothing`.
    pub re_label_smoothing: Option<f32>,
    // optimization
    pub lr_scale: f64,
    pub warmup: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_tokens: usize,
    pub steps: u64,
    pub eval_interval: u64,
    pub seed: u64,
    // data
    pub train_src: Option<PathBuf>,
    pub train_tgt: Option<PathBuf>,
    pub dev_src: Option<PathBuf>,
    pub dev_tgt: Option<PathBuf>,
    pub test_src: Option<PathBuf>,
    pub test_tgt: Option<PathBuf>,
    pub mono: Option<PathBuf>,
    /// Back-translated pairs appended to the training data.
    pub synthetic_src: Option<PathBuf>,
    pub synthetic_tgt: Option<PathBuf>,
    /// Defaults to 0.5 with a monolingual corpus and 0 without.
    pub mono_ratio: Option<f64>,
    pub directions: Vec<(String, String)>,
    pub vocab: Option<PathBuf>,
    pub bpe: Option<PathBuf>,
    // evaluation and search
    pub ppl_scope: PplScope,
    pub beam: usize,
    pub alpha: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            variant: "enc-only".into(),
            layers: 2,
            enc_layers: 1,
            dec_layers: 1,
            d_model: 64,
            d_ff: 128,
            heads: 4,
            max_len: 256,
            dropout: 0.1,
            tie_embeddings: true,
            source_mask: SourceMask::Full,
            task: Reconstruction::Ae,
            noise: true,
            select_prob: 0.15,
            mask_frac: 0.8,
            random_frac: 0.1,
            keep_frac: 0.1,
            schedule: ScheduleKind::Const1,
            tau: 0,
            two_step_start: 1.0,
            two_step_knee: 0.1,
            two_step_divisor: 9.0,
            two_step_floor: 0.01,
            label_smoothing: 0.1,
            re_label_smoothing: None,
            lr_scale: 1.0,
            warmup: 4000,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-9,
            batch_tokens: 2000,
            steps: 10_000,
            eval_interval: 500,
            seed: 1,
            train_src: None,
            train_tgt: None,
            dev_src: None,
            dev_tgt: None,
            test_src: None,
            test_tgt: None,
            mono: None,
            synthetic_src: None,
            synthetic_tgt: None,
            mono_ratio: None,
            directions: Vec::new(),
            vocab: None,
            bpe: None,
            ppl_scope: PplScope::TargetOnly,
            beam: 4,
            alpha: 0.6,
        }
    }
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(format!("expected a boolean, got {v:?}")),
    }
}

fn parse_num<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse {v:?}"))
}

fn parse_directions(v: &str) -> std::result::Result<Vec<(String, String)>, String> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|d| {
            let d = d.trim();
            match d.split_once('-') {
                Some((s, t)) if !s.is_empty() && !t.is_empty() && s != t => {
                    Ok((s.to_string(), t.to_string()))
                }
                _ => Err(format!("bad direction {d:?} (expected src-tgt)")),
            }
        })
        .collect()
}

/// Keys in echo order.
pub const KEYS: &[&str] = &[
    "variant",
    "layers",
    "enc_layers",
    "dec_layers",
    "d_model",
    "d_ff",
    "heads",
    "max_len",
    "dropout",
    "tie_embeddings",
    "source_mask",
    "task",
    "noise",
    "select_prob",
    "mask_frac",
    "random_frac",
    "keep_frac",
    "schedule",
    "tau",
    "two_step_start",
    "two_step_knee",
    "two_step_divisor",
    "two_step_floor",
    "label_smoothing",
    "re_label_smoothing",
    "lr_scale",
    "warmup",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "batch_tokens",
    "steps",
    "eval_interval",
    "seed",
    "train_src",
    "train_tgt",
    "dev_src",
    "dev_tgt",
    "test_src",
    "test_tgt",
    "mono",
    "synthetic_src",
    "synthetic_tgt",
    "mono_ratio",
    "directions",
    "vocab",
    "bpe",
    "ppl_scope",
    "beam",
    "alpha",
];

impl RunConfig {
    /// Set one key from its textual value. Relative paths are joined to
    /// `base`.
    pub fn set(&mut self, key: &str, value: &str, base: &Path) -> std::result::Result<(), String> {
        let path = |v: &str| -> Option<PathBuf> {
            if v.is_empty() {
                None
            } else {
                Some(base.join(v))
            }
        };
        let e = |r: Result<()>| r.map_err(|e| e.to_string());
        match key {
            "variant" => match value {
                "enc-only" | "enc-dec" => self.variant = value.to_string(),
                _ => return Err(format!("expected enc-only or enc-dec, got {value:?}")),
            },
            "layers" => self.layers = parse_num(value)?,
            "enc_layers" => self.enc_layers = parse_num(value)?,
            "dec_layers" => self.dec_layers = parse_num(value)?,
            "d_model" => self.d_model = parse_num(value)?,
            "d_ff" => self.d_ff = parse_num(value)?,
            "heads" => self.heads = parse_num(value)?,
            "max_len" => self.max_len = parse_num(value)?,
            "dropout" => self.dropout = parse_num(value)?,
            "tie_embeddings" => self.tie_embeddings = parse_bool(value)?,
            "source_mask" => e(value.parse().map(|v| self.source_mask = v))?,
            "task" => e(value.parse().map(|v| self.task = v))?,
            "noise" => self.noise = parse_bool(value)?,
            "select_prob" => self.select_prob = parse_num(value)?,
            "mask_frac" => self.mask_frac = parse_num(value)?,
            "random_frac" => self.random_frac = parse_num(value)?,
            "keep_frac" => self.keep_frac = parse_num(value)?,
            "schedule" => e(value.parse().map(|v| self.schedule = v))?,
            "tau" => self.tau = parse_num(value)?,
            "two_step_start" => self.two_step_start = parse_num(value)?,
            "two_step_knee" => self.two_step_knee = parse_num(value)?,
            "two_step_divisor" => self.two_step_divisor = parse_num(value)?,
            "two_step_floor" => self.two_step_floor = parse_num(value)?,
            "label_smoothing" => self.label_smoothing = parse_num(value)?,
            "re_label_smoothing" => {
                self.re_label_smoothing = if value.is_empty() {
                    None
                } else {
                    Some(parse_num(value)?)
                }
            }
            "lr_scale" => self.lr_scale = parse_num(value)?,
            "warmup" => self.warmup = parse_num(value)?,
            "adam_beta1" => self.adam_beta1 = parse_num(value)?,
            "adam_beta2" => self.adam_beta2 = parse_num(value)?,
            "adam_eps" => self.adam_eps = parse_num(value)?,
            "batch_tokens" => self.batch_tokens = parse_num(value)?,
            "steps" => self.steps = parse_num(value)?,
            "eval_interval" => self.eval_interval = parse_num(value)?,
            "seed" => self.seed = parse_num(value)?,
            "train_src" => self.train_src = path(value),
            "train_tgt" => self.train_tgt = path(value),
            "dev_src" => self.dev_src = path(value),
            "dev_tgt" => self.dev_tgt = path(value),
            "test_src" => self.test_src = path(value),
            "test_tgt" => self.test_tgt = path(value),
            "mono" => self.mono = path(value),
            "synthetic_src" => self.synthetic_src = path(value),
            "synthetic_tgt" => self.synthetic_tgt = path(value),
            "mono_ratio" => {
                self.mono_ratio = if value.is_empty() {
                    None
                } else {
                    Some(parse_num(value)?)
                }
            }
            "directions" => self.directions = parse_directions(value)?,
            "vocab" => self.vocab = path(value),
            "bpe" => self.bpe = path(value),
            "ppl_scope" => e(value.parse().map(|v| self.ppl_scope = v))?,
            "beam" => self.beam = parse_num(value)?,
            "alpha" => self.alpha = parse_num(value)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Parse config text on top of the defaults.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Config { line: i + 1, msg };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(err(format!("unknown key `{k}`")));
            }
            if !seen.insert(k.to_string()) {
                return Err(err(format!("key `{k}` given twice")));
            }
            cfg.set(k, v, base).map_err(|m| err(format!("{k}: {m}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    /// Apply `key=value` overrides (for instance from the command line).
    pub fn apply_overrides(&mut self, overrides: &[String], base: &Path) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Invalid(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v.trim(), base)
                .map_err(|m| Error::Invalid(format!("override {o:?}: {m}")))?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config(1)?.validate()?;
        self.noise_spec().validate()?;
        self.schedule()?;
        if self.batch_tokens == 0 || self.steps == 0 || self.eval_interval == 0 || self.beam == 0 {
            return Err(Error::Invalid(
                "batch_tokens, steps, eval_interval and beam must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.label_smoothing)
            || !(0.0..1.0).contains(&self.re_label_smoothing.unwrap_or(0.0))
        {
            return Err(Error::Invalid("label smoothing must lie in [0, 1)".into()));
        }
        if let Some(r) = self.mono_ratio {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Invalid(format!("mono_ratio {r} outside [0, 1]")));
            }
        }
        if self.variant == "enc-dec" && self.effective_mono_ratio() > 0.0 {
            return Err(Error::Invalid(
                "monolingual language-model mixing needs variant = enc-only".into(),
            ));
        }
        if !self.directions.is_empty() && (self.mono.is_some() || self.synthetic_src.is_some()) {
            return Err(Error::Invalid(
                "monolingual and synthetic data are not supported together with directions".into(),
            ));
        }
        if self.synthetic_src.is_some() != self.synthetic_tgt.is_some() {
            return Err(Error::Invalid(
                "synthetic_src and synthetic_tgt must be set together".into(),
            ));
        }
        Ok(())
    }

    pub fn variant(&self) -> Variant {
        if self.variant == "enc-dec" {
            Variant::EncDec {
                enc_layers: self.enc_layers,
                dec_layers: self.dec_layers,
            }
        } else {
            Variant::EncOnly {
                layers: self.layers,
            }
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> Result<ModelConfig> {
        Ok(ModelConfig {
            variant: self.variant(),
            d_model: self.d_model,
            d_ff: self.d_ff,
            heads: self.heads,
            vocab_size,
            max_len: self.max_len,
            dropout: self.dropout,
            tie_embeddings: self.tie_embeddings,
            source_mask: self.source_mask,
        })
    }

    /// Noise as configured; disabled when `noise = false`.
    pub fn noise_spec(&self) -> NoiseSpec {
        let spec = NoiseSpec {
            select_prob: self.select_prob,
            mask_frac: self.mask_frac,
            random_frac: self.random_frac,
            keep_frac: self.keep_frac,
            seed: self.seed,
        };
        if self.noise {
            spec
        } else {
            NoiseSpec {
                select_prob: 0.0,
                ..spec
            }
        }
    }

    pub fn effective_tau(&self) -> u64 {
        if self.tau == 0 {
            (self.steps / 10).max(1)
        } else {
            self.tau
        }
    }

    pub fn schedule(&self) -> Result<LambdaSchedule> {
        LambdaSchedule::new(self.schedule, self.effective_tau())?.with_two_step(
            self.two_step_start,
            self.two_step_knee,
            self.two_step_divisor,
            self.two_step_floor,
        )
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn effective_mono_ratio(&self) -> f64 {
        match (self.mono_ratio, &self.mono) {
            (Some(r), _) => r,
            (None, Some(_)) => 0.5,
            (None, None) => 0.0,
        }
    }

    /// Fully resolved configuration, one `key = value` per line, in a form
    /// that [`RunConfig::parse`] reads back.
    pub fn echo(&self) -> String {
        let p = |x: &Option<PathBuf>| x.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut s = String::new();
        for &k in KEYS {
            let v = match k {
                "variant" => self.variant.clone(),
                "layers" => self.layers.to_string(),
                "enc_layers" => self.enc_layers.to_string(),
                "dec_layers" => self.dec_layers.to_string(),
                "d_model" => self.d_model.to_string(),
                "d_ff" => self.d_ff.to_string(),
                "heads" => self.heads.to_string(),
                "max_len" => self.max_len.to_string(),
                "dropout" => self.dropout.to_string(),
                "tie_embeddings" => self.tie_embeddings.to_string(),
                "source_mask" => self.source_mask.to_string(),
                "task" => self.task.to_string(),
                "noise" => self.noise.to_string(),
                "select_prob" => self.select_prob.to_string(),
                "mask_frac" => self.mask_frac.to_string(),
                "random_frac" => self.random_frac.to_string(),
                "keep_frac" => self.keep_frac.to_string(),
                "schedule" => self.schedule.to_string(),
                "tau" => self.effective_tau().to_string(),
                "two_step_start" => self.two_step_start.to_string(),
                "two_step_knee" => self.two_step_knee.to_string(),
                "two_step_divisor" => self.two_step_divisor.to_string(),
                "two_step_floor" => self.two_step_floor.to_string(),
                "label_smoothing" => self.label_smoothing.to_string(),
                "re_label_smoothing" => self
                    .re_label_smoothing
                    .unwrap_or(self.label_smoothing)
                    .to_string(),
                "lr_scale" => self.lr_scale.to_string(),
                "warmup" => self.warmup.to_string(),
                "adam_beta1" => self.adam_beta1.to_string(),
                "adam_beta2" => self.adam_beta2.to_string(),
                "adam_eps" => self.adam_eps.to_string(),
                "batch_tokens" => self.batch_tokens.to_string(),
                "steps" => self.steps.to_string(),
                "eval_interval" => self.eval_interval.to_string(),
                "seed" => self.seed.to_string(),
                "train_src" => p(&self.train_src),
                "train_tgt" => p(&self.train_tgt),
                "dev_src" => p(&self.dev_src),
                "dev_tgt" => p(&self.dev_tgt),
                "test_src" => p(&self.test_src),
                "test_tgt" => p(&self.test_tgt),
                "mono" => p(&self.mono),
                "synthetic_src" => p(&self.synthetic_src),
                "synthetic_tgt" => p(&self.synthetic_tgt),
                "mono_ratio" => self.effective_mono_ratio().to_string(),
                "directions" => self
                    .directions
                    .iter()
                    .map(|(s, t)| format!("{s}-{t}"))
                    .collect::<Vec<_>>()
                    .join(","),
                "vocab" => p(&self.vocab),
                "bpe" => p(&self.bpe),
                "ppl_scope" => self.ppl_scope.to_string(),
                "beam" => self.beam.to_string(),
                "alpha" => self.alpha.to_string(),
                _ => unreachable!("every key is echoed"),
            };
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

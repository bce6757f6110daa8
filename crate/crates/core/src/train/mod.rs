//! Loss assembly, λ schedules, the training loop, the grid harness and
//! back-translation.

mod backtranslate;
mod grid;
mod loss;
mod schedule;

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tlm_tensor::{inverse_sqrt_lr, Adam, Tape};

pub use backtranslate::{back_translate, BackTranslation};
pub use grid::{evaluate_bleu, grid_cells, grid_search, GridCell, GridInputs, GridRow, GRID_HEADER};
pub use loss::{compute_tlm_loss, LossParts};
pub use schedule::{LambdaSchedule, ScheduleKind};

use crate::config::RunConfig;
use crate::data::{
    ConcatExample, Draw, MixedStream, MonoSentence, Origin, Pair, TokenBatcher, TokenId,
};
use crate::metrics::{perplexity, PplScope};
use crate::model::{Model, Outputs, SeqInput};
use crate::{Error, Result};

pub const METRICS_HEADER: &str = "step\tL_MT\tL_RE\tlambda\tdevPPL";
pub const EVAL_HEADER: &str = "step\tdevPPL_target\tdevPPL_full";

/// Everything a training run reads besides its configuration.
#[derive(Clone, Debug, Default)]
pub struct TrainData {
    pub train: Vec<Pair>,
    pub mono: Vec<MonoSentence>,
    pub dev: Vec<Pair>,
    pub vocab_size: usize,
    /// Ids eligible as random noise replacements.
    pub replacement: Range<TokenId>,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    /// Mean training losses since the previous row.
    pub l_mt: f64,
    pub l_re: f64,
    pub lambda: f64,
    /// Development perplexity in the configured scope.
    pub dev_ppl: Option<f64>,
    pub dev_ppl_target: Option<f64>,
    pub dev_ppl_full: Option<f64>,
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.4}")).unwrap_or_else(|| "NA".into())
}

impl MetricsRow {
    pub fn tsv(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{}",
            self.step,
            self.l_mt,
            self.l_re,
            self.lambda,
            fmt_opt(self.dev_ppl)
        )
    }

    pub fn eval_tsv(&self) -> String {
        format!(
            "{}\t{}\t{}",
            self.step,
            fmt_opt(self.dev_ppl_target),
            fmt_opt(self.dev_ppl_full)
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub last: Model,
    /// Snapshot with the lowest development perplexity (the last model
    /// when there is no development set).
    pub best: Model,
    pub best_step: u64,
    pub best_dev_ppl: Option<f64>,
    pub rows: Vec<MetricsRow>,
}

impl TrainOutcome {
    pub fn metrics_tsv(&self) -> String {
        let mut s = format!("{METRICS_HEADER}\n");
        for r in &self.rows {
            s.push_str(&r.tsv());
            s.push('\n');
        }
        s
    }
}

/// Build the training example for one draw.
pub fn make_example(
    cfg: &RunConfig,
    data: &TrainData,
    draw: &Draw,
    enc_only: bool,
) -> Result<ConcatExample> {
    match draw.origin {
        Origin::Parallel => {
            let p = &data.train[draw.index];
            let mut ex = ConcatExample::concat_pair(&p.src, &p.tgt, p.tags)?;
            if enc_only {
                ex = ex.with_reconstruction(cfg.task);
                let spec = cfg.noise_spec();
                if spec.select_prob > 0.0 {
                    let mut rng = spec.rng_for(draw.epoch, draw.index as u64);
                    ex.apply_noise(&spec, data.replacement.clone(), &mut rng);
                }
            }
            Ok(ex)
        }
        Origin::Mono => {
            let m = &data.mono[draw.index];
            ConcatExample::monolingual(&m.tokens, m.tags)
        }
    }
}

fn describe_batch(draws: &[Draw]) -> String {
    let items: Vec<String> = draws
        .iter()
        .take(5)
        .map(|d| {
            let kind = match d.origin {
                Origin::Parallel => "parallel",
                Origin::Mono => "mono",
            };
            format!("{kind} line {} (epoch {})", d.index + 1, d.epoch)
        })
        .collect();
    let more = if draws.len() > 5 { ", …" } else { "" };
    format!("batch of {} sequences: {}{more}", draws.len(), items.join(", "))
}

/// Dev perplexities `(target, full)`.
pub fn dev_perplexities(model: &Model, dev: &[Pair]) -> Result<(f64, f64)> {
    let examples: Vec<ConcatExample> = dev
        .iter()
        .map(|p| ConcatExample::concat_pair(&p.src, &p.tgt, p.tags))
        .collect::<Result<_>>()?;
    Ok((
        perplexity(model, &examples, PplScope::TargetOnly)?,
        perplexity(model, &examples, PplScope::FullSequence)?,
    ))
}

/// Run the configured number of updates. `on_eval` sees every metrics row
/// as soon as it is produced.
pub fn train(
    cfg: &RunConfig,
    data: &TrainData,
    on_eval: &mut dyn FnMut(&MetricsRow) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mcfg = cfg.model_config(data.vocab_size)?;
    let enc_only = mcfg.variant.is_enc_only();
    if let Some(p) = data.train.iter().find(|p| p.concat_len() > mcfg.max_len) {
        return Err(Error::Data(format!(
            "training pair of length {} exceeds max_len {}",
            p.concat_len(),
            mcfg.max_len
        )));
    }
    let mut model = Model::new(mcfg, cfg.seed)?;
    let mut adam = Adam::new(cfg.adam(), model.params());
    let schedule = cfg.schedule()?;
    let ratio = if data.mono.is_empty() {
        0.0
    } else {
        cfg.effective_mono_ratio()
    };
    let stream = MixedStream::new(data.train.len(), data.mono.len(), ratio, cfg.seed)?;
    let batcher = TokenBatcher::new(
        stream,
        data.train.iter().map(Pair::concat_len).collect(),
        data.mono.iter().map(|m| m.tokens.len() + 1).collect(),
        cfg.batch_tokens,
        cfg.seed,
    )?;
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x0d50_0b0e));
    let eps_mt = cfg.label_smoothing;
    let eps_re = cfg.re_label_smoothing.unwrap_or(cfg.label_smoothing);

    let mut rows = Vec::new();
    let mut best: Option<(f64, u64, Model)> = None;
    let (mut sum_mt, mut sum_re, mut n) = (0.0f64, 0.0f64, 0u64);
    for (step, draws) in (1..=cfg.steps).zip(batcher) {
        let examples: Vec<ConcatExample> = draws
            .iter()
            .map(|d| make_example(cfg, data, d, enc_only))
            .collect::<Result<_>>()?;
        let lambda = if enc_only { schedule.at(step - 1) } else { 0.0 };
        let numeric = |msg: String| Error::Numeric {
            step,
            msg: format!("{msg} in {}", describe_batch(&draws)),
        };
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let inputs: Vec<SeqInput> = examples
            .iter()
            .map(|e| SeqInput {
                ids: e.input_ids(),
                boundary: e.boundary(),
            })
            .collect();
        let fwd = model.forward(&mut tape, &bound, &inputs, Outputs::All, Some(&mut dropout_rng))?;
        let refs: Vec<&ConcatExample> = examples.iter().collect();
        let parts = compute_tlm_loss(&mut tape, &fwd, &refs, lambda, eps_mt, eps_re)
            .map_err(|e| if e.is_numeric() { numeric(e.to_string()) } else { e })?;
        if !parts.l_tlm.is_finite() {
            return Err(numeric("non-finite loss".into()));
        }
        tape.backward(parts.total).map_err(|e| numeric(e.to_string()))?;
        let grads = model.gradients(&tape, &bound);
        drop(tape);
        let lr = cfg.lr_scale * inverse_sqrt_lr(cfg.d_model, step, cfg.warmup);
        adam.step(model.params_mut(), &grads, step, lr)?;
        if model.params().iter().any(|p| !p.is_finite()) {
            return Err(numeric("non-finite weights after update".into()));
        }
        sum_mt += parts.l_mt;
        sum_re += parts.l_re;
        n += 1;

        if step % cfg.eval_interval == 0 || step == cfg.steps {
            let (t, f) = if data.dev.is_empty() {
                (None, None)
            } else {
                let (t, f) = dev_perplexities(&model, &data.dev)?;
                (Some(t), Some(f))
            };
            let dev_ppl = match cfg.ppl_scope {
                PplScope::TargetOnly => t,
                PplScope::FullSequence => f,
            };
            let row = MetricsRow {
                step,
                l_mt: sum_mt / n as f64,
                l_re: sum_re / n as f64,
                lambda,
                dev_ppl,
                dev_ppl_target: t,
                dev_ppl_full: f,
            };
            on_eval(&row)?;
            rows.push(row);
            (sum_mt, sum_re, n) = (0.0, 0.0, 0);
            if let Some(p) = dev_ppl {
                if best.as_ref().map_or(true, |(b, _, _)| p < *b) {
                    best = Some((p, step, model.clone()));
                }
            }
        }
    }
    let (best_dev_ppl, best_step, best_model) = match best {
        Some((p, s, m)) => (Some(p), s, m),
        None => (None, cfg.steps, model.clone()),
    };
    Ok(TrainOutcome {
        last: model,
        best: best_model,
        best_step,
        best_dev_ppl,
        rows,
    })
}

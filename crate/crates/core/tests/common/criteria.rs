//! One function per acceptance criterion. Each returns `Ok(summary)` or
//! `Err(reason)`; the per-topic tests assert on them and the acceptance
//! runner prints them.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tlm_core::config::RunConfig;
use tlm_core::data::bpe::decode_tokens;
use tlm_core::data::vocab::MASK;
use tlm_core::data::{example_rng, BpeModel, ConcatExample, NoiseSpec, Pair, Reconstruction, TagSet, TokenId};
use tlm_core::decode::{beam_search, greedy, ranking, score_joint_vs_conditional, BeamConfig, NextTokenScorer};
use tlm_core::experiment::{load_corpora, Corpora};
use tlm_core::mask::{AttentionMask, SourceMask};
use tlm_core::model::{read_checkpoint, write_checkpoint, Checkpoint, Forward, Model, ModelConfig, Outputs, SeqInput, Variant};
use tlm_core::toy::{lang_word, CONCEPTS, LANGUAGES};
use tlm_core::train::{
    back_translate, compute_tlm_loss, evaluate_bleu, grid_search, train, GridCell, GridInputs, LambdaSchedule,
    ScheduleKind, TrainOutcome,
};
use tlm_tensor::{Tape, Tensor};

use super::oracle;

pub type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

pub fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn load_config(name: &str) -> RunConfig {
    let path = repo_root().join("configs").join(name);
    RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// Logits of one sequence: the position of the first row and every row.
pub fn logits_of(model: &Model, ids: &[TokenId], boundary: usize) -> (usize, Vec<Vec<f32>>) {
    let mut tape = Tape::inference();
    let bound = model.bind(&mut tape);
    let fwd = model
        .forward(&mut tape, &bound, &[SeqInput { ids, boundary }], Outputs::All, None)
        .expect("forward");
    let t = tape.value(fwd.logits);
    (fwd.first_pos[0], (0..t.shape()[0]).map(|r| t.row(r).to_vec()).collect())
}

fn max_abs_diff(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs() as f64).fold(0.0, f64::max)
}

pub fn tiny_config(variant: Variant, mask: SourceMask, d: usize, heads: usize, vocab: usize) -> ModelConfig {
    ModelConfig {
        variant,
        d_model: d,
        d_ff: 2 * d,
        heads,
        vocab_size: vocab,
        max_len: 64,
        dropout: 0.0,
        tie_embeddings: true,
        source_mask: mask,
    }
}

// ---------------------------------------------------------------- 1

pub fn c1_masks() -> Check {
    let mut cells = 0usize;
    for variant in [SourceMask::Triangular, SourceMask::Full] {
        for j in 1..=16 {
            for i in 1..=16 {
                let m = AttentionMask::tlm(j, i, variant).map_err(fail)?;
                let v = m.validate();
                ensure!(v.is_empty(), "{variant} J={j} I={i}: {v:?}");
                ensure!(m.size() == j + i, "{variant} J={j} I={i}: size {}", m.size());
                for q in 0..j + i {
                    for k in 0..j + i {
                        let want = oracle::tlm_allows(j, q, k, variant);
                        ensure!(
                            m.allows(q, k) == want,
                            "{variant} J={j} I={i}: cell ({q},{k}) is {} but the block rule says {want}",
                            m.allows(q, k)
                        );
                        cells += 1;
                    }
                }
            }
        }
    }
    Ok(format!("512 masks, {cells} cells match the block rules, no violations"))
}

// ---------------------------------------------------------------- 2

fn perturbed(ids: &[TokenId], p: usize, content: std::ops::Range<TokenId>, rng: &mut ChaCha8Rng) -> Vec<TokenId> {
    let mut out = ids.to_vec();
    loop {
        let t = rng.gen_range(content.clone());
        if t != ids[p] {
            out[p] = t;
            return out;
        }
    }
}

#[derive(Default)]
pub struct ProbeStats {
    pub target_future: f64,
    pub source_from_target: f64,
    pub triangular_future_source: f64,
    pub full_future_source: f64,
    pub probes: usize,
}

pub fn perturbation_probes() -> ProbeStats {
    let vocab = 12;
    let content = 7..vocab as TokenId;
    let mut st = ProbeStats::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let variants = [
        (Variant::EncOnly { layers: 2 }, SourceMask::Full),
        (Variant::EncOnly { layers: 2 }, SourceMask::Triangular),
        (Variant::EncDec { enc_layers: 1, dec_layers: 2 }, SourceMask::Full),
    ];
    for (vi, (variant, mask)) in variants.into_iter().enumerate() {
        for seed in 0..3u64 {
            let model = Model::new(tiny_config(variant, mask, 16, 2, vocab), 100 * vi as u64 + seed).expect("model");
            for n in 1..=3 {
                for m in 1..=4 {
                    let src: Vec<TokenId> = (0..n).map(|_| rng.gen_range(content.clone())).collect();
                    let tgt: Vec<TokenId> = (0..m).map(|_| rng.gen_range(content.clone())).collect();
                    let ex = ConcatExample::concat_pair(&src, &tgt, TagSet::GENERIC).expect("example");
                    let (ids, b) = (ex.input_ids(), ex.boundary());
                    let (first, base) = logits_of(&model, ids, b);
                    // Target positions: nothing before them may move.
                    for p in b..ids.len() {
                        let alt = perturbed(ids, p, content.clone(), &mut rng);
                        let (_, rows) = logits_of(&model, &alt, b);
                        for q in first..p {
                            let d = max_abs_diff(&base[q - first], &rows[q - first]);
                            if q >= b {
                                st.target_future = st.target_future.max(d);
                            } else {
                                st.source_from_target = st.source_from_target.max(d);
                            }
                        }
                        st.probes += 1;
                    }
                    if !variant.is_enc_only() {
                        continue;
                    }
                    // Source positions: earlier source rows move only under
                    // the full mask.
                    for p in 1..b {
                        let alt = perturbed(ids, p, content.clone(), &mut rng);
                        let (_, rows) = logits_of(&model, &alt, b);
                        for q in 0..p {
                            let d = max_abs_diff(&base[q], &rows[q]);
                            match mask {
                                SourceMask::Triangular => {
                                    st.triangular_future_source = st.triangular_future_source.max(d)
                                }
                                SourceMask::Full => st.full_future_source = st.full_future_source.max(d),
                            }
                        }
                        st.probes += 1;
                    }
                }
            }
        }
    }
    st
}

pub fn c2_perturbation() -> Check {
    let s = perturbation_probes();
    let summary = format!(
        "{} probes; max change: (a) {:.1e} (b) {:.1e} (c) {:.1e}; (d) detected {:.2e}",
        s.probes, s.target_future, s.source_from_target, s.triangular_future_source, s.full_future_source
    );
    ensure!(s.target_future < 1e-6, "(a) target logits depend on future targets: {summary}");
    ensure!(s.source_from_target < 1e-6, "(b) source logits depend on targets: {summary}");
    ensure!(s.triangular_future_source < 1e-6, "(c) triangular source leaks: {summary}");
    ensure!(s.full_future_source > 1e-4, "(d) full mask shows no future-source dependency: {summary}");
    Ok(summary)
}

// ---------------------------------------------------------------- 3

#[path = "../../../tensor/tests/support/primitives.rs"]
mod primitives;

pub const PRIMITIVE_TOL: f64 = primitives::TOL;
pub const MODEL_TOL: f64 = 1e-3;

pub fn primitive_gradients() -> Vec<(&'static str, f64)> {
    primitives::run_all()
}

/// Analytic gradient of the full loss against finite differences of the
/// reference network. Returns the relative error and the absolute
/// difference in loss value.
pub fn model_gradcheck(variant: Variant, mask: SourceMask, seed: u64) -> (f64, f64) {
    let vocab = 11;
    let cfg = tiny_config(variant, mask, 8, 2, vocab);
    let mut model = Model::new(cfg.clone(), seed).expect("model");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    // Move norm parameters off their initial values so every path matters.
    for (name, p) in model.names().to_vec().iter().zip(model.params_mut()) {
        if name.ends_with(".gain") || name.ends_with(".bias") {
            let base = if name.ends_with(".gain") { 1.0 } else { 0.0 };
            for v in p.data_mut() {
                *v = base + rng.gen_range(-0.3..0.3);
            }
        }
    }
    let lambda = if variant.is_enc_only() { 0.7 } else { 0.0 };
    let (eps_mt, eps_re) = (0.1f32, 0.05f32);
    let examples: Vec<ConcatExample> = [Reconstruction::Ae, Reconstruction::Lm]
        .into_iter()
        .map(|task| {
            let src = [rng.gen_range(7..vocab as TokenId)];
            let tgt = [rng.gen_range(7..vocab as TokenId), rng.gen_range(7..vocab as TokenId)];
            let ex = ConcatExample::concat_pair(&src, &tgt, TagSet::GENERIC).expect("example");
            if variant.is_enc_only() {
                ex.with_reconstruction(task)
            } else {
                ex
            }
        })
        .collect();

    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let inputs: Vec<SeqInput> = examples
        .iter()
        .map(|e| SeqInput {
            ids: e.input_ids(),
            boundary: e.boundary(),
        })
        .collect();
    let fwd = model.forward(&mut tape, &bound, &inputs, Outputs::All, None).expect("forward");
    let refs: Vec<&ConcatExample> = examples.iter().collect();
    let parts = compute_tlm_loss(&mut tape, &fwd, &refs, lambda, eps_mt, eps_re).expect("loss");
    tape.backward(parts.total).expect("backward");
    let analytic: Vec<f64> = model
        .gradients(&tape, &bound)
        .into_iter()
        .flatten()
        .map(f64::from)
        .collect();

    let sizes: Vec<usize> = model.params().iter().map(Tensor::numel).collect();
    let flat: Vec<f64> = model.params().iter().flat_map(|t| t.data().iter().map(|&v| v as f64)).collect();
    let f = |x: &[f64]| {
        let (mt, re) = oracle::ref_losses(&cfg, x, &sizes, &examples, eps_mt as f64, eps_re as f64);
        mt + lambda * re
    };
    let value_diff = (parts.l_tlm - f(&flat)).abs();
    let numeric = oracle::numeric_grad(&f, &flat, 1e-5);
    (oracle::rel_error(&analytic, &numeric), value_diff)
}

pub fn model_gradcheck_cases() -> Vec<(&'static str, Variant, SourceMask)> {
    vec![
        ("enc-only full", Variant::EncOnly { layers: 2 }, SourceMask::Full),
        ("enc-only triangular", Variant::EncOnly { layers: 2 }, SourceMask::Triangular),
        ("enc-dec 2+2", Variant::EncDec { enc_layers: 2, dec_layers: 2 }, SourceMask::Full),
    ]
}

pub fn c3_gradients() -> Check {
    let prim = primitive_gradients();
    let (worst_name, worst) = prim
        .iter()
        .cloned()
        .fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    ensure!(worst < PRIMITIVE_TOL, "primitive {worst_name}: relative error {worst:.2e}");
    let mut parts = vec![format!("{} primitive checks, worst {worst:.1e} ({worst_name})", prim.len())];
    for (name, variant, mask) in model_gradcheck_cases() {
        let (err, value) = model_gradcheck(variant, mask, 7);
        ensure!(err < MODEL_TOL, "{name}: relative error {err:.2e}");
        ensure!(value < 1e-4, "{name}: loss differs from the reference by {value:.2e}");
        parts.push(format!("{name} {err:.1e}"));
    }
    Ok(parts.join("; "))
}

// ---------------------------------------------------------------- 4

pub fn c4_schedules() -> Check {
    let mut checked = 0;
    for tau in [1u64, 7, 100, 1000, 4000] {
        for kind in ScheduleKind::ALL {
            let s = LambdaSchedule::new(kind, tau).map_err(fail)?;
            let pts: Vec<f64> = (0..1000u64).map(|i| s.at(i * 20 * tau / 999)).collect();
            match kind {
                ScheduleKind::Const0 => ensure!(pts.iter().all(|&v| v == 0.0), "const0 not constant"),
                ScheduleKind::Const1 => ensure!(pts.iter().all(|&v| v == 1.0), "const1 not constant"),
                _ => {
                    ensure!(s.at(0) == 1.0, "{kind} τ={tau}: λ(0) = {:e}", s.at(0));
                    ensure!(s.at(tau) == 0.1, "{kind} τ={tau}: λ(τ) = {:e}", s.at(tau));
                }
            }
            ensure!(
                pts.windows(2).all(|w| w[1] <= w[0]),
                "{kind} τ={tau}: not monotone non-increasing"
            );
            ensure!(pts.iter().all(|v| (0.0..=1.0).contains(v)), "{kind} τ={tau}: λ outside [0, 1]");
            checked += 1;
        }
        let two = LambdaSchedule::new(ScheduleKind::TwoStepLinear, tau).map_err(fail)?;
        ensure!((two.at(10 * tau) - 0.01).abs() < 1e-12, "two-step λ(10τ) = {}", two.at(10 * tau));
        let exp = LambdaSchedule::new(ScheduleKind::Exponential, tau).map_err(fail)?;
        ensure!((exp.at(2 * tau) - 0.01).abs() < 1e-15, "exponential λ(2τ) = {}", exp.at(2 * tau));
    }
    Ok(format!("{checked} schedules exact at 0 and τ, monotone over 1000 points"))
}

// ---------------------------------------------------------------- 5

fn random_example(rng: &mut ChaCha8Rng, vocab: TokenId) -> ConcatExample {
    let n = rng.gen_range(1..6);
    let m = rng.gen_range(1..6);
    let src: Vec<TokenId> = (0..n).map(|_| rng.gen_range(7..vocab)).collect();
    let tgt: Vec<TokenId> = (0..m).map(|_| rng.gen_range(7..vocab)).collect();
    match rng.gen_range(0..5) {
        0 => ConcatExample::monolingual(&tgt, TagSet::GENERIC).expect("mono"),
        1 => ConcatExample::concat_pair(&src, &tgt, TagSet::GENERIC).expect("pair"),
        2 => ConcatExample::concat_pair(&src, &tgt, TagSet::GENERIC)
            .expect("pair")
            .with_reconstruction(Reconstruction::Lm),
        _ => ConcatExample::concat_pair(&src, &tgt, TagSet::GENERIC)
            .expect("pair")
            .with_reconstruction(Reconstruction::Ae),
    }
}

/// Logits for a batch as a tape parameter, with the row layout a forward
/// pass over every position would produce.
fn random_forward(tape: &mut Tape, rows: usize, vocab: usize, offsets: &[usize], data: &[f32]) -> Forward {
    let logits = tape.param(Tensor::new(vec![rows, vocab], data.to_vec()).expect("logits"));
    Forward {
        logits,
        offsets: offsets.to_vec(),
        first_pos: vec![0; offsets.len() - 1],
    }
}

/// `L_TLM` against the identity and the reference losses; gradients with
/// `λ = 0` against a plain target-side cross entropy. Returns the largest
/// identity gap, reference gap and gradient gap.
pub fn loss_identity_batches(batches: usize) -> (f64, f64, f64) {
    let vocab = 15usize;
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let (mut ident, mut refgap, mut gradgap) = (0.0f64, 0.0f64, 0.0f64);
    for b in 0..batches {
        let n = rng.gen_range(1..5);
        let examples: Vec<ConcatExample> = (0..n).map(|_| random_example(&mut rng, vocab as TokenId)).collect();
        let refs: Vec<&ConcatExample> = examples.iter().collect();
        let mut offsets = vec![0];
        for e in &examples {
            offsets.push(offsets.last().unwrap() + e.len());
        }
        let rows = *offsets.last().unwrap();
        let data: Vec<f32> = (0..rows * vocab).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let lambda = if b % 10 == 0 { 0.0 } else { rng.gen_range(0.0..=2.0) };
        let eps_mt = [0.0f32, 0.1][rng.gen_range(0..2)];
        let eps_re = [0.0f32, 0.1][rng.gen_range(0..2)];

        let mut tape = Tape::new();
        let fwd = random_forward(&mut tape, rows, vocab, &offsets, &data);
        let parts = compute_tlm_loss(&mut tape, &fwd, &refs, lambda, eps_mt, eps_re).expect("loss");
        let combined = lambda * parts.l_re + parts.l_mt;
        ident = ident
            .max((tape.value(parts.total).data()[0] as f64 - combined).abs())
            .max((parts.l_tlm - combined).abs());

        let (mut mt, mut wmt, mut re, mut wre) = (0.0, 0.0, 0.0, 0.0);
        let mut targets = vec![0usize; rows];
        let mut w_target = vec![0.0f32; rows];
        for (s, e) in examples.iter().enumerate() {
            for p in 0..e.len() {
                let r = offsets[s] + p;
                let w = e.loss_weights()[p] as f64;
                let t = e.target_ids()[p] as usize;
                let row: Vec<f64> = data[r * vocab..(r + 1) * vocab].iter().map(|&v| v as f64).collect();
                if p >= e.boundary() {
                    mt += w * oracle::smoothed_nll(&row, t, eps_mt as f64);
                    wmt += w;
                    targets[r] = t;
                    w_target[r] = w as f32;
                } else if w > 0.0 {
                    re += w * oracle::smoothed_nll(&row, t, eps_re as f64);
                    wre += w;
                }
            }
        }
        let re_ref = if wre > 0.0 { re / wre } else { 0.0 };
        refgap = refgap
            .max((parts.l_mt - mt / wmt).abs())
            .max((parts.l_re - re_ref).abs());

        // λ = 0 against a hand-built target-only cross entropy.
        let mut t1 = Tape::new();
        let f1 = random_forward(&mut t1, rows, vocab, &offsets, &data);
        let p1 = compute_tlm_loss(&mut t1, &f1, &refs, 0.0, eps_mt, eps_re).expect("loss");
        t1.backward(p1.total).expect("backward");
        let mut t2 = Tape::new();
        let x2 = t2.param(Tensor::new(vec![rows, vocab], data.clone()).expect("logits"));
        let l2 = t2.cross_entropy(x2, &targets, &w_target, eps_mt).expect("ce");
        t2.backward(l2).expect("backward");
        let g1 = t1.grad(f1.logits).expect("grad");
        let g2 = t2.grad(x2).expect("grad");
        gradgap = gradgap.max(max_abs_diff(g1, g2));
    }
    (ident, refgap, gradgap)
}

/// `V = 3`, uniform logits, one source and one target loss row:
/// `L_RE = L_MT = ln 3`, so `λ = 0.5` gives `1.5·ln 3`.
pub fn hand_loss_example() -> f64 {
    let ex = ConcatExample::from_parts(vec![0, 1], vec![2, 1], vec![1.0, 1.0], 1).expect("example");
    let mut tape = Tape::new();
    let fwd = random_forward(&mut tape, 2, 3, &[0, 2], &[0.0; 6]);
    compute_tlm_loss(&mut tape, &fwd, &[&ex], 0.5, 0.0, 0.0).expect("loss").l_tlm
}

pub fn c5_loss_identity() -> Check {
    let (ident, refgap, gradgap) = loss_identity_batches(100);
    ensure!(ident < 1e-6, "identity gap {ident:.2e}");
    ensure!(refgap < 1e-5, "losses differ from the reference by {refgap:.2e}");
    ensure!(gradgap <= 1e-6, "λ=0 gradient differs from pure L_MT by {gradgap:.2e}");
    let hand = hand_loss_example();
    let want = 1.5 * 3f64.ln();
    ensure!((hand - want).abs() < 1e-6, "hand example {hand} ≠ 1.5·ln 3 = {want}");
    Ok(format!(
        "100 batches: identity gap {ident:.1e}, reference gap {refgap:.1e}, λ=0 grad gap {gradgap:.1e}; hand example {hand:.6}"
    ))
}

// ---------------------------------------------------------------- 6

#[derive(Debug, Default)]
pub struct NoiseStats {
    pub tokens: usize,
    pub selected: usize,
    pub masked: usize,
    pub random: usize,
    pub kept: usize,
    pub bad_weights: usize,
    pub tags_touched: usize,
}

pub fn noise_statistics(min_tokens: usize) -> NoiseStats {
    // A large replacement range makes a random draw equal to the original
    // token (indistinguishable from "keep") negligible.
    let replacement = 7..2007;
    let spec = NoiseSpec {
        seed: 17,
        ..NoiseSpec::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut st = NoiseStats::default();
    let mut index = 0u64;
    while st.tokens < min_tokens {
        let n = rng.gen_range(1..40);
        let src: Vec<TokenId> = (0..n).map(|_| rng.gen_range(replacement.clone())).collect();
        let mut ex = ConcatExample::concat_pair(&src, &[9, 10], TagSet::GENERIC)
            .expect("pair")
            .with_reconstruction(Reconstruction::Ae);
        let orig = ex.input_ids().to_vec();
        ex.apply_noise(&spec, replacement.clone(), &mut example_rng(spec.seed, 0, index));
        index += 1;
        let b = ex.boundary();
        for p in 0..ex.len() {
            let content = p >= 1 && p < b - 1;
            if !content {
                if ex.noise_applied()[p] || ex.input_ids()[p] != orig[p] {
                    st.tags_touched += 1;
                }
                continue;
            }
            st.tokens += 1;
            if !ex.noise_applied()[p] {
                continue;
            }
            st.selected += 1;
            let now = ex.input_ids()[p];
            if now == MASK {
                st.masked += 1;
            } else if now != orig[p] {
                st.random += 1;
            } else {
                st.kept += 1;
            }
            if ex.loss_weights()[p] != 1.0 || ex.target_ids()[p] != orig[p] {
                st.bad_weights += 1;
            }
        }
    }
    st
}

pub fn c6_noise() -> Check {
    let s = noise_statistics(200_000);
    let sel = s.selected as f64 / s.tokens as f64;
    let frac = |n: usize| n as f64 / s.selected as f64;
    let (m, r, k) = (frac(s.masked), frac(s.random), frac(s.kept));
    let summary = format!(
        "{} tokens: selected {sel:.4}, <m> {m:.4}, random {r:.4}, keep {k:.4}",
        s.tokens
    );
    ensure!(s.tokens >= 100_000, "only {} tokens", s.tokens);
    ensure!((sel - 0.15).abs() <= 0.01, "selected fraction off: {summary}");
    ensure!((m - 0.8).abs() <= 0.02, "mask fraction off: {summary}");
    ensure!((r - 0.1).abs() <= 0.02, "random fraction off: {summary}");
    ensure!((k - 0.1).abs() <= 0.02, "keep fraction off: {summary}");
    ensure!(s.bad_weights == 0, "{} selected positions lost weight 1 or their original target", s.bad_weights);
    ensure!(s.tags_touched == 0, "{} tag or target positions were noised", s.tags_touched);
    Ok(format!("{summary}; all selected positions keep weight 1"))
}

// ---------------------------------------------------------------- 7

/// Counting oracle written from the layer inventory: attention 4d² per
/// block, FFN 2·d·d_ff, a gain and bias per pre-norm.
pub fn counted_params(cfg: &ModelConfig) -> usize {
    let d = cfg.d_model;
    let enc = 4 * d * d + 2 * d * cfg.d_ff + 2 * 2 * d;
    let dec = 2 * 4 * d * d + 2 * d * cfg.d_ff + 3 * 2 * d;
    let emb = cfg.vocab_size * d * if cfg.tie_embeddings { 1 } else { 2 };
    emb + match cfg.variant {
        Variant::EncOnly { layers } => layers * enc,
        Variant::EncDec { enc_layers, dec_layers } => enc_layers * enc + dec_layers * dec,
    }
}

pub fn c7_params() -> Check {
    let big = |variant| ModelConfig {
        variant,
        d_model: 512,
        d_ff: 1024,
        heads: 8,
        vocab_size: 10_000,
        max_len: 256,
        dropout: 0.1,
        tie_embeddings: true,
        source_mask: SourceMask::Full,
    };
    let enc15 = big(Variant::EncOnly { layers: 15 }).count_params().total();
    let ed66 = big(Variant::EncDec { enc_layers: 6, dec_layers: 6 }).count_params().total();
    ensure!(enc15 == ed66, "enc-only 15 has {enc15}, enc-dec 6+6 has {ed66}");
    let mut incs = Vec::new();
    for l in [5, 10, 15] {
        let a = big(Variant::EncOnly { layers: l }).count_params().total();
        let b = big(Variant::EncOnly { layers: l + 5 }).count_params().total();
        let inc = b - a;
        ensure!(
            ((inc as f64 - 10.5e6) / 10.5e6).abs() <= 0.02,
            "increment {l}→{} is {inc}, not within 2% of 10.5M",
            l + 5
        );
        incs.push(inc);
    }
    let per_layer = incs[0] as f64 / 5.0;
    ensure!(((per_layer - 2.10e6) / 2.10e6).abs() <= 0.02, "per-layer count {per_layer}");

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let heads = rng.gen_range(1..5);
        let variant = if rng.gen_bool(0.5) {
            Variant::EncOnly { layers: rng.gen_range(1..5) }
        } else {
            Variant::EncDec {
                enc_layers: rng.gen_range(1..4),
                dec_layers: rng.gen_range(1..4),
            }
        };
        let cfg = ModelConfig {
            variant,
            d_model: heads * rng.gen_range(1..9),
            d_ff: rng.gen_range(1..40),
            heads,
            vocab_size: rng.gen_range(8..60),
            max_len: 32,
            dropout: 0.0,
            tie_embeddings: rng.gen_bool(0.5),
            source_mask: SourceMask::Full,
        };
        let symbolic = cfg.count_params().total();
        let allocated = Model::new(cfg.clone(), 0).map_err(fail)?.num_floats();
        ensure!(
            symbolic == allocated && symbolic == counted_params(&cfg),
            "{cfg:?}: symbolic {symbolic}, allocated {allocated}, oracle {}",
            counted_params(&cfg)
        );
    }
    Ok(format!(
        "enc-only 15 = enc-dec 6+6 = {enc15}; per-5-layer increment {} (10.5M ±2%); 50 random configs allocate exactly their count",
        incs[0]
    ))
}

// ---------------------------------------------------------------- 8

/// Next-token distributions drawn from a hash of the prefix.
pub struct TableScorer {
    pub vocab: usize,
    pub seed: u64,
}

impl NextTokenScorer for TableScorer {
    fn next_log_probs(&self, src: &[TokenId], _: TagSet, prefixes: &[&[TokenId]]) -> tlm_core::Result<Vec<Vec<f32>>> {
        Ok(prefixes
            .iter()
            .map(|p| {
                let mut h = self.seed;
                for &t in src.iter().chain(p.iter()) {
                    h = (h ^ (t as u64 + 1)).wrapping_mul(0x100_0000_01b3);
                }
                h = (h ^ p.len() as u64).wrapping_mul(0x100_0000_01b3);
                let mut r = ChaCha8Rng::seed_from_u64(h);
                let logits: Vec<f64> = (0..self.vocab).map(|_| r.gen_range(-2.0..2.0)).collect();
                oracle::log_softmax(&logits).into_iter().map(|v| v as f32).collect()
            })
            .collect())
    }
}

/// Best finished hypothesis by exhaustive enumeration: `(tokens, score)`.
pub fn brute_force<S: NextTokenScorer>(
    scorer: &S,
    src: &[TokenId],
    tags: TagSet,
    max_len: usize,
    alpha: f64,
) -> Option<(Vec<TokenId>, f64)> {
    let mut best: Option<(Vec<TokenId>, f64)> = None;
    let mut frontier: Vec<(Vec<TokenId>, f64)> = vec![(Vec::new(), 0.0)];
    for _ in 0..max_len {
        let prefixes: Vec<&[TokenId]> = frontier.iter().map(|(t, _)| t.as_slice()).collect();
        let dists = scorer.next_log_probs(src, tags, &prefixes).expect("scores");
        let mut next = Vec::new();
        for ((toks, lp), dist) in frontier.iter().zip(&dists) {
            for (t, &l) in dist.iter().enumerate() {
                let mut seq = toks.clone();
                seq.push(t as TokenId);
                let total = lp + l as f64;
                if t as TokenId == tags.tgt_eos {
                    let score = if alpha == 0.0 { total } else { total / (seq.len() as f64).powf(alpha) };
                    if best.as_ref().map_or(true, |b| score > b.1) {
                        seq.pop();
                        best = Some((seq, score));
                    }
                } else {
                    next.push((seq, total));
                }
            }
        }
        frontier = next;
    }
    best
}

pub struct SearchReport {
    pub greedy_cases: usize,
    pub exhaustive_cases: usize,
    pub ranking_cases: usize,
    pub offset_spread: f64,
}

pub fn search_soundness() -> Result<SearchReport, String> {
    let mut rep = SearchReport {
        greedy_cases: 0,
        exhaustive_cases: 0,
        ranking_cases: 0,
        offset_spread: 0.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let models: Vec<Model> = [
        (Variant::EncOnly { layers: 2 }, SourceMask::Full),
        (Variant::EncOnly { layers: 2 }, SourceMask::Triangular),
        (Variant::EncDec { enc_layers: 1, dec_layers: 1 }, SourceMask::Full),
    ]
    .iter()
    .enumerate()
    .map(|(i, &(v, m))| Model::new(tiny_config(v, m, 16, 2, 10), 30 + i as u64).expect("model"))
    .collect();

    // Beam of one against greedy.
    for model in &models {
        for _ in 0..10 {
            let src: Vec<TokenId> = (0..rng.gen_range(1..5)).map(|_| rng.gen_range(7..10)).collect();
            let cfg = BeamConfig {
                beam_size: 1,
                alpha: 0.6,
                max_len: Some(6),
            };
            let b = beam_search(model, &src, TagSet::GENERIC, &cfg).map_err(fail)?;
            let g = greedy(model, &src, TagSet::GENERIC, 6).map_err(fail)?;
            ensure!(
                b.tokens == g.tokens && (b.log_prob - g.log_prob).abs() < 1e-9,
                "beam 1 {:?} ≠ greedy {:?}",
                b.tokens,
                g.tokens
            );
            rep.greedy_cases += 1;
        }
    }

    // Exhaustive search on V = 3, length ≤ 3, with a beam wide enough to
    // keep every hypothesis.
    let tags = TagSet {
        tgt_eos: 0,
        ..TagSet::GENERIC
    };
    for seed in 0..40u64 {
        let scorer = TableScorer { vocab: 3, seed };
        for alpha in [0.0, 0.6, 1.0] {
            for max_len in 1..=3 {
                let cfg = BeamConfig {
                    beam_size: 27,
                    alpha,
                    max_len: Some(max_len),
                };
                let got = beam_search(&scorer, &[1, 2], tags, &cfg).map_err(fail)?;
                let (want, score) = brute_force(&scorer, &[1, 2], tags, max_len, alpha).expect("a finished sequence");
                ensure!(
                    got.tokens == want && (got.score - score).abs() < 1e-9,
                    "seed {seed} α {alpha} len {max_len}: beam {:?} ({}) vs brute force {want:?} ({score})",
                    got.tokens,
                    got.score
                );
                rep.exhaustive_cases += 1;
            }
        }
    }
    // The real network over a three-token output alphabet is covered by
    // treating its whole vocabulary as the alphabet for length ≤ 2.
    for model in &models {
        let src = [7, 8];
        let cfg = BeamConfig {
            beam_size: 100,
            alpha: 0.6,
            max_len: Some(2),
        };
        let got = beam_search(model, &src, TagSet::GENERIC, &cfg).map_err(fail)?;
        if let Some((want, _)) = brute_force(model, &src, TagSet::GENERIC, 2, 0.6) {
            ensure!(got.tokens == want, "model beam {:?} vs brute force {want:?}", got.tokens);
        }
        rep.exhaustive_cases += 1;
    }

    // Joint and conditional scores rank candidates identically.
    for model in models.iter().filter(|m| m.config().variant.is_enc_only()) {
        for _ in 0..10 {
            let src: Vec<TokenId> = (0..rng.gen_range(1..5)).map(|_| rng.gen_range(7..10)).collect();
            let cands: Vec<Vec<TokenId>> = (0..8)
                .map(|_| (0..rng.gen_range(1..5)).map(|_| rng.gen_range(7..10)).collect())
                .collect();
            let scores = score_joint_vs_conditional(model, &src, TagSet::GENERIC, &cands).map_err(fail)?;
            let offsets: Vec<f64> = scores.iter().map(|s| s.joint - s.conditional).collect();
            let spread = offsets.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                - offsets.iter().cloned().fold(f64::INFINITY, f64::min);
            rep.offset_spread = rep.offset_spread.max(spread);
            ensure!(spread <= 1e-5, "joint − conditional varies by {spread:e}");
            let j: Vec<f64> = scores.iter().map(|s| s.joint).collect();
            let c: Vec<f64> = scores.iter().map(|s| s.conditional).collect();
            ensure!(ranking(&j) == ranking(&c), "rankings differ: {:?} vs {:?}", ranking(&j), ranking(&c));
            rep.ranking_cases += 1;
        }
    }
    Ok(rep)
}

pub fn c8_search() -> Check {
    let r = search_soundness()?;
    Ok(format!(
        "beam-1 = greedy on {} inputs; beam = brute force on {} instances; {} candidate sets rank identically (offset spread {:.1e})",
        r.greedy_cases, r.exhaustive_cases, r.ranking_cases, r.offset_spread
    ))
}

// ---------------------------------------------------------------- 9–12

pub fn detokenizer(c: &Corpora) -> impl Fn(&[TokenId]) -> String + Sync + '_ {
    move |ids: &[TokenId]| c.segmenter.detokenize(&c.vocab, ids)
}

pub fn beam_of(cfg: &RunConfig) -> BeamConfig {
    BeamConfig {
        beam_size: cfg.beam,
        alpha: cfg.alpha,
        max_len: None,
    }
}

/// Train, then score the best checkpoint on `pairs`.
pub fn train_and_bleu(cfg: &RunConfig, pairs_of: impl Fn(&Corpora) -> Vec<Pair>) -> Result<(TrainOutcome, f64), String> {
    let c = load_corpora(cfg).map_err(fail)?;
    let out = train(cfg, &c.train_data(), &mut |_| Ok(())).map_err(fail)?;
    let bleu = evaluate_bleu(&out.best, &pairs_of(&c), &beam_of(cfg), &detokenizer(&c)).map_err(fail)?;
    Ok((out, bleu.bleu))
}

pub fn c9_parity(seeds: &[u64]) -> Check {
    let mut enc_only = Vec::new();
    let mut enc_dec = Vec::new();
    for &seed in seeds {
        for (name, out) in [("reversal.cfg", &mut enc_only), ("reversal-enc-dec.cfg", &mut enc_dec)] {
            let mut cfg = load_config(name);
            cfg.seed = seed;
            let (_, bleu) = train_and_bleu(&cfg, |c| c.test.clone())?;
            out.push(bleu);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let gap = enc_only.iter().zip(&enc_dec).map(|(a, b)| a - b).sum::<f64>() / seeds.len() as f64;
    let summary = format!(
        "enc-only {enc_only:.2?} (mean {:.2}), enc-dec {enc_dec:.2?} (mean {:.2}), mean difference {gap:+.2}",
        mean(&enc_only),
        mean(&enc_dec)
    );
    ensure!(
        enc_only.iter().chain(&enc_dec).all(|&b| b >= 95.0),
        "a run is below BLEU 95: {summary}"
    );
    ensure!(gap.abs() <= 3.0, "parity gap above 3: {summary}");
    Ok(summary)
}

pub struct GridSummary {
    pub rows: Vec<String>,
    pub full_mean: f64,
    pub triangular_mean: f64,
    pub failed: usize,
}

pub fn run_grid(cfg: &RunConfig, jobs: usize, dir: Option<&Path>) -> Result<GridSummary, String> {
    let c = load_corpora(cfg).map_err(fail)?;
    let data = c.train_data();
    let detok = detokenizer(&c);
    let inputs = GridInputs {
        base: cfg,
        data: &data,
        test: &c.test,
        detok: &detok,
    };
    let rows = grid_search(&inputs, jobs, dir, &|_| {});
    let mean_for = |mask: SourceMask| {
        let v: Vec<f64> = rows
            .iter()
            .filter(|r| matches!(r.cell, GridCell::Tlm { mask: m, .. } if m == mask))
            .filter_map(|r| r.bleu)
            .collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    };
    Ok(GridSummary {
        rows: rows.iter().map(|r| r.tsv()).collect(),
        full_mean: mean_for(SourceMask::Full),
        triangular_mean: mean_for(SourceMask::Triangular),
        failed: rows.iter().filter(|r| r.bleu.is_none()).count(),
    })
}

pub fn c10_grid(jobs: usize) -> Check {
    let cfg = load_config("grid.cfg");
    let dir = tempfile::tempdir().map_err(fail)?;
    let g = run_grid(&cfg, jobs, Some(dir.path()))?;
    let per_task = |t: &str| g.rows.iter().filter(|r| r.starts_with(&format!("{t}\t"))).count();
    let diff = g.full_mean - g.triangular_mean;
    let direction = if diff >= 0.0 { "full ahead" } else { "triangular ahead" };
    let summary = format!(
        "{} rows ({} lm, {} ae, {} failed); mean BLEU full {:.2} vs triangular {:.2} ({diff:+.2}, {direction})",
        g.rows.len(),
        per_task("lm"),
        per_task("ae"),
        g.failed,
        g.full_mean,
        g.triangular_mean
    );
    ensure!(g.rows.len() == 33, "expected 33 rows: {summary}");
    ensure!(per_task("lm") == 16 && per_task("ae") == 16, "unbalanced grid: {summary}");
    ensure!(g.failed == 0, "failed runs: {summary}");
    ensure!(diff >= -2.0, "full mask more than 2 BLEU behind: {summary}");
    Ok(summary)
}

pub struct BackTranslationReport {
    pub genuine_bleu: f64,
    pub augmented_bleu: f64,
    pub genuine_ppl: f64,
    pub augmented_ppl: f64,
    pub synthetic: usize,
    pub skipped: usize,
}

pub fn back_translation_experiment(steps: Option<u64>) -> Result<BackTranslationReport, String> {
    let with_steps = |mut c: RunConfig| {
        if let Some(s) = steps {
            c.steps = s;
        }
        c
    };
    let reverse_cfg = with_steps(load_config("backtrans-reverse.cfg"));
    let genuine_cfg = with_steps(load_config("backtrans-genuine.cfg"));

    let rc = load_corpora(&reverse_cfg).map_err(fail)?;
    let reverse = train(&reverse_cfg, &rc.train_data(), &mut |_| Ok(())).map_err(fail)?;
    let mono_path = repo_root().join("data/toy/backtrans/mono.tgt");
    let mono_text = fs::read_to_string(&mono_path).map_err(fail)?;
    let mono: Vec<Vec<TokenId>> = mono_text.lines().map(|l| rc.segmenter.encode(&rc.vocab, l)).collect();
    let bt = back_translate(&reverse.best, &mono, TagSet::GENERIC, &beam_of(&reverse_cfg));
    let skipped = bt.skipped.len();
    let dir = tempfile::tempdir().map_err(fail)?;
    let (src_path, tgt_path) = (dir.path().join("synthetic.src"), dir.path().join("synthetic.tgt"));
    let detok = detokenizer(&rc);
    let (src_lines, tgt_lines): (Vec<String>, Vec<String>) =
        bt.pairs.iter().map(|(s, t)| (detok(s) + "\n", detok(t) + "\n")).unzip();
    fs::write(&src_path, src_lines.concat()).map_err(fail)?;
    fs::write(&tgt_path, tgt_lines.concat()).map_err(fail)?;

    let (genuine, genuine_bleu) = train_and_bleu(&genuine_cfg, |c| c.test.clone())?;
    let mut aug_cfg = genuine_cfg.clone();
    aug_cfg.synthetic_src = Some(src_path);
    aug_cfg.synthetic_tgt = Some(tgt_path);
    let (augmented, augmented_bleu) = train_and_bleu(&aug_cfg, |c| c.test.clone())?;
    Ok(BackTranslationReport {
        genuine_bleu,
        augmented_bleu,
        genuine_ppl: genuine.best_dev_ppl.ok_or("no dev perplexity")?,
        augmented_ppl: augmented.best_dev_ppl.ok_or("no dev perplexity")?,
        synthetic: bt.pairs.len(),
        skipped,
    })
}

pub fn c11_back_translation() -> Check {
    let r = back_translation_experiment(None)?;
    let summary = format!(
        "{} synthetic pairs ({} skipped); BLEU genuine {:.2} → augmented {:.2}; dev PPL {:.4} → {:.4}",
        r.synthetic, r.skipped, r.genuine_bleu, r.augmented_bleu, r.genuine_ppl, r.augmented_ppl
    );
    ensure!(r.augmented_bleu >= r.genuine_bleu, "BLEU regressed: {summary}");
    ensure!(r.augmented_ppl < r.genuine_ppl, "dev perplexity did not decrease: {summary}");
    Ok(summary)
}

pub struct DirectionResult {
    pub direction: String,
    pub bleu: f64,
    /// Fraction of output words that belong to the requested target language.
    pub on_target: f64,
}

pub fn multilingual_experiment(steps: Option<u64>) -> Result<Vec<DirectionResult>, String> {
    let mut cfg = load_config("multilingual.cfg");
    if let Some(s) = steps {
        cfg.steps = s;
    }
    let c = load_corpora(&cfg).map_err(fail)?;
    let out = train(&cfg, &c.train_data(), &mut |_| Ok(())).map_err(fail)?;
    let detok = detokenizer(&c);
    let mut results = Vec::new();
    for (s, t) in &cfg.directions {
        let tags = c.vocab.direction_tags(s, t).map_err(fail)?;
        let pairs: Vec<Pair> = c.train.iter().filter(|p| p.tags == tags).cloned().collect();
        ensure!(!pairs.is_empty(), "no training pairs for {s}-{t}");
        let bleu = evaluate_bleu(&out.best, &pairs, &beam_of(&cfg), &detok).map_err(fail)?;
        let words: Vec<String> = (0..CONCEPTS).map(|i| lang_word(t, i)).collect();
        let (mut good, mut total) = (0usize, 0usize);
        for p in &pairs {
            let hyp = beam_search(&out.best, &p.src, tags, &beam_of(&cfg)).map_err(fail)?;
            for w in detok(&hyp.tokens).split_whitespace() {
                total += 1;
                good += words.iter().any(|x| x == w) as usize;
            }
        }
        results.push(DirectionResult {
            direction: format!("{s}-{t}"),
            bleu: bleu.bleu,
            on_target: good as f64 / total.max(1) as f64,
        });
    }
    Ok(results)
}

pub fn c12_multilingual() -> Check {
    let res = multilingual_experiment(None)?;
    ensure!(res.len() == LANGUAGES.len() * (LANGUAGES.len() - 1), "{} directions", res.len());
    let summary = res
        .iter()
        .map(|r| format!("{} {:.1} ({:.1}% on-target)", r.direction, r.bleu, 100.0 * r.on_target))
        .collect::<Vec<_>>()
        .join(", ");
    ensure!(res.iter().all(|r| r.bleu >= 90.0), "a direction is below BLEU 90: {summary}");
    ensure!(res.iter().all(|r| r.on_target >= 0.99), "outputs in the wrong language: {summary}");
    Ok(summary)
}

// ---------------------------------------------------------------- 13

/// A short but complete training run on a slice of the reversal corpus.
pub fn small_run_config(variant: &str) -> RunConfig {
    let mut cfg = load_config("reversal.cfg");
    cfg.variant = variant.into();
    cfg.d_model = 16;
    cfg.d_ff = 32;
    cfg.heads = 2;
    cfg.batch_tokens = 300;
    cfg.steps = 30;
    cfg.eval_interval = 10;
    cfg
}

pub fn small_corpora(cfg: &RunConfig) -> Corpora {
    let mut c = load_corpora(cfg).expect("corpora");
    c.train.truncate(200);
    c.dev.truncate(40);
    c
}

pub fn c13_determinism() -> Check {
    let mut logs = Vec::new();
    for variant in ["enc-only", "enc-dec"] {
        let cfg = small_run_config(variant);
        let c = small_corpora(&cfg);
        let run = || -> Result<(String, Vec<u8>), String> {
            let mut evals = String::new();
            let out = train(&cfg, &c.train_data(), &mut |r| {
                evals.push_str(&r.eval_tsv());
                Ok(())
            })
            .map_err(fail)?;
            Ok((out.metrics_tsv() + &evals, write_checkpoint(&Checkpoint::new(out.last))))
        };
        let (a, b) = (run()?, run()?);
        ensure!(a.0 == b.0, "{variant}: metrics logs differ between identical runs");
        ensure!(a.1 == b.1, "{variant}: final weights differ between identical runs");
        logs.push(a);
    }

    // Checkpoint round trip through bytes and through a file.
    let (_, bytes) = &logs[0];
    let back = read_checkpoint(bytes).map_err(fail)?;
    ensure!(&write_checkpoint(&back) == bytes, "re-serialized checkpoint differs");
    let dir = tempfile::tempdir().map_err(fail)?;
    let path = dir.path().join("m.ckpt");
    tlm_core::model::save_checkpoint(&back, &path).map_err(fail)?;
    let loaded = tlm_core::model::load_checkpoint(&path, None).map_err(fail)?;
    let same_bits = loaded
        .model
        .params()
        .iter()
        .zip(back.model.params())
        .all(|(a, b)| a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    ensure!(same_bits && loaded.model == back.model, "loaded weights are not bit-identical");

    // BPE round trip on seen and unseen text.
    let text = fs::read_to_string(repo_root().join("data/toy/multi/train.de-es.de")).map_err(fail)?;
    let bpe = BpeModel::train(text.lines(), 40).map_err(fail)?;
    let mut lines: Vec<String> = text.lines().take(200).map(String::from).collect();
    lines.extend(["unseen wordsmith de3de4", "ä ö ü ß", "x", "  spaced   out  "].map(String::from));
    let mut n = 0;
    for l in &lines {
        let norm = l.split_whitespace().collect::<Vec<_>>().join(" ");
        let dec = decode_tokens(&bpe.encode_line(l));
        ensure!(dec == norm, "BPE round trip {l:?} → {dec:?}");
        n += 1;
    }
    let reparsed = BpeModel::parse(&bpe.to_file_string()).map_err(fail)?;
    ensure!(reparsed.merges() == bpe.merges(), "BPE merges file does not round-trip");
    Ok(format!(
        "metrics logs and weights byte-identical across reruns (both variants); checkpoint bit-exact; BPE exact on {n} lines"
    ))
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tlm_core::config::RunConfig;
use tlm_core::data::corpus::{read_lines, read_parallel, write_lines};
use tlm_core::data::{BpeModel, ConcatExample, Segmenter, TagSet, TokenId, Vocab};
use tlm_core::decode::{beam_search, BeamConfig};
use tlm_core::experiment::{load_corpora, load_for_inference, run_training};
use tlm_core::mask::{AttentionMask, SourceMask};
use tlm_core::metrics::{corpus_bleu, perplexity, PplScope};
use tlm_core::train::{back_translate, grid_search, GridInputs, GRID_HEADER};
use tlm_core::Error;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "tlm", version, about = "Train, decode and evaluate translation language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write a run directory.
    Train(TrainArgs),
    /// Translate a file line by line with beam search.
    Translate(TranslateArgs),
    /// Corpus BLEU of a hypothesis file, or perplexity of a checkpoint.
    Score(ScoreArgs),
    /// Run the 33-configuration source-reconstruction grid.
    Grid(GridArgs),
    /// Turn target-side monolingual text into synthetic parallel data.
    Backtranslate(BacktranslateArgs),
    /// Print an attention mask as a 0/1 grid.
    MaskDump(MaskDumpArgs),
    /// Learn BPE merges from text files.
    BpeTrain(BpeTrainArgs),
    /// Segment a text file with learned BPE merges.
    BpeApply(BpeApplyArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Configuration file (`key = value` lines).
    #[arg(long)]
    config: PathBuf,
    /// Override a configuration value, e.g. `--set steps=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> tlm_core::Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        cfg.apply_overrides(&self.overrides, Path::new("."))?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Run directory to create.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DecodeFlags {
    /// Beam width.
    #[arg(long, default_value_t = 4)]
    beam: usize,
    /// Length-normalization exponent.
    #[arg(long, default_value_t = 0.6)]
    alpha: f64,
    /// Maximum target length (default: 2 × source length + 10).
    #[arg(long)]
    max_len: Option<usize>,
    /// Language direction `src-tgt` for multilingual models.
    #[arg(long)]
    direction: Option<String>,
}

impl DecodeFlags {
    fn beam_config(&self) -> BeamConfig {
        BeamConfig {
            beam_size: self.beam,
            alpha: self.alpha,
            max_len: self.max_len,
        }
    }

    fn tags(&self, vocab: &Vocab) -> tlm_core::Result<TagSet> {
        match &self.direction {
            None => Ok(TagSet::GENERIC),
            Some(d) => {
                let (s, t) = d
                    .split_once('-')
                    .ok_or_else(|| Error::Invalid(format!("bad direction {d:?}")))?;
                vocab.direction_tags(s, t)
            }
        }
    }
}

#[derive(Args)]
struct ModelFiles {
    /// Model checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Vocabulary file (default: vocab.txt beside the checkpoint).
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// BPE merges the model was trained with.
    #[arg(long)]
    bpe: Option<PathBuf>,
}

#[derive(Args)]
struct TranslateArgs {
    #[command(flatten)]
    model: ModelFiles,
    #[command(flatten)]
    decode: DecodeFlags,
    /// Source sentences, one per line.
    #[arg(long)]
    input: PathBuf,
    /// Where to write translations.
    #[arg(long)]
    output: PathBuf,
    /// Append a tab and the log-probability of each translation.
    #[arg(long)]
    scores: bool,
}

#[derive(Args)]
struct ScoreArgs {
    /// Hypotheses, one per line.
    #[arg(long, requires = "reference")]
    hyp: Option<PathBuf>,
    /// References aligned with the hypotheses.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Checkpoint whose perplexity to report on --src/--tgt.
    #[arg(long, requires_all = ["src", "tgt"])]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    bpe: Option<PathBuf>,
    #[arg(long)]
    src: Option<PathBuf>,
    #[arg(long)]
    tgt: Option<PathBuf>,
    /// Perplexity scope: target or full.
    #[arg(long, default_value = "target")]
    scope: String,
    /// Language direction `src-tgt` for multilingual models.
    #[arg(long)]
    direction: Option<String>,
}

#[derive(Args)]
struct GridArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory; holds grid.tsv and one subdirectory per cell.
    #[arg(long)]
    out: PathBuf,
    /// Cells trained in parallel.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct BacktranslateArgs {
    /// Reverse-direction (target → source) model.
    #[command(flatten)]
    model: ModelFiles,
    #[command(flatten)]
    decode: DecodeFlags,
    /// Target-language monolingual text.
    #[arg(long)]
    input: PathBuf,
    /// Synthetic sources.
    #[arg(long)]
    out_src: PathBuf,
    /// Genuine targets aligned with --out-src.
    #[arg(long)]
    out_tgt: PathBuf,
}

#[derive(Args)]
struct MaskDumpArgs {
    /// Source length J (including tags).
    #[arg(long = "src-len", short = 'j')]
    src_len: usize,
    /// Target length I (including tags).
    #[arg(long = "tgt-len", short = 'i')]
    tgt_len: usize,
    /// Source block: full or triangular.
    #[arg(long, default_value = "full")]
    variant: String,
}

#[derive(Args)]
struct BpeTrainArgs {
    /// Training text. Repeatable.
    #[arg(long, required = true)]
    input: Vec<PathBuf>,
    /// Number of merges to learn.
    #[arg(long)]
    merges: usize,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct BpeApplyArgs {
    /// Merges file from bpe-train.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        _ if e.is_numeric() => 3,
        Error::Invalid(_) | Error::Config { .. } => 1,
        _ => 2,
    }
}

fn encode_line(seg: &Segmenter, vocab: &Vocab, line: &str) -> Vec<TokenId> {
    seg.encode(vocab, line)
}

fn cmd_train(a: TrainArgs) -> tlm_core::Result<()> {
    let cfg = a.config.resolve()?;
    let out = run_training(&cfg, &a.out)?;
    match out.best_dev_ppl {
        Some(p) => eprintln!("best dev perplexity {p:.4} at step {}", out.best_step),
        None => eprintln!("no dev set; best.ckpt is the final model"),
    }
    Ok(())
}

fn cmd_translate(a: TranslateArgs) -> tlm_core::Result<()> {
    let m = load_for_inference(&a.model.checkpoint, a.model.vocab.as_deref(), a.model.bpe.as_deref())?;
    let tags = a.decode.tags(&m.vocab)?;
    let beam = a.decode.beam_config();
    let mut out = Vec::new();
    for line in read_lines(&a.input)? {
        let src = encode_line(&m.segmenter, &m.vocab, &line);
        let (text, lp) = if src.is_empty() {
            (String::new(), 0.0)
        } else {
            let r = beam_search(&m.ckpt.model, &src, tags, &beam)?;
            (m.segmenter.detokenize(&m.vocab, &r.tokens), r.log_prob)
        };
        out.push(if a.scores { format!("{text}\t{lp:.6}") } else { text });
    }
    write_lines(&a.output, &out)
}

fn cmd_score(a: ScoreArgs) -> tlm_core::Result<()> {
    if a.hyp.is_none() && a.checkpoint.is_none() {
        return Err(Error::Invalid("score needs --hyp/--reference or --checkpoint/--src/--tgt".into()));
    }
    if let (Some(h), Some(r)) = (&a.hyp, &a.reference) {
        let hyps = read_lines(h)?;
        let refs = read_lines(r)?;
        println!("{}", corpus_bleu(&hyps, &refs)?);
    }
    if let (Some(c), Some(s), Some(t)) = (&a.checkpoint, &a.src, &a.tgt) {
        let scope: PplScope = a.scope.parse()?;
        let m = load_for_inference(c, a.vocab.as_deref(), a.bpe.as_deref())?;
        let flags = DecodeFlags {
            beam: 1,
            alpha: 0.0,
            max_len: None,
            direction: a.direction.clone(),
        };
        let tags = flags.tags(&m.vocab)?;
        let examples = read_parallel(s, t)?
            .iter()
            .map(|(s, t)| {
                ConcatExample::concat_pair(
                    &encode_line(&m.segmenter, &m.vocab, s),
                    &encode_line(&m.segmenter, &m.vocab, t),
                    tags,
                )
            })
            .collect::<tlm_core::Result<Vec<_>>>()?;
        println!("perplexity ({scope}) {:.4}", perplexity(&m.ckpt.model, &examples, scope)?);
    }
    Ok(())
}

fn cmd_grid(a: GridArgs) -> tlm_core::Result<()> {
    let cfg = a.config.resolve()?;
    let corpora = load_corpora(&cfg)?;
    if corpora.test.is_empty() {
        return Err(Error::Invalid("grid needs test_src and test_tgt".into()));
    }
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let data = corpora.train_data();
    let detok = |ids: &[TokenId]| corpora.segmenter.detokenize(&corpora.vocab, ids);
    let inputs = GridInputs {
        base: &cfg,
        data: &data,
        test: &corpora.test,
        detok: &detok,
    };
    let rows = grid_search(&inputs, a.jobs, Some(&a.out), &|row| {
        match &row.error {
            None => eprintln!("{}", row.tsv()),
            Some(e) => eprintln!("{} failed: {}", row.cell.slug(), e.replace('\n', " ")),
        }
    });
    let mut lines = vec![GRID_HEADER.to_string()];
    lines.extend(rows.iter().map(|r| r.tsv()));
    write_lines(&a.out.join("grid.tsv"), &lines)?;
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        eprintln!("{failed} of {} runs failed", rows.len());
    }
    Ok(())
}

fn cmd_backtranslate(a: BacktranslateArgs) -> tlm_core::Result<()> {
    let m = load_for_inference(&a.model.checkpoint, a.model.vocab.as_deref(), a.model.bpe.as_deref())?;
    let tags = a.decode.tags(&m.vocab)?;
    let lines = read_lines(&a.input)?;
    let mono: Vec<Vec<TokenId>> = lines
        .iter()
        .map(|l| encode_line(&m.segmenter, &m.vocab, l))
        .collect();
    let bt = back_translate(&m.ckpt.model, &mono, tags, &a.decode.beam_config());
    let mut src = Vec::with_capacity(bt.pairs.len());
    let mut tgt = Vec::with_capacity(bt.pairs.len());
    let kept = (0..lines.len()).filter(|i| !bt.skipped.contains(i));
    for ((f, _), i) in bt.pairs.iter().zip(kept) {
        src.push(m.segmenter.detokenize(&m.vocab, f));
        tgt.push(lines[i].clone());
    }
    write_lines(&a.out_src, &src)?;
    write_lines(&a.out_tgt, &tgt)?;
    eprintln!("skipped {} of {} sentences", bt.skipped.len(), lines.len());
    Ok(())
}

fn cmd_mask_dump(a: MaskDumpArgs) -> tlm_core::Result<()> {
    let variant: SourceMask = a.variant.parse()?;
    print!("{}", AttentionMask::tlm(a.src_len, a.tgt_len, variant)?.render());
    Ok(())
}

fn cmd_bpe_train(a: BpeTrainArgs) -> tlm_core::Result<()> {
    let mut lines = Vec::new();
    for p in &a.input {
        lines.extend(read_lines(p)?);
    }
    let model = BpeModel::train(lines.iter().map(String::as_str), a.merges)?;
    model.save(&a.output)?;
    eprintln!("learned {} merges", model.merges().len());
    Ok(())
}

fn cmd_bpe_apply(a: BpeApplyArgs) -> tlm_core::Result<()> {
    let seg = Segmenter::new(Some(BpeModel::load(&a.model)?));
    let out: Vec<String> = read_lines(&a.input)?.iter().map(|l| seg.segment(l)).collect();
    write_lines(&a.output, &out)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("error: bad usage");
            eprintln!("{first} (see --help)");
            return ExitCode::from(1);
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Translate(a) => cmd_translate(a),
        Command::Score(a) => cmd_score(a),
        Command::Grid(a) => cmd_grid(a),
        Command::Backtranslate(a) => cmd_backtranslate(a),
        Command::MaskDump(a) => cmd_mask_dump(a),
        Command::BpeTrain(a) => cmd_bpe_train(a),
        Command::BpeApply(a) => cmd_bpe_apply(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::from(exit_code(&e))
        }
    }
}

//! File-level plumbing: loading corpora named by a [`RunConfig`], writing
//! run directories, and checkpoint/vocabulary consistency checks.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::data::corpus::{encode_mono, encode_pairs, read_lines, read_parallel};
use crate::data::{BpeModel, MonoSentence, Pair, Segmenter, TagSet, Vocab};
use crate::model::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::train::{train, TrainData, TrainOutcome, EVAL_HEADER, METRICS_HEADER};
use crate::{Error, Result};

pub const VOCAB_META: &str = "vocab_fingerprint";
pub const BPE_META: &str = "bpe_fingerprint";

/// Tokenized corpora and the vocabulary they were encoded with.
#[derive(Clone, Debug)]
pub struct Corpora {
    pub vocab: Vocab,
    pub segmenter: Segmenter,
    pub bpe: Option<BpeModel>,
    pub train: Vec<Pair>,
    pub dev: Vec<Pair>,
    pub test: Vec<Pair>,
    pub mono: Vec<MonoSentence>,
}

impl Corpora {
    pub fn train_data(&self) -> TrainData {
        TrainData {
            train: self.train.clone(),
            mono: self.mono.clone(),
            dev: self.dev.clone(),
            vocab_size: self.vocab.len(),
            replacement: self.vocab.content_range(),
        }
    }
}

/// Substitute `{src}` and `{tgt}` in a path template.
pub fn expand(template: &Path, src: &str, tgt: &str) -> PathBuf {
    PathBuf::from(
        template
            .to_string_lossy()
            .replace("{src}", src)
            .replace("{tgt}", tgt),
    )
}

type Side = (Option<PathBuf>, Option<PathBuf>);

fn read_side(
    (src, tgt): &Side,
    dirs: &[(String, String)],
    required: bool,
    what: &str,
) -> Result<Vec<Vec<(String, String)>>> {
    match (src, tgt) {
        (Some(s), Some(t)) => dirs
            .iter()
            .map(|(a, b)| read_parallel(&expand(s, a, b), &expand(t, a, b)))
            .collect(),
        (None, None) if !required => Ok(vec![Vec::new(); dirs.len()]),
        _ => Err(Error::Invalid(format!(
            "{what}_src and {what}_tgt must both be set"
        ))),
    }
}

/// Read and encode every corpus the configuration names. Without an
/// explicit `vocab` file the vocabulary is built from the training and
/// monolingual text.
pub fn load_corpora(cfg: &RunConfig) -> Result<Corpora> {
    let multi = !cfg.directions.is_empty();
    let dirs: Vec<(String, String)> = if multi {
        cfg.directions.clone()
    } else {
        vec![(String::new(), String::new())]
    };
    let mut train_txt = read_side(&(cfg.train_src.clone(), cfg.train_tgt.clone()), &dirs, true, "train")?;
    if let (Some(s), Some(t)) = (&cfg.synthetic_src, &cfg.synthetic_tgt) {
        train_txt[0].extend(read_parallel(s, t)?);
    }
    let dev_txt = read_side(&(cfg.dev_src.clone(), cfg.dev_tgt.clone()), &dirs, false, "dev")?;
    let test_txt = read_side(&(cfg.test_src.clone(), cfg.test_tgt.clone()), &dirs, false, "test")?;
    let mono_txt = match &cfg.mono {
        Some(p) => read_lines(p)?,
        None => Vec::new(),
    };
    let bpe = cfg.bpe.as_deref().map(BpeModel::load).transpose()?;
    let segmenter = Segmenter::new(bpe.clone());
    let vocab = match &cfg.vocab {
        Some(p) => Vocab::load(p)?,
        None => {
            let mut langs: Vec<String> = dirs
                .iter()
                .filter(|_| multi)
                .flat_map(|(a, b)| [a.clone(), b.clone()])
                .collect();
            langs.sort();
            langs.dedup();
            let segmented: Vec<String> = train_txt
                .iter()
                .flatten()
                .flat_map(|(s, t)| [segmenter.segment(s), segmenter.segment(t)])
                .chain(mono_txt.iter().map(|l| segmenter.segment(l)))
                .collect();
            Vocab::from_corpus(&langs, segmented.iter().map(String::as_str))?
        }
    };
    let tags_for = |(a, b): &(String, String)| {
        if multi {
            vocab.direction_tags(a, b)
        } else {
            Ok(TagSet::GENERIC)
        }
    };
    let encode_all = |txt: &[Vec<(String, String)>]| -> Result<Vec<Pair>> {
        let mut out = Vec::new();
        for (d, lines) in dirs.iter().zip(txt) {
            out.extend(encode_pairs(&vocab, &segmenter, lines, tags_for(d)?)?);
        }
        Ok(out)
    };
    let train = encode_all(&train_txt)?;
    if train.is_empty() {
        return Err(Error::Data("training corpus is empty".into()));
    }
    Ok(Corpora {
        train,
        dev: encode_all(&dev_txt)?,
        test: encode_all(&test_txt)?,
        mono: encode_mono(&vocab, &segmenter, &mono_txt, TagSet::GENERIC)?,
        vocab,
        segmenter,
        bpe,
    })
}

/// Attach vocabulary and BPE fingerprints.
pub fn stamp(ckpt: Checkpoint, vocab: &Vocab, bpe: Option<&BpeModel>) -> Checkpoint {
    ckpt.with_meta(VOCAB_META, format!("{:016x}", vocab.fingerprint()))
        .with_meta(
            BPE_META,
            bpe.map(|b| format!("{:016x}", b.fingerprint()))
                .unwrap_or_else(|| "none".into()),
        )
}

/// Refuse a vocabulary or BPE model other than the one a checkpoint was
/// trained with.
pub fn check_stamp(ckpt: &Checkpoint, vocab: &Vocab, bpe: Option<&BpeModel>) -> Result<()> {
    if ckpt.model.config().vocab_size != vocab.len() {
        return Err(Error::Data(format!(
            "checkpoint expects {} vocabulary entries, vocabulary has {}",
            ckpt.model.config().vocab_size,
            vocab.len()
        )));
    }
    let fp = format!("{:016x}", vocab.fingerprint());
    if let Some(want) = ckpt.meta(VOCAB_META) {
        if want != fp {
            return Err(Error::Data(format!(
                "vocabulary fingerprint {fp} does not match checkpoint ({want})"
            )));
        }
    }
    let have = bpe
        .map(|b| format!("{:016x}", b.fingerprint()))
        .unwrap_or_else(|| "none".into());
    if let Some(want) = ckpt.meta(BPE_META) {
        if want != have {
            return Err(Error::Data(format!(
                "BPE model {have} does not match the one used in training ({want})"
            )));
        }
    }
    Ok(())
}

/// Everything needed to use a trained model on raw text.
pub struct Loaded {
    pub ckpt: Checkpoint,
    pub vocab: Vocab,
    pub segmenter: Segmenter,
}

/// Load a checkpoint with its vocabulary and BPE model (by default
/// `vocab.txt` and, if present, `bpe.txt` next to the checkpoint) and check
/// that they belong together.
pub fn load_for_inference(ckpt: &Path, vocab: Option<&Path>, bpe: Option<&Path>) -> Result<Loaded> {
    let c = load_checkpoint(ckpt, None)?;
    let vocab_path = match vocab {
        Some(v) => v.to_path_buf(),
        None => ckpt.with_file_name("vocab.txt"),
    };
    let vocab = Vocab::load(&vocab_path)?;
    let sibling = ckpt.with_file_name("bpe.txt");
    let bpe = match bpe {
        Some(b) => Some(BpeModel::load(b)?),
        None if sibling.is_file() => Some(BpeModel::load(&sibling)?),
        None => None,
    };
    check_stamp(&c, &vocab, bpe.as_ref())?;
    Ok(Loaded {
        ckpt: c,
        vocab,
        segmenter: Segmenter::new(bpe),
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

/// Train from a configuration and fill `out` with the resolved config, the
/// vocabulary, the metrics and evaluation logs, and the best and last
/// checkpoints.
pub fn run_training(cfg: &RunConfig, out: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let corpora = load_corpora(cfg)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let w = |name: &str, text: &str| {
        let p = out.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    w("config.resolved", &cfg.echo())?;
    corpora.vocab.save(&out.join("vocab.txt"))?;
    if let Some(b) = &corpora.bpe {
        b.save(&out.join("bpe.txt"))?;
    }
    let mpath = out.join("metrics.tsv");
    let epath = out.join("eval.tsv");
    let mut metrics = create(&mpath)?;
    let mut evals = create(&epath)?;
    writeln!(metrics, "{METRICS_HEADER}").map_err(|e| Error::io(&mpath, e))?;
    writeln!(evals, "{EVAL_HEADER}").map_err(|e| Error::io(&epath, e))?;
    let outcome = train(cfg, &corpora.train_data(), &mut |row| {
        writeln!(metrics, "{}", row.tsv())
            .and_then(|_| metrics.flush())
            .map_err(|e| Error::io(&mpath, e))?;
        writeln!(evals, "{}", row.eval_tsv())
            .and_then(|_| evals.flush())
            .map_err(|e| Error::io(&epath, e))
    })?;
    let save = |model: &crate::model::Model, step: u64, name: &str| {
        let c = stamp(Checkpoint::new(model.clone()), &corpora.vocab, corpora.bpe.as_ref())
            .with_meta("step", step);
        save_checkpoint(&c, &out.join(name))
    };
    save(&outcome.best, outcome.best_step, "best.ckpt")?;
    save(&outcome.last, cfg.steps, "last.ckpt")?;
    Ok(outcome)
}

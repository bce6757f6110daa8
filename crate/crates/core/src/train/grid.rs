use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::{train, ScheduleKind, TrainData};
use crate::config::RunConfig;
use crate::data::{Pair, Reconstruction, TokenId};
use crate::decode::{beam_search, BeamConfig};
use crate::mask::SourceMask;
use crate::metrics::{corpus_bleu, BleuReport};
use crate::model::Model;
use crate::{Error, Result};

pub const GRID_HEADER: &str = "task\tmask\tnoise\tschedule\tbleu\tdevPPL";

/// One configuration of the reconstruction grid, or the enc-dec baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GridCell {
    Tlm {
        task: Reconstruction,
        mask: SourceMask,
        noise: bool,
        schedule: ScheduleKind,
    },
    Baseline,
}

impl GridCell {
    /// The four label columns of the result table.
    pub fn columns(&self) -> [String; 4] {
        match *self {
            GridCell::Tlm {
                task,
                mask,
                noise,
                schedule,
            } => [
                task.to_string(),
                mask.to_string(),
                if noise { "on" } else { "off" }.to_string(),
                schedule.to_string(),
            ],
            GridCell::Baseline => ["enc-dec".into(), "-".into(), "-".into(), "-".into()],
        }
    }

    /// Directory name for the cell's run.
    pub fn slug(&self) -> String {
        match self {
            GridCell::Baseline => "baseline-enc-dec".into(),
            GridCell::Tlm { .. } => self.columns().join("-"),
        }
    }

    /// `base` with this cell's dimensions applied.
    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        match *self {
            GridCell::Tlm {
                task,
                mask,
                noise,
                schedule,
            } => {
                cfg.variant = "enc-only".into();
                cfg.task = task;
                cfg.source_mask = mask;
                cfg.noise = noise;
                cfg.schedule = schedule;
            }
            GridCell::Baseline => {
                cfg.variant = "enc-dec".into();
                cfg.noise = false;
                cfg.schedule = ScheduleKind::Const0;
            }
        }
        cfg
    }
}

/// All 32 TLM cells (task × mask × noise × schedule) followed by the baseline.
pub fn grid_cells() -> Vec<GridCell> {
    let mut cells = Vec::with_capacity(33);
    for task in [Reconstruction::Lm, Reconstruction::Ae] {
        for mask in [SourceMask::Triangular, SourceMask::Full] {
            for noise in [false, true] {
                for schedule in ScheduleKind::ALL {
                    cells.push(GridCell::Tlm {
                        task,
                        mask,
                        noise,
                        schedule,
                    });
                }
            }
        }
    }
    cells.push(GridCell::Baseline);
    cells
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridRow {
    pub cell: GridCell,
    pub bleu: Option<f64>,
    pub dev_ppl: Option<f64>,
    /// Why the run produced no result.
    pub error: Option<String>,
}

impl GridRow {
    pub fn tsv(&self) -> String {
        let f = |x: Option<f64>, p: usize| match x {
            Some(v) => format!("{v:.p$}"),
            None => "NA".into(),
        };
        format!(
            "{}\t{}\t{}",
            self.cell.columns().join("\t"),
            f(self.bleu, 2),
            f(self.dev_ppl, 4)
        )
    }

    fn parse(cell: GridCell, line: &str) -> Option<Self> {
        let fields: Vec<&str> = line.trim_end().split('\t').collect();
        if fields.len() != 6 || !fields[..4].iter().eq(cell.columns().iter()) {
            return None;
        }
        let num = |s: &str| if s == "NA" { Some(None) } else { s.parse().ok().map(Some) };
        Some(Self {
            cell,
            bleu: num(fields[4])?,
            dev_ppl: num(fields[5])?,
            error: None,
        })
    }
}

/// Beam-decode every source and score the outputs against the references.
pub fn evaluate_bleu(
    model: &Model,
    pairs: &[Pair],
    beam: &BeamConfig,
    detok: &dyn Fn(&[TokenId]) -> String,
) -> Result<BleuReport> {
    let mut hyps = Vec::with_capacity(pairs.len());
    let mut refs = Vec::with_capacity(pairs.len());
    for p in pairs {
        hyps.push(detok(&beam_search(model, &p.src, p.tags, beam)?.tokens));
        refs.push(detok(&p.tgt));
    }
    corpus_bleu(&hyps, &refs)
}

/// Inputs shared read-only by every grid run.
pub struct GridInputs<'a> {
    pub base: &'a RunConfig,
    pub data: &'a TrainData,
    pub test: &'a [Pair],
    pub detok: &'a (dyn Fn(&[TokenId]) -> String + Sync),
}

fn run_cell(cell: GridCell, inputs: &GridInputs<'_>, dir: Option<&Path>) -> Result<GridRow> {
    let cfg = cell.apply(inputs.base);
    let mut log = String::new();
    let outcome = train(&cfg, inputs.data, &mut |_| Ok(()))?;
    log.push_str(&outcome.metrics_tsv());
    let beam = BeamConfig {
        beam_size: cfg.beam,
        alpha: cfg.alpha,
        max_len: None,
    };
    let report = evaluate_bleu(&outcome.best, inputs.test, &beam, inputs.detok)?;
    if let Some(d) = dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        let m = d.join("metrics.tsv");
        fs::write(&m, log).map_err(|e| Error::io(&m, e))?;
        let c = d.join("config.resolved");
        fs::write(&c, cfg.echo()).map_err(|e| Error::io(&c, e))?;
    }
    Ok(GridRow {
        cell,
        bleu: Some(report.bleu),
        dev_ppl: outcome.best_dev_ppl,
        error: None,
    })
}

/// Run every cell, `jobs` at a time. With `dir`, each cell writes into its
/// own subdirectory and finished cells are reused on the next call. Failed
/// runs become rows of `NA`. `on_row` sees rows as they complete, in
/// completion order; the returned rows follow [`grid_cells`] order.
pub fn grid_search(
    inputs: &GridInputs<'_>,
    jobs: usize,
    dir: Option<&Path>,
    on_row: &(dyn Fn(&GridRow) + Sync),
) -> Vec<GridRow> {
    let cells = grid_cells();
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<GridRow>>> = Mutex::new(vec![None; cells.len()]);
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(&cell) = cells.get(i) else { break };
        let cell_dir: Option<PathBuf> = dir.map(|d| d.join(cell.slug()));
        let done = cell_dir.as_ref().map(|d| d.join("result.tsv"));
        let cached = done
            .as_ref()
            .and_then(|p| fs::read_to_string(p).ok())
            .and_then(|s| GridRow::parse(cell, &s));
        let row = cached.unwrap_or_else(|| {
            let row = run_cell(cell, inputs, cell_dir.as_deref()).unwrap_or_else(|e| GridRow {
                cell,
                bleu: None,
                dev_ppl: None,
                error: Some(e.to_string()),
            });
            if let (Some(p), None) = (&done, &row.error) {
                let _ = fs::write(p, format!("{}\n", row.tsv()));
            }
            row
        });
        on_row(&row);
        results.lock().expect("grid results")[i] = Some(row);
    };
    std::thread::scope(|s| {
        for _ in 0..jobs.max(1) {
            s.spawn(worker);
        }
    });
    results
        .into_inner()
        .expect("grid results")
        .into_iter()
        .map(|r| r.expect("every cell ran"))
        .collect()
}

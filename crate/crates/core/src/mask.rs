//! Attention masks for the concatenated source/target sequence.
//!
//! All matrices are query-major: `allow(q, k)` says whether query position
//! `q` may attend key position `k`. For a sequence of `J` source positions
//! followed by `I` target positions the combined mask splits into four
//! blocks:
//!
//! | block | queries | keys   | rule                               |
//! |-------|---------|--------|------------------------------------|
//! | A     | source  | target | always blocked                     |
//! | B     | target  | target | causal (`k ≤ q`)                   |
//! | C     | source  | source | full, or causal for `Triangular`   |
//! | D     | target  | source | always allowed                     |

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::{Error, Result};

/// How source positions attend each other (block C).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SourceMask {
    Triangular,
    Full,
}

impl fmt::Display for SourceMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SourceMask::Triangular => "triangular",
            SourceMask::Full => "full",
        })
    }
}

impl FromStr for SourceMask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "triangular" | "tri" => Ok(SourceMask::Triangular),
            "full" => Ok(SourceMask::Full),
            _ => Err(Error::Invalid(format!("unknown source mask `{s}`"))),
        }
    }
}

/// Dense boolean matrix, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BoolMatrix {
    rows: usize,
    cols: usize,
    cells: Vec<bool>,
}

impl BoolMatrix {
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let cells = (0..rows * cols).map(|i| f(i / cols, i % cols)).collect();
        Self { rows, cols, cells }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.cells[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.cells[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[bool] {
        &self.cells[r * self.cols..(r + 1) * self.cols]
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn to_shared(&self) -> Arc<[bool]> {
        Arc::from(self.cells.as_slice())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Block {
    A,
    B,
    C,
    D,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MaskViolation {
    Cell { block: Block, q: usize, k: usize },
    EmptyRow { q: usize },
}

impl fmt::Display for MaskViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaskViolation::Cell { block, q, k } => write!(f, "block {block:?} at ({q},{k})"),
            MaskViolation::EmptyRow { q } => write!(f, "empty row {q}"),
        }
    }
}

/// Combined `(J+I) × (J+I)` mask. `boundary` is `J`, the first target index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    boundary: usize,
    variant: SourceMask,
    allow: BoolMatrix,
}

impl AttentionMask {
    /// Mask over `source_len` source positions followed by `target_len`
    /// target positions.
    pub fn tlm(source_len: usize, target_len: usize, variant: SourceMask) -> Result<Self> {
        if source_len == 0 || target_len == 0 {
            return Err(Error::Invalid(format!(
                "mask needs J ≥ 1 and I ≥ 1, got J={source_len}, I={target_len}"
            )));
        }
        let j = source_len;
        let allow = BoolMatrix::from_fn(j + target_len, j + target_len, |q, k| {
            expected_cell(j, variant, q, k)
        });
        Ok(Self {
            boundary: j,
            variant,
            allow,
        })
    }

    /// Purely causal mask with no source span (monolingual examples).
    pub fn causal(len: usize) -> Self {
        Self {
            boundary: 0,
            variant: SourceMask::Full,
            allow: BoolMatrix::from_fn(len, len, |q, k| k <= q),
        }
    }

    /// Wrap an arbitrary matrix, e.g. to validate a hand-built mask.
    pub fn from_parts(boundary: usize, variant: SourceMask, allow: BoolMatrix) -> Result<Self> {
        if allow.rows() != allow.cols() || boundary > allow.rows() {
            return Err(Error::Invalid(format!(
                "mask must be square with boundary inside, got {}×{} and J={boundary}",
                allow.rows(),
                allow.cols()
            )));
        }
        Ok(Self {
            boundary,
            variant,
            allow,
        })
    }

    pub fn size(&self) -> usize {
        self.allow.rows()
    }

    pub fn boundary(&self) -> usize {
        self.boundary
    }

    pub fn variant(&self) -> SourceMask {
        self.variant
    }

    pub fn allows(&self, q: usize, k: usize) -> bool {
        self.allow.get(q, k)
    }

    pub fn matrix(&self) -> &BoolMatrix {
        &self.allow
    }

    pub fn matrix_mut(&mut self) -> &mut BoolMatrix {
        &mut self.allow
    }

    /// Every cell that breaks a block rule, plus rows with no allowed key.
    pub fn validate(&self) -> Vec<MaskViolation> {
        let n = self.size();
        let j = self.boundary;
        let mut out = Vec::new();
        for q in 0..n {
            if !self.allow.row(q).iter().any(|&a| a) {
                out.push(MaskViolation::EmptyRow { q });
            }
            for k in 0..n {
                if self.allows(q, k) != expected_cell(j, self.variant, q, k) {
                    out.push(MaskViolation::Cell {
                        block: block_of(j, q, k),
                        q,
                        k,
                    });
                }
            }
        }
        out
    }

    /// 0/1 grid with `s`/`t` labels and a separator at the J boundary.
    pub fn render(&self) -> String {
        let n = self.size();
        let j = self.boundary;
        let label = |p: usize| {
            if p < j {
                format!("s{p}")
            } else {
                format!("t{}", p - j)
            }
        };
        let width = (0..n).map(|p| label(p).len()).max().unwrap_or(2);
        let mut out = String::new();
        let mut header = format!("{:width$}", "");
        for k in 0..n {
            if k == j && j > 0 {
                header.push_str(" |");
            }
            header.push_str(&format!(" {:>width$}", label(k)));
        }
        out.push_str(header.trim_end());
        out.push('\n');
        for q in 0..n {
            if q == j && j > 0 {
                let rule: String = header
                    .chars()
                    .map(|c| if c == '|' { '+' } else { '-' })
                    .collect();
                out.push_str(rule.trim_end());
                out.push('\n');
            }
            let mut line = format!("{:>width$}", label(q));
            for k in 0..n {
                if k == j && j > 0 {
                    line.push_str(" |");
                }
                let cell = if self.allows(q, k) { "1" } else { "0" };
                line.push_str(&format!(" {cell:>width$}"));
            }
            out.push_str(&line);
            out.push('\n');
        }
        out
    }
}

fn block_of(j: usize, q: usize, k: usize) -> Block {
    match (q < j, k < j) {
        (true, false) => Block::A,
        (false, false) => Block::B,
        (true, true) => Block::C,
        (false, true) => Block::D,
    }
}

fn expected_cell(j: usize, variant: SourceMask, q: usize, k: usize) -> bool {
    match block_of(j, q, k) {
        Block::A => false,
        Block::B => k <= q,
        Block::C => variant == SourceMask::Full || k <= q,
        Block::D => true,
    }
}

/// The three masks of an encoder-decoder model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncDecMasks {
    /// `J × J`, all allowed.
    pub encoder: BoolMatrix,
    /// `I × I`, causal.
    pub decoder: BoolMatrix,
    /// `I × J` (target queries, source keys), all allowed.
    pub cross: BoolMatrix,
}

pub fn enc_dec_masks(source_len: usize, target_len: usize) -> Result<EncDecMasks> {
    if source_len == 0 || target_len == 0 {
        return Err(Error::Invalid(format!(
            "mask needs J ≥ 1 and I ≥ 1, got J={source_len}, I={target_len}"
        )));
    }
    Ok(EncDecMasks {
        encoder: BoolMatrix::from_fn(source_len, source_len, |_, _| true),
        decoder: BoolMatrix::from_fn(target_len, target_len, |q, k| k <= q),
        cross: BoolMatrix::from_fn(target_len, source_len, |_, _| true),
    })
}

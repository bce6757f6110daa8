use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Origin {
    Parallel,
    Mono,
}

/// One drawn corpus item: which corpus, which line, and the pass over that
/// corpus it was drawn in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Draw {
    pub origin: Origin,
    pub index: usize,
    pub epoch: u64,
}

struct Shuffled {
    order: Vec<usize>,
    pos: usize,
    passes: u64,
}

impl Shuffled {
    fn new(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
            passes: 0,
        }
    }

    fn next<R: Rng>(&mut self, rng: &mut R) -> (usize, u64) {
        if self.pos == self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
            self.passes += 1;
        }
        self.pos += 1;
        (self.order[self.pos - 1], self.passes - 1)
    }
}

/// Endless interleaving of a parallel corpus and a monolingual corpus.
///
/// Each draw is monolingual with probability `mono_ratio`; within each
/// corpus, items come out in a fresh random order every epoch.
pub struct MixedStream {
    parallel: Shuffled,
    mono: Shuffled,
    mono_ratio: f64,
    rng: ChaCha8Rng,
}

impl MixedStream {
    pub fn new(num_parallel: usize, num_mono: usize, mono_ratio: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&mono_ratio) {
            return Err(Error::Invalid(format!("mixing ratio {mono_ratio} outside [0, 1]")));
        }
        if mono_ratio > 0.0 && num_mono == 0 {
            return Err(Error::Data("mixing ratio > 0 needs a monolingual corpus".into()));
        }
        if mono_ratio < 1.0 && num_parallel == 0 {
            return Err(Error::Data("parallel corpus is empty".into()));
        }
        Ok(Self {
            parallel: Shuffled::new(num_parallel),
            mono: Shuffled::new(num_mono),
            mono_ratio,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }
}

impl Iterator for MixedStream {
    type Item = Draw;

    fn next(&mut self) -> Option<Draw> {
        let mono = self.mono_ratio > 0.0 && self.rng.gen::<f64>() < self.mono_ratio;
        let (origin, (index, epoch)) = if mono {
            (Origin::Mono, self.mono.next(&mut self.rng))
        } else {
            (Origin::Parallel, self.parallel.next(&mut self.rng))
        };
        Some(Draw {
            origin,
            index,
            epoch,
        })
    }
}

/// Groups a draw stream into batches of at most `budget` tokens.
///
/// Draws are pooled `pool` batches at a time, sorted by length inside the
/// pool so that batches hold similar lengths, and the resulting batches are
/// shuffled before being handed out.
pub struct TokenBatcher {
    stream: MixedStream,
    parallel_lens: Vec<usize>,
    mono_lens: Vec<usize>,
    budget: usize,
    pool: usize,
    ready: VecDeque<Vec<Draw>>,
    rng: ChaCha8Rng,
}

impl TokenBatcher {
    pub const DEFAULT_POOL: usize = 16;

    pub fn new(
        stream: MixedStream,
        parallel_lens: Vec<usize>,
        mono_lens: Vec<usize>,
        budget: usize,
        seed: u64,
    ) -> Result<Self> {
        if budget == 0 {
            return Err(Error::Invalid("batch token budget must be positive".into()));
        }
        Ok(Self {
            stream,
            parallel_lens,
            mono_lens,
            budget,
            pool: Self::DEFAULT_POOL,
            ready: VecDeque::new(),
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ba7c),
        })
    }

    fn len_of(&self, d: &Draw) -> usize {
        match d.origin {
            Origin::Parallel => self.parallel_lens[d.index],
            Origin::Mono => self.mono_lens[d.index],
        }
    }

    fn refill(&mut self) {
        let target = self.budget * self.pool;
        let mut pooled = Vec::new();
        let mut tokens = 0;
        while tokens < target {
            let d = self.stream.next().expect("stream is endless");
            tokens += self.len_of(&d);
            pooled.push(d);
        }
        pooled.sort_by_key(|d| self.len_of(d));
        let mut batches = Vec::new();
        let mut cur: Vec<Draw> = Vec::new();
        let mut cur_tokens = 0;
        for d in pooled {
            let n = self.len_of(&d);
            if !cur.is_empty() && cur_tokens + n > self.budget {
                batches.push(std::mem::take(&mut cur));
                cur_tokens = 0;
            }
            cur_tokens += n;
            cur.push(d);
        }
        if !cur.is_empty() {
            batches.push(cur);
        }
        batches.shuffle(&mut self.rng);
        self.ready.extend(batches);
    }
}

impl Iterator for TokenBatcher {
    type Item = Vec<Draw>;

    fn next(&mut self) -> Option<Vec<Draw>> {
        if self.ready.is_empty() {
            self.refill();
        }
        self.ready.pop_front()
    }
}

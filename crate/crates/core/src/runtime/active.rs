use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Sorted, duplicate-free output indices below a bound.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActiveSet {
    indices: Vec<usize>,
    bound: usize,
}

impl ActiveSet {
    pub fn new(mut indices: Vec<usize>, bound: usize) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        if let Some(&last) = indices.last() {
            if last >= bound {
                return Err(Error::Index { index: last, bound });
            }
        }
        Ok(ActiveSet { indices, bound })
    }

    pub fn all(bound: usize) -> Self {
        ActiveSet {
            indices: (0..bound).collect(),
            bound,
        }
    }

    pub fn empty(bound: usize) -> Self {
        ActiveSet {
            indices: Vec::new(),
            bound,
        }
    }

    /// `round(p · bound)` distinct indices drawn from `seed`.
    pub fn fraction(bound: usize, p: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("active fraction must lie in [0, 1], got {p}")));
        }
        let amount = ((p * bound as f64).round() as usize).min(bound);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::new(sample(&mut rng, bound, amount).into_vec(), bound)
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn bound(&self) -> usize {
        self.bound
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, j: usize) -> bool {
        self.indices.binary_search(&j).is_ok()
    }
}

/// How the simulated decoder picks outputs for each scored frame.
#[derive(Clone, Debug, PartialEq)]
pub enum ActiveSource {
    All,
    /// A fresh seeded draw of the given fraction per frame.
    Fraction { p: f64, seed: u64 },
    /// Explicit per-frame lists; frames past the end reuse the last list.
    Lists(Vec<Vec<usize>>),
}

impl ActiveSource {
    pub fn for_frame(&self, frame: usize, bound: usize) -> Result<ActiveSet> {
        match self {
            ActiveSource::All => Ok(ActiveSet::all(bound)),
            ActiveSource::Fraction { p, seed } => {
                ActiveSet::fraction(bound, *p, seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ frame as u64)
            }
            ActiveSource::Lists(lists) => match lists.get(frame).or(lists.last()) {
                Some(l) => ActiveSet::new(l.clone(), bound),
                None => Ok(ActiveSet::empty(bound)),
            },
        }
    }

    /// Parses one whitespace-separated index list per line.
    pub fn parse_lists(text: &str) -> Result<Self> {
        let lists = text
            .lines()
            .enumerate()
            .map(|(n, line)| {
                line.split_whitespace()
                    .map(|tok| {
                        tok.parse()
                            .map_err(|_| Error::Format(format!("active list line {}: bad index `{tok}`", n + 1)))
                    })
                    .collect()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ActiveSource::Lists(lists))
    }
}

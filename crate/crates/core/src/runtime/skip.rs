use crate::error::{Error, Result};

/// Score every `k`-th frame and reuse it for the frames that follow.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SkipSchedule {
    k: usize,
    total: usize,
}

pub const DEFAULT_SKIP: usize = 3;

impl SkipSchedule {
    pub fn new(total: usize, k: usize) -> Result<Self> {
        if k == 0 || total == 0 {
            return Err(Error::InvalidArgument(format!(
                "skip schedule needs k >= 1 and T >= 1, got k = {k}, T = {total}"
            )));
        }
        Ok(SkipSchedule { k, total })
    }

    pub fn factor(&self) -> usize {
        self.k
    }

    pub fn total(&self) -> usize {
        self.total
    }

    /// The computed frame whose outputs frame `t` reuses.
    pub fn source(&self, t: usize) -> usize {
        t / self.k * self.k
    }

    /// `0, k, 2k, ...` below `T`.
    pub fn computed(&self) -> Vec<usize> {
        (0..self.total).step_by(self.k).collect()
    }

    pub fn computed_count(&self) -> usize {
        self.total.div_ceil(self.k)
    }

    /// Per-frame outputs from outputs of the computed frames, in order.
    pub fn expand<V: Clone>(&self, computed: &[V]) -> Result<Vec<V>> {
        if computed.len() != self.computed_count() {
            return Err(Error::dim("expand", &[computed.len()], &[self.computed_count()]));
        }
        Ok((0..self.total).map(|t| computed[t / self.k].clone()).collect())
    }
}

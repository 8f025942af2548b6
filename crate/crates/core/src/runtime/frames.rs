use crate::error::{Error, Result};
use crate::model::{CONTEXT_FRAMES, FEATURE_DIM, STACKED_DIM};
use crate::tensor::{Scalar, Tensor};

/// Frames of left and of right context around the center frame.
pub const CONTEXT_SIDE: usize = (CONTEXT_FRAMES - 1) / 2;

/// A sequence of filterbank frames `[T, 40]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameStream<T> {
    frames: Tensor<T>,
}

impl<T: Scalar> FrameStream<T> {
    pub fn new(frames: Tensor<T>) -> Result<Self> {
        let (_, dim) = frames.dims2("frame stream")?;
        if dim != FEATURE_DIM {
            return Err(Error::Format(format!(
                "frames must have {FEATURE_DIM} channels, got {dim}"
            )));
        }
        Ok(FrameStream { frames })
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn frames(&self) -> &Tensor<T> {
        &self.frames
    }

    /// Source frame for context slot `slot` (0..41) around frame `t`, with
    /// edge frames repeated past either end.
    pub fn context_source(&self, t: usize, slot: usize) -> usize {
        (t + slot).saturating_sub(CONTEXT_SIDE).min(self.len() - 1)
    }

    /// Concatenates frames `t-20 ..= t+20` into `out` (length 1640).
    pub fn stack_into(&self, t: usize, out: &mut [T]) -> Result<()> {
        if t >= self.len() {
            return Err(Error::Index { index: t, bound: self.len() });
        }
        debug_assert_eq!(out.len(), STACKED_DIM);
        for (slot, chunk) in out.chunks_exact_mut(FEATURE_DIM).enumerate() {
            chunk.copy_from_slice(self.frames.row(self.context_source(t, slot)));
        }
        Ok(())
    }

    pub fn stack_context(&self, t: usize) -> Result<Tensor<T>> {
        let mut out = vec![T::zero(); STACKED_DIM];
        self.stack_into(t, &mut out)?;
        Tensor::new(vec![STACKED_DIM], out)
    }

    /// Stacked vectors for `frames`, one row each: `[frames.len(), 1640]`.
    pub fn stack_batch(&self, frames: &[usize]) -> Result<Tensor<T>> {
        let mut out = vec![T::zero(); frames.len().max(1) * STACKED_DIM];
        for (row, &t) in out.chunks_exact_mut(STACKED_DIM).zip(frames) {
            self.stack_into(t, row)?;
        }
        Tensor::new(vec![frames.len(), STACKED_DIM], out)
    }
}

use crate::error::{Error, Result};
use crate::layers::Dense;
use crate::runtime::active::ActiveSet;
use crate::tensor::{transpose_into, Scalar};

/// Output layer evaluated only at requested units.
///
/// Each score accumulates `hidden[t] · w[t][j]` from zero with `t` ascending
/// and then adds the bias, the same order the full dense forward uses, so
/// lazy and full scores are bitwise equal.
#[derive(Clone, Debug)]
pub struct LazyOutput<T> {
    /// `[d_out, d_in]`, so each unit's weights are contiguous.
    weights_t: Vec<T>,
    bias: Vec<T>,
    d_in: usize,
    multiplies: u64,
}

impl<T: Scalar> LazyOutput<T> {
    pub fn new(layer: &Dense<T>) -> Self {
        let (d_in, d_out) = (layer.d_in(), layer.d_out());
        let mut weights_t = vec![T::zero(); d_in * d_out];
        transpose_into(d_in, d_out, layer.weights().data(), &mut weights_t);
        LazyOutput {
            weights_t,
            bias: layer.bias().data().to_vec(),
            d_in,
            multiplies: 0,
        }
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.bias.len()
    }

    /// Multiplies performed since construction or the last reset.
    pub fn multiplies(&self) -> u64 {
        self.multiplies
    }

    pub fn reset_counter(&mut self) {
        self.multiplies = 0;
    }

    /// `(unit, score)` for every unit in `active`, in ascending unit order.
    pub fn score(&mut self, hidden: &[T], active: &ActiveSet) -> Result<Vec<(usize, T)>> {
        if hidden.len() != self.d_in {
            return Err(Error::dim("lazy_output", &[hidden.len()], &[self.d_in]));
        }
        if active.bound() > self.d_out() {
            if let Some(&j) = active.indices().iter().find(|&&j| j >= self.d_out()) {
                return Err(Error::Index { index: j, bound: self.d_out() });
            }
        }
        let mut out = Vec::with_capacity(active.len());
        for &j in active.indices() {
            let w = &self.weights_t[j * self.d_in..(j + 1) * self.d_in];
            let mut acc = T::zero();
            for (&h, &wv) in hidden.iter().zip(w) {
                acc = acc + h * wv;
            }
            out.push((j, acc + self.bias[j]));
        }
        self.multiplies += (active.len() * self.d_in) as u64;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::init_weights_seeded;
    use crate::layers::InitScheme;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn layer(d_in: usize, d_out: usize, seed: u64) -> Dense<f32> {
        let w = init_weights_seeded(&[d_in, d_out], d_in, InitScheme::LecunNormal, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let b = Tensor::from_fn(&[d_out], |_| rng.random_range(-1.0..1.0));
        Dense::new(w, b).unwrap()
    }

    fn hidden(d: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[1, d], |_| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn empty_set_costs_nothing() {
        let mut lazy = LazyOutput::new(&layer(16, 10, 0));
        assert!(lazy.score(hidden(16, 1).data(), &ActiveSet::empty(10)).unwrap().is_empty());
        assert_eq!(lazy.multiplies(), 0);
    }

    #[test]
    fn all_units_equal_full_forward() {
        let dense = layer(64, 37, 3);
        let h = hidden(64, 4);
        let full = dense.forward(&h).unwrap();
        let mut lazy = LazyOutput::new(&dense);
        let scores = lazy.score(h.data(), &ActiveSet::all(37)).unwrap();
        for (j, s) in scores {
            assert_eq!(s.to_bits(), full.data()[j].to_bits());
        }
    }

    #[test]
    fn two_units_of_large_layer() {
        let dense = layer(128, 10_000, 5);
        let h = hidden(128, 6);
        let full = dense.forward(&h).unwrap();
        let mut lazy = LazyOutput::new(&dense);
        let scores = lazy.score(h.data(), &ActiveSet::new(vec![17, 3], 10_000).unwrap()).unwrap();
        assert_eq!(scores.len(), 2);
        assert_eq!(scores[0].0, 3);
        assert_eq!(scores[0].1.to_bits(), full.data()[3].to_bits());
        assert_eq!(scores[1].1.to_bits(), full.data()[17].to_bits());
        assert_eq!(lazy.multiplies(), 2 * 128);
    }

    #[test]
    fn out_of_range_unit_is_index_error() {
        let mut lazy = LazyOutput::new(&layer(4, 3, 0));
        let set = ActiveSet::new(vec![5], 8).unwrap();
        assert!(matches!(lazy.score(&[0.0; 4], &set), Err(Error::Index { index: 5, bound: 3 })));
    }
}

use crate::error::{Error, Result};
use crate::tensor::{gemm, transpose_into, Scalar, Tensor};

/// Fully connected layer, `y = x · W + b` with `W` stored `d_in × d_out`.
#[derive(Clone, Debug)]
pub struct Dense<T> {
    weights: Tensor<T>,
    bias: Tensor<T>,
    input: Option<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct DenseGrads<T> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn new(weights: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let (_, d_out) = weights.dims2("dense weights")?;
        if bias.shape() != [d_out] {
            return Err(Error::dim("dense bias", bias.shape(), &[d_out]));
        }
        Ok(Dense {
            weights,
            bias,
            input: None,
        })
    }

    pub fn d_in(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn weights(&self) -> &Tensor<T> {
        &self.weights
    }

    pub fn bias(&self) -> &Tensor<T> {
        &self.bias
    }

    pub fn weights_mut(&mut self) -> &mut Tensor<T> {
        &mut self.weights
    }

    pub fn bias_mut(&mut self) -> &mut Tensor<T> {
        &mut self.bias
    }

    /// Weights then bias.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.weights, &mut self.bias]
    }

    pub fn clear_cache(&mut self) {
        self.input = None;
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (batch, d_in) = x.dims2("dense_forward")?;
        if d_in != self.d_in() {
            return Err(Error::dim("dense_forward", x.shape(), self.weights.shape()));
        }
        let d_out = self.d_out();
        let mut out = vec![T::zero(); batch * d_out];
        gemm(batch, d_in, d_out, x.data(), self.weights.data(), &mut out);
        for row in out.chunks_exact_mut(d_out) {
            for (v, &b) in row.iter_mut().zip(self.bias.data()) {
                *v = *v + b;
            }
        }
        Tensor::new(vec![batch, d_out], out)
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.forward(x)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<DenseGrads<T>> {
        let x = self
            .input
            .take()
            .ok_or_else(|| Error::State("dense backward called before forward".into()))?;
        let (batch, d_in) = x.dims2("dense_backward")?;
        let d_out = self.d_out();
        if grad_out.shape() != [batch, d_out] {
            return Err(Error::dim("dense_backward", grad_out.shape(), &[batch, d_out]));
        }
        let mut xt = vec![T::zero(); batch * d_in];
        transpose_into(batch, d_in, x.data(), &mut xt);
        let mut gw = vec![T::zero(); d_in * d_out];
        gemm(d_in, batch, d_out, &xt, grad_out.data(), &mut gw);

        let mut wt = vec![T::zero(); d_in * d_out];
        transpose_into(d_in, d_out, self.weights.data(), &mut wt);
        let mut gx = vec![T::zero(); batch * d_in];
        gemm(batch, d_out, d_in, grad_out.data(), &wt, &mut gx);

        let mut gb = vec![T::zero(); d_out];
        for row in grad_out.data().chunks_exact(d_out) {
            for (s, &g) in gb.iter_mut().zip(row) {
                *s += g;
            }
        }
        Ok(DenseGrads {
            input: Tensor::new(vec![batch, d_in], gx)?,
            weights: Tensor::new(vec![d_in, d_out], gw)?,
            bias: Tensor::from_vec(gb)?,
        })
    }
}

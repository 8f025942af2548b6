use crate::error::{Error, Result};
use crate::tensor::{gemm, transpose_into, ConvGeometry, Scalar, Tensor};

/// 2-D convolution layer over `B×C×H×W` batches.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    kernels: Tensor<T>,
    bias: Option<Tensor<T>>,
    stride: usize,
    padding: usize,
    input: Option<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub kernels: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(kernels: Tensor<T>, bias: Option<Tensor<T>>, stride: usize, padding: usize) -> Result<Self> {
        if kernels.rank() != 4 {
            return Err(Error::dim("conv kernels", kernels.shape(), &[0, 0, 0, 0]));
        }
        if let Some(b) = &bias {
            if b.shape() != [kernels.shape()[0]] {
                return Err(Error::dim("conv bias", b.shape(), &kernels.shape()[..1]));
            }
        }
        if stride == 0 {
            return Err(Error::Shape("stride must be positive".into()));
        }
        Ok(Conv2d {
            kernels,
            bias,
            stride,
            padding,
            input: None,
        })
    }

    pub fn kernels(&self) -> &Tensor<T> {
        &self.kernels
    }

    pub fn kernels_mut(&mut self) -> &mut Tensor<T> {
        &mut self.kernels
    }

    pub fn bias(&self) -> Option<&Tensor<T>> {
        self.bias.as_ref()
    }

    pub fn bias_mut(&mut self) -> Option<&mut Tensor<T>> {
        self.bias.as_mut()
    }

    /// Kernels then bias, when present.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        std::iter::once(&mut self.kernels).chain(self.bias.as_mut()).collect()
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn padding(&self) -> usize {
        self.padding
    }

    pub fn out_channels(&self) -> usize {
        self.kernels.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernels.shape()[1]
    }

    pub fn kernel_size(&self) -> (usize, usize) {
        (self.kernels.shape()[2], self.kernels.shape()[3])
    }

    pub fn clear_cache(&mut self) {
        self.input = None;
    }

    /// Geometry for an input of spatial size `h × w`.
    pub(crate) fn geometry(&self, h: usize, w: usize) -> Result<ConvGeometry> {
        let (kh, kw) = self.kernel_size();
        ConvGeometry::new(self.in_channels(), h, w, kh, kw, self.stride, self.padding)
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let [b, c, h, w] = input[..] else {
            return Err(Error::dim("conv2d input", input, &[0, self.in_channels(), 0, 0]));
        };
        if c != self.in_channels() {
            return Err(Error::dim("conv2d input", input, &[b, self.in_channels(), h, w]));
        }
        let geo = self.geometry(h, w)?;
        Ok(vec![b, self.out_channels(), geo.out_h, geo.out_w])
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.output_shape(x.shape())?;
        let mut y = crate::tensor::conv2d_batch(x, &self.kernels, self.stride, self.padding)?;
        if let Some(bias) = &self.bias {
            let [_, c, h, w] = y.shape()[..] else { unreachable!() };
            let plane = h * w;
            for (i, chunk) in y.data_mut().chunks_exact_mut(plane).enumerate() {
                let b = bias.data()[i % c];
                chunk.iter_mut().for_each(|v| *v = *v + b);
            }
        }
        Ok(y)
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.forward(x)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<ConvGrads<T>> {
        let x = self
            .input
            .take()
            .ok_or_else(|| Error::State("conv backward called before forward".into()))?;
        let out_shape = self.output_shape(x.shape())?;
        if grad_out.shape() != &out_shape[..] {
            return Err(Error::dim("conv backward", grad_out.shape(), &out_shape));
        }
        let [batch, c_in, h, w] = x.shape()[..] else { unreachable!() };
        let geo = self.geometry(h, w)?;
        let c_out = self.out_channels();
        let (patch, p) = (geo.patch_len(), geo.positions());

        let mut kt = vec![T::zero(); c_out * patch];
        transpose_into(c_out, patch, self.kernels.data(), &mut kt);

        let mut gk = vec![T::zero(); c_out * patch];
        let mut gk_b = vec![T::zero(); c_out * patch];
        let mut col = vec![T::zero(); patch * p];
        let mut col_t = vec![T::zero(); patch * p];
        let mut gcol = vec![T::zero(); patch * p];
        let mut gx = vec![T::zero(); x.len()];
        let image_len = c_in * h * w;
        for b in 0..batch {
            let image = &x.data()[b * image_len..(b + 1) * image_len];
            let g = &grad_out.data()[b * c_out * p..(b + 1) * c_out * p];
            let col_ref: &[T] = if geo.is_pointwise() {
                image
            } else {
                geo.im2col(image, &mut col);
                &col
            };
            transpose_into(patch, p, col_ref, &mut col_t);
            gemm(c_out, p, patch, g, &col_t, &mut gk_b);
            for (s, &v) in gk.iter_mut().zip(&gk_b) {
                *s += v;
            }
            let gx_b = &mut gx[b * image_len..(b + 1) * image_len];
            if geo.is_pointwise() {
                gemm(patch, c_out, p, &kt, g, gx_b);
            } else {
                gemm(patch, c_out, p, &kt, g, &mut gcol);
                geo.col2im(&gcol, gx_b);
            }
        }

        let bias = match &self.bias {
            None => None,
            Some(_) => {
                let mut gb = vec![T::zero(); c_out];
                for b in 0..batch {
                    for (c, s) in gb.iter_mut().enumerate() {
                        let start = (b * c_out + c) * p;
                        for &v in &grad_out.data()[start..start + p] {
                            *s += v;
                        }
                    }
                }
                Some(Tensor::from_vec(gb)?)
            }
        };
        Ok(ConvGrads {
            input: Tensor::new(x.shape().to_vec(), gx)?,
            kernels: Tensor::new(self.kernels.shape().to_vec(), gk)?,
            bias,
        })
    }
}

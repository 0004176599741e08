use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};
use crate::rng::{uniform_init, Rng};
use crate::tensor::{gemm, MatRef, Tensor};

/// Gradient of one layer's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrad {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ParamGrad {
    pub fn zeros_like(weight: &Tensor, bias: &Tensor) -> Self {
        Self {
            weight: Tensor::zeros(weight.shape()),
            bias: Tensor::zeros(bias.shape()),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.weight.data().iter().chain(self.bias.data()).all(|&v| v == 0.0)
    }
}

/// Affine map `y = x W^T + b` with `W: out x in`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub trainable: bool,
}

impl LinearLayer {
    pub fn new(weight: Tensor, bias: Tensor, trainable: bool) -> Result<Self> {
        let (out, _) = weight.dims2()?;
        if bias.shape() != [out] {
            return dim_err(
                "LinearLayer::new",
                format!("bias shape {:?} does not match {out} outputs", bias.shape()),
            );
        }
        Ok(Self {
            weight,
            bias,
            trainable,
        })
    }

    /// Fan-in uniform init; weights drawn before biases.
    pub fn init(rng: &mut Rng, in_dim: usize, out_dim: usize) -> Result<Self> {
        let weight = uniform_init(rng, in_dim, &[out_dim, in_dim])?;
        let bias = uniform_init(rng, in_dim, &[out_dim])?;
        Ok(Self {
            weight,
            bias,
            trainable: true,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Forward over a row-major `batch x in_dim` buffer.
    pub(crate) fn forward_raw(&self, x: &[f64], batch: usize) -> Vec<f64> {
        let (out, inp) = (self.out_dim(), self.in_dim());
        let mut y = Vec::with_capacity(batch * out);
        for _ in 0..batch {
            y.extend_from_slice(self.bias.data());
        }
        gemm(
            1.0,
            MatRef::new(x, batch, inp),
            MatRef::new(self.weight.data(), out, inp).t(),
            1.0,
            &mut y,
        );
        y
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (batch, inp) = x.dims2()?;
        if inp != self.in_dim() {
            return dim_err(
                "LinearLayer::forward",
                format!("input width {inp}, layer expects {}", self.in_dim()),
            );
        }
        let y = Tensor::from_parts(vec![batch, self.out_dim()], self.forward_raw(x.data(), batch));
        y.ensure_finite("LinearLayer::forward")?;
        Ok(y)
    }

    /// Backward for `dy = dL/dy` (pre-activation). Returns parameter gradients
    /// when requested and the input gradient when requested.
    pub(crate) fn backward_raw(
        &self,
        x: &[f64],
        dy: &[f64],
        batch: usize,
        want_params: bool,
        want_input: bool,
    ) -> (Option<ParamGrad>, Option<Vec<f64>>) {
        let (out, inp) = (self.out_dim(), self.in_dim());
        let params = want_params.then(|| {
            let mut dw = vec![0.0; out * inp];
            gemm(
                1.0,
                MatRef::new(dy, batch, out).t(),
                MatRef::new(x, batch, inp),
                0.0,
                &mut dw,
            );
            let mut db = vec![0.0; out];
            for row in dy.chunks_exact(out) {
                for (d, g) in db.iter_mut().zip(row) {
                    *d += g;
                }
            }
            ParamGrad {
                weight: Tensor::from_parts(vec![out, inp], dw),
                bias: Tensor::from_parts(vec![out], db),
            }
        });
        let dx = want_input.then(|| {
            let mut dx = vec![0.0; batch * inp];
            gemm(
                1.0,
                MatRef::new(dy, batch, out),
                MatRef::new(self.weight.data(), out, inp),
                0.0,
                &mut dx,
            );
            dx
        });
        (params, dx)
    }
}

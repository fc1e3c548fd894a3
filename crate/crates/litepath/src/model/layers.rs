use crate::error::{Error, Result};
use crate::numerics::{
    layernorm_backward, matmul_backward, matmul_prec, Parameter, Precision, SeededRng, Tensor,
};

/// Standard deviation of the truncated-normal weight initializer.
pub const INIT_STD: f64 = 0.02;

/// Fully connected layer `y = x·W + b` with `W: [in × out]`.
#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub w: Parameter,
    pub b: Parameter,
}

impl LinearLayer {
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut SeededRng) -> Self {
        let data: Vec<f64> = (0..in_dim * out_dim)
            .map(|_| rng.truncated_normal(INIT_STD))
            .collect();
        let w = Tensor::new(vec![in_dim, out_dim], data).expect("finite init");
        LinearLayer {
            w: Parameter::new(w),
            b: Parameter::new(Tensor::zeros(vec![out_dim])),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.value.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.w.value.cols()
    }

    pub fn forward(&self, x: &Tensor, precision: Precision) -> Result<Tensor> {
        if x.cols() != self.in_dim() {
            return Err(Error::shape(format!(
                "linear expects {} inputs, got {}",
                self.in_dim(),
                x.cols()
            )));
        }
        let mut y = matmul_prec(x, &self.w.value, precision)?;
        let out = self.out_dim();
        for i in 0..y.rows() {
            let row = y.row_mut(i);
            for (v, b) in row.iter_mut().zip(self.b.value.data()) {
                *v += b;
            }
        }
        debug_assert_eq!(y.cols(), out);
        Ok(y)
    }

    /// Accumulates dW and db, returns dx.
    pub fn backward(&mut self, d_out: &Tensor, x: &Tensor) -> Result<Tensor> {
        let (dx, dw) = matmul_backward(d_out, x, &self.w.value)?;
        self.w.accumulate(&dw);
        let mut db = vec![0.0; self.out_dim()];
        for i in 0..d_out.rows() {
            for (acc, v) in db.iter_mut().zip(d_out.row(i)) {
                *acc += v;
            }
        }
        self.b.accumulate(&Tensor::new(vec![db.len()], db)?);
        Ok(dx)
    }

    pub fn param_count(&self) -> usize {
        self.w.n_elements() + self.b.n_elements()
    }
}

/// Layer normalization applied independently to each row of a 2-d tensor.
#[derive(Debug, Clone)]
pub struct LayerNormLayer {
    pub gain: Parameter,
    pub bias: Parameter,
}

impl LayerNormLayer {
    pub fn init(dim: usize) -> Self {
        LayerNormLayer {
            gain: Parameter::new(Tensor::filled(vec![dim], 1.0)),
            bias: Parameter::new(Tensor::zeros(vec![dim])),
        }
    }

    pub fn forward_rows(&self, x: &Tensor) -> Result<Tensor> {
        let (m, n) = (x.rows(), x.cols());
        if n != self.gain.value.len() {
            return Err(Error::shape(format!(
                "layernorm dim {} vs input cols {}",
                self.gain.value.len(),
                n
            )));
        }
        let mut out = Tensor::zeros(vec![m, n]);
        for i in 0..m {
            let mut row = vec![0.0; n];
            crate::numerics::ops_internal::layernorm_slice(
                x.row(i),
                self.gain.value.data(),
                self.bias.value.data(),
                &mut row,
            );
            out.row_mut(i).copy_from_slice(&row);
        }
        out.check_finite("layernorm")?;
        Ok(out)
    }

    /// Accumulates dgain/dbias, returns dx.
    pub fn backward_rows(&mut self, d_out: &Tensor, x: &Tensor) -> Result<Tensor> {
        let (m, n) = (x.rows(), x.cols());
        let mut dx = Tensor::zeros(vec![m, n]);
        let mut dgain = Tensor::zeros(vec![n]);
        let mut dbias = Tensor::zeros(vec![n]);
        for i in 0..m {
            let x_row = Tensor::new(vec![n], x.row(i).to_vec())?;
            let d_row = Tensor::new(vec![n], d_out.row(i).to_vec())?;
            let (dxr, dgr, dbr) = layernorm_backward(&d_row, &x_row, &self.gain.value)?;
            dx.row_mut(i).copy_from_slice(dxr.data());
            for (a, v) in dgain.data_mut().iter_mut().zip(dgr.data()) {
                *a += v;
            }
            for (a, v) in dbias.data_mut().iter_mut().zip(dbr.data()) {
                *a += v;
            }
        }
        self.gain.accumulate(&dgain);
        self.bias.accumulate(&dbias);
        Ok(dx)
    }

    pub fn param_count(&self) -> usize {
        self.gain.n_elements() + self.bias.n_elements()
    }
}

/// Inverted-dropout mask: each kept entry carries 1/(1-rate) so the expected
/// activation is unchanged. An empty rate (0.0) yields the identity mask.
pub fn dropout_mask(len: usize, rate: f64, rng: &mut SeededRng) -> Vec<f64> {
    assert!((0.0..1.0).contains(&rate), "dropout rate {rate}");
    if rate == 0.0 {
        return vec![1.0; len];
    }
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| if rng.next_f64() < rate { 0.0 } else { keep })
        .collect()
}

/// Columns `[start, start+width)` of a 2-d tensor as a new tensor.
pub fn slice_cols(x: &Tensor, start: usize, width: usize) -> Tensor {
    let m = x.rows();
    let mut out = Tensor::zeros(vec![m, width]);
    for i in 0..m {
        out.row_mut(i).copy_from_slice(&x.row(i)[start..start + width]);
    }
    out
}

/// Adds `src` into columns `[start, start+width)` of `dst`.
pub fn add_into_cols(dst: &mut Tensor, src: &Tensor, start: usize) {
    for i in 0..dst.rows() {
        let drow = dst.row_mut(i);
        for (j, v) in src.row(i).iter().enumerate() {
            drow[start + j] += v;
        }
    }
}

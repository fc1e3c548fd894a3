use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Arithmetic tier for the matrix kernels. `F32` casts operands and
/// accumulates in 32-bit; it exists for the benchmark path only. Everything
/// that feeds training or metrics runs `F64`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F64,
    F32,
}

impl Precision {
    pub fn label(self) -> &'static str {
        match self {
            Precision::F64 => "f64",
            Precision::F32 => "f32",
        }
    }
}

/// `a[m×k] · b[k×n]`. Each output element is a left-to-right sum over k, so
/// results are bit-identical regardless of how callers parallelize around
/// this function.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    matmul_prec(a, b, Precision::F64)
}

pub fn matmul_prec(a: &Tensor, b: &Tensor, precision: Precision) -> Result<Tensor> {
    if a.shape().len() != 2 || b.shape().len() != 2 {
        return Err(Error::shape(format!(
            "matmul needs 2-d operands, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul inner dims disagree: {:?} × {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let out = match precision {
        Precision::F64 => {
            let mut out = vec![0.0f64; m * n];
            for i in 0..m {
                let arow = a.row(i);
                let orow = &mut out[i * n..(i + 1) * n];
                for (p, &av) in arow.iter().enumerate() {
                    let brow = &b.data()[p * n..(p + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
            out
        }
        Precision::F32 => {
            let a32: Vec<f32> = a.data().iter().map(|&v| v as f32).collect();
            let b32: Vec<f32> = b.data().iter().map(|&v| v as f32).collect();
            let mut out32 = vec![0.0f32; m * n];
            for i in 0..m {
                let arow = &a32[i * k..(i + 1) * k];
                let orow = &mut out32[i * n..(i + 1) * n];
                for (p, &av) in arow.iter().enumerate() {
                    let brow = &b32[p * n..(p + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
            out32.into_iter().map(|v| v as f64).collect()
        }
    };
    let t = Tensor::new(vec![m, n], out)?;
    t.check_finite("matmul")?;
    Ok(t)
}

/// Backward contract for `c = a · b`: given `dc`, returns `(da, db)` where
/// `da = dc · bᵀ` and `db = aᵀ · dc`.
pub fn matmul_backward(d_out: &Tensor, a: &Tensor, b: &Tensor) -> Result<(Tensor, Tensor)> {
    let da = matmul(d_out, &b.transpose2())?;
    let db = matmul(&a.transpose2(), d_out)?;
    Ok((da, db))
}

/// Temperature softmax over a vector, computed with max subtraction.
pub fn softmax(v: &Tensor, temperature: f64) -> Result<Tensor> {
    if !(temperature > 0.0) {
        return Err(Error::invalid(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    if v.is_empty() {
        return Err(Error::invalid("softmax over empty vector".to_string()));
    }
    let mut out = vec![0.0; v.len()];
    softmax_slice(v.data(), temperature, &mut out);
    Tensor::new(v.shape().to_vec(), out)
}

pub(crate) fn softmax_slice(v: &[f64], temperature: f64, out: &mut [f64]) {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(v) {
        let e = libm::exp((x - max) / temperature);
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Backward for `p = softmax(v / τ)`: `dv_j = (p_j (dp_j − Σ_k p_k dp_k)) / τ`.
pub fn softmax_backward(d_p: &Tensor, p: &Tensor, temperature: f64) -> Result<Tensor> {
    if d_p.shape() != p.shape() {
        return Err(Error::shape(format!(
            "softmax_backward: {:?} vs {:?}",
            d_p.shape(),
            p.shape()
        )));
    }
    let inner: f64 = d_p.data().iter().zip(p.data()).map(|(d, p)| d * p).sum();
    let data = d_p
        .data()
        .iter()
        .zip(p.data())
        .map(|(d, p)| p * (d - inner) / temperature)
        .collect();
    Tensor::new(p.shape().to_vec(), data)
}

pub const LAYERNORM_EPS: f64 = 1e-6;

/// Layer normalization over a vector with affine gain/bias.
/// Uses population variance and epsilon 1e-6; a constant input therefore
/// maps to `bias` exactly (the normalized part collapses to zero).
pub fn layernorm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let n = x.len();
    if n < 2 {
        return Err(Error::invalid("layernorm needs at least 2 elements".to_string()));
    }
    if gain.len() != n || bias.len() != n {
        return Err(Error::shape(format!(
            "layernorm affine dims: x={n} gain={} bias={}",
            gain.len(),
            bias.len()
        )));
    }
    let mut out = vec![0.0; n];
    layernorm_slice(x.data(), gain.data(), bias.data(), &mut out);
    Tensor::new(x.shape().to_vec(), out)
}

pub(crate) fn layernorm_slice(x: &[f64], gain: &[f64], bias: &[f64], out: &mut [f64]) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rstd = 1.0 / libm::sqrt(var + LAYERNORM_EPS);
    for i in 0..x.len() {
        out[i] = (x[i] - mean) * rstd * gain[i] + bias[i];
    }
}

/// Backward for layernorm. Returns `(dx, dgain, dbias)`.
pub fn layernorm_backward(
    d_out: &Tensor,
    x: &Tensor,
    gain: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let n = x.len();
    if d_out.len() != n || gain.len() != n {
        return Err(Error::shape("layernorm_backward dims".to_string()));
    }
    let mut dx = vec![0.0; n];
    let mut dgain = vec![0.0; n];
    let mut dbias = vec![0.0; n];
    layernorm_backward_slice(
        d_out.data(),
        x.data(),
        gain.data(),
        &mut dx,
        &mut dgain,
        &mut dbias,
    );
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(gain.shape().to_vec(), dgain)?,
        Tensor::new(gain.shape().to_vec(), dbias)?,
    ))
}

pub(crate) fn layernorm_backward_slice(
    d_out: &[f64],
    x: &[f64],
    gain: &[f64],
    dx: &mut [f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
) {
    let n = x.len();
    let nf = n as f64;
    let mean = x.iter().sum::<f64>() / nf;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
    let rstd = 1.0 / libm::sqrt(var + LAYERNORM_EPS);

    // dnorm_i = d_out_i * gain_i; xhat_i = (x_i - mean) * rstd
    let mut dnorm_sum = 0.0;
    let mut dnorm_xhat_sum = 0.0;
    for i in 0..n {
        let xhat = (x[i] - mean) * rstd;
        let dnorm = d_out[i] * gain[i];
        dgain[i] += d_out[i] * xhat;
        dbias[i] += d_out[i];
        dnorm_sum += dnorm;
        dnorm_xhat_sum += dnorm * xhat;
    }
    for i in 0..n {
        let xhat = (x[i] - mean) * rstd;
        let dnorm = d_out[i] * gain[i];
        dx[i] += rstd * (dnorm - dnorm_sum / nf - xhat * dnorm_xhat_sum / nf);
    }
}

/// Exact-erf GELU, elementwise: `0.5 x (1 + erf(x/√2))`.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    let data = x.data().iter().map(|&v| gelu_scalar(v)).collect();
    let t = Tensor::new(x.shape().to_vec(), data)?;
    t.check_finite("gelu")?;
    Ok(t)
}

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = libm::exp(-0.5 * x * x) / libm::sqrt(2.0 * std::f64::consts::PI);
    cdf + x * pdf
}

/// Backward for GELU: `dx_i = d_out_i · gelu'(x_i)`.
pub fn gelu_backward(d_out: &Tensor, x: &Tensor) -> Result<Tensor> {
    if d_out.shape() != x.shape() {
        return Err(Error::shape("gelu_backward dims".to_string()));
    }
    let data = d_out
        .data()
        .iter()
        .zip(x.data())
        .map(|(&d, &v)| d * gelu_grad_scalar(v))
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::new(vec![rows, cols], data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let eye = t2(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let b = t2(3, 3, &[2.0, -1.0, 0.5, 3.0, 4.0, -2.0, 0.0, 1.0, 7.0]);
        assert_eq!(matmul(&eye, &b).unwrap(), b);
    }

    #[test]
    fn matmul_hand_example() {
        // [[1,2],[3,4]] × [[0],[1]] = [[2],[4]]
        let a = t2(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = t2(2, 1, &[0.0, 1.0]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let a = t2(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let z = Tensor::zeros(vec![3, 2]);
        let c = matmul(&a, &z).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = t2(2, 3, &[0.0; 6]);
        let b = t2(2, 2, &[0.0; 4]);
        assert!(matmul(&a, &b).is_err());
    }

    #[test]
    fn matmul_f32_close_to_f64() {
        let mut rng = crate::numerics::SeededRng::new(77);
        let a = Tensor::new(vec![8, 16], (0..128).map(|_| rng.normal()).collect()).unwrap();
        let b = Tensor::new(vec![16, 4], (0..64).map(|_| rng.normal()).collect()).unwrap();
        let c64 = matmul(&a, &b).unwrap();
        let c32 = matmul_prec(&a, &b, Precision::F32).unwrap();
        for (x, y) in c64.data().iter().zip(c32.data()) {
            assert!((x - y).abs() < 1e-4, "{x} vs {y}");
        }
    }

    #[test]
    fn softmax_symmetry_and_sum() {
        let v = Tensor::from_vec(vec![0.0, 0.0]).unwrap();
        let p = softmax(&v, 1.0).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_hand_ratio() {
        // softmax([ln 1, ln 3]) = [1/4, 3/4]
        let v = Tensor::from_vec(vec![0.0, 3.0f64.ln()]).unwrap();
        let p = softmax(&v, 1.0).unwrap();
        assert!((p.data()[0] - 0.25).abs() < 1e-12);
        assert!((p.data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_high_temperature_uniform() {
        let v = Tensor::from_vec(vec![3.0, -1.0, 0.5, 2.0]).unwrap();
        let p = softmax(&v, 1e6).unwrap();
        for &x in p.data() {
            assert!((x - 0.25).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_rejects_bad_temperature() {
        let v = Tensor::from_vec(vec![1.0]).unwrap();
        assert!(softmax(&v, 0.0).is_err());
        assert!(softmax(&v, -1.0).is_err());
    }

    #[test]
    fn softmax_sums_to_one_tight() {
        let mut rng = crate::numerics::SeededRng::new(4);
        for _ in 0..100 {
            let v = Tensor::from_vec((0..17).map(|_| rng.normal() * 10.0).collect()).unwrap();
            let p = softmax(&v, 0.7).unwrap();
            let s: f64 = p.data().iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn layernorm_constant_input_gives_bias() {
        let x = Tensor::from_vec(vec![5.0; 8]).unwrap();
        let g = Tensor::from_vec(vec![1.0; 8]).unwrap();
        let b = Tensor::from_vec(vec![0.25; 8]).unwrap();
        let y = layernorm(&x, &g, &b).unwrap();
        for &v in y.data() {
            assert_eq!(v, 0.25);
        }
    }

    #[test]
    fn layernorm_two_point_hand_case() {
        let x = Tensor::from_vec(vec![1.0, -1.0]).unwrap();
        let g = Tensor::from_vec(vec![1.0, 1.0]).unwrap();
        let b = Tensor::from_vec(vec![0.0, 0.0]).unwrap();
        let y = layernorm(&x, &g, &b).unwrap();
        // variance 1, epsilon shrinks the output marginally below ±1
        assert!((y.data()[0] - 1.0).abs() < 1e-6);
        assert!((y.data()[1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn layernorm_zero_gain_gives_bias() {
        let x = Tensor::from_vec(vec![3.0, 9.0, -2.0]).unwrap();
        let g = Tensor::from_vec(vec![0.0; 3]).unwrap();
        let b = Tensor::from_vec(vec![7.0; 3]).unwrap();
        let y = layernorm(&x, &g, &b).unwrap();
        assert_eq!(y.data(), &[7.0, 7.0, 7.0]);
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        // gelu(1) = 0.5·(1+erf(1/√2)) ≈ 0.841345
        assert!((gelu_scalar(1.0) - 0.8413447460685429).abs() < 1e-12);
        assert!(gelu_scalar(-10.0).abs() < 1e-12);
    }
}

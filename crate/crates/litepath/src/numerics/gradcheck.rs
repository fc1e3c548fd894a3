use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Central-difference verification of an analytic gradient.
///
/// `value` evaluates the scalar objective, `analytic` returns its gradient at
/// the same point. Every coordinate is perturbed by ±`step` and the error
/// `|fd − an| / max(|fd|, |an|, 1.0)` is taken; the maximum over coordinates
/// is returned. The 1.0 floor turns the measure into an absolute tolerance
/// for small gradients, where the finite difference itself bottoms out at
/// cancellation noise of order `ε·|f|/step` and a pure ratio would report
/// that noise instead of the gradient error.
pub fn grad_check<V, G>(value: V, analytic: G, point: &Tensor, step: f64) -> Result<f64>
where
    V: Fn(&Tensor) -> Result<f64>,
    G: Fn(&Tensor) -> Result<Tensor>,
{
    if !(1e-7..=1e-3).contains(&step) {
        return Err(Error::invalid(format!(
            "grad_check step must be in [1e-7, 1e-3], got {step}"
        )));
    }
    let grad = analytic(point)?;
    if grad.shape() != point.shape() {
        return Err(Error::shape(format!(
            "analytic gradient shape {:?} != point shape {:?}",
            grad.shape(),
            point.shape()
        )));
    }
    let mut worst = 0.0f64;
    let mut probe = point.clone();
    for i in 0..point.len() {
        let orig = point.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = value(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = value(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite("grad_check evaluation".to_string()));
        }
        let fd = (plus - minus) / (2.0 * step);
        let an = grad.data()[i];
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1.0);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Directional variant: compares `g · d` against the central difference of
/// the objective along a single direction `d`. Two evaluations total, which
/// makes it cheap enough to sweep over many seeded points and large
/// parameter vectors.
pub fn directional_grad_check<V>(
    value: V,
    grad: &Tensor,
    point: &Tensor,
    direction: &Tensor,
    step: f64,
) -> Result<f64>
where
    V: Fn(&Tensor) -> Result<f64>,
{
    if grad.shape() != point.shape() || direction.shape() != point.shape() {
        return Err(Error::shape("directional_grad_check shapes".to_string()));
    }
    let norm = libm::sqrt(direction.data().iter().map(|v| v * v).sum::<f64>());
    if norm == 0.0 {
        return Err(Error::invalid("zero direction".to_string()));
    }
    let unit: Vec<f64> = direction.data().iter().map(|v| v / norm).collect();
    let shift = |sign: f64| -> Result<f64> {
        let shifted: Vec<f64> = point
            .data()
            .iter()
            .zip(&unit)
            .map(|(p, u)| p + sign * step * u)
            .collect();
        value(&Tensor::new(point.shape().to_vec(), shifted)?)
    };
    let plus = shift(1.0)?;
    let minus = shift(-1.0)?;
    if !plus.is_finite() || !minus.is_finite() {
        return Err(Error::NonFinite("directional_grad_check".to_string()));
    }
    let fd = (plus - minus) / (2.0 * step);
    let an: f64 = grad.data().iter().zip(&unit).map(|(g, u)| g * u).sum();
    Ok((fd - an).abs() / fd.abs().max(an.abs()).max(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{matmul, softmax, SeededRng};

    #[test]
    fn sum_of_squares_gradient_is_tight() {
        let mut rng = SeededRng::new(21);
        for _ in 0..20 {
            let point = Tensor::from_vec((0..12).map(|_| rng.normal()).collect()).unwrap();
            let err = grad_check(
                |x| Ok(x.data().iter().map(|v| v * v).sum()),
                |x| x.scale(2.0),
                &point,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-8, "err {err}");
        }
    }

    #[test]
    fn softmax_cross_entropy_gradient() {
        // loss(v) = -log softmax(v)[target]; gradient = p - onehot(target)
        let target = 2usize;
        let value = |v: &Tensor| -> Result<f64> {
            let p = softmax(v, 1.0)?;
            Ok(-libm::log(p.data()[target]))
        };
        let analytic = |v: &Tensor| -> Result<Tensor> {
            let p = softmax(v, 1.0)?;
            let mut g = p.data().to_vec();
            g[target] -= 1.0;
            Tensor::new(v.shape().to_vec(), g)
        };
        let uniform = Tensor::from_vec(vec![0.0; 4]).unwrap();
        let err = grad_check(value, analytic, &uniform, 1e-6).unwrap();
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn matmul_chain_gradient() {
        // f(x) = sum((x[2x3] · B[3x2])^2) with fixed B; df/dx = 2 (xB) Bᵀ
        let b = Tensor::new(vec![3, 2], vec![0.5, -1.0, 2.0, 0.25, -0.75, 1.5]).unwrap();
        let value = {
            let b = b.clone();
            move |x: &Tensor| -> Result<f64> {
                let y = matmul(x, &b)?;
                Ok(y.data().iter().map(|v| v * v).sum())
            }
        };
        let analytic = {
            let b = b.clone();
            move |x: &Tensor| -> Result<Tensor> {
                let y = matmul(x, &b)?;
                matmul(&y.scale(2.0)?, &b.transpose2())
            }
        };
        let mut rng = SeededRng::new(8);
        let x = Tensor::new(vec![2, 3], (0..6).map(|_| rng.normal()).collect()).unwrap();
        let err = grad_check(value, analytic, &x, 1e-5).unwrap();
        assert!(err < 1e-4, "err {err}");
    }

    #[test]
    fn rejects_out_of_range_step() {
        let p = Tensor::from_vec(vec![1.0]).unwrap();
        let r = grad_check(|x| Ok(x.data()[0]), |_| Tensor::from_vec(vec![1.0]), &p, 1e-2);
        assert!(r.is_err());
    }
}

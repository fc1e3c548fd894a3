use crate::numerics::Tensor;

/// A trainable tensor paired with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

impl Parameter {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape().to_vec());
        Parameter {
            value,
            grad,
            trainable: true,
        }
    }

    pub fn frozen(value: Tensor) -> Self {
        let mut p = Parameter::new(value);
        p.trainable = false;
        p
    }

    pub fn zero_grad(&mut self) {
        for g in self.grad.data_mut() {
            *g = 0.0;
        }
    }

    /// Accumulate a gradient contribution. Panics on shape mismatch, which
    /// indicates a backward-pass bug rather than a user error.
    pub fn accumulate(&mut self, delta: &Tensor) {
        assert_eq!(
            self.grad.shape(),
            delta.shape(),
            "gradient shape must equal value shape"
        );
        for (g, d) in self.grad.data_mut().iter_mut().zip(delta.data()) {
            *g += d;
        }
    }

    pub fn n_elements(&self) -> usize {
        self.value.len()
    }
}

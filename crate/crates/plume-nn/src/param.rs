//! Trainable parameter with its gradient accumulator.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: ArrayD<f32>,
    pub grad: ArrayD<f32>,
}

impl Param {
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        let value = ArrayD::zeros(IxDyn(shape));
        let grad = ArrayD::zeros(IxDyn(shape));
        Param {
            name: name.into(),
            value,
            grad,
        }
    }

    /// Uniform init on `(-bound, bound)` with `bound = 1/sqrt(fan_in)`.
    pub fn uniform_fan_in(
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n)
            .map(|_| ((rng.random::<f64>() * 2.0 - 1.0) * bound) as f32)
            .collect();
        let value = ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape/product mismatch");
        let grad = ArrayD::zeros(IxDyn(shape));
        Param {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

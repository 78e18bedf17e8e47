use rand::Rng;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// He-normal initialization: i.i.d. `N(0, 2/fan_in)`.
pub fn he_init<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, fan_in: usize, rng: &mut R) -> Result<Tensor> {
    if fan_in == 0 {
        return Err(TensorError::invalid("he_init", "fan_in must be >= 1"));
    }
    Ok(Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng))
}

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tape::{Mode, Tape, Var};
use crate::tensor::Tensor;

impl<T: Real> Tape<T> {
    /// Inverted dropout. Eval mode, or `p == 0`, returns `x` itself.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Contract(format!("dropout rate {p} outside [0, 1)")));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let scale = T::from_f64(1.0 / (1.0 - p)).unwrap();
        let mask: Vec<T> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { scale })
            .collect();
        let mask = Tensor::new(self.shape(x), mask)?;
        self.masked_mul(x, &mask)
    }
}

use super::Tensor;
use crate::error::{Result, SparcError};

/// Plain stochastic gradient descent: `p <- p - lr * grad(p)`.
#[derive(Debug, Clone, Copy)]
pub struct Sgd {
    learning_rate: f32,
}

impl Sgd {
    pub fn new(learning_rate: f32) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(SparcError::Validation(format!(
                "learning rate must be positive and finite, got {learning_rate}"
            )));
        }
        Ok(Sgd { learning_rate })
    }

    pub fn learning_rate(&self) -> f32 {
        self.learning_rate
    }

    /// Apply one update to every parameter. All parameters are checked
    /// before any is modified, so a rejected step leaves them untouched.
    /// Gradients are left in place; the caller zeroes them.
    pub fn step(&self, params: &mut [&mut Tensor]) -> Result<()> {
        for p in params.iter() {
            if p.is_frozen() {
                return Err(SparcError::State(format!("parameter {:?} is frozen", p.id())));
            }
            if p.grad().is_none() {
                return Err(SparcError::Validation(format!(
                    "parameter {:?} has no gradient",
                    p.id()
                )));
            }
        }
        for p in params.iter_mut() {
            let g = p.grad.take().expect("checked above");
            for (v, d) in p.data.iter_mut().zip(&g) {
                *v -= self.learning_rate * d;
            }
            p.grad = Some(g);
        }
        Ok(())
    }
}

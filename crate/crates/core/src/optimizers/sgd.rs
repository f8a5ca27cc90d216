use crate::error::{Error, Result};

/// `params - lr * grad`
pub fn sgd_step(params: &[f64], grad: &[f64], lr: f64) -> Result<Vec<f64>> {
    if params.len() != grad.len() {
        return Err(Error::Shape {
            op: "sgd_step",
            left: vec![params.len()],
            right: vec![grad.len()],
        });
    }
    if !(lr > 0.0) {
        return Err(Error::Contract(format!("learning rate must be positive, got {lr}")));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient"));
    }
    Ok(params.iter().zip(grad).map(|(w, g)| w - lr * g).collect())
}

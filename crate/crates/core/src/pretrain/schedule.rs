use std::f64::consts::PI;

use super::{PretrainError, Result};

/// Linear warmup from zero over `warmup` steps, then cosine decay to zero at `steps`.
pub fn lr_schedule(step: u64, base_lr: f64, warmup: u64, steps: u64) -> Result<f64> {
    if warmup >= steps {
        return Err(PretrainError::Schedule(format!("warmup {warmup} must be below steps {steps}")));
    }
    if step > steps {
        return Err(PretrainError::Schedule(format!("step {step} outside 0..={steps}")));
    }
    if step < warmup {
        return Ok(base_lr * step as f64 / warmup as f64);
    }
    let t = (step - warmup) as f64 / (steps - warmup) as f64;
    if t == 1.0 {
        return Ok(0.0);
    }
    Ok(base_lr * 0.5 * (1.0 + (PI * t).cos()))
}

/// Polynomial decay `base_lr * (1 - epoch / epochs)^power`.
pub fn poly_schedule(epoch: u64, base_lr: f64, epochs: u64, power: f64) -> Result<f64> {
    if epochs == 0 || epoch > epochs {
        return Err(PretrainError::Schedule(format!("epoch {epoch} outside 0..={epochs}")));
    }
    Ok(base_lr * (1.0 - epoch as f64 / epochs as f64).powf(power))
}

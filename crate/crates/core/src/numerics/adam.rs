//! Bias-corrected Adam over flat parameter buffers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Anything that exposes its trainable values as an ordered list of slices.
///
/// A gradient for a model is stored in a second instance of the same type, so
/// `slices()` of the model and of its gradient line up one-to-one.
pub trait Parameters {
    fn slices(&self) -> Vec<&[f64]>;
    fn slices_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    fn flat(&self) -> Vec<f64> {
        self.slices().concat()
    }

    fn set_flat(&mut self, values: &[f64]) {
        let mut offset = 0;
        for s in self.slices_mut() {
            let n = s.len();
            s.copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        assert_eq!(offset, values.len(), "set_flat: length mismatch");
    }

    fn zero(&mut self) {
        for s in self.slices_mut() {
            s.fill(0.0);
        }
    }

    /// A copy with every parameter set to zero; the usual gradient buffer.
    fn zeros_like(&self) -> Self
    where
        Self: Clone,
    {
        let mut z = self.clone();
        z.zero();
        z
    }

    /// `self += scale * other`.
    fn accumulate(&mut self, scale: f64, other: &Self) {
        let src = other.flat();
        let mut offset = 0;
        for s in self.slices_mut() {
            for v in s.iter_mut() {
                *v += scale * src[offset];
                offset += 1;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }

    pub fn validate(&self, field: &str) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::config(format!("{field}.learning_rate"), "must be positive"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::config(format!("{field}.{name}"), "must lie in (0, 1)"));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config(format!("{field}.epsilon"), "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, num_params: usize) -> Self {
        Self {
            config,
            first_moment: vec![0.0; num_params],
            second_moment: vec![0.0; num_params],
            step_count: 0,
        }
    }

    /// Grows the moment buffers when the parameter count increases. New
    /// entries start at zero, as if freshly initialised.
    pub fn resize(&mut self, num_params: usize) {
        self.first_moment.resize(num_params, 0.0);
        self.second_moment.resize(num_params, 0.0);
    }

    /// One Adam update on a flat parameter vector.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first_moment.len() {
            return Err(Error::Shape(format!(
                "adam: {} params, {} grads, {} moments",
                params.len(),
                grads.len(),
                self.first_moment.len()
            )));
        }
        if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Optimizer {
                index,
                reason: format!("non-finite gradient {}", grads[index]),
            });
        }
        self.step_count += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step_count as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut())
            .zip(self.second_moment.iter_mut())
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
        Ok(())
    }

    /// Adam update applied to a whole model, with the gradient held in a
    /// second instance of the same type.
    pub fn step_model<P: Parameters>(&mut self, model: &mut P, grads: &P) -> Result<()> {
        let g = grads.flat();
        let mut p = model.flat();
        if self.first_moment.len() < p.len() {
            self.resize(p.len());
        }
        self.step(&mut p, &g)?;
        model.set_flat(&p);
        Ok(())
    }
}

//! First-order steppers over flat parameter blocks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_step(block: &str, params: &[f64], grads: &[f64], lr: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::dims(format!(
            "{block}: {} parameters but {} gradient components",
            params.len(),
            grads.len()
        )));
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
    }
    if let Some(pos) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Divergence {
            block: block.to_string(),
            detail: format!("non-finite gradient component at {pos}"),
        });
    }
    Ok(())
}

/// Adam moments for one parameter block (Kingma & Ba defaults).
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step_count: u64,
    beta1: f64,
    beta2: f64,
    eps_hat: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self::with_hyperparams(len, 0.9, 0.999, 1e-8).expect("default hyperparameters are valid")
    }

    pub fn with_hyperparams(len: usize, beta1: f64, beta2: f64, eps_hat: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
            return Err(Error::invalid(format!("Adam betas must lie in [0, 1), got {beta1}, {beta2}")));
        }
        if !(eps_hat > 0.0) {
            return Err(Error::invalid("Adam epsilon must be positive"));
        }
        Ok(Self { first_moment: vec![0.0; len], second_moment: vec![0.0; len], step_count: 0, beta1, beta2, eps_hat })
    }

    pub fn len(&self) -> usize {
        self.first_moment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first_moment.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One bias-corrected Adam update of `params` in place. `block` names the
    /// parameter block in divergence errors.
    pub fn step(&mut self, block: &str, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        check_step(block, params, grads, lr)?;
        if params.len() != self.len() {
            return Err(Error::dims(format!(
                "{block}: Adam state sized {} for {} parameters",
                self.len(),
                params.len()
            )));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, &g), m), v) in
            params.iter_mut().zip(grads).zip(self.first_moment.iter_mut()).zip(self.second_moment.iter_mut())
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + self.eps_hat);
        }
        Ok(())
    }
}

pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
    state.step("parameter", params, grads, lr)
}

/// `params -= lr * grads`.
pub fn sgd_step(params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
    check_step("parameter", params, grads, lr)?;
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= lr * g;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(Error::invalid(format!("unknown optimizer '{other}' (expected adam|sgd)"))),
        }
    }
}

/// The stepper owned by one parameter block during a training phase.
#[derive(Clone, Debug)]
pub enum Stepper {
    Adam(AdamState),
    Sgd,
}

impl Stepper {
    pub fn new(kind: OptimizerKind, len: usize) -> Self {
        match kind {
            OptimizerKind::Adam => Stepper::Adam(AdamState::new(len)),
            OptimizerKind::Sgd => Stepper::Sgd,
        }
    }

    pub fn step(&mut self, block: &str, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        match self {
            Stepper::Adam(state) => state.step(block, params, grads, lr),
            Stepper::Sgd => {
                check_step(block, params, grads, lr)?;
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= lr * g;
                }
                Ok(())
            }
        }
    }
}

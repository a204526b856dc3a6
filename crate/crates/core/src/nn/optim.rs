use serde::{Deserialize, Serialize};

use super::{NnError, ParameterSet, Result, Scalar};

/// Plain gradient descent: `params -= lr * grads`.
pub fn sgd_step<T: Scalar>(
    params: &mut ParameterSet<T>,
    grads: &ParameterSet<T>,
    lr: f64,
) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(NnError::LearningRate(lr));
    }
    params.check_shape(grads, "gradient")?;
    if !grads.all_finite() {
        return Err(NnError::NonFinite("gradient"));
    }
    let lr = T::from_f64(lr).unwrap();
    for (p, &g) in params.values_mut().zip(grads.values()) {
        *p = *p - lr * g;
    }
    Ok(())
}

/// Bias-corrected Adam moments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: ParameterSet<f32>,
    pub v: ParameterSet<f32>,
}

impl AdamState {
    pub fn new(like: &ParameterSet<f32>) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: like.zeros_like(),
            v: like.zeros_like(),
        }
    }
}

/// One Adam update. Moments are accumulated in the parameter precision and
/// the bias corrections in `f64`.
pub fn adam_step(
    params: &mut ParameterSet<f32>,
    grads: &ParameterSet<f32>,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(NnError::LearningRate(lr));
    }
    params.check_shape(grads, "gradient")?;
    params.check_shape(&state.m, "adam first moment")?;
    params.check_shape(&state.v, "adam second moment")?;
    if !grads.all_finite() {
        return Err(NnError::NonFinite("gradient"));
    }
    if !params.all_finite() {
        return Err(NnError::NonFinite("parameters"));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1 as f32, state.beta2 as f32);
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let step_size = (lr / c1) as f32;
    let c2_sqrt = c2.sqrt() as f32;
    let eps = state.eps as f32;
    let moments = state.m.values_mut().zip(state.v.values_mut());
    for ((p, &g), (m, v)) in params.values_mut().zip(grads.values()).zip(moments) {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        *p -= step_size * *m / (v.sqrt() / c2_sqrt + eps);
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// An optimizer bound to a learning rate (`alpha` for inner steps, `beta`
/// for outer ones).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub adam: Option<AdamState>,
}

impl OptimizerState {
    pub fn sgd(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate,
            adam: None,
        }
    }

    pub fn adam(learning_rate: f64, like: &ParameterSet<f32>) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate,
            adam: Some(AdamState::new(like)),
        }
    }

    pub fn step(
        &mut self,
        params: &mut ParameterSet<f32>,
        grads: &ParameterSet<f32>,
    ) -> Result<()> {
        match self.kind {
            OptimizerKind::Sgd => sgd_step(params, grads, self.learning_rate),
            OptimizerKind::Adam => {
                let state = self.adam.get_or_insert_with(|| AdamState::new(params));
                adam_step(params, grads, state, self.learning_rate)
            }
        }
    }
}

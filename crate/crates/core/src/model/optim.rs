use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{GradientSet, ModelError, ParamKey, TinyTransformer};
use crate::dmp::MetaPrompt;
use crate::numerics::Matrix;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Schedule {
    Constant,
    /// `lr · ½(1 + cos(π t / total))`, held at zero after `total` steps.
    Cosine { total_steps: usize },
}

impl Schedule {
    pub fn factor(&self, step: usize) -> f64 {
        match *self {
            Schedule::Constant => 1.0,
            Schedule::Cosine { total_steps } => {
                if total_steps == 0 {
                    return 1.0;
                }
                let t = step.min(total_steps) as f64 / total_steps as f64;
                0.5 * (1.0 + (PI * t).cos())
            }
        }
    }
}

/// AdamW with decoupled weight decay. Moment state is keyed by parameter and
/// should be reset at every task boundary.
#[derive(Clone, Debug)]
pub struct AdamW<S> {
    config: OptimizerConfig,
    schedule: Schedule,
    steps: usize,
    moments: BTreeMap<ParamKey, (Matrix<S>, Matrix<S>)>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(config: OptimizerConfig, schedule: Schedule) -> Self {
        Self {
            config,
            schedule,
            steps: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.steps
    }

    pub fn current_lr(&self) -> f64 {
        self.config.lr * self.schedule.factor(self.steps)
    }

    pub fn reset(&mut self, schedule: Schedule) {
        self.schedule = schedule;
        self.steps = 0;
        self.moments.clear();
    }

    pub fn step(
        &mut self,
        model: &mut TinyTransformer<S>,
        prompt: &mut MetaPrompt<S>,
        grads: &GradientSet<S>,
    ) -> Result<(), ModelError> {
        let lr = self.current_lr();
        self.steps += 1;
        let c = &self.config;
        let t = self.steps as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (S::lit(c.beta1), S::lit(c.beta2));
        for (key, g) in grads.iter() {
            let param = model.param_mut(prompt, key)?;
            if param.shape() != g.shape() {
                return Err(ModelError::UpstreamShape {
                    expected: param.shape(),
                    got: g.shape(),
                });
            }
            let (m, v) = self
                .moments
                .entry(key)
                .or_insert_with(|| (Matrix::zeros(g.rows(), g.cols()), Matrix::zeros(g.rows(), g.cols())));
            let decay = S::lit(1.0 - lr * c.weight_decay);
            let step = S::lit(lr);
            for (((p, &gi), mi), vi) in param
                .as_mut_slice()
                .iter_mut()
                .zip(g.as_slice())
                .zip(m.as_mut_slice())
                .zip(v.as_mut_slice())
            {
                *mi = b1 * *mi + (S::one() - b1) * gi;
                *vi = b2 * *vi + (S::one() - b2) * gi * gi;
                let mhat = *mi / S::lit(bias1);
                let vhat = *vi / S::lit(bias2);
                *p = *p * decay - step * mhat / (vhat.sqrt() + S::lit(c.eps));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        let s = Schedule::Cosine { total_steps: 10 };
        assert_eq!(s.factor(0), 1.0);
        assert!((s.factor(5) - 0.5).abs() < 1e-15);
        assert!(s.factor(10).abs() < 1e-15);
        assert!(s.factor(20).abs() < 1e-15);
        assert_eq!(Schedule::Constant.factor(7), 1.0);
    }
}

//! ADAM with bias correction and the stepped milestone learning-rate decay.

use crate::autodiff::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// ADAM moment buffers for a fixed set of parameters.
///
/// One state per local block in layer-wise mode, one spanning state in
/// global mode; moment statistics never mix across modes.
#[derive(Debug, Clone)]
pub struct AdamState {
    entries: Vec<AdamEntry>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone)]
struct AdamEntry {
    param: ParamId,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    /// Defaults from the original ADAM formulation.
    pub fn new(store: &ParamStore, params: &[ParamId]) -> Self {
        let entries = params
            .iter()
            .map(|&p| AdamEntry {
                param: p,
                m: vec![0.0; store.get(p).values.len()],
                v: vec![0.0; store.get(p).values.len()],
            })
            .collect();
        AdamState {
            entries,
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.entries.iter().map(|e| e.param)
    }

    /// One bias-corrected ADAM update over all owned parameters, in place.
    /// Moments always update; `lr = 0` leaves the parameters untouched.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for e in &mut self.entries {
            let p = store.get_mut(e.param);
            if p.grad.len() != e.m.len() {
                return Err(Error::InvalidArgument(format!(
                    "gradient buffer for param {} has length {}, expected {}",
                    e.param,
                    p.grad.len(),
                    e.m.len()
                )));
            }
            for i in 0..e.m.len() {
                let g = p.grad[i] as f64;
                e.m[i] = self.beta1 * e.m[i] + (1.0 - self.beta1) * g;
                e.v[i] = self.beta2 * e.v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = e.m[i] / bc1;
                let v_hat = e.v[i] / bc2;
                p.values[i] =
                    (p.values[i] as f64 - lr * m_hat / (v_hat.sqrt() + self.epsilon)) as f32;
            }
        }
        Ok(())
    }
}

/// The stepped decay schedule: multiply by `factor` at each milestone
/// fraction of the total epoch budget.
#[derive(Debug, Clone)]
pub struct DecaySchedule {
    pub total_epochs: usize,
    pub milestones: Vec<f64>,
    pub factor: f64,
}

impl DecaySchedule {
    /// Decay 0.25 at 50%, 75%, 89% and 94% of the total epochs.
    pub fn quartered(total_epochs: usize) -> Self {
        DecaySchedule {
            total_epochs,
            milestones: vec![0.50, 0.75, 0.89, 0.94],
            factor: 0.25,
        }
    }

    /// Milestone epochs, computed as floor(fraction · total).
    pub fn milestone_epochs(&self) -> Vec<usize> {
        self.milestones
            .iter()
            .map(|f| (f * self.total_epochs as f64).floor() as usize)
            .collect()
    }

    pub fn lr_at_epoch(&self, base_lr: f64, epoch: usize) -> Result<f64> {
        if epoch >= self.total_epochs {
            return Err(Error::InvalidArgument(format!(
                "epoch {epoch} out of range (total {})",
                self.total_epochs
            )));
        }
        let passed = self
            .milestone_epochs()
            .into_iter()
            .filter(|&m| m <= epoch)
            .count();
        Ok(base_lr * self.factor.powi(passed as i32))
    }
}

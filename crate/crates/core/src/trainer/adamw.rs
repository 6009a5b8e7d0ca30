use crate::error::{Error, Result};
use crate::params::{Gradients, ParamRegistry};

/// Adam with decoupled weight decay over the trainable parameters.
///
/// Decay applies only to matrices (rank ≥ 2); biases, gates, norms and other
/// vectors are never decayed.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Option<Vec<f64>>>,
    v: Vec<Option<Vec<f64>>>,
}

impl AdamW {
    pub fn new(registry: &ParamRegistry, lr: f64, weight_decay: f64) -> Result<Self> {
        if !(lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        if !(weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight decay must be non-negative, got {weight_decay}")));
        }
        let moments = || {
            registry
                .entries()
                .iter()
                .map(|e| e.trainable.then(|| vec![0.0; e.numel()]))
                .collect()
        };
        Ok(AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: moments(),
            v: moments(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Whether a moment buffer exists for parameter index `i`.
    pub fn tracks(&self, i: usize) -> bool {
        self.m.get(i).is_some_and(Option::is_some)
    }

    /// One bias-corrected update. Trainable parameters without a gradient are
    /// treated as having a zero gradient.
    pub fn update(&mut self, registry: &mut ParamRegistry, grads: &Gradients) -> Result<()> {
        for id in grads.ids() {
            let e = registry.entry(id);
            if !e.trainable {
                return Err(Error::Contract(format!("gradient supplied for frozen parameter {}", e.name)));
            }
            let g = grads.get(id).expect("listed id has a gradient");
            if g.len() != e.numel() {
                return Err(Error::Contract(format!(
                    "gradient for {} has {} values, parameter has {}",
                    e.name,
                    g.len(),
                    e.numel()
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = registry.iter().filter(|(_, e)| e.trainable).map(|(id, e)| (id, e.shape.len())).collect();
        for (id, rank) in ids {
            let i = id.index();
            let (Some(m), Some(v)) = (self.m[i].as_mut(), self.v[i].as_mut()) else {
                return Err(Error::State(format!(
                    "parameter {} became trainable after the optimizer was created",
                    registry.entry(id).name
                )));
            };
            let decay = if rank >= 2 { 1.0 - self.lr * self.weight_decay } else { 1.0 };
            let g = grads.get(id);
            let p = registry.value_mut(id)?.data_mut();
            for j in 0..p.len() {
                let gj = g.map_or(0.0, |g| g[j]);
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] = p[j] * decay - self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

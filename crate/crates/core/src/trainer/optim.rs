use std::collections::BTreeMap;
use std::f64::consts::PI;

use ndarray::Array2;

use crate::autograd::Matrix;
use crate::error::{Error, Result};

/// `lr0 * (1 + cos(pi * step / total_steps)) / 2`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::InvalidInput(
            "cosine schedule needs at least one step".into(),
        ));
    }
    if step > total_steps {
        return Err(Error::InvalidInput(format!(
            "step {step} beyond schedule of {total_steps}"
        )));
    }
    Ok(lr0 * (1.0 + (PI * step as f64 / total_steps as f64).cos()) / 2.0)
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Number of updates applied so far.
    pub t: u64,
    pub first_moment: BTreeMap<String, Matrix>,
    pub second_moment: BTreeMap<String, Matrix>,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            t: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }

    /// One update of every parameter in `params` from the same-named
    /// gradient. Parameters without a gradient are left alone.
    pub fn step(
        &mut self,
        params: Vec<(String, &mut Matrix)>,
        grads: &[(String, Matrix)],
        lr: f64,
    ) -> Result<()> {
        let grads: BTreeMap<&str, &Matrix> = grads.iter().map(|(n, g)| (n.as_str(), g)).collect();
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, p) in params {
            let Some(g) = grads.get(name.as_str()) else {
                continue;
            };
            if g.dim() != p.dim() {
                return Err(Error::Shape(format!(
                    "gradient of {name} is {:?}, parameter is {:?}",
                    g.dim(),
                    p.dim()
                )));
            }
            let m = self
                .first_moment
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(p.dim()));
            m.zip_mut_with(g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            let v = self
                .second_moment
                .entry(name)
                .or_insert_with(|| Array2::zeros(p.dim()));
            v.zip_mut_with(g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let decay = 1.0 - lr * self.weight_decay;
            ndarray::Zip::from(p)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| {
                    let update = (m / bc1) / ((v / bc2).sqrt() + self.eps);
                    *p = *p * decay - lr * update;
                });
        }
        Ok(())
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [(String, Matrix)], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|(_, g)| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.mapv_inplace(|v| v * s);
        }
    }
    norm
}

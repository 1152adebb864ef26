use serde::{Deserialize, Serialize};

use crate::model::TrainSnapshot;
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    #[serde(default = "defaults::beta1")]
    pub beta1: f64,
    #[serde(default = "defaults::beta2")]
    pub beta2: f64,
    #[serde(default = "defaults::eps")]
    pub eps: f64,
    #[serde(default = "defaults::weight_decay")]
    pub weight_decay: f64,
}

mod defaults {
    pub fn beta1() -> f64 {
        0.9
    }
    pub fn beta2() -> f64 {
        0.98
    }
    pub fn eps() -> f64 {
        1e-8
    }
    pub fn weight_decay() -> f64 {
        0.1
    }
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            beta1: defaults::beta1(),
            beta2: defaults::beta2(),
            eps: defaults::eps(),
            weight_decay: defaults::weight_decay(),
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if !unit(self.beta1)
            || !unit(self.beta2)
            || !(self.eps > 0.0)
            || !(self.weight_decay >= 0.0)
        {
            return Err(Error::config(format!(
                "invalid optimizer settings {self:?}"
            )));
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay. Moments are allocated lazily for the
/// parameters that receive gradients; decay applies only to weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<F: Scalar> {
    pub config: OptimConfig,
    step: u64,
    m: Vec<Option<Vec<F>>>,
    v: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(config: OptimConfig, n_params: usize) -> Result<Self> {
        config.validate()?;
        Ok(AdamW {
            config,
            step: 0,
            m: vec![None; n_params],
            v: vec![None; n_params],
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update with the given gradients. Fails before touching any
    /// parameter if a gradient is non-finite.
    pub fn step(
        &mut self,
        params: &mut ParamStore<F>,
        grads: &[(ParamId, Vec<F>)],
        lr: f64,
    ) -> Result<()> {
        for (id, g) in grads {
            if let Some(pos) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::numeric(format!(
                    "non-finite gradient {} at index {pos} of parameter {}",
                    g[pos],
                    params.entry(*id).name
                )));
            }
            if g.len() != params.get(*id).len() {
                return Err(Error::shape(format!(
                    "gradient length mismatch for {}",
                    params.entry(*id).name
                )));
            }
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (F::c(c.beta1), F::c(c.beta2));
        let (ob1, ob2) = (F::c(1.0 - c.beta1), F::c(1.0 - c.beta2));
        let step_size = F::c(lr / bc1);
        let inv_bc2_sqrt = F::c(1.0 / bc2.sqrt());
        let eps = F::c(c.eps);
        for (id, g) in grads {
            let decay = match params.entry(*id).kind {
                ParamKind::Weight => F::c(1.0 - lr * c.weight_decay),
                ParamKind::Bias => F::one(),
                ParamKind::Buffer => continue,
            };
            let m = self.m[id.0].get_or_insert_with(|| vec![F::zero(); g.len()]);
            let v = self.v[id.0].get_or_insert_with(|| vec![F::zero(); g.len()]);
            let p = params.get_mut(*id).data_mut();
            for i in 0..g.len() {
                m[i] = b1 * m[i] + ob1 * g[i];
                v[i] = b2 * v[i] + ob2 * g[i] * g[i];
                let denom = v[i].sqrt() * inv_bc2_sqrt + eps;
                p[i] = p[i] * decay - step_size * m[i] / denom;
            }
        }
        Ok(())
    }

    /// Moments as named tensors plus the step count, for checkpointing.
    pub fn snapshot(
        &self,
        params: &ParamStore<F>,
        progress: serde_json::Value,
    ) -> TrainSnapshot<F> {
        let mut tensors = Vec::new();
        for (i, (m, v)) in self.m.iter().zip(&self.v).enumerate() {
            if let (Some(m), Some(v)) = (m, v) {
                let e = params.entry(ParamId(i));
                let shape = e.tensor.shape().to_vec();
                tensors.push((
                    format!("optim.m.{}", e.name),
                    Tensor::new(shape.clone(), m.clone()).expect("shape"),
                ));
                tensors.push((
                    format!("optim.v.{}", e.name),
                    Tensor::new(shape, v.clone()).expect("shape"),
                ));
            }
        }
        TrainSnapshot {
            state: serde_json::json!({
                "optimizer": { "step": self.step, "config": self.config },
                "progress": progress,
            }),
            tensors,
        }
    }

    pub fn restore(snapshot: &TrainSnapshot<F>, params: &ParamStore<F>) -> Result<Self> {
        let opt = snapshot
            .state
            .get("optimizer")
            .ok_or_else(|| Error::corrupt("training state has no optimizer section"))?;
        let config: OptimConfig = serde_json::from_value(opt["config"].clone())
            .map_err(|e| Error::corrupt(format!("optimizer config: {e}")))?;
        let step = opt["step"]
            .as_u64()
            .ok_or_else(|| Error::corrupt("optimizer step missing"))?;
        let mut s = Self::new(config, params.len())?;
        s.step = step;
        for (name, t) in &snapshot.tensors {
            let (slot, pname) = if let Some(p) = name.strip_prefix("optim.m.") {
                (&mut s.m, p)
            } else if let Some(p) = name.strip_prefix("optim.v.") {
                (&mut s.v, p)
            } else {
                continue;
            };
            let id = params.id(pname).ok_or_else(|| {
                Error::corrupt(format!("optimizer state for unknown parameter {pname}"))
            })?;
            if params.get(id).shape() != t.shape() {
                return Err(Error::corrupt(format!(
                    "optimizer state shape mismatch for {pname}"
                )));
            }
            slot[id.0] = Some(t.data().to_vec());
        }
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64, kind: ParamKind) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s
            .add("p", kind, Tensor::new([1], vec![v]).unwrap())
            .unwrap();
        (s, id)
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let (mut s, id) = store(0.7, ParamKind::Weight);
        let cfg = OptimConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, 1).unwrap();
        for _ in 0..3 {
            opt.step(&mut s, &[(id, vec![0.0])], 1e-3).unwrap();
        }
        assert_eq!(s.get(id).data(), &[0.7]);
    }

    #[test]
    fn decoupled_decay_shrinks_weights_only() {
        let (mut s, id) = store(2.0, ParamKind::Weight);
        let mut opt = AdamW::new(OptimConfig::default(), 1).unwrap();
        opt.step(&mut s, &[(id, vec![0.0])], 1e-2).unwrap();
        assert!((s.get(id).data()[0] - 2.0 * (1.0 - 1e-2 * 0.1)).abs() < 1e-15);
        let (mut s, id) = store(2.0, ParamKind::Bias);
        opt.step(&mut s, &[(id, vec![0.0])], 1e-2).unwrap();
        assert_eq!(s.get(id).data(), &[2.0]);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let (mut s, id) = store(1.0, ParamKind::Weight);
        let mut opt = AdamW::new(OptimConfig::default(), 1).unwrap();
        let err = opt.step(&mut s, &[(id, vec![f64::NAN])], 1e-3).unwrap_err();
        assert!(err.to_string().contains("parameter p"), "{err}");
        assert_eq!(s.get(id).data(), &[1.0]);
        assert_eq!(opt.steps_taken(), 0);
    }

    #[test]
    fn snapshot_round_trip() {
        let (mut s, id) = store(1.0, ParamKind::Weight);
        let mut opt = AdamW::new(OptimConfig::default(), 1).unwrap();
        opt.step(&mut s, &[(id, vec![0.3])], 1e-3).unwrap();
        let snap = opt.snapshot(&s, serde_json::json!({}));
        assert_eq!(AdamW::restore(&snap, &s).unwrap(), opt);
    }
}

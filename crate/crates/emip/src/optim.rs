//! Adam over an explicit list of parameter groups.

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::{EmipError, Result};
use crate::params::ParamStore;

#[derive(Debug)]
struct Slot {
    name: String,
    var: Var,
    m: Tensor,
    v: Tensor,
}

#[derive(Debug)]
pub struct Adam {
    slots: Vec<Slot>,
    groups: Vec<String>,
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    /// Registers every parameter of `groups`. Frozen or unknown groups are a
    /// configuration error.
    pub fn new(store: &ParamStore, groups: &[String]) -> Result<Self> {
        let known = store.groups();
        let mut slots = Vec::new();
        for g in groups {
            if !known.contains(g) {
                return Err(EmipError::Config(format!("optimizer group `{g}` does not exist")));
            }
            if store.is_frozen(g) {
                return Err(EmipError::Config(format!("group `{g}` is frozen and cannot be optimized")));
            }
            for (name, var) in store.group_vars(g) {
                slots.push(Slot {
                    name,
                    m: var.as_tensor().zeros_like()?,
                    v: var.as_tensor().zeros_like()?,
                    var,
                });
            }
        }
        Ok(Self {
            slots,
            groups: groups.to_vec(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        })
    }

    /// Names of the registered groups.
    pub fn groups(&self) -> &[String] {
        &self.groups
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.slots.iter().map(|s| s.name.as_str())
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update with learning rate `lr`; parameters without a gradient keep
    /// their value and moments.
    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for s in &mut self.slots {
            let Some(g) = grads.get(s.var.as_tensor()) else {
                continue;
            };
            // detached so no step keeps the previous step's graph alive
            let g = g.detach();
            s.m = ((&s.m * self.beta1)? + (&g * (1.0 - self.beta1))?)?.detach();
            s.v = ((&s.v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?.detach();
            let denom = ((&s.v / bc2)?.sqrt()? + self.eps)?;
            let update = ((&s.m / bc1)? / denom)?;
            s.var.set(&(s.var.as_tensor() - (update * lr)?)?)?;
        }
        Ok(())
    }

    /// `(name, first moment, second moment)` for checkpointing.
    pub fn state(&self) -> Vec<(String, Tensor, Tensor)> {
        self.slots
            .iter()
            .map(|s| (s.name.clone(), s.m.clone(), s.v.clone()))
            .collect()
    }

    pub fn restore_state(&mut self, step: u64, mut lookup: impl FnMut(&str) -> Option<(Tensor, Tensor)>) -> Result<()> {
        for s in &mut self.slots {
            let (m, v) = lookup(&s.name)
                .ok_or_else(|| EmipError::Checkpoint(format!("optimizer state for `{}` missing", s.name)))?;
            s.m = m;
            s.v = v;
        }
        self.step = step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;
    use candle_core::DType;

    #[test]
    fn minimizes_a_quadratic() {
        let store = ParamStore::new(0, DType::F32);
        let p = store.scope("g").weight("w", &[3], Init::Ones).unwrap();
        let mut opt = Adam::new(&store, &["g".to_string()]).unwrap();
        for _ in 0..300 {
            let loss = (p.t() - 3.0).unwrap().sqr().unwrap().sum_all().unwrap();
            opt.step(&loss.backward().unwrap(), 0.05).unwrap();
        }
        let v = p.t().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|x| (x - 3.0).abs() < 1e-2), "{v:?}");
    }

    #[test]
    fn frozen_groups_cannot_be_registered() {
        let store = ParamStore::new(0, DType::F32);
        store.scope("flownet").weight("w", &[1], Init::Ones).unwrap();
        store.set_frozen("flownet", true);
        assert!(Adam::new(&store, &["flownet".to_string()]).is_err());
        assert!(Adam::new(&store, &["missing".to_string()]).is_err());
    }
}

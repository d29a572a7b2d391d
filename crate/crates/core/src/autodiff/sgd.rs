use std::collections::HashMap;

use crate::autodiff::{Gradients, ParamSet, Real};
use crate::error::{Error, Result};

/// Heavy-ball SGD: `v <- momentum * v + g; p <- p - lr * v`.
#[derive(Clone, Debug)]
pub struct Sgd<T: Real = f32> {
    lr: T,
    momentum: T,
    velocity: HashMap<String, Vec<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::invalid(format!("learning rate must be > 0, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid(format!("momentum must be in [0, 1), got {momentum}")));
        }
        Ok(Sgd {
            lr: T::from_f64(lr),
            momentum: T::from_f64(momentum),
            velocity: HashMap::new(),
        })
    }

    /// Applies one update. Every parameter must have a gradient; nothing is
    /// modified when one is missing.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &Gradients<T>) -> Result<()> {
        let lookup: HashMap<&str, &[T]> = grads.params().collect();
        self.step_with(params, |name| lookup.get(name).copied())
    }

    pub fn step_with<'g>(
        &mut self,
        params: &mut ParamSet<T>,
        grad_of: impl Fn(&str) -> Option<&'g [T]>,
    ) -> Result<()> {
        for (name, p) in params.iter() {
            match grad_of(name) {
                Some(g) if g.len() == p.len() => {}
                Some(g) => return Err(Error::shape("sgd_step", p.shape(), &[g.len()])),
                None => return Err(Error::invalid(format!("no gradient for parameter {name}"))),
            }
        }
        for (name, p) in params.iter_mut() {
            let g = grad_of(name).expect("checked above");
            let v = self
                .velocity
                .entry(name.to_string())
                .or_insert_with(|| vec![T::zero(); g.len()]);
            for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                *vv = self.momentum * *vv + gv;
                *pv = *pv - self.lr * *vv;
            }
        }
        Ok(())
    }
}

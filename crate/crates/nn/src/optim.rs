//! Adam with bias correction.

use std::collections::BTreeMap;

use crate::{Array, Float, Gradients, Module};

#[derive(Clone, Debug)]
pub struct Adam<T: Float> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Array<T>>,
    v: BTreeMap<String, Array<T>>,
}

impl<T: Float> Adam<T> {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter of `module` that has a
    /// gradient in `grads`.
    pub fn step<M: Module<T> + ?Sized>(&mut self, module: &mut M, grads: &Gradients<T>) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let step_size = T::of(self.lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        let eps = T::of(self.eps);
        for (name, p) in module.params_mut() {
            if !p.trainable() {
                continue;
            }
            let Some(g) = grads.param(p.id()) else {
                continue;
            };
            let shape = p.value().shape().to_vec();
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Array::zeros(shape.clone()));
            let v = self.v.entry(name).or_insert_with(|| Array::zeros(shape));
            let (md, vd, gd) = (m.data_mut(), v.data_mut(), g.data());
            for (i, w) in p.value_mut().data_mut().iter_mut().enumerate() {
                let gi = gd[i];
                md[i] = b1 * md[i] + (T::one() - b1) * gi;
                vd[i] = b2 * vd[i] + (T::one() - b2) * gi * gi;
                *w -= step_size * md[i] / ((vd[i] * inv_bc2).sqrt() + eps);
            }
        }
    }

    /// Moment buffers as named arrays (`m.<param>`, `v.<param>`) plus the step
    /// counter, for checkpointing.
    pub fn state(&self) -> (u64, BTreeMap<String, Array<T>>) {
        let mut out = BTreeMap::new();
        for (k, a) in &self.m {
            out.insert(format!("m.{k}"), a.clone());
        }
        for (k, a) in &self.v {
            out.insert(format!("v.{k}"), a.clone());
        }
        (self.step, out)
    }

    pub fn load_state(&mut self, step: u64, state: &BTreeMap<String, Array<T>>) {
        self.step = step;
        self.m.clear();
        self.v.clear();
        for (k, a) in state {
            if let Some(name) = k.strip_prefix("m.") {
                self.m.insert(name.to_string(), a.clone());
            } else if let Some(name) = k.strip_prefix("v.") {
                self.v.insert(name.to_string(), a.clone());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{Param, Var};

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Param::new(Array::<f64>::from_vec([2], vec![3.0, -2.0]));
        let mut opt = Adam::new(0.1, 0.9, 0.999);
        for _ in 0..500 {
            let loss = p.var().sqr().sum_all();
            let g = loss.backward();
            opt.step(&mut p, &g);
        }
        assert!(p.value().max_abs() < 1e-2, "{:?}", p.value());
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut p = Param::new(Array::<f64>::from_vec([1], vec![1.0]));
        p.set_trainable(false);
        let loss = p.var().sqr().sum_all();
        assert!(!loss.requires_grad());
        let g = Var::leaf(Array::<f64>::scalar(1.0), true)
            .sum_all()
            .backward();
        Adam::new(0.1, 0.9, 0.999).step(&mut p, &g);
        assert_eq!(p.value().data(), &[1.0]);
    }
}

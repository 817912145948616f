//! Central finite-difference gradient checks for 64-bit networks.

use crate::{Array, Module, Var};

/// `|a - b| / max(|a|, |b|)`, or 0 when both are below `floor`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < floor {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Probe {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl Probe {
    pub fn rel_err(&self) -> f64 {
        rel_err(self.analytic, self.numeric, 1e-9)
    }
}

/// Compares d loss / d input at the given flat indices.
pub fn input_probes(
    x: &Array<f64>,
    indices: &[usize],
    step: f64,
    loss: impl Fn(&Var<f64>) -> Var<f64>,
) -> Vec<Probe> {
    let leaf = Var::leaf(x.clone(), true);
    let grads = loss(&leaf).backward();
    let g = grads
        .wrt(&leaf)
        .cloned()
        .unwrap_or_else(|| Array::zeros(x.shape().to_vec()));
    indices
        .iter()
        .map(|&i| {
            let eval = |delta: f64| {
                let mut xp = x.clone();
                xp.data_mut()[i] += delta;
                crate::no_grad(|| loss(&Var::constant(xp)).item())
            };
            Probe {
                index: i,
                analytic: g.data()[i],
                numeric: (eval(step) - eval(-step)) / (2.0 * step),
            }
        })
        .collect()
}

/// Compares d loss / d parameter for the named parameter of `module`.
pub fn param_probes<M: Module<f64>>(
    module: &mut M,
    name: &str,
    indices: &[usize],
    step: f64,
    loss: impl Fn(&M) -> Var<f64>,
) -> Vec<Probe> {
    let id = module
        .params()
        .into_iter()
        .find(|(n, _)| n == name)
        .map(|(_, p)| p.id())
        .unwrap_or_else(|| panic!("no parameter named `{name}`"));
    let grads = loss(module).backward();
    let g = grads.param(id).cloned();
    indices
        .iter()
        .map(|&i| {
            let mut eval = |delta: f64| {
                let orig = set(module, name, i, None);
                set(module, name, i, Some(orig + delta));
                let v = crate::no_grad(|| loss(module).item());
                set(module, name, i, Some(orig));
                v
            };
            let numeric = (eval(step) - eval(-step)) / (2.0 * step);
            Probe {
                index: i,
                analytic: g.as_ref().map_or(0.0, |g| g.data()[i]),
                numeric,
            }
        })
        .collect()
}

fn set<M: Module<f64>>(module: &mut M, name: &str, i: usize, value: Option<f64>) -> f64 {
    for (n, p) in module.params_mut() {
        if n == name {
            let d = p.value_mut().data_mut();
            let old = d[i];
            if let Some(v) = value {
                d[i] = v;
            }
            return old;
        }
    }
    unreachable!("parameter `{name}` vanished")
}

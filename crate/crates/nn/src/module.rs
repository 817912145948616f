//! Parameters and the named-parameter traversal shared by every network.

use std::collections::BTreeMap;

use crate::{Array, Float, NnError, ParamId, Var};

#[derive(Clone, Debug)]
pub struct Param<T: Float> {
    id: ParamId,
    value: Array<T>,
    trainable: bool,
}

impl<T: Float> Param<T> {
    pub fn new(value: Array<T>) -> Self {
        Self {
            id: ParamId::fresh(),
            value,
            trainable: true,
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn value(&self) -> &Array<T> {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Array<T> {
        &mut self.value
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn set_trainable(&mut self, on: bool) {
        self.trainable = on;
    }

    /// Gives this parameter a new identity, so a cloned copy no longer
    /// shares gradients with its source.
    pub fn renew_id(&mut self) {
        self.id = ParamId::fresh();
    }

    /// Leaf for the current forward pass. Gradients are tracked only for
    /// trainable parameters while gradient mode is on.
    pub fn var(&self) -> Var<T> {
        Var::param_leaf(self.value.clone(), self.id, self.trainable)
    }
}

fn join(prefix: &str, name: String) -> String {
    if name.is_empty() {
        prefix.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn extend_prefixed<'a, P>(out: &mut Vec<(String, P)>, prefix: &str, items: Vec<(String, P)>)
where
    P: 'a,
{
    out.extend(items.into_iter().map(|(n, p)| (join(prefix, n), p)));
}

/// Anything owning named parameters.
pub trait Module<T: Float> {
    fn params(&self) -> Vec<(String, &Param<T>)>;
    fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|(_, p)| p.value().len()).sum()
    }

    fn set_trainable(&mut self, on: bool) {
        for (_, p) in self.params_mut() {
            p.set_trainable(on);
        }
    }

    fn renew_ids(&mut self) {
        for (_, p) in self.params_mut() {
            p.renew_id();
        }
    }

    fn state_dict(&self) -> BTreeMap<String, Array<T>> {
        self.params()
            .into_iter()
            .map(|(n, p)| (n, p.value().clone()))
            .collect()
    }

    /// Copies values for every parameter from `state`, which may hold other
    /// entries too.
    fn load_state_dict(&mut self, state: &BTreeMap<String, Array<T>>) -> Result<(), NnError> {
        for (name, p) in self.params_mut() {
            let v = state
                .get(&name)
                .ok_or_else(|| NnError::MissingParam(name.clone()))?;
            if v.shape() != p.value().shape() {
                return Err(NnError::ShapeMismatch {
                    name,
                    expected: p.value().shape().to_vec(),
                    found: v.shape().to_vec(),
                });
            }
            *p.value_mut() = v.clone();
        }
        Ok(())
    }
}

impl<T: Float> Module<T> for Param<T> {
    fn params(&self) -> Vec<(String, &Param<T>)> {
        vec![(String::new(), self)]
    }
    fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        vec![(String::new(), self)]
    }
}

impl<T: Float, M: Module<T>> Module<T> for Option<M> {
    fn params(&self) -> Vec<(String, &Param<T>)> {
        self.as_ref().map(|m| m.params()).unwrap_or_default()
    }
    fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        self.as_mut().map(|m| m.params_mut()).unwrap_or_default()
    }
}

impl<T: Float, M: Module<T>> Module<T> for Vec<M> {
    fn params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = Vec::new();
        for (i, m) in self.iter().enumerate() {
            extend_prefixed(&mut out, &i.to_string(), m.params());
        }
        out
    }
    fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut out = Vec::new();
        for (i, m) in self.iter_mut().enumerate() {
            extend_prefixed(&mut out, &i.to_string(), m.params_mut());
        }
        out
    }
}

/// Implements [`Module`] for a struct generic over `T: Float` by listing its
/// parameter-owning fields.
#[macro_export]
macro_rules! impl_module {
    ($ty:ident { $($field:ident),* $(,)? }) => {
        impl<T: $crate::Float> $crate::Module<T> for $ty<T> {
            fn params(&self) -> Vec<(String, &$crate::Param<T>)> {
                let mut out = Vec::new();
                $( $crate::module::extend_prefixed(&mut out, stringify!($field), $crate::Module::params(&self.$field)); )*
                out
            }
            fn params_mut(&mut self) -> Vec<(String, &mut $crate::Param<T>)> {
                let mut out = Vec::new();
                $( $crate::module::extend_prefixed(&mut out, stringify!($field), $crate::Module::params_mut(&mut self.$field)); )*
                out
            }
        }
    };
}

/// Converts every parameter of a module state into another float type.
pub fn cast_state<T: Float, U: Float>(
    state: &BTreeMap<String, Array<T>>,
) -> BTreeMap<String, Array<U>> {
    state.iter().map(|(k, v)| (k.clone(), v.cast())).collect()
}

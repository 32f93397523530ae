//! Named parameter storage and its binding onto a tape.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use crate::autodiff::{Array, BnRunning, BnStats, Gradients, Tape, Var};
use crate::error::{Error, Result};

/// Parameters in insertion order, addressable by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array>,
    index: Arc<HashMap<String, usize>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.values[i] = value,
            None => {
                Arc::make_mut(&mut self.index).insert(name.clone(), self.names.len());
                self.names.push(name);
                self.values.push(value);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.index.get(name).map(|&i| &mut self.values[i])
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Array] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array] {
        &mut self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Scalar count over parameters whose name starts with `prefix`.
    pub fn count(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, a)| a.len())
            .sum()
    }

    /// Puts every parameter on `tape`, as differentiable leaves when
    /// `trainable`, otherwise as constants.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Bound<'t> {
        let vars = self
            .values
            .iter()
            .map(|v| {
                if trainable {
                    tape.param(v.clone())
                } else {
                    tape.constant(v.clone())
                }
            })
            .collect();
        Bound {
            index: self.index.clone(),
            vars,
        }
    }
}

/// Tape handles for every parameter of a store.
pub struct Bound<'t> {
    index: Arc<HashMap<String, usize>>,
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    /// Names from `store`, one caller-supplied var per parameter.
    pub fn with_vars(store: &ParamStore, vars: Vec<Var<'t>>) -> Result<Self> {
        if vars.len() != store.len() {
            return Err(Error::Contract(format!(
                "{} vars for {} parameters",
                vars.len(),
                store.len()
            )));
        }
        Ok(Bound {
            index: store.index.clone(),
            vars,
        })
    }

    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    /// Gradients in store order.
    pub fn grads(&self, g: &Gradients) -> Vec<Array> {
        self.vars.iter().map(|v| g.get(*v)).collect()
    }
}

/// Running batchnorm statistics by layer name.
pub type BnBank = BTreeMap<String, BnStats>;

/// Whether batchnorm layers use and update batch statistics.
pub enum BnMode<'a> {
    Train(&'a mut BnBank),
    Eval(&'a BnBank),
}

impl BnMode<'_> {
    pub fn running(&mut self, name: &str) -> Result<BnRunning<'_>> {
        let missing = || Error::Contract(format!("missing batchnorm statistics `{name}`"));
        Ok(match self {
            BnMode::Train(bank) => BnRunning::Train(bank.get_mut(name).ok_or_else(missing)?),
            BnMode::Eval(bank) => BnRunning::Eval(bank.get(name).ok_or_else(missing)?),
        })
    }

    pub fn is_train(&self) -> bool {
        matches!(self, BnMode::Train(_))
    }
}

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numeric::{Array, Gradients, Tape, Var};
use crate::scalar::Scalar;

/// Ordered collection of named parameter arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<(String, Array<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn from_entries(entries: Vec<(String, Array<T>)>) -> Result<Self> {
        let mut store = ParamStore::default();
        for (name, value) in entries {
            store.insert(name, value)?;
        }
        Ok(store)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Incompatible(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Array<T>> {
        self.index
            .get(name)
            .map(|&k| &self.entries[k].1)
            .ok_or_else(|| Error::Incompatible(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Array<T>> {
        match self.index.get(name) {
            Some(&k) => Ok(&mut self.entries[k].1),
            None => Err(Error::Incompatible(format!("missing parameter {name}"))),
        }
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn entries(&self) -> &[(String, Array<T>)] {
        &self.entries
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Array<T>> {
        self.entries.iter_mut().map(|(_, a)| a)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.entries.iter().map(|(_, a)| a.len()).sum()
    }

    /// Errors unless `other` has exactly the same names and shapes in the same order.
    pub fn check_compatible(&self, other: &Self) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Incompatible(format!(
                "{} parameter blocks vs {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for ((na, a), (nb, b)) in self.entries.iter().zip(&other.entries) {
            if na != nb || a.shape() != b.shape() {
                return Err(Error::Incompatible(format!(
                    "{na} {:?} vs {nb} {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self.entries.iter().map(|(n, a)| (n.clone(), a.cast())).collect(),
            index: self.index.clone(),
        }
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind<'s, 't>(&'s self, tape: &'t Tape<T>) -> Bound<'s, 't, T> {
        Bound {
            store: self,
            vars: self.entries.iter().map(|(_, a)| tape.leaf(a.clone())).collect(),
        }
    }

    /// Names already-recorded variables, one per parameter in store order.
    pub fn bind_vars<'s, 't>(&'s self, vars: &[Var<'t, T>]) -> Result<Bound<'s, 't, T>> {
        if vars.len() != self.entries.len() {
            return Err(Error::Incompatible(format!(
                "{} variables for {} parameters",
                vars.len(),
                self.entries.len()
            )));
        }
        for ((name, a), v) in self.entries.iter().zip(vars) {
            if a.shape() != v.shape().as_slice() {
                return Err(Error::Incompatible(format!(
                    "variable for {name} is {:?}, expected {:?}",
                    v.shape(),
                    a.shape()
                )));
            }
        }
        Ok(Bound {
            store: self,
            vars: vars.to_vec(),
        })
    }
}

/// Parameters recorded on a tape, addressable by name.
pub struct Bound<'s, 't, T> {
    store: &'s ParamStore<T>,
    vars: Vec<Var<'t, T>>,
}

impl<'s, 't, T: Scalar> Bound<'s, 't, T> {
    pub fn get(&self, name: &str) -> Result<Var<'t, T>> {
        self.store
            .position(name)
            .map(|k| self.vars[k])
            .ok_or_else(|| Error::Incompatible(format!("missing parameter {name}")))
    }

    pub fn vars(&self) -> &[Var<'t, T>] {
        &self.vars
    }

    /// Gradients for every parameter, in store order.
    pub fn gradients(&self, grads: &Gradients<T>) -> Vec<Array<T>> {
        self.vars.iter().map(|&v| grads.get(v)).collect()
    }
}

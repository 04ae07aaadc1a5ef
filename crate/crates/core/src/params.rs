//! Named, ordered parameter tensors and their binding onto a tape.

use std::collections::HashMap;

use rand::Rng;

use crate::diffcore::{DenseTensor, Gradients, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, DenseTensor)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: DenseTensor) {
        let name = name.into();
        let tensor = tensor.with_requires_grad(true);
        match self.index.get(&name) {
            Some(&i) => self.entries[i].1 = tensor,
            None => {
                self.index.insert(name.clone(), self.entries.len());
                self.entries.push((name, tensor));
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&DenseTensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn require(&self, name: &str) -> Result<&DenseTensor> {
        self.get(name)
            .ok_or_else(|| Error::Validation(format!("missing parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut DenseTensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DenseTensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut DenseTensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Registers every parameter as a gradient-receiving leaf.
    pub fn bind<'s>(&'s self, tape: &mut Tape) -> Bound<'s> {
        let vars = self.entries.iter().map(|(_, t)| tape.param(t)).collect();
        Bound { store: self, vars }
    }

    /// Wraps vars already registered for this store, in store order.
    pub fn bind_vars(&self, vars: Vec<Var>) -> Result<Bound<'_>> {
        if vars.len() != self.entries.len() {
            return Err(Error::dim(
                "bind_vars",
                format!("{} vars for {} parameters", vars.len(), self.entries.len()),
            ));
        }
        Ok(Bound { store: self, vars })
    }

    /// Xavier-uniform `[rows x cols]` matrix.
    pub fn xavier<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> DenseTensor {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let values = (0..rows * cols)
            .map(|_| rng.gen_range(-limit..limit))
            .collect();
        DenseTensor::new(&[rows, cols], values).expect("xavier: positive extents")
    }
}

/// Parameters of one store registered on one tape.
pub struct Bound<'s> {
    store: &'s ParamStore,
    vars: Vec<Var>,
}

impl Bound<'_> {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.store
            .index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Validation(format!("missing parameter '{name}'")))
    }

    /// Per-parameter gradients in store order (zeros where none flowed).
    pub fn collect_grads(&self, grads: &Gradients) -> Vec<Vec<f64>> {
        self.vars
            .iter()
            .zip(&self.store.entries)
            .map(|(&v, (_, t))| grads.get_or_zeros(v, t.len()))
            .collect()
    }
}

/// `W x + b` for `W: [out x in]`, `x: [in]`.
pub fn linear(tape: &mut Tape, weight: Var, bias: Option<Var>, x: Var) -> Result<Var> {
    let y = tape.matmul(weight, x)?;
    match bias {
        Some(b) => tape.add(y, b),
        None => Ok(y),
    }
}

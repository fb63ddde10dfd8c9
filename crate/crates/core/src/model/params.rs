//! Named parameter storage and its binding onto a tape.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Every learnable tensor of a model, addressed by name or [`ParamId`].
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Rc<Tensor>>,
    lookup: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.lookup.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        self.lookup.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(Rc::new(value));
        Ok(ParamId(self.names.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_rc(&self, id: ParamId) -> Rc<Tensor> {
        Rc::clone(&self.values[id.0])
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Rc::make_mut(&mut self.values[id.0])
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::shape(
                "set_param",
                format!(
                    "`{}` is {:?}, got {:?}",
                    self.names[id.0],
                    self.values[id.0].shape(),
                    value.shape()
                ),
            ));
        }
        self.values[id.0] = Rc::new(value);
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), &**v))
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }

    /// Total element count of parameters whose name starts with `prefix`.
    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(_, n, _)| n.starts_with(prefix))
            .map(|(_, _, t)| t.numel())
            .sum()
    }

    pub fn values(&self) -> Vec<Tensor> {
        self.values.iter().map(|v| (**v).clone()).collect()
    }
}

/// Parameter initialization context: hands out prefixed names and draws from
/// one seeded generator in construction order.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut Rng,
}

pub const INIT_STD: f64 = 0.02;

impl Init<'_> {
    pub fn trunc_normal(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| rng::trunc_normal(rng, INIT_STD));
        self.store.add(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.store.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.store.add(name, Tensor::full(shape, 1.0))
    }
}

/// A [`ParamStore`] bound to a tape. Each parameter is recorded as a leaf on
/// first use and reused afterwards, so a parameter used several times in one
/// forward pass accumulates one combined gradient.
pub struct Bound<'t> {
    tape: &'t Tape,
    store: Option<&'t ParamStore>,
    slots: RefCell<Vec<Option<Var<'t>>>>,
}

impl<'t> Bound<'t> {
    pub fn new(tape: &'t Tape, store: &'t ParamStore) -> Self {
        Bound {
            tape,
            store: Some(store),
            slots: RefCell::new(vec![None; store.len()]),
        }
    }

    /// Binds pre-recorded variables, one per parameter in store order.
    pub fn from_vars(tape: &'t Tape, vars: &[Var<'t>]) -> Self {
        Bound {
            tape,
            store: None,
            slots: RefCell::new(vars.iter().copied().map(Some).collect()),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn get(&self, id: ParamId) -> Var<'t> {
        if let Some(v) = self.slots.borrow()[id.0] {
            return v;
        }
        let store = self.store.expect("parameter missing from explicit binding");
        let v = self.tape.param((*store.get_rc(id)).clone());
        self.slots.borrow_mut()[id.0] = Some(v);
        v
    }

    /// Moves gradients of all bound parameters out of `grads`.
    pub fn collect(&self, grads: &mut Gradients) -> Vec<(ParamId, Tensor)> {
        self.slots
            .borrow()
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.and_then(|v| grads.take(v)).map(|g| (ParamId(i), g)))
            .collect()
    }
}

/// Per-parameter gradient accumulator aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct GradBuffer {
    grads: Vec<Option<Tensor>>,
}

impl GradBuffer {
    pub fn new(store: &ParamStore) -> Self {
        GradBuffer {
            grads: vec![None; store.len()],
        }
    }

    pub fn add(&mut self, id: ParamId, g: Tensor, scale: f64) -> Result<()> {
        let mut g = g;
        if scale != 1.0 {
            g.scale_in_place(scale);
        }
        match &mut self.grads[id.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    pub fn absorb(&mut self, items: Vec<(ParamId, Tensor)>, scale: f64) -> Result<()> {
        for (id, g) in items {
            self.add(id, g, scale)?;
        }
        Ok(())
    }

    /// Adds every gradient of `other` into this buffer.
    pub fn merge(&mut self, other: &GradBuffer) -> Result<()> {
        for (id, g) in other.iter() {
            self.add(id, g.clone(), 1.0)?;
        }
        Ok(())
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn global_norm(&self) -> f64 {
        self.iter().map(|(_, g)| g.sq_norm()).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.scale_in_place(s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|(_, g)| g.is_finite())
    }
}

//! Named parameter storage and its binding into a forward graph.

use std::cell::RefCell;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::tensor::{Gradients, Graph, Init, Scalar, Tensor, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Role of a stored tensor. Weights receive decoupled weight decay, biases
/// and norm gains do not, buffers are never trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    Weight,
    Bias,
    Buffer,
}

/// Declaration of a parameter: enough to create it or to find it again.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, kind: ParamKind, shape: &[usize], init: Init) -> Self {
        ParamSpec {
            name: name.into(),
            kind,
            shape: shape.to_vec(),
            init,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<F: Scalar> {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor<F>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<F: Scalar> {
    entries: Vec<ParamEntry<F>>,
    index: HashMap<String, usize>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Seed for a named parameter, independent of registration order so that
/// changing one sub-module does not reshuffle the others.
pub fn param_seed(model_seed: u64, name: &str) -> u64 {
    let mut z = model_seed ^ fnv1a(name.as_bytes());
    // splitmix64 finaliser
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        kind: ParamKind,
        tensor: Tensor<F>,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::config(format!(
                "parameter {name:?} registered twice"
            )));
        }
        let id = ParamId(self.entries.len());
        self.index.insert(name.clone(), id.0);
        self.entries.push(ParamEntry { name, kind, tensor });
        Ok(id)
    }

    /// Registers a tensor initialised from `init`, whose seed (if any) is
    /// replaced by one derived from `model_seed` and the name.
    pub fn add_init(
        &mut self,
        name: impl Into<String>,
        kind: ParamKind,
        shape: &[usize],
        init: Init,
        model_seed: u64,
    ) -> Result<ParamId> {
        let name = name.into();
        let seed = param_seed(model_seed, &name);
        let init = match init {
            Init::Uniform { lo, hi, .. } => Init::Uniform { lo, hi, seed },
            Init::Normal { mean, std, .. } => Init::Normal { mean, std, seed },
            other => other,
        };
        let t = Tensor::create(shape.to_vec(), init)?;
        self.add(name, kind, t)
    }

    pub fn register(&mut self, spec: &ParamSpec, model_seed: u64) -> Result<ParamId> {
        self.add_init(
            spec.name.clone(),
            spec.kind,
            &spec.shape,
            spec.init,
            model_seed,
        )
    }

    /// Finds a declared parameter, checking shape and kind.
    pub fn resolve(&self, spec: &ParamSpec) -> Result<ParamId> {
        let id = self
            .id(&spec.name)
            .ok_or_else(|| Error::config(format!("missing parameter {:?}", spec.name)))?;
        let e = self.entry(id);
        if e.tensor.shape() != spec.shape.as_slice() {
            return Err(Error::shape(format!(
                "{}: expected shape {:?}, found {:?}",
                spec.name,
                spec.shape,
                e.tensor.shape()
            )));
        }
        if e.kind != spec.kind {
            return Err(Error::config(format!(
                "{}: expected a {:?}, found {:?}",
                spec.name, spec.kind, e.kind
            )));
        }
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<F> {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry<F>] {
        &self.entries
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.entries[id.0].tensor
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<F>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.id(name).map(|id| &mut self.entries[id.0].tensor)
    }

    /// Overwrites the values of a named tensor, keeping its shape.
    pub fn set(&mut self, name: &str, data: Vec<F>) -> Result<()> {
        let t = self
            .by_name_mut(name)
            .ok_or_else(|| Error::config(format!("unknown parameter {name:?}")))?;
        if t.len() != data.len() {
            return Err(Error::shape(format!(
                "{name}: expected {} values, got {}",
                t.len(),
                data.len()
            )));
        }
        t.data_mut().copy_from_slice(&data);
        Ok(())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    /// Number of trainable scalars (buffers excluded).
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind != ParamKind::Buffer)
            .map(|e| e.tensor.len())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        self.entries.iter_mut().for_each(|e| e.tensor.zero_grad());
    }

    /// SHA-256 over names, shapes and little-endian values, in storage order.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for e in &self.entries {
            h.update(e.name.as_bytes());
            for &d in e.tensor.shape() {
                h.update((d as u64).to_le_bytes());
            }
            buf.clear();
            e.tensor.data().iter().for_each(|v| v.write_le(&mut buf));
            h.update(&buf);
        }
        hex::encode(h.finalize())
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.name == b.name && a.kind == b.kind && a.tensor.bitwise_eq(&b.tensor)
            })
    }
}

/// Lazily inserts parameters into a graph, as trainable leaves when the
/// parameter is in the trainable set and as constants otherwise.
pub struct Bound<'g, 's, F: Scalar> {
    graph: &'g Graph<F>,
    store: &'s ParamStore<F>,
    trainable: Option<&'s [bool]>,
    vars: RefCell<Vec<Option<Var<'g, F>>>>,
}

impl<'g, 's, F: Scalar> Bound<'g, 's, F> {
    /// `trainable[i]` selects parameter `i`; `None` freezes everything.
    pub fn new(
        graph: &'g Graph<F>,
        store: &'s ParamStore<F>,
        trainable: Option<&'s [bool]>,
    ) -> Self {
        Bound {
            graph,
            store,
            trainable,
            vars: RefCell::new(vec![None; store.len()]),
        }
    }

    pub fn graph(&self) -> &'g Graph<F> {
        self.graph
    }

    pub fn store(&self) -> &'s ParamStore<F> {
        self.store
    }

    fn is_trainable(&self, id: ParamId) -> bool {
        self.store.entry(id).kind != ParamKind::Buffer && self.trainable.is_some_and(|t| t[id.0])
    }

    pub fn var(&self, id: ParamId) -> Var<'g, F> {
        if let Some(v) = self.vars.borrow()[id.0] {
            return v;
        }
        let t = self.store.get(id);
        let v = if self.is_trainable(id) {
            self.graph.param(t.shape().to_vec(), t.data().to_vec())
        } else {
            self.graph.constant(t.shape().to_vec(), t.data().to_vec())
        }
        .expect("stored tensors have valid shapes");
        self.vars.borrow_mut()[id.0] = Some(v);
        v
    }

    /// Uses `var` for parameter `id` instead of the stored value.
    pub fn bind(&self, id: ParamId, var: Var<'g, F>) -> Result<()> {
        let t = self.store.get(id);
        if var.shape() != t.shape() {
            return Err(Error::shape(format!(
                "cannot bind {:?} to parameter {} of shape {:?}",
                var.shape(),
                self.store.entry(id).name,
                t.shape()
            )));
        }
        self.vars.borrow_mut()[id.0] = Some(var);
        Ok(())
    }

    /// Gradients of the bound trainable parameters, by parameter id.
    pub fn collect(&self, grads: &mut Gradients<F>) -> Vec<(ParamId, Vec<F>)> {
        self.vars
            .borrow()
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                if !self.is_trainable(ParamId(i)) {
                    return None;
                }
                grads.take(v.id()).map(|g| (ParamId(i), g))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_depend_on_name_not_order() {
        let mut a = ParamStore::<f64>::new();
        a.add_init(
            "x",
            ParamKind::Weight,
            &[3],
            Init::Normal {
                mean: 0.0,
                std: 1.0,
                seed: 0,
            },
            5,
        )
        .unwrap();
        a.add_init(
            "y",
            ParamKind::Weight,
            &[3],
            Init::Normal {
                mean: 0.0,
                std: 1.0,
                seed: 0,
            },
            5,
        )
        .unwrap();
        let mut b = ParamStore::<f64>::new();
        b.add_init(
            "y",
            ParamKind::Weight,
            &[3],
            Init::Normal {
                mean: 0.0,
                std: 1.0,
                seed: 0,
            },
            5,
        )
        .unwrap();
        assert!(a.by_name("y").unwrap().bitwise_eq(b.by_name("y").unwrap()));
        assert!(!a.by_name("x").unwrap().bitwise_eq(a.by_name("y").unwrap()));
        assert!(a
            .add("x", ParamKind::Bias, Tensor::zeros([1]).unwrap())
            .is_err());
    }

    #[test]
    fn bound_collects_only_trainable() {
        let mut s = ParamStore::<f64>::new();
        let w = s
            .add(
                "w",
                ParamKind::Weight,
                Tensor::new([2], vec![1.0, 2.0]).unwrap(),
            )
            .unwrap();
        let f = s
            .add(
                "f",
                ParamKind::Weight,
                Tensor::new([2], vec![3.0, 4.0]).unwrap(),
            )
            .unwrap();
        let mask = vec![true, false];
        let g = Graph::new();
        let b = Bound::new(&g, &s, Some(&mask));
        let loss = b.var(w).mul(&b.var(f)).unwrap().sum().unwrap();
        let mut grads = g.backward(&loss).unwrap();
        let got = b.collect(&mut grads);
        assert_eq!(got, vec![(w, vec![3.0, 4.0])]);
    }
}

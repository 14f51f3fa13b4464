use std::cell::RefCell;
use std::collections::HashMap;
use std::ops::Deref;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::graph::{Graph, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Named, ordered collection of trainable matrices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter. Panics on duplicate names.
    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Array2::zeros((rows, cols)))
    }

    /// Uniform(−1/√fan_in, 1/√fan_in), the usual linear-layer default.
    pub fn uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let value = Array2::from_shape_fn((rows, cols), |_| dist.sample(rng));
        self.add(name, value)
    }

    pub fn normal<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        std: f64,
        rng: &mut R,
    ) -> ParamId {
        let dist = Normal::new(0.0, std).expect("finite std");
        let value = Array2::from_shape_fn((rows, cols), |_| dist.sample(rng));
        self.add(name, value)
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Array2<f64>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Copy every parameter whose name also exists in `other` with the same shape.
    /// Returns the number of parameters copied.
    pub fn load_matching(&mut self, other: &ParamStore) -> usize {
        let mut copied = 0;
        for (name, id) in &self.index {
            if let Some(src) = other.id(name) {
                let src = other.get(src);
                if src.dim() == self.values[id.0].dim() {
                    self.values[id.0].assign(src);
                    copied += 1;
                }
            }
        }
        copied
    }
}

/// A graph bound to a parameter store. Each parameter is materialized at most
/// once per session, so gradients from repeated uses accumulate on one leaf.
pub struct Session<'a> {
    graph: Graph,
    store: &'a ParamStore,
    bound: RefCell<HashMap<ParamId, Var>>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore, graph: Graph) -> Self {
        Self {
            graph,
            store,
            bound: RefCell::new(HashMap::new()),
        }
    }

    pub fn eval(store: &'a ParamStore) -> Self {
        Self::new(store, Graph::eval())
    }

    pub fn train(store: &'a ParamStore, seed: u64) -> Self {
        Self::new(store, Graph::train(seed))
    }

    pub fn param(&self, id: ParamId) -> Var {
        if let Some(v) = self.bound.borrow().get(&id) {
            return *v;
        }
        let v = self.graph.param_leaf(id, self.store.get(id).clone());
        self.bound.borrow_mut().insert(id, v);
        v
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }
}

impl Deref for Session<'_> {
    type Target = Graph;

    fn deref(&self) -> &Graph {
        &self.graph
    }
}

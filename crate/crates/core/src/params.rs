//! Named parameter storage, per-forward binding onto a tape, SGD with
//! momentum, and NTTN checkpoints.

use std::collections::BTreeMap;
use std::fs::File;
use std::hash::{Hash, Hasher};
use std::io::{BufReader, BufWriter};
use std::path::Path;

use nt_tensor::{Gradients, Graph, NodeId, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamKind {
    /// Learned by gradient descent.
    Weight,
    /// Batch-norm running statistics; updated in training mode only.
    Buffer,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub kind: ParamKind,
    pub frozen: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            kind,
            frozen: false,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.params[id.0].frozen
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.params[id.0].frozen = frozen;
    }

    pub fn replace(&mut self, id: ParamId, value: Tensor) {
        self.params[id.0].value = value;
    }

    pub fn freeze_all(&mut self) {
        self.params.iter_mut().for_each(|p| p.frozen = true);
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Rounds every unfrozen value through `f32`, the checkpoint precision.
    /// Frozen values are never touched.
    pub fn round_to_f32(&mut self) {
        for p in self.params.iter_mut().filter(|p| !p.frozen) {
            p.value
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = *v as f32 as f64);
        }
    }

    /// Hash over names and exact bit patterns of the frozen entries.
    pub fn frozen_digest(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for p in self.params.iter().filter(|p| p.frozen) {
            p.name.hash(&mut h);
            p.value.shape().hash(&mut h);
            for v in p.value.data() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let index: Vec<IndexEntry> = self
            .params
            .iter()
            .map(|p| IndexEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                kind: p.kind,
                frozen: p.frozen,
            })
            .collect();
        serde_json::to_writer_pretty(File::create(dir.join(format!("{stem}.json")))?, &index)?;
        let mut w = BufWriter::new(File::create(dir.join(format!("{stem}.nttn")))?);
        for p in &self.params {
            p.value.write_nttn(&mut w)?;
        }
        Ok(())
    }

    /// Loads values saved by [`ParamStore::save`] into a store with the same
    /// layout; names and shapes must match entry for entry.
    pub fn load_into(&mut self, dir: &Path, stem: &str) -> Result<()> {
        let index_path = dir.join(format!("{stem}.json"));
        let index: Vec<IndexEntry> =
            serde_json::from_reader(BufReader::new(File::open(&index_path)?))?;
        if index.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "{} holds {} tensors, model expects {}",
                index_path.display(),
                index.len(),
                self.params.len()
            )));
        }
        let mut r = BufReader::new(File::open(dir.join(format!("{stem}.nttn")))?);
        for (entry, p) in index.iter().zip(self.params.iter_mut()) {
            let t = Tensor::read_nttn(&mut r)?;
            if entry.name != p.name || t.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "entry {} {:?} does not match model parameter {} {:?}",
                    entry.name,
                    t.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            p.value = t;
            p.frozen = entry.frozen;
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    shape: Vec<usize>,
    kind: ParamKind,
    frozen: bool,
}

/// A pending running-statistics update from a training-mode batch norm.
#[derive(Debug, Clone, Copy)]
pub(crate) struct BnUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub node: NodeId,
}

/// State for one forward pass: which store is read, whether training-mode
/// layers run, and which params were placed on the tape.
pub struct Forward<'s> {
    pub store: &'s ParamStore,
    pub training: bool,
    bound: BTreeMap<ParamId, NodeId>,
    pub(crate) bn_updates: Vec<BnUpdate>,
}

impl<'s> Forward<'s> {
    pub fn new(store: &'s ParamStore, training: bool) -> Self {
        Self {
            store,
            training,
            bound: BTreeMap::new(),
            bn_updates: Vec::new(),
        }
    }

    /// Places a parameter on the tape once per pass. Frozen params and
    /// buffers never require gradients.
    pub fn bind(&mut self, g: &mut Graph, id: ParamId) -> NodeId {
        if let Some(&n) = self.bound.get(&id) {
            return n;
        }
        let p = self.store.get(id);
        let learnable = self.training && p.kind == ParamKind::Weight && !p.frozen;
        let n = g.leaf(p.value.clone(), learnable);
        self.bound.insert(id, n);
        n
    }

    /// Whether the layer owning `id` should run in training mode.
    pub fn trains(&self, id: ParamId) -> bool {
        self.training && !self.store.is_frozen(id)
    }

    pub fn bound(&self) -> impl Iterator<Item = (ParamId, NodeId)> + '_ {
        self.bound.iter().map(|(&p, &n)| (p, n))
    }

    pub fn finish(self) -> PassRecord {
        PassRecord {
            bound: self.bound,
            bn_updates: self.bn_updates,
        }
    }
}

/// What a finished forward pass needs to hand to the optimizer.
#[derive(Debug, Clone, Default)]
pub struct PassRecord {
    bound: BTreeMap<ParamId, NodeId>,
    bn_updates: Vec<BnUpdate>,
}

pub const BN_MOMENTUM: f64 = 0.1;

impl PassRecord {
    pub fn node(&self, id: ParamId) -> Option<NodeId> {
        self.bound.get(&id).copied()
    }

    /// Folds batch statistics into running statistics with momentum 0.1.
    pub fn apply_bn_updates(&self, g: &Graph, store: &mut ParamStore) -> Result<()> {
        for u in &self.bn_updates {
            if store.is_frozen(u.mean) || store.is_frozen(u.var) {
                return Err(Error::FrozenMutation(format!(
                    "running statistics {}",
                    store.get(u.mean).name
                )));
            }
            let (mean, var) = g
                .batch_stats(u.node)
                .ok_or_else(|| Error::InvalidGraph("batch-norm node without batch stats".into()))?;
            for (r, b) in store.value_mut(u.mean).data_mut().iter_mut().zip(mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
            for (r, b) in store.value_mut(u.var).data_mut().iter_mut().zip(var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
        Ok(())
    }
}

/// Stochastic gradient descent with momentum and optional L2 decay.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<ParamId, Vec<f64>>,
    lr_scale: BTreeMap<ParamId, f64>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
            lr_scale: BTreeMap::new(),
        }
    }

    /// Multiplies the learning rate of `id` by `scale`.
    pub fn set_lr_scale(&mut self, id: ParamId, scale: f64) {
        self.lr_scale.insert(id, scale);
    }

    /// Applies one update to every learnable bound parameter. Touching a
    /// frozen parameter is an invariant breach.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        pass: &PassRecord,
        grads: &Gradients,
        lr: f64,
    ) -> Result<()> {
        for (&id, &node) in &pass.bound {
            let Some(grad) = grads.get(node) else {
                continue;
            };
            let p = store.get(id);
            if p.kind != ParamKind::Weight {
                continue;
            }
            if p.frozen {
                return Err(Error::FrozenMutation(p.name.clone()));
            }
            let lr = lr * self.lr_scale.get(&id).copied().unwrap_or(1.0);
            let value = store.value_mut(id).data_mut();
            let v = self
                .velocity
                .entry(id)
                .or_insert_with(|| vec![0.0; value.len()]);
            for ((w, vel), g) in value.iter_mut().zip(v.iter_mut()).zip(grad.data()) {
                let g = g + self.weight_decay * *w;
                *vel = self.momentum * *vel + g;
                *w -= lr * *vel;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_params_are_constants_on_tape() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::from_vec(vec![1.0]), ParamKind::Weight);
        let b = store.add("b", Tensor::from_vec(vec![2.0]), ParamKind::Weight);
        store.params[a.0].frozen = true;
        let mut g = Graph::new();
        let mut fwd = Forward::new(&store, true);
        let na = fwd.bind(&mut g, a);
        let nb = fwd.bind(&mut g, b);
        assert!(!g.requires_grad(na));
        assert!(g.requires_grad(nb));
        assert_eq!(fwd.bind(&mut g, b), nb);
    }

    #[test]
    fn sgd_momentum_update() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::from_vec(vec![1.0]), ParamKind::Weight);
        let mut opt = Sgd::new(0.9, 0.0);
        for expected in [1.0 - 0.1 * 2.0, 0.8 - 0.1 * (0.9 * 2.0 + 1.6)] {
            let mut g = Graph::new();
            let mut fwd = Forward::new(&store, true);
            let n = fwd.bind(&mut g, w);
            let l = g.sum_of_squares(n).unwrap();
            let grads = g.backward(l).unwrap();
            let pass = fwd.finish();
            opt.step(&mut store, &pass, &grads, 0.1).unwrap();
            assert!((store.value(w).data()[0] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_round_trip_and_drift() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::new();
        store.add("x", Tensor::from_vec(vec![0.25, -1.5]), ParamKind::Weight);
        store.add("rm", Tensor::from_vec(vec![3.0]), ParamKind::Buffer);
        store.save(dir.path(), "weights").unwrap();

        let mut other = store.clone();
        other.value_mut(ParamId(0)).data_mut()[0] = 9.0;
        other.load_into(dir.path(), "weights").unwrap();
        assert_eq!(other.value(ParamId(0)).data(), &[0.25, -1.5]);

        let mut drifted = ParamStore::new();
        drifted.add("x", Tensor::from_vec(vec![0.0; 3]), ParamKind::Weight);
        drifted.add("rm", Tensor::from_vec(vec![0.0]), ParamKind::Buffer);
        assert!(matches!(
            drifted.load_into(dir.path(), "weights"),
            Err(Error::Checkpoint(_))
        ));
    }
}

//! Named parameter storage and low-rank reparameterized linear maps.
//!
//! Every learnable tensor lives in a [`ParamStore`] under a unique dotted
//! name. Layers hold [`ParamId`]s and are evaluated inside a [`Session`],
//! which binds each parameter onto a [`Graph`] the first time it is used.
//! Frozen parameters are bound as constants, so they never receive
//! gradients.

use std::collections::BTreeMap;
use std::hash::{DefaultHasher, Hasher};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io_util;
use crate::numerics::{tensor_file, Graph, NumericsError, Rng, Tensor, Var};

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("parameter {0:?} already exists")]
    Duplicate(String),
    #[error("unknown parameter {0:?}")]
    Unknown(String),
    #[error("shape mismatch for {name}: expected {expected:?}, got {got:?}")]
    Shape { name: String, expected: Vec<usize>, got: Vec<usize> },
    #[error("layer has no adapter")]
    NoAdapter,
    #[error("invalid rank {0}")]
    Rank(usize),
    #[error("checkpoint manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
struct ParamEntry {
    name: String,
    value: Tensor,
    trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<ParamId, ParamError> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(ParamError::Duplicate(name));
        }
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, value, trainable });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    /// Replaces a value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<(), ParamError> {
        let e = &mut self.entries[id.0];
        if e.value.dims() != value.dims() {
            return Err(ParamError::Shape {
                name: e.name.clone(),
                expected: e.value.dims().to_vec(),
                got: value.dims().to_vec(),
            });
        }
        e.value = value;
        Ok(())
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.is_trainable(id)).collect()
    }

    /// Hash of the bit patterns of all parameters selected by `filter`, in
    /// name order.
    pub fn digest(&self, filter: impl Fn(ParamId) -> bool) -> u64 {
        let mut h = DefaultHasher::new();
        for (name, &id) in &self.by_name {
            if !filter(id) {
                continue;
            }
            h.write(name.as_bytes());
            for v in self.get(id).data() {
                h.write_u64(v.to_bits());
            }
        }
        h.finish()
    }

    /// Writes every parameter as `<name>.pvtd` plus `manifest.json` into a
    /// fresh directory at `dir` (replaced atomically). `extra` is merged into
    /// the manifest's top level.
    pub fn save(&self, dir: &Path, extra: serde_json::Map<String, serde_json::Value>) -> Result<(), ParamError> {
        let mut params = Vec::new();
        for (name, &id) in &self.by_name {
            params.push(serde_json::json!({
                "file": format!("{name}.pvtd"),
                "name": name,
                "shape": self.get(id).dims(),
                "trainable": self.is_trainable(id),
            }));
        }
        let mut manifest = extra;
        manifest.insert("params".into(), serde_json::Value::Array(params));
        let text = serde_json::to_string_pretty(&serde_json::Value::Object(manifest))
            .map_err(|e| ParamError::Manifest(e.to_string()))?;
        io_util::write_dir_atomic(dir, |tmp| {
            for (name, &id) in &self.by_name {
                let bytes = tensor_file::encode(self.get(id)).map_err(std::io::Error::other)?;
                std::fs::write(tmp.join(format!("{name}.pvtd")), bytes)?;
            }
            std::fs::write(tmp.join("manifest.json"), format!("{text}\n"))
        })?;
        Ok(())
    }

    /// Reads a checkpoint written by [`ParamStore::save`].
    pub fn load(dir: &Path) -> Result<(Self, serde_json::Value), ParamError> {
        let text = std::fs::read_to_string(dir.join("manifest.json"))?;
        let manifest: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| ParamError::Manifest(e.to_string()))?;
        let params = manifest
            .get("params")
            .and_then(|p| p.as_array())
            .ok_or_else(|| ParamError::Manifest("missing params list".into()))?;
        let mut store = ParamStore::new();
        for p in params {
            let entry: ManifestParam =
                serde_json::from_value(p.clone()).map_err(|e| ParamError::Manifest(e.to_string()))?;
            let value = tensor_file::load(&dir.join(&entry.file))?;
            if value.dims() != entry.shape.as_slice() {
                return Err(ParamError::Shape { name: entry.name, expected: entry.shape, got: value.dims().to_vec() });
            }
            store.add(entry.name, value, entry.trainable)?;
        }
        Ok((store, manifest))
    }

    /// Overwrites values of same-named parameters from `other`; every
    /// parameter of `self` must be present there with the same shape.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<(), ParamError> {
        for i in 0..self.entries.len() {
            let name = self.entries[i].name.clone();
            let src = other.id(&name).ok_or_else(|| ParamError::Unknown(name.clone()))?;
            self.set(ParamId(i), other.get(src).clone())?;
        }
        Ok(())
    }
}

#[derive(Deserialize)]
struct ManifestParam {
    name: String,
    file: String,
    shape: Vec<usize>,
    trainable: bool,
}

/// Evaluation context binding store parameters onto a graph.
pub struct Session<'s> {
    pub graph: Graph,
    store: &'s ParamStore,
    bound: Vec<Option<Var>>,
    track_grads: bool,
}

impl<'s> Session<'s> {
    /// Session whose trainable parameters require gradients.
    pub fn training(store: &'s ParamStore) -> Self {
        Self { graph: Graph::new(), store, bound: vec![None; store.len()], track_grads: true }
    }

    /// Session where every parameter is a constant.
    pub fn inference(store: &'s ParamStore) -> Self {
        Self { graph: Graph::new(), store, bound: vec![None; store.len()], track_grads: false }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var, NumericsError> {
        if let Some(v) = self.bound[id.0] {
            return Ok(v);
        }
        let requires = self.track_grads && self.store.is_trainable(id);
        let v = self.graph.leaf(self.store.get(id).clone(), requires)?;
        self.bound[id.0] = Some(v);
        Ok(v)
    }

    pub fn input(&mut self, value: Tensor) -> Result<Var, NumericsError> {
        self.graph.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.graph.value(v)
    }

    /// Gradients of `loss` for every bound trainable parameter.
    pub fn param_grads(&self, loss: Var) -> Result<Vec<(ParamId, Tensor)>, NumericsError> {
        let grads = self.graph.backward(loss)?;
        let mut out = Vec::new();
        for (i, slot) in self.bound.iter().enumerate() {
            if let Some(v) = slot {
                if self.graph.requires_grad(*v) {
                    let g = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(self.graph.value(*v).dims()));
                    out.push((ParamId(i), g));
                }
            }
        }
        Ok(out)
    }
}

/// Low-rank delta `scale · up · down`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub down: ParamId,
    pub up: ParamId,
    pub rank: usize,
    pub scale: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self { rank: 8, alpha: 16.0 }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// `y = x Wᵀ + b + scale · (x downᵀ) upᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReparamLinear {
    name: String,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub adapter: Option<LoraAdapter>,
    d_in: usize,
    d_out: usize,
}

impl ReparamLinear {
    /// Random base weight `N(0, 1/d_in)`, zero bias.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        frozen: bool,
        rng: &mut Rng,
    ) -> Result<Self, ParamError> {
        let w = rng.normal_tensor(&[d_out, d_in], 1.0 / (d_in as f64).sqrt());
        let b = bias.then(|| Tensor::zeros(&[d_out]));
        Self::from_weights(store, name, w, b, frozen)
    }

    pub fn from_weights(
        store: &mut ParamStore,
        name: &str,
        weight: Tensor,
        bias: Option<Tensor>,
        frozen: bool,
    ) -> Result<Self, ParamError> {
        if weight.dims().len() != 2 {
            return Err(ParamError::Shape { name: name.into(), expected: vec![0, 0], got: weight.dims().to_vec() });
        }
        let (d_out, d_in) = (weight.dims()[0], weight.dims()[1]);
        if let Some(b) = &bias {
            if b.dims() != [d_out] {
                return Err(ParamError::Shape { name: format!("{name}.bias"), expected: vec![d_out], got: b.dims().to_vec() });
            }
        }
        let weight = store.add(format!("{name}.weight"), weight, !frozen)?;
        let bias = match bias {
            Some(b) => Some(store.add(format!("{name}.bias"), b, !frozen)?),
            None => None,
        };
        Ok(Self { name: name.to_string(), weight, bias, adapter: None, d_in, d_out })
    }

    /// All-zero weight and bias, trainable.
    pub fn zeros(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self, ParamError> {
        Self::from_weights(store, name, Tensor::zeros(&[d_out, d_in]), Some(Tensor::zeros(&[d_out])), false)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn is_frozen(&self, store: &ParamStore) -> bool {
        !store.is_trainable(self.weight)
    }

    /// Deep copy of the base weights under a new name, without adapter.
    pub fn copy_base(&self, store: &mut ParamStore, name: &str, frozen: bool) -> Result<Self, ParamError> {
        let w = store.get(self.weight).clone();
        let b = self.bias.map(|b| store.get(b).clone());
        Self::from_weights(store, name, w, b, frozen)
    }

    /// Attaches a trainable adapter: `down ~ N(0, 1/d_in)`, `up = 0`.
    pub fn attach_adapter(&mut self, store: &mut ParamStore, cfg: LoraConfig, rng: &mut Rng) -> Result<(), ParamError> {
        if cfg.rank == 0 {
            return Err(ParamError::Rank(0));
        }
        let down = rng.normal_tensor(&[cfg.rank, self.d_in], 1.0 / (self.d_in as f64).sqrt());
        let up = Tensor::zeros(&[self.d_out, cfg.rank]);
        self.set_adapter(store, down, up, cfg.scale())
    }

    pub fn set_adapter(&mut self, store: &mut ParamStore, down: Tensor, up: Tensor, scale: f64) -> Result<(), ParamError> {
        let rank = down.rows();
        if rank == 0 {
            return Err(ParamError::Rank(0));
        }
        if down.dims() != [rank, self.d_in] || up.dims() != [self.d_out, rank] {
            return Err(ParamError::Shape {
                name: format!("{}.lora", self.name),
                expected: vec![rank, self.d_in, self.d_out, rank],
                got: [down.dims(), up.dims()].concat(),
            });
        }
        let down = store.add(format!("{}.lora_down", self.name), down, true)?;
        let up = store.add(format!("{}.lora_up", self.name), up, true)?;
        self.adapter = Some(LoraAdapter { down, up, rank, scale });
        Ok(())
    }

    pub fn forward(&self, sess: &mut Session, x: Var) -> Result<Var, NumericsError> {
        let w = sess.param(self.weight)?;
        let mut y = sess.graph.matmul_nt(x, w)?;
        if let Some(b) = self.bias {
            let b = sess.param(b)?;
            y = sess.graph.add_row(y, b)?;
        }
        if let Some(a) = &self.adapter {
            let down = sess.param(a.down)?;
            let up = sess.param(a.up)?;
            let h = sess.graph.matmul_nt(x, down)?;
            let d = sess.graph.matmul_nt(h, up)?;
            let d = sess.graph.scale(d, a.scale)?;
            y = sess.graph.add(y, d)?;
        }
        Ok(y)
    }

    /// Forward pass on plain tensors (rows of `x` are inputs).
    pub fn forward_tensor(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor, NumericsError> {
        if x.cols() != self.d_in {
            return Err(NumericsError::Shape { op: "reparam_linear", lhs: x.dims().to_vec(), rhs: vec![self.d_out, self.d_in] });
        }
        let mut sess = Session::inference(store);
        let xv = sess.input(x.reshape(&[x.rows(), x.cols()])?)?;
        let y = self.forward(&mut sess, xv)?;
        Ok(sess.value(y).clone())
    }

    /// New adapter-free layer with `W + scale · up · down` as its base.
    pub fn merge(&self, store: &mut ParamStore, name: &str) -> Result<Self, ParamError> {
        let a = self.adapter.as_ref().ok_or(ParamError::NoAdapter)?;
        let delta = store.get(a.up).matmul(store.get(a.down))?.scale(a.scale)?;
        let merged = store.get(self.weight).add(&delta)?;
        let bias = self.bias.map(|b| store.get(b).clone());
        let frozen = self.is_frozen(store);
        Self::from_weights(store, name, merged, bias, frozen)
    }

    pub fn adapter_summary(&self) -> Option<serde_json::Value> {
        self.adapter.as_ref().map(|a| {
            serde_json::json!({ "layer": self.name, "rank": a.rank, "scale": a.scale })
        })
    }
}

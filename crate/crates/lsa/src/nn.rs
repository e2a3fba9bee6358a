//! Named parameter sets, initialization, AdamW, and parameter blobs for
//! checkpointing.

use base64::Engine;
use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LsaError, Result};
use crate::graph::{Graph, Var};

/// Ordered collection of named tensors. Order is construction order and is
/// part of the determinism contract (gradient reduction, hashing, Adam state
/// all follow it).
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<ArrayD<f64>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        let i = self.index_of(name);
        &self.values[i]
    }

    pub fn value_at(&self, i: usize) -> &ArrayD<f64> {
        &self.values[i]
    }

    pub fn value_at_mut(&mut self, i: usize) -> &mut ArrayD<f64> {
        &mut self.values[i]
    }

    pub fn name_at(&self, i: usize) -> &str {
        &self.names[i]
    }

    fn index_of(&self, name: &str) -> usize {
        self.names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter())
    }

    /// Register every parameter as a graph leaf, in order.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        let vars = self
            .values
            .iter()
            .map(|v| g.leaf(v.clone(), trainable))
            .collect();
        BoundParams {
            names: self.names.clone(),
            vars,
        }
    }

    /// SHA-256 over names and little-endian payloads; stable identity used by
    /// the freezing-contract checks.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, value) in self.iter() {
            hasher.update(name.as_bytes());
            hasher.update([0u8]);
            for &v in value.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        format!("{:x}", hasher.finalize())
    }

    pub fn to_blobs(&self) -> Vec<ParamBlob> {
        self.iter()
            .map(|(name, value)| ParamBlob::encode(name, value))
            .collect()
    }

    pub fn from_blobs(blobs: &[ParamBlob]) -> Result<Self> {
        let mut set = ParamSet::new();
        for blob in blobs {
            set.add(blob.name.clone(), blob.decode()?);
        }
        Ok(set)
    }
}

/// Parameter leaves bound into one graph.
pub struct BoundParams {
    names: Vec<String>,
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Var {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Serialized tensor: shape plus base64 little-endian f64 payload.
/// Round-trips bit-exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamBlob {
    pub name: String,
    pub shape: Vec<usize>,
    pub data_b64: String,
}

impl ParamBlob {
    pub fn encode(name: &str, value: &ArrayD<f64>) -> Self {
        let mut bytes = Vec::with_capacity(value.len() * 8);
        for &v in value.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        ParamBlob {
            name: name.to_string(),
            shape: value.shape().to_vec(),
            data_b64: base64::engine::general_purpose::STANDARD.encode(&bytes),
        }
    }

    pub fn decode(&self) -> Result<ArrayD<f64>> {
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(&self.data_b64)
            .map_err(|e| LsaError::malformed(&self.name, e.to_string()))?;
        let count: usize = self.shape.iter().product();
        if bytes.len() != count * 8 {
            return Err(LsaError::malformed(
                &self.name,
                format!("blob has {} bytes for {} elements", bytes.len(), count),
            ));
        }
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        ArrayD::from_shape_vec(IxDyn(&self.shape), data)
            .map_err(|e| LsaError::malformed(&self.name, e.to_string()))
    }
}

/// Seeded normal init scaled by fan-in.
pub struct Initializer {
    rng: ChaCha12Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha12Rng::seed_from_u64(seed),
        }
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            z * std
        })
    }

    pub fn conv(&mut self, cout: usize, cin: usize, k: usize) -> ArrayD<f64> {
        let std = 1.0 / ((cin * k * k) as f64).sqrt();
        self.normal(&[cout, cin, k, k], std)
    }

    pub fn linear(&mut self, out: usize, inp: usize) -> ArrayD<f64> {
        let std = 1.0 / (inp as f64).sqrt();
        self.normal(&[out, inp], std)
    }

    pub fn zeros(&mut self, shape: &[usize]) -> ArrayD<f64> {
        ArrayD::zeros(IxDyn(shape))
    }
}

/// AdamW: Adam moments plus decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
    names: Vec<String>,
}

/// Serializable AdamW snapshot for checkpoints.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamWState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<ParamBlob>,
    pub v: Vec<ParamBlob>,
}

impl AdamW {
    pub fn new(learning_rate: f64, weight_decay: f64, params: &ParamSet) -> Self {
        let zeros: Vec<ArrayD<f64>> = params
            .iter()
            .map(|(_, value)| ArrayD::zeros(IxDyn(value.shape())))
            .collect();
        AdamW {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
            names: params.iter().map(|(n, _)| n.to_string()).collect(),
        }
    }

    /// Apply one update. `grads` must align with `params` order.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[ArrayD<f64>]) {
        assert_eq!(grads.len(), params.len(), "gradient count");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = &grads[i];
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            m.zip_mut_with(g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            v.zip_mut_with(g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let p = params.value_at_mut(i);
            let lr = self.learning_rate;
            let (eps, wd) = (self.eps, self.weight_decay);
            ndarray::Zip::from(&mut *p)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| {
                    let mh = m / bc1;
                    let vh = v / bc2;
                    *p -= lr * (mh / (vh.sqrt() + eps) + wd * *p);
                });
        }
    }

    pub fn to_state(&self) -> AdamWState {
        AdamWState {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            step: self.step,
            m: self
                .names
                .iter()
                .zip(&self.m)
                .map(|(n, t)| ParamBlob::encode(n, t))
                .collect(),
            v: self
                .names
                .iter()
                .zip(&self.v)
                .map(|(n, t)| ParamBlob::encode(n, t))
                .collect(),
        }
    }

    pub fn from_state(state: &AdamWState) -> Result<Self> {
        let decode = |blobs: &[ParamBlob]| -> Result<Vec<ArrayD<f64>>> {
            blobs.iter().map(|b| b.decode()).collect()
        };
        Ok(AdamW {
            learning_rate: state.learning_rate,
            beta1: state.beta1,
            beta2: state.beta2,
            eps: state.eps,
            weight_decay: state.weight_decay,
            step: state.step,
            m: decode(&state.m)?,
            v: decode(&state.v)?,
            names: state.m.iter().map(|b| b.name.clone()).collect(),
        })
    }
}

/// Clip a gradient list to a global L2 norm. Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [ArrayD<f64>], max_norm: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|v| v * scale);
        }
    }
    norm
}

use crate::error::{arg_err, Result};
use crate::tensor::{ConvSpec, Graph, Real, Tensor, Var};
use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};
use std::collections::HashMap;

/// Ordered registry of named learnable tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    tensors: IndexMap<String, Tensor<T>>,
}

impl<T: Real> Default for ModelParams<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ModelParams<T> {
    pub fn new() -> Self {
        ModelParams { tensors: IndexMap::new() }
    }

    pub fn from_map(tensors: IndexMap<String, Tensor<T>>) -> Self {
        ModelParams { tensors }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| arg_err("model params", format!("no parameter named {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn as_map(&self) -> &IndexMap<String, Tensor<T>> {
        &self.tensors
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// SHA-256 over names, shapes and little-endian f64 values, in registry order.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

fn name_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a keeps each tensor's stream independent of which other
    // parameters exist, so toggled models share initial values by name.
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Scaled-normal fan-in initialization, std = gain / sqrt(fan_in).
pub(crate) fn he_normal<T: Real>(shape: [usize; 4], gain: f64, seed: u64, name: &str) -> Tensor<T> {
    let fan_in = (shape[1] * shape[2] * shape[3]).max(1) as f64;
    let std = gain / fan_in.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, name));
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            T::from_f64_lossy(z * std)
        })
        .collect();
    Tensor::from_vec(shape, data).expect("shape matches")
}

/// Registry builder used while constructing a network.
pub(crate) struct ParamInit<T> {
    pub params: ModelParams<T>,
    pub seed: u64,
}

impl<T: Real> ParamInit<T> {
    pub fn new(seed: u64) -> Self {
        ParamInit { params: ModelParams::new(), seed }
    }

    pub fn conv(&mut self, prefix: &str, in_c: usize, spec: &ConvSpec) {
        let (kh, kw) = spec.kernel;
        let wname = format!("{prefix}.weight");
        let w = he_normal([spec.out_channels, in_c, kh, kw], std::f64::consts::SQRT_2, self.seed, &wname);
        self.params.insert(wname, w);
        self.params.insert(format!("{prefix}.bias"), Tensor::zeros([1, spec.out_channels, 1, 1]));
    }

    pub fn norm(&mut self, prefix: &str, c: usize) {
        self.norm_with_gain(prefix, c, 1.0);
    }

    pub fn norm_with_gain(&mut self, prefix: &str, c: usize, gain: f64) {
        self.params.insert(format!("{prefix}.gain"), Tensor::full([1, c, 1, 1], T::from_f64_lossy(gain)));
        self.params.insert(format!("{prefix}.bias"), Tensor::zeros([1, c, 1, 1]));
    }

    /// Multiplies an already registered tensor by `k`.
    pub fn scale(&mut self, name: &str, k: f64) {
        if let Some(t) = self.params.get_mut(name) {
            *t = t.map(|v| v * T::from_f64_lossy(k));
        }
    }
}

/// Binds registry tensors into a graph on first use, either as trainable
/// parameters or as constants. A scope belongs to a single graph.
pub struct ParamScope<'a, T: Real> {
    params: &'a ModelParams<T>,
    trainable: bool,
    bound: HashMap<String, Var>,
}

impl<'a, T: Real> ParamScope<'a, T> {
    pub fn trainable(params: &'a ModelParams<T>) -> Self {
        ParamScope { params, trainable: true, bound: HashMap::new() }
    }

    pub fn frozen(params: &'a ModelParams<T>) -> Self {
        ParamScope { params, trainable: false, bound: HashMap::new() }
    }

    pub fn var(&mut self, g: &mut Graph<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.params.get(name)?.clone();
        let v = if self.trainable { g.param(name, t)? } else { g.constant(t)? };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn params(&self) -> &ModelParams<T> {
        self.params
    }
}

pub(crate) fn conv<T: Real>(
    g: &mut Graph<T>,
    scope: &mut ParamScope<'_, T>,
    prefix: &str,
    x: Var,
    spec: ConvSpec,
) -> Result<Var> {
    let w = scope.var(g, &format!("{prefix}.weight"))?;
    let b = scope.var(g, &format!("{prefix}.bias"))?;
    g.conv2d(x, w, Some(b), spec)
}

pub(crate) fn norm<T: Real>(
    g: &mut Graph<T>,
    scope: &mut ParamScope<'_, T>,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let gain = scope.var(g, &format!("{prefix}.gain"))?;
    let bias = scope.var(g, &format!("{prefix}.bias"))?;
    g.instance_norm(x, gain, bias, T::from_f64_lossy(1e-5))
}

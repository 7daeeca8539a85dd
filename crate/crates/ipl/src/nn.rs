//! Parameterized function approximators: MLP specs, named parameter sets,
//! Glorot initialization, checkpoint persistence, target copies and Adam.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use base64::Engine;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{AdError, Graph, Tensor};

#[derive(Debug, Error)]
pub enum NnError {
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error("invalid spec: {0}")]
    BadSpec(String),
    #[error("parameter set mismatch: {0}")]
    ParamMismatch(String),
    #[error("checkpoint spec-hash mismatch: file {file} vs expected {expected}")]
    HashMismatch { file: String, expected: String },
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGrad(String),
}

pub type Result<T> = std::result::Result<T, NnError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

/// Architecture of a feed-forward network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Layer widths including input and output, e.g. `[4, 64, 64, 2]`.
    pub widths: Vec<usize>,
    pub hidden: Activation,
    pub output: Activation,
    pub layer_norm: bool,
    /// Probability of dropping a unit of the last hidden layer; masks are
    /// supplied externally so forward passes stay reproducible.
    pub dropout_p: f64,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, hidden: Activation, output: Activation) -> Result<Self> {
        let spec = MlpSpec { widths, hidden, output, layer_norm: false, dropout_p: 0.0 };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_layer_norm(mut self, on: bool) -> Self {
        self.layer_norm = on;
        self
    }

    pub fn with_dropout(mut self, p: f64) -> Result<Self> {
        self.dropout_p = p;
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(NnError::BadSpec("need at least input and output widths".into()));
        }
        if self.widths.iter().any(|w| *w == 0) {
            return Err(NnError::BadSpec("zero layer width".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(NnError::BadSpec(format!("dropout p {} not in [0, 1)", self.dropout_p)));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    /// Width of the last hidden layer (the one a dropout mask applies to).
    pub fn last_hidden(&self) -> usize {
        self.widths[self.widths.len() - 2]
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        for l in 0..self.widths.len() - 1 {
            n += self.widths[l] * self.widths[l + 1] + self.widths[l + 1];
            if self.layer_norm && l + 2 < self.widths.len() {
                n += 2 * self.widths[l + 1];
            }
        }
        n
    }
}

/// Digest identifying the spec a parameter set was generated from.
pub fn spec_hash<S: Serialize>(spec: &S) -> String {
    let doc = serde_json::to_string(spec).expect("spec serializes");
    let mut h = Sha256::new();
    h.update(doc.as_bytes());
    let out = h.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

/// Named map of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
    spec_hash: String,
}

impl ParamSet {
    pub fn new(spec_hash: String) -> Self {
        ParamSet { tensors: BTreeMap::new(), spec_hash }
    }

    pub fn spec_hash(&self) -> &str {
        &self.spec_hash
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    /// Concatenate all parameters into one vector, in name order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.numel());
        for t in self.tensors.values() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Rebuild a set with this set's names/shapes from a flat vector.
    pub fn unflatten(&self, flat: &[f64]) -> Result<ParamSet> {
        if flat.len() != self.numel() {
            return Err(NnError::ParamMismatch(format!(
                "flat length {} vs {} parameters",
                flat.len(),
                self.numel()
            )));
        }
        let mut out = ParamSet::new(self.spec_hash.clone());
        let mut off = 0;
        for (name, t) in &self.tensors {
            let n = t.numel();
            out.insert(name.clone(), Tensor::new(t.shape().to_vec(), flat[off..off + n].to_vec())?);
            off += n;
        }
        Ok(out)
    }

    /// Overwrite this set's values with `source`'s; the name and shape sets
    /// must match exactly.
    pub fn hard_sync(&mut self, source: &ParamSet) -> Result<()> {
        if self.tensors.len() != source.tensors.len() {
            return Err(NnError::ParamMismatch("different parameter counts".into()));
        }
        for (name, t) in &source.tensors {
            match self.tensors.get(name) {
                Some(mine) if mine.shape() == t.shape() => {}
                _ => return Err(NnError::ParamMismatch(format!("name/shape mismatch at {name}"))),
            }
        }
        for (name, t) in &source.tensors {
            self.tensors.insert(name.clone(), t.clone());
        }
        Ok(())
    }
}

fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Initialize an MLP's weights into `ps` under `prefix` (e.g. `"embed/"`).
/// Weights are Glorot-uniform, biases zero, layer-norm gains one.
pub fn init_mlp_into(ps: &mut ParamSet, prefix: &str, spec: &MlpSpec, rng: &mut ChaCha8Rng) {
    for l in 0..spec.widths.len() - 1 {
        let (fan_in, fan_out) = (spec.widths[l], spec.widths[l + 1]);
        let bound = glorot_bound(fan_in, fan_out);
        let w: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
        ps.insert(format!("{prefix}W{l}"), Tensor::new(vec![fan_in, fan_out], w).unwrap());
        ps.insert(format!("{prefix}b{l}"), Tensor::vector(vec![0.0; fan_out]));
        if spec.layer_norm && l + 2 < spec.widths.len() {
            ps.insert(format!("{prefix}ln_g{l}"), Tensor::vector(vec![1.0; fan_out]));
            ps.insert(format!("{prefix}ln_b{l}"), Tensor::vector(vec![0.0; fan_out]));
        }
    }
}

/// Fresh parameter set for a single MLP; deterministic in `seed`.
pub fn init_params(spec: &MlpSpec, seed: u64) -> ParamSet {
    let mut ps = ParamSet::new(spec_hash(spec));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init_mlp_into(&mut ps, "", spec, &mut rng);
    ps
}

/// Parameter tensors registered on a graph, ready for forward passes.
pub struct BoundParams {
    tensors: BTreeMap<String, Tensor>,
}

impl BoundParams {
    /// Wrap already-registered tensors (e.g. noise-perturbed parameters) so
    /// they can drive a forward pass.
    pub fn from_tensors(tensors: BTreeMap<String, Tensor>) -> Self {
        BoundParams { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }
}

/// Register every parameter as a differentiable leaf.
pub fn bind(ps: &ParamSet, g: &mut Graph) -> BoundParams {
    let tensors = ps.iter().map(|(name, t)| (name.clone(), g.leaf(t))).collect();
    BoundParams { tensors }
}

/// Forward pass through the network stored under `prefix` in `bound`.
///
/// When `mask` is given it multiplies the last hidden layer elementwise
/// before the output affine layer. Layer norm, when enabled, standardizes
/// each hidden pre-activation.
pub fn mlp_forward_prefixed(
    g: &mut Graph,
    bound: &BoundParams,
    prefix: &str,
    spec: &MlpSpec,
    input: &Tensor,
    mask: Option<&Tensor>,
) -> Result<Tensor> {
    let missing = |n: String| NnError::ParamMismatch(format!("missing parameter {n}"));
    let mut h = input.clone();
    let layers = spec.widths.len() - 1;
    for l in 0..layers {
        let w = bound.get(&format!("{prefix}W{l}")).ok_or_else(|| missing(format!("{prefix}W{l}")))?;
        let b = bound.get(&format!("{prefix}b{l}")).ok_or_else(|| missing(format!("{prefix}b{l}")))?;
        let z = g.matmul(&h, w)?;
        let mut z = g.add(&z, b)?;
        if l + 1 < layers {
            if spec.layer_norm {
                let gain = bound.get(&format!("{prefix}ln_g{l}")).ok_or_else(|| missing(format!("{prefix}ln_g{l}")))?;
                let beta = bound.get(&format!("{prefix}ln_b{l}")).ok_or_else(|| missing(format!("{prefix}ln_b{l}")))?;
                z = g.layer_norm(&z, gain, beta)?;
            }
            h = match spec.hidden {
                Activation::Relu => g.relu(&z)?,
                Activation::Tanh => g.tanh(&z)?,
                Activation::Identity => z,
            };
            if l + 2 == layers {
                if let Some(m) = mask {
                    h = g.mask_mul(&h, m)?;
                }
            }
        } else {
            h = match spec.output {
                Activation::Tanh => g.tanh(&z)?,
                Activation::Identity | Activation::Relu => z,
            };
        }
    }
    Ok(h)
}

/// Forward pass for a standalone MLP parameter set.
pub fn mlp_forward(
    g: &mut Graph,
    ps: &ParamSet,
    spec: &MlpSpec,
    input: &Tensor,
    mask: Option<&Tensor>,
) -> Result<Tensor> {
    let bound = bind(ps, g);
    mlp_forward_prefixed(g, &bound, "", spec, input, mask)
}

#[derive(Serialize, Deserialize)]
struct CheckpointTensor {
    shape: Vec<usize>,
    data_b64: String,
}

#[derive(Serialize, Deserialize)]
struct CheckpointDoc {
    spec_hash: String,
    tensors: BTreeMap<String, CheckpointTensor>,
}

/// Write a value-exact checkpoint: JSON with base64 little-endian IEEE-754
/// doubles per tensor.
pub fn save_checkpoint(ps: &ParamSet, path: &Path) -> Result<()> {
    let engine = base64::engine::general_purpose::STANDARD;
    let tensors = ps
        .iter()
        .map(|(name, t)| {
            let mut bytes = Vec::with_capacity(t.numel() * 8);
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            (name.clone(), CheckpointTensor { shape: t.shape().to_vec(), data_b64: engine.encode(&bytes) })
        })
        .collect();
    let doc = CheckpointDoc { spec_hash: ps.spec_hash().to_string(), tensors };
    let mut f = std::fs::File::create(path)?;
    f.write_all(serde_json::to_string_pretty(&doc).expect("checkpoint serializes").as_bytes())?;
    Ok(())
}

/// Load a checkpoint, verifying its spec-hash against `expected_hash` when given.
pub fn load_checkpoint(path: &Path, expected_hash: Option<&str>) -> Result<ParamSet> {
    let text = std::fs::read_to_string(path)?;
    let doc: CheckpointDoc = serde_json::from_str(&text).map_err(|e| NnError::Format(e.to_string()))?;
    if let Some(expected) = expected_hash {
        if doc.spec_hash != expected {
            return Err(NnError::HashMismatch { file: doc.spec_hash, expected: expected.to_string() });
        }
    }
    let engine = base64::engine::general_purpose::STANDARD;
    let mut ps = ParamSet::new(doc.spec_hash);
    for (name, ct) in doc.tensors {
        let bytes = engine.decode(&ct.data_b64).map_err(|e| NnError::Format(e.to_string()))?;
        if bytes.len() % 8 != 0 {
            return Err(NnError::Format(format!("tensor {name}: byte length not a multiple of 8")));
        }
        let data: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        ps.insert(name, Tensor::new(ct.shape, data)?);
    }
    Ok(ps)
}

/// Gradients keyed by parameter name.
pub type NamedGrads = BTreeMap<String, Tensor>;

/// Collect gradients for every parameter in `ps` from a backward pass over
/// the bound tensors.
pub fn grads_by_name(bound: &BoundParams, grads: &crate::autodiff::GradientMap) -> Result<NamedGrads> {
    let mut out = NamedGrads::new();
    for (name, t) in bound.iter() {
        out.insert(name.clone(), grads.grad(t)?);
    }
    Ok(out)
}

/// Per-parameter Adam moments.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        AdamState { step: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: BTreeMap::new(), v: BTreeMap::new() }
    }
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new()
    }
}

/// One Adam step. Tensors whose gradient is entirely zero are left untouched
/// (lazy variant), so a zero gradient never moves parameters.
pub fn adam_step(params: &mut ParamSet, grads: &NamedGrads, state: &mut AdamState, lr: f64) -> Result<()> {
    state.step += 1;
    let t = state.step;
    let bc1 = 1.0 - state.beta1.powi(t as i32);
    let bc2 = 1.0 - state.beta2.powi(t as i32);
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let grad = grads
            .get(&name)
            .ok_or_else(|| NnError::ParamMismatch(format!("gradient missing for {name}")))?;
        if !grad.all_finite() {
            return Err(NnError::NonFiniteGrad(name.clone()));
        }
        if grad.data().iter().all(|g| *g == 0.0) {
            continue;
        }
        let p = params.tensors.get_mut(&name).unwrap();
        let n = p.numel();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let mut data = p.data().to_vec();
        for i in 0..n {
            let gi = grad.data()[i];
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * gi;
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * gi * gi;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            data[i] -= lr * mhat / (vhat.sqrt() + state.eps);
        }
        *p = Tensor::new(p.shape().to_vec(), data)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec_4_64_64_2() -> MlpSpec {
        MlpSpec::new(vec![4, 64, 64, 2], Activation::Relu, Activation::Identity).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_counts_match() {
        let spec = spec_4_64_64_2();
        let a = init_params(&spec, 42);
        let b = init_params(&spec, 42);
        assert_eq!(a, b);
        assert_eq!(spec.param_count(), 4 * 64 + 64 + 64 * 64 + 64 + 64 * 2 + 2);
        assert_eq!(a.numel(), 4610);
        assert_eq!(a.numel(), spec.param_count());
    }

    #[test]
    fn biases_are_zero() {
        let spec = spec_4_64_64_2();
        let ps = init_params(&spec, 3);
        for l in 0..3 {
            let b = ps.get(&format!("b{l}")).unwrap();
            assert!(b.data().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn zero_params_give_zero_output() {
        let spec = MlpSpec::new(vec![3, 5, 2], Activation::Tanh, Activation::Identity).unwrap();
        let ps = init_params(&spec, 0);
        let zeroed = ps.unflatten(&vec![0.0; ps.numel()]).unwrap();
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::vector(vec![1.0, -2.0, 0.5]));
        let y = mlp_forward(&mut g, &zeroed, &spec, &x, None).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn ones_mask_equals_maskless() {
        let spec = spec_4_64_64_2();
        let ps = init_params(&spec, 9);
        let input = Tensor::vector(vec![0.3, -0.1, 0.8, 0.2]);
        let mut g1 = Graph::new();
        let x1 = g1.leaf(&input);
        let y1 = mlp_forward(&mut g1, &ps, &spec, &x1, None).unwrap();
        let mut g2 = Graph::new();
        let x2 = g2.leaf(&input);
        let mask = g2.constant(&Tensor::vector(vec![1.0; 64]));
        let y2 = mlp_forward(&mut g2, &ps, &spec, &x2, Some(&mask)).unwrap();
        assert_eq!(y1.data(), y2.data());
    }

    #[test]
    fn single_unit_two_masks_two_outputs() {
        // 1-hidden-unit net: over the two possible masks the output takes
        // exactly two values.
        let spec = MlpSpec::new(vec![1, 1, 1], Activation::Tanh, Activation::Identity).unwrap();
        let mut ps = init_params(&spec, 1);
        let flat: Vec<f64> = ps.flatten().iter().map(|_| 0.7).collect();
        ps = ps.unflatten(&flat).unwrap();
        let mut outs = std::collections::BTreeSet::new();
        for mask in [0.0, 1.0] {
            let mut g = Graph::new();
            let x = g.leaf(&Tensor::vector(vec![0.5]));
            let m = g.constant(&Tensor::vector(vec![mask]));
            let y = mlp_forward(&mut g, &ps, &spec, &x, Some(&m)).unwrap();
            outs.insert(y.data()[0].to_bits());
        }
        assert_eq!(outs.len(), 2);
    }

    #[test]
    fn checkpoint_round_trip_exact() {
        let spec = spec_4_64_64_2();
        let ps = init_params(&spec, 7);
        let dir = std::env::temp_dir().join("ipl_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("net.json");
        save_checkpoint(&ps, &path).unwrap();
        let loaded = load_checkpoint(&path, Some(ps.spec_hash())).unwrap();
        assert_eq!(ps, loaded);
    }

    #[test]
    fn checkpoint_hash_mismatch_rejected() {
        let spec = spec_4_64_64_2();
        let ps = init_params(&spec, 7);
        let dir = std::env::temp_dir().join("ipl_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("net2.json");
        save_checkpoint(&ps, &path).unwrap();
        assert!(matches!(load_checkpoint(&path, Some("deadbeef")), Err(NnError::HashMismatch { .. })));
    }

    #[test]
    fn empty_paramset_round_trips() {
        let ps = ParamSet::new("none".into());
        let dir = std::env::temp_dir().join("ipl_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("empty.json");
        save_checkpoint(&ps, &path).unwrap();
        let loaded = load_checkpoint(&path, None).unwrap();
        assert!(loaded.is_empty());
    }

    #[test]
    fn hard_sync_copies_and_is_idempotent() {
        let spec = spec_4_64_64_2();
        let src = init_params(&spec, 1);
        let mut dst = init_params(&spec, 2);
        assert_ne!(src, dst);
        dst.hard_sync(&src).unwrap();
        assert_eq!(src, dst);
        dst.hard_sync(&src).unwrap();
        assert_eq!(src, dst);
    }

    #[test]
    fn hard_sync_disjoint_names_errors() {
        let a = init_params(&spec_4_64_64_2(), 1);
        let mut b = ParamSet::new("x".into());
        b.insert("other", Tensor::scalar(1.0));
        assert!(matches!(b.hard_sync(&a), Err(NnError::ParamMismatch(_))));
    }

    #[test]
    fn adam_zero_grad_is_identity() {
        let spec = spec_4_64_64_2();
        let mut ps = init_params(&spec, 5);
        let before = ps.clone();
        let mut state = AdamState::new();
        let grads: NamedGrads = ps
            .iter()
            .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape().to_vec())))
            .collect();
        adam_step(&mut ps, &grads, &mut state, 1e-3).unwrap();
        assert_eq!(ps, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_first_step_magnitude() {
        let mut ps = ParamSet::new("s".into());
        ps.insert("w", Tensor::scalar(0.0));
        let mut grads = NamedGrads::new();
        grads.insert("w".into(), Tensor::scalar(1.0));
        let mut state = AdamState::new();
        adam_step(&mut ps, &grads, &mut state, 0.001).unwrap();
        let w = ps.get("w").unwrap().item();
        assert!((w + 0.001).abs() < 1e-9, "first Adam step should be ~ -lr, got {w}");
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut ps = ParamSet::new("s".into());
        ps.insert("w", Tensor::scalar(0.0));
        let mut grads = NamedGrads::new();
        grads.insert("w".into(), Tensor::scalar(f64::NAN));
        let mut state = AdamState::new();
        assert!(matches!(adam_step(&mut ps, &grads, &mut state, 0.001), Err(NnError::NonFiniteGrad(_))));
    }
}

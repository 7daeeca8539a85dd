//! Invertible flow policies: affine coupling layers stacked into a
//! conditional flow with exact log-densities, plus a monotone flow for
//! one-dimensional action spaces.
//!
//! Sampling pushes base noise through the stack with the state embedding
//! added after the first transform; densities come from the change of
//! variables, log pi(a|s) = log rho0(eps) - sum of log-determinants.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Graph, Tensor};
use crate::nn::{
    bind, init_params, mlp_forward_prefixed, Activation, BoundParams, MlpSpec, NnError, ParamSet,
    Result,
};

const LOG_2PI: f64 = 1.8378770664093453;

/// Standard-normal draws shaped `[rows, cols]`, deterministic in `seed`.
pub fn sample_base_noise(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

/// Sum along the last axis: `[m]` becomes a scalar, `[N, m]` becomes `[N]`.
fn row_sum(g: &mut Graph, x: &Tensor) -> Result<Tensor> {
    match x.shape() {
        [_] => Ok(g.sum(x)?),
        [n, m] => {
            let ones = g.constant(&Tensor::new(vec![*m, 1], vec![1.0; *m])?);
            let col = g.matmul(x, &ones)?;
            Ok(g.reshape(&col, vec![*n])?)
        }
        other => Err(NnError::BadSpec(format!("row_sum on rank-{} tensor", other.len()))),
    }
}

/// Reorder the last axis so output position `i` holds input position `perm[i]`.
fn permute(g: &mut Graph, x: &Tensor, perm: &[usize]) -> Result<Tensor> {
    if perm.iter().enumerate().all(|(i, p)| i == *p) {
        return Ok(x.clone());
    }
    let cols: Vec<Tensor> =
        perm.iter().map(|p| g.slice(x, *p, 1)).collect::<crate::autodiff::Result<_>>()?;
    let refs: Vec<&Tensor> = cols.iter().collect();
    Ok(g.concat(&refs)?)
}

fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, p) in perm.iter().enumerate() {
        inv[*p] = i;
    }
    inv
}

/// log density of the standard normal on R^m, row-wise.
fn log_std_normal(g: &mut Graph, eps: &Tensor, m: usize) -> Result<Tensor> {
    let sq = g.square(eps)?;
    let ss = row_sum(g, &sq)?;
    let quad = g.scale(&ss, -0.5)?;
    let c = g.constant(&Tensor::scalar(-0.5 * m as f64 * LOG_2PI));
    Ok(g.add(&quad, &c)?)
}

/// One affine coupling transform. The first `d` coordinates (after a fixed
/// permutation) pass through unchanged and parameterize an elementwise
/// affine map of the rest.
#[derive(Debug, Clone)]
pub struct CouplingLayer {
    pub m: usize,
    pub d: usize,
    pub perm: Vec<usize>,
    pub s_spec: MlpSpec,
    pub s_params: ParamSet,
    pub t_spec: MlpSpec,
    pub t_params: ParamSet,
    /// When set, the raw scale-net output is squashed through tanh and
    /// multiplied by this bound so exp(s) cannot overflow.
    pub scale_bound: Option<f64>,
}

/// Coupling-layer parameters registered on a graph.
pub struct CouplingBinding {
    s: BoundParams,
    t: BoundParams,
}

impl CouplingLayer {
    /// Random layer with 3 hidden tanh layers of `hidden` units in each of
    /// the scale and translate nets.
    pub fn new(m: usize, d: usize, perm: Vec<usize>, hidden: usize, rng_seed: u64) -> Result<Self> {
        if d == 0 || d >= m {
            return Err(NnError::BadSpec(format!("split index {d} outside 1..{m}")));
        }
        if perm.len() != m {
            return Err(NnError::BadSpec("permutation length != m".into()));
        }
        let widths = vec![d, hidden, hidden, hidden, m - d];
        let spec = MlpSpec::new(widths, Activation::Tanh, Activation::Identity)?;
        Ok(CouplingLayer {
            m,
            d,
            perm,
            s_spec: spec.clone(),
            s_params: init_params(&spec, rng_seed),
            t_spec: spec.clone(),
            t_params: init_params(&spec, rng_seed.wrapping_add(1)),
            scale_bound: Some(5.0),
        })
    }

    pub fn bind(&self, g: &mut Graph) -> CouplingBinding {
        CouplingBinding { s: bind(&self.s_params, g), t: bind(&self.t_params, g) }
    }

    fn scale_and_shift(
        &self,
        g: &mut Graph,
        b: &CouplingBinding,
        x1: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let raw = mlp_forward_prefixed(g, &b.s, "", &self.s_spec, x1, None)?;
        let s = match self.scale_bound {
            Some(bound) => {
                let sq = g.tanh(&raw)?;
                g.scale(&sq, bound)?
            }
            None => raw,
        };
        let t = mlp_forward_prefixed(g, &b.t, "", &self.t_spec, x1, None)?;
        Ok((s, t))
    }

    /// y = (x1, x2 * exp(s(x1)) + t(x1)) in permuted coordinates; the second
    /// return is the log-determinant, sum of s over transformed coordinates.
    pub fn forward_bound(
        &self,
        g: &mut Graph,
        b: &CouplingBinding,
        x: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let xp = permute(g, x, &self.perm)?;
        let x1 = g.slice(&xp, 0, self.d)?;
        let x2 = g.slice(&xp, self.d, self.m - self.d)?;
        let (s, t) = self.scale_and_shift(g, b, &x1)?;
        let es = g.exp(&s)?;
        let scaled = g.mul(&x2, &es)?;
        let y2 = g.add(&scaled, &t)?;
        let y = g.concat(&[&x1, &y2])?;
        let logdet = row_sum(g, &s)?;
        Ok((y, logdet))
    }

    /// Inverse of `forward_bound`; also returns the forward log-determinant
    /// evaluated along the inverse path.
    pub fn inverse_bound(
        &self,
        g: &mut Graph,
        b: &CouplingBinding,
        y: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let y1 = g.slice(y, 0, self.d)?;
        let y2 = g.slice(y, self.d, self.m - self.d)?;
        let (s, t) = self.scale_and_shift(g, b, &y1)?;
        let neg_s = g.neg(&s)?;
        let ens = g.exp(&neg_s)?;
        let shifted = g.sub(&y2, &t)?;
        let x2 = g.mul(&shifted, &ens)?;
        let xp = g.concat(&[&y1, &x2])?;
        let x = permute(g, &xp, &invert_perm(&self.perm))?;
        let logdet = row_sum(g, &s)?;
        Ok((x, logdet))
    }

    pub fn forward(&self, g: &mut Graph, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let b = self.bind(g);
        self.forward_bound(g, &b, x)
    }

    pub fn inverse(&self, g: &mut Graph, y: &Tensor) -> Result<(Tensor, Tensor)> {
        let b = self.bind(g);
        self.inverse_bound(g, &b, y)
    }
}

/// Architecture knobs for a conditional coupling flow.
#[derive(Debug, Clone)]
pub struct FlowConfig {
    pub state_dim: usize,
    pub action_dim: usize,
    /// Number of stacked coupling layers.
    pub layers: usize,
    /// Hidden width of each scale/translate net.
    pub st_hidden: usize,
    /// Hidden widths of the state embedder.
    pub embed_hidden: Vec<usize>,
    pub scale_bound: Option<f64>,
}

impl FlowConfig {
    pub fn new(state_dim: usize, action_dim: usize) -> Self {
        FlowConfig {
            state_dim,
            action_dim,
            layers: 4,
            st_hidden: 3,
            embed_hidden: vec![64, 64],
            scale_bound: Some(5.0),
        }
    }
}

/// Conditional flow policy over R^m: base noise passes through the first
/// coupling layer, the state embedding is added, and the remaining layers
/// finish the transform. Log-densities are exact.
#[derive(Debug, Clone)]
pub struct FlowPolicy {
    pub config: FlowConfig,
    pub layers: Vec<CouplingLayer>,
    pub embed_spec: MlpSpec,
    pub embed_params: ParamSet,
}

/// All of a flow policy's parameters registered on one graph.
pub struct FlowBinding {
    embed: BoundParams,
    layers: Vec<CouplingBinding>,
}

impl FlowPolicy {
    pub fn new(config: FlowConfig, seed: u64) -> Result<Self> {
        let m = config.action_dim;
        if m < 2 {
            return Err(NnError::BadSpec("coupling flow needs action_dim >= 2".into()));
        }
        let d = m / 2;
        let reversal: Vec<usize> = (0..m).rev().collect();
        let identity: Vec<usize> = (0..m).collect();
        let mut layers = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let perm = if i % 2 == 1 { reversal.clone() } else { identity.clone() };
            layers.push(CouplingLayer::new(m, d, perm, config.st_hidden, seed.wrapping_add(1000 + i as u64))?);
        }
        let mut widths = vec![config.state_dim];
        widths.extend_from_slice(&config.embed_hidden);
        widths.push(m);
        let embed_spec = MlpSpec::new(widths, Activation::Tanh, Activation::Identity)?;
        let embed_params = init_params(&embed_spec, seed.wrapping_add(7));
        let mut policy = FlowPolicy { config, layers, embed_spec, embed_params };
        for layer in &mut policy.layers {
            layer.scale_bound = policy.config.scale_bound;
        }
        Ok(policy)
    }

    pub fn bind(&self, g: &mut Graph) -> FlowBinding {
        FlowBinding {
            embed: bind(&self.embed_params, g),
            layers: self.layers.iter().map(|l| l.bind(g)).collect(),
        }
    }

    fn embed(&self, g: &mut Graph, b: &FlowBinding, state: &Tensor) -> Result<Tensor> {
        mlp_forward_prefixed(g, &b.embed, "", &self.embed_spec, state, None)
    }

    /// Transform base noise into an action and its exact log-density.
    /// Accepts `[m]` with `[n]` state or batched `[N, m]` with `[N, n]`.
    pub fn sample_bound(
        &self,
        g: &mut Graph,
        b: &FlowBinding,
        state: &Tensor,
        noise: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let m = self.config.action_dim;
        let mut logp = log_std_normal(g, noise, m)?;
        let (mut h, ld) = self.layers[0].forward_bound(g, &b.layers[0], noise)?;
        logp = g.sub(&logp, &ld)?;
        let shift = self.embed(g, b, state)?;
        h = g.add(&h, &shift)?;
        for (layer, lb) in self.layers.iter().zip(&b.layers).skip(1) {
            let (next, ld) = layer.forward_bound(g, lb, &h)?;
            logp = g.sub(&logp, &ld)?;
            h = next;
        }
        Ok((h, logp))
    }

    /// Exact log-density of `action` given `state` by running the stack in
    /// reverse; differentiable in every parameter.
    pub fn log_prob_bound(
        &self,
        g: &mut Graph,
        b: &FlowBinding,
        state: &Tensor,
        action: &Tensor,
    ) -> Result<Tensor> {
        let m = self.config.action_dim;
        let mut h = action.clone();
        let mut total_ld: Option<Tensor> = None;
        for (layer, lb) in self.layers.iter().zip(&b.layers).skip(1).rev() {
            let (prev, ld) = layer.inverse_bound(g, lb, &h)?;
            h = prev;
            total_ld = Some(match total_ld {
                Some(t) => g.add(&t, &ld)?,
                None => ld,
            });
        }
        let shift = self.embed(g, b, state)?;
        h = g.sub(&h, &shift)?;
        let (eps, ld) = self.layers[0].inverse_bound(g, &b.layers[0], &h)?;
        let total = match total_ld {
            Some(t) => g.add(&t, &ld)?,
            None => ld,
        };
        let base = log_std_normal(g, &eps, m)?;
        Ok(g.sub(&base, &total)?)
    }

    pub fn sample(&self, g: &mut Graph, state: &Tensor, noise: &Tensor) -> Result<(Tensor, Tensor)> {
        let b = self.bind(g);
        self.sample_bound(g, &b, state, noise)
    }

    pub fn log_prob(&self, g: &mut Graph, state: &Tensor, action: &Tensor) -> Result<Tensor> {
        let b = self.bind(g);
        self.log_prob_bound(g, &b, state, action)
    }

    /// Monte-Carlo entropy estimate at one state, differentiable through
    /// both the sample path and the density.
    pub fn entropy_estimate_bound(
        &self,
        g: &mut Graph,
        b: &FlowBinding,
        state: &Tensor,
        n_samples: usize,
        noise_seed: u64,
    ) -> Result<Tensor> {
        let noise = g.constant(&sample_base_noise(n_samples, self.config.action_dim, noise_seed));
        let (_, logp) = self.sample_bound(g, b, state, &noise)?;
        let neg = g.neg(&logp)?;
        Ok(g.mean(&neg)?)
    }

    pub fn entropy_estimate(
        &self,
        g: &mut Graph,
        state: &Tensor,
        n_samples: usize,
        noise_seed: u64,
    ) -> Result<Tensor> {
        let b = self.bind(g);
        self.entropy_estimate_bound(g, &b, state, n_samples, noise_seed)
    }

    /// All parameters as one named set; prefixes `embed/` and `layerI/s/`,
    /// `layerI/t/`.
    pub fn gather_params(&self) -> ParamSet {
        let mut ps = ParamSet::new(self.embed_params.spec_hash().to_string());
        for (name, t) in self.embed_params.iter() {
            ps.insert(format!("embed/{name}"), t.clone());
        }
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in layer.s_params.iter() {
                ps.insert(format!("layer{i}/s/{name}"), t.clone());
            }
            for (name, t) in layer.t_params.iter() {
                ps.insert(format!("layer{i}/t/{name}"), t.clone());
            }
        }
        ps
    }

    /// Write a gathered parameter set back into the policy.
    pub fn scatter_params(&mut self, ps: &ParamSet) -> Result<()> {
        for (name, t) in ps.iter() {
            let dest = if let Some(rest) = name.strip_prefix("embed/") {
                (&mut self.embed_params, rest)
            } else if let Some(rest) = name.strip_prefix("layer") {
                let (idx, rest) = rest
                    .split_once('/')
                    .ok_or_else(|| NnError::ParamMismatch(format!("bad name {name}")))?;
                let i: usize = idx
                    .parse()
                    .map_err(|_| NnError::ParamMismatch(format!("bad layer index in {name}")))?;
                let layer = self
                    .layers
                    .get_mut(i)
                    .ok_or_else(|| NnError::ParamMismatch(format!("layer {i} out of range")))?;
                if let Some(r) = rest.strip_prefix("s/") {
                    (&mut layer.s_params, r)
                } else if let Some(r) = rest.strip_prefix("t/") {
                    (&mut layer.t_params, r)
                } else {
                    return Err(NnError::ParamMismatch(format!("bad name {name}")));
                }
            } else {
                return Err(NnError::ParamMismatch(format!("bad name {name}")));
            };
            dest.0.insert(dest.1, t.clone());
        }
        Ok(())
    }

    /// Gradients from a backward pass, keyed like `gather_params`.
    pub fn collect_grads(
        &self,
        b: &FlowBinding,
        grads: &crate::autodiff::GradientMap,
    ) -> Result<crate::nn::NamedGrads> {
        let mut out = crate::nn::NamedGrads::new();
        for (name, t) in b.embed.iter() {
            out.insert(format!("embed/{name}"), grads.grad(t)?);
        }
        for (i, lb) in b.layers.iter().enumerate() {
            for (name, t) in lb.s.iter() {
                out.insert(format!("layer{i}/s/{name}"), grads.grad(t)?);
            }
            for (name, t) in lb.t.iter() {
                out.insert(format!("layer{i}/t/{name}"), grads.grad(t)?);
            }
        }
        Ok(out)
    }
}

/// Strictly increasing scalar flow for one-dimensional actions: the
/// coupling construction needs at least two coordinates, so conditionals on
/// R are modeled as eps = h(a) - L(s) with h a monotone sum of tanh ramps.
/// The density log pi(a|s) = log rho0(h(a) - L(s)) + log h'(a) is exact and
/// differentiable; sampling inverts h by bisection.
#[derive(Debug, Clone)]
pub struct Monotone1dFlow {
    pub state_dim: usize,
    /// Number of tanh ramp terms in h.
    pub terms: usize,
    pub params: ParamSet,
    pub embed_spec: MlpSpec,
}

impl Monotone1dFlow {
    pub fn new(state_dim: usize, terms: usize, embed_hidden: usize, seed: u64) -> Result<Self> {
        let embed_spec =
            MlpSpec::new(vec![state_dim, embed_hidden, 1], Activation::Tanh, Activation::Identity)?;
        let mut params = init_params(&embed_spec, seed);
        let mut prefixed = ParamSet::new(params.spec_hash().to_string());
        for (name, t) in params.iter() {
            prefixed.insert(format!("L/{name}"), t.clone());
        }
        params = prefixed;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(13));
        let mut vec_param = |n: usize, lo: f64, hi: f64| {
            Tensor::vector((0..n).map(|_| rng.gen_range(lo..hi)).collect())
        };
        params.insert("u0", Tensor::vector(vec![0.55]));
        params.insert("u", vec_param(terms, -2.0, 0.0));
        params.insert("v", vec_param(terms, -0.5, 0.5));
        params.insert("b", vec_param(terms, -1.0, 1.0));
        params.insert("c", Tensor::vector(vec![0.0]));
        Ok(Monotone1dFlow { state_dim, terms, params, embed_spec })
    }

    /// h(a) and log h'(a) for a batch of scalar actions, shape `[N]` each.
    fn warp(&self, g: &mut Graph, b: &BoundParams, actions: &Tensor) -> Result<(Tensor, Tensor)> {
        let n = actions.numel();
        let a_col = g.reshape(actions, vec![n, 1])?;
        let get = |name: &str| {
            b.get(name).cloned().ok_or_else(|| NnError::ParamMismatch(format!("missing {name}")))
        };
        let (u0, u, v, bb, c) = (get("u0")?, get("u")?, get("v")?, get("b")?, get("c")?);
        let su0 = g.softplus(&u0)?;
        let su = g.softplus(&u)?;
        let sv = g.softplus(&v)?;
        let sv_row = g.reshape(&sv, vec![1, self.terms])?;
        let z = g.matmul(&a_col, &sv_row)?;
        let z = g.add(&z, &bb)?;
        let th = g.tanh(&z)?;
        let su_col = g.reshape(&su, vec![self.terms, 1])?;
        let ramp = g.matmul(&th, &su_col)?;
        let su0_mat = g.reshape(&su0, vec![1, 1])?;
        let lin = g.matmul(&a_col, &su0_mat)?;
        let h = g.add(&lin, &ramp)?;
        let h = g.add(&h, &c)?;
        let h = g.reshape(&h, vec![n])?;
        // h'(a) = softplus(u0) + sum_j softplus(u_j) softplus(v_j) (1 - tanh^2)
        let th2 = g.square(&th)?;
        let one = g.constant(&Tensor::scalar(1.0));
        let sech2 = g.sub(&one, &th2)?;
        let uv = g.mul(&su, &sv)?;
        let weighted = g.mul(&sech2, &uv)?;
        let ones = g.constant(&Tensor::new(vec![self.terms, 1], vec![1.0; self.terms])?);
        let uv_sum = g.matmul(&weighted, &ones)?;
        let uv_sum = g.reshape(&uv_sum, vec![n])?;
        let hp = g.add(&uv_sum, &su0)?;
        let log_hp = g.log(&hp)?;
        Ok((h, log_hp))
    }

    fn embed(&self, g: &mut Graph, b: &BoundParams, states: &Tensor) -> Result<Tensor> {
        let out = mlp_forward_prefixed(g, b, "L/", &self.embed_spec, states, None)?;
        match out.shape() {
            [n, 1] => Ok(g.reshape(&out, vec![*n])?),
            _ => Ok(out),
        }
    }

    /// Log-density of scalar actions `[N]` given states `[N, state_dim]`.
    pub fn log_prob_bound(
        &self,
        g: &mut Graph,
        b: &BoundParams,
        states: &Tensor,
        actions: &Tensor,
    ) -> Result<Tensor> {
        let (h, log_hp) = self.warp(g, b, actions)?;
        let shift = self.embed(g, b, states)?;
        let eps = g.sub(&h, &shift)?;
        let eps_col = g.reshape(&eps, vec![actions.numel(), 1])?;
        let base = log_std_normal(g, &eps_col, 1)?;
        Ok(g.add(&base, &log_hp)?)
    }

    pub fn log_prob(&self, g: &mut Graph, states: &Tensor, actions: &Tensor) -> Result<Tensor> {
        let b = bind(&self.params, g);
        self.log_prob_bound(g, &b, states, actions)
    }

    fn h_scalar(&self, a: f64) -> f64 {
        let sp = |x: f64| {
            if x > 30.0 { x } else { x.exp().ln_1p() }
        };
        let u0 = sp(self.params.get("u0").unwrap().data()[0]);
        let u = self.params.get("u").unwrap().data();
        let v = self.params.get("v").unwrap().data();
        let bs = self.params.get("b").unwrap().data();
        let c = self.params.get("c").unwrap().data()[0];
        let mut h = u0 * a + c;
        for j in 0..self.terms {
            h += sp(u[j]) * (sp(v[j]) * a + bs[j]).tanh();
        }
        h
    }

    fn embed_scalar(&self, state: &[f64]) -> f64 {
        let mut g = Graph::new();
        let b = bind(&self.params, &mut g);
        let s = g.constant(&Tensor::new(vec![1, self.state_dim], state.to_vec()).unwrap());
        self.embed(&mut g, &b, &s).unwrap().data()[0]
    }

    /// Draw one action by inverting h at eps + L(s) with bisection. Not
    /// differentiable; used for generation and evaluation only.
    pub fn sample_scalar(&self, state: &[f64], eps: f64) -> f64 {
        let target = eps + self.embed_scalar(state);
        let (mut lo, mut hi) = (-1e6, 1e6);
        // h is strictly increasing with slope >= softplus(u0) > 0.
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.h_scalar(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    pub fn collect_grads(
        &self,
        b: &BoundParams,
        grads: &crate::autodiff::GradientMap,
    ) -> Result<crate::nn::NamedGrads> {
        let mut out = crate::nn::NamedGrads::new();
        for (name, t) in b.iter() {
            out.insert(name.clone(), grads.grad(t)?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::adam_step;
    use nalgebra::DMatrix;

    fn zeroed(mut policy: FlowPolicy) -> FlowPolicy {
        let gathered = policy.gather_params();
        let zero = gathered.unflatten(&vec![0.0; gathered.numel()]).unwrap();
        policy.scatter_params(&zero).unwrap();
        policy
    }

    fn hand_layer() -> CouplingLayer {
        // m=2, d=1, s(x1) = x1, t = 0, no scale bound.
        let spec = MlpSpec::new(vec![1, 1], Activation::Tanh, Activation::Identity).unwrap();
        let mut s_params = init_params(&spec, 0);
        s_params.insert("W0", Tensor::matrix(1, 1, vec![1.0]).unwrap());
        s_params.insert("b0", Tensor::vector(vec![0.0]));
        let mut t_params = init_params(&spec, 0);
        t_params.insert("W0", Tensor::matrix(1, 1, vec![0.0]).unwrap());
        t_params.insert("b0", Tensor::vector(vec![0.0]));
        CouplingLayer {
            m: 2,
            d: 1,
            perm: vec![0, 1],
            s_spec: spec.clone(),
            s_params,
            t_spec: spec,
            t_params,
            scale_bound: None,
        }
    }

    #[test]
    fn hand_example_forward_and_inverse() {
        let layer = hand_layer();
        let mut g = Graph::new();
        let x = g.constant(&Tensor::vector(vec![1.0, 2.0]));
        let (y, ld) = layer.forward(&mut g, &x).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-12);
        assert!((y.data()[1] - 2.0 * std::f64::consts::E).abs() < 1e-12);
        assert!((ld.item() - 1.0).abs() < 1e-12);
        let (x_back, _) = layer.inverse(&mut g, &y).unwrap();
        assert!((x_back.data()[0] - 1.0).abs() < 1e-10);
        assert!((x_back.data()[1] - 2.0).abs() < 1e-10);
    }

    #[test]
    fn zero_nets_give_permuted_identity() {
        let mut layer = CouplingLayer::new(3, 1, vec![2, 0, 1], 3, 4).unwrap();
        let zero_s = layer.s_params.unflatten(&vec![0.0; layer.s_params.numel()]).unwrap();
        let zero_t = layer.t_params.unflatten(&vec![0.0; layer.t_params.numel()]).unwrap();
        layer.s_params = zero_s;
        layer.t_params = zero_t;
        let mut g = Graph::new();
        let x = g.constant(&Tensor::vector(vec![10.0, 20.0, 30.0]));
        let (y, ld) = layer.forward(&mut g, &x).unwrap();
        assert_eq!(y.data(), &[30.0, 10.0, 20.0]);
        assert_eq!(ld.item(), 0.0);
    }

    #[test]
    fn coupling_round_trip_1000_probes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut worst = 0.0f64;
        for trial in 0..1000 {
            let m = 2 + trial % 3;
            let d = 1 + (trial / 3) % (m - 1);
            let mut perm: Vec<usize> = (0..m).collect();
            if trial % 2 == 1 {
                perm.reverse();
            }
            let layer = CouplingLayer::new(m, d, perm, 3, trial as u64).unwrap();
            let x = Tensor::vector((0..m).map(|_| rng.gen_range(-3.0..3.0)).collect());
            let mut g = Graph::new();
            let xc = g.constant(&x);
            let (y, _) = layer.forward(&mut g, &xc).unwrap();
            let (back, _) = layer.inverse(&mut g, &y).unwrap();
            for i in 0..m {
                worst = worst.max((back.data()[i] - x.data()[i]).abs());
            }
        }
        assert!(worst <= 1e-8, "round-trip error {worst}");
    }

    #[test]
    fn logdet_matches_numerical_jacobian() {
        for m in [2usize, 3, 4] {
            for seed in 0..5u64 {
                let layer = CouplingLayer::new(m, m / 2, (0..m).rev().collect(), 3, 90 + seed).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let x: Vec<f64> = (0..m).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let eval = |pt: &[f64]| -> Vec<f64> {
                    let mut g = Graph::new();
                    let xc = g.constant(&Tensor::vector(pt.to_vec()));
                    layer.forward(&mut g, &xc).unwrap().0.data().to_vec()
                };
                let h = 1e-6;
                let mut jac = DMatrix::zeros(m, m);
                for j in 0..m {
                    let mut hi = x.clone();
                    let mut lo = x.clone();
                    hi[j] += h;
                    lo[j] -= h;
                    let (yh, yl) = (eval(&hi), eval(&lo));
                    for i in 0..m {
                        jac[(i, j)] = (yh[i] - yl[i]) / (2.0 * h);
                    }
                }
                let det = jac.determinant().abs();
                let mut g = Graph::new();
                let xc = g.constant(&Tensor::vector(x.clone()));
                let (_, ld) = layer.forward(&mut g, &xc).unwrap();
                let rel = (det.ln() - ld.item()).abs() / ld.item().abs().max(1.0);
                assert!(rel <= 1e-5, "m={m} seed={seed}: logdet {} vs numeric {}", ld.item(), det.ln());
            }
        }
    }

    #[test]
    fn identity_flow_passes_noise_through() {
        let policy = zeroed(FlowPolicy::new(FlowConfig::new(3, 2), 5).unwrap());
        let mut g = Graph::new();
        let state = g.constant(&Tensor::vector(vec![0.4, -0.2, 1.0]));
        let noise = g.constant(&Tensor::vector(vec![0.7, -1.1]));
        let (action, logp) = policy.sample(&mut g, &state, &noise).unwrap();
        assert_eq!(action.data(), noise.data());
        let expected = -LOG_2PI - 0.5 * (0.7f64 * 0.7 + 1.1 * 1.1);
        assert!((logp.item() - expected).abs() < 1e-12);
    }

    #[test]
    fn base_density_at_origin() {
        let policy = zeroed(FlowPolicy::new(FlowConfig::new(2, 2), 5).unwrap());
        let mut g = Graph::new();
        let state = g.constant(&Tensor::vector(vec![0.0, 0.0]));
        let action = g.constant(&Tensor::vector(vec![0.0, 0.0]));
        let logp = policy.log_prob(&mut g, &state, &action).unwrap();
        assert!((logp.item() + LOG_2PI).abs() < 1e-10, "expected log(1/2pi), got {}", logp.item());
    }

    #[test]
    fn sample_logp_matches_log_prob() {
        let policy = FlowPolicy::new(FlowConfig::new(3, 2), 21).unwrap();
        for seed in 0..50u64 {
            let noise = sample_base_noise(1, 2, seed);
            let noise = Tensor::vector(noise.data().to_vec());
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(500));
            let state = Tensor::vector((0..3).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let mut g = Graph::new();
            let sc = g.constant(&state);
            let nc = g.constant(&noise);
            let (action, logp_fwd) = policy.sample(&mut g, &sc, &nc).unwrap();
            let logp_inv = policy.log_prob(&mut g, &sc, &action).unwrap();
            assert!(
                (logp_fwd.item() - logp_inv.item()).abs() <= 1e-8,
                "seed {seed}: {} vs {}",
                logp_fwd.item(),
                logp_inv.item()
            );
        }
    }

    #[test]
    fn log_prob_unchanged_by_forward_inverse_round_trip() {
        let policy = FlowPolicy::new(FlowConfig::new(2, 2), 33).unwrap();
        let layer = &policy.layers[2];
        let mut g = Graph::new();
        let state = g.constant(&Tensor::vector(vec![0.3, -0.8]));
        let action = g.constant(&Tensor::vector(vec![0.5, 0.25]));
        let (mid, _) = layer.inverse(&mut g, &action).unwrap();
        let (round, _) = layer.forward(&mut g, &mid).unwrap();
        let lp1 = policy.log_prob(&mut g, &state, &action).unwrap();
        let lp2 = policy.log_prob(&mut g, &state, &round).unwrap();
        assert!((lp1.item() - lp2.item()).abs() <= 1e-9);
    }

    #[test]
    fn density_normalizes_on_2d_grid() {
        let mut cfg = FlowConfig::new(2, 2);
        cfg.scale_bound = Some(1.0);
        let policy = FlowPolicy::new(cfg, 77).unwrap();
        let n = 481;
        let (lo, hi) = (-12.0, 12.0);
        let step = (hi - lo) / (n - 1) as f64;
        let mut actions = Vec::with_capacity(n * n * 2);
        let mut states = Vec::with_capacity(n * n * 2);
        for i in 0..n {
            for j in 0..n {
                actions.push(lo + i as f64 * step);
                actions.push(lo + j as f64 * step);
                states.push(0.5);
                states.push(-0.3);
            }
        }
        let mut g = Graph::new();
        let sc = g.constant(&Tensor::new(vec![n * n, 2], states).unwrap());
        let ac = g.constant(&Tensor::new(vec![n * n, 2], actions).unwrap());
        let logp = policy.log_prob(&mut g, &sc, &ac).unwrap();
        let mass: f64 = logp.data().iter().map(|lp| lp.exp() * step * step).sum();
        assert!((mass - 1.0).abs() <= 1e-2, "grid mass {mass}");
    }

    #[test]
    fn distinct_states_distinct_densities() {
        let policy = FlowPolicy::new(FlowConfig::new(2, 2), 13).unwrap();
        let mut g = Graph::new();
        let a = g.constant(&Tensor::vector(vec![0.2, -0.4]));
        let s1 = g.constant(&Tensor::vector(vec![1.0, 0.0]));
        let s2 = g.constant(&Tensor::vector(vec![-1.0, 0.5]));
        let lp1 = policy.log_prob(&mut g, &s1, &a).unwrap();
        let lp2 = policy.log_prob(&mut g, &s2, &a).unwrap();
        assert!((lp1.item() - lp2.item()).abs() > 1e-6);
    }

    #[test]
    fn entropy_of_identity_flow_matches_gaussian() {
        let policy = zeroed(FlowPolicy::new(FlowConfig::new(2, 2), 9).unwrap());
        let mut g = Graph::new();
        let state = g.constant(&Tensor::vector(vec![0.0, 0.0]));
        let est = policy.entropy_estimate(&mut g, &state, 100_000, 123).unwrap();
        let analytic = 1.0 + LOG_2PI;
        // Var of -log rho0 for a 2D standard normal is 1; SE = 1/sqrt(N).
        let se = 1.0 / (100_000f64).sqrt();
        assert!(
            (est.item() - analytic).abs() <= 3.0 * se,
            "entropy {} vs {} (3 SE = {})",
            est.item(),
            analytic,
            3.0 * se
        );
    }

    #[test]
    fn scale_flow_shifts_entropy_by_dimension() {
        // Two layers whose scale nets output the constant 1 multiply every
        // coordinate by e once, adding exactly m to the entropy.
        let base = zeroed(FlowPolicy::new(FlowConfig::new(2, 2), 9).unwrap());
        let mut scaled = base.clone();
        scaled.config.scale_bound = None;
        for layer in &mut scaled.layers {
            layer.scale_bound = None;
        }
        for i in [0usize, 1] {
            let spec = scaled.layers[i].s_spec.clone();
            let mut ps = scaled.layers[i].s_params.unflatten(&vec![0.0; scaled.layers[i].s_params.numel()]).unwrap();
            let last = spec.widths.len() - 2;
            let out_w = spec.widths[spec.widths.len() - 1];
            ps.insert(format!("b{last}"), Tensor::vector(vec![1.0; out_w]));
            scaled.layers[i].s_params = ps;
        }
        let mut g = Graph::new();
        let state = g.constant(&Tensor::vector(vec![0.0, 0.0]));
        let e_base = base.entropy_estimate(&mut g, &state, 20_000, 321).unwrap();
        let e_scaled = scaled.entropy_estimate(&mut g, &state, 20_000, 321).unwrap();
        assert!(
            (e_scaled.item() - e_base.item() - 2.0).abs() < 1e-9,
            "shift {}",
            e_scaled.item() - e_base.item()
        );
    }

    #[test]
    fn entropy_single_sample_estimates_average_to_large_n() {
        let policy = FlowPolicy::new(FlowConfig::new(2, 2), 55).unwrap();
        let mut g = Graph::new();
        let state = g.constant(&Tensor::vector(vec![0.2, 0.2]));
        let big = policy.entropy_estimate(&mut g, &state, 100_000, 999).unwrap().item();
        let n1 = 4000;
        let mut vals = Vec::with_capacity(n1);
        for k in 0..n1 {
            let mut g = Graph::new();
            let state = g.constant(&Tensor::vector(vec![0.2, 0.2]));
            vals.push(policy.entropy_estimate(&mut g, &state, 1, 5000 + k as u64).unwrap().item());
        }
        let mean: f64 = vals.iter().sum::<f64>() / n1 as f64;
        let var: f64 = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n1 - 1) as f64;
        let se = (var / n1 as f64).sqrt();
        assert!(
            (mean - big).abs() <= 4.0 * se,
            "N=1 mean {mean} vs N=1e5 {big}, 4 SE = {}",
            4.0 * se
        );
    }

    fn tiny_policy() -> FlowPolicy {
        let mut cfg = FlowConfig::new(2, 2);
        cfg.layers = 2;
        cfg.st_hidden = 3;
        cfg.embed_hidden = vec![4];
        FlowPolicy::new(cfg, 3).unwrap()
    }

    /// Compare backward-pass gradients over every policy parameter against
    /// central differences of `eval`.
    fn flow_param_gradcheck(
        policy: &FlowPolicy,
        eval: &dyn Fn(&FlowPolicy, &mut Graph, &FlowBinding) -> Tensor,
    ) -> f64 {
        let mut g = Graph::new();
        let b = policy.bind(&mut g);
        let loss = eval(policy, &mut g, &b);
        let grads = g.backward(&loss).unwrap();
        let named = policy.collect_grads(&b, &grads).unwrap();
        let gathered = policy.gather_params();
        let mut analytic = Vec::with_capacity(gathered.numel());
        for name in gathered.names() {
            analytic.extend_from_slice(named.get(name).unwrap().data());
        }
        let flat = gathered.flatten();
        let h = 1e-5;
        let mut max_rel = 0.0f64;
        for i in 0..flat.len() {
            let eval_at = |v: f64| {
                let mut p = policy.clone();
                let mut pert = flat.clone();
                pert[i] = v;
                p.scatter_params(&gathered.unflatten(&pert).unwrap()).unwrap();
                let mut g = Graph::new();
                let b = p.bind(&mut g);
                eval(&p, &mut g, &b).item()
            };
            let num = (eval_at(flat[i] + h) - eval_at(flat[i] - h)) / (2.0 * h);
            let rel = (analytic[i] - num).abs() / analytic[i].abs().max(num.abs()).max(1e-8);
            max_rel = max_rel.max(rel);
        }
        max_rel
    }

    #[test]
    fn log_prob_gradient_matches_finite_differences() {
        let policy = tiny_policy();
        let max_rel = flow_param_gradcheck(&policy, &|p, g, b| {
            let state = g.constant(&Tensor::vector(vec![0.3, -0.5]));
            let action = g.constant(&Tensor::vector(vec![0.6, 0.1]));
            p.log_prob_bound(g, b, &state, &action).unwrap()
        });
        assert!(max_rel <= 1e-4, "max rel err {max_rel}");
    }

    #[test]
    fn entropy_gradient_matches_finite_differences() {
        let policy = tiny_policy();
        let max_rel = flow_param_gradcheck(&policy, &|p, g, b| {
            let state = g.constant(&Tensor::vector(vec![0.1, 0.4]));
            p.entropy_estimate_bound(g, b, &state, 16, 777).unwrap()
        });
        assert!(max_rel <= 1e-4, "max rel err {max_rel}");
    }

    #[test]
    fn bound_gradients_flow_and_adam_improves_log_prob() {
        let mut policy = tiny_policy();
        let state = Tensor::vector(vec![0.2, -0.2]);
        let action = Tensor::vector(vec![0.9, -0.3]);
        let mut adam = crate::nn::AdamState::new();
        let mut first = f64::NAN;
        let mut last = f64::NAN;
        for step in 0..50 {
            let mut g = Graph::new();
            let b = policy.bind(&mut g);
            let sc = g.constant(&state);
            let ac = g.constant(&action);
            let lp = policy.log_prob_bound(&mut g, &b, &sc, &ac).unwrap();
            let loss = g.neg(&lp).unwrap();
            if step == 0 {
                first = lp.item();
            }
            last = lp.item();
            let grads = g.backward(&loss).unwrap();
            let named = policy.collect_grads(&b, &grads).unwrap();
            let mut ps = policy.gather_params();
            adam_step(&mut ps, &named, &mut adam, 1e-2).unwrap();
            policy.scatter_params(&ps).unwrap();
        }
        assert!(last > first + 0.1, "log-prob did not improve: {first} -> {last}");
    }

    #[test]
    fn monotone_1d_is_strictly_increasing() {
        let flow = Monotone1dFlow::new(1, 8, 16, 3).unwrap();
        let mut prev = f64::NEG_INFINITY;
        let mut a = -12.0;
        while a <= 12.0 {
            let h = flow.h_scalar(a);
            assert!(h > prev, "h not increasing at {a}");
            prev = h;
            a += 0.05;
        }
    }

    #[test]
    fn monotone_1d_density_normalizes() {
        let flow = Monotone1dFlow::new(1, 8, 16, 14).unwrap();
        let n = 4001;
        let (lo, hi) = (-60.0, 60.0);
        let step = (hi - lo) / (n - 1) as f64;
        let actions: Vec<f64> = (0..n).map(|i| lo + i as f64 * step).collect();
        let states = vec![0.7; n];
        let mut g = Graph::new();
        let sc = g.constant(&Tensor::new(vec![n, 1], states).unwrap());
        let ac = g.constant(&Tensor::vector(actions));
        let logp = flow.log_prob(&mut g, &sc, &ac).unwrap();
        let mass: f64 = logp.data().iter().map(|lp| lp.exp() * step).sum();
        assert!((mass - 1.0).abs() < 1e-2, "1d mass {mass}");
    }

    #[test]
    fn monotone_1d_sampling_inverts_warp() {
        let flow = Monotone1dFlow::new(1, 8, 16, 5).unwrap();
        for seed in 0..20u64 {
            let eps = sample_base_noise(1, 1, seed).data()[0];
            let state = [0.3];
            let a = flow.sample_scalar(&state, eps);
            let recovered = flow.h_scalar(a) - flow.embed_scalar(&state);
            assert!((recovered - eps).abs() < 1e-6, "seed {seed}: {recovered} vs {eps}");
        }
    }

    #[test]
    fn monotone_1d_log_prob_gradcheck() {
        let flow = Monotone1dFlow::new(1, 4, 6, 8).unwrap();
        let eval = |f: &Monotone1dFlow, g: &mut Graph, b: &BoundParams| {
            let states = g.constant(&Tensor::new(vec![3, 1], vec![0.1, -0.6, 0.9]).unwrap());
            let actions = g.constant(&Tensor::vector(vec![0.5, -1.2, 2.0]));
            let lp = f.log_prob_bound(g, b, &states, &actions).unwrap();
            g.sum(&lp).unwrap()
        };
        let mut g = Graph::new();
        let b = bind(&flow.params, &mut g);
        let loss = eval(&flow, &mut g, &b);
        let grads = g.backward(&loss).unwrap();
        let named = flow.collect_grads(&b, &grads).unwrap();
        let mut analytic = Vec::new();
        for name in flow.params.names() {
            analytic.extend_from_slice(named.get(name).unwrap().data());
        }
        let flat = flow.params.flatten();
        let h = 1e-5;
        let mut max_rel = 0.0f64;
        for i in 0..flat.len() {
            let eval_at = |v: f64| {
                let mut f = flow.clone();
                let mut pert = flat.clone();
                pert[i] = v;
                f.params = flow.params.unflatten(&pert).unwrap();
                let mut g = Graph::new();
                let b = bind(&f.params, &mut g);
                eval(&f, &mut g, &b).item()
            };
            let num = (eval_at(flat[i] + h) - eval_at(flat[i] - h)) / (2.0 * h);
            let rel = (analytic[i] - num).abs() / analytic[i].abs().max(num.abs()).max(1e-8);
            max_rel = max_rel.max(rel);
        }
        assert!(max_rel <= 1e-4, "max rel err {max_rel}");
    }
}

//! Blackbox policy without a tractable density: an MLP whose weights are
//! perturbed by learned-scale Gaussian noise, theta = mu + softplus(rho) * eps,
//! with a dropout mask on the last hidden layer. Multi-modal action
//! distributions arise from the noise and mask; entropy comes from the
//! classifier estimator, not from this module.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Graph, Tensor};
use crate::nn::{
    bind, init_params, mlp_forward_prefixed, Activation, BoundParams, MlpSpec, NnError, ParamSet,
    Result,
};

/// Elementwise softplus, the map from raw noise-scale parameters to
/// strictly positive standard deviations.
pub fn sigma_from_rho(g: &mut Graph, rho: &Tensor) -> Result<Tensor> {
    Ok(g.softplus(rho)?)
}

#[derive(Debug, Clone)]
pub struct NbpConfig {
    pub state_dim: usize,
    pub action_dim: usize,
    pub hidden: Vec<usize>,
    pub dropout_p: f64,
    /// Constant initial value for every raw noise-scale parameter.
    pub rho_init: f64,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub layer_norm: bool,
}

impl NbpConfig {
    pub fn new(state_dim: usize, action_dim: usize, low: f64, high: f64) -> Self {
        NbpConfig {
            state_dim,
            action_dim,
            hidden: vec![64, 64],
            dropout_p: 0.1,
            rho_init: -5.0,
            action_low: vec![low; action_dim],
            action_high: vec![high; action_dim],
            layer_norm: true,
        }
    }
}

/// Noisy-parameter MLP policy. Actions are tanh-squashed and affinely
/// mapped into the action box, so every sampled action is feasible.
#[derive(Debug, Clone)]
pub struct NoisyMlpPolicy {
    pub config: NbpConfig,
    pub spec: MlpSpec,
    pub mu: ParamSet,
    pub rho: ParamSet,
}

pub struct NbpBinding {
    pub mu: BoundParams,
    pub rho: BoundParams,
}

impl NoisyMlpPolicy {
    pub fn new(config: NbpConfig, seed: u64) -> Result<Self> {
        if config.action_low.len() != config.action_dim
            || config.action_high.len() != config.action_dim
        {
            return Err(NnError::BadSpec("action box dims != action_dim".into()));
        }
        let mut widths = vec![config.state_dim];
        widths.extend_from_slice(&config.hidden);
        widths.push(config.action_dim);
        let spec = MlpSpec::new(widths, Activation::Relu, Activation::Tanh)?
            .with_layer_norm(config.layer_norm)
            .with_dropout(config.dropout_p)?;
        let mu = init_params(&spec, seed);
        let mut rho = ParamSet::new(mu.spec_hash().to_string());
        for (name, t) in mu.iter() {
            rho.insert(name.clone(), Tensor::new(t.shape().to_vec(), vec![config.rho_init; t.numel()])?);
        }
        Ok(NoisyMlpPolicy { config, spec, mu, rho })
    }

    pub fn bind(&self, g: &mut Graph) -> NbpBinding {
        NbpBinding { mu: bind(&self.mu, g), rho: bind(&self.rho, g) }
    }

    /// Standard-normal draw shaped like the parameter set.
    pub fn sample_param_noise(&self, seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut noise = ParamSet::new(self.mu.spec_hash().to_string());
        for (name, t) in self.mu.iter() {
            let data: Vec<f64> = (0..t.numel()).map(|_| rng.sample(StandardNormal)).collect();
            noise.insert(name.clone(), Tensor::new(t.shape().to_vec(), data).unwrap());
        }
        noise
    }

    /// Inverted-dropout mask over the last hidden layer: units survive with
    /// probability 1-p and are scaled by 1/(1-p).
    pub fn sample_dropout_mask(&self, seed: u64) -> Tensor {
        let h = self.spec.last_hidden();
        let p = self.config.dropout_p;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 - p;
        let data: Vec<f64> = (0..h)
            .map(|_| if rng.gen_range(0.0..1.0) < keep { 1.0 / keep } else { 0.0 })
            .collect();
        Tensor::vector(data)
    }

    /// Perturbed parameters theta = mu + softplus(rho) * eps as graph tensors.
    fn perturb(&self, g: &mut Graph, b: &NbpBinding, noise: &ParamSet) -> Result<BoundParams> {
        let mut theta = BTreeMap::new();
        for (name, mu_t) in b.mu.iter() {
            let rho_t = b
                .rho
                .get(name)
                .ok_or_else(|| NnError::ParamMismatch(format!("rho missing {name}")))?;
            let eps = noise
                .get(name)
                .ok_or_else(|| NnError::ParamMismatch(format!("noise missing {name}")))?;
            if eps.shape() != mu_t.shape() {
                return Err(NnError::ParamMismatch(format!("noise shape mismatch at {name}")));
            }
            let eps = g.constant(eps);
            let sigma = g.softplus(rho_t)?;
            let jitter = g.mul(&sigma, &eps)?;
            theta.insert(name.clone(), g.add(mu_t, &jitter)?);
        }
        Ok(BoundParams::from_tensors(theta))
    }

    /// Forward pass with frozen parameter noise and dropout mask; output is
    /// differentiable in mu and rho through the reparameterization. Accepts
    /// `[n]` or batched `[N, n]` states (noise and mask shared across rows).
    pub fn sample_bound(
        &self,
        g: &mut Graph,
        b: &NbpBinding,
        state: &Tensor,
        noise: &ParamSet,
        mask: &Tensor,
    ) -> Result<Tensor> {
        let theta = self.perturb(g, b, noise)?;
        let mask = if mask.node().is_some() { mask.clone() } else { g.constant(mask) };
        let raw = mlp_forward_prefixed(g, &theta, "", &self.spec, state, Some(&mask))?;
        let m = self.config.action_dim;
        let mid: Vec<f64> = (0..m)
            .map(|i| 0.5 * (self.config.action_high[i] + self.config.action_low[i]))
            .collect();
        let half: Vec<f64> = (0..m)
            .map(|i| 0.5 * (self.config.action_high[i] - self.config.action_low[i]))
            .collect();
        let half = g.constant(&Tensor::vector(half));
        let mid = g.constant(&Tensor::vector(mid));
        let scaled = g.mul(&raw, &half)?;
        Ok(g.add(&scaled, &mid)?)
    }

    pub fn sample(
        &self,
        g: &mut Graph,
        state: &Tensor,
        noise: &ParamSet,
        mask: &Tensor,
    ) -> Result<Tensor> {
        let b = self.bind(g);
        self.sample_bound(g, &b, state, noise, mask)
    }

    /// One action at control time: fresh parameter noise and mask per call.
    pub fn act(&self, state: &[f64], seed: u64) -> Result<Vec<f64>> {
        let noise = self.sample_param_noise(seed);
        let mask = self.sample_dropout_mask(seed.wrapping_add(0x9e3779b97f4a7c15));
        let mut g = Graph::new();
        let s = g.constant(&Tensor::vector(state.to_vec()));
        let a = self.sample(&mut g, &s, &noise, &mask)?;
        Ok(a.data().to_vec())
    }

    /// All parameters as one named set with `mu/` and `rho/` prefixes.
    pub fn gather_params(&self) -> ParamSet {
        let mut ps = ParamSet::new(self.mu.spec_hash().to_string());
        for (name, t) in self.mu.iter() {
            ps.insert(format!("mu/{name}"), t.clone());
        }
        for (name, t) in self.rho.iter() {
            ps.insert(format!("rho/{name}"), t.clone());
        }
        ps
    }

    pub fn scatter_params(&mut self, ps: &ParamSet) -> Result<()> {
        for (name, t) in ps.iter() {
            if let Some(rest) = name.strip_prefix("mu/") {
                self.mu.insert(rest, t.clone());
            } else if let Some(rest) = name.strip_prefix("rho/") {
                self.rho.insert(rest, t.clone());
            } else {
                return Err(NnError::ParamMismatch(format!("bad name {name}")));
            }
        }
        Ok(())
    }

    pub fn collect_grads(
        &self,
        b: &NbpBinding,
        grads: &crate::autodiff::GradientMap,
    ) -> Result<crate::nn::NamedGrads> {
        let mut out = crate::nn::NamedGrads::new();
        for (name, t) in b.mu.iter() {
            out.insert(format!("mu/{name}"), grads.grad(t)?);
        }
        for (name, t) in b.rho.iter() {
            out.insert(format!("rho/{name}"), grads.grad(t)?);
        }
        Ok(out)
    }
}

//! Factorized Gaussian policy baseline: a state-conditioned mean network
//! with a global learnable log-std per action dimension. Used as the
//! uni-modal contrast for the expressive policies.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Tensor};
use crate::nn::{
    bind, init_mlp_into, mlp_forward_prefixed, Activation, BoundParams, MlpSpec, ParamSet, Result,
    spec_hash,
};

pub const LOG_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Clone)]
pub struct GaussianPolicy {
    pub state_dim: usize,
    pub action_dim: usize,
    pub spec: MlpSpec,
    /// Mean net under `mean/`, plus a `log_std` vector of length action_dim.
    pub params: ParamSet,
}

impl GaussianPolicy {
    pub fn new(state_dim: usize, action_dim: usize, hidden: Vec<usize>, seed: u64) -> Result<Self> {
        let mut widths = vec![state_dim];
        widths.extend_from_slice(&hidden);
        widths.push(action_dim);
        let spec = MlpSpec::new(widths, Activation::Tanh, Activation::Identity)?;
        let mut params = ParamSet::new(spec_hash(&spec));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_mlp_into(&mut params, "mean/", &spec, &mut rng);
        params.insert("log_std", Tensor::vector(vec![0.0; action_dim]));
        Ok(GaussianPolicy { state_dim, action_dim, spec, params })
    }

    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        bind(&self.params, g)
    }

    pub fn mean_bound(&self, g: &mut Graph, b: &BoundParams, states: &Tensor) -> Result<Tensor> {
        mlp_forward_prefixed(g, b, "mean/", &self.spec, states, None)
    }

    /// Reparameterized draw: a = mean(s) + exp(log_std) * eps.
    pub fn sample_bound(
        &self,
        g: &mut Graph,
        b: &BoundParams,
        states: &Tensor,
        noise: &Tensor,
    ) -> Result<Tensor> {
        let mu = self.mean_bound(g, b, states)?;
        let ls = b.get("log_std").unwrap();
        let std = g.exp(ls)?;
        let jitter = g.mul(noise, &std)?;
        Ok(g.add(&mu, &jitter)?)
    }

    /// Diagonal-Gaussian log-density per row: states `[N, n]`, actions
    /// `[N, m]` -> `[N]` (or unbatched vectors -> scalar).
    pub fn log_prob_bound(
        &self,
        g: &mut Graph,
        b: &BoundParams,
        states: &Tensor,
        actions: &Tensor,
    ) -> Result<Tensor> {
        let mu = self.mean_bound(g, b, states)?;
        let ls = b.get("log_std").unwrap();
        let std = g.exp(ls)?;
        let centered = g.sub(actions, &mu)?;
        let z = g.div(&centered, &std)?;
        let z2 = g.square(&z)?;
        let m = self.action_dim;
        let quad = match z2.shape() {
            [_] => g.sum(&z2)?,
            [n, mm] => {
                let ones = g.constant(&Tensor::new(vec![*mm, 1], vec![1.0; *mm])?);
                let col = g.matmul(&z2, &ones)?;
                g.reshape(&col, vec![*n])?
            }
            _ => unreachable!(),
        };
        let quad = g.scale(&quad, -0.5)?;
        let ls_sum = g.sum(ls)?;
        let shifted = g.sub(&quad, &ls_sum)?;
        let c = g.constant(&Tensor::scalar(-0.5 * m as f64 * LOG_2PI));
        Ok(g.add(&shifted, &c)?)
    }

    /// Exact entropy, state-free: sum(log_std) + m/2 (1 + log 2 pi).
    pub fn entropy(&self) -> f64 {
        let ls: f64 = self.params.get("log_std").unwrap().data().iter().sum();
        ls + 0.5 * self.action_dim as f64 * (1.0 + LOG_2PI)
    }

    pub fn log_prob(&self, g: &mut Graph, states: &Tensor, actions: &Tensor) -> Result<Tensor> {
        let b = self.bind(g);
        self.log_prob_bound(g, &b, states, actions)
    }

    pub fn act(&self, state: &[f64], seed: u64) -> Result<Vec<f64>> {
        let noise = crate::flow::sample_base_noise(1, self.action_dim, seed);
        let mut g = Graph::new();
        let s = g.constant(&Tensor::vector(state.to_vec()));
        let n = g.constant(&Tensor::vector(noise.data().to_vec()));
        let b = self.bind(&mut g);
        Ok(self.sample_bound(&mut g, &b, &s, &n)?.data().to_vec())
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

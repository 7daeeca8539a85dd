//! Classifier-based entropy estimation for density-free policies.
//!
//! A logit network c(s,a) is trained with binary cross-entropy to tell
//! policy actions from uniform draws over the action box. At its optimum
//! c*(s,a) = log(pi(a|s) * |A|), so mean(-c) + log|A| estimates the
//! entropy, and the entropy gradient flows only through the sampled
//! actions with the classifier frozen.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Tensor};
use crate::nn::{
    bind, init_params, mlp_forward_prefixed, adam_step, grads_by_name, Activation, AdamState,
    BoundParams, MlpSpec, NnError, ParamSet, Result,
};

/// Logit network over state-action pairs with its action-box volume.
#[derive(Debug, Clone)]
pub struct DensityClassifier {
    pub spec: MlpSpec,
    pub params: ParamSet,
    pub state_dim: usize,
    pub action_dim: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
}

impl DensityClassifier {
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        hidden: Vec<usize>,
        action_low: Vec<f64>,
        action_high: Vec<f64>,
        seed: u64,
    ) -> Result<Self> {
        if action_low.len() != action_dim || action_high.len() != action_dim {
            return Err(NnError::BadSpec("action box dims != action_dim".into()));
        }
        if action_low.iter().zip(&action_high).any(|(l, h)| l >= h) {
            return Err(NnError::BadSpec("empty action box".into()));
        }
        let mut widths = vec![state_dim + action_dim];
        widths.extend_from_slice(&hidden);
        widths.push(1);
        let spec = MlpSpec::new(widths, Activation::Tanh, Activation::Identity)?;
        let params = init_params(&spec, seed);
        Ok(DensityClassifier { spec, params, state_dim, action_dim, action_low, action_high })
    }

    pub fn log_volume(&self) -> f64 {
        self.action_low
            .iter()
            .zip(&self.action_high)
            .map(|(l, h)| (h - l).ln())
            .sum()
    }

    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        bind(&self.params, g)
    }

    /// Logits for a batch: states `[N, n]`, actions `[N, m]` -> `[N]`.
    /// Gradients flow into both the classifier parameters and the actions.
    pub fn logits_bound(
        &self,
        g: &mut Graph,
        b: &BoundParams,
        states: &Tensor,
        actions: &Tensor,
    ) -> Result<Tensor> {
        let x = g.concat(&[states, actions])?;
        let out = mlp_forward_prefixed(g, b, "", &self.spec, &x, None)?;
        match out.shape() {
            [n, 1] => Ok(g.reshape(&out, vec![*n])?),
            _ => Ok(out),
        }
    }

    /// Binary cross-entropy with policy samples as positives and uniform
    /// box samples as negatives; stable via softplus identities.
    pub fn loss_bound(
        &self,
        g: &mut Graph,
        b: &BoundParams,
        pos_states: &Tensor,
        pos_actions: &Tensor,
        neg_states: &Tensor,
        neg_actions: &Tensor,
    ) -> Result<Tensor> {
        let c_pos = self.logits_bound(g, b, pos_states, pos_actions)?;
        let c_neg = self.logits_bound(g, b, neg_states, neg_actions)?;
        // -log sigmoid(x) = softplus(-x); -log(1 - sigmoid(x)) = softplus(x)
        let neg_cp = g.neg(&c_pos)?;
        let lp = g.softplus(&neg_cp)?;
        let ln = g.softplus(&c_neg)?;
        let mp = g.mean(&lp)?;
        let mn = g.mean(&ln)?;
        Ok(g.add(&mp, &mn)?)
    }

    /// Uniform draws over the action box, shape `[n, m]`.
    pub fn sample_uniform_actions(&self, n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = self.action_dim;
        let mut data = Vec::with_capacity(n * m);
        for _ in 0..n {
            for d in 0..m {
                data.push(rng.gen_range(self.action_low[d]..self.action_high[d]));
            }
        }
        Tensor::new(vec![n, m], data).unwrap()
    }

    /// One BCE gradient step against fresh uniform negatives; returns the
    /// loss value before the step.
    pub fn update(
        &mut self,
        states: &Tensor,
        policy_actions: &Tensor,
        neg_seed: u64,
        adam: &mut AdamState,
        lr: f64,
    ) -> Result<f64> {
        let n = states.shape()[0];
        let neg_actions = self.sample_uniform_actions(n, neg_seed);
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let sc = g.constant(states);
        let pa = g.constant(policy_actions);
        let na = g.constant(&neg_actions);
        let loss = self.loss_bound(&mut g, &b, &sc, &pa, &sc, &na)?;
        let grads = g.backward(&loss)?;
        let named = grads_by_name(&b, &grads)?;
        adam_step(&mut self.params, &named, adam, lr)?;
        Ok(loss.item())
    }

    /// mean(-c(s,a)) over in-graph actions; the differentiable entropy
    /// surrogate of the frozen-classifier gradient (no log|A| offset, which
    /// is parameter-free).
    pub fn entropy_surrogate(
        &self,
        g: &mut Graph,
        b: &BoundParams,
        states: &Tensor,
        actions: &Tensor,
    ) -> Result<Tensor> {
        let c = self.logits_bound(g, b, states, actions)?;
        let neg = g.neg(&c)?;
        Ok(g.mean(&neg)?)
    }

    /// Reported entropy: mean(-c) + log|A|, comparable to analytic values.
    pub fn entropy_estimate(&self, states: &Tensor, actions: &Tensor) -> Result<f64> {
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let sc = g.constant(states);
        let ac = g.constant(actions);
        let surr = self.entropy_surrogate(&mut g, &b, &sc, &ac)?;
        Ok(surr.item() + self.log_volume())
    }
}

//! Training procedures: clipped-surrogate on-policy updates with an
//! entropy bonus for flow policies (and a factorized-Gaussian baseline in
//! the same loop), and the off-policy pathwise algorithm for blackbox
//! policies: replay buffer, TD critic, density classifier, hard target
//! sync. Every loop is deterministic given (config, seed).

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::entropy::DensityClassifier;
use crate::envs::{Env, EnvSpec, Trajectory};
use crate::flow::{sample_base_noise, FlowPolicy};
use crate::gaussian::GaussianPolicy;
use crate::nbp::{NbpConfig, NoisyMlpPolicy};
use crate::nn::{
    adam_step, bind, grads_by_name, init_params, mlp_forward_prefixed, save_checkpoint,
    Activation, AdamState, BoundParams, MlpSpec, NamedGrads, NnError, ParamSet,
};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AlgoError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Ad(#[from] crate::autodiff::AdError),
    #[error(transparent)]
    Env(#[from] crate::envs::EnvError),
    #[error("non-finite loss at step {step}: {what}")]
    Diverged { step: usize, what: String },
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AlgoError>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub r: f64,
    pub s2: Vec<f64>,
    pub done: bool,
}

/// Fixed-capacity ring buffer with uniform sampling.
pub struct ReplayBuffer {
    capacity: usize,
    data: Vec<Transition>,
    pos: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "capacity must be positive");
        ReplayBuffer { capacity, data: Vec::new(), pos: 0 }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        assert!(t.r.is_finite(), "non-finite reward");
        if self.data.len() < self.capacity {
            self.data.push(t);
        } else {
            self.data[self.pos] = t;
        }
        self.pos = (self.pos + 1) % self.capacity;
    }

    pub fn sample_indices(&self, rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
        (0..n).map(|_| rng.gen_range(0..self.data.len())).collect()
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.data[i]
    }
}

fn default_one() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Entropy regularization coefficient, >= 0.
    pub beta: f64,
    pub gamma: f64,
    pub lr_policy: f64,
    pub lr_critic: f64,
    pub lr_classifier: f64,
    /// Hard target-sync period in environment steps.
    pub tau: usize,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub total_steps: usize,
    pub clip_eps: f64,
    pub gae_lambda: f64,
    pub rollout_len: usize,
    pub epochs: usize,
    pub minibatch: usize,
    pub seed: u64,
    pub log_interval: usize,
    /// Gradient updates per environment step in the off-policy loop.
    #[serde(default = "default_one")]
    pub update_every: usize,
    /// Standardize advantages per iteration; disable when beta should trade
    /// off against the raw reward scale.
    #[serde(default = "default_true")]
    pub normalize_advantages: bool,
}

fn default_true() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beta: 0.01,
            gamma: 0.99,
            lr_policy: 3e-4,
            lr_critic: 1e-3,
            lr_classifier: 1e-3,
            tau: 500,
            batch_size: 64,
            buffer_capacity: 100_000,
            total_steps: 10_000,
            clip_eps: 0.2,
            gae_lambda: 0.95,
            rollout_len: 2048,
            epochs: 10,
            minibatch: 64,
            seed: 0,
            log_interval: 500,
            update_every: 1,
            normalize_advantages: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta < 0.0 {
            return Err(AlgoError::BadConfig("beta must be nonnegative".into()));
        }
        if !(0.0 < self.gamma && self.gamma <= 1.0) {
            return Err(AlgoError::BadConfig("gamma must lie in (0, 1]".into()));
        }
        for (name, v) in [
            ("lr_policy", self.lr_policy),
            ("lr_critic", self.lr_critic),
            ("lr_classifier", self.lr_classifier),
            ("clip_eps", self.clip_eps),
        ] {
            if v <= 0.0 {
                return Err(AlgoError::BadConfig(format!("{name} must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(AlgoError::BadConfig("gae_lambda must lie in [0, 1]".into()));
        }
        for (name, v) in [
            ("tau", self.tau),
            ("batch_size", self.batch_size),
            ("buffer_capacity", self.buffer_capacity),
            ("rollout_len", self.rollout_len),
            ("epochs", self.epochs),
            ("minibatch", self.minibatch),
            ("log_interval", self.log_interval),
            ("update_every", self.update_every),
        ] {
            if v == 0 {
                return Err(AlgoError::BadConfig(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// One metric-log record. Wall-clock time is deliberately absent so that
/// reruns with the same config and seed produce byte-identical logs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricRecord {
    pub step: usize,
    pub episode_return_mean: Option<f64>,
    pub critic_loss: Option<f64>,
    pub classifier_loss: Option<f64>,
    pub entropy_estimate: Option<f64>,
}

pub fn metrics_to_jsonl(records: &[MetricRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn write_metrics_jsonl(path: &Path, records: &[MetricRecord]) -> Result<()> {
    std::fs::write(path, metrics_to_jsonl(records))?;
    Ok(())
}

/// Generalized advantage estimation over one contiguous rollout.
/// `values[t]` predicts V(s_t); `last_value` bootstraps past the rollout
/// end when the final transition is not terminal.
pub fn compute_advantages(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    last_value: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    assert_eq!(values.len(), n);
    assert_eq!(dones.len(), n);
    let mut adv = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let next_v = if dones[t] {
            0.0
        } else if t + 1 < n {
            values[t + 1]
        } else {
            last_value
        };
        let delta = rewards[t] + gamma * next_v - values[t];
        acc = delta + if dones[t] { 0.0 } else { gamma * lambda * acc };
        adv[t] = acc;
    }
    let returns: Vec<f64> = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

fn rows_matrix(rows: &[Vec<f64>]) -> Tensor {
    let n = rows.len();
    let d = rows[0].len();
    let mut data = Vec::with_capacity(n * d);
    for r in rows {
        data.extend_from_slice(r);
    }
    Tensor::new(vec![n, d], data).unwrap()
}

/// State-action value network Q(s, a).
pub struct QCritic {
    pub spec: MlpSpec,
    pub params: ParamSet,
    pub state_dim: usize,
    pub action_dim: usize,
}

impl QCritic {
    pub fn new(state_dim: usize, action_dim: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        let mut widths = vec![state_dim + action_dim];
        widths.extend_from_slice(hidden);
        widths.push(1);
        let spec = MlpSpec::new(widths, Activation::Relu, Activation::Identity)?;
        let params = init_params(&spec, seed);
        Ok(QCritic { spec, params, state_dim, action_dim })
    }

    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        bind(&self.params, g)
    }

    /// Q over a batch: states `[N, n]`, actions `[N, m]` -> `[N]`.
    pub fn q_bound(
        &self,
        g: &mut Graph,
        b: &BoundParams,
        states: &Tensor,
        actions: &Tensor,
    ) -> Result<Tensor> {
        let x = g.concat(&[states, actions])?;
        let out = mlp_forward_prefixed(g, b, "", &self.spec, &x, None)?;
        let n = out.shape()[0];
        Ok(g.reshape(&out, vec![n])?)
    }

    /// Numeric Q values without touching any training graph.
    pub fn q_values(&self, states: &Tensor, actions: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let sc = g.constant(states);
        let ac = g.constant(actions);
        let q = self.q_bound(&mut g, &b, &sc, &ac)?;
        Ok(q.data().to_vec())
    }
}

/// One Adam step on the critic against targets r + gamma Q'(s', a') with
/// a' drawn from the target policy under fresh noise; done transitions
/// drop the bootstrap.
pub fn td_critic_update(
    critic: &mut QCritic,
    target_critic: &QCritic,
    target_policy: &NoisyMlpPolicy,
    buffer: &ReplayBuffer,
    indices: &[usize],
    gamma: f64,
    adam: &mut AdamState,
    lr: f64,
    noise_seed: u64,
) -> Result<f64> {
    let batch: Vec<&Transition> = indices.iter().map(|i| buffer.get(*i)).collect();
    let states = rows_matrix(&batch.iter().map(|t| t.s.clone()).collect::<Vec<_>>());
    let actions = rows_matrix(&batch.iter().map(|t| t.a.clone()).collect::<Vec<_>>());
    let next_states = rows_matrix(&batch.iter().map(|t| t.s2.clone()).collect::<Vec<_>>());

    // Targets are plain numbers; no gradient flows into the target nets.
    let next_actions = {
        let mut g = Graph::new();
        let noise = target_policy.sample_param_noise(noise_seed);
        let mask = target_policy.sample_dropout_mask(noise_seed.wrapping_add(0x9e37));
        let sc = g.constant(&next_states);
        let a = target_policy.sample(&mut g, &sc, &noise, &mask)?;
        Tensor::new(a.shape().to_vec(), a.data().to_vec())?
    };
    let next_q = target_critic.q_values(&next_states, &next_actions)?;
    let targets: Vec<f64> = batch
        .iter()
        .zip(&next_q)
        .map(|(t, q)| t.r + if t.done { 0.0 } else { gamma * q })
        .collect();
    if targets.iter().any(|v| !v.is_finite()) {
        return Err(AlgoError::Diverged { step: 0, what: "TD target".into() });
    }

    let mut g = Graph::new();
    let b = critic.bind(&mut g);
    let sc = g.constant(&states);
    let ac = g.constant(&actions);
    let q = critic.q_bound(&mut g, &b, &sc, &ac)?;
    let y = g.constant(&Tensor::vector(targets));
    let err = g.sub(&q, &y)?;
    let sq = g.square(&err)?;
    let loss = g.mean(&sq)?;
    let grads = g.backward(&loss)?;
    let named = grads_by_name(&b, &grads)?;
    adam_step(&mut critic.params, &named, adam, lr)?;
    Ok(loss.item())
}

#[derive(Debug, Clone)]
pub struct PathwiseReport {
    pub objective: f64,
    pub q_mean: f64,
    pub entropy_surrogate: f64,
}

/// Ascend E[Q(s, f_theta(s, eps))] + beta E[-c(s, f_theta(s, eps))] through
/// the reparameterized sample path; critic and classifier stay frozen.
pub fn pathwise_policy_update(
    policy: &mut NoisyMlpPolicy,
    critic: &QCritic,
    clf: &DensityClassifier,
    states: &Tensor,
    beta: f64,
    adam: &mut AdamState,
    lr: f64,
    noise_seed: u64,
) -> Result<PathwiseReport> {
    let mut g = Graph::new();
    let pb = policy.bind(&mut g);
    let noise = policy.sample_param_noise(noise_seed);
    let mask = policy.sample_dropout_mask(noise_seed.wrapping_add(0x9e3779b97f4a7c15));
    let sc = g.constant(states);
    let actions = policy.sample_bound(&mut g, &pb, &sc, &noise, &mask)?;

    let cb = critic.bind(&mut g);
    let q = critic.q_bound(&mut g, &cb, &sc, &actions)?;
    let q_mean = g.mean(&q)?;
    let clf_b = clf.bind(&mut g);
    let ent = clf.entropy_surrogate(&mut g, &clf_b, &sc, &actions)?;
    let scaled_ent = g.scale(&ent, beta)?;
    let objective = g.add(&q_mean, &scaled_ent)?;
    let loss = g.neg(&objective)?;
    if !loss.item().is_finite() {
        return Err(AlgoError::Diverged { step: 0, what: "policy objective".into() });
    }
    let grads = g.backward(&loss)?;
    let named = policy.collect_grads(&pb, &grads)?;
    let mut ps = policy.gather_params();
    adam_step(&mut ps, &named, adam, lr)?;
    policy.scatter_params(&ps)?;
    Ok(PathwiseReport {
        objective: objective.item(),
        q_mean: q_mean.item(),
        entropy_surrogate: ent.item(),
    })
}

/// Policies the on-policy loop can train: exact-density flows and the
/// factorized-Gaussian baseline share one code path.
pub enum OnPolicyActor {
    Flow(FlowPolicy),
    Gaussian(GaussianPolicy),
}

/// Graph leaves for one actor, shared across the surrogate and entropy
/// terms so their gradients accumulate on the same nodes.
pub enum ActorBinding {
    Flow(crate::flow::FlowBinding),
    Gaussian(BoundParams),
}

impl OnPolicyActor {
    pub fn bind(&self, g: &mut Graph) -> ActorBinding {
        match self {
            OnPolicyActor::Flow(p) => ActorBinding::Flow(p.bind(g)),
            OnPolicyActor::Gaussian(p) => ActorBinding::Gaussian(p.bind(g)),
        }
    }

    pub fn action_dim(&self) -> usize {
        match self {
            OnPolicyActor::Flow(p) => p.config.action_dim,
            OnPolicyActor::Gaussian(p) => p.action_dim,
        }
    }

    /// Draw one action and its log-density at a single state.
    pub fn act(&self, state: &[f64], seed: u64) -> Result<(Vec<f64>, f64)> {
        let m = self.action_dim();
        let noise_m = sample_base_noise(1, m, seed);
        let noise = Tensor::vector(noise_m.data().to_vec());
        let mut g = Graph::new();
        let s = g.constant(&Tensor::vector(state.to_vec()));
        let nz = g.constant(&noise);
        match self {
            OnPolicyActor::Flow(p) => {
                let (a, logp) = p.sample(&mut g, &s, &nz)?;
                Ok((a.data().to_vec(), logp.item()))
            }
            OnPolicyActor::Gaussian(p) => {
                let b = p.bind(&mut g);
                let a = p.sample_bound(&mut g, &b, &s, &nz)?;
                let logp = p.log_prob_bound(&mut g, &b, &s, &a)?;
                Ok((a.data().to_vec(), logp.item()))
            }
        }
    }

    pub fn log_prob_bound(
        &self,
        g: &mut Graph,
        b: &ActorBinding,
        states: &Tensor,
        actions: &Tensor,
    ) -> Result<Tensor> {
        match (self, b) {
            (OnPolicyActor::Flow(p), ActorBinding::Flow(fb)) => {
                Ok(p.log_prob_bound(g, fb, states, actions)?)
            }
            (OnPolicyActor::Gaussian(p), ActorBinding::Gaussian(gb)) => {
                Ok(p.log_prob_bound(g, gb, states, actions)?)
            }
            _ => unreachable!("binding kind matches actor kind"),
        }
    }

    /// Differentiable entropy term: Monte-Carlo mean of -log pi for flows,
    /// closed form for the Gaussian.
    pub fn entropy_bound(
        &self,
        g: &mut Graph,
        b: &ActorBinding,
        states: &Tensor,
        seed: u64,
    ) -> Result<Tensor> {
        match (self, b) {
            (OnPolicyActor::Flow(p), ActorBinding::Flow(fb)) => {
                let n = states.shape()[0];
                let noise = g.constant(&sample_base_noise(n, p.config.action_dim, seed));
                let (_, logp) = p.sample_bound(g, fb, states, &noise)?;
                let neg = g.neg(&logp)?;
                Ok(g.mean(&neg)?)
            }
            (OnPolicyActor::Gaussian(p), ActorBinding::Gaussian(gb)) => {
                let ls = gb.get("log_std").unwrap().clone();
                let ls_sum = g.sum(&ls)?;
                let m = p.action_dim as f64;
                let c = g.constant(&Tensor::scalar(0.5 * m * (1.0 + crate::gaussian::LOG_2PI)));
                Ok(g.add(&ls_sum, &c)?)
            }
            _ => unreachable!("binding kind matches actor kind"),
        }
    }

    pub fn collect_grads(
        &self,
        b: &ActorBinding,
        grads: &crate::autodiff::GradientMap,
    ) -> Result<NamedGrads> {
        match (self, b) {
            (OnPolicyActor::Flow(p), ActorBinding::Flow(fb)) => Ok(p.collect_grads(fb, grads)?),
            (OnPolicyActor::Gaussian(p), ActorBinding::Gaussian(gb)) => {
                Ok(p.collect_grads(gb, grads)?)
            }
            _ => unreachable!("binding kind matches actor kind"),
        }
    }

    pub fn gather_params(&self) -> ParamSet {
        match self {
            OnPolicyActor::Flow(p) => p.gather_params(),
            OnPolicyActor::Gaussian(p) => p.params.clone(),
        }
    }

    pub fn scatter_params(&mut self, ps: &ParamSet) -> Result<()> {
        match self {
            OnPolicyActor::Flow(p) => p.scatter_params(ps)?,
            OnPolicyActor::Gaussian(p) => p.params = ps.clone(),
        }
        Ok(())
    }
}

/// One on-policy rollout, stored flat for minibatching.
#[derive(Debug, Clone, Default)]
pub struct Rollout {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub old_logp: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// State-value network used by the on-policy loop.
pub struct ValueNet {
    pub spec: MlpSpec,
    pub params: ParamSet,
}

impl ValueNet {
    pub fn new(state_dim: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        let mut widths = vec![state_dim];
        widths.extend_from_slice(hidden);
        widths.push(1);
        let spec = MlpSpec::new(widths, Activation::Tanh, Activation::Identity)?;
        let params = init_params(&spec, seed);
        Ok(ValueNet { spec, params })
    }

    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        bind(&self.params, g)
    }

    pub fn v_bound(&self, g: &mut Graph, b: &BoundParams, states: &Tensor) -> Result<Tensor> {
        let out = mlp_forward_prefixed(g, b, "", &self.spec, states, None)?;
        let n = out.shape()[0];
        Ok(g.reshape(&out, vec![n])?)
    }

    pub fn values(&self, states: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let sc = g.constant(states);
        Ok(self.v_bound(&mut g, &b, &sc)?.data().to_vec())
    }
}

#[derive(Debug, Clone)]
pub struct OnPolicyReport {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub mean_ratio_first_pass: f64,
}

/// Clipped-surrogate update with an entropy bonus: multiple epochs of
/// minibatch Adam steps over one rollout. The clip is realized by a
/// 0/1 mask chosen from the numeric ratio, which reproduces the gradient
/// of min(ratio A, clip(ratio) A) exactly (the clipped branch is constant
/// in the parameters).
pub fn onpolicy_update(
    actor: &mut OnPolicyActor,
    value: &mut ValueNet,
    rollout: &Rollout,
    cfg: &TrainConfig,
    policy_adam: &mut AdamState,
    value_adam: &mut AdamState,
    update_seed: u64,
) -> Result<OnPolicyReport> {
    let n = rollout.len();
    assert!(n > 0, "empty rollout");
    let mut rng = ChaCha8Rng::seed_from_u64(update_seed);

    // Advantage normalization stabilizes the scale across environments, but
    // it must stay off when beta is meant to match an absolute reward scale:
    // rescaled advantages would let the raw entropy bonus dominate.
    let norm_adv: Vec<f64> = if cfg.normalize_advantages {
        let mean_a = rollout.advantages.iter().sum::<f64>() / n as f64;
        let var_a =
            rollout.advantages.iter().map(|a| (a - mean_a).powi(2)).sum::<f64>() / n as f64;
        let std_a = var_a.sqrt().max(1e-8);
        rollout.advantages.iter().map(|a| (a - mean_a) / std_a).collect()
    } else {
        rollout.advantages.clone()
    };

    let mut report = OnPolicyReport {
        policy_loss: 0.0,
        value_loss: 0.0,
        entropy: 0.0,
        mean_ratio_first_pass: f64::NAN,
    };
    let mut first_pass = true;
    let mut batches = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.minibatch) {
            let states = rows_matrix(
                &chunk.iter().map(|i| rollout.states[*i].clone()).collect::<Vec<_>>(),
            );
            let actions = rows_matrix(
                &chunk.iter().map(|i| rollout.actions[*i].clone()).collect::<Vec<_>>(),
            );
            let old_lp: Vec<f64> = chunk.iter().map(|i| rollout.old_logp[*i]).collect();
            let adv: Vec<f64> = chunk.iter().map(|i| norm_adv[*i]).collect();
            let rets: Vec<f64> = chunk.iter().map(|i| rollout.returns[*i]).collect();

            let mut g = Graph::new();
            let ab = actor.bind(&mut g);
            let sc = g.constant(&states);
            let ac = g.constant(&actions);
            let logp = actor.log_prob_bound(&mut g, &ab, &sc, &ac)?;
            let old = g.constant(&Tensor::vector(old_lp.clone()));
            let diff = g.sub(&logp, &old)?;
            let ratio = g.exp(&diff)?;
            if first_pass {
                report.mean_ratio_first_pass =
                    ratio.data().iter().sum::<f64>() / ratio.numel() as f64;
                first_pass = false;
            }
            // Branch selection from the numeric ratio: gradient flows only
            // where the unclipped term attains the min of the clipped
            // surrogate; the clipped branch is constant in the parameters.
            let lo = 1.0 - cfg.clip_eps;
            let hi = 1.0 + cfg.clip_eps;
            let mut mask = vec![0.0; ratio.numel()];
            let mut clipped_part = 0.0;
            for (i, (&r, &a)) in ratio.data().iter().zip(&adv).enumerate() {
                let unclipped = r * a;
                let clipped = r.clamp(lo, hi) * a;
                if unclipped <= clipped {
                    mask[i] = 1.0;
                } else {
                    clipped_part += clipped;
                }
            }
            let bsz = chunk.len() as f64;
            let mask_t = g.constant(&Tensor::vector(mask));
            let adv_t = g.constant(&Tensor::vector(adv));
            let masked = g.mul(&ratio, &mask_t)?;
            let weighted = g.mul(&masked, &adv_t)?;
            let sum_w = g.sum(&weighted)?;
            let mean_obj = g.scale(&sum_w, 1.0 / bsz)?;
            let pg_loss = g.neg(&mean_obj)?;

            let ent = actor.entropy_bound(&mut g, &ab, &sc, rng.gen())?;
            let ent_bonus = g.scale(&ent, cfg.beta)?;

            let vb = value.bind(&mut g);
            let v = value.v_bound(&mut g, &vb, &sc)?;
            let ret_t = g.constant(&Tensor::vector(rets));
            let verr = g.sub(&v, &ret_t)?;
            let vsq = g.square(&verr)?;
            let v_loss = g.mean(&vsq)?;
            let v_half = g.scale(&v_loss, 0.5)?;

            let policy_part = g.sub(&pg_loss, &ent_bonus)?;
            let total = g.add(&policy_part, &v_half)?;
            if !total.item().is_finite() {
                return Err(AlgoError::Diverged { step: epoch, what: "surrogate loss".into() });
            }
            let grads = g.backward(&total)?;

            let actor_grads = actor.collect_grads(&ab, &grads)?;
            let mut actor_ps = actor.gather_params();
            adam_step(&mut actor_ps, &actor_grads, policy_adam, cfg.lr_policy)?;
            actor.scatter_params(&actor_ps)?;

            let value_grads = grads_by_name(&vb, &grads)?;
            adam_step(&mut value.params, &value_grads, value_adam, cfg.lr_critic)?;

            report.policy_loss = pg_loss.item() - clipped_part / bsz;
            report.value_loss = v_loss.item();
            report.entropy = ent.item();
            batches += 1;
        }
    }
    let _ = batches;
    Ok(report)
}

fn save_crash_checkpoint(ps: &ParamSet, dir: Option<&Path>) {
    if let Some(d) = dir {
        let _ = std::fs::create_dir_all(d);
        let _ = save_checkpoint(ps, &d.join("crash_checkpoint.json"));
    }
}

/// Networks trained by the off-policy loop.
pub struct OffPolicyComponents {
    pub policy: NoisyMlpPolicy,
    pub target_policy: NoisyMlpPolicy,
    pub critic: QCritic,
    pub target_critic: QCritic,
    pub clf: DensityClassifier,
}

impl OffPolicyComponents {
    pub fn new(env_spec: &EnvSpec, seed: u64, rho_init: f64) -> Result<Self> {
        let n = env_spec.state_dim();
        let m = env_spec.action_dim();
        let mut nbp_cfg = NbpConfig::new(n, m, env_spec.action_low(), env_spec.action_high());
        nbp_cfg.rho_init = rho_init;
        let policy = NoisyMlpPolicy::new(nbp_cfg.clone(), seed)?;
        let mut target_policy = NoisyMlpPolicy::new(nbp_cfg, seed)?;
        target_policy.scatter_params(&policy.gather_params())?;
        let critic = QCritic::new(n, m, &[64, 64], seed.wrapping_add(1))?;
        let mut target_critic = QCritic::new(n, m, &[64, 64], seed.wrapping_add(1))?;
        target_critic.params = critic.params.clone();
        let clf = DensityClassifier::new(
            n,
            m,
            vec![64, 64],
            vec![env_spec.action_low(); m],
            vec![env_spec.action_high(); m],
            seed.wrapping_add(2),
        )?;
        Ok(OffPolicyComponents { policy, target_policy, critic, target_critic, clf })
    }
}

/// Off-policy training: act, store, then per stored step one critic
/// update, one classifier update and one pathwise policy update, with a
/// hard target sync every tau steps.
pub fn train_offpolicy(
    env_spec: &EnvSpec,
    cfg: &TrainConfig,
    comps: &mut OffPolicyComponents,
    crash_dir: Option<&Path>,
) -> Result<Vec<MetricRecord>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut env = Env::new(env_spec.clone(), rng.gen())?;
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity);
    let mut critic_adam = AdamState::new();
    let mut clf_adam = AdamState::new();
    let mut policy_adam = AdamState::new();
    let warmup = cfg.batch_size.max(1000);

    let mut metrics = Vec::new();
    let mut s = env.reset();
    let mut ep_ret = 0.0;
    let mut completed: Vec<f64> = Vec::new();
    let mut last_critic_loss = None;
    let mut last_clf_loss = None;
    let mut last_entropy = None;

    for step in 1..=cfg.total_steps {
        let a = comps.policy.act(&s, rng.gen())?;
        let (s2, r, done) = env.step(&a);
        ep_ret += r;
        buffer.push(Transition { s: s.clone(), a, r, s2: s2.clone(), done });
        if done {
            completed.push(ep_ret);
            ep_ret = 0.0;
            s = env.reset();
        } else {
            s = s2;
        }

        if buffer.len() >= warmup && step % cfg.update_every == 0 {
            let idx = buffer.sample_indices(&mut rng, cfg.batch_size);
            let closs = td_critic_update(
                &mut comps.critic,
                &comps.target_critic,
                &comps.target_policy,
                &buffer,
                &idx,
                cfg.gamma,
                &mut critic_adam,
                cfg.lr_critic,
                rng.gen(),
            )
            .map_err(|e| {
                save_crash_checkpoint(&comps.policy.gather_params(), crash_dir);
                match e {
                    AlgoError::Diverged { what, .. } => AlgoError::Diverged { step, what },
                    other => other,
                }
            })?;
            last_critic_loss = Some(closs);

            let states = rows_matrix(&idx.iter().map(|i| buffer.get(*i).s.clone()).collect::<Vec<_>>());
            let pol_actions = {
                let mut g = Graph::new();
                let noise = comps.policy.sample_param_noise(rng.gen());
                let mask = comps.policy.sample_dropout_mask(rng.gen());
                let sc = g.constant(&states);
                let a = comps.policy.sample(&mut g, &sc, &noise, &mask)?;
                Tensor::new(a.shape().to_vec(), a.data().to_vec())?
            };
            let clf_loss =
                comps.clf.update(&states, &pol_actions, rng.gen(), &mut clf_adam, cfg.lr_classifier)?;
            last_clf_loss = Some(clf_loss);
            last_entropy = Some(comps.clf.entropy_estimate(&states, &pol_actions)?);

            let preport = pathwise_policy_update(
                &mut comps.policy,
                &comps.critic,
                &comps.clf,
                &states,
                cfg.beta,
                &mut policy_adam,
                cfg.lr_policy,
                rng.gen(),
            )
            .map_err(|e| {
                save_crash_checkpoint(&comps.policy.gather_params(), crash_dir);
                match e {
                    AlgoError::Diverged { what, .. } => AlgoError::Diverged { step, what },
                    other => other,
                }
            })?;
            let _ = preport;
        }

        if step % cfg.tau == 0 {
            comps.target_policy.scatter_params(&comps.policy.gather_params())?;
            comps.target_critic.params = comps.critic.params.clone();
        }

        if step % cfg.log_interval == 0 {
            let ret_mean = if completed.is_empty() {
                None
            } else {
                Some(completed.iter().sum::<f64>() / completed.len() as f64)
            };
            completed.clear();
            metrics.push(MetricRecord {
                step,
                episode_return_mean: ret_mean,
                critic_loss: last_critic_loss,
                classifier_loss: last_clf_loss,
                entropy_estimate: last_entropy,
            });
        }
    }
    Ok(metrics)
}

/// On-policy training: repeat rollout collection, advantage estimation and
/// clipped-surrogate updates until the step budget is spent.
pub fn train_onpolicy(
    env_spec: &EnvSpec,
    actor: &mut OnPolicyActor,
    value: &mut ValueNet,
    cfg: &TrainConfig,
) -> Result<Vec<MetricRecord>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut env = Env::new(env_spec.clone(), rng.gen())?;
    let mut policy_adam = AdamState::new();
    let mut value_adam = AdamState::new();
    let mut metrics = Vec::new();
    let mut s = env.reset();
    let mut ep_ret = 0.0;
    let mut steps = 0usize;

    while steps < cfg.total_steps {
        let mut roll = Rollout::default();
        let mut completed = Vec::new();
        let mut last_state = s.clone();
        let mut last_done = false;
        for _ in 0..cfg.rollout_len {
            let (a, logp) = actor.act(&s, rng.gen())?;
            let (s2, r, done) = env.step(&a);
            ep_ret += r;
            roll.states.push(s.clone());
            roll.actions.push(a);
            roll.rewards.push(r);
            roll.dones.push(done);
            roll.old_logp.push(logp);
            if done {
                completed.push(ep_ret);
                ep_ret = 0.0;
                s = env.reset();
            } else {
                s = s2;
            }
            last_state = s.clone();
            last_done = done;
            steps += 1;
        }
        let states_t = rows_matrix(&roll.states);
        let values = value.values(&states_t)?;
        let last_value = if last_done {
            0.0
        } else {
            value.values(&rows_matrix(&[last_state.clone()]))?[0]
        };
        let (adv, rets) = compute_advantages(
            &roll.rewards,
            &values,
            &roll.dones,
            last_value,
            cfg.gamma,
            cfg.gae_lambda,
        );
        roll.advantages = adv;
        roll.returns = rets;

        let report =
            onpolicy_update(actor, value, &roll, cfg, &mut policy_adam, &mut value_adam, rng.gen())?;
        let ret_mean = if completed.is_empty() {
            None
        } else {
            Some(completed.iter().sum::<f64>() / completed.len() as f64)
        };
        metrics.push(MetricRecord {
            step: steps,
            episode_return_mean: ret_mean,
            critic_loss: Some(report.value_loss),
            classifier_loss: None,
            entropy_estimate: Some(report.entropy),
        });
    }
    Ok(metrics)
}

#[derive(Debug, Clone, Copy)]
pub struct EstimatorStats {
    pub mean: f64,
    pub se: f64,
}

/// Pathwise gradient of E[-a^2] for the 1D location policy a = theta + eps.
/// The mean comes from one reverse pass over the whole sample; the standard
/// error from the per-sample pathwise terms -2 a_i.
pub fn quadratic_bandit_pathwise(theta: f64, n: usize, seed: u64) -> EstimatorStats {
    let eps = sample_base_noise(1, n, seed);
    let mut g = Graph::new();
    let th = g.leaf(&Tensor::scalar(theta));
    let ec = g.constant(&Tensor::vector(eps.data().to_vec()));
    let a = g.add(&th, &ec).unwrap();
    let sq = g.square(&a).unwrap();
    let neg = g.neg(&sq).unwrap();
    let obj = g.mean(&neg).unwrap();
    let grads = g.backward(&obj).unwrap();
    let mean = grads.grad(&th).unwrap().item();
    let per: Vec<f64> = a.data().iter().map(|ai| -2.0 * ai).collect();
    let m = per.iter().sum::<f64>() / n as f64;
    let var = per.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    EstimatorStats { mean, se: (var / n as f64).sqrt() }
}

/// Score-function gradient of the same objective: E[R(a) (a - theta)],
/// using the unit-variance Gaussian score.
pub fn quadratic_bandit_score(theta: f64, n: usize, seed: u64) -> EstimatorStats {
    let eps = sample_base_noise(1, n, seed);
    let per: Vec<f64> = eps
        .data()
        .iter()
        .map(|e| {
            let a = theta + e;
            -a * a * e
        })
        .collect();
    let m = per.iter().sum::<f64>() / n as f64;
    let var = per.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    EstimatorStats { mean: m, se: (var / n as f64).sqrt() }
}

/// Roll a policy function out for `episodes` episodes.
pub fn rollout_episodes(
    env_spec: &EnvSpec,
    mut act: impl FnMut(&[f64], u64) -> Vec<f64>,
    episodes: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut env = Env::new(env_spec.clone(), rng.gen())?;
    let mut out = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut traj = Trajectory::default();
        let mut s = env.reset();
        loop {
            let a = act(&s, rng.gen());
            let (s2, r, done) = env.step(&a);
            traj.states.push(s.clone());
            traj.actions.push(a);
            traj.rewards.push(r);
            traj.dones.push(done);
            s = s2;
            if done {
                break;
            }
        }
        out.push(traj);
    }
    Ok(out)
}

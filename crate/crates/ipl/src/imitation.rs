//! Combining multiple behavior modes into one policy from demonstrations:
//! maximum-likelihood cloning for exact-density policies and adversarial
//! cloning for blackbox policies, plus expert dataset generation and mode
//! coverage accounting.

use std::io::Write;
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::entropy::DensityClassifier;
use crate::envs::{Env, EnvSpec, Trajectory};
use crate::flow::Monotone1dFlow;
use crate::gaussian::GaussianPolicy;
use crate::nbp::NoisyMlpPolicy;
use crate::nn::{adam_step, bind, grads_by_name, AdamState, NnError};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImitationError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Ad(#[from] crate::autodiff::AdError),
    #[error(transparent)]
    Env(#[from] crate::envs::EnvError),
    #[error("non-finite loss: {0}")]
    NonFinite(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ImitationError>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DemoMetadata {
    pub expert: String,
    pub seed: u64,
    pub episodes: usize,
    pub pairs: usize,
    pub state_dim: usize,
    pub action_dim: usize,
}

/// Flattened (state, action) demonstration pairs.
#[derive(Debug, Clone)]
pub struct DemoDataset {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub metadata: DemoMetadata,
}

impl DemoDataset {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// CSV of (s..., a...) plus a JSON sidecar `<path>.meta.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        let (sd, ad) = (self.metadata.state_dim, self.metadata.action_dim);
        let header: Vec<String> = (0..sd)
            .map(|i| format!("s{i}"))
            .chain((0..ad).map(|i| format!("a{i}")))
            .collect();
        writeln!(f, "{}", header.join(","))?;
        for (s, a) in self.states.iter().zip(&self.actions) {
            let row: Vec<String> =
                s.iter().chain(a.iter()).map(|v| format!("{v}")).collect();
            writeln!(f, "{}", row.join(","))?;
        }
        f.flush()?;
        let meta = serde_json::to_string_pretty(&self.metadata).expect("metadata serializes");
        std::fs::write(sidecar_path(path), meta)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let meta: DemoMetadata =
            serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)
                .map_err(|e| ImitationError::Dataset(format!("bad sidecar: {e}")))?;
        let text = std::fs::read_to_string(path)?;
        let mut states = Vec::new();
        let mut actions = Vec::new();
        for line in text.lines().skip(1) {
            let vals: Vec<f64> = line
                .split(',')
                .map(|v| v.parse().map_err(|e| ImitationError::Dataset(format!("bad value: {e}"))))
                .collect::<Result<_>>()?;
            if vals.len() != meta.state_dim + meta.action_dim {
                return Err(ImitationError::Dataset("row width mismatch".into()));
            }
            states.push(vals[..meta.state_dim].to_vec());
            actions.push(vals[meta.state_dim..].to_vec());
        }
        if states.is_empty() {
            return Err(ImitationError::Dataset("empty dataset".into()));
        }
        Ok(DemoDataset { states, actions, metadata: meta })
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".meta.json");
    std::path::PathBuf::from(p)
}

/// Demonstrator that may re-commit to a behavior mode at episode starts.
pub trait Expert {
    fn begin_episode(&mut self);
    fn act(&mut self, state: &[f64]) -> Vec<f64>;
    fn describe(&self) -> String;
}

impl Expert for crate::envs::BimodalAxisExpert {
    fn begin_episode(&mut self) {
        crate::envs::BimodalAxisExpert::begin_episode(self)
    }

    fn act(&mut self, state: &[f64]) -> Vec<f64> {
        crate::envs::BimodalAxisExpert::act(self, state)
    }

    fn describe(&self) -> String {
        "bimodal-axis endpoint-committed expert".into()
    }
}

/// Roll the expert and flatten every (s, a) pair; deterministic per seed.
pub fn generate_expert_dataset(
    env_spec: &EnvSpec,
    expert: &mut dyn Expert,
    episodes: usize,
    seed: u64,
) -> Result<DemoDataset> {
    assert!(episodes >= 1, "need at least one episode");
    let mut env = Env::new(env_spec.clone(), seed)?;
    let mut states = Vec::new();
    let mut actions = Vec::new();
    for _ in 0..episodes {
        let mut s = env.reset();
        expert.begin_episode();
        loop {
            let a = expert.act(&s);
            let (s2, _, done) = env.step(&a);
            states.push(s.clone());
            actions.push(a);
            s = s2;
            if done {
                break;
            }
        }
    }
    let metadata = DemoMetadata {
        expert: expert.describe(),
        seed,
        episodes,
        pairs: states.len(),
        state_dim: env_spec.state_dim(),
        action_dim: env_spec.action_dim(),
    };
    Ok(DemoDataset { states, actions, metadata })
}

/// Exact-density policies the MLE cloning loop can train.
pub enum CloningPolicy {
    Flow1d(Monotone1dFlow),
    Gaussian(GaussianPolicy),
}

impl CloningPolicy {
    /// One Adam step minimizing the batch mean negative log-likelihood;
    /// returns the NLL before the step.
    pub fn mle_update(
        &mut self,
        states: &Tensor,
        actions: &Tensor,
        adam: &mut AdamState,
        lr: f64,
    ) -> Result<f64> {
        let mut g = Graph::new();
        let sc = g.constant(states);
        let (loss, named, train) = match self {
            CloningPolicy::Flow1d(p) => {
                let n = actions.shape()[0];
                let flat = g.constant(&Tensor::vector(actions.data().to_vec()));
                let _ = n;
                let b = bind(&p.params, &mut g);
                let logp = p.log_prob_bound(&mut g, &b, &sc, &flat)?;
                let neg = g.neg(&logp)?;
                let loss = g.mean(&neg)?;
                let grads = g.backward(&loss)?;
                let named = p.collect_grads(&b, &grads)?;
                (loss.item(), named, &mut p.params)
            }
            CloningPolicy::Gaussian(p) => {
                let ac = g.constant(actions);
                let b = p.bind(&mut g);
                let logp = p.log_prob_bound(&mut g, &b, &sc, &ac)?;
                let neg = g.neg(&logp)?;
                let loss = g.mean(&neg)?;
                let grads = g.backward(&loss)?;
                let named = grads_by_name(&b, &grads)?;
                (loss.item(), named, &mut p.params)
            }
        };
        if !loss.is_finite() {
            return Err(ImitationError::NonFinite("cloning NLL".into()));
        }
        adam_step(train, &named, adam, lr)?;
        Ok(loss)
    }

    pub fn act(&self, state: &[f64], seed: u64) -> Result<Vec<f64>> {
        match self {
            CloningPolicy::Flow1d(p) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let eps: f64 = rand_distr::Distribution::sample(
                    &rand_distr::StandardNormal,
                    &mut rng,
                );
                Ok(vec![p.sample_scalar(state, eps)])
            }
            CloningPolicy::Gaussian(p) => Ok(p.act(state, seed)?),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GanReport {
    pub d_loss: f64,
    pub g_loss: f64,
}

/// Alternating adversarial cloning step: the discriminator separates
/// expert pairs (positive) from policy pairs (negative) by binary cross
/// entropy; the generator ascends log sigma(D(s, f_theta(s, eps))) through
/// the differentiable sample path (non-saturating objective).
pub fn gan_imitation_update(
    policy: &mut NoisyMlpPolicy,
    disc: &mut DensityClassifier,
    expert_states: &Tensor,
    expert_actions: &Tensor,
    d_adam: &mut AdamState,
    g_adam: &mut AdamState,
    d_lr: f64,
    g_lr: f64,
    noise_seed: u64,
) -> Result<GanReport> {
    let n = expert_states.shape()[0];
    assert!(n > 0, "empty expert batch");

    // Policy actions at the expert's states, fixed for the D step.
    let policy_actions = {
        let mut g = Graph::new();
        let noise = policy.sample_param_noise(noise_seed);
        let mask = policy.sample_dropout_mask(noise_seed.wrapping_add(1));
        let sc = g.constant(expert_states);
        let a = policy.sample(&mut g, &sc, &noise, &mask)?;
        Tensor::new(a.shape().to_vec(), a.data().to_vec())?
    };

    // Discriminator step: BCE with expert positives and policy negatives.
    let d_loss = {
        let mut g = Graph::new();
        let b = disc.bind(&mut g);
        let es = g.constant(expert_states);
        let ea = g.constant(expert_actions);
        let pa = g.constant(&policy_actions);
        let loss = disc.loss_bound(&mut g, &b, &es, &ea, &es, &pa)?;
        let v = loss.item();
        if !v.is_finite() {
            return Err(ImitationError::NonFinite("discriminator loss".into()));
        }
        let grads = g.backward(&loss)?;
        let named = grads_by_name(&b, &grads)?;
        adam_step(&mut disc.params, &named, d_adam, d_lr)?;
        v
    };

    // Generator step against the refreshed discriminator; D frozen.
    let g_loss = {
        let mut g = Graph::new();
        let pb = policy.bind(&mut g);
        let noise = policy.sample_param_noise(noise_seed.wrapping_add(2));
        let mask = policy.sample_dropout_mask(noise_seed.wrapping_add(3));
        let sc = g.constant(expert_states);
        let actions = policy.sample_bound(&mut g, &pb, &sc, &noise, &mask)?;
        let db = disc.bind(&mut g);
        let logits = disc.logits_bound(&mut g, &db, &sc, &actions)?;
        // -log sigma(x) = softplus(-x), stable at both tails.
        let neg_logits = g.neg(&logits)?;
        let sp = g.softplus(&neg_logits)?;
        let loss = g.mean(&sp)?;
        let v = loss.item();
        if !v.is_finite() {
            return Err(ImitationError::NonFinite("generator loss".into()));
        }
        let grads = g.backward(&loss)?;
        let named = policy.collect_grads(&pb, &grads)?;
        let mut ps = policy.gather_params();
        adam_step(&mut ps, &named, g_adam, g_lr)?;
        policy.scatter_params(&ps)?;
        v
    };

    Ok(GanReport { d_loss, g_loss })
}

/// Fraction of trajectories matching each disjoint terminal-state
/// descriptor; the unmatched remainder is the final entry.
pub fn mode_coverage(
    trajectories: &[Trajectory],
    descriptors: &[&dyn Fn(&Trajectory) -> bool],
) -> Vec<f64> {
    let total = trajectories.len().max(1) as f64;
    let mut out = vec![0.0; descriptors.len() + 1];
    for traj in trajectories {
        match descriptors.iter().position(|d| d(traj)) {
            Some(i) => out[i] += 1.0,
            None => *out.last_mut().unwrap() += 1.0,
        }
    }
    for v in &mut out {
        *v /= total;
    }
    out
}

/// Roll out a parameter-noise policy committing to one noise and dropout
/// draw per episode, so each episode realizes a single perturbed policy
/// (one behavior mode) rather than per-step jitter.
pub fn rollout_committed(
    spec: &EnvSpec,
    policy: &crate::nbp::NoisyMlpPolicy,
    episodes: usize,
    seed: u64,
) -> std::result::Result<Vec<Trajectory>, crate::envs::EnvError> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut env = Env::new(spec.clone(), rng.gen())?;
    let mut out = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let noise = policy.sample_param_noise(rng.gen());
        let mask = policy.sample_dropout_mask(rng.gen());
        let mut traj = Trajectory::default();
        let mut s = env.reset();
        loop {
            let mut g = Graph::new();
            let sc = g.constant(&Tensor::vector(s.clone()));
            let a = policy
                .sample(&mut g, &sc, &noise, &mask)
                .expect("frozen-noise action")
                .data()
                .to_vec();
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

/// Terminal axis position of a trajectory (last next-state is implicit, so
/// the last pre-step state plus the final clipped action is used).
pub fn axis_endpoint(traj: &Trajectory) -> f64 {
    let last_s = traj.states.last().map(|s| s[0]).unwrap_or(0.0);
    let last_a = traj.actions.last().map(|a| a[0].clamp(-1.0, 1.0)).unwrap_or(0.0);
    (last_s + last_a).clamp(-10.0, 10.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::BimodalAxisExpert;
    use rand::Rng;

    fn bimodal_dataset(episodes: usize, seed: u64) -> DemoDataset {
        let spec = EnvSpec::bimodal_axis();
        let mut expert = BimodalAxisExpert::new(seed.wrapping_add(1));
        generate_expert_dataset(&spec, &mut expert, episodes, seed).unwrap()
    }

    #[test]
    fn expert_dataset_shapes_and_determinism() {
        let d1 = bimodal_dataset(3, 7);
        let d2 = bimodal_dataset(3, 7);
        assert_eq!(d1.states, d2.states);
        assert_eq!(d1.actions, d2.actions);
        assert_eq!(d1.metadata.pairs, d1.len());

        let single = bimodal_dataset(1, 9);
        // One episode: every recorded pair belongs to that episode, and the
        // axis task needs at least 10 unit steps to reach an endpoint.
        assert!(single.len() >= 10 && single.len() <= 50);
    }

    #[test]
    fn expert_first_actions_balance_across_modes() {
        let data = bimodal_dataset(400, 11);
        // First pair of each episode has s = 0; the expert's commitment
        // makes those actions +-1 with equal probability.
        let first_actions: Vec<f64> = data
            .states
            .iter()
            .zip(&data.actions)
            .filter(|(s, _)| s[0] == 0.0)
            .map(|(_, a)| a[0])
            .collect();
        assert!(first_actions.len() >= 400);
        let n = first_actions.len() as f64;
        let mean = first_actions.iter().sum::<f64>() / n;
        // Actions are about +-1, so the SE of the mean is about 1/sqrt(n).
        assert!(mean.abs() <= 3.0 / n.sqrt() + 0.05, "mean {mean}");
    }

    #[test]
    fn dataset_csv_roundtrip() {
        let data = bimodal_dataset(2, 13);
        let dir = std::env::temp_dir().join("ipl_imitation_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("demos.csv");
        data.save(&path).unwrap();
        let loaded = DemoDataset::load(&path).unwrap();
        assert_eq!(loaded.len(), data.len());
        for i in 0..data.len() {
            assert!((loaded.states[i][0] - data.states[i][0]).abs() < 1e-12);
            assert!((loaded.actions[i][0] - data.actions[i][0]).abs() < 1e-12);
        }
        assert_eq!(loaded.metadata.episodes, 2);
    }

    #[test]
    fn mle_on_repeated_pair_decreases_nll() {
        let mut policy = CloningPolicy::Flow1d(Monotone1dFlow::new(1, 8, 16, 3).unwrap());
        let states = Tensor::new(vec![16, 1], vec![0.0; 16]).unwrap();
        let actions = Tensor::new(vec![16, 1], vec![0.7; 16]).unwrap();
        let mut adam = AdamState::new();
        let first = policy.mle_update(&states, &actions, &mut adam, 1e-2).unwrap();
        let mut last = first;
        for _ in 0..200 {
            last = policy.mle_update(&states, &actions, &mut adam, 1e-2).unwrap();
        }
        assert!(last < first - 0.5, "NLL {first} -> {last}");
    }

    #[test]
    fn mle_gradient_zero_mean_at_generating_policy() {
        // Data drawn from the policy's own distribution: the expected NLL
        // gradient vanishes, so the empirical gradient norm shrinks with N.
        let policy = GaussianPolicy::new(1, 1, vec![8], 5).unwrap();
        let grad_norm = |n: usize, seed: u64| -> f64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut states = Vec::with_capacity(n);
            let mut actions = Vec::with_capacity(n);
            for _ in 0..n {
                let s = rng.gen_range(-1.0..1.0);
                let a = policy.act(&[s], rng.gen()).unwrap();
                states.push(vec![s]);
                actions.push(a);
            }
            let st = Tensor::new(vec![n, 1], states.concat()).unwrap();
            let at = Tensor::new(vec![n, 1], actions.concat()).unwrap();
            let mut g = Graph::new();
            let b = policy.bind(&mut g);
            let sc = g.constant(&st);
            let ac = g.constant(&at);
            let logp = policy.log_prob_bound(&mut g, &b, &sc, &ac).unwrap();
            let neg = g.neg(&logp).unwrap();
            let loss = g.mean(&neg).unwrap();
            let grads = g.backward(&loss).unwrap();
            let named = grads_by_name(&b, &grads).unwrap();
            named
                .values()
                .flat_map(|t| t.data().iter())
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
        };
        let small: f64 = (0..4).map(|i| grad_norm(100, 20 + i)).sum::<f64>() / 4.0;
        let large: f64 = (0..4).map(|i| grad_norm(10_000, 40 + i)).sum::<f64>() / 4.0;
        // 1/sqrt(N) scaling predicts a factor of 10; allow a loose factor 3.
        assert!(large < small / 3.0, "norms: N=100 {small}, N=10000 {large}");
    }

    #[test]
    fn uninformed_discriminator_reference_losses() {
        let spec = EnvSpec::bimodal_axis();
        let mut policy = NoisyMlpPolicy::new(
            crate::nbp::NbpConfig::new(1, 1, -1.0, 1.0),
            2,
        )
        .unwrap();
        let mut disc =
            DensityClassifier::new(1, 1, vec![16], vec![-1.0], vec![1.0], 3).unwrap();
        // Zero the output layer: D == 0 logits everywhere.
        let last = disc.spec.widths.len() - 2;
        let w = disc.params.get(&format!("W{last}")).unwrap().shape().to_vec();
        disc.params.insert(format!("W{last}"), Tensor::zeros(w));
        let b = disc.params.get(&format!("b{last}")).unwrap().shape().to_vec();
        disc.params.insert(format!("b{last}"), Tensor::zeros(b));

        let data = {
            let mut expert = BimodalAxisExpert::new(5);
            generate_expert_dataset(&spec, &mut expert, 4, 6).unwrap()
        };
        let n = data.len();
        let states = Tensor::new(vec![n, 1], data.states.concat()).unwrap();
        let actions = Tensor::new(vec![n, 1], data.actions.concat()).unwrap();
        let report = gan_imitation_update(
            &mut policy,
            &mut disc,
            &states,
            &actions,
            &mut AdamState::new(),
            &mut AdamState::new(),
            1e-9,
            1e-9,
            8,
        )
        .unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!((report.d_loss - 2.0 * ln2).abs() < 1e-12, "d {}", report.d_loss);
        // The generator sees the discriminator after its tiny-lr step, so
        // the logits are within ~1e-9 of zero rather than exact.
        assert!((report.g_loss - ln2).abs() < 1e-7, "g {}", report.g_loss);
    }

    #[test]
    fn mode_coverage_accounting() {
        let up = |t: &Trajectory| axis_endpoint(t) >= 10.0;
        let down = |t: &Trajectory| axis_endpoint(t) <= -10.0;
        let make = |end: f64| Trajectory {
            states: vec![vec![end - 1.0]],
            actions: vec![vec![1.0 * end.signum()]],
            rewards: vec![0.0],
            dones: vec![true],
        };
        let all_up: Vec<Trajectory> = (0..5).map(|_| make(10.0)).collect();
        let cov = mode_coverage(&all_up, &[&up, &down]);
        assert_eq!(cov, vec![1.0, 0.0, 0.0]);

        let stuck = vec![Trajectory {
            states: vec![vec![0.0]],
            actions: vec![vec![0.0]],
            rewards: vec![0.0],
            dones: vec![true],
        }];
        let cov = mode_coverage(&stuck, &[&up, &down]);
        assert_eq!(cov, vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn expert_mode_coverage_is_balanced() {
        let spec = EnvSpec::bimodal_axis();
        let mut expert = BimodalAxisExpert::new(31);
        let mut trajs = Vec::new();
        let mut env = Env::new(spec, 32).unwrap();
        for _ in 0..1000 {
            let mut traj = Trajectory::default();
            let mut s = env.reset();
            expert.begin_episode();
            loop {
                let a = expert.act(&s);
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
            trajs.push(traj);
        }
        let up = |t: &Trajectory| axis_endpoint(t) >= 10.0;
        let down = |t: &Trajectory| axis_endpoint(t) <= -10.0;
        let cov = mode_coverage(&trajs, &[&up, &down]);
        let se = 0.5 / 1000f64.sqrt();
        assert!((cov[0] - 0.5).abs() <= 3.0 * se, "coverage {cov:?}");
        assert!((cov[1] - 0.5).abs() <= 3.0 * se, "coverage {cov:?}");
        assert!(cov[2] == 0.0);
    }
}

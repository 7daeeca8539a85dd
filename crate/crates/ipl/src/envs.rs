//! Desk-scale environments: a correlated-Gaussian bandit, a 2D multi-goal
//! point mass, and a 1D bimodal-commitment MDP, plus an observation-noise
//! wrapper and trajectory CSV export. Steps are pure functions of
//! (state, action, rng draw) so seeded rollouts replay exactly.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid environment spec: {0}")]
    BadSpec(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EnvError>;

/// Covariance must be symmetric positive definite; `beta_opt` is the
/// temperature of the entropy-optimal target density.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BanditParams {
    pub sigma: [[f64; 2]; 2],
    pub beta_opt: f64,
}

impl Default for BanditParams {
    fn default() -> Self {
        BanditParams { sigma: [[1.0, 0.95], [0.95, 1.0]], beta_opt: 1.0 }
    }
}

impl BanditParams {
    pub fn validate(&self) -> Result<()> {
        let s = &self.sigma;
        if (s[0][1] - s[1][0]).abs() > 1e-12 {
            return Err(EnvError::BadSpec("covariance not symmetric".into()));
        }
        let det = s[0][0] * s[1][1] - s[0][1] * s[1][0];
        if s[0][0] <= 0.0 || det <= 0.0 {
            return Err(EnvError::BadSpec("covariance not positive definite".into()));
        }
        if self.beta_opt <= 0.0 {
            return Err(EnvError::BadSpec("beta_opt must be positive".into()));
        }
        Ok(())
    }

    /// Quadratic form a' Sigma^{-1} a.
    pub fn precision_form(&self, a: &[f64]) -> f64 {
        let s = &self.sigma;
        let det = s[0][0] * s[1][1] - s[0][1] * s[1][0];
        let (x, y) = (a[0], a[1]);
        (s[1][1] * x * x - 2.0 * s[0][1] * x * y + s[0][0] * y * y) / det
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultiGoalParams {
    pub goals: [[f64; 2]; 4],
    pub step_scale: f64,
    pub dynamics_noise_std: f64,
    pub goal_radius: f64,
}

impl Default for MultiGoalParams {
    fn default() -> Self {
        MultiGoalParams {
            goals: [[5.0, 0.0], [-5.0, 0.0], [0.0, 5.0], [0.0, -5.0]],
            step_scale: 0.2,
            dynamics_noise_std: 0.01,
            goal_radius: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EnvKind {
    GaussianBandit(BanditParams),
    #[serde(rename = "multi-goal-2d")]
    MultiGoal2d(MultiGoalParams),
    BimodalAxis,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSpec {
    pub kind: EnvKind,
    pub horizon: usize,
    /// Per-component observation noise std; 0 means exact observations.
    pub obs_noise_std: f64,
}

impl EnvSpec {
    pub fn gaussian_bandit(params: BanditParams) -> Self {
        EnvSpec { kind: EnvKind::GaussianBandit(params), horizon: 1, obs_noise_std: 0.0 }
    }

    pub fn multi_goal(params: MultiGoalParams) -> Self {
        EnvSpec { kind: EnvKind::MultiGoal2d(params), horizon: 50, obs_noise_std: 0.0 }
    }

    pub fn bimodal_axis() -> Self {
        EnvSpec { kind: EnvKind::BimodalAxis, horizon: 50, obs_noise_std: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon < 1 {
            return Err(EnvError::BadSpec("horizon must be at least 1".into()));
        }
        if self.obs_noise_std < 0.0 {
            return Err(EnvError::BadSpec("observation noise std must be nonnegative".into()));
        }
        match &self.kind {
            EnvKind::GaussianBandit(p) => p.validate(),
            EnvKind::MultiGoal2d(p) => {
                for i in 0..4 {
                    for j in 0..i {
                        if p.goals[i] == p.goals[j] {
                            return Err(EnvError::BadSpec("goals must be distinct".into()));
                        }
                    }
                }
                if p.goal_radius <= 0.0 || p.step_scale <= 0.0 || p.dynamics_noise_std < 0.0 {
                    return Err(EnvError::BadSpec("multi-goal parameters out of range".into()));
                }
                Ok(())
            }
            EnvKind::BimodalAxis => Ok(()),
        }
    }

    pub fn state_dim(&self) -> usize {
        match self.kind {
            EnvKind::GaussianBandit(_) => 1,
            EnvKind::MultiGoal2d(_) => 2,
            EnvKind::BimodalAxis => 1,
        }
    }

    pub fn action_dim(&self) -> usize {
        match self.kind {
            EnvKind::GaussianBandit(_) => 2,
            EnvKind::MultiGoal2d(_) => 2,
            EnvKind::BimodalAxis => 1,
        }
    }

    pub fn action_low(&self) -> f64 {
        -1.0
    }

    pub fn action_high(&self) -> f64 {
        1.0
    }
}

/// Observation-noise wrapper: same dynamics, observations perturbed by
/// i.i.d. N(0, sigma^2) per component.
pub fn noisy_wrap(spec: &EnvSpec, sigma: f64) -> Result<EnvSpec> {
    if sigma < 0.0 {
        return Err(EnvError::BadSpec("noise std must be nonnegative".into()));
    }
    let mut out = spec.clone();
    out.obs_noise_std = sigma;
    Ok(out)
}

/// Running environment instance. `state` is the true state; observations
/// add noise when the spec asks for it.
pub struct Env {
    pub spec: EnvSpec,
    state: Vec<f64>,
    t: usize,
    rng: ChaCha8Rng,
}

impl Env {
    pub fn new(spec: EnvSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut env = Env { spec, state: Vec::new(), t: 0, rng: ChaCha8Rng::seed_from_u64(seed) };
        env.reset_in_place();
        Ok(env)
    }

    fn reset_in_place(&mut self) {
        self.t = 0;
        self.state = match self.spec.kind {
            EnvKind::GaussianBandit(_) => vec![0.0],
            EnvKind::MultiGoal2d(_) => {
                let x: f64 = StandardNormal.sample(&mut self.rng);
                let y: f64 = StandardNormal.sample(&mut self.rng);
                vec![0.1 * x, 0.1 * y]
            }
            EnvKind::BimodalAxis => vec![0.0],
        };
    }

    pub fn reset(&mut self) -> Vec<f64> {
        self.reset_in_place();
        self.observe()
    }

    pub fn true_state(&self) -> &[f64] {
        &self.state
    }

    fn observe(&mut self) -> Vec<f64> {
        if self.spec.obs_noise_std == 0.0 {
            return self.state.clone();
        }
        let sigma = self.spec.obs_noise_std;
        self.state
            .iter()
            .map(|v| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                v + sigma * z
            })
            .collect()
    }

    /// Actions outside the box are clipped before use.
    pub fn step(&mut self, action: &[f64]) -> (Vec<f64>, f64, bool) {
        // The bandit reward is a proper quadratic, so its actions stay raw;
        // clipping there would let entropy maximization spread mass without
        // penalty. The dynamics-based envs clip to the action box.
        let a: Vec<f64> = if matches!(self.spec.kind, EnvKind::GaussianBandit(_)) {
            action.to_vec()
        } else {
            action
                .iter()
                .map(|v| v.clamp(self.spec.action_low(), self.spec.action_high()))
                .collect()
        };
        self.t += 1;
        let horizon_hit = self.t >= self.spec.horizon;
        let (reward, done) = match &self.spec.kind {
            EnvKind::GaussianBandit(p) => (-p.precision_form(&a), true),
            EnvKind::MultiGoal2d(p) => {
                let scale = p.step_scale;
                let ns = p.dynamics_noise_std;
                let mut s2 = vec![0.0; 2];
                for i in 0..2 {
                    let z: f64 = StandardNormal.sample(&mut self.rng);
                    s2[i] = self.state[i] + scale * a[i] + ns * z;
                }
                let min_dist = p
                    .goals
                    .iter()
                    .map(|g| ((s2[0] - g[0]).powi(2) + (s2[1] - g[1]).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min);
                self.state = s2;
                (-min_dist, min_dist <= p.goal_radius || horizon_hit)
            }
            EnvKind::BimodalAxis => {
                let s2 = (self.state[0] + a[0]).clamp(-10.0, 10.0);
                self.state[0] = s2;
                (0.0, s2.abs() >= 10.0 || horizon_hit)
            }
        };
        (self.observe(), reward, done)
    }
}

/// Unnormalized log of the entropy-optimal bandit density exp(-a'S^{-1}a/beta).
pub fn bandit_optimal_logdensity_unnorm(params: &BanditParams, a: &[f64]) -> f64 {
    -params.precision_form(a) / params.beta_opt
}

/// Log normalizer of the optimal bandit density over the [-1,1]^2 action
/// box by midpoint quadrature on an n x n grid.
pub fn bandit_log_normalizer(params: &BanditParams, n: usize) -> f64 {
    let h = 2.0 / n as f64;
    let mut total = 0.0;
    for i in 0..n {
        let x = -1.0 + (i as f64 + 0.5) * h;
        for j in 0..n {
            let y = -1.0 + (j as f64 + 0.5) * h;
            total += bandit_optimal_logdensity_unnorm(params, &[x, y]).exp();
        }
    }
    (total * h * h).ln()
}

/// Normalized log-density of the optimal bandit policy on the action box;
/// the normalizer comes from 400 x 400 quadrature.
pub fn bandit_optimal_logdensity(params: &BanditParams, a: &[f64]) -> f64 {
    bandit_optimal_logdensity_unnorm(params, a) - bandit_log_normalizer(params, 400)
}

/// Expert for the bimodal axis MDP: commits to one endpoint per episode.
pub struct BimodalAxisExpert {
    target: f64,
    rng: ChaCha8Rng,
}

impl BimodalAxisExpert {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let target = if rng.gen_bool(0.5) { 10.0 } else { -10.0 };
        BimodalAxisExpert { target, rng }
    }

    /// Call at each episode start to re-draw the committed endpoint.
    pub fn begin_episode(&mut self) {
        self.target = if self.rng.gen_bool(0.5) { 10.0 } else { -10.0 };
    }

    pub fn act(&mut self, state: &[f64]) -> Vec<f64> {
        // Cruise at 0.7 rather than the box edge so squashed imitators can
        // match the expert without saturating their output nonlinearity.
        let greedy = 0.7 * (self.target - state[0]).clamp(-1.0, 1.0);
        let z: f64 = StandardNormal.sample(&mut self.rng);
        vec![greedy + 0.05 * z]
    }
}

#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

/// CSV export with columns episode, t, s0.., a0.., r, done.
pub fn write_trajectories_csv(path: &std::path::Path, trajs: &[Trajectory]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let (sd, ad) = trajs
        .iter()
        .find(|t| !t.is_empty())
        .map(|t| (t.states[0].len(), t.actions[0].len()))
        .unwrap_or((0, 0));
    write!(f, "episode,t")?;
    for i in 0..sd {
        write!(f, ",s{i}")?;
    }
    for i in 0..ad {
        write!(f, ",a{i}")?;
    }
    writeln!(f, ",r,done")?;
    for (ep, traj) in trajs.iter().enumerate() {
        for t in 0..traj.len() {
            write!(f, "{ep},{t}")?;
            for v in &traj.states[t] {
                write!(f, ",{v}")?;
            }
            for v in &traj.actions[t] {
                write!(f, ",{v}")?;
            }
            writeln!(f, ",{},{}", traj.rewards[t], traj.dones[t] as u8)?;
        }
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bandit_reset_and_peak_reward() {
        let mut env = Env::new(EnvSpec::gaussian_bandit(BanditParams::default()), 0).unwrap();
        assert_eq!(env.reset(), vec![0.0]);
        let (_, r, done) = env.step(&[0.0, 0.0]);
        assert_eq!(r, 0.0);
        assert!(done);
    }

    #[test]
    fn bandit_identity_covariance_unit_action() {
        let params = BanditParams { sigma: [[1.0, 0.0], [0.0, 1.0]], beta_opt: 1.0 };
        let mut env = Env::new(EnvSpec::gaussian_bandit(params), 0).unwrap();
        env.reset();
        let (_, r, _) = env.step(&[1.0, 0.0]);
        assert!((r + 1.0).abs() < 1e-12);
    }

    #[test]
    fn bandit_correlated_form_matches_inverse() {
        let p = BanditParams::default();
        // Direct 2x2 inverse check of the quadratic form.
        let det = 1.0 - 0.95 * 0.95;
        let a = [0.3, -0.7];
        let expected =
            (1.0 * a[0] * a[0] - 2.0 * 0.95 * a[0] * a[1] + 1.0 * a[1] * a[1]) / det;
        assert!((p.precision_form(&a) - expected).abs() < 1e-12);
    }

    #[test]
    fn multi_goal_reset_deterministic_per_seed() {
        let spec = EnvSpec::multi_goal(MultiGoalParams::default());
        let mut e1 = Env::new(spec.clone(), 42).unwrap();
        let mut e2 = Env::new(spec, 42).unwrap();
        assert_eq!(e1.reset(), e2.reset());
        let (s1, r1, d1) = e1.step(&[0.5, -0.2]);
        let (s2, r2, d2) = e2.step(&[0.5, -0.2]);
        assert_eq!((s1, r1, d1), (s2, r2, d2));
    }

    #[test]
    fn multi_goal_reward_symmetric_under_goal_symmetry() {
        let p = MultiGoalParams { dynamics_noise_std: 0.0, ..Default::default() };
        let spec = EnvSpec::multi_goal(p);
        // Rotating state and action by 90 degrees permutes the goal set,
        // so rewards agree exactly.
        let mut e1 = Env::new(spec.clone(), 1).unwrap();
        let mut e2 = Env::new(spec, 1).unwrap();
        e1.reset();
        e2.reset();
        e1.state = vec![1.0, 2.0];
        e2.state = vec![-2.0, 1.0];
        let (_, r1, _) = e1.step(&[0.3, 0.4]);
        let (_, r2, _) = e2.step(&[-0.4, 0.3]);
        assert!((r1 - r2).abs() < 1e-12);
    }

    #[test]
    fn multi_goal_terminates_on_goal_hit() {
        let p = MultiGoalParams { dynamics_noise_std: 0.0, ..Default::default() };
        let spec = EnvSpec::multi_goal(p);
        let mut env = Env::new(spec, 3).unwrap();
        env.reset();
        env.state = vec![4.95, 0.0];
        let (_, r, done) = env.step(&[1.0, 0.0]);
        assert!(done);
        assert!(r >= -0.5);
    }

    #[test]
    fn axis_boundary_absorption_and_bounds() {
        let mut env = Env::new(EnvSpec::bimodal_axis(), 0).unwrap();
        assert_eq!(env.reset(), vec![0.0]);
        env.state = vec![9.5];
        let (s, _, done) = env.step(&[1.0]);
        assert_eq!(s, vec![10.0]);
        assert!(done);
        // Never escapes the interval, even with repeated max actions.
        let mut env = Env::new(EnvSpec::bimodal_axis(), 0).unwrap();
        env.reset();
        for _ in 0..100 {
            let (s, _, done) = env.step(&[1.5]);
            assert!(s[0].abs() <= 10.0);
            if done {
                break;
            }
        }
    }

    #[test]
    fn noisy_wrap_zero_sigma_identical() {
        let spec = EnvSpec::multi_goal(MultiGoalParams::default());
        let wrapped = noisy_wrap(&spec, 0.0).unwrap();
        let mut e1 = Env::new(spec, 5).unwrap();
        let mut e2 = Env::new(wrapped, 5).unwrap();
        assert_eq!(e1.reset(), e2.reset());
        for _ in 0..20 {
            let (s1, r1, d1) = e1.step(&[0.1, 0.2]);
            let (s2, r2, d2) = e2.step(&[0.1, 0.2]);
            assert_eq!((s1, r1, d1), (s2, r2, d2));
        }
    }

    #[test]
    fn noisy_wrap_empirical_std_matches_sigma() {
        let sigma = 0.1;
        let spec = noisy_wrap(&EnvSpec::bimodal_axis(), sigma).unwrap();
        let mut env = Env::new(spec, 11).unwrap();
        let mut diffs = Vec::with_capacity(100_000);
        let mut obs = env.reset();
        diffs.push(obs[0] - env.true_state()[0]);
        while diffs.len() < 100_000 {
            let (o, _, done) = env.step(&[0.0]);
            obs = o;
            diffs.push(obs[0] - env.true_state()[0]);
            if done {
                obs = env.reset();
                diffs.push(obs[0] - env.true_state()[0]);
            }
        }
        let n = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let std = var.sqrt();
        // SE of a sample std is roughly sigma / sqrt(2n).
        let se = sigma / (2.0 * n).sqrt();
        assert!((std - sigma).abs() <= 3.0 * se, "std {std} vs {sigma} (se {se})");
    }

    #[test]
    fn optimal_density_normalizes_and_peaks_at_origin() {
        let p = BanditParams::default();
        assert_eq!(bandit_optimal_logdensity_unnorm(&p, &[0.0, 0.0]), 0.0);
        let pi = BanditParams { sigma: [[1.0, 0.0], [0.0, 1.0]], beta_opt: 1.0 };
        assert!((bandit_optimal_logdensity_unnorm(&pi, &[1.0, 0.0]) + 1.0).abs() < 1e-12);
        // Quadrature self-check: normalized density integrates to 1.
        let log_z = bandit_log_normalizer(&p, 400);
        let n = 400;
        let h = 2.0 / n as f64;
        let mut mass = 0.0;
        for i in 0..n {
            let x = -1.0 + (i as f64 + 0.5) * h;
            for j in 0..n {
                let y = -1.0 + (j as f64 + 0.5) * h;
                mass += (bandit_optimal_logdensity_unnorm(&p, &[x, y]) - log_z).exp() * h * h;
            }
        }
        assert!((mass - 1.0).abs() <= 1e-3, "mass {mass}");
    }

    #[test]
    fn expert_commits_and_reaches_endpoints() {
        let mut up = 0;
        let mut total = 0;
        let mut expert = BimodalAxisExpert::new(17);
        for _ in 0..200 {
            let mut env = Env::new(EnvSpec::bimodal_axis(), total as u64).unwrap();
            let mut s = env.reset();
            expert.begin_episode();
            for _ in 0..50 {
                let a = expert.act(&s);
                let (s2, _, done) = env.step(&a);
                s = s2;
                if done {
                    break;
                }
            }
            if s[0] >= 10.0 {
                up += 1;
            }
            assert!(s[0].abs() >= 10.0, "expert failed to reach an endpoint: {}", s[0]);
            total += 1;
        }
        // Binomial 3 SE around one half.
        let frac = up as f64 / total as f64;
        let se = 0.5 / (total as f64).sqrt();
        assert!((frac - 0.5).abs() <= 3.0 * se, "up fraction {frac}");
    }

    #[test]
    fn trajectory_csv_roundtrip_shape() {
        let traj = Trajectory {
            states: vec![vec![0.0, 0.0], vec![0.1, 0.2]],
            actions: vec![vec![1.0, -1.0], vec![0.5, 0.5]],
            rewards: vec![-1.0, -0.5],
            dones: vec![false, true],
        };
        let dir = std::env::temp_dir().join("ipl_env_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("traj.csv");
        write_trajectories_csv(&path, &[traj]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "episode,t,s0,s1,a0,a1,r,done");
        assert_eq!(lines.next().unwrap(), "0,0,0,0,1,-1,-1,0");
        assert_eq!(lines.next().unwrap(), "0,1,0.1,0.2,0.5,0.5,-0.5,1");
    }
}

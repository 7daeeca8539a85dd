//! Exact finite-MDP computations: Bellman, Boltzmann and mellowmax backup
//! operators, closed-form policy evaluation, entropy-augmented objectives,
//! and the surrogate lower bound. Everything here is matrix algebra, never
//! sampling, so the verification suites built on it are deterministic.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TabularError {
    #[error("invalid MDP: {0}")]
    BadMdp(String),
    #[error("invalid policy: {0}")]
    BadPolicy(String),
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("iteration budget exceeded (residual {0})")]
    NoConvergence(f64),
}

pub type Result<T> = std::result::Result<T, TabularError>;

/// Finite MDP: `p[s][a][s2]` transition probabilities, `r[s][a]` rewards,
/// discount in (0,1), initial distribution over states.
#[derive(Debug, Clone)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    pub p: Vec<f64>,
    pub r: Vec<f64>,
    pub gamma: f64,
    pub p1: Vec<f64>,
}

impl TabularMdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        p: Vec<f64>,
        r: Vec<f64>,
        gamma: f64,
        p1: Vec<f64>,
    ) -> Result<Self> {
        if p.len() != n_states * n_actions * n_states || r.len() != n_states * n_actions {
            return Err(TabularError::BadMdp("dimension mismatch".into()));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(TabularError::BadMdp(format!("gamma {gamma} outside [0, 1)")));
        }
        for s in 0..n_states {
            for a in 0..n_actions {
                let row: f64 = (0..n_states).map(|s2| p[(s * n_actions + a) * n_states + s2]).sum();
                if (row - 1.0).abs() > 1e-12 {
                    return Err(TabularError::BadMdp(format!("P[{s},{a},.] sums to {row}")));
                }
            }
        }
        let z: f64 = p1.iter().sum();
        if p1.len() != n_states || (z - 1.0).abs() > 1e-12 {
            return Err(TabularError::BadMdp("initial distribution does not sum to 1".into()));
        }
        Ok(TabularMdp { n_states, n_actions, p, r, gamma, p1 })
    }

    #[inline]
    pub fn prob(&self, s: usize, a: usize, s2: usize) -> f64 {
        self.p[(s * self.n_actions + a) * self.n_states + s2]
    }

    #[inline]
    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.r[s * self.n_actions + a]
    }

    /// Random dense MDP with rewards in [-1, 1]; deterministic in seed.
    pub fn random(n_states: usize, n_actions: usize, gamma: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Vec::with_capacity(n_states * n_actions * n_states);
        for _ in 0..n_states * n_actions {
            let raw: Vec<f64> = (0..n_states).map(|_| rng.gen_range(0.01..1.0)).collect();
            let z: f64 = raw.iter().sum();
            p.extend(raw.iter().map(|v| v / z));
        }
        let r: Vec<f64> = (0..n_states * n_actions).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let raw: Vec<f64> = (0..n_states).map(|_| rng.gen_range(0.01..1.0)).collect();
        let z: f64 = raw.iter().sum();
        let p1 = raw.iter().map(|v| v / z).collect();
        TabularMdp::new(n_states, n_actions, p, r, gamma, p1).unwrap()
    }
}

/// Row-stochastic policy table `probs[s][a]`.
#[derive(Debug, Clone, Serialize)]
pub struct TabularPolicy {
    pub n_states: usize,
    pub n_actions: usize,
    pub probs: Vec<f64>,
}

impl TabularPolicy {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_states * n_actions {
            return Err(TabularError::BadPolicy("dimension mismatch".into()));
        }
        for s in 0..n_states {
            let row = &probs[s * n_actions..(s + 1) * n_actions];
            if row.iter().any(|v| *v < 0.0) {
                return Err(TabularError::BadPolicy(format!("negative probability at state {s}")));
            }
            let z: f64 = row.iter().sum();
            if (z - 1.0).abs() > 1e-12 {
                return Err(TabularError::BadPolicy(format!("row {s} sums to {z}")));
            }
        }
        Ok(TabularPolicy { n_states, n_actions, probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        TabularPolicy {
            n_states,
            n_actions,
            probs: vec![1.0 / n_actions as f64; n_states * n_actions],
        }
    }

    pub fn random(n_states: usize, n_actions: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut probs = Vec::with_capacity(n_states * n_actions);
        for _ in 0..n_states {
            let raw: Vec<f64> = (0..n_actions).map(|_| rng.gen_range(0.01..1.0)).collect();
            let z: f64 = raw.iter().sum();
            probs.extend(raw.iter().map(|v| v / z));
        }
        TabularPolicy { n_states, n_actions, probs }
    }

    #[inline]
    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    pub fn entropy(&self, s: usize) -> f64 {
        let row = &self.probs[s * self.n_actions..(s + 1) * self.n_actions];
        -row.iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum::<f64>()
    }

    pub fn kl_to(&self, other: &TabularPolicy, s: usize) -> f64 {
        (0..self.n_actions)
            .filter(|a| self.prob(s, *a) > 0.0)
            .map(|a| self.prob(s, a) * (self.prob(s, a) / other.prob(s, a)).ln())
            .sum()
    }

    pub fn max_kl_to(&self, other: &TabularPolicy) -> f64 {
        (0..self.n_states).map(|s| self.kl_to(other, s)).fold(0.0, f64::max)
    }
}

/// State-action value table `values[s][a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    pub n_states: usize,
    pub n_actions: usize,
    pub values: Vec<f64>,
}

impl QTable {
    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        QTable { n_states, n_actions, values: vec![0.0; n_states * n_actions] }
    }

    #[inline]
    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.n_actions + a]
    }

    pub fn max_abs_diff(&self, other: &QTable) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

fn backup_with(mdp: &TabularMdp, q: &QTable, inner: impl Fn(&[f64]) -> f64) -> QTable {
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let next: Vec<f64> = (0..ns)
        .map(|s2| inner(&q.values[s2 * na..(s2 + 1) * na]))
        .collect();
    let mut out = QTable::zeros(ns, na);
    for s in 0..ns {
        for a in 0..na {
            let exp_next: f64 = (0..ns).map(|s2| mdp.prob(s, a, s2) * next[s2]).sum();
            out.values[s * na + a] = mdp.reward(s, a) + mdp.gamma * exp_next;
        }
    }
    out
}

/// Hard-max backup: T*Q = r + gamma E[max_a' Q(s',a')].
pub fn bellman_opt(q: &QTable, mdp: &TabularMdp) -> QTable {
    backup_with(mdp, q, |row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

/// Softmax-weighted expectation of a Q-row at temperature beta.
pub fn boltzmann_row(row: &[f64], beta: f64) -> f64 {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ws: Vec<f64> = row.iter().map(|v| ((v - mx) / beta).exp()).collect();
    let z: f64 = ws.iter().sum();
    row.iter().zip(&ws).map(|(v, w)| v * w).sum::<f64>() / z
}

/// Log-mean-exp of a Q-row at temperature beta.
pub fn mellowmax_row(row: &[f64], beta: f64) -> f64 {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = row.iter().map(|v| ((v - mx) / beta).exp()).sum();
    mx + beta * (s / row.len() as f64).ln()
}

/// Boltzmann backup: next-state values are softmax-weighted means.
pub fn boltzmann_op(q: &QTable, mdp: &TabularMdp, beta: f64) -> Result<QTable> {
    if beta <= 0.0 {
        return Err(TabularError::BadTemperature(beta));
    }
    Ok(backup_with(mdp, q, |row| boltzmann_row(row, beta)))
}

/// Mellowmax backup: next-state values are log-mean-exp at temperature beta.
pub fn mellowmax_op(q: &QTable, mdp: &TabularMdp, beta: f64) -> Result<QTable> {
    if beta <= 0.0 {
        return Err(TabularError::BadTemperature(beta));
    }
    Ok(backup_with(mdp, q, |row| mellowmax_row(row, beta)))
}

#[derive(Debug, Clone, Serialize)]
pub struct OperatorReport {
    pub holds: bool,
    pub max_violation: f64,
    /// (s, a) pairs where all three backups coincide within tolerance; the
    /// next-state Q-rows reachable from them are constant.
    pub equality_sites: Vec<(usize, usize)>,
}

/// Verify T*Q >= T_B Q >= T_s Q elementwise at tolerance 1e-9.
pub fn operator_inequality_check(q: &QTable, mdp: &TabularMdp, beta: f64) -> Result<OperatorReport> {
    let tol = 1e-9;
    let opt = bellman_opt(q, mdp);
    let boltz = boltzmann_op(q, mdp, beta)?;
    let mellow = mellowmax_op(q, mdp, beta)?;
    let mut max_violation = 0.0f64;
    let mut equality_sites = Vec::new();
    for i in 0..q.values.len() {
        max_violation = max_violation
            .max(boltz.values[i] - opt.values[i])
            .max(mellow.values[i] - boltz.values[i]);
        if (opt.values[i] - mellow.values[i]).abs() <= tol {
            equality_sites.push((i / q.n_actions, i % q.n_actions));
        }
    }
    Ok(OperatorReport { holds: max_violation <= tol, max_violation, equality_sites })
}

/// Exact policy evaluation by linear solve; returns (Q^pi, J) with
/// J = E over the initial distribution of V^pi.
pub fn policy_eval_exact(mdp: &TabularMdp, pi: &TabularPolicy) -> (QTable, f64) {
    let ns = mdp.n_states;
    let na = mdp.n_actions;
    let mut p_pi = DMatrix::zeros(ns, ns);
    let mut r_pi = DVector::zeros(ns);
    for s in 0..ns {
        for a in 0..na {
            let w = pi.prob(s, a);
            r_pi[s] += w * mdp.reward(s, a);
            for s2 in 0..ns {
                p_pi[(s, s2)] += w * mdp.prob(s, a, s2);
            }
        }
    }
    let lhs = DMatrix::identity(ns, ns) - mdp.gamma * &p_pi;
    let v = lhs.lu().solve(&r_pi).expect("I - gamma P is nonsingular for gamma < 1");
    let mut q = QTable::zeros(ns, na);
    for s in 0..ns {
        for a in 0..na {
            let exp_next: f64 = (0..ns).map(|s2| mdp.prob(s, a, s2) * v[s2]).sum();
            q.values[s * na + a] = mdp.reward(s, a) + mdp.gamma * exp_next;
        }
    }
    let j: f64 = (0..ns).map(|s| mdp.p1[s] * v[s]).sum();
    (q, j)
}

/// Exact entropy-augmented objective: rewards gain beta * H[pi(.|s)].
pub fn maxent_eval_exact(mdp: &TabularMdp, pi: &TabularPolicy, beta: f64) -> f64 {
    let mut aug = mdp.clone();
    for s in 0..mdp.n_states {
        let h = pi.entropy(s);
        for a in 0..mdp.n_actions {
            aug.r[s * mdp.n_actions + a] += beta * h;
        }
    }
    policy_eval_exact(&aug, pi).1
}

/// Discounted state visitation of pi from the initial distribution:
/// d = (I - gamma P_pi^T)^{-1} p1.
pub fn discounted_visitation(mdp: &TabularMdp, pi: &TabularPolicy) -> Vec<f64> {
    let ns = mdp.n_states;
    let mut p_pi_t = DMatrix::zeros(ns, ns);
    for s in 0..ns {
        for a in 0..mdp.n_actions {
            let w = pi.prob(s, a);
            for s2 in 0..ns {
                p_pi_t[(s2, s)] += w * mdp.prob(s, a, s2);
            }
        }
    }
    let lhs = DMatrix::identity(ns, ns) - mdp.gamma * &p_pi_t;
    let p1 = DVector::from_iterator(ns, mdp.p1.iter().copied());
    let d = lhs.lu().solve(&p1).expect("nonsingular");
    d.iter().copied().collect()
}

/// Surrogate objective: J(pi) plus entropy of pi weighted by the
/// discounted visitation of pi_old.
pub fn surrogate_eval(
    mdp: &TabularMdp,
    pi: &TabularPolicy,
    pi_old: &TabularPolicy,
    beta: f64,
) -> f64 {
    let (_, j) = policy_eval_exact(mdp, pi);
    let d = discounted_visitation(mdp, pi_old);
    let h_term: f64 = (0..mdp.n_states).map(|s| d[s] * pi.entropy(s)).sum();
    j + beta * h_term
}

#[derive(Debug, Clone, Serialize)]
pub struct LowerBoundReport {
    pub applicable: bool,
    pub kl_max: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub holds: bool,
}

/// Check J_MaxEnt(pi) >= J_surr(pi) - beta gamma sqrt(alpha) eps / (1-gamma)^2
/// with eps = max_s |H[pi(.|s)]|, under max-state KL(pi || pi_old) <= alpha.
pub fn lower_bound_check(
    mdp: &TabularMdp,
    pi: &TabularPolicy,
    pi_old: &TabularPolicy,
    beta: f64,
    alpha: f64,
) -> LowerBoundReport {
    let kl_max = pi.max_kl_to(pi_old);
    let applicable = kl_max <= alpha;
    let lhs = maxent_eval_exact(mdp, pi, beta);
    let j_surr = surrogate_eval(mdp, pi, pi_old, beta);
    let eps = (0..mdp.n_states).map(|s| pi.entropy(s).abs()).fold(0.0, f64::max);
    let penalty = beta * mdp.gamma * alpha.sqrt() * eps / (1.0 - mdp.gamma).powi(2);
    let rhs = j_surr - penalty;
    let slack = lhs - rhs;
    LowerBoundReport { applicable, kl_max, lhs, rhs, slack, holds: !applicable || slack >= -1e-9 }
}

#[derive(Debug, Clone, Serialize)]
pub struct StationaryReport {
    pub pi: TabularPolicy,
    pub q_values: Vec<f64>,
    pub residual: f64,
    pub converged: bool,
    pub iterations: usize,
}

fn softmax_policy(q: &QTable, beta: f64) -> TabularPolicy {
    let (ns, na) = (q.n_states, q.n_actions);
    let mut probs = Vec::with_capacity(ns * na);
    for s in 0..ns {
        let row = &q.values[s * na..(s + 1) * na];
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let ws: Vec<f64> = row.iter().map(|v| ((v - mx) / beta).exp()).collect();
        let z: f64 = ws.iter().sum();
        probs.extend(ws.iter().map(|w| w / z));
    }
    TabularPolicy { n_states: ns, n_actions: na, probs }
}

/// Damped search for a Boltzmann-stationary policy pi proportional to
/// exp(Q^pi / beta). The operator is not a contraction, so non-convergence
/// within the budget is reported, not raised.
pub fn boltzmann_stationary(
    mdp: &TabularMdp,
    beta: f64,
    tol: f64,
    max_iters: usize,
) -> Result<StationaryReport> {
    if beta <= 0.0 {
        return Err(TabularError::BadTemperature(beta));
    }
    let eta = 0.1;
    let mut pi = TabularPolicy::uniform(mdp.n_states, mdp.n_actions);
    let mut iterations = 0;
    let mut converged = false;
    for k in 0..max_iters {
        iterations = k + 1;
        let (q, _) = policy_eval_exact(mdp, &pi);
        let target = softmax_policy(&q, beta);
        let mut delta = 0.0f64;
        for i in 0..pi.probs.len() {
            let next = (1.0 - eta) * pi.probs[i] + eta * target.probs[i];
            delta = delta.max((next - pi.probs[i]).abs());
            pi.probs[i] = next;
        }
        if delta <= tol * eta {
            converged = true;
            break;
        }
    }
    let (q, _) = policy_eval_exact(mdp, &pi);
    let tb = boltzmann_op(&q, mdp, beta)?;
    let residual = tb.max_abs_diff(&q);
    Ok(StationaryReport { pi, q_values: q.values, residual, converged, iterations })
}

/// Fixed point of the mellowmax backup by plain iteration; contraction in
/// the sup norm, so convergence is guaranteed.
pub fn mellowmax_fixed_point(mdp: &TabularMdp, beta: f64, tol: f64) -> Result<QTable> {
    if beta <= 0.0 {
        return Err(TabularError::BadTemperature(beta));
    }
    let mut q = QTable::zeros(mdp.n_states, mdp.n_actions);
    let mut residual = f64::INFINITY;
    for _ in 0..100_000 {
        let next = mellowmax_op(&q, mdp, beta)?;
        residual = next.max_abs_diff(&q);
        q = next;
        if residual <= tol {
            return Ok(q);
        }
    }
    Err(TabularError::NoConvergence(residual))
}

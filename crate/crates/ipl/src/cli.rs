//! Command-line harness: config parsing with strict key checking, override
//! handling, experiment dispatch, artifact emission and the verification
//! suites. Exit codes: 0 success, 2 config error, 3 training divergence,
//! 4 verification failure, 1 other failure.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::algos::{
    train_offpolicy, train_onpolicy, AlgoError, OffPolicyComponents, OnPolicyActor, TrainConfig,
    ValueNet,
};
use crate::autodiff::{Graph, Tensor};
use crate::entropy::DensityClassifier;
use crate::envs::{write_trajectories_csv, EnvKind, EnvSpec};
use crate::flow::{sample_base_noise, FlowConfig, FlowPolicy, Monotone1dFlow};
use crate::gaussian::GaussianPolicy;
use crate::imitation::{
    axis_endpoint, gan_imitation_update, generate_expert_dataset, mode_coverage, CloningPolicy,
};
use crate::nbp::NoisyMlpPolicy;
use crate::nn::{bind, load_checkpoint, save_checkpoint, AdamState, ParamSet};
use crate::tabular::{
    boltzmann_stationary, lower_bound_check, operator_inequality_check, QTable, TabularMdp,
    TabularPolicy,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;
pub const EXIT_VERIFY: i32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algo {
    NfpOnpolicy,
    NbpOffpolicy,
    GaussianBaseline,
}

fn default_eval_episodes() -> usize {
    10
}

fn default_imitate_episodes() -> usize {
    200
}

fn default_imitate_steps() -> usize {
    2000
}

/// One config document per run; CLI flags and key=value arguments override
/// its fields, and the merged result is persisted alongside the artifacts.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvSpec,
    pub algo: Algo,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default = "default_eval_episodes")]
    pub eval_episodes: usize,
    /// Initial noise-scale parameter for blackbox policies; -9 is the
    /// minimal-noise ablation.
    #[serde(default)]
    pub rho_init: Option<f64>,
    #[serde(default = "default_imitate_episodes")]
    pub imitate_episodes: usize,
    #[serde(default = "default_imitate_steps")]
    pub imitate_steps: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("divergence: {0}")]
    Divergence(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("{0}")]
    Other(String),
}

impl From<AlgoError> for CliError {
    fn from(e: AlgoError) -> Self {
        match e {
            AlgoError::Diverged { .. } => CliError::Divergence(e.to_string()),
            AlgoError::BadConfig(m) => CliError::Config(m),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Divergence(_) => EXIT_DIVERGENCE,
            CliError::Verification(_) => EXIT_VERIFY,
            CliError::Other(_) => EXIT_INTERNAL,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn other<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Other(e.to_string())
}

/// Apply one dotted-path override like `train.beta=0.1` to a JSON tree.
fn apply_override(doc: &mut serde_json::Value, kv: &str) -> CliResult<()> {
    let (path, raw) = kv
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override '{kv}' is not key=value")))?;
    let value: serde_json::Value =
        serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut cursor = doc;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let map = cursor
            .as_object_mut()
            .ok_or_else(|| CliError::Config(format!("override path '{path}' crosses a non-object")))?;
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        cursor = map
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    unreachable!()
}

/// Parse and fully validate a config document with overrides applied.
/// Unknown keys are hard errors so ablation-grid typos surface immediately.
pub fn parse_config(path: &Path, overrides: &[String]) -> CliResult<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut doc: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("bad JSON: {e}")))?;
    for kv in overrides {
        apply_override(&mut doc, kv)?;
    }
    let cfg: RunConfig = serde_json::from_value(doc)
        .map_err(|e| CliError::Config(e.to_string()))?;
    cfg.env.validate().map_err(|e| CliError::Config(e.to_string()))?;
    cfg.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(cfg)
}

#[derive(Parser)]
#[command(name = "ipl", about = "Entropy-regularized policy gradients with implicit policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy per the config's algo field.
    Train(RunArgs),
    /// Clone a multi-modal expert from demonstrations.
    Imitate(RunArgs),
    /// Roll out a checkpointed policy and export trajectories.
    Eval(RunArgs),
    /// Run exact finite-MDP verification suites.
    Verify {
        /// operators | boltzmann | lower-bound | all
        #[arg(long)]
        suite: String,
        #[arg(long, default_value_t = 1000)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks of the differentiable pipelines.
    GradCheck {
        /// nfp-logprob | nfp-entropy | nbp-sample | gaussian-logprob | all
        #[arg(long, default_value = "all")]
        target: String,
    },
    /// Reference statistics for the correlated Gaussian bandit.
    BanditReport(RunArgs),
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// key=value overrides using dotted paths, e.g. train.beta=0.1
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

pub fn run(argv: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let outcome = match cli.command {
        Command::Train(args) => with_run(args, cmd_train),
        Command::Imitate(args) => with_run(args, cmd_imitate),
        Command::Eval(args) => with_run(args, cmd_eval),
        Command::Verify { suite, instances, seed, out } => cmd_verify(&suite, instances, seed, out.as_deref()),
        Command::GradCheck { target } => cmd_grad_check(&target),
        Command::BanditReport(args) => with_run(args, cmd_bandit_report),
    };
    match outcome {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

struct RunContext {
    cfg: RunConfig,
    out: PathBuf,
}

fn with_run(args: RunArgs, f: impl FnOnce(&RunContext) -> CliResult<()>) -> CliResult<()> {
    let mut cfg = parse_config(&args.config, &args.overrides)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    let out = args.out.unwrap_or_else(|| PathBuf::from("run-out"));
    std::fs::create_dir_all(&out).map_err(other)?;
    let ctx = RunContext { cfg, out };
    let effective = serde_json::to_string_pretty(&ctx.cfg).expect("config serializes");
    std::fs::write(ctx.out.join("effective-config.json"), effective).map_err(other)?;
    f(&ctx)
}

fn eval_trajectories(
    ctx: &RunContext,
    mut act: impl FnMut(&[f64], u64) -> Vec<f64>,
) -> CliResult<Vec<crate::envs::Trajectory>> {
    let trajs = crate::algos::rollout_episodes(
        &ctx.cfg.env,
        &mut act,
        ctx.cfg.eval_episodes,
        ctx.cfg.train.seed.wrapping_add(0xea1),
    )
    .map_err(CliError::from)?;
    write_trajectories_csv(&ctx.out.join("trajectories.csv"), &trajs).map_err(other)?;
    Ok(trajs)
}

fn cmd_train(ctx: &RunContext) -> CliResult<()> {
    let cfg = &ctx.cfg;
    match cfg.algo {
        Algo::NbpOffpolicy => {
            let mut comps =
                OffPolicyComponents::new(&cfg.env, cfg.train.seed, cfg.rho_init.unwrap_or(-5.0))
                    .map_err(CliError::from)?;
            let metrics = train_offpolicy(&cfg.env, &cfg.train, &mut comps, Some(&ctx.out))?;
            crate::algos::write_metrics_jsonl(&ctx.out.join("metrics.jsonl"), &metrics)?;
            save_checkpoint(&comps.policy.gather_params(), &ctx.out.join("policy.json"))
                .map_err(other)?;
            save_checkpoint(&comps.critic.params, &ctx.out.join("critic.json")).map_err(other)?;
            let policy = comps.policy;
            eval_trajectories(ctx, |s, seed| policy.act(s, seed).expect("policy acts"))?;
        }
        Algo::NfpOnpolicy | Algo::GaussianBaseline => {
            let n = cfg.env.state_dim();
            let m = cfg.env.action_dim();
            let mut actor = match cfg.algo {
                Algo::NfpOnpolicy => {
                    if m < 2 {
                        return Err(CliError::Config(
                            "nfp-onpolicy needs an action dimension of at least 2".into(),
                        ));
                    }
                    OnPolicyActor::Flow(
                        FlowPolicy::new(FlowConfig::new(n, m), cfg.train.seed).map_err(other)?,
                    )
                }
                _ => OnPolicyActor::Gaussian(
                    GaussianPolicy::new(n, m, vec![64, 64], cfg.train.seed).map_err(other)?,
                ),
            };
            let mut value = ValueNet::new(n, &[64, 64], cfg.train.seed.wrapping_add(1))
                .map_err(CliError::from)?;
            let metrics = train_onpolicy(&cfg.env, &mut actor, &mut value, &cfg.train)?;
            crate::algos::write_metrics_jsonl(&ctx.out.join("metrics.jsonl"), &metrics)?;
            save_checkpoint(&actor.gather_params(), &ctx.out.join("policy.json"))
                .map_err(other)?;
            eval_trajectories(ctx, |s, seed| actor.act(s, seed).expect("policy acts").0)?;
        }
    }
    Ok(())
}

fn cmd_eval(ctx: &RunContext) -> CliResult<()> {
    let cfg = &ctx.cfg;
    let ckpt_path = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| CliError::Config("eval requires a checkpoint path".into()))?;
    let ps = load_checkpoint(ckpt_path, None).map_err(|e| CliError::Config(e.to_string()))?;
    let n = cfg.env.state_dim();
    let m = cfg.env.action_dim();
    match cfg.algo {
        Algo::NbpOffpolicy => {
            let mut comps = OffPolicyComponents::new(&cfg.env, cfg.train.seed, -5.0)
                .map_err(CliError::from)?;
            comps.policy.scatter_params(&ps).map_err(|e| CliError::Config(e.to_string()))?;
            let policy = comps.policy;
            eval_trajectories(ctx, |s, seed| policy.act(s, seed).expect("policy acts"))?;
        }
        Algo::NfpOnpolicy => {
            let mut p = FlowPolicy::new(FlowConfig::new(n, m), cfg.train.seed).map_err(other)?;
            p.scatter_params(&ps).map_err(|e| CliError::Config(e.to_string()))?;
            let actor = OnPolicyActor::Flow(p);
            eval_trajectories(ctx, |s, seed| actor.act(s, seed).expect("policy acts").0)?;
        }
        Algo::GaussianBaseline => {
            let mut p =
                GaussianPolicy::new(n, m, vec![64, 64], cfg.train.seed).map_err(other)?;
            p.params = ps;
            let actor = OnPolicyActor::Gaussian(p);
            eval_trajectories(ctx, |s, seed| actor.act(s, seed).expect("policy acts").0)?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct ImitateReport {
    final_loss: f64,
    coverage_up: f64,
    coverage_down: f64,
    coverage_other: f64,
}

fn cmd_imitate(ctx: &RunContext) -> CliResult<()> {
    let cfg = &ctx.cfg;
    if !matches!(cfg.env.kind, EnvKind::BimodalAxis) {
        return Err(CliError::Config("imitate currently supports the bimodal-axis env".into()));
    }
    let mut expert = crate::envs::BimodalAxisExpert::new(cfg.train.seed.wrapping_add(17));
    let data = generate_expert_dataset(&cfg.env, &mut expert, cfg.imitate_episodes, cfg.train.seed)
        .map_err(other)?;
    data.save(&ctx.out.join("demos.csv")).map_err(other)?;

    let n = data.len();
    let states = Tensor::new(vec![n, 1], data.states.concat()).map_err(other)?;
    let actions_flat: Vec<f64> = data.actions.iter().map(|a| a[0]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed.wrapping_add(23));
    let batch = cfg.train.batch_size.min(n);
    let sample_batch = |rng: &mut ChaCha8Rng| -> (Tensor, Tensor) {
        let idx: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..n)).collect();
        let s: Vec<f64> = idx.iter().map(|i| data.states[*i][0]).collect();
        let a: Vec<f64> = idx.iter().map(|i| actions_flat[*i]).collect();
        (
            Tensor::new(vec![batch, 1], s).unwrap(),
            Tensor::new(vec![batch, 1], a).unwrap(),
        )
    };
    let _ = states;

    let mut final_loss = f64::NAN;
    let trajs = match cfg.algo {
        Algo::NfpOnpolicy | Algo::GaussianBaseline => {
            let mut policy = match cfg.algo {
                Algo::NfpOnpolicy => CloningPolicy::Flow1d(
                    Monotone1dFlow::new(1, 16, 32, cfg.train.seed).map_err(other)?,
                ),
                _ => CloningPolicy::Gaussian(
                    GaussianPolicy::new(1, 1, vec![32], cfg.train.seed).map_err(other)?,
                ),
            };
            let mut adam = AdamState::new();
            for _ in 0..cfg.imitate_steps {
                let (s, a) = sample_batch(&mut rng);
                final_loss = policy
                    .mle_update(&s, &a, &mut adam, cfg.train.lr_policy)
                    .map_err(|e| CliError::Divergence(e.to_string()))?;
            }
            let policy = policy;
            eval_trajectories(ctx, |s, seed| policy.act(s, seed).expect("policy acts"))?
        }
        Algo::NbpOffpolicy => {
            let mut nbp_cfg = crate::nbp::NbpConfig::new(1, 1, -1.0, 1.0);
            if let Some(rho) = cfg.rho_init {
                nbp_cfg.rho_init = rho;
            }
            let mut policy = NoisyMlpPolicy::new(nbp_cfg, cfg.train.seed).map_err(other)?;
            let mut disc = DensityClassifier::new(1, 1, vec![64, 64], vec![-1.0], vec![1.0],
                cfg.train.seed.wrapping_add(3))
            .map_err(other)?;
            let mut d_adam = AdamState::new();
            let mut g_adam = AdamState::new();
            for _ in 0..cfg.imitate_steps {
                let (s, a) = sample_batch(&mut rng);
                let report = gan_imitation_update(
                    &mut policy,
                    &mut disc,
                    &s,
                    &a,
                    &mut d_adam,
                    &mut g_adam,
                    cfg.train.lr_classifier,
                    cfg.train.lr_policy,
                    rng.gen(),
                )
                .map_err(|e| CliError::Divergence(e.to_string()))?;
                final_loss = report.g_loss;
            }
            // Commit to one noise draw per episode so each rollout realizes
            // a single perturbed policy.
            let trajs = crate::imitation::rollout_committed(
                &cfg.env,
                &policy,
                cfg.eval_episodes,
                cfg.train.seed.wrapping_add(0xea1),
            )
            .map_err(other)?;
            write_trajectories_csv(&ctx.out.join("trajectories.csv"), &trajs).map_err(other)?;
            trajs
        }
    };
    let up = |t: &crate::envs::Trajectory| axis_endpoint(t) >= 10.0;
    let down = |t: &crate::envs::Trajectory| axis_endpoint(t) <= -10.0;
    let cov = mode_coverage(&trajs, &[&up, &down]);
    let report = ImitateReport {
        final_loss,
        coverage_up: cov[0],
        coverage_down: cov[1],
        coverage_other: cov[2],
    };
    std::fs::write(
        ctx.out.join("imitate-report.json"),
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )
    .map_err(other)?;
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub instances: usize,
    pub failures: usize,
    pub worst: f64,
    pub pass: bool,
}

fn random_qtable(ns: usize, na: usize, rng: &mut ChaCha8Rng) -> QTable {
    let mut q = QTable::zeros(ns, na);
    for v in &mut q.values {
        *v = rng.gen_range(-3.0..3.0);
    }
    q
}

/// Elementwise operator-ordering fuzz over random (MDP, Q, beta) triples.
pub fn verify_operators(instances: usize, seed: u64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0;
    let mut worst = 0.0f64;
    for trial in 0..instances {
        let ns = 2 + trial % 5;
        let na = 2 + trial % 3;
        let beta = [0.1, 1.0, 10.0][trial % 3];
        let mdp = TabularMdp::random(ns, na, 0.95, rng.gen());
        let q = random_qtable(ns, na, &mut rng);
        let report = operator_inequality_check(&q, &mdp, beta).expect("beta positive");
        worst = worst.max(report.max_violation);
        if !report.holds {
            failures += 1;
        }
    }
    SuiteReport {
        suite: "operators".into(),
        instances,
        failures,
        worst,
        pass: failures == 0,
    }
}

/// Damped stationary-policy search on random MDPs; convergent instances
/// must satisfy both fixed-point conditions to 1e-8.
pub fn verify_boltzmann(instances: usize, seed: u64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0;
    let mut converged = 0;
    let mut worst = 0.0f64;
    for trial in 0..instances {
        let ns = 2 + trial % 4;
        let na = 2 + trial % 3;
        let beta = [0.5, 1.0, 2.0][trial % 3];
        let mdp = TabularMdp::random(ns, na, 0.9, rng.gen());
        let report = boltzmann_stationary(&mdp, beta, 1e-11, 50_000).expect("beta positive");
        if !report.converged {
            continue;
        }
        converged += 1;
        let q = QTable { n_states: ns, n_actions: na, values: report.q_values.clone() };
        let target = softmax_of(&q, beta);
        let pi_gap = report
            .pi
            .probs
            .iter()
            .zip(&target.probs)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        worst = worst.max(report.residual).max(pi_gap);
        if report.residual > 1e-8 || pi_gap > 1e-8 {
            failures += 1;
        }
    }
    SuiteReport {
        suite: "boltzmann".into(),
        instances: converged,
        failures,
        worst,
        pass: failures == 0 && converged > 0,
    }
}

fn softmax_of(q: &QTable, beta: f64) -> TabularPolicy {
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

/// Surrogate lower-bound fuzz under the max-state KL precondition.
pub fn verify_lower_bound(instances: usize, seed: u64) -> SuiteReport {
    let alpha = 0.01;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0;
    let mut worst = 0.0f64;
    for trial in 0..instances {
        let ns = 2 + trial % 4;
        let na = 2 + trial % 3;
        let mdp = TabularMdp::random(ns, na, 0.9, rng.gen());
        let pi_old = TabularPolicy::random(ns, na, rng.gen());
        let pi = perturb_within_kl(&pi_old, alpha, rng.gen());
        let beta = [0.01, 0.1, 1.0][trial % 3];
        let report = lower_bound_check(&mdp, &pi, &pi_old, beta, alpha);
        worst = worst.min(report.slack).abs();
        if !(report.applicable && report.holds) {
            failures += 1;
        }
    }
    SuiteReport {
        suite: "lower-bound".into(),
        instances,
        failures,
        worst,
        pass: failures == 0,
    }
}

fn perturb_within_kl(pi_old: &TabularPolicy, alpha: f64, seed: u64) -> TabularPolicy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<f64> = (0..pi_old.probs.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut delta = 0.3;
    loop {
        let mut probs = Vec::with_capacity(pi_old.probs.len());
        for s in 0..pi_old.n_states {
            let row: Vec<f64> = (0..pi_old.n_actions)
                .map(|a| pi_old.prob(s, a) * (delta * noise[s * pi_old.n_actions + a]).exp())
                .collect();
            let z: f64 = row.iter().sum();
            probs.extend(row.iter().map(|v| v / z));
        }
        let cand =
            TabularPolicy { n_states: pi_old.n_states, n_actions: pi_old.n_actions, probs };
        if cand.max_kl_to(pi_old) <= alpha {
            return cand;
        }
        delta *= 0.5;
    }
}

fn cmd_verify(suite: &str, instances: usize, seed: u64, out: Option<&Path>) -> CliResult<()> {
    let reports: Vec<SuiteReport> = match suite {
        "operators" => vec![verify_operators(instances, seed)],
        "boltzmann" => vec![verify_boltzmann(instances.min(50), seed)],
        "lower-bound" => vec![verify_lower_bound(instances, seed)],
        "all" => vec![
            verify_operators(instances, seed),
            verify_boltzmann(20, seed),
            verify_lower_bound(200, seed),
        ],
        other => return Err(CliError::Config(format!("unknown suite '{other}'"))),
    };
    for r in &reports {
        println!(
            "{}: {} instances, {} failures, worst {:.3e} -> {}",
            r.suite,
            r.instances,
            r.failures,
            r.worst,
            if r.pass { "PASS" } else { "FAIL" }
        );
    }
    let doc = serde_json::to_string_pretty(&reports).expect("report serializes");
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(other)?;
        std::fs::write(dir.join("verify-report.json"), doc).map_err(other)?;
    }
    if reports.iter().all(|r| r.pass) {
        Ok(())
    } else {
        Err(CliError::Verification(format!("{suite} suite reported failures")))
    }
}

/// Central-difference check of analytic parameter gradients on a sampled
/// subset of coordinates; relative error against max(|a|, |n|, 1e-6).
pub fn param_gradcheck(
    params: &ParamSet,
    loss_of: impl Fn(&ParamSet) -> f64,
    analytic: &[f64],
    tol: f64,
    probes: usize,
    seed: u64,
) -> (f64, bool) {
    let flat = params.flatten();
    assert_eq!(flat.len(), analytic.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..probes.min(flat.len()) {
        let i = rng.gen_range(0..flat.len());
        let mut plus = flat.clone();
        plus[i] += h;
        let mut minus = flat.clone();
        minus[i] -= h;
        let fp = loss_of(&params.unflatten(&plus).unwrap());
        let fm = loss_of(&params.unflatten(&minus).unwrap());
        let numeric = (fp - fm) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    (worst, worst <= tol)
}

fn flat_grads(params: &ParamSet, named: &crate::nn::NamedGrads) -> Vec<f64> {
    let mut out = Vec::new();
    for (name, t) in params.iter() {
        let g = named.get(name).expect("gradient present");
        assert_eq!(g.shape(), t.shape());
        out.extend_from_slice(g.data());
    }
    out
}

pub fn gradcheck_nfp_logprob() -> (String, f64, bool) {
    let policy = FlowPolicy::new(FlowConfig::new(2, 2), 11).unwrap();
    let state = Tensor::vector(vec![0.3, -0.8]);
    let action = Tensor::vector(vec![0.4, 0.9]);
    let params = policy.gather_params();
    let loss_of = |ps: &ParamSet| {
        let mut p = FlowPolicy::new(FlowConfig::new(2, 2), 11).unwrap();
        p.scatter_params(ps).unwrap();
        let mut g = Graph::new();
        let s = g.constant(&state);
        let a = g.constant(&action);
        p.log_prob(&mut g, &s, &a).unwrap().item()
    };
    let analytic = {
        let mut g = Graph::new();
        let b = policy.bind(&mut g);
        let s = g.constant(&state);
        let a = g.constant(&action);
        let lp = policy.log_prob_bound(&mut g, &b, &s, &a).unwrap();
        let grads = g.backward(&lp).unwrap();
        let named = policy.collect_grads(&b, &grads).unwrap();
        flat_grads(&params, &named)
    };
    let (worst, pass) = param_gradcheck(&params, loss_of, &analytic, 1e-4, 60, 1);
    ("nfp-logprob".into(), worst, pass)
}

pub fn gradcheck_nfp_entropy() -> (String, f64, bool) {
    let policy = FlowPolicy::new(FlowConfig::new(2, 2), 13).unwrap();
    let state = Tensor::vector(vec![0.1, 0.5]);
    let params = policy.gather_params();
    let loss_of = |ps: &ParamSet| {
        let mut p = FlowPolicy::new(FlowConfig::new(2, 2), 13).unwrap();
        p.scatter_params(ps).unwrap();
        let mut g = Graph::new();
        let s = g.constant(&state);
        p.entropy_estimate(&mut g, &s, 32, 5).unwrap().item()
    };
    let analytic = {
        let mut g = Graph::new();
        let b = policy.bind(&mut g);
        let s = g.constant(&state);
        let ent = policy.entropy_estimate_bound(&mut g, &b, &s, 32, 5).unwrap();
        let grads = g.backward(&ent).unwrap();
        let named = policy.collect_grads(&b, &grads).unwrap();
        flat_grads(&params, &named)
    };
    let (worst, pass) = param_gradcheck(&params, loss_of, &analytic, 1e-4, 60, 2);
    ("nfp-entropy".into(), worst, pass)
}

pub fn gradcheck_nbp_sample() -> (String, f64, bool) {
    let cfg = crate::nbp::NbpConfig::new(2, 1, -1.0, 1.0);
    let policy = NoisyMlpPolicy::new(cfg.clone(), 17).unwrap();
    let state = Tensor::vector(vec![0.2, -0.4]);
    let noise = policy.sample_param_noise(3);
    let mask = policy.sample_dropout_mask(4);
    let params = policy.gather_params();
    let loss_of = |ps: &ParamSet| {
        let mut p = NoisyMlpPolicy::new(cfg.clone(), 17).unwrap();
        p.scatter_params(ps).unwrap();
        let mut g = Graph::new();
        let s = g.constant(&state);
        let a = p.sample(&mut g, &s, &noise, &mask).unwrap();
        let sq = g.square(&a).unwrap();
        g.sum(&sq).unwrap().item()
    };
    let analytic = {
        let mut g = Graph::new();
        let b = policy.bind(&mut g);
        let s = g.constant(&state);
        let a = policy.sample_bound(&mut g, &b, &s, &noise, &mask).unwrap();
        let sq = g.square(&a).unwrap();
        let loss = g.sum(&sq).unwrap();
        let grads = g.backward(&loss).unwrap();
        let named = policy.collect_grads(&b, &grads).unwrap();
        flat_grads(&params, &named)
    };
    let (worst, pass) = param_gradcheck(&params, loss_of, &analytic, 1e-4, 60, 3);
    ("nbp-sample".into(), worst, pass)
}

pub fn gradcheck_gaussian_logprob() -> (String, f64, bool) {
    let policy = GaussianPolicy::new(2, 2, vec![16], 19).unwrap();
    let states = Tensor::new(vec![1, 2], vec![0.3, 0.7]).unwrap();
    let actions = Tensor::new(vec![1, 2], vec![-0.2, 0.5]).unwrap();
    let params = policy.params.clone();
    let loss_of = |ps: &ParamSet| {
        let mut p = GaussianPolicy::new(2, 2, vec![16], 19).unwrap();
        p.params = ps.clone();
        let mut g = Graph::new();
        let s = g.constant(&states);
        let a = g.constant(&actions);
        let lp = p.log_prob(&mut g, &s, &a).unwrap();
        g.sum(&lp).unwrap().item()
    };
    let analytic = {
        let mut g = Graph::new();
        let b = policy.bind(&mut g);
        let s = g.constant(&states);
        let a = g.constant(&actions);
        let lp = policy.log_prob_bound(&mut g, &b, &s, &a).unwrap();
        let loss = g.sum(&lp).unwrap();
        let grads = g.backward(&loss).unwrap();
        let named = crate::nn::grads_by_name(&b, &grads).unwrap();
        flat_grads(&params, &named)
    };
    let (worst, pass) = param_gradcheck(&params, loss_of, &analytic, 1e-4, 60, 4);
    ("gaussian-logprob".into(), worst, pass)
}

fn cmd_grad_check(target: &str) -> CliResult<()> {
    let checks: Vec<fn() -> (String, f64, bool)> = match target {
        "nfp-logprob" => vec![gradcheck_nfp_logprob],
        "nfp-entropy" => vec![gradcheck_nfp_entropy],
        "nbp-sample" => vec![gradcheck_nbp_sample],
        "gaussian-logprob" => vec![gradcheck_gaussian_logprob],
        "all" => vec![
            gradcheck_nfp_logprob,
            gradcheck_nfp_entropy,
            gradcheck_nbp_sample,
            gradcheck_gaussian_logprob,
        ],
        other => return Err(CliError::Config(format!("unknown grad-check target '{other}'"))),
    };
    let mut all_pass = true;
    for check in checks {
        let (name, worst, pass) = check();
        println!("{name}: max rel err {worst:.3e} -> {}", if pass { "PASS" } else { "FAIL" });
        all_pass &= pass;
    }
    if all_pass {
        Ok(())
    } else {
        Err(CliError::Verification("gradient check failed".into()))
    }
}

#[derive(Serialize)]
struct BanditReport {
    target_correlation: f64,
    optimal_entropy_temperature: f64,
    quadrature_mass_error: f64,
    sample_correlation: Option<f64>,
}

fn cmd_bandit_report(ctx: &RunContext) -> CliResult<()> {
    let cfg = &ctx.cfg;
    let params = match &cfg.env.kind {
        EnvKind::GaussianBandit(p) => p.clone(),
        _ => return Err(CliError::Config("bandit-report needs a gaussian-bandit env".into())),
    };
    let s = &params.sigma;
    let target_corr = s[0][1] / (s[0][0] * s[1][1]).sqrt();
    // Quadrature self-check: the normalized optimal density integrates to 1.
    let log_z = crate::envs::bandit_log_normalizer(&params, 400);
    let n = 400;
    let h = 2.0 / n as f64;
    let mut mass = 0.0;
    for i in 0..n {
        let x = -1.0 + (i as f64 + 0.5) * h;
        for j in 0..n {
            let y = -1.0 + (j as f64 + 0.5) * h;
            mass += (crate::envs::bandit_optimal_logdensity_unnorm(&params, &[x, y]) - log_z)
                .exp()
                * h
                * h;
        }
    }

    let sample_correlation = match (&cfg.checkpoint, cfg.algo) {
        (Some(path), Algo::NfpOnpolicy) => {
            let ps = load_checkpoint(path, None).map_err(|e| CliError::Config(e.to_string()))?;
            let mut p = FlowPolicy::new(FlowConfig::new(1, 2), cfg.train.seed).map_err(other)?;
            p.scatter_params(&ps).map_err(|e| CliError::Config(e.to_string()))?;
            Some(flow_sample_correlation(&p, 10_000, cfg.train.seed))
        }
        _ => None,
    };

    let report = BanditReport {
        target_correlation: target_corr,
        optimal_entropy_temperature: params.beta_opt,
        quadrature_mass_error: (mass - 1.0).abs(),
        sample_correlation,
    };
    std::fs::write(
        ctx.out.join("bandit-report.json"),
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )
    .map_err(other)?;
    println!(
        "target correlation {target_corr:.3}; quadrature mass error {:.2e}",
        report.quadrature_mass_error
    );
    Ok(())
}

/// Pearson correlation of the two action components over fresh draws at
/// the bandit's dummy state.
pub fn flow_sample_correlation(policy: &FlowPolicy, draws: usize, seed: u64) -> f64 {
    let mut g = Graph::new();
    let b = policy.bind(&mut g);
    let states = g.constant(&Tensor::new(vec![draws, 1], vec![0.0; draws]).unwrap());
    let noise = g.constant(&sample_base_noise(draws, 2, seed));
    let (actions, _) = policy.sample_bound(&mut g, &b, &states, &noise).unwrap();
    let _ = bind;
    correlation_of_pairs(actions.data())
}

pub fn correlation_of_pairs(data: &[f64]) -> f64 {
    let n = data.len() / 2;
    let xs: Vec<f64> = (0..n).map(|i| data[2 * i]).collect();
    let ys: Vec<f64> = (0..n).map(|i| data[2 * i + 1]).collect();
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for i in 0..n {
        cov += (xs[i] - mx) * (ys[i] - my);
        vx += (xs[i] - mx).powi(2);
        vy += (ys[i] - my).powi(2);
    }
    cov / (vx.sqrt() * vy.sqrt())
}

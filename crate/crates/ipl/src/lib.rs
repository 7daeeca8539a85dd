//! Entropy-regularized policy gradients with implicit policies.
//!
//! The crate provides:
//! - a small reverse-mode autodiff tape ([`autodiff`]);
//! - MLP approximators with checkpointing and Adam ([`nn`]);
//! - a normalizing-flow policy with exact conditional log-density ([`flow`]);
//! - a density-free parameter-noise policy ([`nbp`]);
//! - a classifier-based entropy estimator for density-free policies ([`entropy`]);
//! - on-policy and off-policy training loops ([`algos`]);
//! - an exact finite-MDP laboratory for operator and bound checks ([`tabular`]);
//! - desk-scale environments ([`envs`]) and imitation learning ([`imitation`]);
//! - the `ipl` command-line harness ([`cli`]).

pub mod autodiff;
pub mod nn;
pub mod flow;
pub mod nbp;
pub mod entropy;
pub mod gaussian;
pub mod algos;
pub mod tabular;
pub mod envs;
pub mod imitation;
pub mod cli;

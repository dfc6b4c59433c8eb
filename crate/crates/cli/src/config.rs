//! Experiment configuration files.
//!
//! Configs are TOML with `schema_version = 1`. Every table rejects unknown
//! keys, and serializing a parsed config then parsing it again gives back an
//! identical value.

use std::path::PathBuf;

use bff_core::approximator::ApproxKind;
use bff_core::bias::{DEFAULT_EPS, DEFAULT_N_INNER};
use bff_core::env::{ContinuousEnvSpec, Diffusion, DiscreteEnvSpec, Drift, EnvSpec, State, StateReward};
use bff_core::residual::EstimatorKind;
use bff_core::trainer::ReferenceSettings;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub master_seed: u64,
    pub environment: EnvironmentConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub approximator: Option<ApproximatorConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trainer: Option<TrainerConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulate: Option<SimulateConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias_sweep: Option<BiasSweepConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<OutputConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EnvironmentConfig {
    Continuous(ContinuousConfig),
    Discrete(DiscreteConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContinuousConfig {
    pub epsilon: f64,
    pub gamma: f64,
    pub drift: Drift,
    pub diffusion: Diffusion,
    pub reward: StateReward,
    pub s0: f64,
}

impl Default for ContinuousConfig {
    fn default() -> Self {
        let spec = ContinuousEnvSpec::default();
        ContinuousConfig {
            epsilon: spec.epsilon,
            gamma: spec.gamma,
            drift: spec.drift,
            diffusion: spec.diffusion,
            reward: spec.reward,
            s0: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransitionConfig {
    Ring,
    Uniform,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiscreteRewardConfig {
    Ring,
    Zero,
    Constant(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscreteConfig {
    pub n: usize,
    pub gamma: f64,
    pub transition: TransitionConfig,
    pub reward: DiscreteRewardConfig,
    pub s0: usize,
}

impl Default for DiscreteConfig {
    fn default() -> Self {
        DiscreteConfig {
            n: 32,
            gamma: 0.9,
            transition: TransitionConfig::Ring,
            reward: DiscreteRewardConfig::Ring,
            s0: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApproximatorConfig {
    pub kind: ApproxKind,
    #[serde(default)]
    pub init_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    pub estimators: Vec<EstimatorKind>,
    pub tau: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub trajectory_length: usize,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Primal initialisation seeds. Defaults to the approximator's seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub primal_seeds: Option<Vec<u64>>,
    #[serde(default)]
    pub dual_seeds: Vec<u64>,
    /// A run counts as converged once its relative error reaches this level.
    #[serde(default = "default_threshold")]
    pub convergence_threshold: f64,
    #[serde(default)]
    pub reference: ReferenceSettings,
}

fn default_eval_every() -> usize {
    100
}

fn default_beta() -> f64 {
    0.5
}

fn default_threshold() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub length: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasSweepConfig {
    #[serde(default = "default_eps")]
    pub eps: Vec<f64>,
    pub n_outer: usize,
    #[serde(default = "default_n_inner")]
    pub n_inner: usize,
    /// Also measure the constant-coefficient environment at `control_eps`.
    #[serde(default)]
    pub control: bool,
    #[serde(default = "default_control_eps")]
    pub control_eps: f64,
}

fn default_eps() -> Vec<f64> {
    DEFAULT_EPS.to_vec()
}

fn default_n_inner() -> usize {
    DEFAULT_N_INNER
}

fn default_control_eps() -> f64 {
    0.1
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
}

/// One training run of a plan: an estimator with its initialisation seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct PlannedRun {
    pub label: String,
    pub estimator: EstimatorKind,
    pub primal_seed: u64,
    pub dual_seed: Option<u64>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let env = self.env_spec()?;
        env.check_state(self.initial_state())
            .map_err(|e| CliError::Config(format!("environment.s0: {e}")))?;
        if let (Some(a), EnvSpec::Continuous(_)) = (&self.approximator, &env) {
            if a.kind == ApproxKind::Tabular {
                return Err(CliError::Config(
                    "a tabular approximator needs a discrete environment".into(),
                ));
            }
        }
        if let Some(t) = &self.trainer {
            t.validate()?;
            self.plan()?;
        }
        if let Some(s) = &self.simulate {
            if s.length < 2 {
                return Err(CliError::Config("simulate.length must be at least 2".into()));
            }
        }
        if let Some(b) = &self.bias_sweep {
            if b.n_outer < 2 || b.n_inner < 2 {
                return Err(CliError::Config("bias_sweep needs n_outer >= 2 and n_inner >= 2".into()));
            }
            if !(b.control_eps > 0.0) || b.eps.iter().any(|e| !(*e > 0.0)) {
                return Err(CliError::Config("bias_sweep eps values must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn env_spec(&self) -> Result<EnvSpec, CliError> {
        let spec = match &self.environment {
            EnvironmentConfig::Continuous(c) => {
                let spec = ContinuousEnvSpec {
                    drift: c.drift,
                    diffusion: c.diffusion,
                    reward: c.reward,
                    epsilon: c.epsilon,
                    gamma: c.gamma,
                };
                spec.validate()?;
                EnvSpec::Continuous(spec)
            }
            EnvironmentConfig::Discrete(d) => {
                if d.n == 0 {
                    return Err(CliError::Config("environment.n must be positive".into()));
                }
                let transition = match d.transition {
                    TransitionConfig::Ring => DiscreteEnvSpec::ring_transition(d.n, 0.2),
                    TransitionConfig::Uniform => vec![1.0 / d.n as f64; d.n * d.n],
                };
                let reward = match d.reward {
                    DiscreteRewardConfig::Ring => DiscreteEnvSpec::ring_reward(d.n),
                    DiscreteRewardConfig::Zero => vec![0.0; d.n],
                    DiscreteRewardConfig::Constant(c) => vec![c; d.n],
                };
                EnvSpec::Discrete(DiscreteEnvSpec::new(d.n, transition, reward, d.gamma)?)
            }
        };
        Ok(spec)
    }

    pub fn initial_state(&self) -> State {
        match &self.environment {
            EnvironmentConfig::Continuous(c) => State::Continuous(c.s0),
            EnvironmentConfig::Discrete(d) => State::Discrete { index: d.s0 as u32, n: d.n as u32 },
        }
    }

    pub fn approximator(&self) -> ApproximatorConfig {
        self.approximator.clone().unwrap_or(ApproximatorConfig {
            kind: match self.environment {
                EnvironmentConfig::Continuous(_) => ApproxKind::Mlp,
                EnvironmentConfig::Discrete(_) => ApproxKind::Tabular,
            },
            init_seed: 0,
        })
    }

    /// Expands the trainer block into individual runs. Each non-dual
    /// estimator runs once per primal seed; primal-dual pairs primal seed `i`
    /// with dual seed `i`, or reuses a single primal seed for every dual seed.
    pub fn plan(&self) -> Result<Vec<PlannedRun>, CliError> {
        let t = self
            .trainer
            .as_ref()
            .ok_or_else(|| CliError::Config("missing [trainer] table".into()))?;
        let primal = t
            .primal_seeds
            .clone()
            .unwrap_or_else(|| vec![self.approximator().init_seed]);
        if primal.is_empty() {
            return Err(CliError::Config("trainer.primal_seeds is empty".into()));
        }
        let multi = primal.len() > 1;
        let mut runs = Vec::new();
        for &kind in &t.estimators {
            if kind == EstimatorKind::PrimalDual {
                if t.dual_seeds.is_empty() {
                    return Err(CliError::Config("primal-dual needs trainer.dual_seeds".into()));
                }
                let pairs: Vec<(u64, u64)> = if primal.len() == t.dual_seeds.len() {
                    primal.iter().copied().zip(t.dual_seeds.iter().copied()).collect()
                } else if primal.len() == 1 {
                    t.dual_seeds.iter().map(|&d| (primal[0], d)).collect()
                } else {
                    return Err(CliError::Config(format!(
                        "{} primal seeds cannot be paired with {} dual seeds",
                        primal.len(),
                        t.dual_seeds.len()
                    )));
                };
                for (p, d) in pairs {
                    let label = if multi {
                        format!("{kind}_p{p}_d{d}")
                    } else {
                        format!("{kind}_d{d}")
                    };
                    runs.push(PlannedRun {
                        label,
                        estimator: kind,
                        primal_seed: p,
                        dual_seed: Some(d),
                    });
                }
            } else {
                for &p in &primal {
                    let label = if multi { format!("{kind}_p{p}") } else { kind.to_string() };
                    runs.push(PlannedRun {
                        label,
                        estimator: kind,
                        primal_seed: p,
                        dual_seed: None,
                    });
                }
            }
        }
        let mut labels: Vec<&str> = runs.iter().map(|r| r.label.as_str()).collect();
        labels.sort_unstable();
        if labels.windows(2).any(|w| w[0] == w[1]) {
            return Err(CliError::Config("trainer block produces duplicate runs".into()));
        }
        Ok(runs)
    }
}

impl TrainerConfig {
    fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: &str| Err(CliError::Config(format!("trainer.{msg}")));
        if self.estimators.is_empty() {
            return bad("estimators is empty");
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return bad("tau must be a finite non-negative number");
        }
        if self.batch_size == 0 || self.epochs == 0 || self.eval_every == 0 {
            return bad("batch_size, epochs and eval_every must be positive");
        }
        if self.trajectory_length < 2 {
            return bad("trajectory_length must be at least 2");
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta must be a finite non-negative number");
        }
        if !(self.convergence_threshold > 0.0) {
            return bad("convergence_threshold must be positive");
        }
        Ok(())
    }
}

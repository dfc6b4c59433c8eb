//! Deterministic minibatch SGD over a recorded trajectory, with error traces
//! measured against a reference value function.

use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::approximator::{ApproxKind, ValueApproximator};
use crate::env::{simulate, EnvSpec, State, Trajectory, TWO_PI};
use crate::error::{Error, Result};
use crate::residual::{estimate_gradient, primal_dual_step, EstimatorKind, TransitionWindow};
use crate::rng;
use crate::tabular::exact_value;

/// Error above `DIVERGENCE_FACTOR · e_0` aborts training.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

/// Grid size of continuous reference solutions.
pub const CONTINUOUS_GRID: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub estimator: EstimatorKind,
    pub tau: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub eval_every: usize,
    /// Dual step size; primal-dual only.
    pub beta: f64,
    /// Permits estimators that resample from the model.
    pub allow_oracle: bool,
}

impl TrainConfig {
    pub fn new(estimator: EstimatorKind, tau: f64, batch_size: usize, epochs: usize, seed: u64) -> Self {
        TrainConfig {
            estimator,
            tau,
            batch_size,
            epochs,
            seed,
            eval_every: 100,
            beta: 0.5,
            allow_oracle: false,
        }
    }

    /// `η = τ/M`.
    pub fn eta(&self) -> f64 {
        self.tau / self.batch_size as f64
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {} must be >= 0", self.tau)));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.eval_every == 0 {
            return Err(Error::InvalidArgument(
                "batch_size, epochs and eval_every must be positive".into(),
            ));
        }
        if self.estimator == EstimatorKind::PrimalDual && !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidArgument(format!("dual step {} must be >= 0", self.beta)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ErrorTrace {
    pub steps: Vec<usize>,
    pub errors: Vec<f64>,
    pub relative: Vec<f64>,
}

impl ErrorTrace {
    fn push(&mut self, step: usize, error: f64) {
        let e0 = self.errors.first().copied().unwrap_or(error);
        let rel = if e0 > 0.0 {
            error / e0
        } else if error == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        self.steps.push(step);
        self.errors.push(error);
        self.relative.push(rel);
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn final_error(&self) -> Option<f64> {
        self.errors.last().copied()
    }

    pub fn final_relative(&self) -> Option<f64> {
        self.relative.last().copied()
    }

    pub fn final_step(&self) -> Option<usize> {
        self.steps.last().copied()
    }

    /// Relative error at the last recorded step not after `step`.
    pub fn relative_at(&self, step: usize) -> Option<f64> {
        let idx = self.steps.partition_point(|&s| s <= step);
        idx.checked_sub(1).map(|i| self.relative[i])
    }

    /// Smallest relative error reached within the first `steps` updates.
    pub fn best_relative_within(&self, steps: usize) -> Option<f64> {
        self.steps
            .iter()
            .zip(&self.relative)
            .filter(|(s, _)| **s <= steps)
            .map(|(_, r)| *r)
            .reduce(f64::min)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "step,error,rel_error")?;
        for ((s, e), r) in self.steps.iter().zip(&self.errors).zip(&self.relative) {
            writeln!(w, "{s},{e},{r}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReferenceKind {
    ExactTabular,
    TrainedOracle,
}

/// Reference values on a fixed evaluation grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceSolution {
    pub kind: ReferenceKind,
    pub grid: Vec<State>,
    pub values: Vec<f64>,
}

impl ReferenceSolution {
    /// `n` uniform points `2π(k+1)/n`, k = 0..n, covering (0, 2π].
    pub fn continuous_grid(n: usize) -> Vec<State> {
        (1..=n)
            .map(|k| State::Continuous(TWO_PI * k as f64 / n as f64))
            .collect()
    }

    pub fn write_profile_csv<W: Write>(&self, approx: &ValueApproximator, mut w: W) -> Result<()> {
        writeln!(w, "s,v_approx,v_reference")?;
        for (s, v_ref) in self.grid.iter().zip(&self.values) {
            writeln!(w, "{s},{},{v_ref}", approx.value(*s)?)?;
        }
        Ok(())
    }
}

/// Settings for the trained continuous reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReferenceSettings {
    pub trajectory_length: usize,
    pub tau: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub init_seed: u64,
}

impl Default for ReferenceSettings {
    fn default() -> Self {
        ReferenceSettings {
            trajectory_length: 1_000_000,
            tau: 0.01,
            batch_size: 1000,
            epochs: 3,
            seed: 1_000_003,
            init_seed: 1_000_033,
        }
    }
}

/// `sqrt(Σ_grid (V(s) − V*(s))²)`.
pub fn evaluate_error(approx: &ValueApproximator, reference: &ReferenceSolution) -> Result<f64> {
    let mut acc = 0.0;
    for (s, v_ref) in reference.grid.iter().zip(&reference.values) {
        let d = approx.value(*s)? - v_ref;
        acc += d * d;
    }
    Ok(acc.sqrt())
}

/// Seeded permutation of the usable window indices, chunked into full
/// batches of `batch_size`; the partial tail is dropped. With
/// `needs_future`, window `m` must satisfy `m + 2 ≤ T`, otherwise `m + 1 ≤ T`.
pub fn make_batches(
    trajectory: &Trajectory,
    batch_size: usize,
    needs_future: bool,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    let t = trajectory.len();
    let usable = if needs_future { t.saturating_sub(1) } else { t };
    if batch_size == 0 || usable / batch_size == 0 {
        return Err(Error::TrajectoryTooShort { usable, batch_size });
    }
    let mut idx: Vec<usize> = (0..usable).collect();
    idx.shuffle(&mut rng::stream(seed, rng::streams::SHUFFLE));
    Ok(idx.chunks_exact(batch_size).map(<[usize]>::to_vec).collect())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub approx: ValueApproximator,
    pub dual: Option<ValueApproximator>,
    pub trace: ErrorTrace,
    pub updates: usize,
}

/// Runs `epochs × floor((T−1)/M)` updates. Every estimator walks the same
/// window set `{m : m + 2 ≤ T}` in the same seeded order, so runs that share
/// a seed see identical batches. Epoch `e` is shuffled with
/// `derive_seed(seed, e)`.
pub fn train(
    env: &EnvSpec,
    trajectory: &Trajectory,
    mut approx: ValueApproximator,
    mut dual: Option<ValueApproximator>,
    config: &TrainConfig,
    reference: &ReferenceSolution,
) -> Result<TrainOutcome> {
    config.validate()?;
    let kind = config.estimator;
    if kind.is_oracle() && !config.allow_oracle {
        return Err(Error::ModelAccessRequired("uncorrelated sampling"));
    }
    if kind == EstimatorKind::PrimalDual && dual.is_none() {
        return Err(Error::InvalidArgument("primal-dual needs a dual approximator".into()));
    }
    if trajectory.env_kind != env.kind() {
        return Err(Error::InvalidArgument(format!(
            "{} trajectory for a {} environment",
            trajectory.env_kind,
            env.kind()
        )));
    }
    approx.check_finite()?;

    let mut resampler = rng::stream(config.seed, rng::streams::RESAMPLE);
    let mut trace = ErrorTrace::default();
    let e0 = evaluate_error(&approx, reference)?;
    trace.push(0, e0);
    let limit = DIVERGENCE_FACTOR * e0;

    let mut step = 0;
    let mut batch = Vec::with_capacity(config.batch_size);
    for epoch in 0..config.epochs {
        let seed = rng::derive_seed(config.seed, epoch as u64);
        for indices in make_batches(trajectory, config.batch_size, true, seed)? {
            batch.clear();
            for &m in &indices {
                batch.push(TransitionWindow::from_trajectory(env, trajectory, m, true)?);
            }
            if kind == EstimatorKind::PrimalDual {
                let y = dual.as_mut().expect("checked above");
                primal_dual_step(env, &mut approx, y, &batch, config.tau, config.beta)?;
            } else {
                let rng = kind.is_oracle().then_some(&mut resampler);
                let est = estimate_gradient(kind, env, &approx, &batch, rng)?;
                for (p, g) in approx.params_mut().iter_mut().zip(&est.grad) {
                    *p -= config.tau * g;
                }
            }
            step += 1;
            if step % config.eval_every == 0 {
                record(&mut trace, &approx, reference, step, e0, limit)?;
            }
        }
    }
    if trace.final_step() != Some(step) {
        record(&mut trace, &approx, reference, step, e0, limit)?;
    }
    Ok(TrainOutcome {
        approx,
        dual,
        trace,
        updates: step,
    })
}

fn record(
    trace: &mut ErrorTrace,
    approx: &ValueApproximator,
    reference: &ReferenceSolution,
    step: usize,
    e0: f64,
    limit: f64,
) -> Result<()> {
    let e = match evaluate_error(approx, reference) {
        Ok(e) => e,
        Err(Error::NonFinite { .. }) => f64::INFINITY,
        Err(other) => return Err(other),
    };
    trace.push(step, e);
    if !e.is_finite() || (e0 > 0.0 && e > limit) {
        return Err(Error::Diverged {
            step,
            error: e,
            limit,
            trace: Box::new(trace.clone()),
        });
    }
    Ok(())
}

/// Reference values: the exact Bellman solve on discrete chains, or a
/// network trained with the uncorrelated oracle on continuous ones.
pub fn build_reference(env: &EnvSpec, settings: &ReferenceSettings) -> Result<ReferenceSolution> {
    match env {
        EnvSpec::Discrete(d) => Ok(ReferenceSolution {
            kind: ReferenceKind::ExactTabular,
            grid: (0..d.n()).map(|i| State::discrete(i, d.n())).collect(),
            values: exact_value(d)?,
        }),
        EnvSpec::Continuous(_) => {
            let (approx, _) = train_oracle_reference(env, settings)?;
            let grid = ReferenceSolution::continuous_grid(CONTINUOUS_GRID);
            let values = grid
                .iter()
                .map(|s| approx.value(*s))
                .collect::<Result<Vec<_>>>()?;
            Ok(ReferenceSolution {
                kind: ReferenceKind::TrainedOracle,
                grid,
                values,
            })
        }
    }
}

/// Trains the oracle network behind a continuous reference and returns it
/// with its training trace (measured against the zero function).
pub fn train_oracle_reference(
    env: &EnvSpec,
    settings: &ReferenceSettings,
) -> Result<(ValueApproximator, ErrorTrace)> {
    let trajectory = simulate(env, env.default_s0(), settings.trajectory_length, settings.seed)?;
    let approx = ValueApproximator::init(ApproxKind::Mlp, 0, settings.init_seed);
    let grid = ReferenceSolution::continuous_grid(CONTINUOUS_GRID);
    let zero = ReferenceSolution {
        kind: ReferenceKind::TrainedOracle,
        values: vec![0.0; grid.len()],
        grid,
    };
    let config = TrainConfig {
        eval_every: usize::MAX,
        allow_oracle: true,
        ..TrainConfig::new(
            EstimatorKind::Uncorrelated,
            settings.tau,
            settings.batch_size,
            settings.epochs,
            settings.seed,
        )
    };
    let out = train(env, &trajectory, approx, None, &config, &zero)?;
    Ok((out.approx, out.trace))
}

#[derive(Clone, Debug, PartialEq)]
pub enum EtaDiagnostic {
    Ok { ratio: f64 },
    Warning { ratio: f64, message: String },
    NotApplicable,
}

/// `ε² / η` with `η = τ/M`.
pub fn eta_ratio(epsilon: f64, tau: f64, batch_size: usize) -> f64 {
    if epsilon == 0.0 {
        return 0.0;
    }
    epsilon * epsilon / (tau / batch_size as f64)
}

/// Flags runs where the learning-rate-to-batch ratio is small relative to
/// `ε²`, the regime in which the BFF bias bound on the parameter law degrades.
pub fn eta_diagnostic(config: &TrainConfig, env: &EnvSpec) -> EtaDiagnostic {
    match env {
        EnvSpec::Continuous(c) => classify_eta(eta_ratio(c.epsilon, config.tau, config.batch_size)),
        EnvSpec::Discrete(_) => EtaDiagnostic::NotApplicable,
    }
}

pub fn classify_eta(ratio: f64) -> EtaDiagnostic {
    if ratio > 1.0 {
        EtaDiagnostic::Warning {
            ratio,
            message: format!(
                "eps^2/eta = {ratio:.3}: eta = tau/M is small relative to eps^2, so the BFF \
                 parameter distribution may drift from the unbiased one by O(eps^2/eta); \
                 eta cannot be too small (informational)"
            ),
        }
    } else {
        EtaDiagnostic::Ok { ratio }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::approximator::TabularValues;
    use crate::env::{ContinuousEnvSpec, DiscreteEnvSpec};
    use crate::residual::estimate_gradient;

    fn ring_setup(length: usize) -> (EnvSpec, Trajectory, ReferenceSolution) {
        let env = EnvSpec::Discrete(DiscreteEnvSpec::default());
        let t = simulate(&env, env.default_s0(), length, 77).unwrap();
        let reference = build_reference(&env, &ReferenceSettings::default()).unwrap();
        (env, t, reference)
    }

    fn dummy_traj(len: usize) -> Trajectory {
        Trajectory {
            states: (0..=len).map(|i| State::discrete(i % 4, 4)).collect(),
            seed: 0,
            env_kind: crate::env::EnvKind::Discrete,
        }
    }

    #[test]
    fn batch_counting() {
        let t = dummy_traj(10);
        let b = make_batches(&t, 4, true, 1).unwrap();
        assert_eq!(b.len(), 2);
        assert!(b.iter().all(|x| x.len() == 4));
        let mut all: Vec<usize> = b.concat();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 8);
        assert!(all.iter().all(|&m| m <= 8));
        assert_eq!(b, make_batches(&t, 4, true, 1).unwrap());
        assert_ne!(b, make_batches(&t, 4, true, 2).unwrap());
        assert_eq!(make_batches(&t, 5, false, 1).unwrap().len(), 2);
        assert!(matches!(
            make_batches(&t, 10, true, 1),
            Err(Error::TrajectoryTooShort { usable: 9, .. })
        ));
    }

    #[test]
    fn error_examples() {
        let reference = ReferenceSolution {
            kind: ReferenceKind::ExactTabular,
            grid: (0..3).map(|i| State::discrete(i, 3)).collect(),
            values: vec![0.0; 3],
        };
        let v = ValueApproximator::Tabular(TabularValues {
            values: vec![1.0, 0.0, 0.0],
        });
        assert_eq!(evaluate_error(&v, &reference).unwrap(), 1.0);
        let same = ReferenceSolution {
            values: vec![1.0, 0.0, 0.0],
            ..reference
        };
        assert_eq!(evaluate_error(&v, &same).unwrap(), 0.0);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (env, t, reference) = ring_setup(2000);
        let init = ValueApproximator::init(ApproxKind::Tabular, 32, 0);
        let mut cfg = TrainConfig::new(EstimatorKind::BffLoss, 0.0, 10, 2, 5);
        cfg.eval_every = 7;
        let out = train(&env, &t, init.clone(), None, &cfg, &reference).unwrap();
        assert_eq!(out.approx, init);
        assert!(out.trace.errors.iter().all(|&e| e == out.trace.errors[0]));
        assert_eq!(out.updates, 2 * (1999 / 10));
    }

    #[test]
    fn single_step_matches_residual_estimate() {
        let env = EnvSpec::Continuous(ContinuousEnvSpec::default());
        // two transitions: exactly one usable window, so one M = 1 update
        let t = simulate(&env, env.default_s0(), 2, 3).unwrap();
        let reference = ReferenceSolution {
            kind: ReferenceKind::TrainedOracle,
            grid: ReferenceSolution::continuous_grid(16),
            values: vec![0.0; 16],
        };
        let init = ValueApproximator::init(ApproxKind::Mlp, 0, 9);
        let w = TransitionWindow::from_trajectory(&env, &t, 0, true).unwrap();
        for kind in [EstimatorKind::SampleCloning, EstimatorKind::BffGradient, EstimatorKind::BffLoss] {
            let est = estimate_gradient(kind, &env, &init, &[w], None).unwrap();
            let mut expected = init.clone();
            for (p, g) in expected.params_mut().iter_mut().zip(&est.grad) {
                *p -= 0.1 * g;
            }
            let cfg = TrainConfig::new(kind, 0.1, 1, 1, 11);
            let out = train(&env, &t, init.clone(), None, &cfg, &reference).unwrap();
            assert_eq!(out.updates, 1);
            assert_eq!(out.approx, expected);
        }
    }

    #[test]
    fn oracle_is_refused_without_permission() {
        let (env, t, reference) = ring_setup(100);
        let init = ValueApproximator::init(ApproxKind::Tabular, 32, 0);
        let cfg = TrainConfig::new(EstimatorKind::Uncorrelated, 0.1, 1, 1, 0);
        assert!(matches!(
            train(&env, &t, init.clone(), None, &cfg, &reference),
            Err(Error::ModelAccessRequired(_))
        ));
        let cfg = TrainConfig::new(EstimatorKind::PrimalDual, 0.1, 1, 1, 0);
        assert!(train(&env, &t, init, None, &cfg, &reference).is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let (env, t, reference) = ring_setup(5000);
        let init = ValueApproximator::init(ApproxKind::Tabular, 32, 0);
        let mut cfg = TrainConfig::new(EstimatorKind::Uncorrelated, 0.1, 4, 2, 3);
        cfg.allow_oracle = true;
        let a = train(&env, &t, init.clone(), None, &cfg, &reference).unwrap();
        let b = train(&env, &t, init, None, &cfg, &reference).unwrap();
        assert_eq!(a.approx, b.approx);
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn divergence_is_reported_with_trace() {
        let (env, t, reference) = ring_setup(5000);
        let init = ValueApproximator::init(ApproxKind::Tabular, 32, 0);
        let mut cfg = TrainConfig::new(EstimatorKind::SampleCloning, 50.0, 1, 1, 3);
        cfg.eval_every = 10;
        match train(&env, &t, init, None, &cfg, &reference) {
            Err(Error::Diverged { trace, .. }) => assert!(trace.len() >= 2),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn tabular_primal_dual_converges_on_ring() {
        let (env, t, reference) = ring_setup(100_000);
        let init = ValueApproximator::init(ApproxKind::Tabular, 32, 0);
        let dual = ValueApproximator::init(ApproxKind::Tabular, 32, 0);
        let mut cfg = TrainConfig::new(EstimatorKind::PrimalDual, 0.1, 1, 5, 13);
        cfg.beta = 0.5;
        cfg.eval_every = 10_000;
        let out = train(&env, &t, init, Some(dual), &cfg, &reference).unwrap();
        let rel = out.trace.final_relative().unwrap();
        assert!(rel < 0.2, "relative error {rel}");
    }

    #[test]
    fn eta_examples() {
        let env = EnvSpec::Continuous(ContinuousEnvSpec::default());
        let cfg = TrainConfig::new(EstimatorKind::BffLoss, 0.1, 1000, 1, 0);
        match eta_diagnostic(&cfg, &env) {
            EtaDiagnostic::Warning { ratio, .. } => assert!((ratio - 100.0).abs() < 1e-9),
            other => panic!("{other:?}"),
        }
        let cfg = TrainConfig::new(EstimatorKind::BffLoss, 1.0, 10, 1, 0);
        match eta_diagnostic(&cfg, &env) {
            EtaDiagnostic::Ok { ratio } => assert!((ratio - 0.1).abs() < 1e-12),
            other => panic!("{other:?}"),
        }
        assert_eq!(eta_ratio(0.0, 0.1, 1000), 0.0);
        assert!(matches!(classify_eta(eta_ratio(0.0, 1e-9, 1)), EtaDiagnostic::Ok { .. }));
        let ring = EnvSpec::Discrete(DiscreteEnvSpec::default());
        assert_eq!(eta_diagnostic(&cfg, &ring), EtaDiagnostic::NotApplicable);
    }

    #[test]
    fn discrete_reference_is_exact_solution() {
        let (_, _, reference) = ring_setup(10);
        let d = DiscreteEnvSpec::default();
        assert_eq!(reference.values, exact_value(&d).unwrap());
        assert_eq!(reference.kind, ReferenceKind::ExactTabular);
    }

    #[test]
    fn trace_csv_and_lookup() {
        let mut tr = ErrorTrace::default();
        tr.push(0, 2.0);
        tr.push(100, 1.0);
        tr.push(200, 0.5);
        assert_eq!(tr.relative, vec![1.0, 0.5, 0.25]);
        assert_eq!(tr.relative_at(150), Some(0.5));
        assert_eq!(tr.best_relative_within(100), Some(0.5));
        let mut buf = Vec::new();
        tr.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "step,error,rel_error\n0,2,1\n100,1,0.5\n200,0.5,0.25\n"
        );
    }
}

//! Bellman residual and the minibatch gradient estimators built on it.
//!
//! With `f(s, s') = R(s) + γV(s') − V(s)`, `f₁ = f(s_m, s_(m+1))` and
//! `f₂ = f(s_m, s')`, the per-window terms are
//!
//! * uncorrelated: `f₁ ∇f₂` with `s'` freshly resampled from `s_m` (oracle),
//! * sample-cloning: `f₁ ∇f₁`,
//! * BFF-gradient: `f₁ ∇f₂` with `s' = s_m + (s_(m+2) − s_(m+1))`,
//! * BFF-loss: `½ ∇(f₁ f₂)` with the same `s'`.

use serde::{Deserialize, Serialize};

use crate::approximator::ValueApproximator;
use crate::compensated::{self, CompensatedVec};
use crate::env::{resample_next, EnvSpec, State, Trajectory};
use crate::error::{Error, Result};
use crate::rng::Stream;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransitionWindow {
    pub s_m: State,
    pub s_m1: State,
    pub s_m2: Option<State>,
    pub r_m: f64,
}

impl TransitionWindow {
    /// Window starting at index `m`. The reward is recomputed from the
    /// environment's deterministic `R(s_m)`.
    pub fn from_trajectory(env: &EnvSpec, traj: &Trajectory, m: usize, with_future: bool) -> Result<Self> {
        let needed = if with_future { m + 2 } else { m + 1 };
        if needed >= traj.states.len() {
            return Err(Error::InvalidArgument(format!(
                "window {m} exceeds trajectory of {} states",
                traj.states.len()
            )));
        }
        let s_m = traj.states[m];
        Ok(TransitionWindow {
            s_m,
            s_m1: traj.states[m + 1],
            s_m2: with_future.then(|| traj.states[m + 2]),
            r_m: env.reward(s_m),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    Uncorrelated,
    SampleCloning,
    BffLoss,
    BffGradient,
    PrimalDual,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 5] = [
        EstimatorKind::Uncorrelated,
        EstimatorKind::SampleCloning,
        EstimatorKind::BffLoss,
        EstimatorKind::BffGradient,
        EstimatorKind::PrimalDual,
    ];

    /// Requires model access to draw an independent next state.
    pub fn is_oracle(self) -> bool {
        self == EstimatorKind::Uncorrelated
    }

    pub fn needs_future(self) -> bool {
        matches!(self, EstimatorKind::BffLoss | EstimatorKind::BffGradient)
    }

    pub fn label(self) -> &'static str {
        match self {
            EstimatorKind::Uncorrelated => "uncorrelated",
            EstimatorKind::SampleCloning => "sample-cloning",
            EstimatorKind::BffLoss => "bff-loss",
            EstimatorKind::BffGradient => "bff-gradient",
            EstimatorKind::PrimalDual => "primal-dual",
        }
    }
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientEstimate {
    pub grad: Vec<f64>,
    pub batch_size: usize,
    /// Mean of `f₁` over the batch.
    pub mean_residual: f64,
}

/// `r_m + γV(s_(m+1)) − V(s_m)`.
pub fn bellman_residual(approx: &ValueApproximator, window: &TransitionWindow, gamma: f64) -> Result<f64> {
    Ok(window.r_m + gamma * approx.value(window.s_m1)? - approx.value(window.s_m)?)
}

/// BFF surrogate next state `s_m + (s_(m+2) − s_(m+1))` for `window`, which
/// sits at position `index` of its batch (for error reporting).
pub fn bff_next_state(env: &EnvSpec, window: &TransitionWindow, index: usize) -> Result<State> {
    let s_m2 = window.s_m2.ok_or(Error::TruncatedWindow { index })?;
    env.shifted_next(window.s_m, window.s_m1, s_m2)
}

/// Minibatch mean `(1/M) Σ g_m` of the chosen estimator. `resampler` is the
/// model-access stream and is required only by the uncorrelated oracle.
pub fn estimate_gradient(
    kind: EstimatorKind,
    env: &EnvSpec,
    approx: &ValueApproximator,
    batch: &[TransitionWindow],
    mut resampler: Option<&mut Stream>,
) -> Result<GradientEstimate> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if kind == EstimatorKind::PrimalDual {
        return Err(Error::PrimalDualNotGradient);
    }
    if kind.is_oracle() && resampler.is_none() {
        return Err(Error::ModelAccessRequired("uncorrelated sampling"));
    }
    let gamma = env.gamma();
    let d = approx.num_params();
    let mut acc = CompensatedVec::zeros(d);
    let mut g = vec![0.0; d];
    let mut residuals = Vec::with_capacity(batch.len());

    for (idx, w) in batch.iter().enumerate() {
        g.iter_mut().for_each(|x| *x = 0.0);
        let v_m = approx.value(w.s_m)?;
        let f1 = w.r_m + gamma * approx.value(w.s_m1)? - v_m;
        residuals.push(f1);
        match kind {
            EstimatorKind::SampleCloning => {
                approx.add_grad(w.s_m1, gamma * f1, &mut g)?;
                approx.add_grad(w.s_m, -f1, &mut g)?;
            }
            EstimatorKind::Uncorrelated | EstimatorKind::BffGradient => {
                let s_prime = match kind {
                    EstimatorKind::Uncorrelated => {
                        let rng = resampler.as_deref_mut().expect("checked above");
                        resample_next(env, w.s_m, rng)?
                    }
                    _ => bff_next_state(env, w, idx)?,
                };
                approx.add_grad(s_prime, gamma * f1, &mut g)?;
                approx.add_grad(w.s_m, -f1, &mut g)?;
            }
            EstimatorKind::BffLoss => {
                let s_prime = bff_next_state(env, w, idx)?;
                let f2 = w.r_m + gamma * approx.value(s_prime)? - v_m;
                approx.add_grad(w.s_m1, 0.5 * gamma * f2, &mut g)?;
                approx.add_grad(s_prime, 0.5 * gamma * f1, &mut g)?;
                approx.add_grad(w.s_m, -0.5 * (f1 + f2), &mut g)?;
            }
            EstimatorKind::PrimalDual => unreachable!(),
        }
        if let Some(bad) = g.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("gradient component {bad} of window {idx}"),
            });
        }
        acc.add(&g);
    }

    let m = batch.len() as f64;
    let mut grad = acc.into_vec();
    grad.iter_mut().for_each(|x| *x /= m);
    Ok(GradientEstimate {
        grad,
        batch_size: batch.len(),
        mean_residual: compensated::sum(residuals) / m,
    })
}

/// One primal-dual step on the minimax form of the residual objective.
/// The dual moves first, `ω ← ω + (β/M) Σ (f₁ − y(s_m)) ∇_ω y(s_m)`, and the
/// primal then uses the updated dual:
/// `θ ← θ − (τ/M) Σ y(s_m; ω_new) ∇_θ f₁`.
pub fn primal_dual_step(
    env: &EnvSpec,
    approx_v: &mut ValueApproximator,
    approx_y: &mut ValueApproximator,
    batch: &[TransitionWindow],
    tau: f64,
    beta: f64,
) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let gamma = env.gamma();
    let m = batch.len() as f64;

    let mut dual = CompensatedVec::zeros(approx_y.num_params());
    let mut g = vec![0.0; approx_y.num_params()];
    for w in batch {
        let f1 = bellman_residual(approx_v, w, gamma)?;
        let y = approx_y.value(w.s_m)?;
        g.iter_mut().for_each(|x| *x = 0.0);
        approx_y.add_grad(w.s_m, f1 - y, &mut g)?;
        dual.add(&g);
    }
    let dual = dual.into_vec();
    for (p, d) in approx_y.params_mut().iter_mut().zip(&dual) {
        *p += beta / m * d;
    }
    approx_y.check_finite()?;

    let mut primal = CompensatedVec::zeros(approx_v.num_params());
    let mut g = vec![0.0; approx_v.num_params()];
    for w in batch {
        let y = approx_y.value(w.s_m)?;
        g.iter_mut().for_each(|x| *x = 0.0);
        approx_v.add_grad(w.s_m1, gamma * y, &mut g)?;
        approx_v.add_grad(w.s_m, -y, &mut g)?;
        primal.add(&g);
    }
    let primal = primal.into_vec();
    for (p, d) in approx_v.params_mut().iter_mut().zip(&primal) {
        *p -= tau / m * d;
    }
    approx_v.check_finite()
}

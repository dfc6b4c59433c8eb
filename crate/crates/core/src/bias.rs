//! Monte-Carlo estimates of the residual objective `J`, the BFF surrogate
//! `Ĵ`, and their gap, plus the ε-sweep that measures how the gap scales
//! with the time step.
//!
//! Outer states are drawn uniformly from a long simulated trajectory (its
//! first tenth discarded as burn-in), standing in for the stationary law.

use std::io::Write;

use rand::Rng;
use serde::Serialize;

use crate::approximator::ValueApproximator;
use crate::env::{simulate, ContinuousEnvSpec, EnvSpec, State};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

/// Length of the trajectory outer states are drawn from.
pub const OUTER_POOL_LENGTH: usize = 100_000;

pub const DEFAULT_N_INNER: usize = 64;

pub const DEFAULT_EPS: [f64; 4] = [0.2, 0.1, 0.05, 0.025];

/// Sample mean with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_err: f64,
    pub n: usize,
}

impl Estimate {
    fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        let mean = crate::compensated::sum(xs.iter().copied()) / n as f64;
        let std_err = if n > 1 {
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Estimate { mean, std_err, n }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BiasEstimate {
    pub j_value: f64,
    pub jhat_value: f64,
    /// `jhat_value − j_value`.
    pub gap: f64,
    pub std_err: f64,
    pub n_outer: usize,
    pub n_inner: usize,
}

struct Residual<'a> {
    env: &'a EnvSpec,
    approx: &'a ValueApproximator,
    gamma: f64,
}

impl Residual<'_> {
    /// Returns `(R(s) − V(s))`, so that `f(s, s') = base + γV(s')`.
    fn base(&self, s: State) -> Result<f64> {
        Ok(self.env.reward(s) - self.approx.value(s)?)
    }

    fn f(&self, base: f64, next: State) -> Result<f64> {
        Ok(base + self.gamma * self.approx.value(next)?)
    }
}

/// `n` states drawn uniformly (with replacement) from the post-burn-in part
/// of a simulated trajectory.
pub fn outer_states(env: &EnvSpec, n: usize, seed: u64) -> Result<Vec<State>> {
    let traj = simulate(env, env.default_s0(), OUTER_POOL_LENGTH, seed)?;
    let pool = &traj.states[OUTER_POOL_LENGTH / 10..];
    let mut rng = rng::stream(seed, rng::streams::OUTER);
    Ok((0..n).map(|_| pool[rng.random_range(0..pool.len())]).collect())
}

/// `J = E[½ (E[f | s])²]`. The inner square uses the unbiased pair estimator
/// `((Σf)² − Σf²) / (n(n−1))` over `n_inner` independent transitions.
pub fn estimate_j(
    env: &EnvSpec,
    approx: &ValueApproximator,
    n_outer: usize,
    n_inner: usize,
    seed: u64,
) -> Result<Estimate> {
    if n_inner < 2 {
        return Err(Error::InvalidArgument(format!(
            "pair estimator needs n_inner >= 2, got {n_inner}"
        )));
    }
    if n_outer == 0 {
        return Err(Error::InvalidArgument("n_outer must be positive".into()));
    }
    let res = Residual {
        env,
        approx,
        gamma: env.gamma(),
    };
    let mut rng = rng::stream(seed, rng::streams::INNER);
    let mut per_state = Vec::with_capacity(n_outer);
    for s in outer_states(env, n_outer, seed)? {
        let base = res.base(s)?;
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..n_inner {
            let f = res.f(base, env.step(s, &mut rng)?)?;
            sum += f;
            sum_sq += f * f;
        }
        let k = n_inner as f64;
        per_state.push(0.5 * (sum * sum - sum_sq) / (k * (k - 1.0)));
    }
    Ok(Estimate::from_samples(&per_state))
}

/// `Ĵ = ½ E[f(s, s_(m+1)) f(s, s + Δs_(m+1))]`, simulating the two following
/// transitions from each outer state.
pub fn estimate_jhat(env: &EnvSpec, approx: &ValueApproximator, n_samples: usize, seed: u64) -> Result<Estimate> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be positive".into()));
    }
    let res = Residual {
        env,
        approx,
        gamma: env.gamma(),
    };
    let mut rng = rng::stream(seed, rng::streams::INNER);
    let mut xs = Vec::with_capacity(n_samples);
    for s in outer_states(env, n_samples, seed)? {
        let base = res.base(s)?;
        let s1 = env.step(s, &mut rng)?;
        let s2 = env.step(s1, &mut rng)?;
        let shifted = env.shifted_next(s, s1, s2)?;
        xs.push(0.5 * res.f(base, s1)? * res.f(base, shifted)?);
    }
    Ok(Estimate::from_samples(&xs))
}

/// Jointly estimates `J`, `Ĵ` and the gap with common random numbers.
///
/// Each inner sample draws two noises. The first drives `s → s₁`; the second
/// drives both the future step `s₁ → s₂` (giving the BFF state
/// `s + (s₂ − s₁)`) and an independent fresh step `s → s'`. Then
/// `½ f(s,s₁) f(s,s')` is unbiased for the `J` integrand and
/// `½ f(s,s₁) f(s, s+(s₂−s₁))` for the `Ĵ` integrand, and their difference
/// has variance of the size of the gap itself.
pub fn estimate_gap(
    env: &EnvSpec,
    approx: &ValueApproximator,
    n_outer: usize,
    n_inner: usize,
    seed: u64,
) -> Result<BiasEstimate> {
    if n_outer < 2 || n_inner == 0 {
        return Err(Error::InvalidArgument(format!(
            "need n_outer >= 2 and n_inner >= 1, got {n_outer}, {n_inner}"
        )));
    }
    let res = Residual {
        env,
        approx,
        gamma: env.gamma(),
    };
    let mut rng = rng::stream(seed, rng::streams::INNER);
    let mut js = Vec::with_capacity(n_outer);
    let mut jhats = Vec::with_capacity(n_outer);
    let mut gaps = Vec::with_capacity(n_outer);
    for s in outer_states(env, n_outer, seed)? {
        let base = res.base(s)?;
        let (mut j, mut jhat, mut gap) = (0.0, 0.0, 0.0);
        for _ in 0..n_inner {
            let (a, b) = coupled_sample(&res, &mut rng, s, base)?;
            j += a;
            jhat += b;
            gap += b - a;
        }
        let k = n_inner as f64;
        js.push(j / k);
        jhats.push(jhat / k);
        gaps.push(gap / k);
    }
    let j = Estimate::from_samples(&js);
    let jhat = Estimate::from_samples(&jhats);
    let gap = Estimate::from_samples(&gaps);
    Ok(BiasEstimate {
        j_value: j.mean,
        jhat_value: jhat.mean,
        gap: jhat.mean - j.mean,
        std_err: gap.std_err,
        n_outer,
        n_inner,
    })
}

/// Returns the `(J, Ĵ)` integrands for one coupled inner sample.
fn coupled_sample(res: &Residual<'_>, rng: &mut Stream, s: State, base: f64) -> Result<(f64, f64)> {
    let env = res.env;
    let first = env.draw_noise(rng);
    let second = env.draw_noise(rng);
    let s1 = env.step_with(s, first)?;
    let s2 = env.step_with(s1, second)?;
    let fresh = env.step_with(s, second)?;
    let shifted = env.shifted_next(s, s1, s2)?;
    let f1 = res.f(base, s1)?;
    Ok((0.5 * f1 * res.f(base, fresh)?, 0.5 * f1 * res.f(base, shifted)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SweepPoint {
    pub eps: f64,
    pub gap: f64,
    pub std_err: f64,
    pub abs_gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
    pub slope: f64,
    pub intercept: f64,
}

impl SweepResult {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "eps,gap,std_err,abs_gap")?;
        for p in &self.points {
            writeln!(w, "{},{},{},{}", p.eps, p.gap, p.std_err, p.abs_gap)?;
        }
        Ok(())
    }
}

/// Least-squares fit of `log|gap| = slope · log ε + intercept`.
pub fn fit_power_law(points: &[(f64, f64)]) -> Result<(f64, f64)> {
    let distinct = {
        let mut e: Vec<f64> = points.iter().map(|p| p.0).collect();
        e.sort_by(f64::total_cmp);
        e.dedup();
        e.len()
    };
    if distinct < 2 || points.iter().any(|&(e, g)| !(e > 0.0 && g > 0.0)) {
        return Err(Error::InvalidArgument(
            "power-law fit needs positive values at two or more distinct eps".into(),
        ));
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

/// Measures `|Ĵ − J|` at each ε (same θ, same seed) and fits its log-log
/// slope. Fails when the largest standard error is not below a third of the
/// smallest `|gap|`.
pub fn epsilon_sweep(
    base: &ContinuousEnvSpec,
    approx: &ValueApproximator,
    eps_list: &[f64],
    n_outer: usize,
    n_inner: usize,
    seed: u64,
) -> Result<SweepResult> {
    let mut distinct = eps_list.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 3 || distinct.iter().any(|&e| !(e > 0.0)) {
        return Err(Error::InvalidArgument(
            "eps_list needs at least three distinct positive values".into(),
        ));
    }
    let mut points = Vec::with_capacity(eps_list.len());
    for &eps in eps_list {
        let env = EnvSpec::Continuous(base.with_epsilon(eps));
        let est = estimate_gap(&env, approx, n_outer, n_inner, seed)?;
        points.push(SweepPoint {
            eps,
            gap: est.gap,
            std_err: est.std_err,
            abs_gap: est.gap.abs(),
        });
    }
    let smallest = points
        .iter()
        .min_by(|a, b| a.abs_gap.total_cmp(&b.abs_gap))
        .expect("at least three points");
    let max_err = points.iter().map(|p| p.std_err).fold(0.0, f64::max);
    if 3.0 * max_err >= smallest.abs_gap {
        return Err(Error::InsufficientSamples {
            eps: smallest.eps,
            gap: smallest.abs_gap,
            std_err: max_err,
        });
    }
    let pairs: Vec<(f64, f64)> = points.iter().map(|p| (p.eps, p.abs_gap)).collect();
    let (slope, intercept) = fit_power_law(&pairs)?;
    Ok(SweepResult {
        points,
        slope,
        intercept,
    })
}

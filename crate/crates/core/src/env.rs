//! Environments: the periodic SDE-driven chain on (0, 2π] and the discrete
//! ring chain, plus the model-access oracles (transition matrix, stationary
//! distribution, independent resampling) used by reference code paths.

use std::f64::consts::PI;
use std::fmt;
use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

pub const TWO_PI: f64 = 2.0 * PI;

/// Maps any real onto the half-open period (0, 2π]. In-range values are
/// returned unchanged.
pub fn wrap_angle(s: f64) -> f64 {
    if s > 0.0 && s <= TWO_PI {
        return s;
    }
    let r = s.rem_euclid(TWO_PI);
    if r == 0.0 {
        TWO_PI
    } else {
        r
    }
}

/// Minimal signed circular difference `a - b`, in (-π, π].
pub fn circular_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(TWO_PI);
    if d > PI {
        d - TWO_PI
    } else {
        d
    }
}

/// A point of either state space. Discrete states carry the ring size so a
/// state alone determines its angle `2πi/n`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum State {
    Continuous(f64),
    Discrete { index: u32, n: u32 },
}

impl State {
    pub fn discrete(index: usize, n: usize) -> Self {
        State::Discrete {
            index: index as u32,
            n: n as u32,
        }
    }

    /// Input fed to periodic approximators: `s` itself, or `2πi/n`.
    pub fn angle(&self) -> f64 {
        match *self {
            State::Continuous(s) => s,
            State::Discrete { index, n } => TWO_PI * index as f64 / n as f64,
        }
    }

    pub fn index(&self) -> Option<usize> {
        match *self {
            State::Continuous(_) => None,
            State::Discrete { index, .. } => Some(index as usize),
        }
    }
}

impl fmt::Display for State {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            State::Continuous(s) => write!(f, "{s}"),
            State::Discrete { index, .. } => write!(f, "{index}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvKind {
    Continuous,
    Discrete,
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EnvKind::Continuous => f.write_str("continuous"),
            EnvKind::Discrete => f.write_str("discrete"),
        }
    }
}

/// Drift α(s).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Drift {
    /// 2 sin(s) cos(s)
    SinCos,
    Zero,
    Constant(f64),
}

impl Drift {
    pub fn eval(&self, s: f64) -> f64 {
        match *self {
            Drift::SinCos => 2.0 * s.sin() * s.cos(),
            Drift::Zero => 0.0,
            Drift::Constant(c) => c,
        }
    }
}

/// Diffusion σ(s).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Diffusion {
    /// 1 + cos²(s)
    OnePlusCosSquared,
    Zero,
    Constant(f64),
}

impl Diffusion {
    pub fn eval(&self, s: f64) -> f64 {
        match *self {
            Diffusion::OnePlusCosSquared => {
                let c = s.cos();
                1.0 + c * c
            }
            Diffusion::Zero => 0.0,
            Diffusion::Constant(c) => c,
        }
    }
}

/// Reward R(s) on the continuous domain.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StateReward {
    /// cos(2s) + 1
    CosTwoSPlusOne,
    Constant(f64),
}

impl StateReward {
    pub fn eval(&self, s: f64) -> f64 {
        match *self {
            StateReward::CosTwoSPlusOne => (2.0 * s).cos() + 1.0,
            StateReward::Constant(c) => c,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinuousEnvSpec {
    pub drift: Drift,
    pub diffusion: Diffusion,
    pub reward: StateReward,
    pub epsilon: f64,
    pub gamma: f64,
}

impl Default for ContinuousEnvSpec {
    fn default() -> Self {
        ContinuousEnvSpec {
            drift: Drift::SinCos,
            diffusion: Diffusion::OnePlusCosSquared,
            reward: StateReward::CosTwoSPlusOne,
            epsilon: 0.1,
            gamma: 0.9,
        }
    }
}

impl ContinuousEnvSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::MalformedSpec(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::MalformedSpec(format!(
                "gamma must lie in (0, 1), got {}",
                self.gamma
            )));
        }
        for c in [self.drift_const(), self.diffusion_const(), self.reward_const()]
            .into_iter()
            .flatten()
        {
            if !c.is_finite() {
                return Err(Error::MalformedSpec(format!("non-finite coefficient {c}")));
            }
        }
        Ok(())
    }

    fn drift_const(&self) -> Option<f64> {
        match self.drift {
            Drift::Constant(c) => Some(c),
            _ => None,
        }
    }

    fn diffusion_const(&self) -> Option<f64> {
        match self.diffusion {
            Diffusion::Constant(c) => Some(c),
            _ => None,
        }
    }

    fn reward_const(&self) -> Option<f64> {
        match self.reward {
            StateReward::Constant(c) => Some(c),
            _ => None,
        }
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Self {
        ContinuousEnvSpec {
            epsilon,
            ..self.clone()
        }
    }

    /// The raw (unwrapped) Euler-Maruyama increment for a standard normal `z`.
    pub fn increment(&self, s: f64, z: f64) -> f64 {
        self.drift.eval(s) * self.epsilon + self.diffusion.eval(s) * self.epsilon.sqrt() * z
    }

    /// One transition driven by the standard normal variate `z`.
    pub fn step_with(&self, s: f64, z: f64) -> Result<f64> {
        let raw = s + self.increment(s, z);
        if !raw.is_finite() {
            return Err(Error::MalformedSpec(format!(
                "non-finite transition from s={s} (z={z})"
            )));
        }
        Ok(wrap_angle(raw))
    }
}

/// Finite chain with a dense row-stochastic transition matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteEnvSpec {
    n: usize,
    transition: Vec<f64>,
    reward: Vec<f64>,
    gamma: f64,
}

impl DiscreteEnvSpec {
    /// `transition` is row-major `n × n`. Rows must sum to 1 within 1e-12.
    /// `gamma` may be 0 (myopic) but must stay below 1.
    pub fn new(n: usize, transition: Vec<f64>, reward: Vec<f64>, gamma: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::MalformedSpec("state count must be positive".into()));
        }
        if transition.len() != n * n || reward.len() != n {
            return Err(Error::MalformedSpec(format!(
                "expected {n}x{n} transition and {n} rewards, got {} and {}",
                transition.len(),
                reward.len()
            )));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::MalformedSpec(format!(
                "gamma must lie in [0, 1), got {gamma}"
            )));
        }
        for i in 0..n {
            let row = &transition[i * n..(i + 1) * n];
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::MalformedSpec(format!("row {i} has entries outside [0, 1]")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() >= 1e-12 {
                return Err(Error::MalformedSpec(format!("row {i} sums to {sum}")));
            }
        }
        if reward.iter().any(|r| !r.is_finite()) {
            return Err(Error::MalformedSpec("non-finite reward".into()));
        }
        Ok(DiscreteEnvSpec {
            n,
            transition,
            reward,
            gamma,
        })
    }

    /// Nearest-neighbour ring: `P[i][i+1] = 1/2 - a sin(2πi/n)`,
    /// `P[i][i-1] = 1/2 + a sin(2πi/n)` with indices mod n.
    pub fn ring_transition(n: usize, amplitude: f64) -> Vec<f64> {
        let mut p = vec![0.0; n * n];
        for i in 0..n {
            let s = amplitude * (TWO_PI * i as f64 / n as f64).sin();
            let up = (i + 1) % n;
            let down = (i + n - 1) % n;
            p[i * n + up] += 0.5 - s;
            p[i * n + down] += 0.5 + s;
        }
        p
    }

    /// `r_i = 1 + cos(2πi/n)`.
    pub fn ring_reward(n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| 1.0 + (TWO_PI * i as f64 / n as f64).cos())
            .collect()
    }

    pub fn ring(n: usize, gamma: f64) -> Result<Self> {
        Self::new(n, Self::ring_transition(n, 0.2), Self::ring_reward(n), gamma)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn reward(&self) -> &[f64] {
        &self.reward
    }

    pub fn transition(&self) -> &[f64] {
        &self.transition
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.transition[i * self.n..(i + 1) * self.n]
    }

    pub fn prob(&self, i: usize, j: usize) -> f64 {
        self.transition[i * self.n + j]
    }

    /// Inverse-CDF draw from row `i` using one uniform `u ∈ [0, 1)`.
    pub fn step_with(&self, i: usize, u: f64) -> usize {
        let row = self.row(i);
        let mut acc = 0.0;
        let mut last = i;
        for (j, &p) in row.iter().enumerate() {
            if p > 0.0 {
                acc += p;
                last = j;
                if u < acc {
                    return j;
                }
            }
        }
        // u landed in the rounding slack above the final partial sum
        last
    }
}

impl Default for DiscreteEnvSpec {
    fn default() -> Self {
        Self::ring(32, 0.9).expect("default ring is valid")
    }
}

/// Either environment. Cloned freely; immutable after construction.
#[derive(Clone, Debug, PartialEq)]
pub enum EnvSpec {
    Continuous(ContinuousEnvSpec),
    Discrete(DiscreteEnvSpec),
}

/// The exogenous randomness of one transition. Sharing a `Noise` between two
/// transitions couples them (common random numbers).
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Noise {
    Gaussian(f64),
    Uniform(f64),
}

impl EnvSpec {
    pub fn kind(&self) -> EnvKind {
        match self {
            EnvSpec::Continuous(_) => EnvKind::Continuous,
            EnvSpec::Discrete(_) => EnvKind::Discrete,
        }
    }

    pub fn gamma(&self) -> f64 {
        match self {
            EnvSpec::Continuous(c) => c.gamma,
            EnvSpec::Discrete(d) => d.gamma,
        }
    }

    pub fn default_s0(&self) -> State {
        match self {
            EnvSpec::Continuous(_) => State::Continuous(1.0),
            EnvSpec::Discrete(d) => State::discrete(0, d.n),
        }
    }

    pub fn check_state(&self, s: State) -> Result<()> {
        let ok = match (self, s) {
            (EnvSpec::Continuous(_), State::Continuous(x)) => x > 0.0 && x <= TWO_PI,
            (EnvSpec::Discrete(d), State::Discrete { index, n }) => {
                n as usize == d.n && (index as usize) < d.n
            }
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidState {
                state: format!("{s:?}"),
            })
        }
    }

    /// Deterministic reward R(s).
    pub fn reward(&self, s: State) -> f64 {
        match (self, s) {
            (EnvSpec::Continuous(c), State::Continuous(x)) => c.reward.eval(x),
            (EnvSpec::Discrete(d), State::Discrete { index, .. }) => d.reward[index as usize],
            _ => f64::NAN,
        }
    }

    pub fn draw_noise(&self, rng: &mut Stream) -> Noise {
        match self {
            EnvSpec::Continuous(_) => Noise::Gaussian(rng.sample(StandardNormal)),
            EnvSpec::Discrete(_) => Noise::Uniform(rng.random::<f64>()),
        }
    }

    pub fn step_with(&self, s: State, noise: Noise) -> Result<State> {
        match (self, s, noise) {
            (EnvSpec::Continuous(c), State::Continuous(x), Noise::Gaussian(z)) => {
                c.step_with(x, z).map(State::Continuous)
            }
            (EnvSpec::Discrete(d), State::Discrete { index, .. }, Noise::Uniform(u)) => {
                Ok(State::discrete(d.step_with(index as usize, u), d.n))
            }
            _ => Err(Error::InvalidState {
                state: format!("{s:?} with {noise:?}"),
            }),
        }
    }

    pub fn step(&self, s: State, rng: &mut Stream) -> Result<State> {
        let noise = self.draw_noise(rng);
        self.step_with(s, noise)
    }

    /// BFF surrogate for an independent copy of `s_(m+1)`:
    /// `s_m + (s_(m+2) - s_(m+1))`, with circular differencing and wrapping
    /// on the continuous domain and modular arithmetic on the ring.
    pub fn shifted_next(&self, s_m: State, s_m1: State, s_m2: State) -> Result<State> {
        match (self, s_m, s_m1, s_m2) {
            (
                EnvSpec::Continuous(_),
                State::Continuous(a),
                State::Continuous(b),
                State::Continuous(c),
            ) => Ok(State::Continuous(wrap_angle(a + circular_diff(c, b)))),
            (
                EnvSpec::Discrete(d),
                State::Discrete { index: i, .. },
                State::Discrete { index: j, .. },
                State::Discrete { index: k, .. },
            ) => {
                let n = d.n;
                let jp = (i as usize + k as usize + n - j as usize) % n;
                Ok(State::discrete(jp, n))
            }
            _ => Err(Error::InvalidState {
                state: format!("{s_m:?}, {s_m1:?}, {s_m2:?}"),
            }),
        }
    }
}

pub fn step_continuous(spec: &ContinuousEnvSpec, s: f64, rng: &mut Stream) -> Result<f64> {
    let z: f64 = rng.sample(StandardNormal);
    spec.step_with(s, z)
}

pub fn step_discrete(spec: &DiscreteEnvSpec, i: usize, rng: &mut Stream) -> Result<usize> {
    if i >= spec.n {
        return Err(Error::InvalidState {
            state: format!("index {i} of {}", spec.n),
        });
    }
    Ok(spec.step_with(i, rng.random::<f64>()))
}

/// Independent second draw of the next state from `s`. Model access only.
pub fn resample_next(env: &EnvSpec, s: State, rng: &mut Stream) -> Result<State> {
    env.step(s, rng)
}

/// Ordered state sequence `s_0..s_T`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub states: Vec<State>,
    pub seed: u64,
    pub env_kind: EnvKind,
}

impl Trajectory {
    /// Number of transitions `T` (one less than the number of states).
    pub fn len(&self) -> usize {
        self.states.len().saturating_sub(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let n = match self.states.first() {
            Some(State::Discrete { n, .. }) => format!(" n={n}"),
            _ => String::new(),
        };
        writeln!(
            w,
            "# env_kind={}{} seed={} length={}",
            self.env_kind,
            n,
            self.seed,
            self.len()
        )?;
        writeln!(w, "state")?;
        for s in &self.states {
            writeln!(w, "{s}")?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty trajectory file".into()))??;
        let header = header
            .strip_prefix('#')
            .ok_or_else(|| Error::Format("missing '#' header".into()))?;
        let (mut kind, mut n, mut seed, mut length) = (None, None, None, None);
        for field in header.split_whitespace() {
            let (k, v) = field
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad header field {field:?}")))?;
            let bad = |_| Error::Format(format!("bad header value {field:?}"));
            match k {
                "env_kind" => {
                    kind = Some(match v {
                        "continuous" => EnvKind::Continuous,
                        "discrete" => EnvKind::Discrete,
                        _ => return Err(Error::Format(format!("unknown env_kind {v:?}"))),
                    })
                }
                "n" => n = Some(v.parse::<u32>().map_err(bad)?),
                "seed" => seed = Some(v.parse::<u64>().map_err(bad)?),
                "length" => length = Some(v.parse::<usize>().map_err(bad)?),
                _ => return Err(Error::Format(format!("unknown header field {k:?}"))),
            }
        }
        let kind = kind.ok_or_else(|| Error::Format("missing env_kind".into()))?;
        let seed = seed.ok_or_else(|| Error::Format("missing seed".into()))?;
        let length = length.ok_or_else(|| Error::Format("missing length".into()))?;
        match lines.next() {
            Some(Ok(h)) if h.trim() == "state" => {}
            _ => return Err(Error::Format("missing 'state' column header".into())),
        }
        let mut states = Vec::with_capacity(length + 1);
        for line in lines {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let bad = || Error::Format(format!("bad state record {line:?}"));
            let s = match kind {
                EnvKind::Continuous => State::Continuous(line.parse::<f64>().map_err(|_| bad())?),
                EnvKind::Discrete => {
                    let n = n.ok_or_else(|| Error::Format("discrete header lacks n".into()))?;
                    let index = line.parse::<u32>().map_err(|_| bad())?;
                    if index >= n {
                        return Err(Error::Format(format!("state {index} out of range")));
                    }
                    State::Discrete { index, n }
                }
            };
            states.push(s);
        }
        if states.len() != length + 1 {
            return Err(Error::Format(format!(
                "header declares length {length} but file holds {} states",
                states.len()
            )));
        }
        Ok(Trajectory {
            states,
            seed,
            env_kind: kind,
        })
    }
}

/// Simulates `length` transitions from `s0`. A pure function of its
/// arguments.
pub fn simulate(env: &EnvSpec, s0: State, length: usize, seed: u64) -> Result<Trajectory> {
    if length < 2 {
        return Err(Error::InvalidArgument(format!(
            "trajectory length must be at least 2, got {length}"
        )));
    }
    env.check_state(s0)?;
    let mut rng = rng::stream(seed, rng::streams::TRAJECTORY);
    let mut states = Vec::with_capacity(length + 1);
    let mut s = s0;
    states.push(s);
    for _ in 0..length {
        s = env.step(s, &mut rng)?;
        states.push(s);
    }
    Ok(Trajectory {
        states,
        seed,
        env_kind: env.kind(),
    })
}

/// Invariant distribution `μP = μ` by lazy power iteration
/// `μ ← (μ + μP)/2`, which averages successive iterates and so also
/// converges on periodic chains.
pub fn stationary_distribution(spec: &DiscreteEnvSpec) -> Result<Vec<f64>> {
    const MAX_ITER: usize = 1_000_000;
    let n = spec.n;
    let mut mu = vec![1.0 / n as f64; n];
    let mut next = vec![0.0; n];
    for _ in 0..MAX_ITER {
        next.iter_mut().for_each(|x| *x = 0.0);
        for (i, &m) in mu.iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            for (j, &p) in spec.row(i).iter().enumerate() {
                next[j] += m * p;
            }
        }
        let mut diff: f64 = 0.0;
        for (x, m) in next.iter_mut().zip(&mu) {
            *x = 0.5 * (*x + m);
            diff = diff.max((*x - m).abs());
        }
        std::mem::swap(&mut mu, &mut next);
        if diff < 1e-12 {
            let total: f64 = mu.iter().sum();
            mu.iter_mut().for_each(|x| *x /= total);
            return Ok(mu);
        }
    }
    Err(Error::NoConvergence {
        iterations: MAX_ITER,
    })
}

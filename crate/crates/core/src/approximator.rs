//! Value-function representations `V(s; θ)` with exact parameter gradients.
//!
//! The network is `V(s) = w3·cos(W2·cos(W1·(cos s, sin s) + b1) + b2) + b3`
//! with two hidden layers of 50 units. Its flat parameter layout is fixed:
//!
//! | block | shape            | offset |
//! |-------|------------------|--------|
//! | `W1`  | 50 × 2 row-major | 0      |
//! | `b1`  | 50               | 100    |
//! | `W2`  | 50 × 50 row-major| 150    |
//! | `b2`  | 50               | 2650   |
//! | `w3`  | 50               | 2700   |
//! | `b3`  | 1                | 2750   |
//!
//! Rows index the output unit, columns the input unit.

use std::io::{Read, Write};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::env::State;
use crate::error::{Error, Result};
use crate::rng;

pub const INPUT: usize = 2;
pub const HIDDEN: usize = 50;
pub const MLP_PARAMS: usize = INPUT * HIDDEN + HIDDEN + HIDDEN * HIDDEN + HIDDEN + HIDDEN + 1;

const W1: usize = 0;
const B1: usize = W1 + INPUT * HIDDEN;
const W2: usize = B1 + HIDDEN;
const B2: usize = W2 + HIDDEN * HIDDEN;
const W3: usize = B2 + HIDDEN;
const B3: usize = W3 + HIDDEN;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ApproxKind {
    Tabular,
    Mlp,
}

/// One value per discrete state; `V(i) = v_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularValues {
    pub values: Vec<f64>,
}

impl TabularValues {
    pub fn zeros(n: usize) -> Self {
        TabularValues {
            values: vec![0.0; n],
        }
    }

    fn index_of(&self, s: State) -> Result<usize> {
        match s {
            State::Discrete { index, n } if n as usize == self.values.len() => Ok(index as usize),
            _ => Err(Error::InvalidState {
                state: format!("{s:?} for a {}-entry table", self.values.len()),
            }),
        }
    }
}

/// Cosine-activation network with layer sizes 2 → 50 → 50 → 1.
#[derive(Clone, Debug, PartialEq)]
pub struct CosineMlp {
    params: Vec<f64>,
}

struct Activations {
    x: [f64; INPUT],
    z1: [f64; HIDDEN],
    h1: [f64; HIDDEN],
    z2: [f64; HIDDEN],
    h2: [f64; HIDDEN],
    out: f64,
}

impl CosineMlp {
    pub fn zeros() -> Self {
        CosineMlp {
            params: vec![0.0; MLP_PARAMS],
        }
    }

    pub fn from_params(params: Vec<f64>) -> Result<Self> {
        if params.len() != MLP_PARAMS {
            return Err(Error::InvalidArgument(format!(
                "network expects {MLP_PARAMS} parameters, got {}",
                params.len()
            )));
        }
        Ok(CosineMlp { params })
    }

    /// Weights ~ Normal(0, 1/fan_in), biases zero.
    pub fn init(seed: u64) -> Self {
        let mut rng = rng::stream(seed, rng::streams::INIT);
        let mut p = vec![0.0; MLP_PARAMS];
        for (range, fan_in) in [(W1..B1, INPUT), (W2..B2, HIDDEN), (W3..B3, HIDDEN)] {
            let normal = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).expect("positive std");
            for w in &mut p[range] {
                *w = normal.sample(&mut rng);
            }
        }
        CosineMlp { params: p }
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn w3(&self) -> &[f64] {
        &self.params[W3..B3]
    }

    pub fn b3(&self) -> f64 {
        self.params[B3]
    }

    pub fn w2(&self) -> &[f64] {
        &self.params[W2..B2]
    }

    fn forward(&self, s: f64) -> Activations {
        let p = &self.params;
        let x = [s.cos(), s.sin()];
        let mut z1 = [0.0; HIDDEN];
        let mut h1 = [0.0; HIDDEN];
        for u in 0..HIDDEN {
            let row = &p[W1 + u * INPUT..W1 + (u + 1) * INPUT];
            z1[u] = row[0] * x[0] + row[1] * x[1] + p[B1 + u];
            h1[u] = z1[u].cos();
        }
        let mut z2 = [0.0; HIDDEN];
        let mut h2 = [0.0; HIDDEN];
        for u in 0..HIDDEN {
            let row = &p[W2 + u * HIDDEN..W2 + (u + 1) * HIDDEN];
            z2[u] = row.iter().zip(&h1).map(|(w, h)| w * h).sum::<f64>() + p[B2 + u];
            h2[u] = z2[u].cos();
        }
        let out = p[W3..B3].iter().zip(&h2).map(|(w, h)| w * h).sum::<f64>() + p[B3];
        Activations {
            x,
            z1,
            h1,
            z2,
            h2,
            out,
        }
    }

    pub fn value_at(&self, s: f64) -> f64 {
        self.forward(s).out
    }

    /// Adds `scale · ∂V(s)/∂θ` into `out` by reverse-mode differentiation.
    pub fn add_grad_at(&self, s: f64, scale: f64, out: &mut [f64]) {
        let a = self.forward(s);
        let p = &self.params;

        out[B3] += scale;
        let mut dz2 = [0.0; HIDDEN];
        for u in 0..HIDDEN {
            out[W3 + u] += scale * a.h2[u];
            dz2[u] = scale * p[W3 + u] * -a.z2[u].sin();
        }

        let mut dh1 = [0.0; HIDDEN];
        for u in 0..HIDDEN {
            let g = dz2[u];
            out[B2 + u] += g;
            let base = W2 + u * HIDDEN;
            let row = &p[base..base + HIDDEN];
            let grow = &mut out[base..base + HIDDEN];
            for v in 0..HIDDEN {
                grow[v] += g * a.h1[v];
                dh1[v] += g * row[v];
            }
        }

        for u in 0..HIDDEN {
            let g = dh1[u] * -a.z1[u].sin();
            out[B1 + u] += g;
            out[W1 + u * INPUT] += g * a.x[0];
            out[W1 + u * INPUT + 1] += g * a.x[1];
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ValueApproximator {
    Tabular(TabularValues),
    Mlp(CosineMlp),
}

impl ValueApproximator {
    /// Tabular approximators start at zero; networks use the seeded
    /// Normal(0, 1/fan_in) weight draw. `n` is the table size and is ignored
    /// for networks.
    pub fn init(kind: ApproxKind, n: usize, seed: u64) -> Self {
        match kind {
            ApproxKind::Tabular => ValueApproximator::Tabular(TabularValues::zeros(n)),
            ApproxKind::Mlp => ValueApproximator::Mlp(CosineMlp::init(seed)),
        }
    }

    pub fn kind(&self) -> ApproxKind {
        match self {
            ValueApproximator::Tabular(_) => ApproxKind::Tabular,
            ValueApproximator::Mlp(_) => ApproxKind::Mlp,
        }
    }

    pub fn params(&self) -> &[f64] {
        match self {
            ValueApproximator::Tabular(t) => &t.values,
            ValueApproximator::Mlp(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        match self {
            ValueApproximator::Tabular(t) => &mut t.values,
            ValueApproximator::Mlp(m) => &mut m.params,
        }
    }

    pub fn num_params(&self) -> usize {
        self.params().len()
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.params().iter().position(|p| !p.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::NonFinite {
                context: format!("parameter {i}"),
            }),
        }
    }

    pub fn value(&self, s: State) -> Result<f64> {
        let v = match self {
            ValueApproximator::Tabular(t) => t.values[t.index_of(s)?],
            ValueApproximator::Mlp(m) => m.value_at(s.angle()),
        };
        crate::error::ensure_finite(v, || format!("V({s}); parameters are not finite"))
    }

    /// Adds `scale · ∇_θ V(s; θ)` into `out` (length `num_params`).
    pub fn add_grad(&self, s: State, scale: f64, out: &mut [f64]) -> Result<()> {
        debug_assert_eq!(out.len(), self.num_params());
        match self {
            ValueApproximator::Tabular(t) => out[t.index_of(s)?] += scale,
            ValueApproximator::Mlp(m) => m.add_grad_at(s.angle(), scale, out),
        }
        Ok(())
    }

    pub fn grad_theta(&self, s: State) -> Result<Vec<f64>> {
        let mut g = vec![0.0; self.num_params()];
        self.add_grad(s, 1.0, &mut g)?;
        Ok(g)
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W, seed: u64) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        let (kind, dims): (u8, Vec<u32>) = match self {
            ValueApproximator::Tabular(t) => (0, vec![t.values.len() as u32]),
            ValueApproximator::Mlp(_) => (1, vec![INPUT as u32, HIDDEN as u32, HIDDEN as u32, 1]),
        };
        w.write_all(&[kind])?;
        w.write_all(&(dims.len() as u32).to_le_bytes())?;
        for d in dims {
            w.write_all(&d.to_le_bytes())?;
        }
        w.write_all(&seed.to_le_bytes())?;
        let params = self.params();
        w.write_all(&(params.len() as u64).to_le_bytes())?;
        for p in params {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    /// Returns the approximator and the seed recorded in the header.
    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(Self, u64)> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a parameter checkpoint".into()));
        }
        let mut kind = [0u8; 1];
        r.read_exact(&mut kind)?;
        let ndims = read_u32(&mut r)? as usize;
        if ndims > 16 {
            return Err(Error::Format(format!("implausible dimension count {ndims}")));
        }
        let dims: Vec<u32> = (0..ndims).map(|_| read_u32(&mut r)).collect::<Result<_>>()?;
        let seed = read_u64(&mut r)?;
        let count = read_u64(&mut r)? as usize;
        let expected = match (kind[0], dims.as_slice()) {
            (0, [n]) => *n as usize,
            (1, [2, 50, 50, 1]) => MLP_PARAMS,
            _ => return Err(Error::Format(format!("unknown layout {:?} {dims:?}", kind[0]))),
        };
        if count != expected {
            return Err(Error::Format(format!("expected {expected} values, header says {count}")));
        }
        let mut params = Vec::with_capacity(count);
        let mut buf = [0u8; 8];
        for _ in 0..count {
            r.read_exact(&mut buf)?;
            params.push(f64::from_le_bytes(buf));
        }
        let approx = if kind[0] == 0 {
            ValueApproximator::Tabular(TabularValues { values: params })
        } else {
            ValueApproximator::Mlp(CosineMlp { params })
        };
        Ok((approx, seed))
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"BFFCKPT1";

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::TWO_PI;
    use rand::Rng;

    fn random_mlp(seed: u64) -> CosineMlp {
        let mut rng = rng::stream(seed, 99);
        let mut m = CosineMlp::init(seed);
        for p in m.params.iter_mut() {
            *p += 0.3 * (rng.random::<f64>() - 0.5);
        }
        m
    }

    #[test]
    fn parameter_count() {
        assert_eq!(MLP_PARAMS, 2751);
        assert_eq!(B3, 2750);
    }

    #[test]
    fn tabular_lookup_and_basis_gradient() {
        let t = ValueApproximator::Tabular(TabularValues {
            values: vec![4.0 / 3.0, 2.0 / 3.0],
        });
        assert_eq!(t.value(State::discrete(0, 2)).unwrap(), 4.0 / 3.0);
        assert_eq!(t.grad_theta(State::discrete(1, 2)).unwrap(), vec![0.0, 1.0]);
        assert!(t.value(State::Continuous(1.0)).is_err());
        assert!(t.value(State::discrete(0, 3)).is_err());
    }

    #[test]
    fn constant_network() {
        let mut m = CosineMlp::zeros();
        m.params[B3] = 2.5;
        for s in [0.1, 1.0, 4.0] {
            assert_eq!(m.value_at(s), 2.5);
        }
    }

    #[test]
    fn network_is_periodic() {
        let mut rng = rng::stream(3, 0);
        for k in 0..100 {
            let m = random_mlp(k);
            let s: f64 = rng.random::<f64>() * TWO_PI;
            let a = m.value_at(s);
            let b = m.value_at(s + TWO_PI);
            assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn output_bias_gradient_is_one() {
        let m = ValueApproximator::Mlp(random_mlp(5));
        for s in [0.2, 3.0, 6.0] {
            assert_eq!(m.grad_theta(State::Continuous(s)).unwrap()[B3], 1.0);
        }
    }

    #[test]
    fn network_gradient_matches_finite_differences() {
        let mut rng = rng::stream(8, 0);
        let h = 1e-5;
        for trial in 0..5 {
            let m = random_mlp(100 + trial);
            let s: f64 = rng.random::<f64>() * TWO_PI;
            let mut g = vec![0.0; MLP_PARAMS];
            m.add_grad_at(s, 1.0, &mut g);
            for _ in 0..50 {
                let c = rng.random_range(0..MLP_PARAMS);
                let mut plus = m.clone();
                let mut minus = m.clone();
                plus.params[c] += h;
                minus.params[c] -= h;
                let fd = (plus.value_at(s) - minus.value_at(s)) / (2.0 * h);
                let err = (fd - g[c]).abs() / g[c].abs().max(1e-3);
                assert!(err < 1e-5, "coord {c}: fd={fd} analytic={}", g[c]);
            }
        }
    }

    #[test]
    fn directional_derivatives() {
        let mut rng = rng::stream(12, 0);
        let h = 1e-5;
        let m = random_mlp(77);
        for _ in 0..100 {
            let s: f64 = rng.random::<f64>() * TWO_PI;
            let mut u: Vec<f64> = (0..MLP_PARAMS).map(|_| rng.random::<f64>() - 0.5).collect();
            let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            u.iter_mut().for_each(|x| *x /= norm);
            let mut g = vec![0.0; MLP_PARAMS];
            m.add_grad_at(s, 1.0, &mut g);
            let analytic: f64 = g.iter().zip(&u).map(|(a, b)| a * b).sum();
            let shifted = |sign: f64| {
                let p: Vec<f64> = m.params.iter().zip(&u).map(|(p, d)| p + sign * h * d).collect();
                CosineMlp { params: p }.value_at(s)
            };
            let fd = (shifted(1.0) - shifted(-1.0)) / (2.0 * h);
            assert!((fd - analytic).abs() / analytic.abs().max(1e-3) < 1e-5);
        }
    }

    #[test]
    fn output_is_bounded() {
        let mut rng = rng::stream(13, 0);
        for k in 0..20 {
            let m = random_mlp(k);
            let bound = m.w3().iter().map(|w| w.abs()).sum::<f64>() + m.b3().abs();
            for _ in 0..50 {
                let s: f64 = rng.random::<f64>() * TWO_PI;
                assert!(m.value_at(s).abs() <= bound);
            }
        }
    }

    #[test]
    fn init_is_deterministic_with_declared_scale() {
        let a = ValueApproximator::init(ApproxKind::Mlp, 0, 42);
        let b = ValueApproximator::init(ApproxKind::Mlp, 0, 42);
        assert_eq!(a, b);
        assert!(a
            .params()
            .iter()
            .zip(b.params())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        let ValueApproximator::Mlp(m) = a else { unreachable!() };
        let w2 = m.w2();
        let mean = w2.iter().sum::<f64>() / w2.len() as f64;
        let var = w2.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / (w2.len() - 1) as f64;
        assert!((var - 1.0 / 50.0).abs() < 0.1 / 50.0, "var={var}");
        assert!(m.params[B1..W2].iter().all(|&b| b == 0.0));

        let t = ValueApproximator::init(ApproxKind::Tabular, 32, 1);
        assert!(t.params().iter().all(|&v| v == 0.0));
        assert_eq!(t.num_params(), 32);
    }

    #[test]
    fn non_finite_parameters_fault() {
        let mut m = CosineMlp::zeros();
        m.params[B3] = f64::NAN;
        let v = ValueApproximator::Mlp(m);
        assert!(matches!(v.value(State::Continuous(1.0)), Err(Error::NonFinite { .. })));
        assert!(v.check_finite().is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        for approx in [
            ValueApproximator::Mlp(random_mlp(4)),
            ValueApproximator::Tabular(TabularValues {
                values: vec![1.5, -0.25, 1e-300],
            }),
        ] {
            let mut buf = Vec::new();
            approx.write_checkpoint(&mut buf, 1234).unwrap();
            let (back, seed) = ValueApproximator::read_checkpoint(&buf[..]).unwrap();
            assert_eq!(seed, 1234);
            assert_eq!(back, approx);
        }
        assert!(ValueApproximator::read_checkpoint(&b"garbage!"[..]).is_err());
    }
}

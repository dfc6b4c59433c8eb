//! Exact tabular machinery: the Bellman solve, the exact residual-objective
//! gradient under the stationary weighting, and the per-sample update
//! vectors used by tabular SGD.

use crate::env::{stationary_distribution, DiscreteEnvSpec};
use crate::error::{Error, Result};
use crate::residual::EstimatorKind;

/// One observed transition `i → j`, optionally followed by `j → k`.
/// `j_fresh` is an independent redraw from row `i` (model access only).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TabularSample {
    pub i: usize,
    pub j: usize,
    pub k: Option<usize>,
    pub j_fresh: Option<usize>,
}

impl TabularSample {
    pub fn new(i: usize, j: usize) -> Self {
        TabularSample {
            i,
            j,
            k: None,
            j_fresh: None,
        }
    }

    pub fn with_future(i: usize, j: usize, k: usize) -> Self {
        TabularSample {
            k: Some(k),
            ..Self::new(i, j)
        }
    }

    pub fn with_fresh(i: usize, j: usize, j_fresh: usize) -> Self {
        TabularSample {
            j_fresh: Some(j_fresh),
            ..Self::new(i, j)
        }
    }

    /// `j' = (i + k − j) mod n`.
    pub fn shifted(&self, n: usize) -> Option<usize> {
        self.k.map(|k| (self.i + k + n - self.j) % n)
    }
}

/// Solves `A x = b` for dense row-major `A` by Gaussian elimination with
/// partial pivoting.
pub fn solve_dense(n: usize, mut a: Vec<f64>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    assert_eq!(a.len(), n * n);
    assert_eq!(b.len(), n);
    let scale = a.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(f64::MIN_POSITIVE);
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&p, &q| a[p * n + col].abs().total_cmp(&a[q * n + col].abs()))
            .expect("non-empty range");
        if a[pivot * n + col].abs() <= 1e-14 * scale {
            return Err(Error::Singular);
        }
        if pivot != col {
            for c in 0..n {
                a.swap(col * n + c, pivot * n + c);
            }
            b.swap(col, pivot);
        }
        let diag = a[col * n + col];
        for row in col + 1..n {
            let factor = a[row * n + col] / diag;
            if factor == 0.0 {
                continue;
            }
            for c in col..n {
                a[row * n + c] -= factor * a[col * n + c];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let tail: f64 = (row + 1..n).map(|c| a[row * n + c] * x[c]).sum();
        x[row] = (b[row] - tail) / a[row * n + row];
    }
    Ok(x)
}

/// `T(v) = r + γPv`.
pub fn bellman_operator(spec: &DiscreteEnvSpec, v: &[f64]) -> Vec<f64> {
    let n = spec.n();
    (0..n)
        .map(|i| {
            let pv: f64 = spec.row(i).iter().zip(v).map(|(p, x)| p * x).sum();
            spec.reward()[i] + spec.gamma() * pv
        })
        .collect()
}

/// Expected residual `r + γPv − v`.
pub fn expected_residual(spec: &DiscreteEnvSpec, v: &[f64]) -> Vec<f64> {
    bellman_operator(spec, v)
        .into_iter()
        .zip(v)
        .map(|(t, x)| t - x)
        .collect()
}

/// `V*` solving `(I − γP)V = r`.
pub fn exact_value(spec: &DiscreteEnvSpec) -> Result<Vec<f64>> {
    let n = spec.n();
    let g = spec.gamma();
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] = -g * spec.prob(i, j);
        }
        a[i * n + i] += 1.0;
    }
    solve_dense(n, a, spec.reward().to_vec())
}

/// `J(v) = ½ Σ_i μ_i (r + γPv − v)_i²`.
pub fn brm_objective(spec: &DiscreteEnvSpec, mu: &[f64], v: &[f64]) -> f64 {
    0.5 * expected_residual(spec, v)
        .iter()
        .zip(mu)
        .map(|(d, m)| m * d * d)
        .sum::<f64>()
}

/// `∇_v J = (γP − I)ᵀ diag(μ) (r + γPv − v)` for a given weighting `μ`.
pub fn exact_gradient_weighted(spec: &DiscreteEnvSpec, mu: &[f64], v: &[f64]) -> Vec<f64> {
    let n = spec.n();
    let g = spec.gamma();
    let w: Vec<f64> = expected_residual(spec, v)
        .iter()
        .zip(mu)
        .map(|(d, m)| m * d)
        .collect();
    let mut out = vec![0.0; n];
    for i in 0..n {
        if w[i] == 0.0 {
            continue;
        }
        for (l, &p) in spec.row(i).iter().enumerate() {
            out[l] += g * p * w[i];
        }
        out[i] -= w[i];
    }
    out
}

/// `∇_v J` under the chain's stationary distribution.
pub fn exact_gradient(spec: &DiscreteEnvSpec, v: &[f64]) -> Result<Vec<f64>> {
    let mu = stationary_distribution(spec)?;
    Ok(exact_gradient_weighted(spec, &mu, v))
}

/// Per-sample update vector `G_m` (dense, length `n`). Contributions to
/// coinciding indices add.
pub fn sample_update(
    kind: EstimatorKind,
    sample: &TabularSample,
    v: &[f64],
    r: &[f64],
    gamma: f64,
    n: usize,
) -> Result<Vec<f64>> {
    let TabularSample { i, j, .. } = *sample;
    if i >= n || j >= n || sample.k.is_some_and(|k| k >= n) || sample.j_fresh.is_some_and(|k| k >= n) {
        return Err(Error::InvalidArgument(format!("sample {sample:?} out of range for n={n}")));
    }
    let d = r[i] + gamma * v[j] - v[i];
    let mut g = vec![0.0; n];
    match kind {
        EstimatorKind::Uncorrelated => {
            let jp = sample
                .j_fresh
                .ok_or(Error::ModelAccessRequired("uncorrelated sampling"))?;
            g[i] -= d;
            g[jp] += gamma * d;
        }
        EstimatorKind::SampleCloning => {
            g[i] -= d;
            g[j] += gamma * d;
        }
        EstimatorKind::BffGradient => {
            let jp = sample.shifted(n).ok_or(Error::TruncatedWindow { index: 0 })?;
            g[i] -= d;
            g[jp] += gamma * d;
        }
        EstimatorKind::BffLoss => {
            let jp = sample.shifted(n).ok_or(Error::TruncatedWindow { index: 0 })?;
            let dp = r[i] + gamma * v[jp] - v[i];
            g[i] -= 0.5 * (d + dp);
            g[j] += 0.5 * gamma * dp;
            g[jp] += 0.5 * gamma * d;
        }
        EstimatorKind::PrimalDual => return Err(Error::PrimalDualNotGradient),
    }
    Ok(g)
}

/// Tabular primal-dual (SCGD) update. Only `y_i` moves:
/// `y_i ← y_i + β(d − y_i)`, then `v ← v − τ(γe_j − e_i) y_i`.
#[allow(clippy::too_many_arguments)]
pub fn tabular_primal_dual_update(
    v: &[f64],
    y: &[f64],
    sample: &TabularSample,
    r: &[f64],
    gamma: f64,
    tau: f64,
    beta: f64,
) -> (Vec<f64>, Vec<f64>) {
    let TabularSample { i, j, .. } = *sample;
    let d = r[i] + gamma * v[j] - v[i];
    let mut y_new = y.to_vec();
    y_new[i] = y[i] + beta * (d - y[i]);
    let mut v_new = v.to_vec();
    v_new[i] += tau * y_new[i];
    v_new[j] -= tau * gamma * y_new[i];
    (v_new, y_new)
}

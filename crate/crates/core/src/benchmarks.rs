//! Grid MDPs discretizing `dx/dt = a` control problems on `[0,1]^d`, built from
//! analytic value functions so the optimal values are known in closed form.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::maxplus::ValueVector;
use crate::mdp::DeterministicMdp;
use crate::scalar::Scalar;

/// Analytic optimal value functions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueSpec {
    /// `(1-3x)₊ + (6x-4)₊ + (1-36(x-½)²)₊`
    V1dBumps,
    /// `(1-3x)₊ + (6x-4)₊`
    V1dConvex,
    /// The convex profile in `x1` only, on `[0,1]²`.
    V2dSparse,
    /// The convex profile in `x1` plus the same profile in `x2`.
    V2dFull,
}

impl ValueSpec {
    pub const ALL: [ValueSpec; 4] = [
        ValueSpec::V1dBumps,
        ValueSpec::V1dConvex,
        ValueSpec::V2dSparse,
        ValueSpec::V2dFull,
    ];

    pub fn id(self) -> &'static str {
        match self {
            ValueSpec::V1dBumps => "v1d_bumps",
            ValueSpec::V1dConvex => "v1d_convex",
            ValueSpec::V2dSparse => "v2d_sparse",
            ValueSpec::V2dFull => "v2d_full",
        }
    }

    pub fn dimension(self) -> usize {
        match self {
            ValueSpec::V1dBumps | ValueSpec::V1dConvex => 1,
            ValueSpec::V2dSparse | ValueSpec::V2dFull => 2,
        }
    }

    /// Largest `|∂V/∂x_i|` over the domain.
    pub fn lipschitz(self) -> f64 {
        match self {
            ValueSpec::V1dBumps => 12.0,
            _ => 6.0,
        }
    }

    /// `V(x)`.
    pub fn value(self, x: &[f64]) -> f64 {
        match self {
            ValueSpec::V1dBumps => pieces_bumps(x[0]).iter().map(|p| p.0.max(0.0)).sum(),
            ValueSpec::V1dConvex | ValueSpec::V2dSparse => convex(x[0]).iter().map(|p| p.0.max(0.0)).sum(),
            ValueSpec::V2dFull => x[..2]
                .iter()
                .map(|&xi| convex(xi).iter().map(|p| p.0.max(0.0)).sum::<f64>())
                .sum(),
        }
    }

    /// Partial derivatives of `V`. At kinks the derivative from the left is
    /// used; at `x_i = 0` there is no left side and the right one is used.
    pub fn gradient(self, x: &[f64]) -> Vec<f64> {
        match self {
            ValueSpec::V1dBumps => vec![one_sided(&pieces_bumps(x[0]), x[0])],
            ValueSpec::V1dConvex => vec![one_sided(&convex(x[0]), x[0])],
            ValueSpec::V2dSparse => vec![one_sided(&convex(x[0]), x[0]), 0.0],
            ValueSpec::V2dFull => x[..2].iter().map(|&xi| one_sided(&convex(xi), xi)).collect(),
        }
    }
}

impl fmt::Display for ValueSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for ValueSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.id() == s)
            .ok_or_else(|| Error::invalid(format!("unknown value function `{s}`")))
    }
}

/// (value, derivative) of each positive-part piece before clipping.
fn convex(x: f64) -> [(f64, f64); 2] {
    [(1.0 - 3.0 * x, -3.0), (6.0 * x - 4.0, 6.0)]
}

fn pieces_bumps(x: f64) -> [(f64, f64); 3] {
    let [a, b] = convex(x);
    [a, b, (1.0 - 36.0 * (x - 0.5).powi(2), -72.0 * (x - 0.5))]
}

fn one_sided(pieces: &[(f64, f64)], x: f64) -> f64 {
    let from_left = x > 0.0;
    pieces
        .iter()
        .filter(|&&(v, d)| v > 0.0 || (v == 0.0 && if from_left { d < 0.0 } else { d > 0.0 }))
        .map(|p| p.1)
        .sum()
}

/// `b(x) = -V(x) log η - max_i |∂_i V(x)|`, the running reward making `V` solve
/// `V log η + max_i |∂_i V| + b = 0`.
pub fn running_reward(spec: ValueSpec, eta: f64, x: &[f64]) -> f64 {
    let slope = spec.gradient(x).iter().fold(0.0f64, |m, g| m.max(g.abs()));
    -spec.value(x) * eta.ln() - slope
}

/// `b` evaluated on the nodes of a line with `nodes` points.
pub fn reward_from_value_1d(spec: ValueSpec, eta: f64, nodes: usize) -> Result<Vec<f64>> {
    if spec.dimension() != 1 {
        return Err(Error::invalid(format!("{spec} is not one-dimensional")));
    }
    let grid = Grid::line(nodes)?;
    Ok((0..nodes).map(|s| running_reward(spec, eta, &grid.coords::<f64>(s))).collect())
}

/// A benchmark MDP with its analytic optimal values on the grid.
#[derive(Clone, Debug)]
pub struct BenchmarkProblem<T> {
    pub spec: ValueSpec,
    pub mdp: DeterministicMdp<T>,
    pub grid: Arc<Grid>,
    pub v_star: ValueVector<T>,
    pub eta: T,
    pub delta: T,
}

impl<T: Scalar> BenchmarkProblem<T> {
    pub fn gamma(&self) -> T {
        self.mdp.gamma()
    }

    /// `1 / (1 - γ)`.
    pub fn horizon(&self) -> T {
        T::one() / (T::one() - self.gamma())
    }

    /// Optimal values of the discrete MDP, within `tol` in sup norm.
    pub fn solve(&self, tol: T) -> Result<ValueVector<T>> {
        let zero = ValueVector::constant(self.mdp.state_count(), T::zero());
        let out = self
            .mdp
            .value_iteration(&zero, tol * (T::one() - self.gamma()), 10_000_000)?;
        Ok(out.values)
    }
}

/// Builds the benchmark for `spec` with `nodes` points per dimension.
pub fn build<T: Scalar>(spec: ValueSpec, nodes: usize, eta: f64) -> Result<BenchmarkProblem<T>> {
    if nodes < 3 {
        return Err(Error::invalid("benchmarks need at least 3 nodes per dimension"));
    }
    if !(eta > 0.0 && eta < 1.0) {
        return Err(Error::invalid(format!("continuous discount {eta} must lie in (0,1)")));
    }
    let grid = Arc::new(Grid::new(vec![nodes; spec.dimension()])?);
    let delta = 1.0 / (nodes - 1) as f64;
    let gamma = eta.powf(delta);
    let mut edges = Vec::new();
    for s in 0..grid.state_count() {
        let x = grid.coords::<f64>(s);
        if grid.on_boundary(s) {
            edges.push((s, s, T::of((1.0 - gamma) * spec.value(&x))));
            continue;
        }
        for d in 0..grid.dimension() {
            let stride = grid.stride(d);
            for t in [s - stride, s + stride] {
                let reward = delta * running_reward(spec, eta, &grid.coords::<f64>(t));
                edges.push((s, t, T::of(reward)));
            }
        }
    }
    let mdp = DeterministicMdp::new(grid.state_count(), T::of(gamma), edges)?.with_grid(grid.clone())?;
    let v_star = (0..grid.state_count())
        .map(|s| crate::maxplus::ExtendedValue::finite(T::of(spec.value(&grid.coords::<f64>(s)))))
        .collect();
    Ok(BenchmarkProblem {
        spec,
        mdp,
        grid,
        v_star,
        eta: T::of(eta),
        delta: T::of(delta),
    })
}

/// One-dimensional chain with `nodes` states.
pub fn build_1d<T: Scalar>(spec: ValueSpec, nodes: usize, eta: f64) -> Result<BenchmarkProblem<T>> {
    if spec.dimension() != 1 {
        return Err(Error::invalid(format!("{spec} is not one-dimensional")));
    }
    build(spec, nodes, eta)
}

/// Square grid with `nodes` points per side.
pub fn build_2d<T: Scalar>(spec: ValueSpec, nodes: usize, eta: f64) -> Result<BenchmarkProblem<T>> {
    if spec.dimension() != 2 {
        return Err(Error::invalid(format!("{spec} is not two-dimensional")));
    }
    build(spec, nodes, eta)
}

/// `(mean |V - V*|, max |V - V*|)` over the grid nodes. The mean is the
/// integral of the error over the unit cube with one cell per node.
pub fn error_metrics<T: Scalar>(v: &ValueVector<T>, v_star: &ValueVector<T>) -> Result<(T, T)> {
    Error::check_len("value vector", v_star.len(), v.len())?;
    if v.is_empty() {
        return Err(Error::invalid("empty value vectors"));
    }
    let diffs: Vec<T> = v
        .iter()
        .zip(v_star.iter())
        .map(|(a, b)| match (a.get(), b.get()) {
            (Some(x), Some(y)) => (x - y).abs(),
            (None, None) => T::zero(),
            _ => T::infinity(),
        })
        .collect();
    let l1 = diffs.iter().copied().sum::<T>() / T::of(diffs.len() as f64);
    let linf = diffs.iter().copied().fold(T::zero(), T::max);
    Ok((l1, linf))
}

//! Error sweeps over fixed and greedy dictionaries on the benchmark problems.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::benchmarks::{error_metrics, BenchmarkProblem};
use crate::dictionaries::{lipschitz_estimate, make_distance_dictionary, regular_centers, Partition};
use crate::error::{Error, Result};
use crate::grid::{Grid, Metric};
use crate::maxplus::{project_lower, project_upper, ValueVector};
use crate::matching_pursuit::{run_matching_pursuit, Norm, PoolConfig, PursuitConfig, PursuitStart};
use crate::reduced_vi::{compile_forms_powered, partition_reduced_vi_powered, run_reduced_vi, CompiledMdp, Provenance};
use crate::scalar::Scalar;

/// Dictionary strategies compared by a sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "fixed-constant")]
    FixedConstant,
    #[serde(rename = "fixed-affine")]
    FixedAffine,
    #[serde(rename = "greedy-constant")]
    GreedyConstant,
    #[serde(rename = "greedy-affine")]
    GreedyAffine,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::FixedConstant,
        Method::FixedAffine,
        Method::GreedyConstant,
        Method::GreedyAffine,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Method::FixedConstant => "fixed-constant",
            Method::FixedAffine => "fixed-affine",
            Method::GreedyConstant => "greedy-constant",
            Method::GreedyAffine => "greedy-affine",
        }
    }

    pub fn is_greedy(self) -> bool {
        matches!(self, Method::GreedyConstant | Method::GreedyAffine)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.id() == s)
            .ok_or_else(|| Error::invalid(format!("unknown method `{s}`")))
    }
}

/// One sweep cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: Method,
    pub rho: usize,
    pub n: usize,
    pub err_l1: f64,
    pub err_linf: f64,
    pub wall_ms: u64,
    pub compile_ms: u64,
}

#[derive(Clone, Debug)]
pub struct SweepConfig<T> {
    pub methods: Vec<Method>,
    pub rhos: Vec<usize>,
    pub ns: Vec<usize>,
    pub norm: Norm,
    /// Accuracy of every reduced solve.
    pub tol: T,
    /// Scale of the fixed distance atoms. When unset it is picked per `n` by
    /// [`select_affine_scale`].
    pub affine_scale: Option<T>,
    pub pool: PoolConfig,
    /// Record wall-clock columns; when off they are written as 0 so reruns are byte-identical.
    pub timings: bool,
}

impl<T: Scalar> SweepConfig<T> {
    pub fn standard(rhos: Vec<usize>, ns: Vec<usize>) -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            rhos,
            ns,
            norm: Norm::L1,
            tol: T::of(1e-7),
            affine_scale: None,
            pool: PoolConfig::default(),
            timings: true,
        }
    }
}

/// Splits `n` into per-dimension counts whose product is `n`, as even as possible.
pub fn cells_per_dim(n: usize, dims: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(dims);
    let mut rest = n;
    for d in (1..=dims).rev() {
        let target = (rest as f64).powf(1.0 / d as f64).round().max(1.0) as usize;
        // largest divisor of `rest` not above the target keeps the product exact
        let k = (1..=target.max(1)).rev().find(|k| rest % k == 0).unwrap_or(1);
        out.push(k);
        rest /= k;
    }
    out.reverse();
    out
}

fn millis(t: Instant, on: bool) -> u64 {
    if on {
        t.elapsed().as_millis() as u64
    } else {
        0
    }
}

/// Fixed regular partition with `n` cells.
pub fn fixed_constant<T: Scalar>(compiled: &CompiledMdp<T>, grid: &Grid, n: usize, tol: T) -> Result<ValueVector<T>> {
    let p = Partition::regular(grid, &cells_per_dim(n, grid.dimension()))?;
    Ok(partition_reduced_vi_powered(&compiled.power, &p, tol, 100_000_000)?.1)
}

/// `W = Z =` distance atoms of scale `c` on `n` evenly spaced centers.
pub fn fixed_affine<T: Scalar>(compiled: &CompiledMdp<T>, grid: &Arc<Grid>, n: usize, c: T, tol: T) -> Result<ValueVector<T>> {
    let centers = regular_centers(grid, &cells_per_dim(n, grid.dimension()))?;
    let d = make_distance_dictionary(&centers, c, &[], Metric::L1, grid)?;
    let provenance = Provenance {
        mdp: compiled.source_hash.clone(),
        w: d.content_hash()?,
        z: d.content_hash()?,
    };
    let forms = compile_forms_powered(&compiled.power, &d, &d, compiled.rho, provenance)?;
    Ok(run_reduced_vi(&forms, &d, None, tol, 100_000_000)?.1)
}

/// Multiples of the Lipschitz estimate tried by [`select_affine_scale`].
pub const SCALE_LADDER: [f64; 7] = [0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0];

/// Projection error of `v` onto `W = Z =` distance atoms of scale `c`:
/// the larger of `‖v - WW⁺v‖` and `‖v - Zᵀ⁺Zᵀv‖` in `norm`.
pub fn affine_projection_error<T: Scalar>(v: &ValueVector<T>, grid: &Arc<Grid>, n: usize, c: T, norm: Norm) -> Result<T> {
    let centers = regular_centers(grid, &cells_per_dim(n, grid.dimension()))?;
    let d = make_distance_dictionary(&centers, c, &[], Metric::L1, grid)?;
    let lo = project_lower(&d, v)?;
    let hi = project_upper(&d, v)?;
    let below = norm.aggregate(v.iter().zip(lo.iter()).map(|(a, l)| (a.raw() - l.raw()).abs()));
    let above = norm.aggregate(v.iter().zip(hi.iter()).map(|(a, h)| (h.raw() - a.raw()).abs()));
    Ok(below.max(above))
}

/// Picks the scale from `lip ×` [`SCALE_LADDER`] minimizing [`affine_projection_error`] of `v`.
pub fn select_affine_scale<T: Scalar>(v: &ValueVector<T>, grid: &Arc<Grid>, n: usize, lip: T, norm: Norm) -> Result<T> {
    let lip = if lip > T::zero() { lip } else { T::one() };
    let mut best: Option<(T, T)> = None;
    for f in SCALE_LADDER {
        let c = lip * T::of(f);
        let e = affine_projection_error(v, grid, n, c, norm)?;
        if best.map_or(true, |(b, _)| e < b) {
            best = Some((e, c));
        }
    }
    Ok(best.expect("ladder is non-empty").1)
}

/// Runs every (method, ρ, n) cell; errors are measured against `reference`
/// (typically the optimal values of the discrete MDP). Rows come back sorted
/// by method, ρ and n.
pub fn run_sweep<T: Scalar>(
    problem: &BenchmarkProblem<T>,
    reference: &ValueVector<T>,
    cfg: &SweepConfig<T>,
) -> Result<Vec<SweepRow>> {
    if cfg.rhos.is_empty() || cfg.ns.is_empty() || cfg.methods.is_empty() {
        return Err(Error::invalid("sweep needs at least one method, rho and n"));
    }
    if cfg.ns.contains(&0) || cfg.rhos.contains(&0) {
        return Err(Error::invalid("rho and n must be positive"));
    }
    let grid = problem.grid.clone();
    let mut ns = cfg.ns.clone();
    ns.sort_unstable();
    ns.dedup();
    let scales: Vec<T> = match cfg.affine_scale {
        Some(c) => vec![c; ns.len()],
        None if cfg.methods.contains(&Method::FixedAffine) => {
            let lip = lipschitz_estimate(reference, &grid, Metric::L1, T::one())?;
            ns.par_iter()
                .map(|&n| select_affine_scale(reference, &grid, n, lip, cfg.norm))
                .collect::<Result<_>>()?
        }
        None => vec![T::one(); ns.len()],
    };
    let budget = *ns.last().expect("non-empty");

    let mut rows = Vec::new();
    for &rho in &cfg.rhos {
        let started = Instant::now();
        let compiled = Arc::new(CompiledMdp::new(&problem.mdp, rho)?);
        let compile_ms = millis(started, cfg.timings);

        let fixed: Vec<(Method, usize, usize)> = cfg
            .methods
            .iter()
            .filter(|m| !m.is_greedy())
            .flat_map(|&m| ns.iter().enumerate().map(move |(i, &n)| (m, i, n)))
            .collect();
        let greedy: Vec<Method> = cfg.methods.iter().copied().filter(|m| m.is_greedy()).collect();

        let fixed_rows = fixed
            .par_iter()
            .map(|&(method, i, n)| {
                let t = Instant::now();
                let v = match method {
                    Method::FixedConstant => fixed_constant(&compiled, &grid, n, cfg.tol)?,
                    _ => fixed_affine(&compiled, &grid, n, scales[i], cfg.tol)?,
                };
                let (l1, linf) = error_metrics(&v, reference)?;
                Ok(vec![SweepRow {
                    method,
                    rho,
                    n,
                    err_l1: l1.as_f64(),
                    err_linf: linf.as_f64(),
                    wall_ms: millis(t, cfg.timings),
                    compile_ms,
                }])
            })
            .collect::<Result<Vec<_>>>()?;
        let greedy_rows = greedy
            .par_iter()
            .map(|&method| {
                let t = Instant::now();
                let start = match method {
                    Method::GreedyConstant => PursuitStart::single_cell(&grid),
                    _ => PursuitStart::zero_atom(grid.state_count(), Some(grid.clone()))?,
                };
                let mut pc = PursuitConfig::new(budget, cfg.norm, cfg.tol);
                pc.pool = cfg.pool.clone();
                pc.reference = Some(reference.clone());
                let out = run_matching_pursuit(compiled.clone(), start, &pc)?;
                let wall = millis(t, cfg.timings);
                Ok(out
                    .trace
                    .iter()
                    .filter(|r| ns.contains(&r.n))
                    .map(|r| SweepRow {
                        method,
                        rho,
                        n: r.n,
                        err_l1: r.err_l1.unwrap_or(f64::NAN),
                        err_linf: r.err_linf.unwrap_or(f64::NAN),
                        wall_ms: wall,
                        compile_ms,
                    })
                    .collect::<Vec<_>>())
            })
            .collect::<Result<Vec<_>>>()?;
        rows.extend(fixed_rows.into_iter().flatten());
        rows.extend(greedy_rows.into_iter().flatten());
    }
    rows.sort_by(|a, b| (a.method, a.rho, a.n).cmp(&(b.method, b.rho, b.n)));
    Ok(rows)
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    if rows.is_empty() {
        w.write_record(["method", "rho", "n", "err_l1", "err_linf", "wall_ms", "compile_ms"])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sweep_csv<R: Read>(input: R) -> Result<Vec<SweepRow>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cell_counts_multiply_back() {
        assert_eq!(cells_per_dim(16, 1), vec![16]);
        assert_eq!(cells_per_dim(16, 2), vec![4, 4]);
        assert_eq!(cells_per_dim(64, 2), vec![8, 8]);
        let c = cells_per_dim(32, 2);
        assert_eq!(c.iter().product::<usize>(), 32);
        assert_eq!(cells_per_dim(7, 2).iter().product::<usize>(), 7);
    }

    #[test]
    fn method_ids_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.id().parse::<Method>().unwrap(), m);
        }
    }
}

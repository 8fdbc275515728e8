//! Deterministic MDPs on a finite state set, the Bellman operator
//! `TV(s) = max_{s'} r̄(s,s') + γ V(s')`, value iteration, and operator powers.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::sync::Arc;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::maxplus::{argmax_first, ExtendedValue, ValueVector};
use crate::scalar::Scalar;

/// Edge count above which Bellman sweeps and squarings run on the rayon pool.
const PARALLEL_EDGES: usize = 1 << 15;

/// A deterministic MDP stored as a compressed adjacency list sorted by source,
/// then by target. Parallel edges are collapsed to their maximal reward.
#[derive(Clone, Debug, PartialEq)]
pub struct DeterministicMdp<T> {
    state_count: usize,
    gamma: T,
    offsets: Vec<usize>,
    targets: Vec<usize>,
    rewards: Vec<T>,
    grid: Option<Arc<Grid>>,
}

/// A deterministic policy: the successor chosen at every state.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Policy {
    pub successor: Vec<usize>,
}

impl Policy {
    pub fn is_valid_for<T: Scalar>(&self, mdp: &DeterministicMdp<T>) -> bool {
        self.successor.len() == mdp.state_count()
            && self
                .successor
                .iter()
                .enumerate()
                .all(|(s, &t)| mdp.reward(s, t).is_some())
    }
}

/// Result of [`DeterministicMdp::value_iteration`].
#[derive(Clone, Debug)]
pub struct ViOutcome<T> {
    /// The first iterate `V_t` whose Bellman residual is within tolerance.
    pub values: ValueVector<T>,
    pub iterations: usize,
    /// `‖T V_t - V_t‖∞`; by contraction `‖V_t - V*‖∞ <= residual / (1 - γ)`.
    pub residual: T,
    /// Residual of every iterate `V_0 .. V_t`.
    pub residuals: Vec<T>,
}

fn check_discount<T: Scalar>(gamma: T) -> Result<()> {
    if gamma >= T::zero() && gamma < T::one() {
        Ok(())
    } else {
        Err(Error::InvalidDiscount(gamma.as_f64()))
    }
}

impl<T: Scalar> DeterministicMdp<T> {
    pub fn new(
        state_count: usize,
        gamma: T,
        edges: impl IntoIterator<Item = (usize, usize, T)>,
    ) -> Result<Self> {
        check_discount(gamma)?;
        let mut rows: Vec<Vec<(usize, T)>> = vec![Vec::new(); state_count];
        for (s, t, r) in edges {
            if s >= state_count || t >= state_count {
                return Err(Error::StateOutOfRange {
                    source_state: s,
                    target: t,
                    state_count,
                });
            }
            if !r.is_finite() {
                return Err(Error::NonAdmissible(r.as_f64()));
            }
            rows[s].push((t, r));
        }
        for row in &mut rows {
            row.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.partial_cmp(&a.1).expect("finite rewards")));
            row.dedup_by_key(|e| e.0);
        }
        Self::from_rows(gamma, rows)
    }

    /// Rows must be sorted by target without duplicates.
    fn from_rows(gamma: T, rows: Vec<Vec<(usize, T)>>) -> Result<Self> {
        let state_count = rows.len();
        if state_count == 0 {
            return Err(Error::invalid("MDP needs at least one state"));
        }
        let mut offsets = Vec::with_capacity(state_count + 1);
        let total = rows.iter().map(Vec::len).sum();
        let mut targets = Vec::with_capacity(total);
        let mut rewards = Vec::with_capacity(total);
        offsets.push(0);
        for (s, row) in rows.into_iter().enumerate() {
            if row.is_empty() {
                return Err(Error::NoOutgoingEdge { state: s });
            }
            for (t, r) in row {
                targets.push(t);
                rewards.push(r);
            }
            offsets.push(targets.len());
        }
        Ok(Self {
            state_count,
            gamma,
            offsets,
            targets,
            rewards,
            grid: None,
        })
    }

    pub fn with_grid(mut self, grid: Arc<Grid>) -> Result<Self> {
        Error::check_len("grid state count", self.state_count, grid.state_count())?;
        self.grid = Some(grid);
        Ok(self)
    }

    pub fn grid(&self) -> Option<&Arc<Grid>> {
        self.grid.as_ref()
    }

    pub fn state_count(&self) -> usize {
        self.state_count
    }

    pub fn gamma(&self) -> T {
        self.gamma
    }

    pub fn edge_count(&self) -> usize {
        self.targets.len()
    }

    /// Targets and rewards of the edges leaving `s`, sorted by target.
    pub fn successors(&self, s: usize) -> (&[usize], &[T]) {
        let (a, b) = (self.offsets[s], self.offsets[s + 1]);
        (&self.targets[a..b], &self.rewards[a..b])
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, T)> + '_ {
        (0..self.state_count).flat_map(move |s| {
            let (ts, rs) = self.successors(s);
            ts.iter().zip(rs).map(move |(&t, &r)| (s, t, r))
        })
    }

    /// `r̄(s, t)`, or `None` when `(s, t)` is not an edge.
    pub fn reward(&self, s: usize, t: usize) -> Option<T> {
        let (ts, rs) = self.successors(s);
        ts.binary_search(&t).ok().map(|i| rs[i])
    }

    /// Edges entering each state, as `(source, reward)` lists.
    pub fn reverse_adjacency(&self) -> Vec<Vec<(usize, T)>> {
        let mut rev = vec![Vec::new(); self.state_count];
        for (s, t, r) in self.edges() {
            rev[t].push((s, r));
        }
        rev
    }

    fn backup(&self, s: usize, v: &[ExtendedValue<T>]) -> ExtendedValue<T> {
        let (ts, rs) = self.successors(s);
        ts.iter()
            .zip(rs)
            .fold(ExtendedValue::bottom(), |acc, (&t, &r)| acc.oplus(v[t].scale(self.gamma).add(r)))
    }

    /// One application of the Bellman operator. `-inf` entries of `V` are
    /// absorbing, so `TV(s)` is `-inf` only when every successor is.
    pub fn bellman_apply(&self, v: &ValueVector<T>) -> Result<ValueVector<T>> {
        Error::check_len("value vector", self.state_count, v.len())?;
        let v = v.as_slice();
        let out: Vec<_> = if self.edge_count() >= PARALLEL_EDGES {
            (0..self.state_count).into_par_iter().map(|s| self.backup(s, v)).collect()
        } else {
            (0..self.state_count).map(|s| self.backup(s, v)).collect()
        };
        Ok(ValueVector::new(out))
    }

    /// `‖TV - V‖∞`.
    pub fn bellman_residual(&self, v: &ValueVector<T>) -> Result<T> {
        Ok(self.bellman_apply(v)?.sup_distance(v))
    }

    /// Iterates `V_t = T V_{t-1}` until the Bellman residual drops to `tol`.
    pub fn value_iteration(&self, v0: &ValueVector<T>, tol: T, max_iter: usize) -> Result<ViOutcome<T>> {
        if !(tol > T::zero()) {
            return Err(Error::invalid("tolerance must be positive"));
        }
        Error::check_len("initial values", self.state_count, v0.len())?;
        let mut v = v0.clone();
        let mut residuals = Vec::new();
        for t in 0..=max_iter {
            let tv = self.bellman_apply(&v)?;
            let residual = tv.sup_distance(&v);
            residuals.push(residual);
            if residual <= tol {
                return Ok(ViOutcome {
                    values: v,
                    iterations: t,
                    residual,
                    residuals,
                });
            }
            if t == max_iter {
                return Err(Error::NotConverged {
                    iterations: t,
                    residual: residual.as_f64(),
                    last_iterate: v.to_f64(),
                });
            }
            v = tv;
        }
        unreachable!("loop returns on its last iteration")
    }

    /// Per-state argmax of `r̄(s,s') + γV(s')`; ties go to the smallest target.
    pub fn greedy_policy(&self, v: &ValueVector<T>) -> Result<Policy> {
        Error::check_len("value vector", self.state_count, v.len())?;
        let successor = (0..self.state_count)
            .map(|s| {
                let (ts, rs) = self.successors(s);
                let i = argmax_first(ts.iter().zip(rs).map(|(&t, &r)| v[t].scale(self.gamma).add(r)))
                    .expect("every state has an edge");
                ts[i]
            })
            .collect();
        Ok(Policy { successor })
    }

    /// `max_s max_a r(s,a) - min_s max_a r(s,a)`.
    pub fn range_of_rewards(&self) -> T {
        let best = (0..self.state_count).map(|s| {
            let (_, rs) = self.successors(s);
            rs.iter().copied().fold(T::neg_infinity(), T::max)
        });
        let (lo, hi) = best.fold((T::infinity(), T::neg_infinity()), |(lo, hi), b| (lo.min(b), hi.max(b)));
        hi - lo
    }

    /// The MDP whose Bellman operator is `T^ρ`: discount `γ^ρ` and rewards
    /// `R_ρ(s,s'') = max over length-ρ paths of Σ_k γ^k r̄(s_k, s_{k+1})`.
    ///
    /// Built by max-plus binary powering with
    /// `R_{a+b}(s,s'') = max_{s'} R_a(s,s') + γ^a R_b(s',s'')`.
    /// Unreachable pairs are dropped.
    pub fn compile_power(&self, rho: usize) -> Result<Self> {
        if rho == 0 {
            return Err(Error::invalid("operator power must be at least 1"));
        }
        let rows: Vec<Vec<(usize, T)>> = (0..self.state_count)
            .map(|s| {
                let (ts, rs) = self.successors(s);
                ts.iter().copied().zip(rs.iter().copied()).collect()
            })
            .collect();
        let parallel = self.edge_count() >= PARALLEL_EDGES || rho > 4;
        let mut acc: Option<(Vec<Vec<(usize, T)>>, usize)> = None;
        let mut power = (rows, 1usize);
        let mut k = rho;
        loop {
            if k & 1 == 1 {
                acc = Some(match acc {
                    None => power.clone(),
                    Some((r, a)) => (compose(&r, self.gamma.powi(a as i32), &power.0, parallel), a + power.1),
                });
            }
            k >>= 1;
            if k == 0 {
                break;
            }
            let len = power.1;
            power = (compose(&power.0, self.gamma.powi(len as i32), &power.0, parallel), 2 * len);
        }
        let (rows, len) = acc.expect("rho >= 1 sets at least one bit");
        debug_assert_eq!(len, rho);
        let mut m = Self::from_rows(self.gamma.powi(rho as i32), rows)?;
        m.grid = self.grid.clone();
        Ok(m)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "states {} gamma {}", self.state_count, self.gamma).unwrap();
        if let Some(g) = &self.grid {
            let sizes: Vec<String> = g.sizes().iter().map(|n| n.to_string()).collect();
            writeln!(out, "grid {}", sizes.join(" ")).unwrap();
        }
        for (s, t, r) in self.edges() {
            writeln!(out, "edge {s} {t} {r}").unwrap();
        }
        out
    }

    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(self.to_text().as_bytes())?;
        Ok(())
    }

    /// Parses the line format: `states N gamma G`, an optional `grid n1 .. nd`,
    /// then one `edge s t r` per line. Blank lines and `#` comments are ignored.
    pub fn read_text<R: BufRead>(r: R) -> Result<Self> {
        let mut header: Option<(usize, T)> = None;
        let mut grid = None;
        let mut edges = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            let lineno = i + 1;
            let err = |message: &str| Error::Parse {
                line: lineno,
                message: message.to_string(),
            };
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            match fields[0] {
                "states" => {
                    if header.is_some() {
                        return Err(err("duplicate header"));
                    }
                    if fields.len() != 4 || fields[2] != "gamma" {
                        return Err(err("expected `states N gamma G`"));
                    }
                    let n = fields[1].parse().map_err(|_| err("bad state count"))?;
                    let g: f64 = fields[3].parse().map_err(|_| err("bad discount"))?;
                    header = Some((n, T::of(g)));
                }
                "grid" => {
                    let sizes = fields[1..]
                        .iter()
                        .map(|f| f.parse().map_err(|_| err("bad grid size")))
                        .collect::<Result<Vec<usize>>>()?;
                    grid = Some(Arc::new(Grid::new(sizes)?));
                }
                "edge" => {
                    if header.is_none() {
                        return Err(err("edge before header"));
                    }
                    if fields.len() != 4 {
                        return Err(err("expected `edge s t r`"));
                    }
                    let s = fields[1].parse().map_err(|_| err("bad source"))?;
                    let t = fields[2].parse().map_err(|_| err("bad target"))?;
                    let rew: f64 = fields[3].parse().map_err(|_| err("bad reward"))?;
                    edges.push((s, t, T::of(rew)));
                }
                _ => return Err(err("unknown record")),
            }
        }
        let (n, gamma) = header.ok_or(Error::Parse {
            line: 0,
            message: "missing header".into(),
        })?;
        let m = Self::new(n, gamma, edges)?;
        match grid {
            Some(g) => m.with_grid(g),
            None => Ok(m),
        }
    }

    pub fn from_text(s: &str) -> Result<Self> {
        Self::read_text(s.as_bytes())
    }

    /// SHA-256 of the text serialization, hex encoded.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

fn compose<T: Scalar>(
    left: &[Vec<(usize, T)>],
    gamma_a: T,
    right: &[Vec<(usize, T)>],
    parallel: bool,
) -> Vec<Vec<(usize, T)>> {
    let n = right.len();
    let product_row = |(acc, touched): &mut (Vec<T>, Vec<usize>), row: &Vec<(usize, T)>| {
        for &(mid, r1) in row {
            for &(t, r2) in &right[mid] {
                let v = r1 + gamma_a * r2;
                let slot = &mut acc[t];
                if *slot == T::neg_infinity() {
                    touched.push(t);
                    *slot = v;
                } else if v > *slot {
                    *slot = v;
                }
            }
        }
        touched.sort_unstable();
        let out: Vec<(usize, T)> = touched.iter().map(|&t| (t, acc[t])).collect();
        for &t in touched.iter() {
            acc[t] = T::neg_infinity();
        }
        touched.clear();
        out
    };
    let init = || (vec![T::neg_infinity(); n], Vec::new());
    if parallel {
        left.par_iter().map_init(init, product_row).collect()
    } else {
        let mut scratch = init();
        left.iter().map(|row| product_row(&mut scratch, row)).collect()
    }
}

/// Number of integer points in the `ℓ1` ball of radius `rho` in dimension `d`:
/// `Σ_{i=0}^{min(d,ρ)} 2^i C(d,i) C(ρ,i)`.
pub fn neighborhood_degree(rho: u32, d: u32) -> u128 {
    fn binomial(n: u32, k: u32) -> u128 {
        (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
    }
    (0..=rho.min(d))
        .map(|i| (1u128 << i) * binomial(d, i) * binomial(rho, i))
        .sum()
}

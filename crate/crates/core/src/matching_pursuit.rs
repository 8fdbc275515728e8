//! Greedy dictionary growth: projection-residual criteria for new atoms,
//! dyadic cluster splits for partitions, and majorization-minimization
//! refinement of parametrized atoms.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dictionaries::{lipschitz_estimate, make_partition_dictionary, Atom, Partition};
use crate::error::{Error, Result};
use crate::grid::{Grid, Metric};
use crate::maxplus::{
    argmax_first, argmin_first, eval_dictionary, residuate, transpose_apply, transpose_residuate, Coefficients,
    Dictionary, DictionaryRecord, ExtendedValue, ValueVector,
};
use crate::reduced_vi::{run_reduced_vi, CompiledForms, CompiledMdp, FormMatrix, Provenance};
use crate::scalar::Scalar;

/// How pointwise residuals are aggregated into a score.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    L1,
    LInf,
}

impl Norm {
    pub fn aggregate<T: Scalar>(self, terms: impl Iterator<Item = T>) -> T {
        match self {
            Norm::L1 => terms.sum(),
            Norm::LInf => terms.fold(T::zero(), T::max),
        }
    }
}

impl fmt::Display for Norm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Norm::L1 => "l1",
            Norm::LInf => "linf",
        })
    }
}

impl FromStr for Norm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(Norm::L1),
            "linf" => Ok(Norm::LInf),
            _ => Err(Error::invalid(format!("unknown norm `{s}` (expected l1 or linf)"))),
        }
    }
}

fn require_finite<T: Scalar>(what: &str, v: &ValueVector<T>) -> Result<()> {
    match v.iter().position(|x| x.is_bottom()) {
        Some(s) => Err(Error::invalid(format!("{what} is -inf at state {s}"))),
        None => Ok(()),
    }
}

/// Pointwise residual `min{U - V, U - w + ⟨w|-U⟩}` after adding `w` to `W`.
fn residual_after_w<T: Scalar>(u: &ValueVector<T>, v: &ValueVector<T>, w: &[ExtendedValue<T>]) -> Result<Vec<T>> {
    Error::check_len("candidate atom", u.len(), w.len())?;
    Error::check_len("value vector", u.len(), v.len())?;
    require_finite("U", u)?;
    let shift = w
        .iter()
        .zip(u.iter())
        .filter(|(x, _)| x.is_finite())
        .map(|(x, y)| x.raw() - y.raw())
        .reduce(T::max)
        .ok_or_else(|| Error::invalid("candidate atom is identically -inf"))?;
    Ok(u.iter()
        .zip(v.iter())
        .zip(w)
        .map(|((a, b), x)| {
            let (a, b, x) = (a.raw(), b.raw(), x.raw());
            (a - b).min(a - x + shift)
        })
        .collect())
}

/// Pointwise residual `min{U - TV, -TV - z + ⟨TV|z⟩}` after adding `z` to `Z`.
fn residual_after_z<T: Scalar>(tv: &ValueVector<T>, u: &ValueVector<T>, z: &[ExtendedValue<T>]) -> Result<Vec<T>> {
    Error::check_len("candidate atom", tv.len(), z.len())?;
    Error::check_len("value vector", tv.len(), u.len())?;
    require_finite("TV", tv)?;
    let shift = z
        .iter()
        .zip(tv.iter())
        .filter(|(x, _)| x.is_finite())
        .map(|(x, y)| x.raw() + y.raw())
        .reduce(T::max)
        .ok_or_else(|| Error::invalid("candidate atom is identically -inf"))?;
    Ok(tv
        .iter()
        .zip(u.iter())
        .zip(z)
        .map(|((t, a), x)| {
            let (t, a, x) = (t.raw(), a.raw(), x.raw());
            (a - t).min(-t - x + shift)
        })
        .collect())
}

/// `‖U - W_new W_new⁺ U‖` for `W_new = W ∪ {w}`, given `V = W W⁺ U`.
pub fn criterion_w<T: Scalar>(u: &ValueVector<T>, v: &ValueVector<T>, w: &[ExtendedValue<T>], norm: Norm) -> Result<T> {
    Ok(norm.aggregate(residual_after_w(u, v, w)?.into_iter()))
}

/// `‖Z_newᵀ⁺ Z_newᵀ TV - TV‖` for `Z_new = Z ∪ {z}`, given `U = Zᵀ⁺ZᵀTV`.
pub fn criterion_z<T: Scalar>(tv: &ValueVector<T>, u: &ValueVector<T>, z: &[ExtendedValue<T>], norm: Norm) -> Result<T> {
    Ok(norm.aggregate(residual_after_z(tv, u, z)?.into_iter()))
}

/// A candidate change to the dictionaries.
#[derive(Clone, Debug, PartialEq)]
pub enum Proposal<T> {
    /// Bisect a partition cell along one dimension.
    Split { cell: usize, dim: usize },
    /// An atom to be scored for both `W` and `Z`.
    Atom(Atom<T>),
}

/// Proposals considered by one greedy step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CandidatePool<T> {
    pub proposals: Vec<Proposal<T>>,
}

/// Distance-atom pool settings for non-partition runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolConfig {
    /// Upper bound on the number of proposals.
    pub max_size: usize,
    /// Scales are these multiples of the current Lipschitz estimate.
    pub scale_factors: Vec<f64>,
    pub metric: Metric,
    /// How atom proposals enter the dictionaries.
    pub adoption: AtomAdoption,
    /// When positive, the best `lookahead` candidates for `W` and for `Z` are
    /// paired, each pair is solved, and the pair whose fixed point has the
    /// smallest Bellman residual `‖T^ρ V - V‖` is adopted.
    pub lookahead: usize,
}

/// Adoption rule for atom proposals.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AtomAdoption {
    /// Best atom under the `W` criterion joins `W`, best under the `Z` criterion joins `Z`.
    Separate,
    /// One atom joins both, ranked by the sum of the two criteria.
    CoupledSum,
    /// One atom joins both, ranked by the `Z` criterion.
    CoupledZ,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            max_size: 512,
            scale_factors: vec![0.5, 1.0, 2.0],
            metric: Metric::L1,
            adoption: AtomAdoption::Separate,
            lookahead: 0,
        }
    }
}

/// Nodes `0, k, 2k, ...` along each axis plus the last node, with the smallest
/// stride `k` keeping `centers × factors` within the budget.
fn coarse_centers(grid: &Grid, budget: usize) -> Vec<usize> {
    let axis = |n: usize, k: usize| -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).step_by(k).collect();
        if *idx.last().expect("n > 0") != n - 1 {
            idx.push(n - 1);
        }
        idx
    };
    let mut k = 1;
    let axes = loop {
        let axes: Vec<Vec<usize>> = grid.sizes().iter().map(|&n| axis(n, k)).collect();
        let count: usize = axes.iter().map(Vec::len).product();
        if count <= budget.max(1) || axes.iter().all(|a| a.len() <= 2) {
            break axes;
        }
        k += 1;
    };
    let mut out = Vec::new();
    let mut pos = vec![0usize; axes.len()];
    'outer: loop {
        let idx: Vec<usize> = pos.iter().zip(&axes).map(|(&i, a)| a[i]).collect();
        out.push(grid.state_of(&idx));
        for d in 0..axes.len() {
            pos[d] += 1;
            if pos[d] < axes[d].len() {
                continue 'outer;
            }
            pos[d] = 0;
        }
        return out;
    }
}

#[derive(Clone)]
enum Structure<T> {
    Partition(Partition),
    General { tw: Vec<ValueVector<T>> },
}

/// The converged reduced iteration for the current dictionaries, with
/// `V = Wα`, `TV = T^ρ V` and `U = Zᵀ⁺ZᵀTV ≥ TV`. `V ≤ U` holds up to the
/// solver tolerance.
#[derive(Clone)]
pub struct GreedyRunState<T> {
    pub w: Dictionary<T>,
    pub z: Dictionary<T>,
    pub forms: CompiledForms<T>,
    pub alpha: Coefficients<T>,
    pub beta: Coefficients<T>,
    pub v: ValueVector<T>,
    pub u: ValueVector<T>,
    pub tv: ValueVector<T>,
    pub tol: T,
    pub max_iter: usize,
    compiled: Arc<CompiledMdp<T>>,
    structure: Structure<T>,
}

/// What one greedy step adopted.
#[derive(Clone, Debug, PartialEq)]
pub struct Adoption<T> {
    pub atom_kind: String,
    pub atom_desc: String,
    /// Criterion value of the adopted proposal.
    pub score: T,
    /// Split dimension in partition mode.
    pub split_dim: Option<usize>,
}

impl<T: Scalar> GreedyRunState<T> {
    /// Starts from a partition; `W = Z =` its indicator atoms.
    pub fn from_partition(compiled: Arc<CompiledMdp<T>>, partition: Partition, tol: T, max_iter: usize) -> Result<Self> {
        let n = compiled.power.state_count();
        Error::check_len("partition state count", n, partition.state_count())?;
        let grid = compiled.power.grid().cloned();
        let w = make_partition_dictionary(&partition, grid)?;
        let k = partition.cell_count();
        let zw = FormMatrix::from_fn(k, k, |a, b| {
            if a == b {
                ExtendedValue::zero()
            } else {
                ExtendedValue::bottom()
            }
        });
        let mut ztw = FormMatrix::filled(k, k, ExtendedValue::bottom());
        for (s, t, r) in compiled.power.edges() {
            let (a, b) = (partition.cell_of(s), partition.cell_of(t));
            ztw.set(a, b, ztw.get(a, b).oplus(ExtendedValue::finite(r)));
        }
        let hash = w.content_hash()?;
        let forms = CompiledForms {
            zw,
            ztw,
            rho: compiled.rho,
            gamma_eff: compiled.gamma_eff(),
            provenance: Provenance {
                mdp: compiled.source_hash.clone(),
                w: hash.clone(),
                z: hash,
            },
        };
        let mut state = Self::assemble(compiled, w.clone(), w, forms, Structure::Partition(partition), tol, max_iter)?;
        state.converge(None)?;
        Ok(state)
    }

    /// Starts from arbitrary dictionaries over the states of the MDP.
    pub fn from_dictionaries(
        compiled: Arc<CompiledMdp<T>>,
        w: Dictionary<T>,
        z: Dictionary<T>,
        tol: T,
        max_iter: usize,
    ) -> Result<Self> {
        let provenance = Provenance {
            mdp: compiled.source_hash.clone(),
            w: w.content_hash()?,
            z: z.content_hash()?,
        };
        let forms = crate::reduced_vi::compile_forms_powered(&compiled.power, &w, &z, compiled.rho, provenance)?;
        let tw = (0..w.len())
            .map(|i| crate::reduced_vi::transition_column(&compiled.power, w.column(i), i))
            .collect::<Result<_>>()?;
        let mut state = Self::assemble(compiled, w, z, forms, Structure::General { tw }, tol, max_iter)?;
        state.converge(None)?;
        Ok(state)
    }

    fn assemble(
        compiled: Arc<CompiledMdp<T>>,
        w: Dictionary<T>,
        z: Dictionary<T>,
        forms: CompiledForms<T>,
        structure: Structure<T>,
        tol: T,
        max_iter: usize,
    ) -> Result<Self> {
        let n = compiled.power.state_count();
        Ok(Self {
            alpha: Coefficients::bottom(w.len()),
            beta: Coefficients::bottom(z.len()),
            v: ValueVector::bottom(n),
            u: ValueVector::bottom(n),
            tv: ValueVector::bottom(n),
            w,
            z,
            forms,
            tol,
            max_iter,
            compiled,
            structure,
        })
    }

    fn converge(&mut self, alpha0: Option<Coefficients<T>>) -> Result<()> {
        let (reduced, v) = run_reduced_vi(&self.forms, &self.w, alpha0.as_ref(), self.tol, self.max_iter)?;
        let tv = self.compiled.power.bellman_apply(&v)?;
        let beta = transpose_apply(&self.z, &tv)?;
        self.u = transpose_residuate(&self.z, &beta)?;
        self.alpha = reduced.alpha;
        self.beta = beta;
        self.v = v;
        self.tv = tv;
        Ok(())
    }

    pub fn compiled(&self) -> &Arc<CompiledMdp<T>> {
        &self.compiled
    }

    pub fn partition(&self) -> Option<&Partition> {
        match &self.structure {
            Structure::Partition(p) => Some(p),
            Structure::General { .. } => None,
        }
    }

    /// Number of atoms in `W`.
    pub fn atom_count(&self) -> usize {
        self.w.len()
    }

    /// `U - TV`, the residual of the upper projection.
    pub fn residual(&self) -> Vec<T> {
        self.u.iter().zip(self.tv.iter()).map(|(a, b)| a.raw() - b.raw()).collect()
    }

    /// Score of a cell split: the residual of `TV` against its cellwise maxima
    /// once `cell` is divided as `split` divides it.
    fn split_score(&self, split: &Partition, cell: usize, norm: Norm) -> T {
        let new_cell = split.cell_count() - 1;
        let cell_max = |c: usize| {
            split
                .cell(c)
                .iter()
                .map(|&s| self.tv[s].raw())
                .fold(T::neg_infinity(), T::max)
        };
        let (lo, hi) = (cell_max(cell), cell_max(new_cell));
        let terms = (0..self.tv.len()).map(|s| {
            let c = split.cell_of(s);
            let u = if c == cell {
                lo
            } else if c == new_cell {
                hi
            } else {
                self.u[s].raw()
            };
            u - self.tv[s].raw()
        });
        norm.aggregate(terms)
    }

    /// Serializable snapshot for resuming a run.
    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            rho: self.compiled.rho,
            w: DictionaryRecord::from(&self.w),
            z: DictionaryRecord::from(&self.z),
            alpha: self.alpha.clone(),
            partition: self.partition().cloned(),
        }
    }

    /// Rebuilds a run from a snapshot taken against the same compiled MDP.
    pub fn resume(compiled: Arc<CompiledMdp<T>>, checkpoint: Checkpoint<T>, tol: T, max_iter: usize) -> Result<Self> {
        if checkpoint.rho != compiled.rho {
            return Err(Error::invalid(format!(
                "checkpoint was taken at rho = {}, not {}",
                checkpoint.rho, compiled.rho
            )));
        }
        let mut state = match checkpoint.partition {
            Some(p) => Self::from_partition(compiled, p, tol, max_iter)?,
            None => Self::from_dictionaries(compiled, checkpoint.w.try_into()?, checkpoint.z.try_into()?, tol, max_iter)?,
        };
        if checkpoint.alpha.len() == state.alpha.len() {
            state.converge(Some(checkpoint.alpha))?;
        }
        Ok(state)
    }
}

/// Dictionaries, coefficients and partition of a greedy run.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Checkpoint<T> {
    pub rho: usize,
    pub w: DictionaryRecord<T>,
    pub z: DictionaryRecord<T>,
    pub alpha: Coefficients<T>,
    pub partition: Option<Partition>,
}

/// Splits of the cell holding the state with the largest `U - TV`, one per
/// dimension along which the cell spans at least two grid indices.
pub fn propose_partition_split<T: Scalar>(state: &GreedyRunState<T>) -> Result<CandidatePool<T>> {
    let p = state
        .partition()
        .ok_or_else(|| Error::invalid("split proposals need a partition run"))?;
    let grid = state.compiled.power.grid().ok_or(Error::MissingGrid)?;
    let s_star = argmax_first(state.residual()).ok_or(Error::EmptyPool)?;
    let cell = p.cell_of(s_star);
    let proposals: Vec<_> = (0..grid.dimension())
        .filter(|&dim| p.cell_extent(cell, dim, grid) >= 2)
        .map(|dim| Proposal::Split { cell, dim })
        .collect();
    if proposals.is_empty() {
        return Err(Error::Unsplittable { cell });
    }
    Ok(CandidatePool { proposals })
}

/// Distance atoms centered on a coarse sub-grid, at multiples of the larger
/// Lipschitz estimate of `V` and `TV`.
pub fn propose_distance_atoms<T: Scalar>(state: &GreedyRunState<T>, config: &PoolConfig) -> Result<CandidatePool<T>> {
    let grid = state.compiled.power.grid().ok_or(Error::MissingGrid)?;
    if config.scale_factors.is_empty() || config.max_size == 0 {
        return Err(Error::EmptyPool);
    }
    let lip = |v: &ValueVector<T>| lipschitz_estimate(v, grid, config.metric, T::one());
    let mut scale = lip(&state.v)?.max(lip(&state.tv)?);
    if !(scale > T::zero()) || !scale.is_finite() {
        scale = T::one();
    }
    let centers = coarse_centers(grid, config.max_size / config.scale_factors.len());
    let dims: Vec<usize> = (0..grid.dimension()).collect();
    let proposals = centers
        .iter()
        .flat_map(|&center| {
            let dims = dims.clone();
            config.scale_factors.iter().map(move |&f| {
                Proposal::Atom(Atom::Distance {
                    center,
                    scale: scale * T::of(f),
                    dims: dims.clone(),
                    metric: config.metric,
                })
            })
        })
        .collect();
    Ok(CandidatePool { proposals })
}

fn axis_name(dim: usize) -> String {
    format!("x{}", dim + 1)
}

/// Scores every proposal and adopts the best one (first index on ties), then
/// recompiles the affected form entries and re-solves the reduced iteration.
///
/// Partition runs adopt one split, which refines `W` and `Z` together. Atom
/// proposals are scored separately for `W` and for `Z`; the best of each is
/// added, so both dictionaries grow by one.
pub fn greedy_step<T: Scalar>(state: &mut GreedyRunState<T>, pool: &CandidatePool<T>, norm: Norm) -> Result<Adoption<T>> {
    greedy_step_with(state, pool, norm, AtomAdoption::Separate, 0)
}

/// [`greedy_step`] with an explicit adoption rule for atom proposals.
pub fn greedy_step_with<T: Scalar>(
    state: &mut GreedyRunState<T>,
    pool: &CandidatePool<T>,
    norm: Norm,
    rule: AtomAdoption,
    lookahead: usize,
) -> Result<Adoption<T>> {
    if pool.proposals.is_empty() {
        return Err(Error::EmptyPool);
    }
    let splits: Vec<(usize, usize)> = pool
        .proposals
        .iter()
        .filter_map(|p| match p {
            Proposal::Split { cell, dim } => Some((*cell, *dim)),
            Proposal::Atom(_) => None,
        })
        .collect();
    if !splits.is_empty() {
        if splits.len() != pool.proposals.len() {
            return Err(Error::invalid("cannot mix split and atom proposals"));
        }
        adopt_split(state, &splits, norm)
    } else {
        let atoms: Vec<&Atom<T>> = pool
            .proposals
            .iter()
            .filter_map(|p| match p {
                Proposal::Atom(a) => Some(a),
                Proposal::Split { .. } => None,
            })
            .collect();
        adopt_atoms(state, &atoms, norm, rule, lookahead)
    }
}

fn adopt_split<T: Scalar>(state: &mut GreedyRunState<T>, splits: &[(usize, usize)], norm: Norm) -> Result<Adoption<T>> {
    let grid = state.compiled.power.grid().ok_or(Error::MissingGrid)?.clone();
    let p = state.partition().ok_or_else(|| Error::invalid("split proposals need a partition run"))?;
    let candidates: Vec<(Partition, T)> = splits
        .iter()
        .map(|&(cell, dim)| {
            let split = p.split_cell(cell, dim, &grid)?;
            let score = state.split_score(&split, cell, norm);
            Ok((split, score))
        })
        .collect::<Result<_>>()?;
    let best = argmin_first(candidates.iter().map(|c| c.1)).expect("non-empty");
    let (cell, dim) = splits[best];
    let (split, score) = candidates.into_iter().nth(best).expect("index in range");

    let new_cell = split.cell_count() - 1;
    let lower = Atom::indicator(split.cell(cell).to_vec());
    let upper = Atom::indicator(split.cell(new_cell).to_vec());
    state.w.replace(cell, lower)?;
    state.w.push(upper)?;
    state.z = state.w.clone();

    let forms = &mut state.forms;
    forms.zw.push_col(vec![ExtendedValue::bottom(); new_cell])?;
    let mut row = vec![ExtendedValue::bottom(); new_cell + 1];
    row[new_cell] = ExtendedValue::zero();
    forms.zw.push_row(row)?;
    forms.ztw.push_col(vec![ExtendedValue::bottom(); new_cell])?;
    forms.ztw.push_row(vec![ExtendedValue::bottom(); new_cell + 1])?;
    for c in [cell, new_cell] {
        for other in 0..=new_cell {
            forms.ztw.set(c, other, ExtendedValue::bottom());
            forms.ztw.set(other, c, ExtendedValue::bottom());
        }
    }
    let power = &state.compiled.power;
    let reverse = state.compiled.reverse();
    for &s in split.cell(cell).iter().chain(split.cell(new_cell)) {
        let (ts, rs) = power.successors(s);
        let a = split.cell_of(s);
        for (&t, &r) in ts.iter().zip(rs) {
            let b = split.cell_of(t);
            forms.ztw.set(a, b, forms.ztw.get(a, b).oplus(ExtendedValue::finite(r)));
        }
        for &(src, r) in &reverse[s] {
            let b = split.cell_of(src);
            forms.ztw.set(b, a, forms.ztw.get(b, a).oplus(ExtendedValue::finite(r)));
        }
    }
    let hash = state.w.content_hash()?;
    forms.provenance.w = hash.clone();
    forms.provenance.z = hash;

    let mut alpha0 = state.alpha.clone();
    alpha0.push(alpha0[cell]);
    let (lo, hi) = {
        let b = split.boxes().expect("split partitions keep boxes");
        (b[cell][dim].hi(), b[new_cell][dim].lo())
    };
    debug_assert_eq!(lo, hi);
    state.structure = Structure::Partition(split);
    state.converge(Some(alpha0))?;
    Ok(Adoption {
        atom_kind: "indicator".into(),
        atom_desc: format!("split cell {cell} along {} at {lo}", axis_name(dim)),
        score,
        split_dim: Some(dim),
    })
}

fn adopt_atoms<T: Scalar>(
    state: &mut GreedyRunState<T>,
    atoms: &[&Atom<T>],
    norm: Norm,
    rule: AtomAdoption,
    lookahead: usize,
) -> Result<Adoption<T>> {
    let n = state.compiled.power.state_count();
    let grid = state.compiled.power.grid().cloned();
    let scores: Vec<(T, T)> = atoms
        .par_iter()
        .map(|a| {
            let col = a.tabulate(n, grid.as_deref())?;
            Ok((
                criterion_w(&state.u, &state.v, &col, norm)?,
                criterion_z(&state.tv, &state.u, &col, norm)?,
            ))
        })
        .collect::<Result<_>>()?;
    let (bw, bz) = match rule {
        AtomAdoption::Separate => (
            argmin_first(scores.iter().map(|s| s.0)).expect("non-empty"),
            argmin_first(scores.iter().map(|s| s.1)).expect("non-empty"),
        ),
        AtomAdoption::CoupledSum => {
            let b = argmin_first(scores.iter().map(|s| s.0 + s.1)).expect("non-empty");
            (b, b)
        }
        AtomAdoption::CoupledZ => {
            let b = argmin_first(scores.iter().map(|s| s.1)).expect("non-empty");
            (b, b)
        }
    };
    let (bw, bz) = if lookahead > 0 {
        let top = |key: &dyn Fn(&(T, T)) -> T| -> Vec<usize> {
            let mut idx: Vec<usize> = (0..scores.len()).collect();
            idx.sort_by(|&a, &b| key(&scores[a]).partial_cmp(&key(&scores[b])).expect("finite scores").then(a.cmp(&b)));
            idx.truncate(lookahead);
            idx
        };
        let pairs: Vec<(usize, usize)> = match rule {
            AtomAdoption::Separate => {
                let (tw, tz) = (top(&|s| s.0), top(&|s| s.1));
                tw.iter().flat_map(|&a| tz.iter().map(move |&b| (a, b))).collect()
            }
            AtomAdoption::CoupledSum => top(&|s| s.0 + s.1).into_iter().map(|a| (a, a)).collect(),
            AtomAdoption::CoupledZ => top(&|s| s.1).into_iter().map(|a| (a, a)).collect(),
        };
        let residuals: Vec<T> = pairs
            .par_iter()
            .map(|&(a, b)| {
                let mut trial = state.clone();
                add_atoms(&mut trial, Some(atoms[a].clone()), Some(atoms[b].clone()))?;
                Ok(norm.aggregate(trial.tv.iter().zip(trial.v.iter()).map(|(x, y)| (x.raw() - y.raw()).abs())))
            })
            .collect::<Result<_>>()?;
        pairs[argmin_first(residuals).expect("non-empty")]
    } else {
        (bw, bz)
    };
    let (w_atom, z_atom) = (atoms[bw].clone(), atoms[bz].clone());
    let desc = format!(
        "w: {}; z: {}",
        w_atom.describe(grid.as_deref()),
        z_atom.describe(grid.as_deref())
    );
    let kind = if w_atom.kind() == z_atom.kind() {
        w_atom.kind().to_string()
    } else {
        format!("{}+{}", w_atom.kind(), z_atom.kind())
    };
    add_atoms(state, Some(w_atom), Some(z_atom))?;
    Ok(Adoption {
        atom_kind: kind,
        atom_desc: desc,
        score: scores[bz].1,
        split_dim: None,
    })
}

/// Appends atoms to `W` and/or `Z` of a non-partition run and re-solves.
pub fn add_atoms<T: Scalar>(state: &mut GreedyRunState<T>, w_atom: Option<Atom<T>>, z_atom: Option<Atom<T>>) -> Result<()> {
    let Structure::General { tw } = &mut state.structure else {
        return Err(Error::invalid("partition runs grow by splits, not atoms"));
    };
    let power = &state.compiled.power;
    let forms = &mut state.forms;
    if let Some(a) = w_atom {
        state.w.push(a)?;
        let i = state.w.len() - 1;
        let col = state.w.column(i);
        let t = crate::reduced_vi::transition_column(power, col, i)?;
        forms
            .zw
            .push_col((0..state.z.len()).map(|j| crate::maxplus::maxplus_dot(state.z.column(j), col)).collect())?;
        forms
            .ztw
            .push_col((0..state.z.len()).map(|j| crate::maxplus::maxplus_dot(state.z.column(j), t.as_slice())).collect())?;
        tw.push(t);
    }
    if let Some(a) = z_atom {
        state.z.push(a)?;
        let row = state.z.column(state.z.len() - 1);
        forms
            .zw
            .push_row((0..state.w.len()).map(|i| crate::maxplus::maxplus_dot(row, state.w.column(i))).collect())?;
        forms
            .ztw
            .push_row(tw.iter().map(|t| crate::maxplus::maxplus_dot(row, t.as_slice())).collect())?;
    }
    forms.provenance.w = state.w.content_hash()?;
    forms.provenance.z = state.z.content_hash()?;
    let alpha0 = residuate(&state.w, &state.v).ok();
    state.converge(alpha0)
}

/// A linear parametrization `θ ↦ z_θ` of an atom, used by [`mm_refine_atom`].
pub trait AtomParametrization<T: Scalar>: Sync {
    fn initial(&self) -> Vec<T>;
    /// `z_θ(s)` for every state.
    fn values(&self, theta: &[T]) -> Vec<T>;
    /// `∂z_θ(s)/∂θ`.
    fn gradient(&self, theta: &[T], s: usize) -> Vec<T>;
    /// Projection onto the admissible parameter set.
    fn project(&self, _theta: &mut [T]) {}
    fn atom(&self, theta: &[T]) -> Atom<T>;
}

/// Free values at every state.
pub struct TabulatedParam<T> {
    pub init: Vec<T>,
}

impl<T: Scalar> AtomParametrization<T> for TabulatedParam<T> {
    fn initial(&self) -> Vec<T> {
        self.init.clone()
    }

    fn values(&self, theta: &[T]) -> Vec<T> {
        theta.to_vec()
    }

    fn gradient(&self, theta: &[T], s: usize) -> Vec<T> {
        let mut g = vec![T::zero(); theta.len()];
        g[s] = T::one();
        g
    }

    fn atom(&self, theta: &[T]) -> Atom<T> {
        Atom::Tabulated {
            values: ValueVector::from_finite(theta).expect("parameters stay finite"),
        }
    }
}

/// Bregman atom `slopeᵀx - (λ/2)‖x‖²` with the slope as parameter.
pub struct BregmanSlopeParam<T> {
    pub grid: Arc<Grid>,
    pub lambda: T,
    pub init: Vec<T>,
}

impl<T: Scalar> AtomParametrization<T> for BregmanSlopeParam<T> {
    fn initial(&self) -> Vec<T> {
        self.init.clone()
    }

    fn values(&self, theta: &[T]) -> Vec<T> {
        let reference = crate::dictionaries::ConvexReference::Quadratic { lambda: self.lambda };
        (0..self.grid.state_count())
            .map(|s| {
                let x = self.grid.coords::<T>(s);
                theta.iter().zip(&x).map(|(&a, &b)| a * b).sum::<T>() - reference.eval(&x)
            })
            .collect()
    }

    fn gradient(&self, _theta: &[T], s: usize) -> Vec<T> {
        self.grid.coords(s)
    }

    fn atom(&self, theta: &[T]) -> Atom<T> {
        Atom::Bregman {
            slope: theta.to_vec(),
            reference: crate::dictionaries::ConvexReference::Quadratic { lambda: self.lambda },
        }
    }
}

/// Distance atom `-c·d(s, center)` with a fixed center and the scale `c` as
/// parameter. Empty `dims` means every dimension.
pub struct DistanceScaleParam<T> {
    pub grid: Arc<Grid>,
    pub center: usize,
    pub dims: Vec<usize>,
    pub metric: Metric,
    pub init: T,
}

impl<T: Scalar> DistanceScaleParam<T> {
    fn distance(&self, s: usize) -> T {
        self.grid.distance(s, self.center, self.metric, &self.dims)
    }
}

impl<T: Scalar> AtomParametrization<T> for DistanceScaleParam<T> {
    fn initial(&self) -> Vec<T> {
        vec![self.init]
    }

    fn values(&self, theta: &[T]) -> Vec<T> {
        (0..self.grid.state_count()).map(|s| -theta[0] * self.distance(s)).collect()
    }

    fn gradient(&self, _theta: &[T], s: usize) -> Vec<T> {
        vec![-self.distance(s)]
    }

    fn project(&self, theta: &mut [T]) {
        theta[0] = theta[0].max(T::of(1e-9));
    }

    fn atom(&self, theta: &[T]) -> Atom<T> {
        let dims = if self.dims.is_empty() {
            (0..self.grid.dimension()).collect()
        } else {
            self.dims.clone()
        };
        Atom::Distance {
            center: self.center,
            scale: theta[0],
            dims,
            metric: self.metric,
        }
    }
}

/// Result of [`mm_refine_atom`].
#[derive(Clone, Debug)]
pub struct MmOutcome<T> {
    pub atom: Atom<T>,
    pub theta: Vec<T>,
    /// Criterion before the first round and after each completed round.
    pub objective: Vec<T>,
}

const MM_INNER_STEPS: usize = 50;

/// Majorization-minimization on the `Z` criterion of a parametrized atom.
///
/// Each round freezes the branch choice `η*(s) ∈ {0,1}` at the current atom,
/// giving a convex upper bound in `θ`, and decreases it by normalized projected
/// subgradient steps of size `σ/√t`. The best parameters seen are kept, so the
/// criterion never increases; the loop stops at the first round without progress.
pub fn mm_refine_atom<T: Scalar>(
    state: &GreedyRunState<T>,
    param: &dyn AtomParametrization<T>,
    norm: Norm,
    max_rounds: usize,
) -> Result<MmOutcome<T>> {
    let tv = &state.tv;
    let u = &state.u;
    let n = tv.len();
    let criterion = |theta: &[T]| -> Result<T> {
        let z: Vec<ExtendedValue<T>> = param.values(theta).into_iter().map(ExtendedValue::finite).collect();
        criterion_z(tv, u, &z, norm)
    };
    let mut theta = param.initial();
    param.project(&mut theta);
    let mut best = criterion(&theta)?;
    let mut objective = vec![best];
    let sigma = T::of(0.1) * theta.iter().fold(T::one(), |m, x| m.max(x.abs()));
    for _ in 0..max_rounds {
        if best <= T::zero() {
            break;
        }
        let z = param.values(&theta);
        let shift_at = argmax_first((0..n).map(|s| tv[s].raw() + z[s])).expect("non-empty");
        let shift = tv[shift_at].raw() + z[shift_at];
        // η*(s) = 1 keeps the U - TV branch; η*(s) = 0 keeps the atom branch.
        let keep_atom: Vec<bool> = (0..n)
            .map(|s| {
                let a = u[s].raw() - tv[s].raw();
                let b = -tv[s].raw() - z[s] + shift;
                b < a
            })
            .collect();
        let round_start = best;
        let mut current = theta.clone();
        for t in 1..=MM_INNER_STEPS {
            let z = param.values(&current);
            let shift_at = argmax_first((0..n).map(|s| tv[s].raw() + z[s])).expect("non-empty");
            let shift = tv[shift_at].raw() + z[shift_at];
            let term = |s: usize| {
                if keep_atom[s] {
                    -tv[s].raw() - z[s] + shift
                } else {
                    u[s].raw() - tv[s].raw()
                }
            };
            let active: Vec<usize> = match norm {
                Norm::L1 => (0..n).filter(|&s| keep_atom[s]).collect(),
                Norm::LInf => {
                    let s = argmax_first((0..n).map(term)).expect("non-empty");
                    if keep_atom[s] {
                        vec![s]
                    } else {
                        vec![]
                    }
                }
            };
            if active.is_empty() {
                break;
            }
            let d_shift = param.gradient(&current, shift_at);
            let mut g = vec![T::zero(); current.len()];
            for &s in &active {
                for (gi, (ds, dz)) in g.iter_mut().zip(d_shift.iter().zip(param.gradient(&current, s))) {
                    *gi = *gi + *ds - dz;
                }
            }
            let norm_g = g.iter().map(|x| *x * *x).sum::<T>().sqrt();
            if !(norm_g > T::zero()) {
                break;
            }
            let step = sigma / T::of(t as f64).sqrt();
            for (c, gi) in current.iter_mut().zip(&g) {
                *c = *c - step * *gi / norm_g;
            }
            param.project(&mut current);
            let value = criterion(&current)?;
            if value < best {
                best = value;
                theta = current.clone();
            }
        }
        objective.push(best);
        if !(best < round_start) {
            break;
        }
    }
    Ok(MmOutcome {
        atom: param.atom(&theta),
        theta,
        objective,
    })
}

/// One row of a greedy trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub n: usize,
    pub err_l1: Option<f64>,
    pub err_linf: Option<f64>,
    pub atom_kind: String,
    pub atom_desc: String,
    pub rho: usize,
    pub norm: Norm,
}

pub fn write_trace_csv<W: Write>(rows: &[TraceRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    if rows.is_empty() {
        w.write_record(["n", "err_l1", "err_linf", "atom_kind", "atom_desc", "rho", "norm"])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace_csv<R: Read>(input: R) -> Result<Vec<TraceRow>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

/// Where a pursuit starts.
#[derive(Clone, Debug)]
pub enum PursuitStart<T> {
    Partition(Partition),
    Dictionaries { w: Dictionary<T>, z: Dictionary<T> },
}

impl<T: Scalar> PursuitStart<T> {
    /// The whole grid as a single dyadic cell.
    pub fn single_cell(grid: &Grid) -> Self {
        PursuitStart::Partition(Partition::dyadic_root(grid))
    }

    /// `W = Z = {0}`, the constant zero atom.
    pub fn zero_atom(state_count: usize, grid: Option<Arc<Grid>>) -> Result<Self> {
        let zero = Atom::Tabulated {
            values: ValueVector::constant(state_count, T::zero()),
        };
        let d = Dictionary::new(vec![zero], state_count, grid)?;
        Ok(PursuitStart::Dictionaries { w: d.clone(), z: d })
    }
}

/// Settings for [`run_matching_pursuit`].
#[derive(Clone, Debug)]
pub struct PursuitConfig<T> {
    /// Stop once `W` holds this many atoms.
    pub budget: usize,
    pub norm: Norm,
    pub tol: T,
    pub max_iter: usize,
    pub pool: PoolConfig,
    /// Optimal values to measure the trace errors against.
    pub reference: Option<ValueVector<T>>,
    /// MM rounds applied to the scale of each adopted `Z` distance atom (0 disables).
    pub mm_rounds: usize,
}

impl<T: Scalar> PursuitConfig<T> {
    pub fn new(budget: usize, norm: Norm, tol: T) -> Self {
        Self {
            budget,
            norm,
            tol,
            max_iter: 10_000_000,
            pool: PoolConfig::default(),
            reference: None,
            mm_rounds: 0,
        }
    }
}

/// Final state, trace and split dimensions of a pursuit.
pub struct PursuitOutcome<T> {
    pub state: GreedyRunState<T>,
    pub trace: Vec<TraceRow>,
    pub split_dims: Vec<usize>,
}

fn trace_row<T: Scalar>(state: &GreedyRunState<T>, cfg: &PursuitConfig<T>, kind: &str, desc: String) -> Result<TraceRow> {
    let (err_l1, err_linf) = match &cfg.reference {
        Some(r) => {
            let (a, b) = crate::benchmarks::error_metrics(&state.v, r)?;
            (Some(a.as_f64()), Some(b.as_f64()))
        }
        None => (None, None),
    };
    Ok(TraceRow {
        n: state.atom_count(),
        err_l1,
        err_linf,
        atom_kind: kind.to_string(),
        atom_desc: desc,
        rho: state.compiled.rho,
        norm: cfg.norm,
    })
}

/// Greedy steps until the atom budget is reached. The trace has one row for
/// the starting dictionaries and one per adopted proposal.
pub fn run_matching_pursuit<T: Scalar>(
    compiled: Arc<CompiledMdp<T>>,
    start: PursuitStart<T>,
    cfg: &PursuitConfig<T>,
) -> Result<PursuitOutcome<T>> {
    if cfg.budget == 0 {
        return Err(Error::invalid("atom budget must be positive"));
    }
    let mut state = match start {
        PursuitStart::Partition(p) => GreedyRunState::from_partition(compiled, p, cfg.tol, cfg.max_iter)?,
        PursuitStart::Dictionaries { w, z } => GreedyRunState::from_dictionaries(compiled, w, z, cfg.tol, cfg.max_iter)?,
    };
    let mut trace = vec![trace_row(&state, cfg, "initial", format!("{} atoms", state.atom_count()))?];
    let mut split_dims = Vec::new();
    while state.atom_count() < cfg.budget {
        let adoption = if state.partition().is_some() {
            let pool = propose_partition_split(&state)?;
            greedy_step(&mut state, &pool, cfg.norm)?
        } else {
            let pool = propose_distance_atoms(&state, &cfg.pool)?;
            let adoption = greedy_step_with(&mut state, &pool, cfg.norm, cfg.pool.adoption, cfg.pool.lookahead)?;
            if cfg.mm_rounds > 0 {
                refine_last_z(&mut state, cfg)?;
            }
            adoption
        };
        split_dims.extend(adoption.split_dim);
        trace.push(trace_row(&state, cfg, &adoption.atom_kind, adoption.atom_desc)?);
    }
    Ok(PursuitOutcome {
        state,
        trace,
        split_dims,
    })
}

fn refine_last_z<T: Scalar>(state: &mut GreedyRunState<T>, cfg: &PursuitConfig<T>) -> Result<()> {
    let last = state.z.len() - 1;
    let Atom::Distance {
        center,
        scale,
        dims,
        metric,
    } = state.z.atom(last).clone()
    else {
        return Ok(());
    };
    let grid = state.compiled.power.grid().ok_or(Error::MissingGrid)?.clone();
    let param = DistanceScaleParam {
        grid,
        center,
        dims,
        metric,
        init: scale,
    };
    let out = mm_refine_atom(state, &param, cfg.norm, cfg.mm_rounds)?;
    if out.theta[0] != scale {
        let col = out.atom.tabulate(state.z.state_count(), state.z.grid().map(|g| g.as_ref()))?;
        let Structure::General { tw } = &state.structure else {
            return Ok(());
        };
        let zw: Vec<_> = (0..state.w.len()).map(|i| crate::maxplus::maxplus_dot(&col, state.w.column(i))).collect();
        let ztw: Vec<_> = tw.iter().map(|t| crate::maxplus::maxplus_dot(&col, t.as_slice())).collect();
        state.z.replace(last, out.atom)?;
        for (i, (a, b)) in zw.into_iter().zip(ztw).enumerate() {
            state.forms.zw.set(last, i, a);
            state.forms.ztw.set(last, i, b);
        }
        state.forms.provenance.z = state.z.content_hash()?;
        let alpha0 = Some(state.alpha.clone());
        state.converge(alpha0)?;
    }
    Ok(())
}

/// Values of the reduced fixed point broadcast on states, for callers that
/// only need `V = Wα`.
pub fn current_values<T: Scalar>(state: &GreedyRunState<T>) -> Result<ValueVector<T>> {
    eval_dictionary(&state.w, &state.alpha)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vv(x: &[f64]) -> ValueVector<f64> {
        ValueVector::from_finite(x).unwrap()
    }

    #[test]
    fn trivial_choices_score_zero() {
        let u = vv(&[3.0, 2.0, 5.0]);
        let v = vv(&[1.0, 2.0, 0.0]);
        let tv = vv(&[2.0, 1.0, 4.0]);
        for norm in [Norm::L1, Norm::LInf] {
            assert_eq!(criterion_w(&u, &v, u.as_slice(), norm).unwrap(), 0.0);
            let neg = tv.negate().unwrap();
            assert_eq!(criterion_z(&tv, &u, neg.as_slice(), norm).unwrap(), 0.0);
            assert_eq!(criterion_w(&u, &u, v.as_slice(), norm).unwrap(), 0.0);
            assert_eq!(criterion_z(&u, &u, v.as_slice(), norm).unwrap(), 0.0);
        }
    }

    #[test]
    fn constant_z_example() {
        let u = vv(&[3.0, 2.0, 5.0]);
        let tv = vv(&[2.0, 1.0, 4.0]);
        let zero = ValueVector::constant(3, 0.0);
        let expected = (0..3)
            .map(|s| (u[s].raw() - tv[s].raw()).min(4.0 - tv[s].raw()))
            .fold(0.0, f64::max);
        assert_eq!(criterion_z(&tv, &u, zero.as_slice(), Norm::LInf).unwrap(), expected);
    }

    #[test]
    fn norm_parsing() {
        assert_eq!("l1".parse::<Norm>().unwrap(), Norm::L1);
        assert_eq!("linf".parse::<Norm>().unwrap(), Norm::LInf);
        assert!("l2".parse::<Norm>().is_err());
    }

    #[test]
    fn coarse_centers_respect_budget() {
        let g = Grid::line(362).unwrap();
        let c = coarse_centers(&g, 170);
        assert!(c.len() <= 170);
        assert_eq!(c[0], 0);
        assert_eq!(*c.last().unwrap(), 361);
        let g2 = Grid::square(45).unwrap();
        assert!(coarse_centers(&g2, 170).len() <= 170);
    }

    #[test]
    fn trace_csv_round_trip() {
        let rows = vec![TraceRow {
            n: 1,
            err_l1: Some(0.5),
            err_linf: None,
            atom_kind: "indicator".into(),
            atom_desc: "split cell 0 along x1, at 0.5".into(),
            rho: 4,
            norm: Norm::L1,
        }];
        let mut buf = Vec::new();
        write_trace_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("n,err_l1,err_linf,atom_kind,atom_desc,rho,norm\n"));
        assert_eq!(read_trace_csv(buf.as_slice()).unwrap(), rows);
    }
}

//! Atom families, partitions of the state space, covers, and the cluster MDP
//! induced by a partition.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Metric};
use crate::maxplus::{Dictionary, ExtendedValue, ValueVector};
use crate::mdp::DeterministicMdp;
use crate::scalar::Scalar;

/// Convex reference function `h` of a Bregman atom.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", bound = "T: Scalar")]
pub enum ConvexReference<T> {
    /// `h(x) = (λ/2) ‖x‖²`.
    Quadratic { lambda: T },
}

impl<T: Scalar> ConvexReference<T> {
    pub fn eval(&self, x: &[T]) -> T {
        match *self {
            ConvexReference::Quadratic { lambda } => {
                lambda * T::of(0.5) * x.iter().map(|&xi| xi * xi).sum::<T>()
            }
        }
    }
}

/// One dictionary element `w: S -> R ∪ {-inf}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", bound = "T: Scalar")]
pub enum Atom<T> {
    /// `0` on the cell, `-inf` elsewhere.
    Indicator { cell: Vec<usize> },
    /// `-c · d(s, center)` with the distance restricted to `dims`.
    Distance {
        center: usize,
        scale: T,
        dims: Vec<usize>,
        metric: Metric,
    },
    /// `-h(x_s) + slopeᵀ x_s`.
    Bregman {
        slope: Vec<T>,
        reference: ConvexReference<T>,
    },
    Tabulated { values: ValueVector<T> },
}

impl<T: Scalar> Atom<T> {
    pub fn indicator(mut cell: Vec<usize>) -> Self {
        cell.sort_unstable();
        cell.dedup();
        Atom::Indicator { cell }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Atom::Indicator { .. } => "indicator",
            Atom::Distance { .. } => "distance",
            Atom::Bregman { .. } => "bregman",
            Atom::Tabulated { .. } => "tabulated",
        }
    }

    fn validate(&self, state_count: usize, grid: Option<&Grid>) -> Result<()> {
        match self {
            Atom::Indicator { cell } => {
                if cell.is_empty() {
                    return Err(Error::invalid("indicator cell is empty"));
                }
                if let Some(&s) = cell.iter().find(|&&s| s >= state_count) {
                    return Err(Error::invalid(format!("indicator cell references state {s}")));
                }
            }
            Atom::Distance {
                center, scale, dims, ..
            } => {
                let g = grid.ok_or(Error::MissingGrid)?;
                if *center >= state_count {
                    return Err(Error::invalid(format!("distance center {center} out of range")));
                }
                if !(*scale > T::zero()) || !scale.is_finite() {
                    return Err(Error::invalid("distance scale must be positive and finite"));
                }
                if dims.is_empty() || dims.iter().any(|&d| d >= g.dimension()) {
                    return Err(Error::invalid("distance dims must be a non-empty subset of the grid dimensions"));
                }
            }
            Atom::Bregman { slope, reference } => {
                let g = grid.ok_or(Error::MissingGrid)?;
                Error::check_len("bregman slope", g.dimension(), slope.len())?;
                let ConvexReference::Quadratic { lambda } = reference;
                if !(*lambda >= T::zero()) || slope.iter().any(|x| !x.is_finite()) {
                    return Err(Error::invalid("bregman atom needs finite slope and lambda >= 0"));
                }
            }
            Atom::Tabulated { values } => Error::check_len("tabulated atom", state_count, values.len())?,
        }
        Ok(())
    }

    /// Value of the atom at state `s`.
    pub fn evaluate(&self, s: usize, grid: Option<&Grid>) -> Result<ExtendedValue<T>> {
        Ok(match self {
            Atom::Indicator { cell } => {
                if cell.binary_search(&s).is_ok() {
                    ExtendedValue::zero()
                } else {
                    ExtendedValue::bottom()
                }
            }
            Atom::Distance {
                center,
                scale,
                dims,
                metric,
            } => {
                let g = grid.ok_or(Error::MissingGrid)?;
                ExtendedValue::finite(-*scale * g.distance::<T>(s, *center, *metric, dims))
            }
            Atom::Bregman { slope, reference } => {
                let g = grid.ok_or(Error::MissingGrid)?;
                let x = g.coords::<T>(s);
                let lin: T = slope.iter().zip(&x).map(|(&a, &b)| a * b).sum();
                ExtendedValue::finite(lin - reference.eval(&x))
            }
            Atom::Tabulated { values } => values[s],
        })
    }

    /// Values on states `0..state_count`.
    pub fn tabulate(&self, state_count: usize, grid: Option<&Grid>) -> Result<Vec<ExtendedValue<T>>> {
        self.validate(state_count, grid)?;
        match self {
            Atom::Indicator { cell } => {
                let mut col = vec![ExtendedValue::bottom(); state_count];
                for &s in cell {
                    col[s] = ExtendedValue::zero();
                }
                Ok(col)
            }
            Atom::Tabulated { values } => Ok(values.as_slice().to_vec()),
            _ => (0..state_count).map(|s| self.evaluate(s, grid)).collect(),
        }
    }

    /// Short human-readable description for traces.
    pub fn describe(&self, grid: Option<&Grid>) -> String {
        match self {
            Atom::Indicator { cell } => format!("cell of {} states", cell.len()),
            Atom::Distance {
                center,
                scale,
                dims,
                metric,
            } => {
                let at = grid
                    .map(|g| {
                        let c: Vec<String> = g.coords::<f64>(*center).iter().map(|x| format!("{x:.4}")).collect();
                        c.join(" ")
                    })
                    .unwrap_or_else(|| center.to_string());
                let axes: Vec<String> = dims.iter().map(|d| format!("x{}", d + 1)).collect();
                format!("center ({at}) c={scale} axes {} {metric:?}", axes.join("+"))
            }
            Atom::Bregman { slope, .. } => format!("slope {slope:?}"),
            Atom::Tabulated { .. } => "tabulated".to_string(),
        }
    }
}

/// A dyadic interval `[j/2^k, (j+1)/2^k)`, closed on the right when it ends at 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DyadicInterval {
    pub level: u32,
    pub index: u64,
}

impl DyadicInterval {
    pub const UNIT: Self = Self { level: 0, index: 0 };

    pub fn lo(&self) -> f64 {
        self.index as f64 / (1u64 << self.level) as f64
    }

    pub fn hi(&self) -> f64 {
        (self.index + 1) as f64 / (1u64 << self.level) as f64
    }

    pub fn midpoint(&self) -> f64 {
        (self.lo() + self.hi()) / 2.0
    }

    pub fn contains(&self, x: f64) -> bool {
        let ends_at_one = self.index + 1 == 1u64 << self.level;
        x >= self.lo() && (x < self.hi() || (ends_at_one && x <= 1.0))
    }

    pub fn halves(&self) -> (Self, Self) {
        let level = self.level + 1;
        (
            Self {
                level,
                index: 2 * self.index,
            },
            Self {
                level,
                index: 2 * self.index + 1,
            },
        )
    }
}

/// A partition of the state ids into disjoint non-empty cells, optionally with
/// one dyadic box per cell describing its membership exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PartitionRecord", into = "PartitionRecord")]
pub struct Partition {
    cell_of: Vec<usize>,
    cells: Vec<Vec<usize>>,
    boxes: Option<Vec<Vec<DyadicInterval>>>,
}

#[derive(Serialize, Deserialize)]
struct PartitionRecord {
    cell_of: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    boxes: Option<Vec<Vec<DyadicInterval>>>,
}

impl TryFrom<PartitionRecord> for Partition {
    type Error = Error;

    fn try_from(r: PartitionRecord) -> Result<Self> {
        let mut p = Partition::from_assignment(r.cell_of)?;
        if let Some(b) = r.boxes {
            Error::check_len("partition boxes", p.cells.len(), b.len())?;
            p.boxes = Some(b);
        }
        Ok(p)
    }
}

impl From<Partition> for PartitionRecord {
    fn from(p: Partition) -> Self {
        Self {
            cell_of: p.cell_of,
            boxes: p.boxes,
        }
    }
}

impl Partition {
    /// Cells are numbered `0..k` and each must be non-empty.
    pub fn from_assignment(cell_of: Vec<usize>) -> Result<Self> {
        if cell_of.is_empty() {
            return Err(Error::invalid("partition of an empty state space"));
        }
        let k = cell_of.iter().max().copied().unwrap_or(0) + 1;
        let mut cells = vec![Vec::new(); k];
        for (s, &c) in cell_of.iter().enumerate() {
            cells[c].push(s);
        }
        if let Some(c) = cells.iter().position(Vec::is_empty) {
            return Err(Error::invalid(format!("partition cell {c} is empty")));
        }
        Ok(Self {
            cell_of,
            cells,
            boxes: None,
        })
    }

    pub fn singletons(n: usize) -> Self {
        Self::from_assignment((0..n).collect()).expect("n > 0")
    }

    pub fn single_cell(n: usize) -> Self {
        Self::from_assignment(vec![0; n]).expect("n > 0")
    }

    /// The whole grid as one dyadic box.
    pub fn dyadic_root(grid: &Grid) -> Self {
        let mut p = Self::single_cell(grid.state_count());
        p.boxes = Some(vec![vec![DyadicInterval::UNIT; grid.dimension()]]);
        p
    }

    /// Equal-width boxes, `per_dim[d]` of them along dimension `d`. Boxes holding
    /// no grid node are dropped. When every count is a power of two the boxes are
    /// dyadic and recorded, so the partition can be refined by [`Partition::split_cell`].
    pub fn regular(grid: &Grid, per_dim: &[usize]) -> Result<Self> {
        Error::check_len("cells per dimension", grid.dimension(), per_dim.len())?;
        if per_dim.iter().any(|&m| m == 0) {
            return Err(Error::invalid("need at least one cell per dimension"));
        }
        let box_of = |s: usize| -> Vec<usize> {
            per_dim
                .iter()
                .enumerate()
                .map(|(d, &m)| {
                    let x: f64 = grid.coord(s, d);
                    ((x * m as f64).floor() as usize).min(m - 1)
                })
                .collect()
        };
        let mut ids = std::collections::BTreeMap::new();
        let mut raw = Vec::with_capacity(grid.state_count());
        for s in 0..grid.state_count() {
            let b = box_of(s);
            // order cells by box index, first dimension fastest
            let key: Vec<usize> = b.iter().rev().copied().collect();
            raw.push(key.clone());
            ids.entry(key).or_insert(b);
        }
        let order: std::collections::BTreeMap<Vec<usize>, usize> =
            ids.keys().enumerate().map(|(i, k)| (k.clone(), i)).collect();
        let cell_of = raw.iter().map(|k| order[k]).collect();
        let mut p = Self::from_assignment(cell_of)?;
        if per_dim.iter().all(|m| m.is_power_of_two()) {
            p.boxes = Some(
                ids.values()
                    .map(|b| {
                        b.iter()
                            .zip(per_dim)
                            .map(|(&j, &m)| DyadicInterval {
                                level: m.trailing_zeros(),
                                index: j as u64,
                            })
                            .collect()
                    })
                    .collect(),
            );
        }
        Ok(p)
    }

    pub fn state_count(&self) -> usize {
        self.cell_of.len()
    }

    pub fn cell_count(&self) -> usize {
        self.cells.len()
    }

    pub fn cell_of(&self, s: usize) -> usize {
        self.cell_of[s]
    }

    pub fn assignment(&self) -> &[usize] {
        &self.cell_of
    }

    pub fn cell(&self, c: usize) -> &[usize] {
        &self.cells[c]
    }

    pub fn cells(&self) -> &[Vec<usize>] {
        &self.cells
    }

    pub fn boxes(&self) -> Option<&[Vec<DyadicInterval>]> {
        self.boxes.as_deref()
    }

    /// Whether every recorded box contains exactly the states of its cell.
    pub fn boxes_match(&self, grid: &Grid) -> bool {
        let Some(boxes) = &self.boxes else { return true };
        (0..self.state_count()).all(|s| {
            boxes.iter().enumerate().all(|(c, b)| {
                let inside = b.iter().enumerate().all(|(d, iv)| iv.contains(grid.coord(s, d)));
                inside == (self.cell_of[s] == c)
            })
        })
    }

    /// Number of distinct grid indices the cell spans along `dim`.
    pub fn cell_extent(&self, cell: usize, dim: usize, grid: &Grid) -> usize {
        let mut idx: Vec<usize> = self.cells[cell].iter().map(|&s| grid.index(s, dim)).collect();
        idx.sort_unstable();
        idx.dedup();
        idx.len()
    }

    /// Splits a cell at the dyadic midpoint of its box along `dim`. A half holding
    /// no node is dropped and the other half bisected again, so any cell spanning
    /// two or more grid indices along `dim` splits. The lower half keeps the cell
    /// id; the upper half becomes the last cell.
    pub fn split_cell(&self, cell: usize, dim: usize, grid: &Grid) -> Result<Self> {
        let boxes = self
            .boxes
            .as_ref()
            .ok_or_else(|| Error::invalid("partition has no box description to split"))?;
        if dim >= grid.dimension() {
            return Err(Error::invalid(format!("no dimension {dim}")));
        }
        if self.cell_extent(cell, dim, grid) < 2 {
            return Err(Error::Unsplittable { cell });
        }
        let mut interval = boxes[cell][dim];
        let (lo, hi, lower, upper) = loop {
            let (lo, hi) = interval.halves();
            let (lower, upper): (Vec<usize>, Vec<usize>) =
                self.cells[cell].iter().partition(|&&s| lo.contains(grid.coord(s, dim)));
            if lower.is_empty() {
                interval = hi;
            } else if upper.is_empty() {
                interval = lo;
            } else {
                break (lo, hi, lower, upper);
            }
        };
        let new_id = self.cells.len();
        let mut p = self.clone();
        for &s in &upper {
            p.cell_of[s] = new_id;
        }
        p.cells[cell] = lower;
        p.cells.push(upper);
        let boxes = p.boxes.as_mut().expect("cloned with boxes");
        let mut upper_box = boxes[cell].clone();
        boxes[cell][dim] = lo;
        upper_box[dim] = hi;
        boxes.push(upper_box);
        Ok(p)
    }
}

/// Centers of a cover together with the achieved covering radius.
#[derive(Clone, Debug, PartialEq)]
pub struct CoverResult<T> {
    pub centers: Vec<usize>,
    pub radius: T,
}

/// Greedy farthest-point cover with `n` centers, seeded at state 0.
/// Its radius is at most twice the optimal `n`-cover radius.
pub fn k_center_cover<T: Scalar>(grid: &Grid, n: usize, metric: Metric) -> Result<CoverResult<T>> {
    let size = grid.state_count();
    if n == 0 || n > size {
        return Err(Error::invalid(format!("cover size must lie in 1..={size}")));
    }
    let mut centers = vec![0usize];
    let mut nearest: Vec<T> = (0..size).map(|s| grid.distance(s, 0, metric, &[])).collect();
    while centers.len() < n {
        let far = crate::maxplus::argmax_first(nearest.iter().copied()).expect("non-empty grid");
        centers.push(far);
        for (s, d) in nearest.iter_mut().enumerate() {
            *d = d.min(grid.distance(s, far, metric, &[]));
        }
    }
    let radius = nearest.into_iter().fold(T::zero(), T::max);
    Ok(CoverResult { centers, radius })
}

/// Assigns every state to its nearest center; ties go to the earlier center.
pub fn voronoi_partition<T: Scalar>(cover: &CoverResult<T>, grid: &Grid, metric: Metric) -> Result<Partition> {
    if cover.centers.is_empty() {
        return Err(Error::invalid("cover has no centers"));
    }
    let cell_of = (0..grid.state_count())
        .map(|s| {
            crate::maxplus::argmin_first(
                cover
                    .centers
                    .iter()
                    .map(|&c| grid.distance::<T>(s, c, metric, &[])),
            )
            .expect("non-empty centers")
        })
        .collect();
    Partition::from_assignment(cell_of)
}

/// One indicator atom per cell.
pub fn make_partition_dictionary<T: Scalar>(p: &Partition, grid: Option<Arc<Grid>>) -> Result<Dictionary<T>> {
    let atoms = p.cells().iter().map(|c| Atom::Indicator { cell: c.clone() }).collect();
    Dictionary::new(atoms, p.state_count(), grid)
}

/// One distance atom `-c·d(s, center)` per center; empty `dims` means all dimensions.
pub fn make_distance_dictionary<T: Scalar>(
    centers: &[usize],
    scale: T,
    dims: &[usize],
    metric: Metric,
    grid: &Arc<Grid>,
) -> Result<Dictionary<T>> {
    let dims: Vec<usize> = if dims.is_empty() {
        (0..grid.dimension()).collect()
    } else {
        dims.to_vec()
    };
    let atoms = centers
        .iter()
        .map(|&center| Atom::Distance {
            center,
            scale,
            dims: dims.clone(),
            metric,
        })
        .collect();
    Dictionary::new(atoms, grid.state_count(), Some(grid.clone()))
}

/// One Bregman atom `-(λ/2)‖x‖² + slopeᵀx` per slope.
pub fn make_bregman_dictionary<T: Scalar>(slopes: &[Vec<T>], lambda: T, grid: &Arc<Grid>) -> Result<Dictionary<T>> {
    let atoms = slopes
        .iter()
        .map(|slope| Atom::Bregman {
            slope: slope.clone(),
            reference: ConvexReference::Quadratic { lambda },
        })
        .collect();
    Dictionary::new(atoms, grid.state_count(), Some(grid.clone()))
}

/// Evenly spaced centers, `per_dim[d]` along dimension `d` (a single center sits mid-axis).
pub fn regular_centers(grid: &Grid, per_dim: &[usize]) -> Result<Vec<usize>> {
    Error::check_len("centers per dimension", grid.dimension(), per_dim.len())?;
    let axes: Vec<Vec<usize>> = per_dim
        .iter()
        .zip(grid.sizes())
        .map(|(&m, &n)| {
            if m == 0 || m > n {
                return Err(Error::invalid(format!("cannot place {m} centers on {n} nodes")));
            }
            Ok(if m == 1 {
                vec![(n - 1) / 2]
            } else {
                (0..m)
                    .map(|i| ((i * (n - 1)) as f64 / (m - 1) as f64).round() as usize)
                    .collect()
            })
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    let mut idx = vec![0usize; axes.len()];
    loop {
        let coords: Vec<usize> = idx.iter().zip(&axes).map(|(&i, a)| a[i]).collect();
        out.push(grid.state_of(&coords));
        let mut d = 0;
        loop {
            if d == axes.len() {
                return Ok(out);
            }
            idx[d] += 1;
            if idx[d] < axes[d].len() {
                break;
            }
            idx[d] = 0;
            d += 1;
        }
    }
}

/// The cluster MDP with rewards `R(w,w') = max_{s∈A(w)} max_{s'∈A(w')} r̄(s,s')`.
pub fn reduced_mdp_from_partition<T: Scalar>(mdp: &DeterministicMdp<T>, p: &Partition) -> Result<DeterministicMdp<T>> {
    Error::check_len("partition state count", mdp.state_count(), p.state_count())?;
    DeterministicMdp::new(
        p.cell_count(),
        mdp.gamma(),
        mdp.edges().map(|(s, t, r)| (p.cell_of(s), p.cell_of(t), r)),
    )
}

/// Largest `|V(s) - V(s')| / d(s,s')^p` over grid-adjacent pairs.
pub fn lipschitz_estimate<T: Scalar>(v: &ValueVector<T>, grid: &Grid, metric: Metric, order: T) -> Result<T> {
    Error::check_len("value vector", grid.state_count(), v.len())?;
    Ok(grid
        .adjacent_pairs()
        .filter_map(|(a, b, _)| {
            let (x, y) = (v[a].get()?, v[b].get()?);
            let d: T = grid.distance(a, b, metric, &[]);
            Some((x - y).abs() / d.powf(order))
        })
        .fold(T::zero(), T::max))
}

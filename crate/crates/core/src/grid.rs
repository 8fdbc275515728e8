//! Regular grids on `[0,1]^d` carrying the coordinates of each state.
//!
//! State ids are laid out with the first dimension varying fastest.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    L1,
    LInf,
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(Metric::L1),
            "linf" => Ok(Metric::LInf),
            other => Err(Error::invalid(format!("unknown metric `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "GridSizes", into = "GridSizes")]
pub struct Grid {
    sizes: Vec<usize>,
    strides: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct GridSizes {
    sizes: Vec<usize>,
}

impl TryFrom<GridSizes> for Grid {
    type Error = Error;

    fn try_from(g: GridSizes) -> Result<Self> {
        Grid::new(g.sizes)
    }
}

impl From<Grid> for GridSizes {
    fn from(g: Grid) -> Self {
        GridSizes { sizes: g.sizes }
    }
}

impl Grid {
    pub fn new(sizes: Vec<usize>) -> Result<Self> {
        if sizes.is_empty() || sizes.iter().any(|&n| n == 0) {
            return Err(Error::invalid("grid needs at least one dimension, each non-empty"));
        }
        let mut strides = Vec::with_capacity(sizes.len());
        let mut acc = 1usize;
        for &n in &sizes {
            strides.push(acc);
            acc = acc
                .checked_mul(n)
                .ok_or_else(|| Error::invalid("grid too large"))?;
        }
        Ok(Self { sizes, strides })
    }

    pub fn line(n: usize) -> Result<Self> {
        Self::new(vec![n])
    }

    pub fn square(n: usize) -> Result<Self> {
        Self::new(vec![n, n])
    }

    pub fn dimension(&self) -> usize {
        self.sizes.len()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn state_count(&self) -> usize {
        self.sizes.iter().product()
    }

    /// Integer index of state `s` along `dim`.
    pub fn index(&self, s: usize, dim: usize) -> usize {
        (s / self.strides[dim]) % self.sizes[dim]
    }

    pub fn state_of(&self, indices: &[usize]) -> usize {
        indices
            .iter()
            .zip(&self.strides)
            .map(|(i, stride)| i * stride)
            .sum()
    }

    pub fn stride(&self, dim: usize) -> usize {
        self.strides[dim]
    }

    /// Spacing between consecutive nodes along `dim`.
    pub fn step<T: Scalar>(&self, dim: usize) -> T {
        let n = self.sizes[dim];
        if n <= 1 {
            T::one()
        } else {
            T::one() / T::of((n - 1) as f64)
        }
    }

    pub fn coord<T: Scalar>(&self, s: usize, dim: usize) -> T {
        let n = self.sizes[dim];
        if n <= 1 {
            T::zero()
        } else {
            T::of(self.index(s, dim) as f64) / T::of((n - 1) as f64)
        }
    }

    pub fn coords<T: Scalar>(&self, s: usize) -> Vec<T> {
        (0..self.dimension()).map(|d| self.coord(s, d)).collect()
    }

    /// Distance between two states restricted to `dims` (all dimensions when empty).
    pub fn distance<T: Scalar>(&self, a: usize, b: usize, metric: Metric, dims: &[usize]) -> T {
        let mut acc = T::zero();
        let mut one = |d: usize| {
            let diff = (self.coord::<T>(a, d) - self.coord::<T>(b, d)).abs();
            match metric {
                Metric::L1 => acc = acc + diff,
                Metric::LInf => acc = acc.max(diff),
            }
        };
        if dims.is_empty() {
            (0..self.dimension()).for_each(&mut one);
        } else {
            dims.iter().copied().for_each(&mut one);
        }
        acc
    }

    /// Pairs of states adjacent along one axis, each listed once as `(s, s + stride)`.
    pub fn adjacent_pairs(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        (0..self.state_count()).flat_map(move |s| {
            (0..self.dimension()).filter_map(move |d| {
                (self.index(s, d) + 1 < self.sizes[d]).then(|| (s, s + self.strides[d], d))
            })
        })
    }

    /// Whether state `s` lies on the boundary of the box.
    pub fn on_boundary(&self, s: usize) -> bool {
        (0..self.dimension()).any(|d| {
            let i = self.index(s, d);
            i == 0 || i + 1 == self.sizes[d]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_first_dimension_fastest() {
        let g = Grid::new(vec![3, 2]).unwrap();
        assert_eq!(g.state_count(), 6);
        assert_eq!(g.index(4, 0), 1);
        assert_eq!(g.index(4, 1), 1);
        assert_eq!(g.state_of(&[2, 1]), 5);
        assert_eq!(g.coords::<f64>(5), vec![1.0, 1.0]);
    }

    #[test]
    fn distances() {
        let g = Grid::square(3).unwrap();
        let a = g.state_of(&[0, 0]);
        let b = g.state_of(&[2, 1]);
        assert_eq!(g.distance::<f64>(a, b, Metric::L1, &[]), 1.5);
        assert_eq!(g.distance::<f64>(a, b, Metric::LInf, &[]), 1.0);
        assert_eq!(g.distance::<f64>(a, b, Metric::L1, &[1]), 0.5);
    }

    #[test]
    fn adjacency_and_boundary() {
        let g = Grid::square(3).unwrap();
        assert_eq!(g.adjacent_pairs().count(), 12);
        assert!(!g.on_boundary(4));
        assert!(g.on_boundary(3));
    }
}

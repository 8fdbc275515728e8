//! The max-plus semiring `(R ∪ {-inf}, max, +)`, value vectors, dictionaries,
//! and the four residuation operators built on a dictionary.
//!
//! For a dictionary `W` of functions `w: S -> R ∪ {-inf}`:
//!
//! * [`eval_dictionary`] computes `Wα(s) = max_w α(w) + w(s)`,
//! * [`residuate`] computes `W⁺V(w) = min_s V(s) - w(s)`,
//! * [`transpose_apply`] computes `Zᵀ V(z) = max_s V(s) + z(s)`,
//! * [`transpose_residuate`] computes `Zᵀ⁺β(s) = min_z β(z) - z(s)`.
//!
//! `W W⁺` is the best lower approximation in the image of `W` and `Zᵀ⁺ Zᵀ` the
//! best upper approximation in the image of `Zᵀ⁺`. In both residuations, terms
//! where the atom is `-inf` impose no constraint and are skipped.

use std::fmt;
use std::ops::Index;
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::dictionaries::Atom;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::scalar::Scalar;

/// A max-plus scalar: a finite real or the bottom element `-inf`.
///
/// NaN and `+inf` are never stored.
#[derive(Clone, Copy, PartialEq, PartialOrd)]
#[repr(transparent)]
pub struct ExtendedValue<T>(T);

impl<T: Scalar> ExtendedValue<T> {
    #[inline]
    pub fn bottom() -> Self {
        Self(T::neg_infinity())
    }

    /// The max-plus unit, `0`.
    #[inline]
    pub fn zero() -> Self {
        Self(T::zero())
    }

    /// Accepts a finite value or `-inf`.
    pub fn new(x: T) -> Result<Self> {
        if x.is_finite() || x == T::neg_infinity() {
            Ok(Self(x))
        } else {
            Err(Error::NonAdmissible(x.as_f64()))
        }
    }

    /// Wraps a finite value.
    ///
    /// # Panics
    /// If `x` is not finite.
    #[inline]
    pub fn finite(x: T) -> Self {
        assert!(x.is_finite(), "ExtendedValue::finite called with {x}");
        Self(x)
    }

    #[inline]
    pub fn is_bottom(self) -> bool {
        self.0 == T::neg_infinity()
    }

    #[inline]
    pub fn is_finite(self) -> bool {
        !self.is_bottom()
    }

    #[inline]
    pub fn get(self) -> Option<T> {
        self.is_finite().then_some(self.0)
    }

    /// The underlying float, `-inf` for bottom.
    #[inline]
    pub fn raw(self) -> T {
        self.0
    }

    /// `self ⊗ other`, i.e. addition with `-inf` absorbing.
    #[inline]
    pub fn otimes(self, other: Self) -> Self {
        if self.is_bottom() || other.is_bottom() {
            Self::bottom()
        } else {
            Self(self.0 + other.0)
        }
    }

    /// `self ⊕ other`, i.e. max with `-inf` neutral.
    #[inline]
    pub fn oplus(self, other: Self) -> Self {
        if other.0 > self.0 {
            other
        } else {
            self
        }
    }

    #[inline]
    pub fn min(self, other: Self) -> Self {
        if other.0 < self.0 {
            other
        } else {
            self
        }
    }

    /// `γ · x` for `γ ≥ 0`; bottom stays bottom.
    #[inline]
    pub fn scale(self, gamma: T) -> Self {
        if self.is_bottom() {
            self
        } else {
            Self(gamma * self.0)
        }
    }

    #[inline]
    pub fn add(self, c: T) -> Self {
        if self.is_bottom() {
            self
        } else {
            Self(self.0 + c)
        }
    }

    /// `self - w` as used inside residuations: `None` when `w` is `-inf`
    /// (no constraint), bottom when `self` is `-inf` and `w` finite.
    #[inline]
    pub fn residual(self, w: Self) -> Option<Self> {
        if w.is_bottom() {
            None
        } else if self.is_bottom() {
            Some(self)
        } else {
            Some(Self(self.0 - w.0))
        }
    }
}

// the sentinel is a float -inf, which already prints as `-inf`
impl<T: fmt::Debug> fmt::Debug for ExtendedValue<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl<T: Scalar> fmt::Display for ExtendedValue<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_bottom() {
            f.write_str("-inf")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

// JSON has no -inf, so bottom round-trips through `null`.
impl<T: Scalar> Serialize for ExtendedValue<T> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.get().serialize(s)
    }
}

impl<'de, T: Scalar> Deserialize<'de> for ExtendedValue<T> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match Option::<T>::deserialize(d)? {
            None => Ok(Self::bottom()),
            Some(x) => Self::new(x).map_err(serde::de::Error::custom),
        }
    }
}

macro_rules! ext_vector {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, PartialEq, Serialize, Deserialize)]
        #[serde(transparent, bound = "T: Scalar")]
        pub struct $name<T>(Vec<ExtendedValue<T>>);

        impl<T: Scalar> $name<T> {
            pub fn new(values: Vec<ExtendedValue<T>>) -> Self {
                Self(values)
            }

            /// Builds a vector from floats, rejecting NaN and `+inf`.
            pub fn from_raw(values: &[T]) -> Result<Self> {
                values.iter().map(|&x| ExtendedValue::new(x)).collect::<Result<_>>().map(Self)
            }

            /// Builds a vector from finite floats.
            pub fn from_finite(values: &[T]) -> Result<Self> {
                values
                    .iter()
                    .map(|&x| {
                        if x.is_finite() {
                            Ok(ExtendedValue::finite(x))
                        } else {
                            Err(Error::NonAdmissible(x.as_f64()))
                        }
                    })
                    .collect::<Result<_>>()
                    .map(Self)
            }

            pub fn constant(len: usize, c: T) -> Self {
                Self(vec![ExtendedValue::finite(c); len])
            }

            pub fn bottom(len: usize) -> Self {
                Self(vec![ExtendedValue::bottom(); len])
            }

            pub fn len(&self) -> usize {
                self.0.len()
            }

            pub fn is_empty(&self) -> bool {
                self.0.is_empty()
            }

            pub fn as_slice(&self) -> &[ExtendedValue<T>] {
                &self.0
            }

            pub fn as_mut_slice(&mut self) -> &mut [ExtendedValue<T>] {
                &mut self.0
            }

            pub fn into_inner(self) -> Vec<ExtendedValue<T>> {
                self.0
            }

            pub fn iter(&self) -> std::slice::Iter<'_, ExtendedValue<T>> {
                self.0.iter()
            }

            pub fn push(&mut self, x: ExtendedValue<T>) {
                self.0.push(x);
            }

            pub fn is_finite(&self) -> bool {
                self.0.iter().all(|x| x.is_finite())
            }

            /// Raw floats, `-inf` for bottom entries.
            pub fn raw(&self) -> Vec<T> {
                self.0.iter().map(|x| x.raw()).collect()
            }

            pub fn to_f64(&self) -> Vec<f64> {
                self.0.iter().map(|x| x.raw().as_f64()).collect()
            }

            /// Pointwise negation; only defined for finite vectors.
            pub fn negate(&self) -> Result<Self> {
                self.0
                    .iter()
                    .map(|x| match x.get() {
                        Some(v) => Ok(ExtendedValue::finite(-v)),
                        None => Err(Error::invalid("cannot negate -inf (would produce +inf)")),
                    })
                    .collect::<Result<_>>()
                    .map(Self)
            }

            pub fn add_scalar(&self, c: T) -> Self {
                Self(self.0.iter().map(|x| x.add(c)).collect())
            }

            pub fn pointwise_max(&self, other: &Self) -> Self {
                Self(self.0.iter().zip(&other.0).map(|(a, b)| a.oplus(*b)).collect())
            }

            /// Pointwise `self <= other`.
            pub fn le(&self, other: &Self) -> bool {
                self.len() == other.len() && self.0.iter().zip(&other.0).all(|(a, b)| a <= b)
            }

            /// `‖self - other‖∞`; two bottoms at the same index count as equal,
            /// a bottom against a finite value gives `+inf`.
            pub fn sup_distance(&self, other: &Self) -> T {
                self.0
                    .iter()
                    .zip(&other.0)
                    .map(|(a, b)| match (a.get(), b.get()) {
                        (Some(x), Some(y)) => (x - y).abs(),
                        (None, None) => T::zero(),
                        _ => T::infinity(),
                    })
                    .fold(T::zero(), T::max)
            }
        }

        impl<T: Scalar> Index<usize> for $name<T> {
            type Output = ExtendedValue<T>;

            fn index(&self, i: usize) -> &ExtendedValue<T> {
                &self.0[i]
            }
        }

        impl<T: Scalar> FromIterator<ExtendedValue<T>> for $name<T> {
            fn from_iter<I: IntoIterator<Item = ExtendedValue<T>>>(iter: I) -> Self {
                Self(iter.into_iter().collect())
            }
        }

        impl<T: fmt::Debug> fmt::Debug for $name<T> {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.debug_list().entries(&self.0).finish()
            }
        }
    };
}

ext_vector! {
    /// A function `S -> R ∪ {-inf}` stored densely by state id.
    ValueVector
}

ext_vector! {
    /// Coefficients indexed by the atoms of a dictionary.
    Coefficients
}

/// A finite family of atoms, tabulated once on every state.
#[derive(Clone, Debug)]
pub struct Dictionary<T> {
    atoms: Vec<Atom<T>>,
    state_count: usize,
    grid: Option<Arc<Grid>>,
    table: Vec<Vec<ExtendedValue<T>>>,
}

impl<T: Scalar> Dictionary<T> {
    pub fn new(atoms: Vec<Atom<T>>, state_count: usize, grid: Option<Arc<Grid>>) -> Result<Self> {
        if state_count == 0 {
            return Err(Error::invalid("dictionary over an empty state space"));
        }
        if let Some(g) = &grid {
            Error::check_len("grid state count", state_count, g.state_count())?;
        }
        let table = atoms
            .iter()
            .map(|a| a.tabulate(state_count, grid.as_deref()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            atoms,
            state_count,
            grid,
            table,
        })
    }

    /// A dictionary of tabulated atoms.
    pub fn from_columns(columns: Vec<ValueVector<T>>) -> Result<Self> {
        let n = columns
            .first()
            .map(ValueVector::len)
            .ok_or_else(|| Error::invalid("empty dictionary needs an explicit state count"))?;
        let atoms = columns.into_iter().map(|values| Atom::Tabulated { values }).collect();
        Self::new(atoms, n, None)
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn state_count(&self) -> usize {
        self.state_count
    }

    pub fn grid(&self) -> Option<&Arc<Grid>> {
        self.grid.as_ref()
    }

    pub fn atoms(&self) -> &[Atom<T>] {
        &self.atoms
    }

    pub fn atom(&self, i: usize) -> &Atom<T> {
        &self.atoms[i]
    }

    /// Values of atom `i` on every state.
    pub fn column(&self, i: usize) -> &[ExtendedValue<T>] {
        &self.table[i]
    }

    pub fn push(&mut self, atom: Atom<T>) -> Result<()> {
        let col = atom.tabulate(self.state_count, self.grid.as_deref())?;
        self.atoms.push(atom);
        self.table.push(col);
        Ok(())
    }

    pub fn replace(&mut self, i: usize, atom: Atom<T>) -> Result<()> {
        let col = atom.tabulate(self.state_count, self.grid.as_deref())?;
        self.atoms[i] = atom;
        self.table[i] = col;
        Ok(())
    }

    /// A copy of this dictionary with one more atom.
    pub fn with_atom(&self, atom: Atom<T>) -> Result<Self> {
        let mut d = self.clone();
        d.push(atom)?;
        Ok(d)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&DictionaryRecord::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let rec: DictionaryRecord<T> = serde_json::from_str(s)?;
        rec.try_into()
    }

    /// SHA-256 of the JSON form, as lowercase hex.
    pub fn content_hash(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        Ok(hex::encode(Sha256::digest(self.to_json()?.as_bytes())))
    }
}

/// On-disk form of a [`Dictionary`]: atoms by variant plus the grid they live on.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct DictionaryRecord<T> {
    pub state_count: usize,
    pub grid: Option<Grid>,
    pub atoms: Vec<Atom<T>>,
}

impl<T: Scalar> From<&Dictionary<T>> for DictionaryRecord<T> {
    fn from(d: &Dictionary<T>) -> Self {
        Self {
            state_count: d.state_count,
            grid: d.grid.as_deref().cloned(),
            atoms: d.atoms.clone(),
        }
    }
}

impl<T: Scalar> TryFrom<DictionaryRecord<T>> for Dictionary<T> {
    type Error = Error;

    fn try_from(r: DictionaryRecord<T>) -> Result<Self> {
        Dictionary::new(r.atoms, r.state_count, r.grid.map(Arc::new))
    }
}

/// `⟨a | b⟩ = max_s a(s) + b(s)`.
pub fn maxplus_dot<T: Scalar>(a: &[ExtendedValue<T>], b: &[ExtendedValue<T>]) -> ExtendedValue<T> {
    a.iter()
        .zip(b)
        .fold(ExtendedValue::bottom(), |acc, (x, y)| acc.oplus(x.otimes(*y)))
}

/// `Wα(s) = max_w α(w) + w(s)`.
pub fn eval_dictionary<T: Scalar>(w: &Dictionary<T>, alpha: &Coefficients<T>) -> Result<ValueVector<T>> {
    Error::check_len("coefficients", w.len(), alpha.len())?;
    let mut out = vec![ExtendedValue::bottom(); w.state_count()];
    for (i, a) in alpha.iter().enumerate() {
        if a.is_bottom() {
            continue;
        }
        for (o, x) in out.iter_mut().zip(w.column(i)) {
            *o = o.oplus(a.otimes(*x));
        }
    }
    Ok(ValueVector::new(out))
}

/// `W⁺V(w) = min_s V(s) - w(s)`, skipping states where `w(s) = -inf`.
pub fn residuate<T: Scalar>(w: &Dictionary<T>, v: &ValueVector<T>) -> Result<Coefficients<T>> {
    Error::check_len("value vector", w.state_count(), v.len())?;
    (0..w.len())
        .map(|i| residuate_column(w.column(i), v.as_slice()).ok_or(Error::UnboundedResiduation { atom: i }))
        .collect()
}

/// `min_s v(s) - col(s)` over states where `col` is finite; `None` if there are none.
pub(crate) fn residuate_column<T: Scalar>(
    col: &[ExtendedValue<T>],
    v: &[ExtendedValue<T>],
) -> Option<ExtendedValue<T>> {
    col.iter()
        .zip(v)
        .filter_map(|(x, y)| y.residual(*x))
        .reduce(ExtendedValue::min)
}

/// `Zᵀ V(z) = max_s V(s) + z(s)`.
pub fn transpose_apply<T: Scalar>(z: &Dictionary<T>, v: &ValueVector<T>) -> Result<Coefficients<T>> {
    Error::check_len("value vector", z.state_count(), v.len())?;
    Ok((0..z.len()).map(|i| maxplus_dot(z.column(i), v.as_slice())).collect())
}

/// `Zᵀ⁺β(s) = min_z β(z) - z(s)`, skipping atoms with `z(s) = -inf`.
pub fn transpose_residuate<T: Scalar>(z: &Dictionary<T>, beta: &Coefficients<T>) -> Result<ValueVector<T>> {
    Error::check_len("coefficients", z.len(), beta.len())?;
    let mut out: Vec<Option<ExtendedValue<T>>> = vec![None; z.state_count()];
    for (i, b) in beta.iter().enumerate() {
        for (o, x) in out.iter_mut().zip(z.column(i)) {
            if let Some(r) = b.residual(*x) {
                *o = Some(match *o {
                    Some(cur) => cur.min(r),
                    None => r,
                });
            }
        }
    }
    out.into_iter()
        .enumerate()
        .map(|(s, o)| o.ok_or(Error::UncoveredState { state: s }))
        .collect()
}

/// `W W⁺ V`, the largest function below `V` in the image of `W`.
pub fn project_lower<T: Scalar>(w: &Dictionary<T>, v: &ValueVector<T>) -> Result<ValueVector<T>> {
    eval_dictionary(w, &residuate(w, v)?)
}

/// `Zᵀ⁺ Zᵀ V`, the smallest function above `V` in the image of `Zᵀ⁺`.
pub fn project_upper<T: Scalar>(z: &Dictionary<T>, v: &ValueVector<T>) -> Result<ValueVector<T>> {
    transpose_residuate(z, &transpose_apply(z, v)?)
}

/// Index of the largest element, first index winning ties.
pub fn argmax_first<T: PartialOrd + Copy>(values: impl IntoIterator<Item = T>) -> Option<usize> {
    let mut best: Option<(usize, T)> = None;
    for (i, x) in values.into_iter().enumerate() {
        match best {
            Some((_, b)) if !(x > b) => {}
            _ => best = Some((i, x)),
        }
    }
    best.map(|(i, _)| i)
}

/// Index of the smallest element, first index winning ties.
pub fn argmin_first<T: PartialOrd + Copy>(values: impl IntoIterator<Item = T>) -> Option<usize> {
    let mut best: Option<(usize, T)> = None;
    for (i, x) in values.into_iter().enumerate() {
        match best {
            Some((_, b)) if !(x < b) => {}
            _ => best = Some((i, x)),
        }
    }
    best.map(|(i, _)| i)
}

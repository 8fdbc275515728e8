//! Compiled bilinear forms `⟨z|w⟩`, `⟨z|T^ρ w⟩` and the reduced β/α iteration.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dictionaries::{reduced_mdp_from_partition, Partition};
use crate::error::{Error, Result};
use crate::maxplus::{maxplus_dot, residuate, Coefficients, Dictionary, ExtendedValue, ValueVector};
use crate::mdp::{DeterministicMdp, ViOutcome};
use crate::scalar::Scalar;

/// Dense `|Z| × |W|` matrix, row-major by `z`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct FormMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<ExtendedValue<T>>,
}

impl<T: Scalar> FormMatrix<T> {
    pub fn filled(rows: usize, cols: usize, x: ExtendedValue<T>) -> Self {
        Self {
            rows,
            cols,
            data: vec![x; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> ExtendedValue<T>) -> Self {
        let data = (0..rows).flat_map(|z| (0..cols).map(move |w| (z, w))).map(|(z, w)| f(z, w)).collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, z: usize, w: usize) -> ExtendedValue<T> {
        self.data[z * self.cols + w]
    }

    pub fn set(&mut self, z: usize, w: usize, x: ExtendedValue<T>) {
        self.data[z * self.cols + w] = x;
    }

    pub fn row(&self, z: usize) -> &[ExtendedValue<T>] {
        &self.data[z * self.cols..(z + 1) * self.cols]
    }

    pub fn push_row(&mut self, row: Vec<ExtendedValue<T>>) -> Result<()> {
        Error::check_len("form row", self.cols, row.len())?;
        self.data.extend(row);
        self.rows += 1;
        Ok(())
    }

    pub fn push_col(&mut self, col: Vec<ExtendedValue<T>>) -> Result<()> {
        Error::check_len("form column", self.rows, col.len())?;
        let mut data = Vec::with_capacity(self.rows * (self.cols + 1));
        for (z, x) in col.into_iter().enumerate() {
            data.extend_from_slice(&self.data[z * self.cols..(z + 1) * self.cols]);
            data.push(x);
        }
        self.data = data;
        self.cols += 1;
        Ok(())
    }

    pub fn entries_mut(&mut self) -> &mut [ExtendedValue<T>] {
        &mut self.data
    }
}

/// Content hashes of the MDP and dictionaries the forms were compiled from.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub mdp: String,
    pub w: String,
    pub z: String,
}

/// The matrices `zw[z][w] = ⟨z|w⟩` and `ztw[z][w] = ⟨z|T^ρ w⟩`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct CompiledForms<T> {
    pub zw: FormMatrix<T>,
    pub ztw: FormMatrix<T>,
    pub rho: usize,
    pub gamma_eff: T,
    pub provenance: Provenance,
}

impl<T: Scalar> CompiledForms<T> {
    pub fn w_count(&self) -> usize {
        self.zw.cols()
    }

    pub fn z_count(&self) -> usize {
        self.zw.rows()
    }
}

/// A source MDP together with its `ρ`-step power, shared by every solver that
/// runs against the same `T^ρ`.
#[derive(Debug)]
pub struct CompiledMdp<T> {
    pub power: DeterministicMdp<T>,
    pub rho: usize,
    pub source_hash: String,
    reverse: OnceLock<Vec<Vec<(usize, T)>>>,
}

impl<T: Scalar> CompiledMdp<T> {
    pub fn new(mdp: &DeterministicMdp<T>, rho: usize) -> Result<Self> {
        Ok(Self {
            power: mdp.compile_power(rho)?,
            rho,
            source_hash: mdp.content_hash(),
            reverse: OnceLock::new(),
        })
    }

    pub fn gamma_eff(&self) -> T {
        self.power.gamma()
    }

    /// Incoming edges of the powered MDP, built on first use.
    pub fn reverse(&self) -> &[Vec<(usize, T)>] {
        self.reverse.get_or_init(|| self.power.reverse_adjacency())
    }
}

/// `T^ρ w` for one atom column, where `power` is the compiled `ρ`-step MDP.
pub fn transition_column<T: Scalar>(power: &DeterministicMdp<T>, column: &[ExtendedValue<T>], atom: usize) -> Result<ValueVector<T>> {
    if column.iter().all(|x| x.is_bottom()) {
        return Err(Error::invalid(format!("atom {atom} is identically -inf")));
    }
    power.bellman_apply(&ValueVector::new(column.to_vec()))
}

/// Compiles both forms against `M^ρ`.
pub fn compile_forms<T: Scalar>(
    mdp: &DeterministicMdp<T>,
    w: &Dictionary<T>,
    z: &Dictionary<T>,
    rho: usize,
) -> Result<CompiledForms<T>> {
    let power = mdp.compile_power(rho)?;
    let provenance = Provenance {
        mdp: mdp.content_hash(),
        w: w.content_hash()?,
        z: z.content_hash()?,
    };
    compile_forms_powered(&power, w, z, rho, provenance)
}

/// Compiles both forms against an already powered MDP (`gamma_eff` is its discount).
pub fn compile_forms_powered<T: Scalar>(
    power: &DeterministicMdp<T>,
    w: &Dictionary<T>,
    z: &Dictionary<T>,
    rho: usize,
    provenance: Provenance,
) -> Result<CompiledForms<T>> {
    Error::check_len("W state count", power.state_count(), w.state_count())?;
    Error::check_len("Z state count", power.state_count(), z.state_count())?;
    if let Some(i) = (0..z.len()).find(|&i| z.column(i).iter().all(|x| x.is_bottom())) {
        return Err(Error::invalid(format!("Z atom {i} is identically -inf")));
    }
    let tw = (0..w.len())
        .into_par_iter()
        .map(|i| transition_column(power, w.column(i), i))
        .collect::<Result<Vec<_>>>()?;
    let zw = FormMatrix::from_fn(z.len(), w.len(), |a, b| maxplus_dot(z.column(a), w.column(b)));
    let ztw = FormMatrix::from_fn(z.len(), w.len(), |a, b| maxplus_dot(z.column(a), tw[b].as_slice()));
    Ok(CompiledForms {
        zw,
        ztw,
        rho,
        gamma_eff: power.gamma(),
        provenance,
    })
}

/// Iterates `β(z) = max_w γ_eff α(w) + ⟨z|T^ρ w⟩` and `α(w) = min_z β(z) - ⟨z|w⟩`.
pub fn reduced_step<T: Scalar>(forms: &CompiledForms<T>, alpha: &Coefficients<T>) -> Result<(Coefficients<T>, Coefficients<T>)> {
    Error::check_len("coefficients", forms.w_count(), alpha.len())?;
    let g = forms.gamma_eff;
    let beta: Coefficients<T> = (0..forms.z_count())
        .map(|z| {
            forms
                .ztw
                .row(z)
                .iter()
                .zip(alpha.iter())
                .fold(ExtendedValue::bottom(), |acc, (&f, a)| acc.oplus(a.scale(g).otimes(f)))
        })
        .collect();
    let next = (0..forms.w_count())
        .map(|w| {
            let mut best: Option<ExtendedValue<T>> = None;
            for z in 0..forms.z_count() {
                if let Some(r) = beta[z].residual(forms.zw.get(z, w)) {
                    best = Some(best.map_or(r, |b| b.min(r)));
                }
            }
            best.ok_or(Error::UnboundedResiduation { atom: w })
        })
        .collect::<Result<Coefficients<T>>>()?;
    Ok((beta, next))
}

/// Converged reduced iteration.
#[derive(Clone, Debug)]
pub struct ReducedState<T> {
    pub alpha: Coefficients<T>,
    pub beta: Coefficients<T>,
    pub iteration: usize,
    /// `‖α_t - α_{t-1}‖∞` at the final step.
    pub residual: T,
    pub residuals: Vec<T>,
}

/// Runs [`reduced_step`] until `‖α_{t+1} - α_t‖∞ <= tol (1 - γ_eff)`, which
/// certifies `‖Wα_t - V∞‖∞ <= tol`. The default start is `α_0 = W⁺0`.
pub fn run_reduced_vi<T: Scalar>(
    forms: &CompiledForms<T>,
    w: &Dictionary<T>,
    alpha0: Option<&Coefficients<T>>,
    tol: T,
    max_iter: usize,
) -> Result<(ReducedState<T>, ValueVector<T>)> {
    if !(tol > T::zero()) {
        return Err(Error::invalid("tolerance must be positive"));
    }
    Error::check_len("dictionary W", forms.w_count(), w.len())?;
    let mut alpha = match alpha0 {
        Some(a) => a.clone(),
        None => residuate(w, &ValueVector::constant(w.state_count(), T::zero()))?,
    };
    let threshold = tol * (T::one() - forms.gamma_eff);
    let mut residuals = Vec::new();
    for t in 1..=max_iter {
        let (beta, next) = reduced_step(forms, &alpha)?;
        let residual = next.sup_distance(&alpha);
        residuals.push(residual);
        alpha = next;
        if residual <= threshold {
            let v = crate::maxplus::eval_dictionary(w, &alpha)?;
            return Ok((
                ReducedState {
                    alpha,
                    beta,
                    iteration: t,
                    residual,
                    residuals,
                },
                v,
            ));
        }
    }
    Err(Error::NotConverged {
        iterations: max_iter,
        residual: residuals.last().map_or(f64::INFINITY, |r| r.as_f64()),
        last_iterate: alpha.to_f64(),
    })
}

/// Value iteration on the cluster MDP of `P` over `M^ρ`, broadcast back to the
/// states. Equivalent to [`run_reduced_vi`] with `W = Z = ` the partition dictionary.
pub fn partition_reduced_vi<T: Scalar>(
    mdp: &DeterministicMdp<T>,
    p: &Partition,
    rho: usize,
    tol: T,
    max_iter: usize,
) -> Result<ValueVector<T>> {
    Ok(partition_reduced_vi_powered(&mdp.compile_power(rho)?, p, tol, max_iter)?.1)
}

/// As [`partition_reduced_vi`], for an already powered MDP; also returns the cluster run.
pub fn partition_reduced_vi_powered<T: Scalar>(
    power: &DeterministicMdp<T>,
    p: &Partition,
    tol: T,
    max_iter: usize,
) -> Result<(ViOutcome<T>, ValueVector<T>)> {
    let cluster = reduced_mdp_from_partition(power, p)?;
    let zero = ValueVector::constant(cluster.state_count(), T::zero());
    let out = cluster.value_iteration(&zero, tol * (T::one() - cluster.gamma()), max_iter)?;
    let v = (0..p.state_count()).map(|s| out.values[p.cell_of(s)]).collect();
    Ok((out, v))
}

/// `2η / (1 - γ_eff)`.
pub fn fixed_point_error_bound<T: Scalar>(eta: T, gamma_eff: T) -> T {
    T::of(2.0) * eta / (T::one() - gamma_eff)
}

/// `2η (1 + τ/ρ)` with `τ = 1/(1-γ)`, the long-horizon form of the bound for `T^ρ`.
pub fn fixed_point_error_bound_horizon<T: Scalar>(eta: T, gamma: T, rho: usize) -> T {
    let tau = T::one() / (T::one() - gamma);
    T::of(2.0) * eta * (T::one() + tau / T::of(rho as f64))
}

/// JSON cache of compiled forms keyed by the content hashes of their inputs.
#[derive(Clone, Debug)]
pub struct FormsCache {
    dir: PathBuf,
}

impl FormsCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn key(provenance: &Provenance, rho: usize, scalar: &str) -> String {
        let mut h = Sha256::new();
        for part in [&provenance.mdp, &provenance.w, &provenance.z] {
            h.update(part.as_bytes());
            h.update([0]);
        }
        h.update(rho.to_le_bytes());
        h.update(scalar.as_bytes());
        hex::encode(h.finalize())
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("forms-{key}.json"))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Loads the forms for these inputs, compiling and storing them on a miss.
    pub fn compile<T: Scalar>(
        &self,
        mdp: &DeterministicMdp<T>,
        w: &Dictionary<T>,
        z: &Dictionary<T>,
        rho: usize,
    ) -> Result<CompiledForms<T>> {
        let provenance = Provenance {
            mdp: mdp.content_hash(),
            w: w.content_hash()?,
            z: z.content_hash()?,
        };
        let path = self.path(&Self::key(&provenance, rho, std::any::type_name::<T>()));
        if let Ok(text) = fs::read_to_string(&path) {
            if let Ok(forms) = serde_json::from_str::<CompiledForms<T>>(&text) {
                if forms.provenance == provenance && forms.rho == rho {
                    return Ok(forms);
                }
            }
        }
        let forms = compile_forms_powered(&mdp.compile_power(rho)?, w, z, rho, provenance)?;
        fs::write(&path, serde_json::to_string(&forms)?)?;
        Ok(forms)
    }
}

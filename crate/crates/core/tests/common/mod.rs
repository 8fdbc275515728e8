//! Random instances and naive reference implementations shared by the
//! integration tests. The oracles work on plain `f64` with `-inf` as bottom and
//! do not call into the library.

#![allow(dead_code)]

pub mod laws;

use maxplus_vi::maxplus::{Dictionary, ValueVector};
use maxplus_vi::mdp::DeterministicMdp;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

pub const NEG: f64 = f64::NEG_INFINITY;

pub fn rng(seed: u64) -> StdRng {
    StdRng::seed_from_u64(seed)
}

/// Adjacency list `edges[s] = [(t, r)]` with at least one edge per state.
pub type Edges = Vec<Vec<(usize, f64)>>;

pub fn random_edges(rng: &mut StdRng, n: usize, max_out: usize) -> Edges {
    (0..n)
        .map(|_| {
            let k = rng.gen_range(1..=max_out);
            let mut out: Vec<(usize, f64)> = Vec::new();
            for _ in 0..k {
                let t = rng.gen_range(0..n);
                if out.iter().all(|e| e.0 != t) {
                    out.push((t, rng.gen_range(-1.0..1.0)));
                }
            }
            out
        })
        .collect()
}

pub fn mdp_from_edges(n: usize, gamma: f64, edges: &Edges) -> DeterministicMdp<f64> {
    let flat = edges
        .iter()
        .enumerate()
        .flat_map(|(s, row)| row.iter().map(move |&(t, r)| (s, t, r)));
    DeterministicMdp::new(n, gamma, flat).unwrap()
}

pub fn random_mdp(rng: &mut StdRng, n: usize) -> (DeterministicMdp<f64>, Edges) {
    let gamma = rng.gen_range(0.5..0.95);
    let edges = random_edges(rng, n, 3);
    (mdp_from_edges(n, gamma, &edges), edges)
}

/// Columns with some `-inf` entries; every column has a finite entry and every
/// state is finite in some column.
pub fn random_columns(rng: &mut StdRng, n: usize, k: usize, bottom_rate: f64) -> Vec<Vec<f64>> {
    let mut cols: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            (0..n)
                .map(|_| if rng.gen_bool(bottom_rate) { NEG } else { rng.gen_range(-5.0..5.0) })
                .collect()
        })
        .collect();
    for col in cols.iter_mut() {
        if col.iter().all(|x| x.is_infinite()) {
            let s = rng.gen_range(0..n);
            col[s] = rng.gen_range(-5.0..5.0);
        }
    }
    for s in 0..n {
        if cols.iter().all(|c| c[s].is_infinite()) {
            let i = rng.gen_range(0..k);
            cols[i][s] = rng.gen_range(-5.0..5.0);
        }
    }
    cols
}

pub fn dictionary(cols: &[Vec<f64>]) -> Dictionary<f64> {
    Dictionary::from_columns(cols.iter().map(|c| ValueVector::from_raw(c).unwrap()).collect()).unwrap()
}

pub fn random_vector(rng: &mut StdRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect()
}

pub fn raw(v: &[maxplus_vi::ExtendedValue<f64>]) -> Vec<f64> {
    v.iter().map(|x| x.raw()).collect()
}

pub fn values(xs: &[f64]) -> ValueVector<f64> {
    ValueVector::from_raw(xs).unwrap()
}

pub fn sup_dist(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| if x == y { 0.0 } else { (x - y).abs() })
        .fold(0.0, f64::max)
}

// ---- oracles ----

/// `max_w α(w) + w(s)`.
pub fn eval(cols: &[Vec<f64>], alpha: &[f64]) -> Vec<f64> {
    let n = cols[0].len();
    (0..n)
        .map(|s| {
            cols.iter()
                .zip(alpha)
                .map(|(c, a)| a + c[s])
                .fold(NEG, f64::max)
        })
        .collect()
}

/// `min_s V(s) - w(s)` over states with finite `w(s)`.
pub fn residuate(cols: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    cols.iter()
        .map(|c| {
            c.iter()
                .zip(v)
                .filter(|(w, _)| w.is_finite())
                .map(|(w, x)| x - w)
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// `max_s V(s) + z(s)`.
pub fn transpose(cols: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    cols.iter()
        .map(|c| c.iter().zip(v).map(|(z, x)| z + x).fold(NEG, f64::max))
        .collect()
}

/// `min_z β(z) - z(s)` over atoms with finite `z(s)`.
pub fn transpose_residuate(cols: &[Vec<f64>], beta: &[f64]) -> Vec<f64> {
    let n = cols[0].len();
    (0..n)
        .map(|s| {
            cols.iter()
                .zip(beta)
                .filter(|(c, _)| c[s].is_finite())
                .map(|(c, b)| b - c[s])
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

pub fn lower(cols: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    eval(cols, &residuate(cols, v))
}

pub fn upper(cols: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    transpose_residuate(cols, &transpose(cols, v))
}

pub fn bellman(edges: &Edges, gamma: f64, v: &[f64]) -> Vec<f64> {
    edges
        .iter()
        .map(|row| row.iter().map(|&(t, r)| r + gamma * v[t]).fold(NEG, f64::max))
        .collect()
}

pub fn bellman_power(edges: &Edges, gamma: f64, v: &[f64], rho: usize) -> Vec<f64> {
    (0..rho).fold(v.to_vec(), |acc, _| bellman(edges, gamma, &acc))
}

/// Lower convex envelope of the points `(xs[i], ys[i])` evaluated at `xs`,
/// with `xs` increasing.
pub fn convex_envelope(xs: &[f64], ys: &[f64]) -> Vec<f64> {
    envelope_with_slopes(xs, ys).0
}

/// The envelope together with the slopes of its pieces.
pub fn envelope_with_slopes(xs: &[f64], ys: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut hull: Vec<usize> = Vec::new();
    for i in 0..xs.len() {
        while hull.len() >= 2 {
            let (a, b) = (hull[hull.len() - 2], hull[hull.len() - 1]);
            let cross = (xs[b] - xs[a]) * (ys[i] - ys[a]) - (ys[b] - ys[a]) * (xs[i] - xs[a]);
            if cross <= 0.0 {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(i);
    }
    let mut out = vec![0.0; xs.len()];
    let mut slopes = Vec::new();
    for pair in hull.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        for i in a..=b {
            let t = (xs[i] - xs[a]) / (xs[b] - xs[a]);
            out[i] = ys[a] + t * (ys[b] - ys[a]);
        }
        slopes.push((ys[b] - ys[a]) / (xs[b] - xs[a]));
    }
    if hull.len() == 1 {
        out[hull[0]] = ys[hull[0]];
    }
    (out, slopes)
}

/// Number of points of `Z^d` with `ℓ1` norm at most `rho`, by enumeration.
pub fn lattice_ball(rho: i64, d: u32) -> u128 {
    if d == 0 {
        return 1;
    }
    (-rho..=rho).map(|x| lattice_ball(rho - x.abs(), d - 1)).sum()
}

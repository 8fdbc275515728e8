//! Law checks over one seeded random instance, returning the first violation.

use super::*;
use rand::Rng;
use maxplus_vi::maxplus::{
    eval_dictionary, project_lower, project_upper, residuate as lib_residuate, transpose_apply,
    transpose_residuate as lib_transpose_residuate, Coefficients,
};
use maxplus_vi::reduced_vi::{compile_forms, reduced_step};

fn close(what: &str, a: &[f64], b: &[f64], tol: f64) -> Result<(), String> {
    let d = sup_dist(a, b);
    if d <= tol {
        Ok(())
    } else {
        Err(format!("{what}: distance {d:e}"))
    }
}

fn below(what: &str, a: &[f64], b: &[f64], tol: f64) -> Result<(), String> {
    match a.iter().zip(b).position(|(x, y)| *x > *y + tol) {
        None => Ok(()),
        Some(i) => Err(format!("{what}: {} > {} at {i}", a[i], b[i])),
    }
}

fn coeffs(xs: &[f64]) -> Coefficients<f64> {
    Coefficients::from_raw(xs).unwrap()
}

pub fn algebra(seed: u64, tol: f64) -> Result<(), String> {
    let mut r = rng(seed);
    let n = r.gen_range(1..=50);
    let kw = r.gen_range(1..=10);
    let kz = r.gen_range(1..=10);
    let wc = random_columns(&mut r, n, kw, 0.3);
    let zc = random_columns(&mut r, n, kz, 0.3);
    let (w, z) = (dictionary(&wc), dictionary(&zc));
    let v = random_vector(&mut r, n);
    let v2 = random_vector(&mut r, n);
    let alpha = random_vector(&mut r, kw);
    let beta = random_vector(&mut r, kz);

    // library against the naive formulas
    let wp = raw(lib_residuate(&w, &values(&v)).unwrap().as_slice());
    close("W⁺V", &wp, &residuate(&wc, &v), tol)?;
    let wa = raw(eval_dictionary(&w, &coeffs(&alpha)).unwrap().as_slice());
    close("Wα", &wa, &eval(&wc, &alpha), tol)?;
    let ztv = raw(transpose_apply(&z, &values(&v)).unwrap().as_slice());
    close("ZᵀV", &ztv, &transpose(&zc, &v), tol)?;
    let zb = raw(lib_transpose_residuate(&z, &coeffs(&beta)).unwrap().as_slice());
    close("Zᵀ⁺β", &zb, &transpose_residuate(&zc, &beta), tol)?;

    // Galois connection: Wα ≤ V iff α ≤ W⁺V
    below("WW⁺V ≤ V", &eval(&wc, &wp), &v, tol)?;
    let back = residuate(&wc, &wa);
    below("α ≤ W⁺Wα", &alpha, &back, tol)?;
    let shrink: Vec<f64> = wp.iter().map(|x| x - r.gen_range(0.0..1.0)).collect();
    below("α ≤ W⁺V ⇒ Wα ≤ V", &eval(&wc, &shrink), &v, tol)?;
    let i = r.gen_range(0..kw);
    let mut grown = wp.clone();
    grown[i] += 0.5;
    if below("", &eval(&wc, &grown), &v, 0.0).is_ok() {
        return Err(format!("Wα ≤ V although α({i}) > W⁺V({i})"));
    }

    // triple identities
    close("WW⁺W = W", &eval(&wc, &back), &wa, tol)?;
    close("W⁺WW⁺ = W⁺", &residuate(&wc, &eval(&wc, &wp)), &wp, tol)?;

    // idempotence and non-expansiveness of both projections
    let lv = raw(project_lower(&w, &values(&v)).unwrap().as_slice());
    let lv2 = raw(project_lower(&w, &values(&v2)).unwrap().as_slice());
    close("lower idempotent", &raw(project_lower(&w, &values(&lv)).unwrap().as_slice()), &lv, tol)?;
    let uv = raw(project_upper(&z, &values(&v)).unwrap().as_slice());
    let uv2 = raw(project_upper(&z, &values(&v2)).unwrap().as_slice());
    close("upper idempotent", &raw(project_upper(&z, &values(&uv)).unwrap().as_slice()), &uv, tol)?;
    let d = sup_dist(&v, &v2);
    if sup_dist(&lv, &lv2) > d + tol || sup_dist(&uv, &uv2) > d + tol {
        return Err("projection expands distances".into());
    }
    below("WW⁺V ≤ V", &lv, &v, tol)?;
    below("V ≤ Zᵀ⁺ZᵀV", &v, &uv, tol)?;

    // duality Zᵀ⁺β = -Z(-β)
    let neg_beta: Vec<f64> = beta.iter().map(|b| -b).collect();
    let dual: Vec<f64> = eval(&zc, &neg_beta).iter().map(|x| -x).collect();
    close("Zᵀ⁺β = -Z(-β)", &zb, &dual, tol)?;

    // adjunction ⟨ZᵀV|β⟩ = ⟨V|Zβ⟩
    let lhs = ztv.iter().zip(&beta).map(|(a, b)| a + b).fold(NEG, f64::max);
    let rhs = v.iter().zip(eval(&zc, &beta)).map(|(a, b)| a + b).fold(NEG, f64::max);
    if (lhs - rhs).abs() > tol {
        return Err(format!("adjunction: {lhs} vs {rhs}"));
    }
    Ok(())
}

pub fn bellman_laws(seed: u64, tol: f64) -> Result<(), String> {
    let mut r = rng(seed);
    let n = r.gen_range(1..=50);
    let (mdp, edges) = random_mdp(&mut r, n);
    let g = mdp.gamma();
    let v = random_vector(&mut r, n);
    let v2 = random_vector(&mut r, n);
    let t = |x: &[f64]| raw(mdp.bellman_apply(&values(x)).unwrap().as_slice());
    let tv = t(&v);
    let tv2 = t(&v2);
    close("T against oracle", &tv, &bellman(&edges, g, &v), tol)?;

    if sup_dist(&tv, &tv2) > g * sup_dist(&v, &v2) + tol {
        return Err("T is not a γ-contraction".into());
    }
    let up: Vec<f64> = v.iter().map(|x| x + r.gen_range(0.0..2.0)).collect();
    below("monotone", &tv, &t(&up), tol)?;
    let c = r.gen_range(-3.0..3.0);
    let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
    let expect: Vec<f64> = tv.iter().map(|x| x + g * c).collect();
    close("T(V + c) = TV + γc", &t(&shifted), &expect, tol)?;
    let joined: Vec<f64> = v.iter().zip(&v2).map(|(a, b)| a.max(*b)).collect();
    let expect: Vec<f64> = tv.iter().zip(&tv2).map(|(a, b)| a.max(*b)).collect();
    close("T(max) = max(T)", &t(&joined), &expect, tol)?;
    Ok(())
}

/// Every reduced step against `WW⁺Zᵀ⁺Zᵀ T^ρ` applied to `Wα_t`.
pub fn reduced_oracle(seed: u64, steps: usize, tol: f64) -> Result<(), String> {
    let mut r = rng(seed);
    let n = r.gen_range(2..=50);
    let (mdp, edges) = random_mdp(&mut r, n);
    let g = mdp.gamma();
    let rho = [1, 2, 4][r.gen_range(0..3)];
    let kw = r.gen_range(1..=10);
    let kz = r.gen_range(1..=10);
    let wc = random_columns(&mut r, n, kw, 0.3);
    let zc = random_columns(&mut r, n, kz, 0.3);
    let (w, z) = (dictionary(&wc), dictionary(&zc));
    let forms = compile_forms(&mdp, &w, &z, rho).map_err(|e| e.to_string())?;
    let mut alpha = random_vector(&mut r, kw);
    for step in 0..steps {
        let v = eval(&wc, &alpha);
        let tv = bellman_power(&edges, g, &v, rho);
        let expect = lower(&wc, &upper(&zc, &tv));
        let (_, next) = reduced_step(&forms, &coeffs(&alpha)).map_err(|e| e.to_string())?;
        let next = raw(next.as_slice());
        let got = eval(&wc, &next);
        close(&format!("step {step}"), &got, &expect, tol)?;
        alpha = next;
    }
    Ok(())
}

//! Sigmoid calibration of decision values, `P(y=1|f) = 1/(1+exp(A·f+B))`,
//! fitted by Newton's method with backtracking (Lin, Lin & Weng 2007).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::{class_counts, Label};

pub const DEFAULT_NEWTON_ITERS: usize = 100;
const GRAD_TOL: f64 = 1e-8;
const MIN_STEP: f64 = 1e-10;
const HESSIAN_RIDGE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlattSigmoid {
    pub a: f64,
    pub b: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlattFit {
    pub sigmoid: PlattSigmoid,
    /// NLL at the starting point and after every accepted Newton step.
    pub nll_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl PlattSigmoid {
    /// `P(y = pneumonia | f)`, strictly inside (0, 1) for moderate `A·f+B`.
    pub fn p_pos(&self, f: f64) -> f64 {
        let z = self.a * f + self.b;
        if z >= 0.0 {
            let e = (-z).exp();
            e / (1.0 + e)
        } else {
            1.0 / (1.0 + z.exp())
        }
    }
}

/// Weighted negative log-likelihood against the smoothed targets.
fn nll(f: &[f64], t: &[f64], w: &[f64], a: f64, b: f64) -> f64 {
    f.iter()
        .zip(t)
        .zip(w)
        .map(|((&fi, &ti), &wi)| {
            let z = fi * a + b;
            wi * if z >= 0.0 {
                ti * z + (-z).exp().ln_1p()
            } else {
                (ti - 1.0) * z + z.exp().ln_1p()
            }
        })
        .sum()
}

/// Smoothed targets `(N₊+1)/(N₊+2)` and `1/(N₋+2)`.
pub fn smoothed_targets(labels: &[Label]) -> Vec<f64> {
    let (n_neg, n_pos) = class_counts(labels);
    targets_from_counts(labels, n_neg as f64, n_pos as f64)
}

fn targets_from_counts(labels: &[Label], n_neg: f64, n_pos: f64) -> Vec<f64> {
    let hi = (n_pos + 1.0) / (n_pos + 2.0);
    let lo = 1.0 / (n_neg + 2.0);
    labels.iter().map(|l| if l.is_positive() { hi } else { lo }).collect()
}

pub fn fit_platt(f_vals: &[f64], labels: &[Label], max_newton_iters: usize) -> Result<PlattFit> {
    fit_platt_weighted(f_vals, labels, (1.0, 1.0), max_newton_iters)
}

/// Platt fit where every sample of class `c` carries weight `w_c`. The
/// smoothed targets and the starting offset use the weighted class totals,
/// so balanced weights give a fit that is neutral to the class prior.
pub fn fit_platt_weighted(f_vals: &[f64], labels: &[Label], (w_neg, w_pos): (f64, f64), max_newton_iters: usize) -> Result<PlattFit> {
    if f_vals.len() != labels.len() {
        return Err(Error::Size {
            expected: labels.len(),
            found: f_vals.len(),
        });
    }
    let (n_neg, n_pos) = class_counts(labels);
    if n_neg == 0 || n_pos == 0 {
        return Err(Error::Argument("calibration needs both classes".into()));
    }
    if f_vals.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite decision value".into()));
    }
    if !(w_neg > 0.0 && w_pos > 0.0 && w_neg.is_finite() && w_pos.is_finite()) {
        return Err(Error::Argument("calibration weights must be positive".into()));
    }
    let (e_neg, e_pos) = (w_neg * n_neg as f64, w_pos * n_pos as f64);
    let t = targets_from_counts(labels, e_neg, e_pos);
    let w: Vec<f64> = labels.iter().map(|l| if l.is_positive() { w_pos } else { w_neg }).collect();
    let mut a = 0.0;
    let mut b = ((e_neg + 1.0) / (e_pos + 1.0)).ln();
    let mut fval = nll(f_vals, &t, &w, a, b);
    if !fval.is_finite() {
        return Err(Error::Numerical("non-finite calibration likelihood".into()));
    }
    let mut nll_trace = vec![fval];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_newton_iters {
        let (mut h11, mut h22, mut h21, mut g1, mut g2) = (HESSIAN_RIDGE, HESSIAN_RIDGE, 0.0, 0.0, 0.0);
        for ((&fi, &ti), &wi) in f_vals.iter().zip(&t).zip(&w) {
            let p = PlattSigmoid { a, b }.p_pos(fi);
            let q = 1.0 - p;
            let d2 = wi * p * q;
            h11 += fi * fi * d2;
            h22 += d2;
            h21 += fi * d2;
            let d1 = wi * (ti - p);
            g1 += fi * d1;
            g2 += d1;
        }
        if g1.hypot(g2) < GRAD_TOL {
            converged = true;
            break;
        }
        iterations += 1;
        let det = h11 * h22 - h21 * h21;
        let da = -(h22 * g1 - h21 * g2) / det;
        let db = -(-h21 * g1 + h11 * g2) / det;
        let gd = g1 * da + g2 * db;
        let mut step = 1.0;
        let mut accepted = false;
        while step >= MIN_STEP {
            let (na, nb) = (a + step * da, b + step * db);
            let nf = nll(f_vals, &t, &w, na, nb);
            if nf.is_nan() {
                return Err(Error::Numerical("NaN calibration likelihood".into()));
            }
            if nf < fval + 1e-4 * step * gd {
                a = na;
                b = nb;
                fval = nf;
                nll_trace.push(nf);
                accepted = true;
                break;
            }
            step /= 2.0;
        }
        if !accepted {
            // Line search cannot improve further; the iterate is at the
            // attainable optimum in floating point.
            converged = true;
            break;
        }
    }
    if !fval.is_finite() {
        return Err(Error::Numerical("non-finite calibration likelihood".into()));
    }
    Ok(PlattFit {
        sigmoid: PlattSigmoid { a, b },
        nll_trace,
        iterations,
        converged,
    })
}

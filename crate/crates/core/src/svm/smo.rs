//! Sequential minimal optimization for the box-constrained SVM dual
//!
//! `min ½αᵀQα − eᵀα  s.t.  yᵀα = 0,  0 ≤ α_i ≤ C_i`,  `Q_ij = y_i y_j K_ij`,
//!
//! with second-order working-set selection (Fan, Chen & Lin 2005).

use nalgebra::DMatrix;

use crate::error::{Error, Result};

const TAU: f64 = 1e-12;

#[derive(Debug, Clone)]
pub(crate) struct DualSolution {
    pub alpha: Vec<f64>,
    /// Decision function is `Σ α_i y_i K(x_i, x) − rho`.
    pub rho: f64,
    pub iterations: usize,
    /// Dual objective `eᵀα − ½αᵀQα` after each iteration, when requested.
    pub objective_trace: Option<Vec<f64>>,
}

pub(crate) struct Problem<'a> {
    pub gram: &'a DMatrix<f64>,
    /// ±1 per sample.
    pub y: &'a [f64],
    /// Upper bound `C_i` per sample.
    pub upper: &'a [f64],
}

fn dual_objective(alpha: &[f64], grad: &[f64]) -> f64 {
    // With G = Qα − e: ½αᵀQα − eᵀα = ½αᵀ(G − e).
    -0.5 * alpha.iter().zip(grad).map(|(a, g)| a * (g - 1.0)).sum::<f64>()
}

pub(crate) fn solve(p: &Problem<'_>, eps: f64, max_iter: usize, trace: bool) -> Result<DualSolution> {
    let n = p.y.len();
    let k = p.gram;
    let y = p.y;
    let c = p.upper;
    let mut alpha = vec![0.0f64; n];
    let mut grad = vec![-1.0f64; n];
    let mut objective_trace = trace.then(Vec::new);
    let is_up = |a: f64, t: usize| (y[t] > 0.0 && a < c[t]) || (y[t] < 0.0 && a > 0.0);
    let is_low = |a: f64, t: usize| (y[t] > 0.0 && a > 0.0) || (y[t] < 0.0 && a < c[t]);

    let mut iterations = 0;
    loop {
        let mut gmax = f64::NEG_INFINITY;
        let mut i = usize::MAX;
        for t in 0..n {
            if is_up(alpha[t], t) {
                let v = -y[t] * grad[t];
                if v > gmax {
                    gmax = v;
                    i = t;
                }
            }
        }
        let mut gmin = f64::INFINITY;
        let mut j = usize::MAX;
        let mut best = f64::INFINITY;
        for t in 0..n {
            if !is_low(alpha[t], t) {
                continue;
            }
            let v = -y[t] * grad[t];
            gmin = gmin.min(v);
            if i != usize::MAX && v < gmax {
                let b = gmax - v;
                let a = k[(i, i)] + k[(t, t)] - 2.0 * k[(i, t)];
                let a = if a > 0.0 { a } else { TAU };
                let score = -(b * b) / a;
                if score < best {
                    best = score;
                    j = t;
                }
            }
        }
        if i == usize::MAX || j == usize::MAX || gmax - gmin < eps {
            break;
        }
        if iterations >= max_iter {
            return Err(Error::Convergence(format!(
                "SMO stopped after {max_iter} iterations with KKT gap {}",
                gmax - gmin
            )));
        }
        iterations += 1;

        let (old_i, old_j) = (alpha[i], alpha[j]);
        let quad = {
            let a = k[(i, i)] + k[(j, j)] - 2.0 * k[(i, j)];
            if a > 0.0 {
                a
            } else {
                TAU
            }
        };
        let (ci, cj) = (c[i], c[j]);
        if y[i] != y[j] {
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > ci - cj {
                if alpha[i] > ci {
                    alpha[i] = ci;
                    alpha[j] = ci - diff;
                }
            } else if alpha[j] > cj {
                alpha[j] = cj;
                alpha[i] = cj + diff;
            }
        } else {
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > ci {
                if alpha[i] > ci {
                    alpha[i] = ci;
                    alpha[j] = sum - ci;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > cj {
                if alpha[j] > cj {
                    alpha[j] = cj;
                    alpha[i] = sum - cj;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let (di, dj) = (alpha[i] - old_i, alpha[j] - old_j);
        for t in 0..n {
            grad[t] += y[t] * (y[i] * k[(t, i)] * di + y[j] * k[(t, j)] * dj);
        }
        if let Some(tr) = objective_trace.as_mut() {
            tr.push(dual_objective(&alpha, &grad));
        }
    }

    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numerical("non-finite gradient in SMO".into()));
    }
    Ok(DualSolution {
        rho: compute_rho(&alpha, &grad, y, c),
        alpha,
        iterations,
        objective_trace,
    })
}

fn compute_rho(alpha: &[f64], grad: &[f64], y: &[f64], c: &[f64]) -> f64 {
    let mut ub = f64::INFINITY;
    let mut lb = f64::NEG_INFINITY;
    let mut sum_free = 0.0;
    let mut n_free = 0usize;
    for t in 0..alpha.len() {
        let yg = y[t] * grad[t];
        let at_upper = alpha[t] >= c[t];
        let at_lower = alpha[t] <= 0.0;
        if at_upper {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if at_lower {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            n_free += 1;
            sum_free += yg;
        }
    }
    if n_free > 0 {
        sum_free / n_free as f64
    } else {
        (ub + lb) / 2.0
    }
}

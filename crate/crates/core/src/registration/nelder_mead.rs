//! Downhill simplex minimization with dimension-adaptive coefficients
//! (Gao & Han, 2012).

#[derive(Debug, Clone)]
pub(crate) struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Minimizes `f` from `x0`. The initial simplex is `x0` plus `step` along each
/// axis. Stops once every vertex is within `tol` (max-norm) of the best vertex
/// or after `max_iters` iterations. `f` must not return NaN; the caller maps
/// NaN to an error before it reaches here.
pub(crate) fn minimize(mut f: impl FnMut(&[f64]) -> f64, x0: &[f64], step: f64, tol: f64, max_iters: usize) -> Minimum {
    let n = x0.len();
    let nf = n as f64;
    let (alpha, chi, gamma, delta) = (1.0, 1.0 + 2.0 / nf, 0.75 - 0.5 / nf, 1.0 - 1.0 / nf);

    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    simplex.push(x0.to_vec());
    for i in 0..n {
        let mut v = x0.to_vec();
        v[i] += step;
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(|v| f(v)).collect();

    let mut order: Vec<usize> = (0..=n).collect();
    let mut iterations = 0;
    let mut converged = false;
    let mut centroid = vec![0.0; n];
    let point = |c: &[f64], towards: &[f64], coef: f64| -> Vec<f64> { c.iter().zip(towards).map(|(ci, ti)| ci + coef * (ti - ci)).collect() };

    loop {
        // Stable ordering: ties keep the earlier vertex first.
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
        let best = order[0];
        let diameter = order[1..]
            .iter()
            .map(|&i| simplex[i].iter().zip(&simplex[best]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        if diameter < tol {
            converged = true;
            break;
        }
        if iterations >= max_iters {
            break;
        }
        iterations += 1;

        let worst = order[n];
        let second_worst = order[n - 1];
        centroid.iter_mut().for_each(|c| *c = 0.0);
        for &i in &order[..n] {
            for (c, x) in centroid.iter_mut().zip(&simplex[i]) {
                *c += x / nf;
            }
        }

        let reflected = point(&centroid, &simplex[worst], -alpha);
        let fr = f(&reflected);
        if fr < values[best] {
            let expanded = point(&centroid, &reflected, chi);
            let fe = f(&expanded);
            if fe < fr {
                simplex[worst] = expanded;
                values[worst] = fe;
            } else {
                simplex[worst] = reflected;
                values[worst] = fr;
            }
            continue;
        }
        if fr < values[second_worst] {
            simplex[worst] = reflected;
            values[worst] = fr;
            continue;
        }
        if fr < values[worst] {
            let outside = point(&centroid, &reflected, gamma);
            let fo = f(&outside);
            if fo <= fr {
                simplex[worst] = outside;
                values[worst] = fo;
                continue;
            }
        } else {
            let inside = point(&centroid, &simplex[worst], gamma);
            let fi = f(&inside);
            if fi < values[worst] {
                simplex[worst] = inside;
                values[worst] = fi;
                continue;
            }
        }
        // Shrink toward the best vertex.
        let anchor = simplex[best].clone();
        for &i in &order[1..] {
            simplex[i] = point(&anchor, &simplex[i], delta);
            values[i] = f(&simplex[i]);
        }
    }

    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    Minimum {
        x: simplex[order[0]].clone(),
        value: values[order[0]],
        iterations,
        converged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finds_quadratic_minimum() {
        let target = [1.0, -2.0, 0.5, 3.0];
        let m = minimize(
            |x| x.iter().zip(&target).map(|(a, b)| (a - b).powi(2) * 2.0).sum(),
            &[0.0; 4],
            0.5,
            1e-9,
            5000,
        );
        assert!(m.converged);
        for (a, b) in m.x.iter().zip(&target) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn rosenbrock_2d() {
        let m = minimize(
            |x| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2),
            &[-1.2, 1.0],
            0.1,
            1e-10,
            10_000,
        );
        assert!((m.x[0] - 1.0).abs() < 1e-5 && (m.x[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn never_worse_than_start() {
        let f = |x: &[f64]| (x[0] * 3.0).sin() + x[1].abs();
        let m = minimize(f, &[0.3, 0.2], 0.05, 1e-12, 7);
        assert!(m.value <= f(&[0.3, 0.2]));
        assert_eq!(m.iterations, 7);
    }
}

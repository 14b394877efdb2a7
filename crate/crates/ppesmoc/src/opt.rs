//! Box-constrained quasi-Newton maximization (projected L-BFGS with
//! backtracking line search), used to optimize acquisition functions.

use crate::error::Result;

const MEMORY: usize = 10;
const ARMIJO: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 30;
const GRAD_TOL: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct OptResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
}

fn project(x: &mut [f64], bounds: &[(f64, f64)]) {
    for (xi, &(lo, hi)) in x.iter_mut().zip(bounds.iter()) {
        *xi = xi.clamp(lo, hi);
    }
}

/// Components of the ascent gradient that cannot move (active bound and
/// pointing outward) are zeroed; used for the stopping test.
fn projected_grad(x: &[f64], g: &[f64], bounds: &[(f64, f64)]) -> f64 {
    let mut m: f64 = 0.0;
    for i in 0..x.len() {
        let (lo, hi) = bounds[i];
        let blocked = (x[i] <= lo && g[i] < 0.0) || (x[i] >= hi && g[i] > 0.0);
        if !blocked {
            m = m.max(g[i].abs());
        }
    }
    m
}

/// L-BFGS two-loop recursion for the minimization of -f; returns an ascent
/// direction for f.
fn two_loop(g: &[f64], s_hist: &[Vec<f64>], y_hist: &[Vec<f64>]) -> Vec<f64> {
    // gradient of the minimized objective is -g
    let n = g.len();
    let mut q: Vec<f64> = g.iter().map(|v| -v).collect();
    let m = s_hist.len();
    let mut alphas = vec![0.0; m];
    let mut rhos = vec![0.0; m];
    for i in (0..m).rev() {
        let sy: f64 = s_hist[i].iter().zip(&y_hist[i]).map(|(a, b)| a * b).sum();
        let rho = 1.0 / sy;
        let a = rho * s_hist[i].iter().zip(&q).map(|(a, b)| a * b).sum::<f64>();
        for j in 0..n {
            q[j] -= a * y_hist[i][j];
        }
        alphas[i] = a;
        rhos[i] = rho;
    }
    if m > 0 {
        let sy: f64 = s_hist[m - 1]
            .iter()
            .zip(&y_hist[m - 1])
            .map(|(a, b)| a * b)
            .sum();
        let yy: f64 = y_hist[m - 1].iter().map(|v| v * v).sum();
        let gamma = sy / yy.max(1e-300);
        for v in q.iter_mut() {
            *v *= gamma;
        }
    }
    for i in 0..m {
        let b = rhos[i] * y_hist[i].iter().zip(&q).map(|(a, b)| a * b).sum::<f64>();
        for j in 0..n {
            q[j] += s_hist[i][j] * (alphas[i] - b);
        }
    }
    // q approximates -H^{-1} grad(-f); negate to get the ascent direction
    q.iter().map(|v| -v).collect()
}

/// Maximizes `f` (which returns value and gradient) inside the box.
/// Evaluation errors at trial points shrink the step; an error at the
/// start point is propagated.
pub fn maximize_box(
    f: &mut impl FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    bounds: &[(f64, f64)],
    x0: &[f64],
    max_iters: usize,
) -> Result<OptResult> {
    let _ = bounds.len();
    let mut x = x0.to_vec();
    project(&mut x, bounds);
    let (mut value, mut grad) = f(&x)?;
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut iterations = 0;
    for _ in 0..max_iters {
        if projected_grad(&x, &grad, bounds) < GRAD_TOL {
            break;
        }
        let mut dir = two_loop(&grad, &s_hist, &y_hist);
        let dg: f64 = dir.iter().zip(&grad).map(|(a, b)| a * b).sum();
        if !dg.is_finite() || dg <= 0.0 {
            // not an ascent direction; fall back to steepest ascent
            dir = grad.clone();
            s_hist.clear();
            y_hist.clear();
        }
        let scale = dir.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut t = if scale > 1.0 { 1.0 / scale } else { 1.0 };
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let mut xn: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + t * d).collect();
            project(&mut xn, bounds);
            let moved: f64 = xn
                .iter()
                .zip(&x)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if moved < 1e-14 {
                break;
            }
            if let Ok((vn, gn)) = f(&xn) {
                let pred: f64 = grad.iter().zip(&xn).zip(&x).map(|((g, a), b)| g * (a - b)).sum();
                if vn.is_finite() && vn >= value + ARMIJO * pred.max(0.0) && vn > value {
                    accepted = Some((xn, vn, gn));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((xn, vn, gn)) = accepted else {
            break;
        };
        iterations += 1;
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        // curvature pair for the minimization of -f: y = -(gn - g)
        let y: Vec<f64> = gn.iter().zip(&grad).map(|(a, b)| -(a - b)).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        if sy > 1e-12 {
            s_hist.push(s);
            y_hist.push(y);
            if s_hist.len() > MEMORY {
                s_hist.remove(0);
                y_hist.remove(0);
            }
        }
        x = xn;
        value = vn;
        grad = gn;
    }
    Ok(OptResult {
        x,
        value,
        grad,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn quad(center: &[f64]) -> impl FnMut(&[f64]) -> Result<(f64, Vec<f64>)> + '_ {
        move |x: &[f64]| {
            let v: f64 = -x
                .iter()
                .zip(center)
                .map(|(a, c)| (a - c) * (a - c))
                .sum::<f64>();
            let g: Vec<f64> = x.iter().zip(center).map(|(a, c)| -2.0 * (a - c)).collect();
            Ok((v, g))
        }
    }

    #[test]
    fn finds_interior_maximum() {
        let c = [0.3, -0.4, 0.7];
        let bounds = [(-1.0, 1.0); 3];
        let r = maximize_box(&mut quad(&c), &bounds, &[0.9, 0.9, -0.9], 100).unwrap();
        for i in 0..3 {
            assert_relative_eq!(r.x[i], c[i], epsilon = 1e-6);
        }
        assert!(r.value > -1e-10);
    }

    #[test]
    fn respects_bounds_for_exterior_maximum() {
        let c = [2.0, -3.0];
        let bounds = [(-1.0, 1.0); 2];
        let r = maximize_box(&mut quad(&c), &bounds, &[0.0, 0.0], 100).unwrap();
        assert_relative_eq!(r.x[0], 1.0, epsilon = 1e-9);
        assert_relative_eq!(r.x[1], -1.0, epsilon = 1e-9);
    }

    #[test]
    fn zero_iterations_returns_start() {
        let c = [0.0, 0.0];
        let bounds = [(-1.0, 1.0); 2];
        let r = maximize_box(&mut quad(&c), &bounds, &[0.5, 0.5], 0).unwrap();
        assert_eq!(r.x, vec![0.5, 0.5]);
        assert_relative_eq!(r.value, -0.5);
    }

    #[test]
    fn rosenbrock_like_valley() {
        // maximize -(1-x)^2 - 100 (y - x^2)^2
        let mut f = |x: &[f64]| {
            let (a, b) = (x[0], x[1]);
            let v = -((1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2));
            let g = vec![
                2.0 * (1.0 - a) + 400.0 * a * (b - a * a),
                -200.0 * (b - a * a),
            ];
            Ok((v, g))
        };
        let bounds = [(-2.0, 2.0); 2];
        let r = maximize_box(&mut f, &bounds, &[-1.2, 1.0], 400).unwrap();
        assert!(r.value > -1e-6, "value {}", r.value);
        assert_relative_eq!(r.x[0], 1.0, epsilon = 1e-3);
    }
}

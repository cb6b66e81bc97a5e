//! Box-constrained quasi-Newton minimization.
//!
//! Projected BFGS: variables sitting on a bound with the gradient pointing
//! outward are frozen for the step, the rest follow the inverse-Hessian
//! direction, and the trial point is projected back into the box. A
//! backtracking Armijo search treats failed evaluations as `+∞`.

#[derive(Debug, Clone)]
pub(crate) struct OptimResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
}

/// Projected gradient: zero where a bound blocks descent.
pub(crate) fn projected(x: &[f64], g: &[f64], lo: &[f64], hi: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(g)
        .zip(lo.iter().zip(hi))
        .map(|((&xi, &gi), (&l, &h))| {
            if (xi <= l && gi > 0.0) || (xi >= h && gi < 0.0) {
                0.0
            } else {
                gi
            }
        })
        .collect()
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn clamp_into(x: &mut [f64], lo: &[f64], hi: &[f64]) {
    for ((v, &l), &h) in x.iter_mut().zip(lo).zip(hi) {
        *v = v.clamp(l, h);
    }
}

/// Minimizes `eval`, which returns the value and gradient or `None` when the
/// point cannot be evaluated.
pub(crate) fn minimize<F>(mut eval: F, x0: &[f64], lo: &[f64], hi: &[f64], tol: f64, max_iter: usize) -> Option<OptimResult>
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    clamp_into(&mut x, lo, hi);
    let (mut f, mut g) = eval(&x)?;
    let mut h = identity(n);
    let mut fresh = true;
    let mut iterations = 0;

    while iterations < max_iter {
        let pg = projected(&x, &g, lo, hi);
        if norm(&pg) < tol {
            return Some(OptimResult {
                x,
                f,
                grad: g,
                iterations,
            });
        }
        iterations += 1;
        let free: Vec<bool> = pg.iter().zip(&g).map(|(p, g)| *p != 0.0 || *g == 0.0).collect();

        let mut dir = vec![0.0; n];
        for i in 0..n {
            if !free[i] {
                continue;
            }
            dir[i] = -(0..n).filter(|&j| free[j]).map(|j| h[i * n + j] * g[j]).sum::<f64>();
        }
        let slope: f64 = dir.iter().zip(&g).map(|(a, b)| a * b).sum();
        if slope >= 0.0 {
            h = identity(n);
            fresh = true;
            dir = pg.iter().map(|v| -v).collect();
        }
        let mut t = if fresh { (1.0 / norm(&dir)).min(1.0) } else { 1.0 };

        let mut accepted = None;
        for _ in 0..60 {
            let mut xn: Vec<f64> = x.iter().zip(&dir).map(|(a, b)| a + t * b).collect();
            clamp_into(&mut xn, lo, hi);
            let step_dot: f64 = xn.iter().zip(&x).zip(&g).map(|((a, b), c)| (a - b) * c).sum();
            if let Some((fnew, gnew)) = eval(&xn) {
                if fnew.is_finite() && fnew <= f + 1e-4 * step_dot {
                    accepted = Some((xn, fnew, gnew));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((xn, fnew, gnew)) = accepted else {
            if fresh {
                break;
            }
            h = identity(n);
            fresh = true;
            continue;
        };

        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gnew.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        if sy > 1e-12 * norm(&s) * norm(&y) && sy > 0.0 {
            if fresh {
                // scale the initial inverse Hessian
                let yy: f64 = y.iter().map(|v| v * v).sum();
                let scale = sy / yy;
                for v in h.iter_mut() {
                    *v *= scale;
                }
            }
            bfgs_update(&mut h, &s, &y, sy);
            fresh = false;
        }
        let df = f - fnew;
        x = xn;
        f = fnew;
        g = gnew;
        if df.abs() <= 1e-15 * f.abs().max(1.0) && norm(&s) < 1e-12 {
            break;
        }
    }
    Some(OptimResult {
        x,
        f,
        grad: g,
        iterations,
    })
}

fn identity(n: usize) -> Vec<f64> {
    let mut h = vec![0.0; n * n];
    for i in 0..n {
        h[i * n + i] = 1.0;
    }
    h
}

fn bfgs_update(h: &mut [f64], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let rho = 1.0 / sy;
    let hy: Vec<f64> = (0..n).map(|i| (0..n).map(|j| h[i * n + j] * y[j]).sum()).collect();
    let yhy: f64 = y.iter().zip(&hy).map(|(a, b)| a * b).sum();
    for i in 0..n {
        for j in 0..n {
            h[i * n + j] += -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock() {
        let eval = |x: &[f64]| {
            let (a, b) = (x[0], x[1]);
            let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
            Some((f, g))
        };
        let r = minimize(eval, &[-1.2, 1.0], &[-5.0, -5.0], &[5.0, 5.0], 1e-8, 500).unwrap();
        assert!(norm(&r.grad) < 1e-8);
        assert!((r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn active_bound() {
        // minimum of (x+1)² + (y-2)² on x ≥ 0 is (0, 2)
        let eval = |x: &[f64]| Some(((x[0] + 1.0).powi(2) + (x[1] - 2.0).powi(2), vec![2.0 * (x[0] + 1.0), 2.0 * (x[1] - 2.0)]));
        let r = minimize(eval, &[3.0, -1.0], &[0.0, -10.0], &[10.0, 10.0], 1e-10, 100).unwrap();
        assert!(norm(&projected(&r.x, &r.grad, &[0.0, -10.0], &[10.0, 10.0])) < 1e-10);
        assert_eq!(r.x[0], 0.0);
        assert!((r.x[1] - 2.0).abs() < 1e-9);
    }
}

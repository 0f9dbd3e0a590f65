//! Derivative-free-interface quasi-Newton minimisation (BFGS on central
//! finite-difference gradients) and finite-difference Hessians.
//!
//! Dimensions here are tiny (at most a handful of parameters), so the
//! finite-difference cost is irrelevant next to the objective itself.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone)]
pub struct MinimizeOptions {
    pub max_iter: usize,
    pub grad_tol: f64,
    pub f_tol: f64,
    /// Box applied to every coordinate.
    pub lower: f64,
    pub upper: f64,
}

impl Default for MinimizeOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            grad_tol: 1e-7,
            f_tol: 1e-12,
            lower: f64::NEG_INFINITY,
            upper: f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<String>,
}

fn step_size(x: f64) -> f64 {
    1e-6 * x.abs().max(1.0)
}

fn eval<F: Fn(&[f64]) -> f64>(f: &F, x: &[f64]) -> f64 {
    let v = f(x);
    if v.is_nan() {
        f64::INFINITY
    } else {
        v
    }
}

fn clamp(x: &mut [f64], opts: &MinimizeOptions) {
    for v in x.iter_mut() {
        *v = v.clamp(opts.lower, opts.upper);
    }
}

pub fn gradient<F: Fn(&[f64]) -> f64>(f: &F, x: &[f64]) -> DVector<f64> {
    let mut g = DVector::zeros(x.len());
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let h = step_size(x[i]);
        xp[i] = x[i] + h;
        let fp = eval(f, &xp);
        xp[i] = x[i] - h;
        let fm = eval(f, &xp);
        xp[i] = x[i];
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

fn diag_curvature<F: Fn(&[f64]) -> f64>(f: &F, x: &[f64], f0: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let h = 1e-4 * x[i].abs().max(1.0);
            xp[i] = x[i] + h;
            let fp = eval(f, &xp);
            xp[i] = x[i] - h;
            let fm = eval(f, &xp);
            xp[i] = x[i];
            (fp - 2.0 * f0 + fm) / (h * h)
        })
        .collect()
}

/// Central-difference Hessian with per-coordinate steps scaled to the
/// local curvature.
pub fn hessian<F: Fn(&[f64]) -> f64>(f: &F, x: &[f64]) -> DMatrix<f64> {
    let n = x.len();
    let f0 = eval(f, x);
    let d2 = diag_curvature(f, x, f0);
    let h: Vec<f64> = d2
        .iter()
        .zip(x)
        .map(|(&c, &xi)| {
            if c.is_finite() && c > 0.0 {
                (0.05 / c.sqrt()).clamp(1e-7, 1e-1 * xi.abs().max(1.0))
            } else {
                1e-4 * xi.abs().max(1.0)
            }
        })
        .collect();
    let mut hess = DMatrix::zeros(n, n);
    let mut xp = x.to_vec();
    for i in 0..n {
        xp[i] = x[i] + h[i];
        let fp = eval(f, &xp);
        xp[i] = x[i] - h[i];
        let fm = eval(f, &xp);
        xp[i] = x[i];
        hess[(i, i)] = (fp - 2.0 * f0 + fm) / (h[i] * h[i]);
        for j in 0..i {
            let mut corner = |si: f64, sj: f64| {
                xp[i] = x[i] + si * h[i];
                xp[j] = x[j] + sj * h[j];
                let v = eval(f, &xp);
                xp[i] = x[i];
                xp[j] = x[j];
                v
            };
            let v = (corner(1.0, 1.0) - corner(1.0, -1.0) - corner(-1.0, 1.0)
                + corner(-1.0, -1.0))
                / (4.0 * h[i] * h[j]);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    hess
}

/// Minimises `f` from `x0` with BFGS and a backtracking Armijo search.
pub fn minimize<F: Fn(&[f64]) -> f64>(f: F, x0: &[f64], opts: &MinimizeOptions) -> Minimum {
    let n = x0.len();
    let mut x = x0.to_vec();
    clamp(&mut x, opts);
    let mut fx = eval(&f, &x);
    let mut trace = vec![format!("start x={x:?} f={fx:.12e}")];
    if n == 0 {
        return Minimum {
            x,
            f: fx,
            iterations: 0,
            converged: fx.is_finite(),
            trace,
        };
    }

    let initial_inverse = |x: &[f64], fx: f64| {
        let d2 = diag_curvature(&f, x, fx);
        DMatrix::from_diagonal(&DVector::from_iterator(
            n,
            d2.iter()
                .map(|&c| if c.is_finite() && c > 1e-12 { 1.0 / c } else { 1.0 }),
        ))
    };
    let mut hinv = initial_inverse(&x, fx);
    let mut g = gradient(&f, &x);
    let mut converged = false;
    let mut iterations = 0;

    for it in 0..opts.max_iter {
        iterations = it + 1;
        if g.amax() < opts.grad_tol {
            converged = true;
            break;
        }
        let mut d = -(&hinv * &g);
        if g.dot(&d) >= 0.0 {
            hinv = initial_inverse(&x, fx);
            d = -(&hinv * &g);
        }
        let slope = g.dot(&d);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let mut xn: Vec<f64> = x.iter().zip(d.iter()).map(|(a, b)| a + t * b).collect();
            clamp(&mut xn, opts);
            let fnew = eval(&f, &xn);
            if fnew <= fx + 1e-4 * t * slope || (fnew < fx && t < 1e-8) {
                accepted = Some((xn, fnew));
                break;
            }
            t *= 0.5;
        }
        let Some((xn, fnew)) = accepted else {
            trace.push(format!("iter {iterations}: line search failed at f={fx:.12e}"));
            converged = g.amax() < opts.grad_tol.sqrt();
            break;
        };
        let gn = gradient(&f, &xn);
        let s = DVector::from_iterator(n, xn.iter().zip(&x).map(|(a, b)| a - b));
        let y = &gn - &g;
        let sy = s.dot(&y);
        if sy > 1e-300 {
            let rho = 1.0 / sy;
            let eye = DMatrix::<f64>::identity(n, n);
            let left = &eye - rho * &s * y.transpose();
            let right = &eye - rho * &y * s.transpose();
            hinv = &left * &hinv * &right + rho * &s * s.transpose();
        }
        let df = fx - fnew;
        x = xn;
        fx = fnew;
        g = gn;
        trace.push(format!("iter {iterations}: f={fx:.12e} |g|={:.3e}", g.amax()));
        let max_step = s.iter().zip(&x).map(|(si, xi)| si.abs() / xi.abs().max(1.0)).fold(0.0, f64::max);
        if df.abs() <= opts.f_tol * (1.0 + fx.abs()) && max_step < 1e-8 {
            converged = true;
            break;
        }
    }

    Minimum {
        x,
        f: fx,
        iterations,
        converged: converged && fx.is_finite(),
        trace,
    }
}

//! Derivative-free optimizers and finite-difference derivatives.
//!
//! All minimizers here minimize; callers maximizing a log-likelihood pass
//! its negation. Non-finite objective values are treated as `+∞`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct NelderMeadOptions {
    pub max_evals: usize,
    /// Absolute spread of simplex values at convergence.
    pub f_tol: f64,
    /// Max coordinate distance from the best vertex at convergence.
    pub x_tol: f64,
    /// Fresh-simplex restarts around the incumbent after convergence.
    pub restarts: usize,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        NelderMeadOptions { max_evals: 20_000, f_tol: 1e-10, x_tol: 1e-8, restarts: 2 }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub evals: usize,
    pub converged: bool,
}

#[inline]
fn sanitize(v: f64) -> f64 {
    if v.is_nan() {
        f64::INFINITY
    } else {
        v
    }
}

/// Nelder-Mead simplex minimization with dimension-adapted coefficients
/// (Gao & Han) and restarts from the incumbent.
pub fn nelder_mead<F>(mut f: F, x0: &[f64], steps: &[f64], opts: &NelderMeadOptions) -> Minimum
where
    F: FnMut(&[f64]) -> f64,
{
    let dim = x0.len();
    assert_eq!(dim, steps.len());
    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        sanitize(f(x))
    };

    if dim == 0 {
        let value = eval(x0, &mut evals);
        return Minimum { x: vec![], value, evals, converged: true };
    }

    let d = dim as f64;
    let (alpha, gamma, rho, sigma) =
        if dim >= 3 { (1.0, 1.0 + 2.0 / d, 0.75 - 0.5 / d, 1.0 - 1.0 / d) } else { (1.0, 2.0, 0.5, 0.5) };

    let mut best_x = x0.to_vec();
    let mut best_f = eval(x0, &mut evals);
    let mut converged = false;
    let mut step_scale = 1.0;

    for round in 0..=opts.restarts {
        let start_f = best_f;
        let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(dim + 1);
        let mut values: Vec<f64> = Vec::with_capacity(dim + 1);
        simplex.push(best_x.clone());
        values.push(best_f);
        for j in 0..dim {
            let mut v = best_x.clone();
            v[j] += steps[j] * step_scale;
            values.push(eval(&v, &mut evals));
            simplex.push(v);
        }

        converged = false;
        while evals < opts.max_evals {
            let mut order: Vec<usize> = (0..=dim).collect();
            order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
            simplex = order.iter().map(|&i| simplex[i].clone()).collect();
            values = order.iter().map(|&i| values[i]).collect();

            let spread = values[dim] - values[0];
            let diam = simplex[1..]
                .iter()
                .flat_map(|v| v.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()))
                .fold(0.0_f64, f64::max);
            if spread.is_finite() && spread <= opts.f_tol && diam <= opts.x_tol {
                converged = true;
                break;
            }

            let mut centroid = vec![0.0; dim];
            for v in &simplex[..dim] {
                for (c, x) in centroid.iter_mut().zip(v) {
                    *c += x / d;
                }
            }
            let along =
                |t: f64| -> Vec<f64> { centroid.iter().zip(&simplex[dim]).map(|(c, w)| c + t * (c - w)).collect() };

            let xr = along(alpha);
            let fr = eval(&xr, &mut evals);
            if fr < values[0] {
                let xe = along(alpha * gamma);
                let fe = eval(&xe, &mut evals);
                if fe < fr {
                    simplex[dim] = xe;
                    values[dim] = fe;
                } else {
                    simplex[dim] = xr;
                    values[dim] = fr;
                }
                continue;
            }
            if fr < values[dim - 1] {
                simplex[dim] = xr;
                values[dim] = fr;
                continue;
            }
            let (xc, fc) = if fr < values[dim] {
                let xc = along(alpha * rho);
                let fc = eval(&xc, &mut evals);
                (xc, fc)
            } else {
                let xc = along(-rho);
                let fc = eval(&xc, &mut evals);
                (xc, fc)
            };
            if fc < values[dim].min(fr) {
                simplex[dim] = xc;
                values[dim] = fc;
                continue;
            }
            for k in 1..=dim {
                let shrunk: Vec<f64> = simplex[0].iter().zip(&simplex[k]).map(|(b, x)| b + sigma * (x - b)).collect();
                values[k] = eval(&shrunk, &mut evals);
                simplex[k] = shrunk;
            }
        }

        let (ib, _) = values.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).expect("simplex is nonempty");
        if values[ib] <= best_f {
            best_f = values[ib];
            best_x = simplex[ib].clone();
        }
        if !converged || evals >= opts.max_evals {
            break;
        }
        if round > 0 && start_f - best_f <= opts.f_tol {
            break;
        }
        step_scale *= 0.1;
    }

    Minimum { x: best_x, value: best_f, evals, converged }
}

#[derive(Debug, Clone)]
pub struct BfgsOptions {
    pub max_iter: usize,
    /// Max-norm of the gradient at convergence.
    pub g_tol: f64,
    /// Objective decrease below which two successive iterations stop the run.
    pub f_tol: f64,
    /// Largest trial step (max-norm) while the inverse Hessian is the
    /// identity.
    pub max_step: f64,
    /// Largest trial step once curvature information is available.
    pub max_step_later: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        BfgsOptions { max_iter: 200, g_tol: 1e-6, f_tol: 1e-12, max_step: 0.05, max_step_later: 0.5 }
    }
}

/// Quasi-Newton (BFGS) minimization with finite-difference gradients and
/// backtracking Armijo line search. A local method: it follows the basin of
/// `x0`.
pub fn bfgs<F>(mut f: F, x0: &[f64], opts: &BfgsOptions) -> Minimum
where
    F: FnMut(&[f64]) -> f64,
{
    let k = x0.len();
    let mut evals = 0usize;
    let mut x = x0.to_vec();
    let mut fx = sanitize(f(&x));
    evals += 1;
    if !fx.is_finite() {
        return Minimum { x, value: fx, evals, converged: false };
    }
    let mut g = central_gradient(|p| sanitize(f(p)), &x);
    evals += 2 * k;
    let mut hinv = DMatrix::<f64>::identity(k, k);
    let mut first = true;
    let mut small = 0;
    let mut converged = false;
    for _ in 0..opts.max_iter {
        if g.iter().any(|v| !v.is_finite()) {
            break;
        }
        if g.iter().fold(0.0_f64, |m, v| m.max(v.abs())) < opts.g_tol {
            converged = true;
            break;
        }
        let gv = nalgebra::DVector::from_column_slice(&g);
        let mut dir = -(&hinv * &gv);
        if dir.dot(&gv) >= 0.0 {
            hinv = DMatrix::identity(k, k);
            first = true;
            dir = -gv.clone();
        }
        let dmax = dir.amax();
        let cap = if first { opts.max_step } else { opts.max_step_later };
        let mut t = if dmax > cap { cap / dmax } else { 1.0 };
        let slope = dir.dot(&gv);
        let mut accepted = None;
        for _ in 0..40 {
            let trial: Vec<f64> = x.iter().zip(dir.iter()).map(|(a, d)| a + t * d).collect();
            let ft = sanitize(f(&trial));
            evals += 1;
            if ft.is_finite() && ft <= fx + 1e-4 * t * slope {
                accepted = Some((trial, ft));
                break;
            }
            t *= 0.5;
        }
        let Some((xn, fnew)) = accepted else { break };
        let gn = central_gradient(|p| sanitize(f(p)), &xn);
        evals += 2 * k;
        let s_vec = nalgebra::DVector::from_iterator(k, xn.iter().zip(&x).map(|(a, b)| a - b));
        let y_vec = nalgebra::DVector::from_iterator(k, gn.iter().zip(&g).map(|(a, b)| a - b));
        let sy = s_vec.dot(&y_vec);
        if sy > 1e-12 * s_vec.norm() * y_vec.norm() {
            if first {
                hinv *= sy / y_vec.dot(&y_vec);
                first = false;
            }
            let rho = 1.0 / sy;
            let hy = &hinv * &y_vec;
            let yhy = y_vec.dot(&hy);
            hinv += (&s_vec * s_vec.transpose()) * (rho * rho * yhy + rho)
                - (&hy * s_vec.transpose() + &s_vec * hy.transpose()) * rho;
        }
        let decrease = fx - fnew;
        x = xn;
        fx = fnew;
        g = gn;
        if decrease < opts.f_tol * (1.0 + fx.abs()) {
            small += 1;
            if small >= 2 {
                converged = true;
                break;
            }
        } else {
            small = 0;
        }
    }
    Minimum { x, value: fx, evals, converged }
}

/// Brent's golden-section/parabolic minimization on `[a, b]`.
pub fn brent_min<F>(mut f: F, a: f64, b: f64, tol: f64, max_iter: usize) -> (f64, f64)
where
    F: FnMut(f64) -> f64,
{
    const CGOLD: f64 = 0.381_966_011_250_105_1;
    let (mut a, mut b) = if a < b { (a, b) } else { (b, a) };
    let mut x = a + CGOLD * (b - a);
    let (mut w, mut v) = (x, x);
    let mut fx = sanitize(f(x));
    let (mut fw, mut fv) = (fx, fx);
    let mut d = 0.0_f64;
    let mut e = 0.0_f64;

    for _ in 0..max_iter {
        let xm = 0.5 * (a + b);
        let tol1 = tol * x.abs() + 1e-14;
        let tol2 = 2.0 * tol1;
        if (x - xm).abs() <= tol2 - 0.5 * (b - a) {
            break;
        }
        let mut golden = true;
        if e.abs() > tol1 {
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            let etemp = e;
            e = d;
            if p.abs() < (0.5 * q * etemp).abs() && p > q * (a - x) && p < q * (b - x) {
                d = p / q;
                let u = x + d;
                if u - a < tol2 || b - u < tol2 {
                    d = if xm >= x { tol1 } else { -tol1 };
                }
                golden = false;
            }
        }
        if golden {
            e = if x >= xm { a - x } else { b - x };
            d = CGOLD * e;
        }
        let u = if d.abs() >= tol1 { x + d } else { x + tol1.copysign(d) };
        let fu = sanitize(f(u));
        if fu <= fx {
            if u >= x {
                a = x;
            } else {
                b = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    (x, fx)
}

/// Brent's bracketed root finder. `f(a)` and `f(b)` must differ in sign.
pub fn brent_root<F>(mut f: F, a: f64, b: f64, tol: f64, max_iter: usize) -> Result<f64>
where
    F: FnMut(f64) -> f64,
{
    let (mut a, mut b) = (a, b);
    let (mut fa, mut fb) = (f(a), f(b));
    if fa == 0.0 {
        return Ok(a);
    }
    if fb == 0.0 {
        return Ok(b);
    }
    if fa.signum() == fb.signum() || !fa.is_finite() || !fb.is_finite() {
        return Err(Error::Domain(format!("root not bracketed on [{a}, {b}]")));
    }
    let (mut c, mut fc) = (a, fa);
    let mut d = b - a;
    let mut e = d;
    for _ in 0..max_iter {
        if fb.signum() == fc.signum() {
            c = a;
            fc = fa;
            d = b - a;
            e = d;
        }
        if fc.abs() < fb.abs() {
            a = b;
            b = c;
            c = a;
            fa = fb;
            fb = fc;
            fc = fa;
        }
        let tol1 = 2.0 * f64::EPSILON * b.abs() + 0.5 * tol;
        let xm = 0.5 * (c - b);
        if xm.abs() <= tol1 || fb == 0.0 {
            return Ok(b);
        }
        if e.abs() >= tol1 && fa.abs() > fb.abs() {
            let s = fb / fa;
            let (mut p, mut q);
            if a == c {
                p = 2.0 * xm * s;
                q = 1.0 - s;
            } else {
                let qq = fa / fc;
                let r = fb / fc;
                p = s * (2.0 * xm * qq * (qq - r) - (b - a) * (r - 1.0));
                q = (qq - 1.0) * (r - 1.0) * (s - 1.0);
            }
            if p > 0.0 {
                q = -q;
            }
            p = p.abs();
            let min1 = 3.0 * xm * q - (tol1 * q).abs();
            let min2 = (e * q).abs();
            if 2.0 * p < min1.min(min2) {
                e = d;
                d = p / q;
            } else {
                d = xm;
                e = d;
            }
        } else {
            d = xm;
            e = d;
        }
        a = b;
        fa = fb;
        b += if d.abs() > tol1 { d } else { tol1.copysign(xm) };
        fb = f(b);
        if !fb.is_finite() {
            return Err(Error::NonFinite("root finder objective".into()));
        }
    }
    Ok(b)
}

#[inline]
fn fd_step(x: f64) -> f64 {
    1e-4 * x.abs().max(1.0)
}

/// Central-difference Hessian with steps `1e-4·max(1, |x_j|)`, symmetrized.
pub fn numerical_hessian<F>(mut f: F, x: &[f64]) -> Result<DMatrix<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    let k = x.len();
    let h: Vec<f64> = x.iter().map(|&v| fd_step(v)).collect();
    let f0 = f(x);
    let mut pt = x.to_vec();
    let mut m = DMatrix::<f64>::zeros(k, k);
    for i in 0..k {
        pt[i] = x[i] + h[i];
        let fp = f(&pt);
        pt[i] = x[i] - h[i];
        let fm = f(&pt);
        pt[i] = x[i];
        m[(i, i)] = (fp - 2.0 * f0 + fm) / (h[i] * h[i]);
        for j in 0..i {
            let mut corner = |si: f64, sj: f64, pt: &mut Vec<f64>| {
                pt[i] = x[i] + si * h[i];
                pt[j] = x[j] + sj * h[j];
                let v = f(pt);
                pt[i] = x[i];
                pt[j] = x[j];
                v
            };
            let fpp = corner(1.0, 1.0, &mut pt);
            let fpm = corner(1.0, -1.0, &mut pt);
            let fmp = corner(-1.0, 1.0, &mut pt);
            let fmm = corner(-1.0, -1.0, &mut pt);
            let v = (fpp - fpm - fmp + fmm) / (4.0 * h[i] * h[j]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    let bad: Vec<(usize, usize)> =
        (0..k).flat_map(|i| (0..=i).map(move |j| (i, j))).filter(|&(i, j)| !m[(i, j)].is_finite()).collect();
    if bad.is_empty() {
        Ok(m)
    } else {
        Err(Error::NonFiniteHessian(bad))
    }
}

/// Central-difference gradient with Richardson extrapolation over steps
/// `h` and `h/2`, `h` as in the Hessian.
pub fn numerical_gradient<F>(mut f: F, x: &[f64]) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut pt = x.to_vec();
    let mut central = |i: usize, h: f64, pt: &mut Vec<f64>| {
        pt[i] = x[i] + h;
        let fp = f(pt);
        pt[i] = x[i] - h;
        let fm = f(pt);
        pt[i] = x[i];
        (fp - fm) / (2.0 * h)
    };
    (0..x.len())
        .map(|i| {
            let h = fd_step(x[i]);
            let d1 = central(i, h, &mut pt);
            let d2 = central(i, 0.5 * h, &mut pt);
            (4.0 * d2 - d1) / 3.0
        })
        .collect()
}

/// Plain central-difference gradient with step `1e-6·max(1, |x|)`.
fn central_gradient<F>(mut f: F, x: &[f64]) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut pt = x.to_vec();
    (0..x.len())
        .map(|i| {
            let h = 1e-6 * x[i].abs().max(1.0);
            pt[i] = x[i] + h;
            let fp = f(&pt);
            pt[i] = x[i] - h;
            let fm = f(&pt);
            pt[i] = x[i];
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Maps an unbounded internal coordinate onto `[lo, hi]` (MINUIT's sine
/// transform).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounded {
    pub lo: f64,
    pub hi: f64,
}

impl Bounded {
    pub fn new(lo: f64, hi: f64) -> Self {
        assert!(lo < hi, "empty interval");
        Bounded { lo, hi }
    }

    pub fn to_external(&self, p: f64) -> f64 {
        self.lo + 0.5 * (self.hi - self.lo) * (p.sin() + 1.0)
    }

    pub fn to_internal(&self, x: f64) -> f64 {
        let u = (2.0 * (x - self.lo) / (self.hi - self.lo) - 1.0).clamp(-1.0, 1.0);
        u.asin()
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lo && x <= self.hi
    }
}

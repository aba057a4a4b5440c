//! Numerical building blocks for the screening model: Gauss–Hermite rules,
//! adaptive two-dimensional quadrature of a log-concave integrand, and a
//! derivative-free Nelder–Mead minimizer.

use nalgebra::{DMatrix, Matrix2, SymmetricEigen, Vector2};

use crate::error::{contract, Result};

/// Nodes and weights of the `n`-point Gauss–Hermite rule for `∫ f(t) e^{−t²} dt`,
/// from the eigen-decomposition of the Jacobi matrix (Golub–Welsch).
pub fn gauss_hermite(n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if n == 0 {
        return Err(contract("a quadrature rule needs at least one node"));
    }
    let mut j = DMatrix::zeros(n, n);
    for k in 1..n {
        let off = (k as f64 / 2.0).sqrt();
        j[(k - 1, k)] = off;
        j[(k, k - 1)] = off;
    }
    let eig = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let v0 = eig.eigenvectors[(0, i)];
            (eig.eigenvalues[i], std::f64::consts::PI.sqrt() * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(pairs.into_iter().unzip())
}

/// A tensor-product Gauss–Hermite rule on `R²`.
#[derive(Debug, Clone)]
pub struct Rule2 {
    /// `(t, log w)` pairs with `w` the product weight for `e^{−|t|²}`.
    points: Vec<(Vector2<f64>, f64)>,
}

impl Rule2 {
    pub fn new(n: usize) -> Result<Self> {
        let (t, w) = gauss_hermite(n)?;
        let mut points = Vec::with_capacity(n * n);
        for (a, wa) in t.iter().zip(&w) {
            for (b, wb) in t.iter().zip(&w) {
                points.push((Vector2::new(*a, *b), (wa * wb).ln()));
            }
        }
        Ok(Rule2 { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// A smooth, strictly concave log-integrand on `R²`.
pub trait LogIntegrand2 {
    fn value(&self, u: &Vector2<f64>) -> f64;
    /// Value, gradient and Hessian.
    fn derivatives(&self, u: &Vector2<f64>) -> (f64, Vector2<f64>, Matrix2<f64>);
}

/// `log ∫ exp h(u) du` by adaptive Gauss–Hermite: Newton locates the mode
/// `û`, and the rule is recentred at `û` and scaled by the Cholesky factor
/// of `(−∇²h(û))⁻¹`.
pub fn adaptive_log_integral<H: LogIntegrand2>(h: &H, rule: &Rule2) -> Result<f64> {
    let mut u = Vector2::zeros();
    let (mut f, mut g, mut hess) = h.derivatives(&u);
    for _ in 0..100 {
        let neg = -hess;
        let Some(step) = neg.cholesky().map(|c| c.solve(&g)) else {
            return Err(contract("log-integrand is not concave at the current point"));
        };
        let mut t = 1.0;
        let mut moved = false;
        while t > 1e-10 {
            let cand = u + step * t;
            let fc = h.value(&cand);
            if fc >= f {
                u = cand;
                moved = true;
                break;
            }
            t *= 0.5;
        }
        (f, g, hess) = h.derivatives(&u);
        if !moved || (step * t).amax() < 1e-10 {
            break;
        }
    }
    let cov = (-hess)
        .try_inverse()
        .ok_or_else(|| contract("singular curvature at the mode"))?;
    let l = cov
        .cholesky()
        .ok_or_else(|| contract("curvature at the mode is not positive definite"))?
        .l();
    let log_scale = std::f64::consts::LN_2 + l.determinant().abs().ln();
    let sqrt2 = std::f64::consts::SQRT_2;
    let terms: Vec<f64> = rule
        .points
        .iter()
        .map(|(t, lw)| lw + h.value(&(u + l * t * sqrt2)) + t.norm_squared())
        .collect();
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return Err(contract("quadrature produced a non-finite integrand"));
    }
    let s: f64 = terms.iter().map(|v| (v - m).exp()).sum();
    Ok(log_scale + m + s.ln())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NelderMeadOptions {
    pub max_evals: usize,
    /// Stop when the simplex's function values span less than this.
    pub f_tol: f64,
    /// Edge length of the initial simplex.
    pub step: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        NelderMeadOptions {
            max_evals: 2000,
            f_tol: 1e-10,
            step: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub evals: usize,
    pub converged: bool,
}

/// Nelder–Mead with the standard reflection, expansion, contraction and
/// shrink coefficients (1, 2, ½, ½). Non-finite values count as `+∞`.
pub fn nelder_mead(f: impl Fn(&[f64]) -> f64, x0: &[f64], opts: &NelderMeadOptions) -> Minimum {
    let n = x0.len();
    let eval = |x: &[f64]| {
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((x0.to_vec(), eval(x0)));
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += opts.step;
        let v = eval(&x);
        simplex.push((x, v));
    }
    let mut evals = n + 1;
    let mut converged = false;
    let point = |c: &[f64], d: &[f64], t: f64| -> Vec<f64> { c.iter().zip(d).map(|(a, b)| a + t * (b - a)).collect() };

    while evals < opts.max_evals {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (best, worst) = (simplex[0].1, simplex[n].1);
        if (worst - best).abs() <= opts.f_tol * (1.0 + best.abs()) && worst.is_finite() {
            converged = true;
            break;
        }
        let mut centroid = vec![0.0; n];
        for (x, _) in &simplex[..n] {
            for (c, v) in centroid.iter_mut().zip(x) {
                *c += v / n as f64;
            }
        }
        let xr = point(&centroid, &simplex[n].0, -1.0);
        let fr = eval(&xr);
        evals += 1;
        if fr < best {
            let xe = point(&centroid, &simplex[n].0, -2.0);
            let fe = eval(&xe);
            evals += 1;
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
        } else {
            let (xc, fc) = if fr < worst {
                let xc = point(&centroid, &xr, 0.5);
                let v = eval(&xc);
                (xc, v)
            } else {
                let xc = point(&centroid, &simplex[n].0, 0.5);
                let v = eval(&xc);
                (xc, v)
            };
            evals += 1;
            if fc < worst.min(fr) {
                simplex[n] = (xc, fc);
            } else {
                let x0 = simplex[0].0.clone();
                for s in simplex.iter_mut().skip(1) {
                    s.0 = point(&x0, &s.0, 0.5);
                    s.1 = eval(&s.0);
                }
                evals += n;
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, value) = simplex.swap_remove(0);
    Minimum {
        x,
        value,
        evals,
        converged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn hermite_rule_integrates_even_moments() {
        let (t, w) = gauss_hermite(9).unwrap();
        let pi_sqrt = std::f64::consts::PI.sqrt();
        let m = |k: i32| t.iter().zip(&w).map(|(a, b)| b * a.powi(k)).sum::<f64>();
        assert_abs_diff_eq!(m(0), pi_sqrt, epsilon = 1e-12);
        assert_abs_diff_eq!(m(1), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m(2), pi_sqrt / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m(4), 3.0 * pi_sqrt / 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m(16), 2027025.0 * pi_sqrt / 256.0, epsilon = 1e-6);
        assert!(t.windows(2).all(|p| p[0] < p[1]));
    }

    struct Gaussian2 {
        mean: Vector2<f64>,
        prec: Matrix2<f64>,
        log_norm: f64,
    }

    impl LogIntegrand2 for Gaussian2 {
        fn value(&self, u: &Vector2<f64>) -> f64 {
            let d = u - self.mean;
            self.log_norm - 0.5 * (d.transpose() * self.prec * d)[0]
        }
        fn derivatives(&self, u: &Vector2<f64>) -> (f64, Vector2<f64>, Matrix2<f64>) {
            (self.value(u), -(self.prec * (u - self.mean)), -self.prec)
        }
    }

    #[test]
    fn adaptive_rule_is_exact_for_gaussians() {
        let prec = Matrix2::new(2.0, 0.6, 0.6, 0.9);
        let h = Gaussian2 {
            mean: Vector2::new(1.5, -0.7),
            prec,
            log_norm: 0.3,
        };
        let exact = 0.3 + (2.0 * std::f64::consts::PI).ln() - 0.5 * prec.determinant().ln();
        let got = adaptive_log_integral(&h, &Rule2::new(9).unwrap()).unwrap();
        assert_abs_diff_eq!(got, exact, epsilon = 1e-10);
    }

    #[test]
    fn nelder_mead_finds_rosenbrock_minimum() {
        let r = nelder_mead(
            |x| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2),
            &[-1.2, 1.0],
            &NelderMeadOptions {
                max_evals: 5000,
                f_tol: 1e-14,
                step: 0.5,
            },
        );
        assert!(r.converged);
        assert_abs_diff_eq!(r.x[0], 1.0, epsilon = 1e-3);
        assert_abs_diff_eq!(r.x[1], 1.0, epsilon = 1e-3);
    }
}

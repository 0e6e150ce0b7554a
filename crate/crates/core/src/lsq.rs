//! Bounded Levenberg-Marquardt with a central-difference Jacobian.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LsqOptions {
    pub max_iterations: usize,
    /// Relative decrease of the objective below which the fit stops.
    pub ftol: f64,
    /// Relative step size below which the fit stops.
    pub xtol: f64,
    /// Largest cosine between the residual and a Jacobian column at a minimum.
    pub gtol: f64,
    /// Relative finite-difference step.
    pub diff_step: f64,
    /// Smallest eigenvalue of the correlation matrix JtJ treated as non-singular.
    pub singular_tol: f64,
}

impl Default for LsqOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            ftol: 1e-10,
            xtol: 1e-10,
            gtol: 1e-3,
            diff_step: 1e-5,
            singular_tol: 1e-12,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Bound {
    pub lower: Option<f64>,
    pub upper: Option<f64>,
}

impl Bound {
    pub fn new(lower: Option<f64>, upper: Option<f64>) -> Self {
        Self { lower, upper }
    }

    pub fn clamp(&self, x: f64) -> f64 {
        let x = self.lower.map_or(x, |l| x.max(l));
        self.upper.map_or(x, |u| x.min(u))
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lower.is_none_or(|l| x >= l) && self.upper.is_none_or(|u| x <= u)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    Gradient,
    Ftol,
    Xtol,
    PerfectFit,
    Stalled,
    MaxIterations,
    Singular,
}

#[derive(Debug, Clone)]
pub struct LsqOutcome {
    pub x: Vec<f64>,
    /// Sum of squared residuals at `x`.
    pub residual_norm: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    pub termination: Termination,
    /// `s^2 (JtJ)^-1` with `s^2 = SSR / (m - n)`; pseudo-inverse when singular.
    pub covariance: DMatrix<f64>,
    /// Objective after each accepted step, starting with the initial value.
    pub history: Vec<f64>,
    /// Final value of the orthogonality measure compared against `gtol`.
    pub gradient_cosine: f64,
    /// Unit parameter direction along which JtJ is (numerically) singular.
    pub degenerate_direction: Option<Vec<f64>>,
}

impl LsqOutcome {
    pub fn sigmas(&self) -> Vec<f64> {
        (0..self.x.len()).map(|i| self.covariance[(i, i)].max(0.0).sqrt()).collect()
    }
}

fn sum_sq(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum()
}

fn checked<F>(f: &mut F, x: &[f64], evals: &mut usize) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    *evals += 1;
    let r = f(x)?;
    if r.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("residual"));
    }
    Ok(r)
}

/// Per-parameter absolute difference steps.
pub fn difference_steps(x: &[f64], scales: &[f64], rel: f64) -> Vec<f64> {
    x.iter().zip(scales).map(|(&v, &s)| rel * v.abs().max(s)).collect()
}

/// Central differences, falling back to one-sided ones at active bounds.
pub fn numerical_jacobian<F>(
    f: &mut F,
    x: &[f64],
    r0: &[f64],
    steps: &[f64],
    bounds: &[Bound],
) -> Result<DMatrix<f64>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let mut evals = 0;
    jacobian_counted(f, x, r0, steps, bounds, &mut evals)
}

fn jacobian_counted<F>(
    f: &mut F,
    x: &[f64],
    r0: &[f64],
    steps: &[f64],
    bounds: &[Bound],
    evals: &mut usize,
) -> Result<DMatrix<f64>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let m = r0.len();
    let mut jac = DMatrix::zeros(m, x.len());
    let mut xp = x.to_vec();
    for j in 0..x.len() {
        let h = steps[j];
        let up_ok = bounds[j].contains(x[j] + h);
        let dn_ok = bounds[j].contains(x[j] - h);
        let (hi, lo, span) = match (up_ok, dn_ok) {
            (true, true) => (x[j] + h, x[j] - h, 2.0 * h),
            (true, false) => (x[j] + h, x[j], h),
            (false, true) => (x[j], x[j] - h, h),
            (false, false) => continue,
        };
        let eval_at = |f: &mut F, v: f64, xp: &mut Vec<f64>, evals: &mut usize| -> Result<Vec<f64>> {
            if v == x[j] {
                return Ok(r0.to_vec());
            }
            xp[j] = v;
            checked(f, xp, evals)
        };
        let rp = eval_at(f, hi, &mut xp, evals)?;
        let rm = eval_at(f, lo, &mut xp, evals)?;
        xp[j] = x[j];
        for i in 0..m {
            jac[(i, j)] = (rp[i] - rm[i]) / span;
        }
    }
    Ok(jac)
}

/// Eigen-analysis of JtJ scaled to unit diagonal.
struct Conditioning {
    inverse: DMatrix<f64>,
    degenerate: Option<Vec<f64>>,
}

/// A parameter whose column, per unit of its scale, is this small relative to
/// the largest one is treated as undetermined.
const DEAD_COLUMN: f64 = 1e-8;

fn analyse(jtj: &DMatrix<f64>, scales: &[f64], singular_tol: f64) -> Conditioning {
    let n = jtj.nrows();
    let reach: Vec<f64> = (0..n).map(|i| jtj[(i, i)].max(0.0).sqrt() * scales[i]).collect();
    let floor = DEAD_COLUMN * reach.iter().cloned().fold(0.0, f64::max);
    let d: Vec<f64> =
        (0..n).map(|i| if reach[i] > floor && reach[i] > 0.0 { jtj[(i, i)].sqrt() } else { 0.0 }).collect();
    if let Some(j) = d.iter().position(|&v| v == 0.0) {
        let mut dir = vec![0.0; n];
        dir[j] = 1.0;
        let mut inverse = DMatrix::zeros(n, n);
        // pseudo-inverse on the remaining block
        let keep: Vec<usize> = (0..n).filter(|&i| d[i] > 0.0).collect();
        if !keep.is_empty() {
            let sub = DMatrix::from_fn(keep.len(), keep.len(), |a, b| jtj[(keep[a], keep[b])]);
            let sub_scales: Vec<f64> = keep.iter().map(|&i| scales[i]).collect();
            let inner = analyse(&sub, &sub_scales, singular_tol);
            for (a, &ia) in keep.iter().enumerate() {
                for (b, &ib) in keep.iter().enumerate() {
                    inverse[(ia, ib)] = inner.inverse[(a, b)];
                }
            }
        }
        return Conditioning { inverse, degenerate: Some(dir) };
    }
    let corr = DMatrix::from_fn(n, n, |i, j| jtj[(i, j)] / (d[i] * d[j]));
    let eig = SymmetricEigen::new(corr);
    let (mut kmin, mut emin) = (0, f64::INFINITY);
    let mut inv_corr = DMatrix::zeros(n, n);
    for k in 0..n {
        let e = eig.eigenvalues[k];
        if e < emin {
            emin = e;
            kmin = k;
        }
        if e > singular_tol {
            let v = eig.eigenvectors.column(k);
            inv_corr += (v * v.transpose()) / e;
        }
    }
    let inverse = DMatrix::from_fn(n, n, |i, j| inv_corr[(i, j)] / (d[i] * d[j]));
    let degenerate = (emin <= singular_tol).then(|| {
        let v = eig.eigenvectors.column(kmin);
        let raw: Vec<f64> = (0..n).map(|i| v[i] / d[i]).collect();
        let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        raw.iter().map(|x| x / norm).collect()
    });
    Conditioning { inverse, degenerate }
}

/// Minimize `sum r(x)^2` where `residuals` returns `model - data`.
///
/// `scales` sets the absolute floor of each finite-difference step (in units of
/// the parameter). Bounds are enforced by clamping every trial point.
pub fn levenberg_marquardt<F>(
    mut residuals: F,
    x0: &[f64],
    bounds: &[Bound],
    scales: &[f64],
    opts: &LsqOptions,
) -> Result<LsqOutcome>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let n = x0.len();
    if n == 0 {
        return Err(Error::FitSetup("no free parameters".into()));
    }
    if bounds.len() != n || scales.len() != n {
        return Err(Error::DimensionMismatch { expected: n, actual: bounds.len().min(scales.len()) });
    }
    for (i, b) in bounds.iter().enumerate() {
        if let (Some(l), Some(u)) = (b.lower, b.upper) {
            if !(l <= u) {
                return Err(Error::FitSetup(format!("bounds of parameter {i} are not ordered")));
            }
        }
        if !x0[i].is_finite() || !b.contains(x0[i]) {
            return Err(Error::FitSetup(format!("initial value of parameter {i} outside its bounds")));
        }
    }
    let mut evals = 0;
    let mut x = x0.to_vec();
    let mut r = checked(&mut residuals, &x, &mut evals)?;
    let m = r.len();
    if m < n + 2 {
        return Err(Error::FitSetup(format!(
            "{m} data points for {n} free parameters; need at least {}",
            n + 2
        )));
    }
    let mut s = sum_sq(&r);
    let mut history = vec![s];
    let mut lambda = 0.0f64;
    let mut termination = Termination::MaxIterations;
    let mut iterations = 0;
    let mut jac = None;

    'outer: while iterations < opts.max_iterations {
        if s <= 1e-20 * history[0] {
            termination = Termination::PerfectFit;
            break;
        }
        let steps = difference_steps(&x, scales, opts.diff_step);
        let j = jacobian_counted(&mut residuals, &x, &r, &steps, bounds, &mut evals)?;
        let g = j.transpose() * DVector::from_column_slice(&r);
        let jtj = j.transpose() * &j;
        let cos_max = gradient_cosine(&g, &jtj, s);
        jac = Some(j);
        if cos_max <= opts.gtol {
            termination = Termination::Gradient;
            break;
        }
        iterations += 1;
        let max_diag = (0..n).map(|k| jtj[(k, k)]).fold(0.0, f64::max);
        loop {
            let mut a = jtj.clone();
            for k in 0..n {
                a[(k, k)] += lambda * jtj[(k, k)].max(1e-12 * max_diag);
            }
            let step = a.clone().cholesky().map(|c| c.solve(&(-&g)));
            let Some(delta) = step else {
                lambda = (4.0 * lambda).max(1e-3);
                continue;
            };
            let trial: Vec<f64> = (0..n).map(|k| bounds[k].clamp(x[k] + delta[k])).collect();
            let moved: f64 = trial.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let xnorm: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let rt = match checked(&mut residuals, &trial, &mut evals) {
                Ok(rt) => Some(rt),
                Err(Error::NonFinite(_)) | Err(Error::InvalidParameter { .. }) => None,
                Err(e) => return Err(e),
            };
            match rt.map(|rt| (sum_sq(&rt), rt)) {
                Some((st, rt)) if st < s => {
                    let decrease = s - st;
                    x = trial;
                    r = rt;
                    s = st;
                    history.push(s);
                    lambda /= 3.0;
                    if lambda < 1e-7 {
                        lambda = 0.0;
                    }
                    if decrease <= opts.ftol * (s + decrease) {
                        termination = Termination::Ftol;
                        break 'outer;
                    }
                    if moved <= opts.xtol * (xnorm + opts.xtol) {
                        termination = Termination::Xtol;
                        break 'outer;
                    }
                    break;
                }
                _ => {
                    if moved <= opts.xtol * (xnorm + opts.xtol) && lambda > 0.0 {
                        termination = Termination::Stalled;
                        break 'outer;
                    }
                    lambda = (4.0 * lambda).max(1e-3);
                    if lambda > 1e20 {
                        termination = Termination::Stalled;
                        break 'outer;
                    }
                }
            }
        }
        jac = None;
    }

    let j = match jac {
        Some(j) => j,
        None => {
            let steps = difference_steps(&x, scales, opts.diff_step);
            jacobian_counted(&mut residuals, &x, &r, &steps, bounds, &mut evals)?
        }
    };
    let jtj = j.transpose() * &j;
    let cond = analyse(&jtj, scales, opts.singular_tol);
    let dof = (m - n) as f64;
    let covariance = cond.inverse * (s / dof);
    let g = j.transpose() * DVector::from_column_slice(&r);
    let cosine = gradient_cosine(&g, &jtj, s);
    let mut converged = termination == Termination::PerfectFit || cosine <= opts.gtol;
    if cond.degenerate.is_some() {
        converged = false;
        termination = Termination::Singular;
    }
    Ok(LsqOutcome {
        x,
        residual_norm: s,
        iterations,
        evaluations: evals,
        converged,
        termination,
        covariance,
        history,
        gradient_cosine: cosine,
        degenerate_direction: cond.degenerate,
    })
}

/// Largest |cos| between the residual vector and a Jacobian column.
fn gradient_cosine(g: &DVector<f64>, jtj: &DMatrix<f64>, ssr: f64) -> f64 {
    let rnorm = ssr.sqrt();
    if rnorm == 0.0 {
        return 0.0;
    }
    (0..g.len())
        .map(|k| {
            let cn = jtj[(k, k)].sqrt();
            if cn > 0.0 {
                (g[k] / (cn * rnorm)).abs()
            } else {
                0.0
            }
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn exp_data() -> (Vec<f64>, Vec<f64>) {
        let t: Vec<f64> = (0..40).map(|i| i as f64 * 0.25).collect();
        let y = t.iter().map(|&t| 2.5 * (-0.7 * t).exp() + 0.3).collect();
        (t, y)
    }

    #[test]
    fn recovers_exponential_decay() {
        let (t, y) = exp_data();
        let f = |p: &[f64]| -> Result<Vec<f64>> {
            Ok(t.iter().zip(&y).map(|(&t, &y)| p[0] * (-p[1] * t).exp() + p[2] - y).collect())
        };
        let out = levenberg_marquardt(
            f,
            &[1.0, 0.2, 0.0],
            &[Bound::default(); 3],
            &[1.0; 3],
            &LsqOptions::default(),
        )
        .unwrap();
        assert!(out.converged, "{:?}", out.termination);
        assert_relative_eq!(out.x[0], 2.5, epsilon = 1e-6);
        assert_relative_eq!(out.x[1], 0.7, epsilon = 1e-6);
        assert_relative_eq!(out.x[2], 0.3, epsilon = 1e-6);
        assert!(out.history.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn linear_scale_converges_in_one_step() {
        let (t, y) = exp_data();
        let f = |p: &[f64]| -> Result<Vec<f64>> {
            Ok(t.iter().zip(&y).map(|(&t, &y)| p[0] * (2.5 * (-0.7 * t).exp() + 0.3) - y).collect())
        };
        let out =
            levenberg_marquardt(f, &[0.4], &[Bound::default()], &[1.0], &LsqOptions::default()).unwrap();
        assert!(out.converged);
        assert_eq!(out.history.len(), 2, "{:?} {:?}", out.history, out.termination);
        assert!(out.residual_norm < 1e-20);
        assert_relative_eq!(out.x[0], 1.0, epsilon = 1e-10);
    }

    #[test]
    fn bounds_are_respected() {
        let (t, y) = exp_data();
        let f = |p: &[f64]| -> Result<Vec<f64>> {
            Ok(t.iter().zip(&y).map(|(&t, &y)| p[0] * (-p[1] * t).exp() + 0.3 - y).collect())
        };
        let b = [Bound::new(Some(0.0), Some(2.0)), Bound::new(Some(0.0), None)];
        let out = levenberg_marquardt(f, &[1.0, 0.5], &b, &[1.0; 2], &LsqOptions::default()).unwrap();
        assert!(out.x[0] <= 2.0);
        assert!(b[1].contains(out.x[1]));
    }

    #[test]
    fn redundant_parameters_are_singular() {
        let (t, y) = exp_data();
        // only the sum p0 + p1 is identifiable
        let f = |p: &[f64]| -> Result<Vec<f64>> {
            Ok(t.iter().zip(&y).map(|(&t, &y)| (p[0] + p[1]) * (-0.7 * t).exp() + 0.3 - y).collect())
        };
        let out =
            levenberg_marquardt(f, &[1.0, 1.0], &[Bound::default(); 2], &[1.0; 2], &LsqOptions::default())
                .unwrap();
        assert!(!out.converged);
        assert_eq!(out.termination, Termination::Singular);
        let d = out.degenerate_direction.unwrap();
        assert_relative_eq!(d[0].abs(), std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-6);
        assert_relative_eq!(d[0], -d[1], epsilon = 1e-6);
    }

    #[test]
    fn dead_parameter_is_singular() {
        let (t, y) = exp_data();
        let f = |p: &[f64]| -> Result<Vec<f64>> {
            Ok(t.iter().zip(&y).map(|(&t, &y)| p[0] * (-0.7 * t).exp() + 0.3 + 0.0 * p[1] - y).collect())
        };
        let out =
            levenberg_marquardt(f, &[1.0, 1.0], &[Bound::default(); 2], &[1.0; 2], &LsqOptions::default())
                .unwrap();
        assert!(!out.converged);
        assert_eq!(out.degenerate_direction.unwrap(), vec![0.0, 1.0]);
        assert_relative_eq!(out.x[0], 2.5, epsilon = 1e-8);
    }

    #[test]
    fn setup_errors() {
        let f = |p: &[f64]| -> Result<Vec<f64>> { Ok(vec![p[0]; 2]) };
        assert!(levenberg_marquardt(f, &[1.0], &[Bound::default()], &[1.0], &LsqOptions::default()).is_err());
        let f = |p: &[f64]| -> Result<Vec<f64>> { Ok(vec![p[0]; 5]) };
        let b = [Bound::new(Some(2.0), Some(1.0))];
        assert!(levenberg_marquardt(f, &[1.5], &b, &[1.0], &LsqOptions::default()).is_err());
        let b = [Bound::new(Some(2.0), None)];
        assert!(levenberg_marquardt(f, &[1.0], &b, &[1.0], &LsqOptions::default()).is_err());
    }

    #[test]
    fn covariance_matches_linear_regression() {
        // straight line with deterministic pseudo-noise: compare with closed form
        let x: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let y: Vec<f64> =
            x.iter().enumerate().map(|(i, &x)| 1.0 + 0.5 * x + 0.1 * ((i * 7 % 5) as f64 - 2.0)).collect();
        let f = |p: &[f64]| -> Result<Vec<f64>> {
            Ok(x.iter().zip(&y).map(|(&x, &y)| p[0] + p[1] * x - y).collect())
        };
        let out =
            levenberg_marquardt(f, &[0.0, 0.0], &[Bound::default(); 2], &[1.0; 2], &LsqOptions::default())
                .unwrap();
        let n = x.len() as f64;
        let sx: f64 = x.iter().sum();
        let sxx: f64 = x.iter().map(|v| v * v).sum();
        let det = n * sxx - sx * sx;
        let s2 = out.residual_norm / (n - 2.0);
        assert_relative_eq!(out.covariance[(1, 1)], s2 * n / det, max_relative = 1e-6);
        assert_relative_eq!(out.covariance[(0, 0)], s2 * sxx / det, max_relative = 1e-6);
        assert_relative_eq!(out.covariance[(0, 1)], -s2 * sx / det, max_relative = 1e-6);
    }
}

//! Multistart projected quasi-Newton minimization over a box.
//!
//! Seeds come from a regular grid over the box. Each seed is refined by a
//! projected BFGS iteration with Armijo backtracking along the projection
//! arc. All step decisions are invariant to rescaling the criterion by a
//! positive constant, so scaling by a power of two reproduces the exact
//! trajectory.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moment::ThetaBox;
use crate::scalar::{to_f64_vec, Scalar};

/// Settings of the outer optimizer shared by every estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    /// Grid points per parameter dimension used as seeds.
    pub grid_points: usize,
    /// Upper bound on the number of seeds; the per-dimension count shrinks to fit.
    pub max_seeds: usize,
    /// Convergence threshold on the Euclidean norm of the projected gradient.
    pub gtol: f64,
    /// Refinement iterations per seed.
    pub max_iter: usize,
    /// When the line search cannot make progress, the run still counts as
    /// converged if the projected gradient is below this value.
    pub stall_gtol: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            grid_points: 9,
            max_seeds: 729,
            gtol: 1e-9,
            max_iter: 200,
            stall_gtol: 1e-6,
        }
    }
}

impl OptimizerConfig {
    /// Per-dimension grid size after applying `max_seeds`.
    pub fn points_per_dim(&self, d: usize) -> usize {
        let mut p = self.grid_points.max(1);
        while p > 2 && p.checked_pow(d as u32).is_none_or(|c| c > self.max_seeds) {
            p -= 1;
        }
        p
    }
}

/// Outcome of one local refinement.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalMin<T: Scalar> {
    pub theta: Vec<T>,
    pub value: T,
    pub gradient_norm: T,
    pub iterations: usize,
    pub converged: bool,
    /// Criterion value at the seed the run started from.
    pub seed_value: T,
}

/// Criterion callback: `Ok(None)` marks a point where the criterion is `+∞`.
pub type Evaluation<T> = Result<Option<(T, Vec<T>)>>;

fn projected_gradient<T: Scalar>(b: &ThetaBox<T>, x: &[T], g: &[T]) -> Vec<T> {
    x.iter()
        .zip(g)
        .enumerate()
        .map(|(i, (xi, gi))| {
            let moved = (*xi - *gi).max(b.lower()[i]).min(b.upper()[i]);
            *xi - moved
        })
        .collect()
}

fn norm<T: Scalar>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |a, x| a + *x * *x).sqrt()
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (x, y)| acc + *x * *y)
}

/// Refines one seed. Returns `Ok(None)` if the criterion is infinite at the seed.
pub fn refine<T, F>(b: &ThetaBox<T>, seed: &[T], cfg: &OptimizerConfig, f: &F) -> Result<Option<LocalMin<T>>>
where
    T: Scalar,
    F: Fn(&[T]) -> Evaluation<T>,
{
    let d = b.dim();
    let mut x = seed.to_vec();
    b.project(&mut x);
    let Some((mut fx, mut gx)) = f(&x)? else {
        return Ok(None);
    };
    let seed_value = fx;
    let gtol = T::gradient_tol(cfg.gtol);
    let c1 = T::lit(1e-4);
    let half = T::lit(0.5);
    let min_width = (0..d)
        .map(|i| b.upper()[i] - b.lower()[i])
        .fold(T::max_finite(), |a, w| a.min(w));
    let first_step = min_width * T::lit(0.1);

    let mut h = DMatrix::<T>::identity(d, d);
    let mut have_curvature = false;
    let mut iterations = 0;
    let mut converged = false;
    let mut pg = projected_gradient(b, &x, &gx);

    while iterations < cfg.max_iter {
        if norm(&pg) < gtol {
            converged = true;
            break;
        }
        iterations += 1;
        // Coordinates pinned at a bound with the gradient pushing outward.
        let free: Vec<bool> = (0..d)
            .map(|i| !((x[i] <= b.lower()[i] && gx[i] > T::zero()) || (x[i] >= b.upper()[i] && gx[i] < T::zero())))
            .collect();
        let g_free: Vec<T> = (0..d).map(|i| if free[i] { gx[i] } else { T::zero() }).collect();
        let normalized_descent = |g: &[T]| -> Vec<T> {
            let gn = norm(g);
            g.iter().map(|v| -*v * first_step / gn).collect()
        };
        let mut dir: Vec<T> = if have_curvature {
            let hv = &h * DVector::from_column_slice(&g_free);
            (0..d).map(|i| if free[i] { -hv[i] } else { T::zero() }).collect()
        } else {
            normalized_descent(&g_free)
        };
        if dot(&dir, &gx) >= T::zero() {
            h = DMatrix::identity(d, d);
            have_curvature = false;
            dir = normalized_descent(&g_free);
        }

        let pg_norm = norm(&pg);
        let mut alpha = T::one();
        let mut accepted = None;
        for _ in 0..60 {
            let mut xn: Vec<T> = x.iter().zip(&dir).map(|(xi, di)| *xi + alpha * *di).collect();
            b.project(&mut xn);
            if xn == x {
                break;
            }
            if let Some((fxn, gxn)) = f(&xn)? {
                let step: Vec<T> = xn.iter().zip(&x).map(|(a, c)| *a - *c).collect();
                let armijo = fxn <= fx + c1 * dot(&gx, &step);
                let plateau = (fxn - fx).abs() <= T::lit(4.0) * T::eps() * fx.abs()
                    && norm(&projected_gradient(b, &xn, &gxn)) < pg_norm;
                if armijo || plateau {
                    accepted = Some((xn, fxn, gxn, step));
                    break;
                }
            }
            alpha *= half;
        }
        let Some((xn, fxn, gxn, s)) = accepted else {
            converged = pg_norm <= T::stall_tol(cfg.stall_gtol);
            break;
        };
        let y: Vec<T> = gxn.iter().zip(&gx).map(|(a, c)| *a - *c).collect();
        let sy = dot(&s, &y);
        if sy > T::eps() * norm(&s) * norm(&y) && sy > T::zero() {
            let sv = DVector::from_column_slice(&s);
            let yv = DVector::from_column_slice(&y);
            if !have_curvature {
                h = DMatrix::identity(d, d) * (sy / dot(&y, &y));
                have_curvature = true;
            }
            let rho = T::one() / sy;
            let eye = DMatrix::<T>::identity(d, d);
            let left = &eye - &sv * yv.transpose() * rho;
            let right = &eye - &yv * sv.transpose() * rho;
            h = &left * &h * &right + &sv * sv.transpose() * rho;
        }
        x = xn;
        fx = fxn;
        gx = gxn;
        pg = projected_gradient(b, &x, &gx);
    }
    if !converged && iterations >= cfg.max_iter && norm(&pg) < gtol {
        converged = true;
    }
    Ok(Some(LocalMin {
        gradient_norm: norm(&pg),
        theta: x,
        value: fx,
        iterations,
        converged,
        seed_value,
    }))
}

fn better<T: Scalar>(a: &LocalMin<T>, b: &LocalMin<T>) -> bool {
    if a.value != b.value {
        return a.value < b.value;
    }
    for (x, y) in a.theta.iter().zip(&b.theta) {
        if x != y {
            return x < y;
        }
    }
    false
}

/// Grid multistart: refines every feasible seed and keeps the lowest final
/// value among converged runs (ties: lexicographically smallest θ).
///
/// Errors with [`Error::Infeasible`] when the criterion is infinite at every
/// seed and with [`Error::NonConvergence`] when no run converged.
pub fn minimize<T, F>(b: &ThetaBox<T>, cfg: &OptimizerConfig, f: F) -> Result<LocalMin<T>>
where
    T: Scalar,
    F: Fn(&[T]) -> Evaluation<T>,
{
    minimize_with_seeds(b, cfg, &[], f)
}

/// [`minimize`] with additional seeds appended after the grid.
pub fn minimize_with_seeds<T, F>(b: &ThetaBox<T>, cfg: &OptimizerConfig, extra: &[Vec<T>], f: F) -> Result<LocalMin<T>>
where
    T: Scalar,
    F: Fn(&[T]) -> Evaluation<T>,
{
    let mut seeds = b.grid(cfg.points_per_dim(b.dim()));
    seeds.extend(extra.iter().filter(|s| s.len() == b.dim()).cloned());
    let mut best_converged: Option<LocalMin<T>> = None;
    let mut best_any: Option<LocalMin<T>> = None;
    for seed in &seeds {
        let Some(run) = refine(b, seed, cfg, &f)? else {
            continue;
        };
        if best_any.as_ref().is_none_or(|cur| better(&run, cur)) {
            best_any = Some(run.clone());
        }
        if run.converged && best_converged.as_ref().is_none_or(|cur| better(&run, cur)) {
            best_converged = Some(run);
        }
    }
    match (best_converged, best_any) {
        (Some(best), _) => Ok(best),
        (None, Some(any)) => Err(Error::NonConvergence {
            best_theta: to_f64_vec(&any.theta),
            best_objective: any.value.as_f64(),
            gradient_norm: any.gradient_norm.as_f64(),
        }),
        (None, None) => Err(Error::Infeasible),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad(center: f64) -> impl Fn(&[f64]) -> Evaluation<f64> {
        move |x: &[f64]| {
            let v = (x[0] - center).powi(2) + 3.0 * (x[1] + 0.5).powi(2) + (x[0] - center) * (x[1] + 0.5);
            let g = vec![
                2.0 * (x[0] - center) + (x[1] + 0.5),
                6.0 * (x[1] + 0.5) + (x[0] - center),
            ];
            Ok(Some((v, g)))
        }
    }

    #[test]
    fn finds_interior_minimum() {
        let b = ThetaBox::new(vec![-2.0, -2.0], vec![2.0, 2.0]).unwrap();
        let r = minimize(&b, &OptimizerConfig::default(), quad(0.7)).unwrap();
        assert!(r.converged);
        assert!((r.theta[0] - 0.7).abs() < 1e-9);
        assert!((r.theta[1] + 0.5).abs() < 1e-9);
    }

    #[test]
    fn respects_bounds() {
        let b = ThetaBox::new(vec![-2.0, -2.0], vec![0.0, 2.0]).unwrap();
        let r = minimize(&b, &OptimizerConfig::default(), quad(1.5)).unwrap();
        assert!(r.converged);
        assert_eq!(r.theta[0], 0.0);
        // on the face x0 = 0 the minimizer in x1 solves 6(x1 + .5) = 1.5
        assert!((r.theta[1] - (-0.5 + 0.25)).abs() < 1e-8, "{:?}", r.theta);
    }

    #[test]
    fn picks_global_of_double_well() {
        let b = ThetaBox::new(vec![-3.0], vec![3.0]).unwrap();
        let f = |x: &[f64]| {
            let t = x[0];
            Ok(Some((
                (t * t - 1.0).powi(2) + 0.3 * t,
                vec![4.0 * t * (t * t - 1.0) + 0.3],
            )))
        };
        let r = minimize(&b, &OptimizerConfig::default(), f).unwrap();
        assert!(r.theta[0] < -0.9);
        for seed in b.grid(9) {
            assert!(r.value <= f(&seed).unwrap().unwrap().0);
        }
    }

    #[test]
    fn infinite_everywhere_is_infeasible() {
        let b = ThetaBox::new(vec![-1.0], vec![1.0]).unwrap();
        let r = minimize(&b, &OptimizerConfig::default(), |_: &[f64]| Ok(None));
        assert!(matches!(r, Err(Error::Infeasible)));
    }

    #[test]
    fn avoids_infinite_region() {
        let b = ThetaBox::new(vec![-3.0], vec![3.0]).unwrap();
        let f = |x: &[f64]| {
            if x[0] > 1.0 {
                Ok(None)
            } else {
                Ok(Some(((x[0] - 0.9).powi(2), vec![2.0 * (x[0] - 0.9)])))
            }
        };
        let r = minimize(&b, &OptimizerConfig::default(), f).unwrap();
        assert!((r.theta[0] - 0.9).abs() < 1e-9);
    }

    #[test]
    fn power_of_two_scaling_reproduces_trajectory() {
        let b = ThetaBox::new(vec![-2.0, -2.0], vec![2.0, 2.0]).unwrap();
        let base = quad(0.3);
        let r1 = minimize(&b, &OptimizerConfig::default(), &base).unwrap();
        let scaled = |x: &[f64]| base(x).map(|o| o.map(|(v, g)| (v * 8.0, g.into_iter().map(|gi| gi * 8.0).collect())));
        let cfg = OptimizerConfig {
            gtol: 8.0 * 1e-9,
            stall_gtol: 8.0 * 1e-6,
            ..OptimizerConfig::default()
        };
        let r2 = minimize(&b, &cfg, scaled).unwrap();
        assert_eq!(r1.theta, r2.theta);
        assert_eq!(r1.iterations, r2.iterations);
    }

    #[test]
    fn seed_count_is_capped() {
        let cfg = OptimizerConfig::default();
        assert_eq!(cfg.points_per_dim(1), 9);
        assert_eq!(cfg.points_per_dim(3), 9);
        assert_eq!(cfg.points_per_dim(4), 5);
        assert_eq!(cfg.points_per_dim(10), 2);
    }
}

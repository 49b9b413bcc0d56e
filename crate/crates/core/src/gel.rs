//! Generalized empirical likelihood through the conjugate dual.
//!
//! For fixed `θ` the entropic projection of the empirical measure onto
//! `{ν : ∫Φ(θ,·)dν = 0}` is found from the concave dual
//! `sup_{λ₁, λ₂} λ₁ − (1/n) Σ f*(λ₁ + λ₂ᵗ Φ(θ, X_i))`, solved by damped Newton.
//! The estimator then minimizes the dual value over `Θ`.

use std::cell::RefCell;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::{gmm_fixed, EstimateResult, EstimatorConfig};
use crate::linalg::{pairwise_mean, try_spd_inverse};
use crate::moment::{eval_centered_precision, moment_values, MomentModel, Sample};
use crate::optim::{minimize_with_seeds, Evaluation};
use crate::scalar::Scalar;

/// Ids accepted by [`divergence`].
pub const DIVERGENCE_IDS: &[&str] = &["el", "et", "euclidean"];

/// Real interval with optionally closed, possibly infinite, endpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
    pub lo_closed: bool,
    pub hi_closed: bool,
}

impl Interval {
    pub const REAL: Interval = Interval::open(f64::NEG_INFINITY, f64::INFINITY);

    pub const fn open(lo: f64, hi: f64) -> Self {
        Self {
            lo,
            hi,
            lo_closed: false,
            hi_closed: false,
        }
    }

    pub const fn closed_open(lo: f64, hi: f64) -> Self {
        Self {
            lo,
            hi,
            lo_closed: true,
            hi_closed: false,
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        let above = if self.lo_closed { v >= self.lo } else { v > self.lo };
        let below = if self.hi_closed { v <= self.hi } else { v < self.hi };
        above && below
    }
}

type ScalarFn<T> = Arc<dyn Fn(T) -> T + Send + Sync>;

/// An f-divergence generator `f` together with its convex conjugate.
///
/// `f` is strictly convex with `f(1) = f'(1) = 0`, so `f*(0) = 0` and
/// `f*'(0) = 1`. The second derivative of `f*` drives the dual Newton solver.
#[derive(Clone)]
pub struct Divergence<T: Scalar> {
    id: String,
    f: ScalarFn<T>,
    f_conj: ScalarFn<T>,
    f_conj_deriv: ScalarFn<T>,
    f_conj_second: ScalarFn<T>,
    f_domain: Interval,
    conj_domain: Interval,
}

impl<T: Scalar> fmt::Debug for Divergence<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Divergence")
            .field("id", &self.id)
            .field("f_domain", &self.f_domain)
            .field("conj_domain", &self.conj_domain)
            .finish()
    }
}

/// Looks up a registered divergence by id.
pub fn divergence<T: Scalar>(id: &str) -> Result<Divergence<T>> {
    match id {
        "el" => Ok(Divergence::empirical_likelihood()),
        "et" => Ok(Divergence::exponential_tilting()),
        "euclidean" => Ok(Divergence::euclidean()),
        _ => Err(Error::UnknownId {
            kind: "divergence",
            id: id.to_string(),
            field: "divergence".into(),
        }),
    }
}

impl<T: Scalar> Divergence<T> {
    /// `f(x) = −log x + x − 1`, `f*(y) = −log(1 − y)` for `y < 1`.
    pub fn empirical_likelihood() -> Self {
        Self {
            id: "el".into(),
            f: Arc::new(|x: T| -x.ln() + x - T::one()),
            f_conj: Arc::new(|y: T| -(T::one() - y).ln()),
            f_conj_deriv: Arc::new(|y: T| T::one() / (T::one() - y)),
            f_conj_second: Arc::new(|y: T| {
                let r = T::one() / (T::one() - y);
                r * r
            }),
            f_domain: Interval::open(0.0, f64::INFINITY),
            conj_domain: Interval::open(f64::NEG_INFINITY, 1.0),
        }
    }

    /// `f(x) = x log x − x + 1`, `f*(y) = eʸ − 1`.
    pub fn exponential_tilting() -> Self {
        Self {
            id: "et".into(),
            f: Arc::new(|x: T| {
                if x == T::zero() {
                    T::one()
                } else {
                    x * x.ln() - x + T::one()
                }
            }),
            f_conj: Arc::new(|y: T| y.exp_m1()),
            f_conj_deriv: Arc::new(|y: T| y.exp()),
            f_conj_second: Arc::new(|y: T| y.exp()),
            f_domain: Interval::closed_open(0.0, f64::INFINITY),
            conj_domain: Interval::REAL,
        }
    }

    /// `f(x) = (x − 1)²/2` on the whole line, `f*(y) = y + y²/2`.
    pub fn euclidean() -> Self {
        let half = T::lit(0.5);
        Self {
            id: "euclidean".into(),
            f: Arc::new(move |x: T| {
                let e = x - T::one();
                half * e * e
            }),
            f_conj: Arc::new(move |y: T| y + half * y * y),
            f_conj_deriv: Arc::new(|y: T| T::one() + y),
            f_conj_second: Arc::new(|_| T::one()),
            f_domain: Interval::REAL,
            conj_domain: Interval::REAL,
        }
    }

    /// A user-supplied divergence; it is accepted only if [`Divergence::validate`] passes.
    #[allow(clippy::too_many_arguments)]
    pub fn custom(
        id: impl Into<String>,
        f: ScalarFn<T>,
        f_conj: ScalarFn<T>,
        f_conj_deriv: ScalarFn<T>,
        f_conj_second: ScalarFn<T>,
        f_domain: Interval,
        conj_domain: Interval,
    ) -> Result<Self> {
        let div = Self {
            id: id.into(),
            f,
            f_conj,
            f_conj_deriv,
            f_conj_second,
            f_domain,
            conj_domain,
        };
        div.validate()?;
        Ok(div)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn f_domain(&self) -> Interval {
        self.f_domain
    }

    pub fn conj_domain(&self) -> Interval {
        self.conj_domain
    }

    pub fn in_conj_domain(&self, y: T) -> bool {
        y.is_finite() && self.conj_domain.contains(y.as_f64())
    }

    /// `f(x)`, or a domain error.
    pub fn f(&self, x: T) -> Result<T> {
        if !x.is_finite() || !self.f_domain.contains(x.as_f64()) {
            return Err(Error::Domain {
                what: format!("f for divergence {}", self.id),
                value: x.as_f64(),
            });
        }
        Ok((self.f)(x))
    }

    pub fn conj_deriv(&self, y: T) -> T {
        (self.f_conj_deriv)(y)
    }

    /// Checks the defining identities on a probe grid: `f(1) = f'(1) = 0`,
    /// `f*(0) = 0`, `f*'(0) = 1`, midpoint convexity of `f*`, `f*'` and `f*''`
    /// against finite differences, and Fenchel–Young equality at `x = f*'(y)`.
    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| Error::InvalidDivergence {
            id: self.id.clone(),
            reason,
        };
        let c = |v: f64| T::lit(v);
        let f = |x: f64| (self.f)(c(x)).as_f64();
        let fc = |y: f64| (self.f_conj)(c(y)).as_f64();
        let fd1 = |y: f64| (self.f_conj_deriv)(c(y)).as_f64();
        let fd2 = |y: f64| (self.f_conj_second)(c(y)).as_f64();
        if !self.f_domain.contains(1.0) || !self.conj_domain.contains(0.0) {
            return Err(fail("domains must contain 1 (for f) and 0 (for f*)".into()));
        }
        let h = 1e-4;
        // Richardson-extrapolated central differences.
        let diff = |g: &dyn Fn(f64) -> f64, y: f64| {
            let d = |s: f64| (g(y + s) - g(y - s)) / (2.0 * s);
            (4.0 * d(h / 2.0) - d(h)) / 3.0
        };
        if f(1.0).abs() > 1e-12 {
            return Err(fail(format!("f(1) = {}", f(1.0))));
        }
        if diff(&f, 1.0).abs() > 1e-6 {
            return Err(fail(format!("f'(1) = {}", diff(&f, 1.0))));
        }
        if fc(0.0).abs() > 1e-12 || (fd1(0.0) - 1.0).abs() > 1e-12 {
            return Err(fail("f*(0) must be 0 and f*'(0) must be 1".into()));
        }
        let lo = self.conj_domain.lo.max(-2.0);
        let hi = self.conj_domain.hi.min(2.0);
        let margin = 0.05 * (hi - lo);
        let grid: Vec<f64> = (0..=40)
            .map(|i| lo + margin + (hi - lo - 2.0 * margin) * i as f64 / 40.0)
            .collect();
        for &y in &grid {
            let d1 = diff(&fc, y);
            if (d1 - fd1(y)).abs() > 1e-8 * fd1(y).abs().max(1.0) {
                return Err(fail(format!("f*' disagrees with finite differences at {y}")));
            }
            let d2 = diff(&fd1, y);
            if (d2 - fd2(y)).abs() > 1e-6 * fd2(y).abs().max(1.0) {
                return Err(fail(format!("f*'' disagrees with finite differences at {y}")));
            }
            let x = fd1(y);
            if self.f_domain.contains(x) {
                let gap = fc(y) - (x * y - f(x));
                if gap.abs() > 1e-8 * fc(y).abs().max(1.0) {
                    return Err(fail(format!("f* is not the conjugate of f at {y}")));
                }
            }
        }
        for a in &grid {
            for b in &grid {
                let mid = fc(0.5 * (a + b));
                if mid > 0.5 * (fc(*a) + fc(*b)) + 1e-12 * (fc(*a).abs() + fc(*b).abs()) {
                    return Err(fail(format!("f* is not midpoint convex on [{a}, {b}]")));
                }
            }
        }
        Ok(())
    }
}

/// Convex conjugate `f*(y)`.
pub fn conjugate<T: Scalar>(div: &Divergence<T>, y: T) -> Result<T> {
    if !div.in_conj_domain(y) {
        return Err(Error::Domain {
            what: format!("the conjugate of divergence {}", div.id),
            value: y.as_f64(),
        });
    }
    Ok((div.f_conj)(y))
}

/// `(1/n) Σ f(n p_i)`, the divergence of `Σ p_i δ_{X_i}` from the empirical measure.
pub fn divergence_value<T: Scalar>(div: &Divergence<T>, weights: &[T]) -> Result<T> {
    if weights.is_empty() {
        return Err(Error::Dimension("no weights".into()));
    }
    let n = T::from_usize_lossy(weights.len());
    let total = weights.iter().fold(T::zero(), |a, p| a + *p);
    if (total - T::one()).abs() > T::lit(1e-8) {
        return Err(Error::Domain {
            what: "probability weights (sum)".into(),
            value: total.as_f64(),
        });
    }
    let mean = pairwise_mean(weights.len(), 1, |i, out| {
        out[0] = div.f(n * weights[i])?;
        Ok::<(), Error>(())
    })?;
    Ok(mean[0])
}

/// Stopping rules of the dual Newton solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DualConfig {
    pub max_iter: usize,
    /// `‖(λ₁, λ₂)‖` beyond this marks the dual as unbounded.
    pub lambda_cap: f64,
    /// Target for the sup-norm of the dual gradient.
    pub gtol: f64,
    /// A stalled line search still counts as converged below this gradient.
    pub stall_gtol: f64,
}

impl Default for DualConfig {
    fn default() -> Self {
        Self {
            max_iter: 500,
            lambda_cap: 1e8,
            gtol: 1e-13,
            stall_gtol: 1e-9,
        }
    }
}

/// Maximizer of the inner dual at one `θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct DualSolution<T: Scalar> {
    pub lambda1: T,
    pub lambda2: Vec<T>,
    /// Dual objective at the maximizer; equals the minimal divergence.
    pub value: T,
    /// Implied probabilities `p_i = f*'(λ₁ + λ₂ᵗ Φ_i) / n`.
    pub weights: Vec<T>,
    pub converged: bool,
    pub iterations: usize,
    /// Sup-norm of the dual gradient at the returned point.
    pub gradient_norm: T,
}

struct DualEval<T: Scalar> {
    value: T,
    grad: DVector<T>,
    neg_hess: DMatrix<T>,
}

fn dual_eval<T: Scalar>(
    div: &Divergence<T>,
    phis: &[T],
    k: usize,
    z: &DVector<T>,
    with_hess: bool,
) -> Option<DualEval<T>> {
    let n = phis.len() / k;
    let m = k + 1;
    let width = 1 + m + if with_hess { m * m } else { 0 };
    let mut psi = vec![T::zero(); m];
    let sums = pairwise_mean(n, width, |i, out| {
        let row = &phis[i * k..(i + 1) * k];
        psi[0] = T::one();
        psi[1..].copy_from_slice(row);
        let u = psi.iter().zip(z.iter()).fold(T::zero(), |a, (p, zz)| a + *p * *zz);
        if !div.in_conj_domain(u) {
            return Err(());
        }
        let fs = (div.f_conj)(u);
        let d1 = (div.f_conj_deriv)(u);
        out[0] = fs;
        for a in 0..m {
            out[1 + a] = d1 * psi[a];
        }
        if with_hess {
            let d2 = (div.f_conj_second)(u);
            for a in 0..m {
                for b in 0..m {
                    out[1 + m + a * m + b] = d2 * psi[a] * psi[b];
                }
            }
        }
        Ok(())
    })
    .ok()?;
    let value = z[0] - sums[0];
    if !value.is_finite() {
        return None;
    }
    let mut grad = DVector::from_iterator(m, sums[1..1 + m].iter().map(|v| -*v));
    grad[0] += T::one();
    let neg_hess = if with_hess {
        DMatrix::from_row_slice(m, m, &sums[1 + m..])
    } else {
        DMatrix::zeros(0, 0)
    };
    Some(DualEval { value, grad, neg_hess })
}

fn sup_norm<T: Scalar>(v: &DVector<T>) -> T {
    v.iter().fold(T::zero(), |a, x| a.max(x.abs()))
}

/// True if some moment coordinate has the same strict sign at every observation,
/// which puts zero outside the convex hull of the moment values.
fn sign_separated<T: Scalar>(phis: &[T], k: usize) -> Option<usize> {
    (0..k).find(|&j| {
        let col = phis.chunks(k).map(|r| r[j]);
        col.clone().all(|v| v > T::zero()) || col.clone().all(|v| v < T::zero())
    })
}

/// Solves the dual from `start` for precomputed moment values (row-major n × k).
pub(crate) fn solve_dual<T: Scalar>(
    div: &Divergence<T>,
    phis: &[T],
    k: usize,
    start: DVector<T>,
    cfg: &DualConfig,
) -> Result<DualSolution<T>> {
    let n = phis.len() / k;
    if div.f_domain.lo >= 0.0 {
        if let Some(j) = sign_separated(phis, k) {
            return Err(Error::UnboundedDual {
                reason: format!("moment coordinate {j} has the same sign at every observation"),
            });
        }
    }
    let mut z = start;
    let mut cur = match dual_eval(div, phis, k, &z, true) {
        Some(e) => e,
        None => {
            z = DVector::zeros(k + 1);
            dual_eval(div, phis, k, &z, true).ok_or_else(|| Error::Domain {
                what: format!("the conjugate of divergence {} at lambda = 0", div.id),
                value: 0.0,
            })?
        }
    };
    let gtol = T::gradient_tol(cfg.gtol);
    let c1 = T::lit(1e-4);
    let half = T::lit(0.5);
    let cap = T::lit(cfg.lambda_cap);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_iter {
        let gnorm = sup_norm(&cur.grad);
        if gnorm <= gtol {
            converged = true;
            break;
        }
        iterations += 1;
        let step = match cur.neg_hess.clone().cholesky() {
            Some(ch) => ch.solve(&cur.grad),
            None => match try_spd_inverse(&cur.neg_hess, 1e300) {
                Ok(inv) => inv.inverse * &cur.grad,
                Err(_) => cur.grad.clone(),
            },
        };
        let slope = cur.grad.dot(&step);
        let mut alpha = T::one();
        let mut next = None;
        for _ in 0..60 {
            let zn = &z + &step * alpha;
            if zn == z {
                break;
            }
            if let Some(e) = dual_eval(div, phis, k, &zn, true) {
                let armijo = e.value >= cur.value + c1 * alpha * slope;
                let plateau = (e.value - cur.value).abs() <= T::lit(4.0) * T::eps() * cur.value.abs().max(T::one())
                    && sup_norm(&e.grad) < gnorm;
                if armijo || plateau {
                    next = Some((zn, e));
                    break;
                }
            }
            alpha *= half;
        }
        let Some((zn, e)) = next else {
            converged = gnorm <= T::stall_tol(cfg.stall_gtol);
            break;
        };
        z = zn;
        cur = e;
        if z.norm() > cap {
            return Err(Error::UnboundedDual {
                reason: format!("|lambda| exceeded {:e} after {iterations} Newton steps", cfg.lambda_cap),
            });
        }
    }
    if !converged && iterations >= cfg.max_iter {
        if sup_norm(&cur.grad) <= gtol {
            converged = true;
        } else {
            return Err(Error::UnboundedDual {
                reason: format!("no convergence in {} Newton steps", cfg.max_iter),
            });
        }
    }
    let inv_n = T::one() / T::from_usize_lossy(n);
    let weights = (0..n)
        .map(|i| {
            let row = &phis[i * k..(i + 1) * k];
            let u = row.iter().zip(z.iter().skip(1)).fold(z[0], |a, (p, l)| a + *p * *l);
            (div.f_conj_deriv)(u) * inv_n
        })
        .collect();
    Ok(DualSolution {
        lambda1: z[0],
        lambda2: z.iter().skip(1).copied().collect(),
        value: cur.value,
        weights,
        converged,
        iterations,
        gradient_norm: sup_norm(&cur.grad),
    })
}

/// Entropic projection of the empirical measure at `θ` through the dual,
/// starting from `λ = 0`.
pub fn inner_dual<T: Scalar, M: MomentModel<T> + ?Sized>(
    div: &Divergence<T>,
    model: &M,
    theta: &[T],
    sample: &Sample<T>,
    cfg: &DualConfig,
) -> Result<DualSolution<T>> {
    let phis = moment_values(model, theta, sample)?;
    solve_dual(div, &phis, model.k(), DVector::zeros(model.k() + 1), cfg)
}

/// Settings for [`gel_estimate`].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct GelConfig {
    pub estimator: EstimatorConfig,
    pub dual: DualConfig,
}

/// GEL estimate with the dual solution at `θ̂`.
#[derive(Debug, Clone, PartialEq)]
pub struct GelEstimate<T: Scalar> {
    pub estimate: EstimateResult<T>,
    pub dual: DualSolution<T>,
}

/// Inner dual value at `θ` and its θ-gradient `−Σ p_i ∇Φ(θ, X_i) λ₂`.
///
/// Infeasible points (unbounded or unconverged dual) give `Ok(None)`.
pub fn gel_criterion<T: Scalar, M: MomentModel<T> + ?Sized>(
    div: &Divergence<T>,
    model: &M,
    sample: &Sample<T>,
    cfg: &GelConfig,
    theta: &[T],
) -> Evaluation<T> {
    Ok(gel_point(div, model, sample, cfg, theta, None)?.map(|(v, g, _)| (v, g)))
}

type GelPoint<T> = Option<(T, Vec<T>, DVector<T>)>;

/// Criterion, gradient and dual maximizer at `θ`. A warm start that fails is
/// retried from `λ = 0`, so feasibility does not depend on the start.
fn gel_point<T: Scalar, M: MomentModel<T> + ?Sized>(
    div: &Divergence<T>,
    model: &M,
    sample: &Sample<T>,
    cfg: &GelConfig,
    theta: &[T],
    start: Option<&DVector<T>>,
) -> Result<GelPoint<T>> {
    let (d, k) = (model.d(), model.k());
    let phis = moment_values(model, theta, sample)?;
    let zero = DVector::zeros(k + 1);
    let mut attempt = solve_dual(div, &phis, k, start.unwrap_or(&zero).clone(), &cfg.dual);
    if start.is_some() && !matches!(&attempt, Ok(s) if s.converged) {
        attempt = solve_dual(div, &phis, k, zero, &cfg.dual);
    }
    let sol = match attempt {
        Ok(s) if s.converged => s,
        Ok(_) | Err(Error::UnboundedDual { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };
    let mut jac = vec![T::zero(); d * k];
    let grad = pairwise_mean(sample.n(), d, |i, out| {
        model.dphi(theta, sample.observation(i), &mut jac);
        let p = sol.weights[i];
        for l in 0..d {
            let row = &jac[l * k..(l + 1) * k];
            out[l] = p * row
                .iter()
                .zip(&sol.lambda2)
                .fold(T::zero(), |a, (g, lam)| a + *g * *lam);
        }
        Ok::<(), Error>(())
    })?;
    // pairwise_mean divides by n; the weights already carry 1/n.
    let n = T::from_usize_lossy(sample.n());
    let mut lambda = DVector::zeros(k + 1);
    lambda[0] = sol.lambda1;
    for (j, l) in sol.lambda2.iter().enumerate() {
        lambda[j + 1] = *l;
    }
    Ok(Some((sol.value, grad.into_iter().map(|g| -g * n).collect(), lambda)))
}

/// GEL estimator `argmin_Θ sup_λ λ₁ − (1/n) Σ f*(λ₁ + λ₂ᵗ Φ(θ, X_i))`.
pub fn gel_estimate<T: Scalar, M: MomentModel<T> + ?Sized>(
    model: &M,
    sample: &Sample<T>,
    div: &Divergence<T>,
    cfg: &GelConfig,
) -> Result<GelEstimate<T>> {
    // The identity-weighted GMM estimate joins the grid seeds: the GEL
    // criterion is infinite wherever zero leaves the hull of the moment
    // values, which on small samples can exclude every grid point.
    let identity = DMatrix::<T>::identity(model.k(), model.k());
    let extra: Vec<Vec<T>> = gmm_fixed(model, sample, &identity, &cfg.estimator)
        .map(|r| vec![r.theta_hat])
        .unwrap_or_default();
    // Outer evaluations close to the previous one start the dual from its
    // maximizer.
    let b = model.theta_box();
    let reach: Vec<T> = (0..b.dim())
        .map(|i| (b.upper()[i] - b.lower()[i]) * T::lit(0.05))
        .collect();
    let warm: RefCell<Option<(Vec<T>, DVector<T>)>> = RefCell::new(None);
    let local = minimize_with_seeds(b, &cfg.estimator.optimizer, &extra, |theta| {
        let start = warm.borrow().as_ref().and_then(|(prev, lambda)| {
            let near = prev
                .iter()
                .zip(theta)
                .zip(&reach)
                .all(|((a, c), r)| (*a - *c).abs() <= *r);
            near.then(|| lambda.clone())
        });
        let point = gel_point(div, model, sample, cfg, theta, start.as_ref())?;
        Ok(point.map(|(v, g, lambda)| {
            *warm.borrow_mut() = Some((theta.to_vec(), lambda));
            (v, g)
        }))
    })?;
    let dual = inner_dual(div, model, &local.theta, sample, &cfg.dual)?;
    let weighting = eval_centered_precision(model, &local.theta, sample, cfg.estimator.cond_cap).ok();
    let mut estimate = EstimateResult::from_local(local, dual.value.max(T::zero()), weighting);
    estimate.implied_weights = Some(dual.weights.clone());
    Ok(GelEstimate { estimate, dual })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::cue;
    use crate::moment::eval_moment;
    use crate::registry;

    fn nm() -> crate::moment::MomentProblem<f64> {
        registry::problem("normal-mean").unwrap()
    }

    fn all() -> Vec<Divergence<f64>> {
        DIVERGENCE_IDS.iter().map(|id| divergence(id).unwrap()).collect()
    }

    #[test]
    fn registered_divergences_validate() {
        for d in all() {
            d.validate().unwrap();
            assert_eq!(conjugate(&d, 0.0).unwrap(), 0.0);
        }
        assert!(matches!(divergence::<f64>("klx"), Err(Error::UnknownId { .. })));
    }

    #[test]
    fn conjugate_values() {
        let et = divergence::<f64>("et").unwrap();
        assert!((conjugate(&et, 1.0).unwrap() - (std::f64::consts::E - 1.0)).abs() < 1e-15);
        let eu = divergence::<f64>("euclidean").unwrap();
        assert_eq!(conjugate(&eu, 1.0).unwrap(), 1.5);
        let el = divergence::<f64>("el").unwrap();
        assert!(matches!(conjugate(&el, 1.0), Err(Error::Domain { .. })));
        assert!(matches!(conjugate(&el, 2.0), Err(Error::Domain { .. })));
        assert!((conjugate(&el, 0.5).unwrap() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn broken_divergence_is_rejected() {
        // f(x) = (x − 1)², conjugate deliberately off by a factor.
        let r = Divergence::<f64>::custom(
            "bad",
            Arc::new(|x| (x - 1.0).powi(2)),
            Arc::new(|y| y + y * y / 2.0),
            Arc::new(|y| 1.0 + y),
            Arc::new(|_| 1.0),
            Interval::REAL,
            Interval::REAL,
        );
        assert!(matches!(r, Err(Error::InvalidDivergence { .. })));
        let ok = Divergence::<f64>::custom(
            "quad2",
            Arc::new(|x| (x - 1.0).powi(2)),
            Arc::new(|y| y + y * y / 4.0),
            Arc::new(|y| 1.0 + y / 2.0),
            Arc::new(|_| 0.5),
            Interval::REAL,
            Interval::REAL,
        );
        assert!(ok.is_ok());
    }

    #[test]
    fn divergence_value_examples() {
        for d in all() {
            assert_eq!(divergence_value(&d, &[0.25; 4]).unwrap(), 0.0);
            assert!(divergence_value(&d, &[0.3, 0.7]).unwrap() > 0.0);
        }
        let eu = divergence::<f64>("euclidean").unwrap();
        assert!((divergence_value(&eu, &[0.75, 0.25]).unwrap() - 0.125).abs() < 1e-15);
        let el = divergence::<f64>("el").unwrap();
        assert!(matches!(divergence_value(&el, &[0.0, 1.0]), Err(Error::Domain { .. })));
        let et = divergence::<f64>("et").unwrap();
        assert!((divergence_value(&et, &[0.0, 1.0]).unwrap() - 0.5 * (1.0 + (2.0 * 2f64.ln() - 1.0))).abs() < 1e-15);
    }

    #[test]
    fn zero_moments_give_uniform_weights() {
        let p = registry::problem::<f64>("scalar-mean").unwrap();
        let s = Sample::scalar(vec![0.5; 5]).unwrap();
        for d in all() {
            let sol = inner_dual(&d, &p, &[0.5], &s, &DualConfig::default()).unwrap();
            assert_eq!(sol.value, 0.0);
            assert_eq!(sol.lambda1, 0.0);
            assert!(sol.weights.iter().all(|w| (*w - 0.2).abs() < 1e-15));
        }
    }

    #[test]
    fn two_point_sample_at_root() {
        let s = Sample::scalar(vec![0.0, 2.0]).unwrap();
        for d in all() {
            let sol = inner_dual(&d, &nm(), &[1.0], &s, &DualConfig::default()).unwrap();
            assert!(sol.value.abs() < 1e-15);
            assert!((sol.weights[0] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn separated_moments_are_unbounded() {
        let s = Sample::scalar(vec![0.0, 2.0]).unwrap();
        for id in ["el", "et"] {
            let d = divergence::<f64>(id).unwrap();
            let r = inner_dual(&d, &nm(), &[2.9], &s, &DualConfig::default());
            assert!(matches!(r, Err(Error::UnboundedDual { .. })), "{id}: {r:?}");
        }
    }

    #[test]
    fn hull_infeasibility_without_sign_separation_is_detected() {
        // Φ = (x − θ, x² − θ² − 1): at θ = 0.2 with x ∈ {−1, 1.4} the first
        // coordinate changes sign but the two moment vectors are not
        // opposite, so zero is outside their hull.
        let s = Sample::scalar(vec![-1.0, 1.4]).unwrap();
        for id in ["el", "et"] {
            let d = divergence::<f64>(id).unwrap();
            let r = inner_dual(&d, &nm(), &[0.2], &s, &DualConfig::default());
            assert!(matches!(r, Err(Error::UnboundedDual { .. })), "{id}: {r:?}");
        }
    }

    #[test]
    fn weights_solve_the_projection_and_match_primal() {
        let p = nm();
        let s = p.sample(300, 13).unwrap();
        for d in all() {
            for theta in [0.9, 1.0, 1.1] {
                let sol = inner_dual(&d, &p, &[theta], &s, &DualConfig::default()).unwrap();
                assert!(sol.converged);
                let total: f64 = sol.weights.iter().sum();
                assert!((total - 1.0).abs() < 1e-8);
                let mut wm = [0.0; 2];
                for (i, w) in sol.weights.iter().enumerate() {
                    let x = s.observation(i)[0];
                    wm[0] += w * (x - theta);
                    wm[1] += w * (x * x - theta * theta - 1.0);
                }
                assert!(wm[0].abs() < 1e-8 && wm[1].abs() < 1e-8, "{wm:?}");
                let primal = divergence_value(&d, &sol.weights).unwrap();
                assert!((primal - sol.value).abs() < 1e-6, "{} {primal} {}", d.id(), sol.value);
                if d.id() == "el" {
                    assert!(sol.weights.iter().all(|w| *w > 0.0));
                }
            }
        }
    }

    #[test]
    fn euclidean_dual_is_half_the_cue_criterion() {
        let p = nm();
        let s = p.sample(200, 3).unwrap();
        let eu = divergence::<f64>("euclidean").unwrap();
        let theta = [1.07];
        let sol = inner_dual(&eu, &p, &theta, &s, &DualConfig::default()).unwrap();
        let f = eval_moment(&p, &theta, &s).unwrap();
        let w = eval_centered_precision(&p, &theta, &s, 1e12).unwrap();
        assert!((2.0 * sol.value - f.dot(&(&w * &f))).abs() < 1e-14);
    }

    #[test]
    fn gel_gradient_matches_finite_differences() {
        let p = registry::problem::<f64>("normal-mean-var").unwrap();
        let s = p.sample(300, 4).unwrap();
        let cfg = GelConfig::default();
        for d in all() {
            let theta = [1.05, 0.9];
            let (_, g) = gel_criterion(&d, &p, &s, &cfg, &theta).unwrap().unwrap();
            for l in 0..2 {
                let h = 1e-6;
                let mut tp = theta;
                let mut tm = theta;
                tp[l] += h;
                tm[l] -= h;
                let fp = gel_criterion(&d, &p, &s, &cfg, &tp).unwrap().unwrap().0;
                let fm = gel_criterion(&d, &p, &s, &cfg, &tm).unwrap().unwrap().0;
                let fd = (fp - fm) / (2.0 * h);
                assert!(
                    (fd - g[l]).abs() < 1e-6 * (1.0 + g[l].abs()),
                    "{} {l}: {fd} vs {}",
                    d.id(),
                    g[l]
                );
            }
        }
    }

    #[test]
    fn gel_on_two_points_finds_root() {
        let s = Sample::scalar(vec![0.0, 2.0]).unwrap();
        for d in all() {
            let r = gel_estimate(&nm(), &s, &d, &GelConfig::default()).unwrap();
            assert!(
                (r.estimate.theta_hat[0] - 1.0).abs() < 1e-8,
                "{}: {:?}",
                d.id(),
                r.estimate.theta_hat
            );
            assert!(r.estimate.objective < 1e-15);
        }
    }

    #[test]
    fn euclidean_gel_matches_cue() {
        let p = nm();
        let eu = divergence::<f64>("euclidean").unwrap();
        for seed in 0..5 {
            let s = p.sample(2000, 100 + seed).unwrap();
            let g = gel_estimate(&p, &s, &eu, &GelConfig::default()).unwrap();
            let c = cue(&p, &s, &EstimatorConfig::default()).unwrap();
            assert!((g.estimate.theta_hat[0] - c.theta_hat[0]).abs() < 1e-4);
        }
    }

    #[test]
    fn gel_objective_not_above_truth() {
        let p = nm();
        let s = p.sample(500, 77).unwrap();
        for d in all() {
            let r = gel_estimate(&p, &s, &d, &GelConfig::default()).unwrap();
            let at_truth = inner_dual(&d, &p, &[1.0], &s, &DualConfig::default()).unwrap();
            assert!(r.estimate.objective <= at_truth.value + 1e-15);
        }
    }

    #[test]
    fn inner_value_is_continuous_in_theta() {
        let p = nm();
        let s = p.sample(400, 9).unwrap();
        for d in all() {
            for theta in [0.8, 1.0, 1.2] {
                let a = inner_dual(&d, &p, &[theta], &s, &DualConfig::default()).unwrap().value;
                let b = inner_dual(&d, &p, &[theta + 1e-6], &s, &DualConfig::default())
                    .unwrap()
                    .value;
                assert!((a - b).abs() < 1e-3);
            }
        }
    }
}

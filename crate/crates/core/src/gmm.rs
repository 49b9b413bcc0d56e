//! Quadratic-form GMM criteria: fixed weighting, two-step and continuously
//! updated (CUE).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{is_symmetric, min_eigenvalue, try_spd_inverse};
use crate::moment::{
    eval_centered_precision, eval_moment, eval_moment_and_jacobian, moment_summary, precision_from, MomentModel,
    Sample, DEFAULT_COND_CAP,
};
use crate::optim::{minimize, Evaluation, LocalMin, OptimizerConfig};
use crate::scalar::{to_f64_vec, Scalar};

/// Choice of weighting matrix.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightingScheme<T: Scalar> {
    /// A fixed symmetric positive definite `k × k` matrix.
    Fixed(DMatrix<T>),
    TwoStep,
    Cue,
}

impl<T: Scalar> WeightingScheme<T> {
    /// Checks the `Fixed` matrix: symmetric to `1e−12` relative, positive definite.
    pub fn validate(&self, k: usize) -> Result<()> {
        if let WeightingScheme::Fixed(m) = self {
            validate_weighting(m, k)?;
        }
        Ok(())
    }
}

fn validate_weighting<T: Scalar>(m: &DMatrix<T>, k: usize) -> Result<()> {
    if m.shape() != (k, k) {
        return Err(Error::Dimension(format!(
            "weighting matrix is {:?}, expected {k}x{k}",
            m.shape()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) || !is_symmetric(m, 1e-12) {
        return Err(Error::Matrix {
            name: "M",
            problem: "not symmetric".into(),
        });
    }
    let lo = min_eigenvalue(m);
    if lo <= T::zero() {
        return Err(Error::Matrix {
            name: "M",
            problem: format!("not positive definite (min eigenvalue {:e})", lo.as_f64()),
        });
    }
    Ok(())
}

/// Options shared by the GMM-type estimators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    pub optimizer: OptimizerConfig,
    /// Condition-number cap for covariance inversions.
    pub cond_cap: f64,
    /// CUE weights with `V̂(θ)⁻¹` instead of the centered `[V̂(θ) − F Fᵗ]⁻¹`.
    pub uncentered: bool,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::default(),
            cond_cap: DEFAULT_COND_CAP,
            uncentered: false,
        }
    }
}

/// Outcome of an estimation.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateResult<T: Scalar> {
    pub theta_hat: Vec<T>,
    /// Minimized criterion value (nonnegative).
    pub objective: T,
    /// Weighting applied at the solution. For GEL this is `Ŵ(θ̂)` when it exists.
    pub weighting_used: Option<DMatrix<T>>,
    pub converged: bool,
    pub iterations: usize,
    /// Projected gradient norm of the criterion as optimized.
    pub gradient_norm: T,
    /// Step-one estimate of the two-step procedure.
    pub preliminary: Option<Vec<T>>,
    /// Implied probabilities of the GEL entropic projection at `θ̂`.
    pub implied_weights: Option<Vec<T>>,
}

/// Plain `f64` view of an [`EstimateResult`] for JSON output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateSummary {
    pub theta_hat: Vec<f64>,
    pub objective: f64,
    pub weighting_used: Option<Vec<Vec<f64>>>,
    pub converged: bool,
    pub iterations: usize,
    pub gradient_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preliminary: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub implied_weights: Option<Vec<f64>>,
}

pub(crate) fn matrix_rows<T: Scalar>(m: &DMatrix<T>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|r| (0..m.ncols()).map(|c| m[(r, c)].as_f64()).collect())
        .collect()
}

impl<T: Scalar> EstimateResult<T> {
    pub fn summary(&self) -> EstimateSummary {
        EstimateSummary {
            theta_hat: to_f64_vec(&self.theta_hat),
            objective: self.objective.as_f64(),
            weighting_used: self.weighting_used.as_ref().map(matrix_rows),
            converged: self.converged,
            iterations: self.iterations,
            gradient_norm: self.gradient_norm.as_f64(),
            preliminary: self.preliminary.as_deref().map(to_f64_vec),
            implied_weights: self.implied_weights.as_deref().map(to_f64_vec),
        }
    }

    pub(crate) fn from_local(local: LocalMin<T>, objective: T, weighting_used: Option<DMatrix<T>>) -> Self {
        Self {
            theta_hat: local.theta,
            objective,
            weighting_used,
            converged: local.converged,
            iterations: local.iterations,
            gradient_norm: local.gradient_norm,
            preliminary: None,
            implied_weights: None,
        }
    }
}

/// Largest power of two not above the mean eigenvalue of `m`.
fn power_of_two_scale<T: Scalar>(m: &DMatrix<T>) -> T {
    let mean_eig = (m.trace() / T::from_usize_lossy(m.nrows())).as_f64();
    let exp = mean_eig.log2().floor();
    if exp.is_finite() {
        T::lit(2f64.powi(exp as i32))
    } else {
        T::one()
    }
}

/// `θ ↦ F(θ)ᵗ M F(θ)` with gradient `2 D̂(θ) M F(θ)`.
pub fn fixed_criterion<T: Scalar, M: MomentModel<T> + ?Sized>(
    model: &M,
    sample: &Sample<T>,
    weight: &DMatrix<T>,
    theta: &[T],
) -> Evaluation<T> {
    let (f, jac) = eval_moment_and_jacobian(model, theta, sample)?;
    let mf = weight * &f;
    let value = f.dot(&mf);
    let grad = (jac * mf) * T::lit(2.0);
    Ok(Some((value, grad.as_slice().to_vec())))
}

/// GMM with a fixed weighting matrix, `argmin_Θ F(θ, μ_n)ᵗ M F(θ, μ_n)`.
///
/// The optimizer runs on `M / 2^e` with `2^e` the power of two closest below
/// the mean eigenvalue of `M`, so scaling `M` by a power of two leaves the
/// search bit-identical. The reported objective uses `M` itself.
pub fn gmm_fixed<T: Scalar, M: MomentModel<T> + ?Sized>(
    model: &M,
    sample: &Sample<T>,
    weight: &DMatrix<T>,
    cfg: &EstimatorConfig,
) -> Result<EstimateResult<T>> {
    validate_weighting(weight, model.k())?;
    let scaled = weight / power_of_two_scale(weight);
    let local = minimize(model.theta_box(), &cfg.optimizer, |theta| {
        fixed_criterion(model, sample, &scaled, theta)
    })?;
    let f = eval_moment(model, &local.theta, sample)?;
    let objective = f.dot(&(weight * &f)).max(T::zero());
    Ok(EstimateResult::from_local(local, objective, Some(weight.clone())))
}

/// Two-step GMM: identity-weighted preliminary `θ̃`, then re-estimation with
/// `Ŵ(θ̃)`, the inverse centered sample covariance of `Φ(θ̃, ·)`.
pub fn gmm_two_step<T: Scalar, M: MomentModel<T> + ?Sized>(
    model: &M,
    sample: &Sample<T>,
    cfg: &EstimatorConfig,
) -> Result<EstimateResult<T>> {
    let identity = DMatrix::<T>::identity(model.k(), model.k());
    let first = gmm_fixed(model, sample, &identity, cfg)?;
    let weight = eval_centered_precision(model, &first.theta_hat, sample, cfg.cond_cap)?;
    let mut second = gmm_fixed(model, sample, &weight, cfg)?;
    second.preliminary = Some(first.theta_hat);
    Ok(second)
}

/// CUE criterion `F(θ)ᵗ Ŵ(θ) F(θ)` and its analytic gradient.
///
/// Returns `Ok(None)` where the covariance cannot be inverted.
pub fn cue_criterion<T: Scalar, M: MomentModel<T> + ?Sized>(
    model: &M,
    sample: &Sample<T>,
    cfg: &EstimatorConfig,
    theta: &[T],
) -> Evaluation<T> {
    let s = moment_summary(model, theta, sample, true)?;
    let cov = if cfg.uncentered {
        s.second_moment.clone()
    } else {
        s.covariance()
    };
    let Ok(inv) = try_spd_inverse(&cov, cfg.cond_cap) else {
        return Ok(None);
    };
    let w = inv.inverse;
    let f = &s.mean;
    let a = &w * f;
    let value = f.dot(&a);
    let jac = s.jacobian.as_ref().expect("derivatives requested");
    let cross = s.cross.as_ref().expect("derivatives requested");
    let fa = f.dot(&a);
    let two = T::lit(2.0);
    let grad: Vec<T> = (0..model.d())
        .map(|l| {
            let dl = DVector::from_iterator(model.k(), jac.row(l).iter().copied());
            let ad = a.dot(&dl);
            // dS_l = C_l + C_lᵗ (− D_l Fᵗ − F D_lᵗ when centered)
            let aca = a.dot(&(&cross[l] * &a));
            let mut g = two * ad - two * aca;
            if !cfg.uncentered {
                g += two * ad * fa;
            }
            g
        })
        .collect();
    Ok(Some((value, grad)))
}

/// Continuously updated estimator: minimizes `F(θ)ᵗ Ŵ(θ) F(θ)` over `Θ`.
pub fn cue<T: Scalar, M: MomentModel<T> + ?Sized>(
    model: &M,
    sample: &Sample<T>,
    cfg: &EstimatorConfig,
) -> Result<EstimateResult<T>> {
    let local = minimize(model.theta_box(), &cfg.optimizer, |theta| {
        cue_criterion(model, sample, cfg, theta)
    })?;
    let s = moment_summary(model, &local.theta, sample, false)?;
    let cov = if cfg.uncentered {
        s.second_moment.clone()
    } else {
        s.covariance()
    };
    let weight = precision_from(&cov, cfg.cond_cap)?;
    let objective = s.mean.dot(&(&weight * &s.mean)).max(T::zero());
    Ok(EstimateResult::from_local(local, objective, Some(weight)))
}

/// Dispatches on a [`WeightingScheme`].
pub fn estimate_gmm<T: Scalar, M: MomentModel<T> + ?Sized>(
    model: &M,
    sample: &Sample<T>,
    scheme: &WeightingScheme<T>,
    cfg: &EstimatorConfig,
) -> Result<EstimateResult<T>> {
    match scheme {
        WeightingScheme::Fixed(m) => gmm_fixed(model, sample, m, cfg),
        WeightingScheme::TwoStep => gmm_two_step(model, sample, cfg),
        WeightingScheme::Cue => cue(model, sample, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry;

    fn nm() -> crate::moment::MomentProblem<f64> {
        registry::problem("normal-mean").unwrap()
    }

    fn two_points() -> Sample<f64> {
        Sample::scalar(vec![0.0, 2.0]).unwrap()
    }

    #[test]
    fn fixed_identity_recovers_root() {
        let r = gmm_fixed(
            &nm(),
            &two_points(),
            &DMatrix::identity(2, 2),
            &EstimatorConfig::default(),
        )
        .unwrap();
        assert!((r.theta_hat[0] - 1.0).abs() < 1e-9);
        assert!(r.objective < 1e-18);
        assert!(r.converged);
    }

    #[test]
    fn fixed_any_spd_recovers_root() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.7, 0.7, 0.5]);
        let r = gmm_fixed(&nm(), &two_points(), &m, &EstimatorConfig::default()).unwrap();
        assert!((r.theta_hat[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn exactly_identified_gives_sample_mean() {
        let p = registry::problem::<f64>("scalar-mean").unwrap();
        let s = p.sample(57, 4).unwrap();
        let mean = s.as_slice().iter().sum::<f64>() / 57.0;
        let cfg = EstimatorConfig::default();
        let fixed = gmm_fixed(&p, &s, &DMatrix::identity(1, 1), &cfg).unwrap();
        let two = gmm_two_step(&p, &s, &cfg).unwrap();
        let c = cue(&p, &s, &cfg).unwrap();
        for r in [&fixed, &two, &c] {
            assert!((r.theta_hat[0] - mean).abs() < 1e-8, "{} vs {mean}", r.theta_hat[0]);
        }
    }

    #[test]
    fn two_step_on_two_points_is_singular() {
        let r = gmm_two_step(&nm(), &two_points(), &EstimatorConfig::default());
        assert!(matches!(r, Err(Error::SingularCovariance { .. })), "{r:?}");
    }

    #[test]
    fn invalid_weighting_is_rejected() {
        let cfg = EstimatorConfig::default();
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(
            gmm_fixed(&nm(), &two_points(), &asym, &cfg),
            Err(Error::Matrix { .. })
        ));
        let indef = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            gmm_fixed(&nm(), &two_points(), &indef, &cfg),
            Err(Error::Matrix { .. })
        ));
        assert!(WeightingScheme::Fixed(DMatrix::<f64>::identity(3, 3))
            .validate(2)
            .is_err());
    }

    #[test]
    fn power_of_two_scaling_is_exact() {
        let p = nm();
        let s = p.sample(300, 8).unwrap();
        let cfg = EstimatorConfig::default();
        let m = DMatrix::from_row_slice(2, 2, &[1.3, 0.2, 0.2, 0.4]);
        let base = gmm_fixed(&p, &s, &m, &cfg).unwrap();
        for c in [0.25, 2.0, 1024.0] {
            let r = gmm_fixed(&p, &s, &(&m * c), &cfg).unwrap();
            assert_eq!(r.theta_hat, base.theta_hat);
            assert_eq!(r.iterations, base.iterations);
            assert!((r.objective - c * base.objective).abs() <= 1e-15 * r.objective.abs());
        }
        let r = gmm_fixed(&p, &s, &(&m * 3.7), &cfg).unwrap();
        assert!((r.theta_hat[0] - base.theta_hat[0]).abs() < 1e-8);
        assert!((r.objective - 3.7 * base.objective).abs() < 1e-10 * r.objective);
    }

    #[test]
    fn cue_gradient_matches_finite_differences() {
        for id in ["normal-mean", "normal-mean-var"] {
            let p = registry::problem::<f64>(id).unwrap();
            let s = p.sample(400, 2).unwrap();
            for uncentered in [false, true] {
                let cfg = EstimatorConfig {
                    uncentered,
                    ..EstimatorConfig::default()
                };
                let theta: Vec<f64> = p.true_theta().unwrap().iter().map(|t| t + 0.15).collect();
                let (_, g) = cue_criterion(&p, &s, &cfg, &theta).unwrap().unwrap();
                for l in 0..theta.len() {
                    let h = 1e-6;
                    let mut tp = theta.clone();
                    let mut tm = theta.clone();
                    tp[l] += h;
                    tm[l] -= h;
                    let fp = cue_criterion(&p, &s, &cfg, &tp).unwrap().unwrap().0;
                    let fm = cue_criterion(&p, &s, &cfg, &tm).unwrap().unwrap().0;
                    let fd = (fp - fm) / (2.0 * h);
                    assert!(
                        (fd - g[l]).abs() < 1e-6 * (1.0 + g[l].abs()),
                        "{id} {uncentered} {l}: {fd} {}",
                        g[l]
                    );
                }
            }
        }
    }

    #[test]
    fn estimates_are_deterministic() {
        let p = nm();
        let s = p.sample(500, 21).unwrap();
        let cfg = EstimatorConfig::default();
        for scheme in [WeightingScheme::TwoStep, WeightingScheme::Cue] {
            let a = estimate_gmm(&p, &s, &scheme, &cfg).unwrap();
            let b = estimate_gmm(&p, &s, &scheme, &cfg).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn two_step_is_close_to_truth_on_large_sample() {
        let p = nm();
        let s = p.sample(2000, 42).unwrap();
        let r = gmm_two_step(&p, &s, &EstimatorConfig::default()).unwrap();
        assert!((r.theta_hat[0] - 1.0).abs() < 0.1);
        assert!(r.preliminary.is_some());
        assert!(r.converged);
    }

    #[test]
    fn objective_not_above_seed_values() {
        let p = nm();
        let s = p.sample(200, 5).unwrap();
        let cfg = EstimatorConfig::default();
        let m = DMatrix::identity(2, 2);
        let r = gmm_fixed(&p, &s, &m, &cfg).unwrap();
        for seed in p.theta_box().grid(9) {
            let f = eval_moment(&p, &seed, &s).unwrap();
            assert!(r.objective <= f.dot(&f) + 1e-15);
        }
    }

    #[test]
    fn two_dimensional_problem_estimates() {
        let p = registry::problem::<f64>("normal-mean-var").unwrap();
        let s = p.sample(3000, 17).unwrap();
        let cfg = EstimatorConfig::default();
        let two = gmm_two_step(&p, &s, &cfg).unwrap();
        let c = cue(&p, &s, &cfg).unwrap();
        for r in [two, c] {
            assert!((r.theta_hat[0] - 1.0).abs() < 0.1, "{:?}", r.theta_hat);
            assert!((r.theta_hat[1] - 1.0).abs() < 0.15, "{:?}", r.theta_hat);
        }
    }
}

//! Approximate moment functions `Φ_m → Φ` and the estimators built on them.
//!
//! An [`ApproximateProblem`] wraps a base problem with a perturbation family
//! indexed by a level `m` and a rate `φ_m` such that `φ_m ‖Φ_m − Φ‖` stays
//! bounded. [`Level::Exact`] is the `m = ∞` sentinel and evaluates the base
//! problem itself.

use std::fmt;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::{cue, gmm_two_step, EstimateResult, EstimatorConfig};
use crate::moment::{MomentModel, MomentProblem, Sample, ThetaBox};
use crate::montecarlo::derive_seed;
use crate::scalar::Scalar;

/// Approximation level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Level {
    Finite(u64),
    /// `m = ∞`: the exact moment function.
    Exact,
}

/// The sequence `m ↦ φ_m`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rate {
    /// `φ_m = m`
    Linear,
    /// `φ_m = m²`
    Quadratic,
    /// `φ_m = m^p`
    Power(f64),
}

impl Rate {
    pub fn phi(&self, m: u64) -> f64 {
        let m = m as f64;
        match self {
            Rate::Linear => m,
            Rate::Quadratic => m * m,
            Rate::Power(p) => m.powf(*p),
        }
    }
}

/// Registered perturbation families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    /// `Φ_m = Φ`.
    Zero,
    /// `Φ_m = Φ + h / φ_m` with bounded smooth `h`; for `d = q = 1` and
    /// `k = 2`, `h(θ, x) = (sin(θ + x), cos(θ x))`.
    SmoothTrig,
    /// `Φ_m = Φ · Q_m(a)` where `Q_m(a)` is the `m`-node midpoint rule for
    /// `∫₀¹ a e^{at} / (e^a − 1) dt = 1`, `a_j(θ, x) = 1 + sin(s + t + j)/2`,
    /// `s = Σθ`, `t = Σx`. The quadrature error is `O(m⁻²)`.
    Quadrature,
}

impl Family {
    pub const IDS: &'static [&'static str] = &["zero", "smooth-trig", "quadrature"];

    pub fn from_id(id: &str) -> Result<Self> {
        match id {
            "zero" => Ok(Family::Zero),
            "smooth-trig" => Ok(Family::SmoothTrig),
            "quadrature" => Ok(Family::Quadrature),
            _ => Err(Error::UnknownId {
                kind: "perturbation family",
                id: id.into(),
                field: "family".into(),
            }),
        }
    }
}

/// A base problem together with a family of approximations.
#[derive(Clone)]
pub struct ApproximateProblem<T: Scalar> {
    base: MomentProblem<T>,
    family: Family,
    rate: Rate,
}

impl<T: Scalar> fmt::Debug for ApproximateProblem<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ApproximateProblem")
            .field("base", &self.base.name())
            .field("family", &self.family)
            .field("rate", &self.rate)
            .finish()
    }
}

/// Wraps `problem` with the perturbation family named `family`.
pub fn perturb_constraint<T: Scalar>(
    problem: &MomentProblem<T>,
    family: &str,
    rate: Rate,
) -> Result<ApproximateProblem<T>> {
    Ok(ApproximateProblem {
        base: problem.clone(),
        family: Family::from_id(family)?,
        rate,
    })
}

fn sums<T: Scalar>(theta: &[T], x: &[T]) -> (T, T) {
    let s = theta.iter().fold(T::zero(), |a, v| a + *v);
    let t = x.iter().fold(T::zero(), |a, v| a + *v);
    (s, t)
}

/// Midpoint rule with `m` nodes for `∫₀¹ a e^{at}/(e^a − 1) dt` and its
/// derivative in `a`.
pub fn midpoint_weight<T: Scalar>(a: T, m: u64) -> (T, T) {
    let norm = a.exp_m1();
    let tail = a.exp() / norm;
    let inv_a = T::one() / a;
    let mf = T::lit(m as f64);
    // nodes t_i = (i + 1/2)/m; e^{a t_i} by geometric recurrence
    let step = (a / mf).exp();
    let mut e = (a / (mf + mf)).exp();
    let mut q = T::zero();
    let mut dq = T::zero();
    for i in 0..m {
        let t = (T::lit(i as f64) + T::lit(0.5)) / mf;
        let w = a * e / norm;
        q += w;
        dq += w * (inv_a + t - tail);
        e *= step;
    }
    (q / mf, dq / mf)
}

impl<T: Scalar> ApproximateProblem<T> {
    pub fn base(&self) -> &MomentProblem<T> {
        &self.base
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn rate(&self) -> Rate {
        self.rate
    }

    /// `φ_m` (infinite for the exact level).
    pub fn phi_rate(&self, level: Level) -> f64 {
        match level {
            Level::Finite(m) => self.rate.phi(m),
            Level::Exact => f64::INFINITY,
        }
    }

    /// The problem at a fixed level, usable wherever a [`MomentModel`] is.
    pub fn at(&self, level: Level) -> ApproxView<'_, T> {
        ApproxView { problem: self, level }
    }

    /// `Φ_m(θ, x)`.
    pub fn phi_m(&self, level: Level, theta: &[T], x: &[T], out: &mut [T]) {
        self.base.phi(theta, x, out);
        let Level::Finite(m) = level else { return };
        match self.family {
            Family::Zero => {}
            Family::SmoothTrig => {
                let inv = T::lit(1.0 / self.rate.phi(m));
                let (s, t) = sums(theta, x);
                for (j, o) in out.iter_mut().enumerate() {
                    *o += inv * trig(j, s, t);
                }
            }
            Family::Quadrature => {
                let (s, t) = sums(theta, x);
                for (j, o) in out.iter_mut().enumerate() {
                    let a = quad_a(j, s, t);
                    *o *= midpoint_weight(a, m).0;
                }
            }
        }
    }

    /// `∇Φ_m(θ, x)`, row-major `d × k`.
    pub fn dphi_m(&self, level: Level, theta: &[T], x: &[T], out: &mut [T]) {
        self.base.dphi(theta, x, out);
        let Level::Finite(m) = level else { return };
        let (d, k) = (self.base.d(), self.base.k());
        match self.family {
            Family::Zero => {}
            Family::SmoothTrig => {
                let inv = T::lit(1.0 / self.rate.phi(m));
                let (s, t) = sums(theta, x);
                for j in 0..k {
                    let g = inv * trig_ds(j, s, t);
                    for l in 0..d {
                        out[l * k + j] += g;
                    }
                }
            }
            Family::Quadrature => {
                let mut phi = vec![T::zero(); k];
                self.base.phi(theta, x, &mut phi);
                let (s, t) = sums(theta, x);
                let half = T::lit(0.5);
                for j in 0..k {
                    let c = T::from_usize_lossy(j);
                    let a = quad_a(j, s, t);
                    let (q, dq) = midpoint_weight(a, m);
                    let da = half * (s + t + c).cos();
                    for l in 0..d {
                        out[l * k + j] = out[l * k + j] * q + phi[j] * dq * da;
                    }
                }
            }
        }
    }
}

fn trig<T: Scalar>(j: usize, s: T, t: T) -> T {
    let c = T::from_usize_lossy(j / 2);
    if j.is_multiple_of(2) {
        (s + t + c).sin()
    } else {
        (s * t + c).cos()
    }
}

/// `∂h_j/∂θ_l` (identical for every `l` since `h` depends on `θ` through `Σθ`).
fn trig_ds<T: Scalar>(j: usize, s: T, t: T) -> T {
    let c = T::from_usize_lossy(j / 2);
    if j.is_multiple_of(2) {
        (s + t + c).cos()
    } else {
        -(s * t + c).sin() * t
    }
}

fn quad_a<T: Scalar>(j: usize, s: T, t: T) -> T {
    T::one() + T::lit(0.5) * (s + t + T::from_usize_lossy(j)).sin()
}

/// Fixed level of an [`ApproximateProblem`].
#[derive(Clone, Copy)]
pub struct ApproxView<'a, T: Scalar> {
    problem: &'a ApproximateProblem<T>,
    level: Level,
}

impl<T: Scalar> MomentModel<T> for ApproxView<'_, T> {
    fn d(&self) -> usize {
        self.problem.base.d()
    }
    fn k(&self) -> usize {
        self.problem.base.k()
    }
    fn q(&self) -> usize {
        self.problem.base.q()
    }
    fn theta_box(&self) -> &ThetaBox<T> {
        self.problem.base.theta_box()
    }
    fn phi(&self, theta: &[T], x: &[T], out: &mut [T]) {
        self.problem.phi_m(self.level, theta, x, out)
    }
    fn dphi(&self, theta: &[T], x: &[T], out: &mut [T]) {
        self.problem.dphi_m(self.level, theta, x, out)
    }
}

/// Two-step GMM with `Φ` and `Ŵ` replaced by `Φ_m` and `Ŵ_m` throughout.
pub fn approx_two_step<T: Scalar>(
    aproblem: &ApproximateProblem<T>,
    level: Level,
    sample: &Sample<T>,
    cfg: &EstimatorConfig,
) -> Result<EstimateResult<T>> {
    gmm_two_step(&aproblem.at(level), sample, cfg)
}

/// CUE with `Φ_m` and `Ŵ_m(θ)`.
pub fn approx_cue<T: Scalar>(
    aproblem: &ApproximateProblem<T>,
    level: Level,
    sample: &Sample<T>,
    cfg: &EstimatorConfig,
) -> Result<EstimateResult<T>> {
    cue(&aproblem.at(level), sample, cfg)
}

/// Estimators available for approximate constraints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ApproxEstimator {
    TwoStep,
    Cue,
}

impl ApproxEstimator {
    pub fn run<T: Scalar>(
        &self,
        aproblem: &ApproximateProblem<T>,
        level: Level,
        sample: &Sample<T>,
        cfg: &EstimatorConfig,
    ) -> Result<EstimateResult<T>> {
        match self {
            ApproxEstimator::TwoStep => approx_two_step(aproblem, level, sample, cfg),
            ApproxEstimator::Cue => approx_cue(aproblem, level, sample, cfg),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            ApproxEstimator::TwoStep => "two-step",
            ApproxEstimator::Cue => "cue",
        }
    }
}

/// Largest values of `φ_m ‖Φ_m − Φ‖` and `φ_m ‖∇Φ_m − ∇Φ‖` over probe points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProbeSup {
    pub m: u64,
    pub phi_m: f64,
    pub moment: f64,
    pub jacobian: f64,
}

/// Probe-grid check of the domination condition: one [`ProbeSup`] per level.
pub fn probe_domination<T: Scalar>(
    aproblem: &ApproximateProblem<T>,
    levels: &[u64],
    probes: &[(Vec<T>, Vec<T>)],
) -> Vec<ProbeSup> {
    let (d, k) = (aproblem.base.d(), aproblem.base.k());
    levels
        .iter()
        .map(|&m| {
            let rate = aproblem.rate.phi(m);
            let (mut sup_f, mut sup_g) = (0.0f64, 0.0f64);
            let (mut a, mut b) = (vec![T::zero(); k], vec![T::zero(); k]);
            let (mut ga, mut gb) = (vec![T::zero(); d * k], vec![T::zero(); d * k]);
            for (theta, x) in probes {
                aproblem.phi_m(Level::Finite(m), theta, x, &mut a);
                aproblem.phi_m(Level::Exact, theta, x, &mut b);
                aproblem.dphi_m(Level::Finite(m), theta, x, &mut ga);
                aproblem.dphi_m(Level::Exact, theta, x, &mut gb);
                let nf = a
                    .iter()
                    .zip(&b)
                    .map(|(u, v)| (*u - *v).as_f64().powi(2))
                    .sum::<f64>()
                    .sqrt();
                let ng = ga
                    .iter()
                    .zip(&gb)
                    .map(|(u, v)| (*u - *v).as_f64().powi(2))
                    .sum::<f64>()
                    .sqrt();
                sup_f = sup_f.max(rate * nf);
                sup_g = sup_g.max(rate * ng);
            }
            ProbeSup {
                m,
                phi_m: rate,
                moment: sup_f,
                jacobian: sup_g,
            }
        })
        .collect()
}

/// Probe points: a 5-per-axis grid over `Θ` crossed with observations drawn
/// from the base sampler (seeded), or `x = 0` when there is no sampler.
pub fn default_probes<T: Scalar>(problem: &MomentProblem<T>, draws: usize, seed: u64) -> Vec<(Vec<T>, Vec<T>)> {
    let xs: Vec<Vec<T>> = match problem.sample(draws.max(1), seed) {
        Ok(s) => (0..s.n()).map(|i| s.observation(i).to_vec()).collect(),
        Err(_) => vec![vec![T::zero(); problem.q()]],
    };
    problem
        .theta_box()
        .grid(5)
        .into_iter()
        .flat_map(|theta| xs.iter().map(move |x| (theta.clone(), x.clone())))
        .collect()
}

/// One row of a [`RateTable`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub m: u64,
    pub phi_m: f64,
    /// Mean over replications of `‖θ̂_m − θ̂‖²` on the same sample.
    pub mean_sq_diff: f64,
    pub stderr: f64,
    /// `n` times the trace of the replication covariance of `θ̂_m`.
    pub n_var_theta_m: f64,
    pub failures: usize,
    /// More than 5% of the replications failed in this cell.
    pub flagged: bool,
}

/// Result of [`rate_experiment`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateTable {
    pub estimator: ApproxEstimator,
    pub n: usize,
    pub replications: usize,
    pub rows: Vec<RateRow>,
    /// OLS slope of `log mean_sq_diff` on `log φ_m` over rows with a positive mean.
    pub slope: Option<f64>,
    /// `n` times the trace of the replication covariance of the exact estimator.
    pub n_var_theta_exact: f64,
    pub exact_failures: usize,
}

/// Least-squares slope of `log y` against `log x`; `None` with fewer than
/// two usable points.
pub fn log_log_slope(points: &[(f64, f64)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0 && x.is_finite() && y.is_finite())
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let nf = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / nf;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / nf;
    let sxx = pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    if sxx == 0.0 {
        return None;
    }
    Some(pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / sxx)
}

fn n_times_trace_var(estimates: &[&Vec<f64>], n: usize) -> f64 {
    if estimates.len() < 2 {
        return f64::NAN;
    }
    let d = estimates[0].len();
    let r = estimates.len() as f64;
    (0..d)
        .map(|j| {
            let mean = estimates.iter().map(|e| e[j]).sum::<f64>() / r;
            estimates.iter().map(|e| (e[j] - mean).powi(2)).sum::<f64>() / (r - 1.0)
        })
        .sum::<f64>()
        * n as f64
}

struct Replication {
    exact: Option<Vec<f64>>,
    levels: Vec<Option<Vec<f64>>>,
}

/// Paired Monte Carlo measurement of `E‖θ̂_m − θ̂‖²` along `m_grid`.
///
/// Replication `r` draws its sample with `derive_seed(seed, r)`; the exact
/// estimate and every level use that same sample. Results do not depend on
/// scheduling.
pub fn rate_experiment(
    aproblem: &ApproximateProblem<f64>,
    estimator: ApproxEstimator,
    n: usize,
    m_grid: &[u64],
    replications: usize,
    seed: u64,
    cfg: &EstimatorConfig,
) -> Result<RateTable> {
    if m_grid.is_empty() || m_grid.windows(2).any(|w| w[0] >= w[1]) || m_grid[0] == 0 {
        return Err(Error::Config {
            field: "m_grid".into(),
            message: "must be a nonempty strictly increasing list of positive levels".into(),
        });
    }
    if replications < 100 {
        return Err(Error::Config {
            field: "replications".into(),
            message: format!("rate experiments need at least 100 replications, got {replications}"),
        });
    }
    let base = aproblem.base();
    if n < 2.max(base.k() + 1) {
        return Err(Error::Config {
            field: "n".into(),
            message: format!("sample size {n} below max(2, k + 1)"),
        });
    }
    let reps: Vec<Replication> = (0..replications)
        .into_par_iter()
        .map(|r| {
            let Ok(sample) = base.sample(n, derive_seed(seed, r as u64)) else {
                return Replication {
                    exact: None,
                    levels: vec![None; m_grid.len()],
                };
            };
            let exact = estimator
                .run(aproblem, Level::Exact, &sample, cfg)
                .ok()
                .map(|e| e.theta_hat);
            let levels = m_grid
                .iter()
                .map(|&m| {
                    estimator
                        .run(aproblem, Level::Finite(m), &sample, cfg)
                        .ok()
                        .map(|e| e.theta_hat)
                })
                .collect();
            Replication { exact, levels }
        })
        .collect();

    let rows = m_grid
        .iter()
        .enumerate()
        .map(|(idx, &m)| {
            let mut sq = Vec::with_capacity(replications);
            let mut thetas = Vec::with_capacity(replications);
            let mut failures = 0;
            for rep in &reps {
                match (&rep.exact, &rep.levels[idx]) {
                    (Some(e), Some(a)) => {
                        sq.push(e.iter().zip(a).map(|(u, v)| (u - v).powi(2)).sum::<f64>());
                        thetas.push(a);
                    }
                    _ => failures += 1,
                }
            }
            let cnt = sq.len() as f64;
            let mean = sq.iter().sum::<f64>() / cnt;
            let sd = if sq.len() > 1 {
                (sq.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (cnt - 1.0)).sqrt()
            } else {
                f64::NAN
            };
            RateRow {
                m,
                phi_m: aproblem.rate().phi(m),
                mean_sq_diff: mean,
                stderr: sd / cnt.sqrt(),
                n_var_theta_m: n_times_trace_var(&thetas, n),
                failures,
                flagged: failures as f64 > 0.05 * replications as f64,
            }
        })
        .collect::<Vec<_>>();
    let exact: Vec<&Vec<f64>> = reps.iter().filter_map(|r| r.exact.as_ref()).collect();
    let slope = log_log_slope(&rows.iter().map(|r| (r.phi_m, r.mean_sq_diff)).collect::<Vec<_>>());
    Ok(RateTable {
        estimator,
        n,
        replications,
        slope,
        n_var_theta_exact: n_times_trace_var(&exact, n),
        exact_failures: replications - exact.len(),
        rows,
    })
}

/// Default acceptance band for the fitted log-log slope (`−2 ± 0.3`).
pub const DEFAULT_SLOPE_BAND: (f64, f64) = (-2.3, -1.7);

impl RateTable {
    /// Whether the fitted slope lies in `[band.0, band.1]`.
    pub fn slope_within(&self, band: (f64, f64)) -> bool {
        self.slope.is_some_and(|s| band.0 <= s && s <= band.1)
    }

    /// Mean squared differences are non-increasing along the grid up to
    /// `k` combined standard errors between neighbouring cells.
    pub fn is_monotone(&self, k: f64) -> bool {
        self.rows.windows(2).all(|w| {
            let slack = k * (w[0].stderr.powi(2) + w[1].stderr.powi(2)).sqrt();
            w[1].mean_sq_diff <= w[0].mean_sq_diff + slack
        })
    }
    /// CSV with columns `m, phi_m, mean_sq_diff, stderr, n_var_theta_m, failures`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["m", "phi_m", "mean_sq_diff", "stderr", "n_var_theta_m", "failures"])?;
        for r in &self.rows {
            w.write_record([
                r.m.to_string(),
                crate::montecarlo::fmt_f64(r.phi_m),
                crate::montecarlo::fmt_f64(r.mean_sq_diff),
                crate::montecarlo::fmt_f64(r.stderr),
                crate::montecarlo::fmt_f64(r.n_var_theta_m),
                r.failures.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Jacobian of `Φ_m` by central differences, for checks.
pub fn finite_difference_jacobian<T: Scalar>(
    aproblem: &ApproximateProblem<T>,
    level: Level,
    theta: &[T],
    x: &[T],
    h: f64,
) -> DMatrix<T> {
    let (d, k) = (aproblem.base.d(), aproblem.base.k());
    let mut out = DMatrix::zeros(d, k);
    let (mut fp, mut fm) = (vec![T::zero(); k], vec![T::zero(); k]);
    let h = T::lit(h);
    for l in 0..d {
        let mut tp = theta.to_vec();
        let mut tm = theta.to_vec();
        tp[l] += h;
        tm[l] -= h;
        aproblem.phi_m(level, &tp, x, &mut fp);
        aproblem.phi_m(level, &tm, x, &mut fm);
        for j in 0..k {
            out[(l, j)] = (fp[j] - fm[j]) / (h + h);
        }
    }
    out
}

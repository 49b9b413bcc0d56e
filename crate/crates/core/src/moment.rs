//! Moment-condition problems, samples and empirical moment evaluations.
//!
//! A problem is a map `Φ(θ, x) ∈ R^k` with `θ` in a box `Θ ⊂ R^d`. Every
//! estimator works with sample averages of `Φ`, its θ-Jacobian and its
//! second moments; those averages are computed here with a fixed pairwise
//! summation order so repeated evaluations are bit-identical.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{pairwise_mean, try_spd_inverse};
use crate::scalar::{to_f64_vec, Scalar};

/// Default condition-number cap separating invertible from singular covariances.
pub const DEFAULT_COND_CAP: f64 = 1e12;

/// `(θ, x, out)`: writes a vector or a row-major matrix into `out`.
pub type PointFn<T> = Arc<dyn Fn(&[T], &[T], &mut [T]) + Send + Sync>;

/// Draws `n` i.i.d. observations.
pub type SamplerFn<T> = Arc<dyn Fn(&mut dyn RngCore, usize) -> Sample<T> + Send + Sync>;

/// Deterministic generator used for every seeded draw in the crate.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Compact parameter set: a product of closed finite intervals.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaBox<T> {
    lower: Vec<T>,
    upper: Vec<T>,
}

impl<T: Scalar> ThetaBox<T> {
    pub fn new(lower: Vec<T>, upper: Vec<T>) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(Error::InvalidProblem(format!(
                "box bounds have lengths {} and {}",
                lower.len(),
                upper.len()
            )));
        }
        for (i, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if !lo.is_finite() || !hi.is_finite() || lo >= hi {
                return Err(Error::InvalidProblem(format!("box coordinate {i} is [{lo}, {hi}]")));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[T] {
        &self.lower
    }

    pub fn upper(&self) -> &[T] {
        &self.upper
    }

    pub fn contains(&self, theta: &[T]) -> bool {
        theta.len() == self.dim()
            && theta
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(t, (lo, hi))| t >= lo && t <= hi)
    }

    pub fn contains_strictly(&self, theta: &[T]) -> bool {
        theta.len() == self.dim()
            && theta
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(t, (lo, hi))| t > lo && t < hi)
    }

    /// Coordinate-wise clamp into the box.
    pub fn project(&self, theta: &mut [T]) {
        for (t, (lo, hi)) in theta.iter_mut().zip(self.lower.iter().zip(&self.upper)) {
            *t = t.max(*lo).min(*hi);
        }
    }

    /// Regular grid with `per_dim` points on every axis, endpoints included,
    /// enumerated with the first coordinate varying slowest.
    pub fn grid(&self, per_dim: usize) -> Vec<Vec<T>> {
        let per_dim = per_dim.max(1);
        let axes: Vec<Vec<T>> = self
            .lower
            .iter()
            .zip(&self.upper)
            .map(|(lo, hi)| {
                if per_dim == 1 {
                    return vec![(*lo + *hi) * T::lit(0.5)];
                }
                let steps = T::from_usize_lossy(per_dim - 1);
                (0..per_dim)
                    .map(|i| *lo + (*hi - *lo) * T::from_usize_lossy(i) / steps)
                    .collect()
            })
            .collect();
        let mut points = vec![Vec::with_capacity(self.dim())];
        for axis in &axes {
            points = points
                .into_iter()
                .flat_map(|p| {
                    axis.iter().map(move |v| {
                        let mut q = p.clone();
                        q.push(*v);
                        q
                    })
                })
                .collect();
        }
        points
    }
}

/// Ordered i.i.d. observations `X_1, …, X_n` in `R^q`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    data: Vec<T>,
    q: usize,
}

impl<T: Scalar> Sample<T> {
    pub fn new(data: Vec<T>, q: usize) -> Result<Self> {
        if q == 0 || data.is_empty() || !data.len().is_multiple_of(q) {
            return Err(Error::Dimension(format!(
                "sample of {} values cannot be split into observations of dimension {q}",
                data.len()
            )));
        }
        Ok(Self { data, q })
    }

    /// One-dimensional observations.
    pub fn scalar(values: Vec<T>) -> Result<Self> {
        Self::new(values, 1)
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let q = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != q) {
            return Err(Error::Dimension("observations have different dimensions".into()));
        }
        Self::new(rows.concat(), q)
    }

    pub fn n(&self) -> usize {
        self.data.len() / self.q
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn observation(&self, i: usize) -> &[T] {
        &self.data[i * self.q..(i + 1) * self.q]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }
}

/// Anything that supplies a moment function and its θ-Jacobian on a box.
///
/// Implemented by [`MomentProblem`] and by fixed levels of an approximate
/// problem, so every estimator runs unchanged on either.
pub trait MomentModel<T: Scalar>: Sync {
    fn d(&self) -> usize;
    fn k(&self) -> usize;
    fn q(&self) -> usize;
    fn theta_box(&self) -> &ThetaBox<T>;
    /// Writes `Φ(θ, x)` into `out` (length `k`).
    fn phi(&self, theta: &[T], x: &[T], out: &mut [T]);
    /// Writes `∂Φ/∂θ` into `out` as a row-major `d × k` matrix.
    fn dphi(&self, theta: &[T], x: &[T], out: &mut [T]);
}

/// A moment-condition model `E_μ Φ(θ₀, X) = 0`.
#[derive(Clone)]
pub struct MomentProblem<T: Scalar> {
    name: String,
    d: usize,
    k: usize,
    q: usize,
    theta_box: ThetaBox<T>,
    phi: PointFn<T>,
    dphi: PointFn<T>,
    true_theta: Option<Vec<T>>,
    sampler: Option<SamplerFn<T>>,
    population: Option<(DMatrix<T>, DMatrix<T>)>,
}

impl<T: Scalar> fmt::Debug for MomentProblem<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MomentProblem")
            .field("name", &self.name)
            .field("d", &self.d)
            .field("k", &self.k)
            .field("q", &self.q)
            .field("theta_box", &self.theta_box)
            .field("true_theta", &self.true_theta)
            .field("has_sampler", &self.sampler.is_some())
            .finish()
    }
}

impl<T: Scalar> MomentProblem<T> {
    pub fn new(
        name: impl Into<String>,
        k: usize,
        q: usize,
        theta_box: ThetaBox<T>,
        phi: PointFn<T>,
        dphi: PointFn<T>,
    ) -> Result<Self> {
        let d = theta_box.dim();
        if k < d {
            return Err(Error::InvalidProblem(format!(
                "k = {k} moments for d = {d} parameters; need k >= d"
            )));
        }
        if q == 0 {
            return Err(Error::InvalidProblem("observation dimension q must be positive".into()));
        }
        Ok(Self {
            name: name.into(),
            d,
            k,
            q,
            theta_box,
            phi,
            dphi,
            true_theta: None,
            sampler: None,
            population: None,
        })
    }

    /// Sets the ground truth; it must lie strictly inside the box.
    pub fn with_true_theta(mut self, theta: Vec<T>) -> Result<Self> {
        if !self.theta_box.contains_strictly(&theta) {
            return Err(Error::InvalidProblem(format!(
                "true theta {:?} is not interior to the parameter box",
                to_f64_vec(&theta)
            )));
        }
        self.true_theta = Some(theta);
        Ok(self)
    }

    pub fn with_sampler(mut self, sampler: SamplerFn<T>) -> Self {
        self.sampler = Some(sampler);
        self
    }

    /// Attaches the population matrices `D` (d × k) and `V` (k × k) at the truth.
    pub fn with_population_moments(mut self, d_mat: DMatrix<T>, v_mat: DMatrix<T>) -> Result<Self> {
        if d_mat.shape() != (self.d, self.k) || v_mat.shape() != (self.k, self.k) {
            return Err(Error::Dimension("population D must be d x k and V k x k".into()));
        }
        self.population = Some((d_mat, v_mat));
        Ok(self)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn true_theta(&self) -> Option<&[T]> {
        self.true_theta.as_deref()
    }

    pub fn population_moments(&self) -> Option<(&DMatrix<T>, &DMatrix<T>)> {
        self.population.as_ref().map(|(d, v)| (d, v))
    }

    pub fn has_sampler(&self) -> bool {
        self.sampler.is_some()
    }

    /// Draws `n` observations from the attached sampler.
    pub fn draw(&self, rng: &mut dyn RngCore, n: usize) -> Result<Sample<T>> {
        let sampler = self
            .sampler
            .as_ref()
            .ok_or_else(|| Error::InvalidProblem(format!("problem {} has no sampler", self.name)))?;
        if n == 0 {
            return Err(Error::Dimension("sample size must be positive".into()));
        }
        Ok(sampler(rng, n))
    }

    /// Draws `n` observations from a generator seeded with `seed`.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Sample<T>> {
        self.draw(&mut seeded_rng(seed), n)
    }
}

impl<T: Scalar> MomentModel<T> for MomentProblem<T> {
    fn d(&self) -> usize {
        self.d
    }
    fn k(&self) -> usize {
        self.k
    }
    fn q(&self) -> usize {
        self.q
    }
    fn theta_box(&self) -> &ThetaBox<T> {
        &self.theta_box
    }
    fn phi(&self, theta: &[T], x: &[T], out: &mut [T]) {
        (self.phi)(theta, x, out)
    }
    fn dphi(&self, theta: &[T], x: &[T], out: &mut [T]) {
        (self.dphi)(theta, x, out)
    }
}

fn check_inputs<T: Scalar, M: MomentModel<T> + ?Sized>(model: &M, theta: &[T], sample: &Sample<T>) -> Result<()> {
    if theta.len() != model.d() {
        return Err(Error::Dimension(format!(
            "theta has length {}, expected {}",
            theta.len(),
            model.d()
        )));
    }
    if sample.q() != model.q() {
        return Err(Error::Dimension(format!(
            "observations have dimension {}, expected {}",
            sample.q(),
            model.q()
        )));
    }
    if !model.theta_box().contains(theta) {
        return Err(Error::Domain {
            what: "the parameter box".into(),
            value: theta.iter().map(|t| t.as_f64()).fold(f64::NAN, f64::max),
        });
    }
    Ok(())
}

fn non_finite<T: Scalar>(theta: &[T], index: usize) -> Error {
    Error::Evaluation {
        theta: to_f64_vec(theta),
        index,
    }
}

/// Values `Φ(θ, X_i)` for every observation, row-major `n × k`.
pub fn moment_values<T: Scalar, M: MomentModel<T> + ?Sized>(
    model: &M,
    theta: &[T],
    sample: &Sample<T>,
) -> Result<Vec<T>> {
    check_inputs(model, theta, sample)?;
    let k = model.k();
    let mut out = vec![T::zero(); sample.n() * k];
    for (i, row) in out.chunks_mut(k).enumerate() {
        model.phi(theta, sample.observation(i), row);
        if row.iter().any(|v| !v.is_finite()) {
            return Err(non_finite(theta, i));
        }
    }
    Ok(out)
}

/// Sample mean `F(θ, μ_n) = (1/n) Σ Φ(θ, X_i)`.
pub fn eval_moment<T: Scalar, M: MomentModel<T> + ?Sized>(
    model: &M,
    theta: &[T],
    sample: &Sample<T>,
) -> Result<DVector<T>> {
    check_inputs(model, theta, sample)?;
    let mean = pairwise_mean(sample.n(), model.k(), |i, out| {
        model.phi(theta, sample.observation(i), out);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(non_finite(theta, i));
        }
        Ok(())
    })?;
    Ok(DVector::from_vec(mean))
}

/// Mean Jacobian `D̂(θ) = (1/n) Σ ∇Φ(θ, X_i)` as a `d × k` matrix.
pub fn eval_jacobian<T: Scalar, M: MomentModel<T> + ?Sized>(
    model: &M,
    theta: &[T],
    sample: &Sample<T>,
) -> Result<DMatrix<T>> {
    check_inputs(model, theta, sample)?;
    let (d, k) = (model.d(), model.k());
    let mean = pairwise_mean(sample.n(), d * k, |i, out| {
        model.dphi(theta, sample.observation(i), out);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(non_finite(theta, i));
        }
        Ok(())
    })?;
    Ok(DMatrix::from_row_slice(d, k, &mean))
}

/// `F(θ, μ_n)` and `D̂(θ)` from one pass, bit-identical to [`eval_moment`]
/// and [`eval_jacobian`].
pub fn eval_moment_and_jacobian<T: Scalar, M: MomentModel<T> + ?Sized>(
    model: &M,
    theta: &[T],
    sample: &Sample<T>,
) -> Result<(DVector<T>, DMatrix<T>)> {
    check_inputs(model, theta, sample)?;
    let (d, k) = (model.d(), model.k());
    let mean = pairwise_mean(sample.n(), k + d * k, |i, out| {
        let x = sample.observation(i);
        let (phi, grad) = out.split_at_mut(k);
        model.phi(theta, x, phi);
        model.dphi(theta, x, grad);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(non_finite(theta, i));
        }
        Ok(())
    })?;
    Ok((
        DVector::from_column_slice(&mean[..k]),
        DMatrix::from_row_slice(d, k, &mean[k..]),
    ))
}

/// Uncentered second moment `V̂(θ) = (1/n) Σ Φ Φᵗ`.
pub fn eval_second_moment<T: Scalar, M: MomentModel<T> + ?Sized>(
    model: &M,
    theta: &[T],
    sample: &Sample<T>,
) -> Result<DMatrix<T>> {
    Ok(moment_summary(model, theta, sample, false)?.second_moment)
}

/// Centered precision `Ŵ(θ) = [V̂(θ) − F Fᵗ]⁻¹`.
///
/// Fails with [`Error::SingularCovariance`] when the centered covariance is not
/// positive definite or its condition number exceeds `cond_cap`.
pub fn eval_centered_precision<T: Scalar, M: MomentModel<T> + ?Sized>(
    model: &M,
    theta: &[T],
    sample: &Sample<T>,
    cond_cap: f64,
) -> Result<DMatrix<T>> {
    let summary = moment_summary(model, theta, sample, false)?;
    precision_from(&summary.covariance(), cond_cap)
}

pub(crate) fn precision_from<T: Scalar>(cov: &DMatrix<T>, cond_cap: f64) -> Result<DMatrix<T>> {
    try_spd_inverse(cov, cond_cap)
        .map(|inv| inv.inverse)
        .map_err(|f| Error::SingularCovariance {
            min_eigenvalue: f.min_eigenvalue,
            condition: f.condition,
        })
}

/// Sample averages needed by the quadratic-form criteria, from one pass.
#[derive(Debug, Clone)]
pub struct MomentSummary<T: Scalar> {
    /// `F(θ, μ_n)`, length k.
    pub mean: DVector<T>,
    /// `V̂(θ)`, k × k.
    pub second_moment: DMatrix<T>,
    /// `D̂(θ)`, d × k (present when derivatives were requested).
    pub jacobian: Option<DMatrix<T>>,
    /// For each θ-coordinate l, the k × k matrix `(1/n) Σ ∂_l Φ Φᵗ`.
    pub cross: Option<Vec<DMatrix<T>>>,
}

impl<T: Scalar> MomentSummary<T> {
    /// `V̂ − F Fᵗ`.
    pub fn covariance(&self) -> DMatrix<T> {
        &self.second_moment - &self.mean * self.mean.transpose()
    }
}

/// Computes `F`, `V̂` and, when `derivatives` is set, `D̂` and the cross terms.
///
/// Every component uses the same pairwise order as the standalone `eval_*`
/// functions, so shared entries agree bit for bit.
pub fn moment_summary<T: Scalar, M: MomentModel<T> + ?Sized>(
    model: &M,
    theta: &[T],
    sample: &Sample<T>,
    derivatives: bool,
) -> Result<MomentSummary<T>> {
    check_inputs(model, theta, sample)?;
    let (d, k) = (model.d(), model.k());
    let width = if derivatives {
        k + k * k + d * k + d * k * k
    } else {
        k + k * k
    };
    let mut phi = vec![T::zero(); k];
    let mut grad = vec![T::zero(); d * k];
    let mean = pairwise_mean(sample.n(), width, |i, out| {
        let x = sample.observation(i);
        model.phi(theta, x, &mut phi);
        if phi.iter().any(|v| !v.is_finite()) {
            return Err(non_finite(theta, i));
        }
        out[..k].copy_from_slice(&phi);
        let outer = &mut out[k..k + k * k];
        for a in 0..k {
            for b in 0..k {
                outer[a * k + b] = phi[a] * phi[b];
            }
        }
        if derivatives {
            model.dphi(theta, x, &mut grad);
            if grad.iter().any(|v| !v.is_finite()) {
                return Err(non_finite(theta, i));
            }
            let base = k + k * k;
            out[base..base + d * k].copy_from_slice(&grad);
            let cross = &mut out[base + d * k..];
            for l in 0..d {
                for a in 0..k {
                    let g = grad[l * k + a];
                    for b in 0..k {
                        cross[l * k * k + a * k + b] = g * phi[b];
                    }
                }
            }
        }
        Ok(())
    })?;
    let f = DVector::from_column_slice(&mean[..k]);
    let second_moment = DMatrix::from_row_slice(k, k, &mean[k..k + k * k]);
    let (jacobian, cross) = if derivatives {
        let base = k + k * k;
        let jac = DMatrix::from_row_slice(d, k, &mean[base..base + d * k]);
        let cross = (0..d)
            .map(|l| {
                let off = base + d * k + l * k * k;
                DMatrix::from_row_slice(k, k, &mean[off..off + k * k])
            })
            .collect();
        (Some(jac), Some(cross))
    } else {
        (None, None)
    };
    Ok(MomentSummary {
        mean: f,
        second_moment,
        jacobian,
        cross,
    })
}

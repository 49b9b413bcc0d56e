//! Semiparametric efficiency bound `B = [D V⁻¹ Dᵗ]⁻¹`, the GMM sandwich
//! `B̄_M = [D M Dᵗ]⁻¹ [D M V M Dᵗ] [D M Dᵗ]⁻¹`, and Loewner-order checks.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::matrix_rows;
use crate::linalg::{is_symmetric, min_eigenvalue, numerical_rank, spd_inverse, symmetrize};
use crate::moment::{eval_jacobian, eval_second_moment, MomentModel, MomentProblem, Sample};
use crate::scalar::Scalar;

/// Condition cap used when inverting `V`, `D V⁻¹ Dᵗ` and `D M Dᵗ`.
pub const BOUND_COND_CAP: f64 = 1e14;

fn check_inputs<T: Scalar>(d_mat: &DMatrix<T>, v_mat: &DMatrix<T>) -> Result<DMatrix<T>> {
    let (d, k) = d_mat.shape();
    if v_mat.shape() != (k, k) {
        return Err(Error::Dimension(format!("V is {:?}, expected {k}x{k}", v_mat.shape())));
    }
    if d > k || numerical_rank(d_mat) < d {
        return Err(Error::Matrix {
            name: "D",
            problem: format!("rank deficient (need rank {d})"),
        });
    }
    if !is_symmetric(v_mat, 1e-10) {
        return Err(Error::Matrix {
            name: "V",
            problem: "not symmetric".into(),
        });
    }
    Ok(spd_inverse(v_mat, BOUND_COND_CAP, "V")?.inverse)
}

fn check_weight<T: Scalar>(m: &DMatrix<T>, k: usize) -> Result<()> {
    if m.shape() != (k, k) {
        return Err(Error::Dimension(format!("M is {:?}, expected {k}x{k}", m.shape())));
    }
    if !is_symmetric(m, 1e-10) {
        return Err(Error::Matrix {
            name: "M",
            problem: "not symmetric".into(),
        });
    }
    spd_inverse(m, BOUND_COND_CAP, "M").map(|_| ())
}

/// `V = L Lᵗ` and the thin QR factorization `L⁻¹ Dᵗ = Q R`, so that
/// `D V⁻¹ Dᵗ = Rᵗ R`.
struct Whitened<T: Scalar> {
    chol: DMatrix<T>,
    q: DMatrix<T>,
    r_inv: DMatrix<T>,
}

fn whiten<T: Scalar>(d_mat: &DMatrix<T>, v_mat: &DMatrix<T>) -> Result<Whitened<T>> {
    let not_pd = || Error::Matrix {
        name: "V",
        problem: "not positive definite".into(),
    };
    let chol = v_mat.clone().cholesky().ok_or_else(not_pd)?.unpack();
    let a = chol.solve_lower_triangular(&d_mat.transpose()).ok_or_else(not_pd)?;
    let qr = a.qr();
    let d = d_mat.nrows();
    let r_inv = qr
        .r()
        .solve_upper_triangular(&DMatrix::identity(d, d))
        .ok_or_else(|| Error::Matrix {
            name: "D",
            problem: "rank deficient".into(),
        })?;
    Ok(Whitened { chol, q: qr.q(), r_inv })
}

/// `[D V⁻¹ Dᵗ]⁻¹`, computed as `R⁻¹ R⁻ᵗ` from the whitened Jacobian.
pub fn efficiency_bound<T: Scalar>(d_mat: &DMatrix<T>, v_mat: &DMatrix<T>) -> Result<DMatrix<T>> {
    check_inputs(d_mat, v_mat)?;
    let w = whiten(d_mat, v_mat)?;
    Ok(symmetrize(&(&w.r_inv * w.r_inv.transpose())))
}

/// Sandwich variance of GMM with weighting `M`.
///
/// With `N = Lᵗ M L` and `S = Qᵗ N Q` the sandwich equals `B + Cᵗ C` where
/// `C = (I − Q Qᵗ) N Q S⁻¹ R⁻ᵗ`, which keeps `B̄_M − B` positive semidefinite
/// in floating point. `M` is first divided by the power of two nearest below
/// its mean eigenvalue; the sandwich is invariant to that rescaling.
pub fn gmm_bound<T: Scalar>(d_mat: &DMatrix<T>, v_mat: &DMatrix<T>, m: &DMatrix<T>) -> Result<DMatrix<T>> {
    check_inputs(d_mat, v_mat)?;
    check_weight(m, v_mat.nrows())?;
    let m = m / pow2_floor(m.trace() / T::from_usize_lossy(m.nrows()));
    let w = whiten(d_mat, v_mat)?;
    let n = symmetrize(&(w.chol.transpose() * &m * &w.chol));
    let nq = &n * &w.q;
    let s = symmetrize(&(w.q.transpose() * &nq));
    let s_inv = spd_inverse(&s, BOUND_COND_CAP, "D M D^t")?.inverse;
    let perp = &nq - &w.q * &s;
    let c = perp * s_inv * w.r_inv.transpose();
    let b = symmetrize(&(&w.r_inv * w.r_inv.transpose()));
    Ok(symmetrize(&(b + c.transpose() * c)))
}

fn pow2_floor<T: Scalar>(v: T) -> T {
    let e = v.as_f64().log2().floor();
    if e.is_finite() {
        T::lit(2f64.powi(e as i32))
    } else {
        T::one()
    }
}

/// `A ⪯ B` up to `tol`: the smallest eigenvalue of `B − A` is at least `−tol`.
pub fn loewner_leq<T: Scalar>(a: &DMatrix<T>, b: &DMatrix<T>, tol: f64) -> Result<bool> {
    if a.shape() != b.shape() || !a.is_square() {
        return Err(Error::Dimension(format!(
            "cannot compare {:?} with {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(min_eigenvalue(&(b - a)) >= -T::lit(tol))
}

/// Outcome of [`verify_lemma1`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DominanceReport {
    /// `D M Dᵗ [D M V M Dᵗ]⁻¹ D M Dᵗ ⪯ D V⁻¹ Dᵗ` within the tolerance.
    pub holds: bool,
    /// With `M = V⁻¹` both sides agree to the tolerance (relative Frobenius norm).
    pub equality_at_optimal: bool,
    /// Smallest eigenvalue of `D V⁻¹ Dᵗ − D M Dᵗ [D M V M Dᵗ]⁻¹ D M Dᵗ`.
    pub slack: f64,
}

fn information_under<T: Scalar>(d_mat: &DMatrix<T>, v_mat: &DMatrix<T>, m: &DMatrix<T>) -> Result<DMatrix<T>> {
    let dm = d_mat * m;
    let a = symmetrize(&(&dm * d_mat.transpose()));
    let meat = symmetrize(&(&dm * v_mat * dm.transpose()));
    let meat_inv = spd_inverse(&meat, BOUND_COND_CAP, "D M V M D^t")?.inverse;
    Ok(symmetrize(&(&a * meat_inv * &a)))
}

/// Checks the information inequality behind `B ⪯ B̄_M` and its equality at `M = V⁻¹`.
pub fn verify_lemma1<T: Scalar>(
    d_mat: &DMatrix<T>,
    v_mat: &DMatrix<T>,
    m: &DMatrix<T>,
    tol: f64,
) -> Result<DominanceReport> {
    let v_inv = check_inputs(d_mat, v_mat)?;
    check_weight(m, v_mat.nrows())?;
    let rhs = symmetrize(&(d_mat * &v_inv * d_mat.transpose()));
    let lhs = information_under(d_mat, v_mat, m)?;
    let slack = min_eigenvalue(&(&rhs - &lhs));
    let at_opt = information_under(d_mat, v_mat, &v_inv)?;
    Ok(DominanceReport {
        holds: slack >= -T::lit(tol),
        equality_at_optimal: (&at_opt - &rhs).norm() <= T::lit(tol) * rhs.norm(),
        slack: slack.as_f64(),
    })
}

/// `D`, `V`, the bound `B` and optionally `B̄_M` with the Loewner gap.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundsReport<T: Scalar> {
    pub d_mat: DMatrix<T>,
    pub v_mat: DMatrix<T>,
    pub b: DMatrix<T>,
    pub b_m: Option<DMatrix<T>>,
    /// Smallest eigenvalue of `B̄_M − B`.
    pub gap_min_eig: Option<T>,
}

/// JSON form of a [`BoundsReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsSummary {
    #[serde(rename = "D")]
    pub d: Vec<Vec<f64>>,
    #[serde(rename = "V")]
    pub v: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    pub b: Vec<Vec<f64>>,
    #[serde(rename = "B_M")]
    pub b_m: Option<Vec<Vec<f64>>>,
    pub gap_min_eig: Option<f64>,
}

impl<T: Scalar> BoundsReport<T> {
    pub fn new(d_mat: DMatrix<T>, v_mat: DMatrix<T>, m: Option<&DMatrix<T>>) -> Result<Self> {
        let b = efficiency_bound(&d_mat, &v_mat)?;
        let b_m = m.map(|m| gmm_bound(&d_mat, &v_mat, m)).transpose()?;
        let gap_min_eig = b_m.as_ref().map(|bm| min_eigenvalue(&(bm - &b)));
        Ok(Self {
            d_mat,
            v_mat,
            b,
            b_m,
            gap_min_eig,
        })
    }

    pub fn summary(&self) -> BoundsSummary {
        BoundsSummary {
            d: matrix_rows(&self.d_mat),
            v: matrix_rows(&self.v_mat),
            b: matrix_rows(&self.b),
            b_m: self.b_m.as_ref().map(matrix_rows),
            gap_min_eig: self.gap_min_eig.map(|g| g.as_f64()),
        }
    }
}

/// Bounds from the problem's population `D` and `V` at the truth.
pub fn population_bounds<T: Scalar>(problem: &MomentProblem<T>, m: Option<&DMatrix<T>>) -> Result<BoundsReport<T>> {
    let (d_mat, v_mat) = problem
        .population_moments()
        .ok_or_else(|| Error::InvalidProblem(format!("problem {} has no population moments", problem.name())))?;
    BoundsReport::new(d_mat.clone(), v_mat.clone(), m)
}

/// Plug-in bounds from `D̂(θ)` and `V̂(θ)` on a sample.
pub fn plugin_bounds<T: Scalar, M: MomentModel<T> + ?Sized>(
    model: &M,
    theta: &[T],
    sample: &Sample<T>,
    m: Option<&DMatrix<T>>,
) -> Result<BoundsReport<T>> {
    let d_mat = eval_jacobian(model, theta, sample)?;
    let v_mat = eval_second_moment(model, theta, sample)?;
    BoundsReport::new(d_mat, v_mat, m)
}

/// Random `(D, V, M)`: `D` with i.i.d. standard normal entries (redrawn until
/// full rank), `V = G Gᵗ + 0.1 I` and `M = H Hᵗ + 0.1 I` with normal `G`, `H`.
pub fn random_instance<R: Rng + ?Sized>(rng: &mut R, d: usize, k: usize) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let mut normal = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal));
    let d_mat = loop {
        let cand = normal(d, k);
        if numerical_rank(&cand) == d {
            break cand;
        }
    };
    let g = normal(k, k);
    let h = normal(k, k);
    let eye = DMatrix::<f64>::identity(k, k) * 0.1;
    let v = symmetrize(&(&g * g.transpose() + &eye));
    let m = symmetrize(&(&h * h.transpose() + &eye));
    (d_mat, v, m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moment::seeded_rng;
    use crate::registry;

    fn nm_dv() -> (DMatrix<f64>, DMatrix<f64>) {
        (
            DMatrix::from_row_slice(1, 2, &[-1.0, -2.0]),
            DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 6.0]),
        )
    }

    #[test]
    fn identity_case() {
        let eye = DMatrix::<f64>::identity(3, 3);
        let b = efficiency_bound(&eye, &eye).unwrap();
        assert!((b - &eye).amax() < 1e-15);
    }

    #[test]
    fn normal_mean_bounds() {
        let (d, v) = nm_dv();
        let b = efficiency_bound(&d, &v).unwrap();
        assert!((b[(0, 0)] - 1.0).abs() < 1e-12);
        let bm = gmm_bound(&d, &v, &DMatrix::identity(2, 2)).unwrap();
        assert!((bm[(0, 0)] - 33.0 / 25.0).abs() < 1e-12);
    }

    #[test]
    fn only_first_moment_informative() {
        let d = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let v = DMatrix::from_row_slice(2, 2, &[2.5, 0.0, 0.0, 7.0]);
        let b = efficiency_bound(&d, &v).unwrap();
        assert!((b[(0, 0)] - 2.5f64).abs() < 1e-14);
    }

    #[test]
    fn optimal_weight_attains_bound() {
        let mut rng = seeded_rng(1);
        for _ in 0..50 {
            let (d, v, _) = random_instance(&mut rng, 2, 5);
            let v_inv = v.clone().try_inverse().unwrap();
            let b = efficiency_bound(&d, &v).unwrap();
            let bm = gmm_bound(&d, &v, &symmetrize(&v_inv)).unwrap();
            assert!((&bm - &b).norm() <= 1e-10 * b.norm());
        }
    }

    #[test]
    fn exactly_identified_sandwich_collapses() {
        let mut rng = seeded_rng(2);
        for _ in 0..50 {
            let (d, v, m) = random_instance(&mut rng, 3, 3);
            let b = efficiency_bound(&d, &v).unwrap();
            let bm = gmm_bound(&d, &v, &m).unwrap();
            // B = D⁻ᵗ V D⁻¹ computed independently
            let d_inv = d.clone().try_inverse().unwrap();
            let direct = d_inv.transpose() * &v * &d_inv;
            assert!((&b - &direct).norm() <= 1e-8 * direct.norm());
            assert!((&bm - &direct).norm() <= 1e-8 * direct.norm());
        }
    }

    #[test]
    fn sandwich_is_homogeneous_of_degree_zero() {
        let mut rng = seeded_rng(3);
        for _ in 0..50 {
            let (d, v, m) = random_instance(&mut rng, 2, 4);
            let base = gmm_bound(&d, &v, &m).unwrap();
            for c in [0.125, 4.0] {
                assert_eq!(gmm_bound(&d, &v, &(&m * c)).unwrap(), base);
            }
            for c in [0.37, 12.9] {
                let other = gmm_bound(&d, &v, &(&m * c)).unwrap();
                assert!((&other - &base).norm() <= 1e-12 * base.norm());
            }
        }
    }

    #[test]
    fn loewner_examples() {
        let eye = DMatrix::<f64>::identity(2, 2);
        assert!(loewner_leq(&eye, &(&eye * 2.0), 0.0).unwrap());
        assert!(!loewner_leq(&(&eye * 2.0), &eye, 1e-10).unwrap());
        assert!(loewner_leq(&eye, &DMatrix::identity(3, 3), 0.0).is_err());
    }

    #[test]
    fn dominance_report_normal_mean() {
        let (d, v) = nm_dv();
        let r = verify_lemma1(&d, &v, &DMatrix::identity(2, 2), 1e-12).unwrap();
        assert!(r.holds);
        assert!(r.equality_at_optimal);
        assert!((r.slack - (1.0 - 25.0 / 33.0)).abs() < 1e-12);
        let v_inv = DMatrix::from_row_slice(2, 2, &[3.0, -1.0, -1.0, 0.5]);
        let r = verify_lemma1(&d, &v, &v_inv, 1e-12).unwrap();
        assert!(r.slack.abs() < 1e-12);
    }

    #[test]
    fn invalid_inputs_name_the_matrix() {
        let (_, v) = nm_dv();
        let d = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        let err = efficiency_bound(&d, &v).unwrap_err();
        assert!(matches!(err, Error::Matrix { name: "D", .. }));
        let d = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let bad_v = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            efficiency_bound(&d, &bad_v),
            Err(Error::Matrix { name: "V", .. })
        ));
        let bad_m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(
            gmm_bound(&d, &v, &bad_m),
            Err(Error::Matrix { name: "M", .. })
        ));
    }

    #[test]
    fn population_report_for_registry_problem() {
        let p = registry::problem::<f64>("normal-mean").unwrap();
        let r = population_bounds(&p, Some(&DMatrix::identity(2, 2))).unwrap();
        let s = r.summary();
        assert!((s.b[0][0] - 1.0).abs() < 1e-12);
        assert!((s.b_m.unwrap()[0][0] - 1.32).abs() < 1e-12);
        assert!(s.gap_min_eig.unwrap() > 0.0);
        let json = serde_json::to_value(r.summary()).unwrap();
        assert!(json.get("B").is_some() && json.get("B_M").is_some());
    }

    #[test]
    fn outputs_are_symmetric() {
        let mut rng = seeded_rng(4);
        for _ in 0..50 {
            let (d, v, m) = random_instance(&mut rng, 3, 6);
            let b = efficiency_bound(&d, &v).unwrap();
            let bm = gmm_bound(&d, &v, &m).unwrap();
            assert!(is_symmetric(&b, 1e-12) && is_symmetric(&bm, 1e-12));
        }
    }
}

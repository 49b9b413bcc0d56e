//! Built-in problems addressable by string id.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::moment::{MomentProblem, Sample, SamplerFn, ThetaBox};
use crate::scalar::Scalar;

/// Ids accepted by [`problem`].
pub const PROBLEM_IDS: &[&str] = &["normal-mean", "scalar-mean", "normal-mean-var"];

/// Looks up a registered problem.
///
/// * `normal-mean`: `X ~ N(θ₀, 1)`, `θ₀ = 1`, `Θ = [−3, 3]`,
///   `Φ(θ, x) = (x − θ, x² − θ² − 1)`.
/// * `scalar-mean`: exactly identified, `Φ(θ, x) = x − θ`, same law and box.
/// * `normal-mean-var`: `θ = (m, s)` mean and variance of `X ~ N(1, 1)`,
///   `Φ = (e, e² − s, e³)` with `e = x − m`, `Θ = [−3, 3] × [0.1, 4]`.
pub fn problem<T: Scalar>(id: &str) -> Result<MomentProblem<T>> {
    match id {
        "normal-mean" => normal_mean(),
        "scalar-mean" => scalar_mean(),
        "normal-mean-var" => normal_mean_var(),
        _ => Err(Error::UnknownId {
            kind: "problem",
            id: id.to_string(),
            field: "problem_id".into(),
        }),
    }
}

fn normal_sampler<T: Scalar>(mean: f64) -> SamplerFn<T> {
    Arc::new(move |rng: &mut dyn rand::RngCore, n: usize| {
        let data = (0..n)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                T::lit(mean + z)
            })
            .collect();
        Sample::scalar(data).expect("n > 0")
    })
}

fn unit_box<T: Scalar>() -> ThetaBox<T> {
    ThetaBox::new(vec![T::lit(-3.0)], vec![T::lit(3.0)]).expect("valid box")
}

fn mat<T: Scalar>(r: usize, c: usize, v: &[f64]) -> DMatrix<T> {
    DMatrix::from_row_iterator(r, c, v.iter().map(|x| T::lit(*x)))
}

fn normal_mean<T: Scalar>() -> Result<MomentProblem<T>> {
    MomentProblem::new(
        "normal-mean",
        2,
        1,
        unit_box(),
        Arc::new(|t: &[T], x: &[T], out: &mut [T]| {
            out[0] = x[0] - t[0];
            out[1] = x[0] * x[0] - t[0] * t[0] - T::one();
        }),
        Arc::new(|t: &[T], _x: &[T], out: &mut [T]| {
            out[0] = -T::one();
            out[1] = -(t[0] + t[0]);
        }),
    )?
    .with_true_theta(vec![T::one()])?
    .with_sampler(normal_sampler(1.0))
    .with_population_moments(mat(1, 2, &[-1.0, -2.0]), mat(2, 2, &[1.0, 2.0, 2.0, 6.0]))
}

fn scalar_mean<T: Scalar>() -> Result<MomentProblem<T>> {
    MomentProblem::new(
        "scalar-mean",
        1,
        1,
        unit_box(),
        Arc::new(|t: &[T], x: &[T], out: &mut [T]| out[0] = x[0] - t[0]),
        Arc::new(|_t: &[T], _x: &[T], out: &mut [T]| out[0] = -T::one()),
    )?
    .with_true_theta(vec![T::one()])?
    .with_sampler(normal_sampler(1.0))
    .with_population_moments(mat(1, 1, &[-1.0]), mat(1, 1, &[1.0]))
}

fn normal_mean_var<T: Scalar>() -> Result<MomentProblem<T>> {
    let theta_box = ThetaBox::new(vec![T::lit(-3.0), T::lit(0.1)], vec![T::lit(3.0), T::lit(4.0)])?;
    MomentProblem::new(
        "normal-mean-var",
        3,
        1,
        theta_box,
        Arc::new(|t: &[T], x: &[T], out: &mut [T]| {
            let e = x[0] - t[0];
            out[0] = e;
            out[1] = e * e - t[1];
            out[2] = e * e * e;
        }),
        Arc::new(|t: &[T], x: &[T], out: &mut [T]| {
            let e = x[0] - t[0];
            // row 0: ∂/∂m, row 1: ∂/∂s
            out[0] = -T::one();
            out[1] = -(e + e);
            out[2] = -T::lit(3.0) * e * e;
            out[3] = T::zero();
            out[4] = -T::one();
            out[5] = T::zero();
        }),
    )?
    .with_true_theta(vec![T::one(), T::one()])?
    .with_sampler(normal_sampler(1.0))
    .with_population_moments(
        mat(2, 3, &[-1.0, 0.0, -3.0, 0.0, -1.0, 0.0]),
        mat(3, 3, &[1.0, 0.0, 3.0, 0.0, 2.0, 0.0, 3.0, 0.0, 15.0]),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moment::{eval_jacobian, eval_moment, MomentModel};

    #[test]
    fn every_id_resolves() {
        for id in PROBLEM_IDS {
            let p = problem::<f64>(id).unwrap();
            assert_eq!(p.name(), *id);
            assert!(p.has_sampler());
            assert!(p.population_moments().is_some());
        }
        assert!(matches!(problem::<f64>("nope"), Err(Error::UnknownId { .. })));
    }

    #[test]
    fn f32_instances_work() {
        let p = problem::<f32>("normal-mean").unwrap();
        let s = Sample::scalar(vec![0.0f32, 2.0]).unwrap();
        assert_eq!(eval_moment(&p, &[1.0f32], &s).unwrap().as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn sample_mean_of_moment_vanishes_at_truth() {
        for id in PROBLEM_IDS {
            let p = problem::<f64>(id).unwrap();
            let s = p.sample(400_000, 99).unwrap();
            let f = eval_moment(&p, p.true_theta().unwrap(), &s).unwrap();
            // third coordinate of normal-mean-var has variance 15
            assert!(f.amax() < 0.03, "{id}: {f}");
        }
    }

    #[test]
    fn population_jacobian_matches_large_draw() {
        for id in PROBLEM_IDS {
            let p = problem::<f64>(id).unwrap();
            let s = p.sample(200_000, 1).unwrap();
            let j = eval_jacobian(&p, p.true_theta().unwrap(), &s).unwrap();
            let (d_pop, _) = p.population_moments().unwrap();
            assert!((j - d_pop).amax() < 0.05, "{id}");
            assert_eq!(p.k(), d_pop.ncols());
        }
    }
}

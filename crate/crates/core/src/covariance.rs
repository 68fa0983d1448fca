//! Error-covariance propagation and steady state.
//!
//! The estimation error `e[k] = x̂[k] − x[k]` of the randomized-sensor
//! observer has covariance `E[k]` driven by the affine recursion
//!
//! ```text
//! E[k+1] = Σ_s p(s)·(A − L·C_s)·E[k]·(A − L·C_s)ᵀ + L·V̄·Lᵀ + Ξ + W
//! ```
//!
//! with `V̄ = Σ_s p(s)·V_s`. When every closed-loop matrix `A − L·C_s` is
//! Schur the linear part is a contraction, so the recursion converges to a
//! unique fixed point `E*` from any PSD start. The solver here runs the
//! recursion itself rather than a transformed linear solve: the iteration
//! map is exactly the dynamics being analysed.

use crate::linalg::{frobenius_distance, spectral_radius, symmetrize};
use crate::model::{mean_sensor_stats, ObserverConfig, SensorPool, SystemModel};
use crate::{real, Error, FloatScalar, Matrix, Result};

/// Default Frobenius-norm stopping tolerance for fixed-point iterations.
pub const DEFAULT_TOL: f64 = 1e-12;
/// Default iteration cap for fixed-point iterations.
pub const DEFAULT_MAX_ITER: usize = 100_000;

/// Record of one covariance recursion: the iterates `E[0..]`, whether the
/// stopping tolerance was met, and the fixed-point residual
/// `‖F(E*) − E*‖_F` of the final iterate.
#[derive(Debug, Clone)]
pub struct CovarianceTrace<T: FloatScalar> {
    pub e_seq: Vec<Matrix<T>>,
    pub converged: bool,
    pub iterations: usize,
    pub residual: T,
}

/// The probability-weighted congruence map plus its constant term.
struct CovarianceMap<T: FloatScalar> {
    factors: Vec<Matrix<T>>,
    probs: Vec<T>,
    constant: Matrix<T>,
}

impl<T: FloatScalar> CovarianceMap<T> {
    fn apply(&self, e: &Matrix<T>) -> Matrix<T> {
        let mut out = self.constant.clone();
        for (f, p) in self.factors.iter().zip(&self.probs) {
            out += (f * e * f.transpose()) * *p;
        }
        symmetrize(&out)
    }

    fn radii(&self) -> Vec<T> {
        self.factors.iter().map(spectral_radius).collect()
    }
}

fn closed_loop_factors<T: FloatScalar>(
    model: &SystemModel<T>,
    pool: &SensorPool<T>,
    observer: &ObserverConfig<T>,
) -> Result<Vec<Matrix<T>>> {
    let n = model.state_dim();
    let p = pool.output_dim()?;
    if observer.l().shape() != (n, p) {
        return Err(Error::DimensionMismatch {
            context: "observer gain L".into(),
            expected: format!("{n}x{p}"),
            found: format!("{}x{}", observer.l().nrows(), observer.l().ncols()),
        });
    }
    pool.sensors()
        .iter()
        .enumerate()
        .map(|(i, s)| {
            if s.c().ncols() != n {
                return Err(Error::DimensionMismatch {
                    context: format!("C[{i}] columns"),
                    expected: n.to_string(),
                    found: s.c().ncols().to_string(),
                });
            }
            Ok(model.a() - observer.l() * s.c())
        })
        .collect()
}

fn error_map<T: FloatScalar>(
    model: &SystemModel<T>,
    pool: &SensorPool<T>,
    observer: &ObserverConfig<T>,
) -> Result<CovarianceMap<T>> {
    let factors = closed_loop_factors(model, pool, observer)?;
    let (_, v_bar) = mean_sensor_stats(pool)?;
    let constant = symmetrize(
        &(observer.l() * v_bar * observer.l().transpose() + observer.xi() + model.w()),
    );
    Ok(CovarianceMap {
        factors,
        probs: pool.probs().to_vec(),
        constant,
    })
}

fn ensure_schur<T: FloatScalar>(map: &CovarianceMap<T>) -> Result<()> {
    for (i, rho) in map.radii().iter().enumerate() {
        if *rho >= T::one() {
            return Err(Error::NotSchur {
                sensor: i,
                radius: rho.to_f64().unwrap_or(f64::NAN),
            });
        }
    }
    Ok(())
}

fn iterate<T: FloatScalar>(
    map: &CovarianceMap<T>,
    start: Matrix<T>,
    tol: T,
    max_iter: usize,
) -> Result<(Matrix<T>, CovarianceTrace<T>)> {
    let mut e = symmetrize(&start);
    let mut e_seq = vec![e.clone()];
    let mut last_step = T::zero();
    for it in 1..=max_iter {
        let next = map.apply(&e);
        last_step = frobenius_distance(&next, &e);
        e_seq.push(next.clone());
        e = next;
        if last_step < tol {
            let residual = frobenius_distance(&map.apply(&e), &e);
            let trace = CovarianceTrace {
                e_seq,
                converged: true,
                iterations: it,
                residual,
            };
            return Ok((e, trace));
        }
    }
    Err(Error::NoConvergence {
        iterations: max_iter,
        residual: last_step.to_f64().unwrap_or(f64::NAN),
    })
}

/// One application of the covariance recursion to `e`.
pub fn error_cov_step<T: FloatScalar>(
    e: &Matrix<T>,
    model: &SystemModel<T>,
    pool: &SensorPool<T>,
    observer: &ObserverConfig<T>,
) -> Result<Matrix<T>> {
    let n = model.state_dim();
    if e.shape() != (n, n) {
        return Err(Error::DimensionMismatch {
            context: "error covariance E".into(),
            expected: format!("{n}x{n}"),
            found: format!("{}x{}", e.nrows(), e.ncols()),
        });
    }
    let map = error_map(model, pool, observer)?;
    Ok(map.apply(e))
}

/// The finite sequence `E[0..=steps]` starting from `E[0] = X0`.
pub fn cov_sequence<T: FloatScalar>(
    model: &SystemModel<T>,
    pool: &SensorPool<T>,
    observer: &ObserverConfig<T>,
    steps: usize,
) -> Result<Vec<Matrix<T>>> {
    let map = error_map(model, pool, observer)?;
    let mut seq = Vec::with_capacity(steps + 1);
    let mut e = symmetrize(model.x0());
    seq.push(e.clone());
    for _ in 0..steps {
        e = map.apply(&e);
        seq.push(e.clone());
    }
    Ok(seq)
}

/// Steady-state error covariance `E*`, found by iterating the recursion
/// from `E[0] = X0` until the Frobenius step difference drops below `tol`.
///
/// Fails with [`Error::NotSchur`] when some closed loop has spectral
/// radius at or above one, and with [`Error::NoConvergence`] when the
/// iteration cap is hit first.
pub fn steady_state_cov<T: FloatScalar>(
    model: &SystemModel<T>,
    pool: &SensorPool<T>,
    observer: &ObserverConfig<T>,
    tol: T,
    max_iter: usize,
) -> Result<(Matrix<T>, CovarianceTrace<T>)> {
    let map = error_map(model, pool, observer)?;
    ensure_schur(&map)?;
    iterate(&map, model.x0().clone(), tol, max_iter)
}

/// Time-averaged weighted error power `trace(Ω·E*)`.
pub fn performance<T: FloatScalar>(e_star: &Matrix<T>, omega: &Matrix<T>) -> Result<T> {
    if e_star.shape() != omega.shape() || !e_star.is_square() {
        return Err(Error::DimensionMismatch {
            context: "performance weight Omega vs E*".into(),
            expected: format!("{}x{}", e_star.nrows(), e_star.ncols()),
            found: format!("{}x{}", omega.nrows(), omega.ncols()),
        });
    }
    Ok((omega * e_star).trace())
}

/// Sensitivity of `E*` to the masking noise: the unique PSD solution of
/// `M = Σ_s p(s)·(A − L·C_s)·M·(A − L·C_s)ᵀ + I`, so that under
/// `Ξ = λ·I` the steady state grows as `E*(λ) = E*(0) + λ·M`.
pub fn noise_gain_matrix<T: FloatScalar>(
    model: &SystemModel<T>,
    pool: &SensorPool<T>,
    observer: &ObserverConfig<T>,
) -> Result<Matrix<T>> {
    let n = model.state_dim();
    let map = CovarianceMap {
        factors: closed_loop_factors(model, pool, observer)?,
        probs: pool.probs().to_vec(),
        constant: Matrix::identity(n, n),
    };
    ensure_schur(&map)?;
    let (m, _) = iterate(
        &map,
        Matrix::zeros(n, n),
        real::<T>(DEFAULT_TOL),
        DEFAULT_MAX_ITER,
    )?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{two_room_system, scalar_system};

    #[test]
    fn scalar_step_matches_direct_arithmetic() {
        // a=0.5, l=0.25, c=1 twice, V = 0.1/0.01 uniform, w=0.01, xi=0
        let (model, pool, observer) = scalar_system(0.5, 0.25, 0.01, 0.0);
        let e0 = Matrix::from_row_slice(1, 1, &[0.0]);
        let e1 = error_cov_step(&e0, &model, &pool, &observer).unwrap();
        // l²·V̄ + w = 0.0625·0.055 + 0.01
        assert!((e1[(0, 0)] - 0.0134375).abs() < 1e-15);
    }

    #[test]
    fn zero_noise_zero_start_is_fixed() {
        let (model, pool, observer) = scalar_system(0.5, 0.25, 0.0, 0.0);
        let zero_sensors: Vec<_> = pool
            .sensors()
            .iter()
            .map(|s| {
                crate::model::Sensor::new(s.c().clone(), s.v() * 0.0).unwrap()
            })
            .collect();
        let pool = crate::model::SensorPool::uniform(zero_sensors).unwrap();
        let e0 = Matrix::from_row_slice(1, 1, &[0.0]);
        let e1 = error_cov_step(&e0, &model, &pool, &observer).unwrap();
        assert_eq!(e1[(0, 0)], 0.0);
    }

    #[test]
    fn reference_step_from_zero() {
        let (model, pool, observer) = two_room_system(0.0);
        let e0 = Matrix::<f64>::zeros(2, 2);
        let e1 = error_cov_step(&e0, &model, &pool, &observer).unwrap();
        assert!((e1[(0, 0)] - (0.25 * 0.055 + 1e-4)).abs() < 1e-16);
        assert!((e1[(1, 1)] - (1e-32 + 1e-4)).abs() < 1e-18);
        assert_eq!(e1[(0, 1)], 0.0);
    }

    #[test]
    fn scalar_steady_state_closed_form() {
        let (model, pool, observer) = scalar_system(0.5, 0.25, 0.01, 0.0);
        let (e_star, trace) =
            steady_state_cov(&model, &pool, &observer, 1e-15, 10_000).unwrap();
        let expected = 0.0134375 / (1.0 - 0.0625);
        assert!((e_star[(0, 0)] - expected).abs() / expected < 1e-12);
        assert!(trace.converged);
        assert!(trace.residual < 1e-15);
        assert_eq!(trace.e_seq.len(), trace.iterations + 1);
    }

    #[test]
    fn not_schur_is_reported() {
        let (model, pool, observer) = scalar_system(1.0, 0.0, 0.01, 0.0);
        let err = steady_state_cov(&model, &pool, &observer, 1e-12, 100).unwrap_err();
        match err {
            Error::NotSchur { radius, .. } => assert!((radius - 1.0).abs() < 1e-12),
            other => panic!("expected NotSchur, got {other:?}"),
        }
    }

    #[test]
    fn performance_examples() {
        let omega = Matrix::<f64>::identity(2, 2);
        let e = Matrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 3.0]);
        assert_eq!(performance(&e, &omega).unwrap(), 5.0);
        assert_eq!(performance(&e, &(omega * 0.0)).unwrap(), 0.0);
    }

    #[test]
    fn scalar_noise_gain_closed_form() {
        let (model, pool, observer) = scalar_system(0.5, 0.25, 0.01, 0.0);
        let m = noise_gain_matrix(&model, &pool, &observer).unwrap();
        let expected = 1.0 / (1.0 - 0.0625);
        assert!((m[(0, 0)] - expected).abs() / expected < 1e-12);
    }

    #[test]
    fn zero_map_noise_gain_is_identity() {
        let eye = Matrix::<f64>::identity(2, 2);
        let model = crate::model::SystemModel::new(
            Matrix::zeros(2, 2),
            eye.clone() * 0.01,
            eye.clone(),
        )
        .unwrap();
        let sensor = crate::model::Sensor::new(
            Matrix::from_row_slice(1, 2, &[1.0, 0.0]),
            Matrix::from_row_slice(1, 1, &[0.1]),
        )
        .unwrap();
        let pool = crate::model::SensorPool::uniform(vec![sensor]).unwrap();
        let observer =
            crate::model::ObserverConfig::new(Matrix::zeros(2, 1), eye.clone() * 0.0, eye.clone())
                .unwrap();
        let m = noise_gain_matrix(&model, &pool, &observer).unwrap();
        assert!((&m - &eye).norm() < 1e-12);
    }

    #[test]
    fn reference_noise_gain_fixed_point_residual() {
        let (model, pool, observer) = two_room_system(0.0);
        let m = noise_gain_matrix(&model, &pool, &observer).unwrap();
        // verify M = Σ p F M Fᵀ + I holds to tolerance
        let mut rhs = Matrix::<f64>::identity(2, 2);
        for s in pool.sensors() {
            let f = model.a() - observer.l() * s.c();
            rhs += (&f * &m * f.transpose()) * 0.5;
        }
        assert!((&rhs - &m).norm() < 1e-9);
    }
}

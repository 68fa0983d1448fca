//! Information-leakage bound and masking-noise calibration.
//!
//! How much do published estimates reveal about which sensor was used?
//! With Gaussian noises, the per-step mutual-information rate between the
//! sensor identities and the estimates — conditioned on the true states, so
//! it covers an adversary that also measures the state directly — is
//! bounded by a difference of log-determinants:
//!
//! ```text
//! ½·ln det(L·V̄·Lᵀ + Ξ + L·(Σ_s p(s)·ΔC_s·E*·ΔC_sᵀ)·Lᵀ)
//!   − ½·Σ_s p(s)·ln det(L·V_s·Lᵀ + Ξ)
//! ```
//!
//! where `V̄` and `C̄` are the probability-weighted sensor means,
//! `ΔC_s = C̄ − C_s`, and `E*` is the steady-state error covariance. The
//! first term is the entropy of the sensor-marginalized innovation, the
//! second the average entropy with the sensor known; concavity of
//! `ln det` makes the difference nonnegative. Units are nats per step.
//!
//! [`calibrate_noise`] inverts the bound: given a target `epsilon`, it
//! scales a masking-noise shape `Ξ = λ·base` until the bound drops below
//! the target. Two conventions are offered, because the bound contains
//! `E*`, which itself depends on `Ξ`:
//!
//! - [`CalibrationMode::Envelope`] freezes `E*` at its `Ξ = 0` value and
//!   seeds the scale with `λ₀ = trace(base⁻¹·A)/(2·epsilon)` where
//!   `A = L·V̄·Lᵀ + L·(Σ_s p(s)·ΔC_s·E*·ΔC_sᵀ)·Lᵀ`, doubling afterwards
//!   until the evaluated frozen bound meets the target (the trace bound
//!   guarantees termination).
//! - [`CalibrationMode::SelfConsistent`] recomputes `E*(λ·base)` at every
//!   trial scale. Because `E*` grows linearly in `λ`, the bound then has a
//!   nonzero limit whenever sensors have distinct output maps —
//!   [`asymptotic_floor`] — and targets below the floor are honestly
//!   reported as infeasible. The search takes the smallest feasible scale
//!   on a ratio-2 grid and refines it by bisection, trusting only
//!   evaluated points (no monotonicity in `λ` is assumed).

use std::fmt;
use std::str::FromStr;

use crate::covariance::{
    noise_gain_matrix, steady_state_cov, DEFAULT_MAX_ITER, DEFAULT_TOL,
};
use crate::linalg::{log_det_psd, min_symmetric_eigenvalue, symmetrize};
use crate::model::{mean_sensor_stats, ObserverConfig, SensorPool, SystemModel};
use crate::{real, Error, FloatScalar, Matrix, Result};

/// Determinant arguments with an eigenvalue at or below this are treated
/// as singular rather than evaluated.
pub const EPS_DET: f64 = 1e-300;

const MAX_SCALE_STEPS: usize = 200;
const BISECTION_STEPS: usize = 40;

/// The evaluated leakage bound and its pieces.
///
/// `bound_nats = term_mix − term_avg`. When every per-sensor determinant
/// argument coincides exactly with the mixture argument the bound is
/// identically zero for any `Ξ`; if that common matrix is singular the
/// bound is still reported as zero with both terms set to `−∞`.
#[derive(Debug, Clone)]
pub struct LeakageBoundResult<T: FloatScalar> {
    /// Upper bound on the per-step identity leakage, nats.
    pub bound_nats: T,
    /// `½·ln det` of the sensor-marginalized innovation covariance.
    pub term_mix: T,
    /// Probability-weighted `½·ln det` with the sensor known.
    pub term_avg: T,
    /// `L·(Σ_s p(s)·ΔC_s·E*·ΔC_sᵀ)·Lᵀ`: the output-map-diversity energy.
    pub delta_c_energy: Matrix<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CalibrationMode {
    Envelope,
    SelfConsistent,
}

impl fmt::Display for CalibrationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CalibrationMode::Envelope => write!(f, "envelope"),
            CalibrationMode::SelfConsistent => write!(f, "self-consistent"),
        }
    }
}

impl FromStr for CalibrationMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "envelope" => Ok(CalibrationMode::Envelope),
            "self-consistent" => Ok(CalibrationMode::SelfConsistent),
            other => Err(format!(
                "unknown calibration mode '{other}' (expected 'envelope' or 'self-consistent')"
            )),
        }
    }
}

/// Outcome of [`calibrate_noise`].
///
/// When `feasible` is false (self-consistent mode with the target below
/// the asymptotic floor) `xi` is zero, `lambda` is infinite, and
/// `achieved_bound` reports the floor itself.
#[derive(Debug, Clone)]
pub struct CalibrationResult<T: FloatScalar> {
    pub xi: Matrix<T>,
    pub lambda: T,
    pub achieved_bound: T,
    pub mode: CalibrationMode,
    pub feasible: bool,
    pub floor_nats: T,
}

struct BoundPieces<T: FloatScalar> {
    mixture: Matrix<T>,
    per_sensor: Vec<Matrix<T>>,
    delta_c_energy: Matrix<T>,
}

fn bound_pieces<T: FloatScalar>(
    pool: &SensorPool<T>,
    observer: &ObserverConfig<T>,
    e_star: &Matrix<T>,
) -> Result<BoundPieces<T>> {
    let (c_bar, v_bar) = mean_sensor_stats(pool)?;
    let l = observer.l();
    let p = c_bar.nrows();

    let mut inner = Matrix::<T>::zeros(p, p);
    for (s, prob) in pool.sensors().iter().zip(pool.probs()) {
        let dc = &c_bar - s.c();
        inner += (&dc * e_star * dc.transpose()) * *prob;
    }
    let delta_c_energy = symmetrize(&(l * &inner * l.transpose()));

    let mixture = symmetrize(&(l * v_bar * l.transpose() + observer.xi() + &delta_c_energy));
    let per_sensor = pool
        .sensors()
        .iter()
        .map(|s| symmetrize(&(l * s.v() * l.transpose() + observer.xi())))
        .collect();
    Ok(BoundPieces {
        mixture,
        per_sensor,
        delta_c_energy,
    })
}

/// Evaluates the leakage bound at a given steady-state error covariance.
///
/// `e_star` should come from [`steady_state_cov`] under the same `Ξ` as
/// `observer` carries, unless the caller is deliberately freezing it (see
/// [`CalibrationMode::Envelope`]). Fails with
/// [`Error::SingularArgument`] when a determinant argument has an
/// eigenvalue at or below [`EPS_DET`] — except in the
/// indistinguishable-sensor case, where the bound is exactly zero
/// regardless of conditioning.
pub fn leakage_bound<T: FloatScalar>(
    model: &SystemModel<T>,
    pool: &SensorPool<T>,
    observer: &ObserverConfig<T>,
    e_star: &Matrix<T>,
) -> Result<LeakageBoundResult<T>> {
    let n = model.state_dim();
    if e_star.shape() != (n, n) {
        return Err(Error::DimensionMismatch {
            context: "steady-state covariance E*".into(),
            expected: format!("{n}x{n}"),
            found: format!("{}x{}", e_star.nrows(), e_star.ncols()),
        });
    }
    let pieces = bound_pieces(pool, observer, e_star)?;

    let identical = pieces
        .per_sensor
        .iter()
        .zip(pool.probs())
        .all(|(m, p)| *p == T::zero() || *m == pieces.mixture);

    let half = real::<T>(0.5);
    let mix_det = log_det_psd(&pieces.mixture, EPS_DET, "mixture innovation covariance");
    let sensor_dets: Result<Vec<T>> = pieces
        .per_sensor
        .iter()
        .enumerate()
        .map(|(i, m)| log_det_psd(m, EPS_DET, &format!("L·V[{i}]·Lᵀ + Xi")))
        .collect();

    match (mix_det, sensor_dets) {
        (Ok(mix), Ok(per)) => {
            let term_mix = half * mix;
            let term_avg = half
                * per
                    .iter()
                    .zip(pool.probs())
                    .fold(T::zero(), |acc, (d, p)| acc + *d * *p);
            Ok(LeakageBoundResult {
                bound_nats: term_mix - term_avg,
                term_mix,
                term_avg,
                delta_c_energy: pieces.delta_c_energy,
            })
        }
        (mix, per) if identical => {
            // all arguments are the same matrix: zero leakage even where
            // the individual log-determinants diverge
            let term = match (mix, per) {
                (Ok(d), _) => half * d,
                _ => real::<T>(f64::NEG_INFINITY),
            };
            Ok(LeakageBoundResult {
                bound_nats: T::zero(),
                term_mix: term,
                term_avg: term,
                delta_c_energy: pieces.delta_c_energy,
            })
        }
        (Err(e), _) => Err(e),
        (_, Err(e)) => Err(e),
    }
}

/// Limiting value of the self-consistent bound as `Ξ = λ·I, λ → ∞`:
/// `½·ln det(I + L·(Σ_s p(s)·ΔC_s·M·ΔC_sᵀ)·Lᵀ)` with `M` the
/// [`noise_gain_matrix`]. Zero exactly when all output maps agree.
pub fn asymptotic_floor<T: FloatScalar>(
    model: &SystemModel<T>,
    pool: &SensorPool<T>,
    observer: &ObserverConfig<T>,
) -> Result<T> {
    let m_gain = noise_gain_matrix(model, pool, observer)?;
    let (c_bar, _) = mean_sensor_stats(pool)?;
    let p = c_bar.nrows();
    let l = observer.l();

    let mut inner = Matrix::<T>::zeros(p, p);
    for (s, prob) in pool.sensors().iter().zip(pool.probs()) {
        let dc = &c_bar - s.c();
        inner += (&dc * &m_gain * dc.transpose()) * *prob;
    }
    let n = model.state_dim();
    let arg = symmetrize(&(Matrix::identity(n, n) + l * inner * l.transpose()));
    Ok(real::<T>(0.5) * log_det_psd(&arg, EPS_DET, "asymptotic floor argument")?)
}

fn pd_inverse<T: FloatScalar>(m: &Matrix<T>, what: &str) -> Result<Matrix<T>> {
    m.clone().try_inverse().ok_or_else(|| {
        Error::Invalid(format!("{what} is not invertible"))
    })
}

/// Finds a masking-noise covariance `Ξ = λ·base` whose leakage bound is at
/// most `epsilon` nats per step.
///
/// `base` defaults to the identity and must be strictly positive definite.
/// The input observer's own `Ξ` is ignored; only its gain and weight are
/// used. Requires every closed loop to be Schur.
pub fn calibrate_noise<T: FloatScalar>(
    model: &SystemModel<T>,
    pool: &SensorPool<T>,
    observer: &ObserverConfig<T>,
    epsilon: T,
    mode: CalibrationMode,
    xi_base: Option<&Matrix<T>>,
) -> Result<CalibrationResult<T>> {
    if epsilon <= T::zero() {
        return Err(Error::Invalid("leakage target epsilon must be positive".into()));
    }
    let n = model.state_dim();
    let base = match xi_base {
        Some(b) => {
            if b.shape() != (n, n) {
                return Err(Error::DimensionMismatch {
                    context: "masking-noise base shape".into(),
                    expected: format!("{n}x{n}"),
                    found: format!("{}x{}", b.nrows(), b.ncols()),
                });
            }
            if min_symmetric_eigenvalue(b) <= T::zero() {
                return Err(Error::Invalid(
                    "masking-noise base must be strictly positive definite".into(),
                ));
            }
            b.clone()
        }
        None => Matrix::identity(n, n),
    };

    let floor = asymptotic_floor(model, pool, observer)?;
    let tol = real::<T>(DEFAULT_TOL);

    let zero_observer = observer.with_xi(Matrix::zeros(n, n))?;
    let (e_zero, _) = steady_state_cov(model, pool, &zero_observer, tol, DEFAULT_MAX_ITER)?;

    // λ = 0 is admissible whenever the bound is already evaluable there;
    // indistinguishable pools land here with an exact zero.
    if let Ok(at_zero) = leakage_bound(model, pool, &zero_observer, &e_zero) {
        if at_zero.bound_nats <= epsilon {
            return Ok(CalibrationResult {
                xi: Matrix::zeros(n, n),
                lambda: T::zero(),
                achieved_bound: at_zero.bound_nats,
                mode,
                feasible: true,
                floor_nats: floor,
            });
        }
    }

    let pieces = bound_pieces(pool, observer, &e_zero)?;
    let (_, v_bar) = mean_sensor_stats(pool)?;
    let trace_mat = symmetrize(
        &(observer.l() * v_bar * observer.l().transpose() + &pieces.delta_c_energy),
    );
    let two_eps = real::<T>(2.0) * epsilon;
    let seed_scale = (pd_inverse(&base, "masking-noise base")? * &trace_mat).trace() / two_eps;
    let seed_scale = seed_scale.max(real::<T>(1e-30));

    match mode {
        CalibrationMode::Envelope => {
            let mut lambda = seed_scale;
            for _ in 0..MAX_SCALE_STEPS {
                let trial = observer.with_xi(&base * lambda)?;
                if let Ok(result) = leakage_bound(model, pool, &trial, &e_zero) {
                    if result.bound_nats <= epsilon {
                        return Ok(CalibrationResult {
                            xi: &base * lambda,
                            lambda,
                            achieved_bound: result.bound_nats,
                            mode,
                            feasible: true,
                            floor_nats: floor,
                        });
                    }
                }
                lambda *= real::<T>(2.0);
            }
            Err(Error::NoConvergence {
                iterations: MAX_SCALE_STEPS,
                residual: f64::NAN,
            })
        }
        CalibrationMode::SelfConsistent => {
            if floor >= epsilon {
                return Ok(CalibrationResult {
                    xi: Matrix::zeros(n, n),
                    lambda: real::<T>(f64::INFINITY),
                    achieved_bound: floor,
                    mode,
                    feasible: false,
                    floor_nats: floor,
                });
            }

            let evaluate = |lambda: T| -> Option<T> {
                let trial = observer.with_xi(&base * lambda).ok()?;
                let (e_star, _) =
                    steady_state_cov(model, pool, &trial, tol, DEFAULT_MAX_ITER).ok()?;
                leakage_bound(model, pool, &trial, &e_star)
                    .ok()
                    .map(|r| r.bound_nats)
            };
            let feasible_at = |lambda: T| evaluate(lambda).is_some_and(|b| b <= epsilon);

            // smallest feasible point on the ratio-2 grid around the seed
            let mut hi = seed_scale;
            let mut steps = 0;
            if feasible_at(hi) {
                while steps < MAX_SCALE_STEPS {
                    let lower = hi * real::<T>(0.5);
                    if feasible_at(lower) {
                        hi = lower;
                        steps += 1;
                    } else {
                        break;
                    }
                }
            } else {
                loop {
                    if steps >= MAX_SCALE_STEPS {
                        return Err(Error::NoConvergence {
                            iterations: MAX_SCALE_STEPS,
                            residual: floor.to_f64().unwrap_or(f64::NAN),
                        });
                    }
                    hi *= real::<T>(2.0);
                    steps += 1;
                    if feasible_at(hi) {
                        break;
                    }
                }
            }

            // refine downwards, trusting only evaluated points
            let mut lo = hi * real::<T>(0.5);
            for _ in 0..BISECTION_STEPS {
                let mid = (lo + hi) * real::<T>(0.5);
                if feasible_at(mid) {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }

            let achieved = evaluate(hi).expect("accepted scale evaluates");
            Ok(CalibrationResult {
                xi: &base * hi,
                lambda: hi,
                achieved_bound: achieved,
                mode,
                feasible: true,
                floor_nats: floor,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ObserverConfig, Sensor, SensorPool, SystemModel};
    use crate::synth::{scalar_system, two_room_system};

    fn one(x: f64) -> Matrix<f64> {
        Matrix::from_row_slice(1, 1, &[x])
    }

    fn steady(
        model: &SystemModel<f64>,
        pool: &SensorPool<f64>,
        observer: &ObserverConfig<f64>,
    ) -> Matrix<f64> {
        steady_state_cov(model, pool, observer, 1e-13, 100_000)
            .unwrap()
            .0
    }

    #[test]
    fn single_sensor_leaks_nothing() {
        let model = SystemModel::new(one(0.5), one(0.01), one(1.0)).unwrap();
        let pool =
            SensorPool::uniform(vec![Sensor::new(one(1.0), one(0.1)).unwrap()]).unwrap();
        let observer = ObserverConfig::new(one(0.25), one(1e-3), one(1.0)).unwrap();
        let e_star = steady(&model, &pool, &observer);
        let r = leakage_bound(&model, &pool, &observer, &e_star).unwrap();
        assert_eq!(r.bound_nats, 0.0);

        // singular arguments: still exactly zero, terms degenerate
        let observer = observer.with_xi(one(0.0)).unwrap();
        let zero_v_pool =
            SensorPool::uniform(vec![Sensor::new(one(1.0), one(0.0)).unwrap()]).unwrap();
        let e_star = steady(&model, &zero_v_pool, &observer);
        let r = leakage_bound(&model, &zero_v_pool, &observer, &e_star).unwrap();
        assert_eq!(r.bound_nats, 0.0);
        assert_eq!(r.term_mix, f64::NEG_INFINITY);
    }

    #[test]
    fn scalar_bound_matches_direct_evaluation() {
        let (model, pool, observer) = scalar_system(0.5, 0.25, 0.01, 0.0);
        let e_star = steady(&model, &pool, &observer);
        let r = leakage_bound(&model, &pool, &observer, &e_star).unwrap();
        // shared output map: the steady state never enters
        let l2 = 0.25 * 0.25;
        let expected = 0.5 * (l2 * 0.055f64).ln() - 0.25 * (l2 * 0.1f64).ln() - 0.25 * (l2 * 0.01f64).ln();
        assert!((r.bound_nats - expected).abs() < 1e-12);
        assert!((expected - 0.27672777287070116).abs() < 1e-15);
        assert!(r.delta_c_energy.norm() == 0.0);
    }

    #[test]
    fn singular_argument_is_reported() {
        // a noiseless second sensor with Ξ = 0 makes its determinant
        // argument exactly zero while the mixture stays positive
        let model = SystemModel::new(one(0.5), one(0.01), one(1.0)).unwrap();
        let s1 = Sensor::new(one(1.0), one(0.1)).unwrap();
        let s2 = Sensor::new(one(1.0), one(0.0)).unwrap();
        let pool = SensorPool::uniform(vec![s1, s2]).unwrap();
        let observer = ObserverConfig::new(one(0.25), one(0.0), one(1.0)).unwrap();
        let e_star = steady(&model, &pool, &observer);
        match leakage_bound(&model, &pool, &observer, &e_star) {
            Err(Error::SingularArgument { .. }) => {}
            other => panic!("expected SingularArgument, got {other:?}"),
        }
    }

    #[test]
    fn two_room_bound_decreases_with_noise() {
        let (model, pool, _) = two_room_system(0.0);
        let mut last = f64::INFINITY;
        for sigma in [1e-6, 1e-4, 1e-2, 1e-1, 1.0] {
            let (_, _, observer) = two_room_system(sigma);
            let e_star = steady(&model, &pool, &observer);
            let r = leakage_bound(&model, &pool, &observer, &e_star).unwrap();
            assert!(r.bound_nats < last);
            assert!(r.bound_nats >= 0.0);
            last = r.bound_nats;
        }
        assert!(last < 1e-2);
    }

    #[test]
    fn floor_is_zero_for_shared_output_maps() {
        let (model, pool, observer) = two_room_system(0.0);
        let floor = asymptotic_floor(&model, &pool, &observer).unwrap();
        assert!(floor.abs() < 1e-14);

        let single = SensorPool::uniform(vec![pool.sensor(0).clone()]).unwrap();
        let floor = asymptotic_floor(&model, &single, &observer).unwrap();
        assert!(floor.abs() < 1e-14);
    }

    fn distinct_map_system() -> (SystemModel<f64>, SensorPool<f64>, ObserverConfig<f64>) {
        let model = SystemModel::new(one(0.5), one(0.01), one(1.0)).unwrap();
        let s1 = Sensor::new(one(1.0), one(0.1)).unwrap();
        let s2 = Sensor::new(one(2.0), one(0.01)).unwrap();
        let pool = SensorPool::uniform(vec![s1, s2]).unwrap();
        let observer = ObserverConfig::new(one(0.2), one(0.0), one(1.0)).unwrap();
        (model, pool, observer)
    }

    #[test]
    fn floor_scalar_closed_form() {
        let (model, pool, observer) = distinct_map_system();
        let floor = asymptotic_floor(&model, &pool, &observer).unwrap();
        // M = 1/(1 − ½(0.3² + 0.1²)), ΔC = ±0.5, L = 0.2
        let m = 1.0 / (1.0 - 0.5 * (0.09 + 0.01));
        let expected = 0.5 * (1.0f64 + 0.04 * 0.25 * m).ln();
        assert!((floor - expected).abs() < 1e-12);
        assert!(floor > 0.0);
    }

    #[test]
    fn calibrate_single_sensor_accepts_zero() {
        let model = SystemModel::new(one(0.5), one(0.01), one(1.0)).unwrap();
        let pool =
            SensorPool::uniform(vec![Sensor::new(one(1.0), one(0.1)).unwrap()]).unwrap();
        let observer = ObserverConfig::new(one(0.25), one(0.0), one(1.0)).unwrap();
        for mode in [CalibrationMode::Envelope, CalibrationMode::SelfConsistent] {
            let r = calibrate_noise(&model, &pool, &observer, 1e-6, mode, None).unwrap();
            assert!(r.feasible);
            assert_eq!(r.lambda, 0.0);
            assert_eq!(r.achieved_bound, 0.0);
        }
    }

    #[test]
    fn calibrate_two_room_both_modes() {
        let (model, pool, observer) = two_room_system(0.0);
        for mode in [CalibrationMode::Envelope, CalibrationMode::SelfConsistent] {
            let r = calibrate_noise(&model, &pool, &observer, 0.01, mode, None).unwrap();
            assert!(r.feasible, "{mode}: {r:?}");
            assert!(r.achieved_bound <= 0.01);
            assert!(r.lambda > 0.0);
            // re-evaluate under the mode's own steady-state convention
            let calibrated = observer.with_xi(r.xi.clone()).unwrap();
            let e_star = match mode {
                CalibrationMode::Envelope => {
                    steady(&model, &pool, &observer.with_xi(Matrix::zeros(2, 2)).unwrap())
                }
                CalibrationMode::SelfConsistent => steady(&model, &pool, &calibrated),
            };
            let again = leakage_bound(&model, &pool, &calibrated, &e_star).unwrap();
            assert!(again.bound_nats <= 0.01 + 1e-12);
        }
    }

    #[test]
    fn calibrate_below_floor_is_infeasible() {
        let (model, pool, observer) = distinct_map_system();
        let floor = asymptotic_floor(&model, &pool, &observer).unwrap();
        let r = calibrate_noise(
            &model,
            &pool,
            &observer,
            floor / 2.0,
            CalibrationMode::SelfConsistent,
            None,
        )
        .unwrap();
        assert!(!r.feasible);
        assert_eq!(r.floor_nats, floor);
        assert!(r.lambda.is_infinite());
    }

    #[test]
    fn rejects_bad_targets_and_bases() {
        let (model, pool, observer) = two_room_system(0.0);
        assert!(calibrate_noise(
            &model,
            &pool,
            &observer,
            0.0,
            CalibrationMode::Envelope,
            None
        )
        .is_err());
        let singular_base = Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert!(calibrate_noise(
            &model,
            &pool,
            &observer,
            0.1,
            CalibrationMode::Envelope,
            Some(&singular_base)
        )
        .is_err());
    }
}

//! Sensor-identity detectors evaluated on simulated trajectories.
//!
//! The decision at index `k` concerns the sensor used in the transition
//! from step `k` to `k + 1`; the first estimate reflecting that sensor's
//! measurement is `x̂[k+1]`. The threshold rule therefore scores
//! `‖C·(x[k+1] − x̂[k+1])‖` against a threshold τ (large error means the
//! noisy sensor), and the likelihood rule scores the observer's actual
//! transition residual under each sensor hypothesis. `decisions[k]` lines
//! up with `sensor_ids()[k]` in both cases.

use nalgebra::SymmetricEigen;

use crate::linalg::symmetrize;
use crate::model::{ObserverConfig, SensorPool, SystemModel};
use crate::simulate::Trajectory;
use crate::{real, Error, FloatScalar, Matrix, Result, Vector};

/// Detection statistic per transition: `‖C·(x[k+1] − x̂[k+1])‖`.
pub fn detection_stats<T: FloatScalar>(
    traj: &Trajectory<T>,
    c: &Matrix<T>,
) -> Result<Vec<T>> {
    let n = traj.states().nrows();
    if c.ncols() != n {
        return Err(Error::DimensionMismatch {
            context: "detector output map C".into(),
            expected: format!("columns = {n}"),
            found: c.ncols().to_string(),
        });
    }
    Ok((0..traj.horizon())
        .map(|k| (c * traj.errors().column(k + 1)).norm())
        .collect())
}

/// Two-sensor threshold detector: guess the first sensor (index 0) when
/// the detection statistic is at least `tau`, the second otherwise.
pub fn threshold_detect<T: FloatScalar>(
    traj: &Trajectory<T>,
    tau: T,
    c: &Matrix<T>,
) -> Result<Vec<usize>> {
    if let Some(max_id) = traj.sensor_ids().iter().max() {
        if *max_id > 1 {
            return Err(Error::PoolSizeUnsupported {
                expected: 2,
                found: max_id + 1,
            });
        }
    }
    Ok(detection_stats(traj, c)?
        .into_iter()
        .map(|stat| usize::from(stat < tau))
        .collect())
}

/// Output of [`map_detect`]: per-transition decisions plus a flag noting
/// that some hypothesis covariance was singular and its likelihood was
/// evaluated on its range space only.
#[derive(Debug, Clone)]
pub struct MapDetection {
    pub decisions: Vec<usize>,
    pub pseudo_inverse_used: bool,
}

struct Hypothesis<T: FloatScalar> {
    lc: Matrix<T>,
    basis_t: Matrix<T>,
    inv_eigs: Vec<Option<T>>,
    log_weight: T,
    degenerate: bool,
}

/// Maximum-posterior identity detector: scores the observer's transition
/// residual `x̂[k+1] − A·x̂[k] − L·C_s·(x[k] − x̂[k])` under
/// `N(0, L·V_s·Lᵀ + Ξ)` for every sensor hypothesis `s`, adds `ln p(s)`,
/// and takes the argmax (ties to the lowest index).
pub fn map_detect<T: FloatScalar>(
    model: &SystemModel<T>,
    pool: &SensorPool<T>,
    observer: &ObserverConfig<T>,
    traj: &Trajectory<T>,
) -> Result<MapDetection> {
    let n = model.state_dim();
    let p = pool.output_dim()?;
    if observer.l().shape() != (n, p) {
        return Err(Error::DimensionMismatch {
            context: "observer gain L".into(),
            expected: format!("{n}x{p}"),
            found: format!("{}x{}", observer.l().nrows(), observer.l().ncols()),
        });
    }

    let neg_inf = real::<T>(f64::NEG_INFINITY);
    let ln_2pi = real::<T>((2.0 * std::f64::consts::PI).ln());
    let half = real::<T>(0.5);

    let mut pseudo_inverse_used = false;
    let hypotheses: Vec<Hypothesis<T>> = pool
        .sensors()
        .iter()
        .zip(pool.probs())
        .map(|(s, prob)| {
            let cov = symmetrize(&(observer.l() * s.v() * observer.l().transpose() + observer.xi()));
            let eig = SymmetricEigen::new(cov);
            let max_eig = eig
                .eigenvalues
                .iter()
                .fold(T::zero(), |acc, v| acc.max(*v));
            let rank_tol = max_eig * real::<T>(1e-12);
            let mut log_det_range = T::zero();
            let mut rank = 0usize;
            let inv_eigs: Vec<Option<T>> = eig
                .eigenvalues
                .iter()
                .map(|ev| {
                    if *ev > rank_tol && *ev > T::zero() {
                        rank += 1;
                        log_det_range += ev.ln();
                        Some(T::one() / *ev)
                    } else {
                        None
                    }
                })
                .collect();
            let degenerate = rank < n;
            if degenerate {
                pseudo_inverse_used = true;
            }
            let ln_prob = if *prob > T::zero() {
                prob.ln()
            } else {
                neg_inf
            };
            Hypothesis {
                lc: observer.l() * s.c(),
                basis_t: eig.eigenvectors.transpose(),
                inv_eigs,
                log_weight: ln_prob
                    - half * log_det_range
                    - half * real::<T>(rank as f64) * ln_2pi,
                degenerate,
            }
        })
        .collect();

    let mut residual = Vector::<T>::zeros(n);
    let mut coords = Vector::<T>::zeros(n);
    let mut decisions = Vec::with_capacity(traj.horizon());
    let null_tol = real::<T>(1e-9);

    for k in 0..traj.horizon() {
        let mut best = 0usize;
        let mut best_score = neg_inf;
        for (s, hyp) in hypotheses.iter().enumerate() {
            // residual = x̂[k+1] − A·x̂[k] + L·C_s·e[k]   (e = x̂ − x)
            residual.copy_from(&traj.estimates().column(k + 1));
            residual.gemv(-T::one(), model.a(), &traj.estimates().column(k), T::one());
            residual.gemv(T::one(), &hyp.lc, &traj.errors().column(k), T::one());

            coords.gemv(T::one(), &hyp.basis_t, &residual, T::zero());
            let mut quad = T::zero();
            let mut null_mass = T::zero();
            for (coord, inv) in coords.iter().zip(&hyp.inv_eigs) {
                match inv {
                    Some(iv) => quad += *coord * *coord * *iv,
                    None => null_mass += *coord * *coord,
                }
            }
            let score = if hyp.degenerate
                && null_mass > null_tol * residual.norm_squared().max(real::<T>(1e-300))
            {
                neg_inf
            } else {
                hyp.log_weight - half * quad
            };
            if score > best_score {
                best_score = score;
                best = s;
            }
        }
        decisions.push(best);
    }

    Ok(MapDetection {
        decisions,
        pseudo_inverse_used,
    })
}

/// Empirical detection accuracy over one prediction/truth pair.
#[derive(Debug, Clone)]
pub struct DetectionReport {
    /// Threshold that produced the predictions, when one applies.
    pub tau: Option<f64>,
    /// Fraction of post-burn-in steps with `predicted == actual`.
    pub accuracy: f64,
    /// Per actual-sensor accuracy; sensors that never occur report 0.
    pub per_sensor_accuracy: Vec<f64>,
    pub sample_count: usize,
}

pub fn detection_rate(
    predicted: &[usize],
    actual: &[usize],
    burn_in: usize,
) -> Result<DetectionReport> {
    if predicted.len() != actual.len() {
        return Err(Error::LengthMismatch {
            context: "predicted vs actual sensor identities".into(),
            left: predicted.len(),
            right: actual.len(),
        });
    }
    if burn_in >= actual.len() {
        return Err(Error::Invalid(format!(
            "burn-in {burn_in} leaves no samples out of {}",
            actual.len()
        )));
    }
    let m = predicted
        .iter()
        .chain(actual)
        .max()
        .map_or(1, |mx| mx + 1);
    let mut correct = vec![0usize; m];
    let mut totals = vec![0usize; m];
    for (p, a) in predicted[burn_in..].iter().zip(&actual[burn_in..]) {
        totals[*a] += 1;
        if p == a {
            correct[*a] += 1;
        }
    }
    let sample_count = actual.len() - burn_in;
    let accuracy = correct.iter().sum::<usize>() as f64 / sample_count as f64;
    let per_sensor_accuracy = correct
        .iter()
        .zip(&totals)
        .map(|(c, t)| if *t == 0 { 0.0 } else { *c as f64 / *t as f64 })
        .collect();
    Ok(DetectionReport {
        tau: None,
        accuracy,
        per_sensor_accuracy,
        sample_count,
    })
}

/// 50 logarithmically spaced thresholds spanning `[1e-4, 1e1]`.
pub fn default_tau_grid() -> Vec<f64> {
    log_grid(1e-4, 1e1, 50)
}

pub(crate) fn log_grid(min: f64, max: f64, points: usize) -> Vec<f64> {
    let (lo, hi) = (min.ln(), max.ln());
    (0..points)
        .map(|i| (lo + (hi - lo) * i as f64 / (points - 1) as f64).exp())
        .collect()
}

/// Accuracy of the threshold detector at one `tau`, aggregated across
/// runs: `accuracy` is the mean of per-run accuracies and `accuracy_se`
/// its standard error over runs.
#[derive(Debug, Clone)]
pub struct ThresholdSweepPoint {
    pub tau: f64,
    pub accuracy: f64,
    pub accuracy_se: f64,
}

/// Evaluates a threshold grid against per-run detection statistics.
///
/// `stats_per_run[r][k]` is the detection statistic of run `r` at
/// transition `k` (see [`detection_stats`]); `ids_per_run` the matching
/// true identities.
pub fn threshold_sweep(
    stats_per_run: &[Vec<f64>],
    ids_per_run: &[Vec<usize>],
    burn_in: usize,
    taus: &[f64],
) -> Result<Vec<ThresholdSweepPoint>> {
    if stats_per_run.len() != ids_per_run.len() {
        return Err(Error::LengthMismatch {
            context: "stats vs ids runs".into(),
            left: stats_per_run.len(),
            right: ids_per_run.len(),
        });
    }
    if stats_per_run.is_empty() {
        return Err(Error::Invalid("threshold sweep needs at least one run".into()));
    }
    let runs = stats_per_run.len();
    let mut sum = vec![0.0f64; taus.len()];
    let mut sum_sq = vec![0.0f64; taus.len()];
    for (stats, ids) in stats_per_run.iter().zip(ids_per_run) {
        if stats.len() != ids.len() {
            return Err(Error::LengthMismatch {
                context: "stats vs ids within a run".into(),
                left: stats.len(),
                right: ids.len(),
            });
        }
        if burn_in >= ids.len() {
            return Err(Error::Invalid(format!(
                "burn-in {burn_in} leaves no samples out of {}",
                ids.len()
            )));
        }
        let samples = (ids.len() - burn_in) as f64;
        for (t, tau) in taus.iter().enumerate() {
            let correct = stats[burn_in..]
                .iter()
                .zip(&ids[burn_in..])
                .filter(|(stat, id)| usize::from(**stat < *tau) == **id)
                .count();
            let acc = correct as f64 / samples;
            sum[t] += acc;
            sum_sq[t] += acc * acc;
        }
    }
    Ok(taus
        .iter()
        .enumerate()
        .map(|(t, tau)| {
            let mean = sum[t] / runs as f64;
            let se = if runs > 1 {
                let var = (sum_sq[t] - runs as f64 * mean * mean) / (runs - 1) as f64;
                (var.max(0.0) / runs as f64).sqrt()
            } else {
                0.0
            };
            ThresholdSweepPoint {
                tau: *tau,
                accuracy: mean,
                accuracy_se: se,
            }
        })
        .collect())
}

/// Grid point with the highest accuracy; earlier (smaller) thresholds win
/// ties.
pub fn best_point(points: &[ThresholdSweepPoint]) -> Option<&ThresholdSweepPoint> {
    points.iter().reduce(|best, p| {
        if p.accuracy > best.accuracy {
            p
        } else {
            best
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::simulate_run;
    use crate::synth::two_room_system;

    #[test]
    fn degenerate_thresholds() {
        let (model, pool, observer) = two_room_system(0.0);
        let traj = simulate_run(&model, &pool, &observer, 400, 21).unwrap();
        let c = Matrix::from_row_slice(1, 2, &[1.0, 0.0]);

        let all_first = threshold_detect(&traj, 0.0, &c).unwrap();
        assert!(all_first.iter().all(|s| *s == 0));
        let report = detection_rate(&all_first, traj.sensor_ids(), 0).unwrap();
        // i.i.d. uniform selection: close to one half
        assert!((report.accuracy - 0.5).abs() < 0.1);

        let all_second = threshold_detect(&traj, f64::INFINITY, &c).unwrap();
        assert!(all_second.iter().all(|s| *s == 1));
    }

    #[test]
    fn pool_size_is_checked() {
        let (model, pool, observer) = two_room_system(0.0);
        let mut sensors = pool.sensors().to_vec();
        sensors.push(pool.sensor(0).clone());
        let pool3 = crate::model::SensorPool::uniform(sensors).unwrap();
        let traj = simulate_run(&model, &pool3, &observer, 400, 3).unwrap();
        let c = Matrix::from_row_slice(1, 2, &[1.0, 0.0]);
        match threshold_detect(&traj, 0.1, &c) {
            Err(Error::PoolSizeUnsupported { found: 3, .. }) => {}
            other => panic!("expected PoolSizeUnsupported, got {other:?}"),
        }
    }

    #[test]
    fn detection_rate_examples() {
        let ids = vec![0, 1, 0, 1, 0, 1];
        let report = detection_rate(&ids, &ids, 0).unwrap();
        assert_eq!(report.accuracy, 1.0);
        assert_eq!(report.per_sensor_accuracy, vec![1.0, 1.0]);

        let constant = vec![0; 6];
        let report = detection_rate(&constant, &ids, 0).unwrap();
        assert_eq!(report.accuracy, 0.5);
        assert_eq!(report.per_sensor_accuracy, vec![1.0, 0.0]);
        assert_eq!(report.sample_count, 6);

        assert!(detection_rate(&constant, &ids[..5], 0).is_err());
        assert!(detection_rate(&ids, &ids, 6).is_err());
    }

    #[test]
    fn accuracy_is_weighted_per_sensor_mean() {
        let actual = vec![0, 0, 0, 1, 1, 0, 1, 1, 1, 1];
        let predicted = vec![0, 1, 0, 1, 0, 0, 1, 1, 0, 1];
        let report = detection_rate(&predicted, &actual, 0).unwrap();
        let weighted: f64 = [(3.0 / 4.0, 4.0), (4.0 / 6.0, 6.0)]
            .iter()
            .map(|(acc, count)| acc * count / 10.0)
            .sum();
        assert!((report.accuracy - weighted).abs() < 1e-15);
    }

    #[test]
    fn map_detector_handles_degenerate_pools() {
        let (model, pool, observer) = two_room_system(1e-3);
        let single = crate::model::SensorPool::uniform(vec![pool.sensor(0).clone()]).unwrap();
        let traj = simulate_run(&model, &single, &observer, 100, 5).unwrap();
        let det = map_detect(&model, &single, &observer, &traj).unwrap();
        assert!(det.decisions.iter().all(|s| *s == 0));
        let report = detection_rate(&det.decisions, traj.sensor_ids(), 0).unwrap();
        assert_eq!(report.accuracy, 1.0);
    }

    #[test]
    fn indistinguishable_sensors_fall_back_to_tie_break() {
        let (model, _, observer) = two_room_system(1e-3);
        let c = Matrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let s = crate::model::Sensor::new(c, Matrix::from_row_slice(1, 1, &[0.1])).unwrap();
        let pool = crate::model::SensorPool::uniform(vec![s.clone(), s]).unwrap();
        let traj = simulate_run(&model, &pool, &observer, 2000, 17).unwrap();
        let det = map_detect(&model, &pool, &observer, &traj).unwrap();
        assert!(det.decisions.iter().all(|s| *s == 0));
        let report = detection_rate(&det.decisions, traj.sensor_ids(), 0).unwrap();
        assert!((report.accuracy - 0.5).abs() < 0.05);
    }

    #[test]
    fn best_point_prefers_smaller_tau_on_ties() {
        let points = vec![
            ThresholdSweepPoint { tau: 0.1, accuracy: 0.6, accuracy_se: 0.0 },
            ThresholdSweepPoint { tau: 0.2, accuracy: 0.6, accuracy_se: 0.0 },
            ThresholdSweepPoint { tau: 0.3, accuracy: 0.5, accuracy_se: 0.0 },
        ];
        assert_eq!(best_point(&points).unwrap().tau, 0.1);
    }
}

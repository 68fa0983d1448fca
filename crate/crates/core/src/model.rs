//! Plant, sensor pool, and observer descriptions.
//!
//! Constructors check structural properties (shapes, non-emptiness) so the
//! types are always internally coherent. The numerical contracts — PSD-ness
//! of covariances, probability normalization, closed-loop stability — are
//! checked by [`validate`], which returns a [`ValidationReport`] instead of
//! aborting; callers decide what to do with a failed report.

use std::fmt;

use crate::linalg::{
    all_finite, max_abs_entry, max_asymmetry, min_symmetric_eigenvalue, spectral_radius,
    symmetrize,
};
use crate::{real, Error, FloatScalar, Matrix, Result};

/// Tolerance on the minimum eigenvalue for PSD checks.
pub const EPS_PSD: f64 = 1e-9;
/// Margin below 1 required of every closed-loop spectral radius.
pub const EPS_SCHUR: f64 = 1e-9;
/// Spectral radii at or above this value are flagged as near-unstable.
pub const SCHUR_WARN: f64 = 0.999;
/// Tolerance on the selection probabilities summing to one.
pub const PROB_TOL: f64 = 1e-12;
/// Eigenvalues at or below this value count as singular.
pub const EPS_SINGULAR: f64 = 1e-300;

/// The plant: `x[k+1] = A·x[k] + w[k]` with `w ~ N(0, W)` and
/// `x[0] ~ N(0, X0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemModel<T: FloatScalar> {
    a: Matrix<T>,
    w: Matrix<T>,
    x0: Matrix<T>,
}

impl<T: FloatScalar> SystemModel<T> {
    pub fn new(a: Matrix<T>, w: Matrix<T>, x0: Matrix<T>) -> Result<Self> {
        let n = a.nrows();
        if n == 0 || !a.is_square() {
            return Err(Error::DimensionMismatch {
                context: "state transition matrix A".into(),
                expected: "nonempty square".into(),
                found: format!("{}x{}", a.nrows(), a.ncols()),
            });
        }
        for (name, m) in [("process-noise covariance W", &w), ("initial covariance X0", &x0)] {
            if m.shape() != (n, n) {
                return Err(Error::DimensionMismatch {
                    context: name.into(),
                    expected: format!("{n}x{n}"),
                    found: format!("{}x{}", m.nrows(), m.ncols()),
                });
            }
        }
        Ok(Self { a, w, x0 })
    }

    /// State dimension `n`.
    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn a(&self) -> &Matrix<T> {
        &self.a
    }

    pub fn w(&self) -> &Matrix<T> {
        &self.w
    }

    pub fn x0(&self) -> &Matrix<T> {
        &self.x0
    }
}

/// One sensor: output map `C` and measurement-noise covariance `V`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sensor<T: FloatScalar> {
    c: Matrix<T>,
    v: Matrix<T>,
}

impl<T: FloatScalar> Sensor<T> {
    pub fn new(c: Matrix<T>, v: Matrix<T>) -> Result<Self> {
        if c.nrows() == 0 || c.ncols() == 0 {
            return Err(Error::DimensionMismatch {
                context: "sensor output map C".into(),
                expected: "nonempty".into(),
                found: format!("{}x{}", c.nrows(), c.ncols()),
            });
        }
        if v.shape() != (c.nrows(), c.nrows()) {
            return Err(Error::DimensionMismatch {
                context: "sensor noise covariance V".into(),
                expected: format!("{0}x{0}", c.nrows()),
                found: format!("{}x{}", v.nrows(), v.ncols()),
            });
        }
        Ok(Self { c, v })
    }

    pub fn c(&self) -> &Matrix<T> {
        &self.c
    }

    pub fn v(&self) -> &Matrix<T> {
        &self.v
    }

    pub fn output_dim(&self) -> usize {
        self.c.nrows()
    }
}

/// The pool of candidate sensors together with their selection
/// probabilities. Selection is i.i.d. across steps.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorPool<T: FloatScalar> {
    sensors: Vec<Sensor<T>>,
    probs: Vec<T>,
}

impl<T: FloatScalar> SensorPool<T> {
    pub fn new(sensors: Vec<Sensor<T>>, probs: Vec<T>) -> Result<Self> {
        if sensors.is_empty() {
            return Err(Error::Invalid("sensor pool is empty".into()));
        }
        if sensors.len() != probs.len() {
            return Err(Error::LengthMismatch {
                context: "sensors vs selection probabilities".into(),
                left: sensors.len(),
                right: probs.len(),
            });
        }
        Ok(Self { sensors, probs })
    }

    /// Pool with equal selection probabilities.
    pub fn uniform(sensors: Vec<Sensor<T>>) -> Result<Self> {
        let m = sensors.len();
        if m == 0 {
            return Err(Error::Invalid("sensor pool is empty".into()));
        }
        let p = T::one() / real::<T>(m as f64);
        Self::new(sensors, vec![p; m])
    }

    pub fn len(&self) -> usize {
        self.sensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sensors.is_empty()
    }

    pub fn sensors(&self) -> &[Sensor<T>] {
        &self.sensors
    }

    pub fn probs(&self) -> &[T] {
        &self.probs
    }

    pub fn sensor(&self, i: usize) -> &Sensor<T> {
        &self.sensors[i]
    }

    /// The output dimension shared by all sensors; heterogeneous pools are
    /// rejected because a single observer gain cannot consume them.
    pub fn output_dim(&self) -> Result<usize> {
        let p = self.sensors[0].output_dim();
        for (i, s) in self.sensors.iter().enumerate() {
            if s.output_dim() != p {
                return Err(Error::DimensionMismatch {
                    context: format!("sensor {i} output dimension"),
                    expected: p.to_string(),
                    found: s.output_dim().to_string(),
                });
            }
        }
        Ok(p)
    }
}

/// Observer parameters: gain `L`, masking-noise covariance `Xi`, and the
/// weight `Omega` used by the performance functional.
#[derive(Debug, Clone, PartialEq)]
pub struct ObserverConfig<T: FloatScalar> {
    l: Matrix<T>,
    xi: Matrix<T>,
    omega: Matrix<T>,
}

impl<T: FloatScalar> ObserverConfig<T> {
    pub fn new(l: Matrix<T>, xi: Matrix<T>, omega: Matrix<T>) -> Result<Self> {
        let n = l.nrows();
        if n == 0 || l.ncols() == 0 {
            return Err(Error::DimensionMismatch {
                context: "observer gain L".into(),
                expected: "nonempty".into(),
                found: format!("{}x{}", l.nrows(), l.ncols()),
            });
        }
        for (name, m) in [("masking-noise covariance Xi", &xi), ("performance weight Omega", &omega)] {
            if m.shape() != (n, n) {
                return Err(Error::DimensionMismatch {
                    context: name.into(),
                    expected: format!("{n}x{n}"),
                    found: format!("{}x{}", m.nrows(), m.ncols()),
                });
            }
        }
        Ok(Self { l, xi, omega })
    }

    pub fn l(&self) -> &Matrix<T> {
        &self.l
    }

    pub fn xi(&self) -> &Matrix<T> {
        &self.xi
    }

    pub fn omega(&self) -> &Matrix<T> {
        &self.omega
    }

    /// Same gain and weight with a replacement masking-noise covariance.
    pub fn with_xi(&self, xi: Matrix<T>) -> Result<Self> {
        Self::new(self.l.clone(), xi, self.omega.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Severity {
    Error,
    Warning,
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Severity::Error => write!(f, "error"),
            Severity::Warning => write!(f, "warning"),
        }
    }
}

/// What a validation issue is about; lets callers route stability
/// problems to the numerical error path instead of the input one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IssueKind {
    Finiteness,
    Dimension,
    Psd,
    Probability,
    Stability,
    Conditioning,
}

impl fmt::Display for IssueKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            IssueKind::Finiteness => "finiteness",
            IssueKind::Dimension => "dimension",
            IssueKind::Psd => "psd",
            IssueKind::Probability => "probability",
            IssueKind::Stability => "stability",
            IssueKind::Conditioning => "conditioning",
        };
        write!(f, "{name}")
    }
}

#[derive(Debug, Clone)]
pub struct Issue {
    pub severity: Severity,
    pub kind: IssueKind,
    pub message: String,
}

/// Outcome of [`validate`]: `ok` is true exactly when no issue has
/// severity [`Severity::Error`].
#[derive(Debug, Clone)]
pub struct ValidationReport<T: FloatScalar> {
    pub ok: bool,
    pub issues: Vec<Issue>,
    /// Spectral radius of `A − L·C_s` for every sensor, pool order.
    pub spectral_radii: Vec<T>,
}

struct Checker {
    issues: Vec<Issue>,
}

impl Checker {
    fn error(&mut self, kind: IssueKind, message: String) {
        self.issues.push(Issue {
            severity: Severity::Error,
            kind,
            message,
        });
    }

    fn warning(&mut self, kind: IssueKind, message: String) {
        self.issues.push(Issue {
            severity: Severity::Warning,
            kind,
            message,
        });
    }
}

fn check_psd<T: FloatScalar>(chk: &mut Checker, name: &str, m: &Matrix<T>) {
    let scale = T::one().max(max_abs_entry(m));
    let asym = max_asymmetry(m);
    if asym > real::<T>(EPS_PSD) * scale {
        chk.error(
            IssueKind::Psd,
            format!(
                "{name} is not symmetric (max asymmetry {:e})",
                asym.to_f64().unwrap_or(f64::NAN)
            ),
        );
        return;
    }
    let min_eig = min_symmetric_eigenvalue(m);
    if min_eig < -real::<T>(EPS_PSD) {
        chk.error(
            IssueKind::Psd,
            format!(
                "{name} is not positive semi-definite (min eigenvalue {:e})",
                min_eig.to_f64().unwrap_or(f64::NAN)
            ),
        );
    }
}

/// Checks a full configuration and reports every problem found.
///
/// Covers entry finiteness, cross-object dimensions, the shared sensor
/// output dimension, PSD-ness of all covariances and of the performance
/// weight, probability normalization, and the spectral radius of every
/// closed-loop matrix `A − L·C_s` (error at `1 − 1e-9`, warning from
/// `0.999`). A singular `L·V_s·Lᵀ + Ξ` is only a warning: the leakage
/// bound refuses to evaluate it, but everything else is well defined.
pub fn validate<T: FloatScalar>(
    model: &SystemModel<T>,
    pool: &SensorPool<T>,
    observer: &ObserverConfig<T>,
) -> ValidationReport<T> {
    let mut chk = Checker { issues: Vec::new() };
    let n = model.state_dim();

    let mut named: Vec<(String, &Matrix<T>)> = vec![
        ("A".into(), model.a()),
        ("W".into(), model.w()),
        ("X0".into(), model.x0()),
        ("L".into(), observer.l()),
        ("Xi".into(), observer.xi()),
        ("Omega".into(), observer.omega()),
    ];
    for (i, s) in pool.sensors().iter().enumerate() {
        named.push((format!("C[{i}]"), s.c()));
        named.push((format!("V[{i}]"), s.v()));
    }
    for (name, m) in &named {
        if !all_finite(m) {
            chk.error(IssueKind::Finiteness, format!("{name} has non-finite entries"));
        }
    }

    let mut dims_ok = true;
    let shared_p = match pool.output_dim() {
        Ok(p) => Some(p),
        Err(e) => {
            chk.error(IssueKind::Dimension, e.to_string());
            dims_ok = false;
            None
        }
    };
    for (i, s) in pool.sensors().iter().enumerate() {
        if s.c().ncols() != n {
            chk.error(
                IssueKind::Dimension,
                format!("C[{i}] has {} columns, state dimension is {n}", s.c().ncols()),
            );
            dims_ok = false;
        }
    }
    if observer.l().nrows() != n {
        chk.error(
            IssueKind::Dimension,
            format!("L has {} rows, state dimension is {n}", observer.l().nrows()),
        );
        dims_ok = false;
    }
    if let Some(p) = shared_p {
        if observer.l().ncols() != p {
            chk.error(
                IssueKind::Dimension,
                format!("L has {} columns, sensor output dimension is {p}", observer.l().ncols()),
            );
            dims_ok = false;
        }
    }

    check_psd(&mut chk, "W", model.w());
    check_psd(&mut chk, "X0", model.x0());
    check_psd(&mut chk, "Xi", observer.xi());
    check_psd(&mut chk, "Omega", observer.omega());
    for (i, s) in pool.sensors().iter().enumerate() {
        check_psd(&mut chk, &format!("V[{i}]"), s.v());
    }

    let mut sum = T::zero();
    for (i, p) in pool.probs().iter().enumerate() {
        if *p < T::zero() {
            chk.error(
                IssueKind::Probability,
                format!(
                    "selection probability {i} is negative ({})",
                    p.to_f64().unwrap_or(f64::NAN)
                ),
            );
        }
        sum += *p;
    }
    if (sum - T::one()).abs() > real::<T>(PROB_TOL) {
        chk.error(
            IssueKind::Probability,
            format!("probabilities sum to {}", sum.to_f64().unwrap_or(f64::NAN)),
        );
    }

    let mut spectral_radii = Vec::new();
    if dims_ok {
        for (i, s) in pool.sensors().iter().enumerate() {
            let closed = model.a() - observer.l() * s.c();
            let rho = spectral_radius(&closed);
            spectral_radii.push(rho);
            if rho >= T::one() - real::<T>(EPS_SCHUR) {
                chk.error(
                    IssueKind::Stability,
                    format!(
                        "closed-loop matrix for sensor {i} has spectral radius {}",
                        rho.to_f64().unwrap_or(f64::NAN)
                    ),
                );
            } else if rho >= real::<T>(SCHUR_WARN) {
                chk.warning(
                    IssueKind::Stability,
                    format!(
                        "closed-loop matrix for sensor {i} is nearly unstable (spectral radius {})",
                        rho.to_f64().unwrap_or(f64::NAN)
                    ),
                );
            }
        }

        for (i, s) in pool.sensors().iter().enumerate() {
            let gram = symmetrize(&(observer.l() * s.v() * observer.l().transpose() + observer.xi()));
            let min_eig = min_symmetric_eigenvalue(&gram);
            if min_eig <= real::<T>(EPS_SINGULAR) {
                chk.warning(
                    IssueKind::Conditioning,
                    format!(
                        "L·V[{i}]·Lᵀ + Xi is singular (min eigenvalue {:e}); \
                         the leakage bound cannot be evaluated at this Xi",
                        min_eig.to_f64().unwrap_or(f64::NAN)
                    ),
                );
            }
        }
    }

    let ok = chk.issues.iter().all(|i| i.severity != Severity::Error);
    ValidationReport {
        ok,
        issues: chk.issues,
        spectral_radii,
    }
}

/// Probability-weighted mean output map `C̄ = Σ_s p(s)·C_s` and mean noise
/// covariance `V̄ = Σ_s p(s)·V_s`.
pub fn mean_sensor_stats<T: FloatScalar>(
    pool: &SensorPool<T>,
) -> Result<(Matrix<T>, Matrix<T>)> {
    let p = pool.output_dim()?;
    let n = pool.sensor(0).c().ncols();
    for (i, s) in pool.sensors().iter().enumerate() {
        if s.c().ncols() != n {
            return Err(Error::DimensionMismatch {
                context: format!("C[{i}] columns"),
                expected: n.to_string(),
                found: s.c().ncols().to_string(),
            });
        }
    }
    let mut c_bar = Matrix::<T>::zeros(p, n);
    let mut v_bar = Matrix::<T>::zeros(p, p);
    for (s, prob) in pool.sensors().iter().zip(pool.probs()) {
        c_bar += s.c() * *prob;
        v_bar += s.v() * *prob;
    }
    Ok((c_bar, v_bar))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::two_room_system;

    fn m2(rows: [[f64; 2]; 2]) -> Matrix<f64> {
        Matrix::from_row_slice(2, 2, &[rows[0][0], rows[0][1], rows[1][0], rows[1][1]])
    }

    #[test]
    fn reference_config_validates() {
        let (model, pool, observer) = two_room_system(0.0);
        let report = validate(&model, &pool, &observer);
        assert!(report.ok, "issues: {:?}", report.issues);
        assert_eq!(report.spectral_radii.len(), 2);
        for rho in &report.spectral_radii {
            assert!(*rho < 1.0);
        }
        // identical output maps give identical closed loops
        assert!((report.spectral_radii[0] - report.spectral_radii[1]).abs() < 1e-14);
    }

    #[test]
    fn unnormalized_probabilities_are_rejected() {
        let (model, pool, observer) = two_room_system(0.0);
        let bad = SensorPool::new(pool.sensors().to_vec(), vec![0.6, 0.5]).unwrap();
        let report = validate(&model, &bad, &observer);
        assert!(!report.ok);
        assert!(report
            .issues
            .iter()
            .any(|i| i.severity == Severity::Error && i.message.contains("sum to 1.1")));
    }

    #[test]
    fn open_loop_unstable_with_zero_gain() {
        let a = m2([[1.2, 0.0], [0.0, 0.3]]);
        let eye = Matrix::<f64>::identity(2, 2);
        let model = SystemModel::new(a, eye.clone() * 0.01, eye.clone()).unwrap();
        let sensor = Sensor::new(
            Matrix::from_row_slice(1, 2, &[1.0, 0.0]),
            Matrix::from_row_slice(1, 1, &[0.1]),
        )
        .unwrap();
        let pool = SensorPool::uniform(vec![sensor.clone(), sensor]).unwrap();
        let observer =
            ObserverConfig::new(Matrix::zeros(2, 1), eye.clone() * 0.0, eye).unwrap();
        let report = validate(&model, &pool, &observer);
        assert!(!report.ok);
        assert_eq!(report.spectral_radii.len(), 2);
        for rho in &report.spectral_radii {
            assert!((rho - 1.2).abs() < 1e-12);
        }
    }

    #[test]
    fn heterogeneous_output_dims_are_rejected() {
        let (model, _, observer) = two_room_system(0.0);
        let s1 = Sensor::new(
            Matrix::from_row_slice(1, 2, &[1.0, 0.0]),
            Matrix::from_row_slice(1, 1, &[0.1]),
        )
        .unwrap();
        let s2 = Sensor::new(
            Matrix::<f64>::identity(2, 2),
            Matrix::<f64>::identity(2, 2) * 0.1,
        )
        .unwrap();
        let pool = SensorPool::uniform(vec![s1, s2]).unwrap();
        let report = validate(&model, &pool, &observer);
        assert!(!report.ok);
        assert!(report
            .issues
            .iter()
            .any(|i| i.message.contains("output dimension")));
    }

    #[test]
    fn mean_stats_on_reference_pool() {
        let (_, pool, _) = two_room_system(0.0);
        let (c_bar, v_bar) = mean_sensor_stats(&pool).unwrap();
        assert_eq!(c_bar, Matrix::from_row_slice(1, 2, &[1.0, 0.0]));
        assert!((v_bar[(0, 0)] - 0.055).abs() < 1e-15);
    }

    #[test]
    fn mean_stats_degenerate_pools() {
        let s1 = Sensor::new(
            Matrix::from_row_slice(1, 1, &[2.0]),
            Matrix::from_row_slice(1, 1, &[0.3]),
        )
        .unwrap();
        let single = SensorPool::uniform(vec![s1.clone()]).unwrap();
        let (c, v) = mean_sensor_stats(&single).unwrap();
        assert_eq!(c, *s1.c());
        assert_eq!(v, *s1.v());

        let s2 = Sensor::new(
            Matrix::from_row_slice(1, 1, &[-1.0]),
            Matrix::from_row_slice(1, 1, &[0.7]),
        )
        .unwrap();
        let pool = SensorPool::new(vec![s1.clone(), s2], vec![1.0, 0.0]).unwrap();
        let (c, v) = mean_sensor_stats(&pool).unwrap();
        assert_eq!(c, *s1.c());
        assert_eq!(v, *s1.v());
    }

    #[test]
    fn singular_gram_is_warning_not_error() {
        let (model, pool, observer) = two_room_system(0.0);
        // zero out the masking noise entirely: L·V·Lᵀ + 0 is rank one
        let observer = observer.with_xi(Matrix::zeros(2, 2)).unwrap();
        let report = validate(&model, &pool, &observer);
        assert!(report.ok, "issues: {:?}", report.issues);
        assert!(report
            .issues
            .iter()
            .any(|i| i.severity == Severity::Warning && i.message.contains("singular")));
    }
}

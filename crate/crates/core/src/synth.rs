//! Deterministic synthetic configurations.
//!
//! Used by the test suites and benchmarks to draw arbitrary-but-valid
//! stable configurations from a seed, and to build the two small reference
//! systems exercised throughout the crate: a scalar plant with two shared
//! output maps, and the two-room thermal model behind the
//! `reproduce-paper` workflow.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::linalg::spectral_radius;
use crate::model::{ObserverConfig, Sensor, SensorPool, SystemModel};
use crate::simulate::rng_from_seed;
use crate::Matrix;

/// Shape of a synthetic configuration.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub state_dim: usize,
    pub output_dim: usize,
    pub sensors: usize,
    /// All sensors share one `(C, V)` pair when set.
    pub identical_sensors: bool,
    /// Scale of the masking-noise covariance; `0` gives `Ξ = 0`, anything
    /// positive gives a strictly positive-definite `Ξ`.
    pub xi_scale: f64,
}

impl SynthSpec {
    pub fn new(state_dim: usize, output_dim: usize, sensors: usize) -> Self {
        Self {
            state_dim,
            output_dim,
            sensors,
            identical_sensors: false,
            xi_scale: 0.0,
        }
    }

    pub fn identical(mut self, yes: bool) -> Self {
        self.identical_sensors = yes;
        self
    }

    pub fn xi_scale(mut self, scale: f64) -> Self {
        self.xi_scale = scale;
        self
    }
}

fn gaussian_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    })
}

fn random_psd<R: Rng>(rng: &mut R, dim: usize, scale: f64, ridge: f64) -> Matrix<f64> {
    let g = gaussian_matrix(rng, dim, dim, 1.0);
    let gram = &g * g.transpose() * (scale / dim as f64);
    gram + Matrix::identity(dim, dim) * ridge
}

/// Draws a valid configuration whose closed loops are all strictly Schur.
///
/// `A` and `L` are scaled jointly so the worst closed-loop spectral radius
/// lands in `[0.3, 0.85]`; the scaling is exact because
/// `ρ(c·(A − L·C)) = c·ρ(A − L·C)`.
pub fn random_config(
    seed: u64,
    spec: &SynthSpec,
) -> (SystemModel<f64>, SensorPool<f64>, ObserverConfig<f64>) {
    let mut rng = rng_from_seed(seed);
    let n = spec.state_dim;
    let p = spec.output_dim;
    let m = spec.sensors;

    let mut a = gaussian_matrix(&mut rng, n, n, 0.5);
    let mut l = gaussian_matrix(&mut rng, n, p, 0.3);

    let make_sensor = |rng: &mut rand_chacha::ChaCha8Rng| {
        let c = gaussian_matrix(rng, p, n, 1.0);
        let v = random_psd(rng, p, 0.05, 1e-3);
        Sensor::new(c, v).expect("synthetic sensor shapes are consistent")
    };
    let sensors: Vec<Sensor<f64>> = if spec.identical_sensors {
        let s = make_sensor(&mut rng);
        vec![s; m]
    } else {
        (0..m).map(|_| make_sensor(&mut rng)).collect()
    };

    let raw: Vec<f64> = (0..m).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let probs: Vec<f64> = raw.iter().map(|x| x / total).collect();

    let worst = sensors
        .iter()
        .map(|s| spectral_radius(&(&a - &l * s.c())))
        .fold(0.0f64, f64::max);
    let target = rng.random_range(0.3..0.85);
    if worst > 1e-12 {
        let c = target / worst;
        a *= c;
        l *= c;
    }

    let w = random_psd(&mut rng, n, 0.01, 1e-4);
    let x0 = random_psd(&mut rng, n, 0.5, 0.1);
    let xi = if spec.xi_scale > 0.0 {
        random_psd(&mut rng, n, spec.xi_scale, spec.xi_scale * 1e-3)
    } else {
        Matrix::zeros(n, n)
    };
    let omega = Matrix::identity(n, n);

    let model = SystemModel::new(a, w, x0).expect("synthetic model shapes are consistent");
    let pool = SensorPool::new(sensors, probs).expect("synthetic pool shapes are consistent");
    let observer = ObserverConfig::new(l, xi, omega).expect("synthetic observer shapes are consistent");
    (model, pool, observer)
}

/// A symmetric PSD matrix drawn from the seed, with a small ridge so it
/// is strictly positive definite.
pub fn random_psd_matrix(seed: u64, dim: usize, scale: f64) -> Matrix<f64> {
    let mut rng = rng_from_seed(seed);
    random_psd(&mut rng, dim, scale, scale * 1e-3)
}

/// Scalar plant `a` observed by two unit-output sensors with noise
/// variances `0.1` and `0.01`, selected uniformly.
pub fn scalar_system(
    a: f64,
    l: f64,
    w: f64,
    xi: f64,
) -> (SystemModel<f64>, SensorPool<f64>, ObserverConfig<f64>) {
    let one = |x: f64| Matrix::from_row_slice(1, 1, &[x]);
    let model = SystemModel::new(one(a), one(w), one(1.0)).unwrap();
    let s1 = Sensor::new(one(1.0), one(0.1)).unwrap();
    let s2 = Sensor::new(one(1.0), one(0.01)).unwrap();
    let pool = SensorPool::uniform(vec![s1, s2]).unwrap();
    let observer = ObserverConfig::new(one(l), one(xi), one(1.0)).unwrap();
    (model, pool, observer)
}

/// Temperature dynamics of two interconnected rooms, measured by two
/// sensors of very different quality (noise variances `0.1` vs `0.01`)
/// that share the output map `[1 0]`. The masking-noise covariance is
/// `diag(sigma_xi, 1e-32)`: the second state is not directly measured, so
/// it only carries a vanishing regularizer that keeps the leakage bound's
/// determinant arguments nonsingular.
pub fn two_room_system(
    sigma_xi: f64,
) -> (SystemModel<f64>, SensorPool<f64>, ObserverConfig<f64>) {
    let a = Matrix::from_row_slice(2, 2, &[0.991, 0.0075, 0.006, 0.990]);
    let eye = Matrix::<f64>::identity(2, 2);
    let model = SystemModel::new(a, &eye * 1e-4, eye.clone()).unwrap();

    let c = Matrix::from_row_slice(1, 2, &[1.0, 0.0]);
    let s1 = Sensor::new(c.clone(), Matrix::from_row_slice(1, 1, &[1e-1])).unwrap();
    let s2 = Sensor::new(c, Matrix::from_row_slice(1, 1, &[1e-2])).unwrap();
    let pool = SensorPool::uniform(vec![s1, s2]).unwrap();

    let l = Matrix::from_row_slice(2, 1, &[0.5, 0.0]);
    let xi = Matrix::from_row_slice(2, 2, &[sigma_xi, 0.0, 0.0, 1e-32]);
    let observer = ObserverConfig::new(l, xi, eye).unwrap();
    (model, pool, observer)
}

//! Reproducible trajectory sampling and Monte Carlo ensembles.
//!
//! Randomness contract: every entry point takes an explicit 64-bit seed
//! and `(configuration, seed)` determines every output bit.
//!
//! - A run's stream is a ChaCha8 generator whose 256-bit key is the seed
//!   expanded by four rounds of SplitMix64 ([`rng_from_seed`]).
//! - Run `r` of an ensemble under master seed `s` uses
//!   [`derive_seed`]`(s, r)`, one SplitMix64 round over `s` xor the
//!   golden-ratio multiple of `r`.
//! - Draw order within a step is fixed: sensor index, measurement noise,
//!   masking noise, process noise. The initial state is drawn first.
//! - Ensemble aggregation folds runs in index order over fixed-size
//!   blocks, so results are identical for any worker count.
//!
//! Covariances may be rank deficient: sampling factors come from the
//! symmetric eigendecomposition with negative eigenvalues clamped to zero.

use rand::RngCore;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::linalg::psd_factor;
use crate::model::{ObserverConfig, SensorPool, SystemModel};
use crate::{real, Error, FloatScalar, Matrix, Result, Vector};

/// Fraction of the horizon discarded before steady-state statistics.
pub const DEFAULT_BURN_IN_FRAC: f64 = 0.2;

/// Runs per aggregation block; fixed so that parallel folds are
/// independent of the worker count.
const RUN_BLOCK: usize = 64;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-run seed for run `index` of an ensemble under `master`.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut state = master ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    splitmix64(&mut state)
}

/// ChaCha8 stream keyed by the SplitMix64 expansion of `seed`.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    let mut state = seed;
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    <ChaCha8Rng as rand::SeedableRng>::from_seed(key)
}

/// Uniform draw in `[0, 1)` from the top 53 bits of one `u64`.
fn uniform01<T: FloatScalar, R: RngCore>(rng: &mut R) -> T {
    real::<T>((rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64))
}

/// Sampler for `N(0, Σ)` with `Σ` symmetric PSD.
pub struct GaussianSampler<T: FloatScalar> {
    factor: Matrix<T>,
    dim: usize,
}

impl<T: FloatScalar> GaussianSampler<T>
where
    StandardNormal: Distribution<T>,
{
    pub fn new(cov: &Matrix<T>, label: &str) -> Result<Self> {
        if !cov.is_square() {
            return Err(Error::DimensionMismatch {
                context: format!("covariance {label}"),
                expected: "square".into(),
                found: format!("{}x{}", cov.nrows(), cov.ncols()),
            });
        }
        let factor = psd_factor(cov).ok_or_else(|| Error::FactorizationFailed {
            matrix: label.to_string(),
        })?;
        Ok(Self {
            dim: cov.nrows(),
            factor,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Writes one draw into `out`, using `scratch` for the standard
    /// normals; both must have length [`Self::dim`].
    pub fn sample_into<R: RngCore>(
        &self,
        rng: &mut R,
        scratch: &mut Vector<T>,
        out: &mut Vector<T>,
    ) {
        for z in scratch.iter_mut() {
            *z = StandardNormal.sample(rng);
        }
        out.gemv(T::one(), &self.factor, scratch, T::zero());
    }

    pub fn sample<R: RngCore>(&self, rng: &mut R) -> Vector<T> {
        let mut scratch = Vector::zeros(self.dim);
        let mut out = Vector::zeros(self.dim);
        self.sample_into(rng, &mut scratch, &mut out);
        out
    }
}

/// Precomputed sampling state for one configuration: closed-loop matrices
/// stay in the caller's types, noise factors are built once and shared by
/// every run of an ensemble.
pub struct SimContext<T: FloatScalar> {
    n: usize,
    p: usize,
    a: Matrix<T>,
    l: Matrix<T>,
    c: Vec<Matrix<T>>,
    cum_probs: Vec<T>,
    init: GaussianSampler<T>,
    meas: Vec<GaussianSampler<T>>,
    mask: GaussianSampler<T>,
    process: GaussianSampler<T>,
}

impl<T: FloatScalar> SimContext<T>
where
    StandardNormal: Distribution<T>,
{
    pub fn new(
        model: &SystemModel<T>,
        pool: &SensorPool<T>,
        observer: &ObserverConfig<T>,
    ) -> Result<Self> {
        let n = model.state_dim();
        let p = pool.output_dim()?;
        if observer.l().shape() != (n, p) {
            return Err(Error::DimensionMismatch {
                context: "observer gain L".into(),
                expected: format!("{n}x{p}"),
                found: format!("{}x{}", observer.l().nrows(), observer.l().ncols()),
            });
        }
        for (i, s) in pool.sensors().iter().enumerate() {
            if s.c().ncols() != n {
                return Err(Error::DimensionMismatch {
                    context: format!("C[{i}] columns"),
                    expected: n.to_string(),
                    found: s.c().ncols().to_string(),
                });
            }
        }
        let mut cum = T::zero();
        let cum_probs = pool
            .probs()
            .iter()
            .map(|prob| {
                cum += *prob;
                cum
            })
            .collect();
        let meas = pool
            .sensors()
            .iter()
            .enumerate()
            .map(|(i, s)| GaussianSampler::new(s.v(), &format!("V[{i}]")))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            n,
            p,
            a: model.a().clone(),
            l: observer.l().clone(),
            c: pool.sensors().iter().map(|s| s.c().clone()).collect(),
            cum_probs,
            init: GaussianSampler::new(model.x0(), "X0")?,
            meas,
            mask: GaussianSampler::new(observer.xi(), "Xi")?,
            process: GaussianSampler::new(model.w(), "W")?,
        })
    }

    fn pick_sensor(&self, u: T) -> usize {
        for (i, cp) in self.cum_probs.iter().enumerate() {
            if u < *cp {
                return i;
            }
        }
        self.cum_probs.len() - 1
    }
}

/// One simulated run: states, estimates, errors (`e = x̂ − x`), sensor
/// selections, and measurements, stored column-per-step.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T: FloatScalar> {
    horizon: usize,
    seed: u64,
    states: Matrix<T>,
    estimates: Matrix<T>,
    errors: Matrix<T>,
    measurements: Matrix<T>,
    sensor_ids: Vec<usize>,
}

impl<T: FloatScalar> Trajectory<T> {
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// `n × (horizon + 1)` matrix of states, one column per step.
    pub fn states(&self) -> &Matrix<T> {
        &self.states
    }

    pub fn estimates(&self) -> &Matrix<T> {
        &self.estimates
    }

    pub fn errors(&self) -> &Matrix<T> {
        &self.errors
    }

    /// `p × horizon` matrix of measurements; column `k` is `y[k]`.
    pub fn measurements(&self) -> &Matrix<T> {
        &self.measurements
    }

    /// Zero-based pool indices, one per transition.
    pub fn sensor_ids(&self) -> &[usize] {
        &self.sensor_ids
    }
}

/// Simulates one run of the plant and observer over `horizon` steps.
///
/// `x[0] ~ N(0, X0)`, `x̂[0] = 0` (the prior mean). Per step `k`: a sensor
/// is selected, `y[k] = C_s·x[k] + v`, the observer advances as
/// `x̂[k+1] = A·x̂[k] + L·(y[k] − C_s·x̂[k]) + ξ`, and the plant as
/// `x[k+1] = A·x[k] + w`.
pub fn simulate_run<T: FloatScalar>(
    model: &SystemModel<T>,
    pool: &SensorPool<T>,
    observer: &ObserverConfig<T>,
    horizon: usize,
    seed: u64,
) -> Result<Trajectory<T>>
where
    StandardNormal: Distribution<T>,
{
    let ctx = SimContext::new(model, pool, observer)?;
    simulate_run_with(&ctx, horizon, seed)
}

/// [`simulate_run`] against a prebuilt [`SimContext`].
pub fn simulate_run_with<T: FloatScalar>(
    ctx: &SimContext<T>,
    horizon: usize,
    seed: u64,
) -> Result<Trajectory<T>>
where
    StandardNormal: Distribution<T>,
{
    let (n, p) = (ctx.n, ctx.p);
    let mut rng = rng_from_seed(seed);

    let mut states = Matrix::<T>::zeros(n, horizon + 1);
    let mut estimates = Matrix::<T>::zeros(n, horizon + 1);
    let mut errors = Matrix::<T>::zeros(n, horizon + 1);
    let mut measurements = Matrix::<T>::zeros(p, horizon);
    let mut sensor_ids = Vec::with_capacity(horizon);

    let mut zn = Vector::<T>::zeros(n);
    let mut zp = Vector::<T>::zeros(p);
    let mut x = Vector::<T>::zeros(n);
    let mut xhat = Vector::<T>::zeros(n);
    let mut noise_n = Vector::<T>::zeros(n);
    let mut y = Vector::<T>::zeros(p);
    let mut innov = Vector::<T>::zeros(p);
    let mut x_next = Vector::<T>::zeros(n);
    let mut xhat_next = Vector::<T>::zeros(n);

    ctx.init.sample_into(&mut rng, &mut zn, &mut x);
    states.column_mut(0).copy_from(&x);
    errors.column_mut(0).copy_from(&(-&x));

    for k in 0..horizon {
        let s = ctx.pick_sensor(uniform01(&mut rng));
        sensor_ids.push(s);

        // y = C_s x + v
        ctx.meas[s].sample_into(&mut rng, &mut zp, &mut y);
        y.gemv(T::one(), &ctx.c[s], &x, T::one());
        measurements.column_mut(k).copy_from(&y);

        // x̂' = A x̂ + L (y − C_s x̂) + ξ
        innov.copy_from(&y);
        innov.gemv(-T::one(), &ctx.c[s], &xhat, T::one());
        xhat_next.gemv(T::one(), &ctx.a, &xhat, T::zero());
        xhat_next.gemv(T::one(), &ctx.l, &innov, T::one());
        ctx.mask.sample_into(&mut rng, &mut zn, &mut noise_n);
        xhat_next += &noise_n;

        // x' = A x + w
        ctx.process.sample_into(&mut rng, &mut zn, &mut noise_n);
        x_next.gemv(T::one(), &ctx.a, &x, T::zero());
        x_next += &noise_n;

        states.column_mut(k + 1).copy_from(&x_next);
        estimates.column_mut(k + 1).copy_from(&xhat_next);
        errors.column_mut(k + 1).copy_from(&(&xhat_next - &x_next));
        std::mem::swap(&mut x, &mut x_next);
        std::mem::swap(&mut xhat, &mut xhat_next);
    }

    Ok(Trajectory {
        horizon,
        seed,
        states,
        estimates,
        errors,
        measurements,
        sensor_ids,
    })
}

/// Folds per-run summaries over `runs` independent simulations.
///
/// Runs are grouped into fixed blocks of [`RUN_BLOCK`]; blocks execute in
/// parallel but each block accumulates its runs in index order and blocks
/// merge left to right, so the result does not depend on worker count.
pub fn fold_ensemble<T, Acc, Make, Step, Merge>(
    ctx: &SimContext<T>,
    horizon: usize,
    runs: usize,
    master_seed: u64,
    make: Make,
    step: Step,
    merge: Merge,
) -> Result<Acc>
where
    T: FloatScalar,
    StandardNormal: Distribution<T>,
    Acc: Send,
    Make: Fn() -> Acc + Sync,
    Step: Fn(&mut Acc, usize, &Trajectory<T>) + Sync,
    Merge: Fn(Acc, Acc) -> Acc,
{
    if runs == 0 {
        return Err(Error::Invalid("ensemble needs at least one run".into()));
    }
    let blocks = runs.div_ceil(RUN_BLOCK);
    let partials: Vec<Acc> = (0..blocks)
        .into_par_iter()
        .map(|b| -> Result<Acc> {
            let mut acc = make();
            let start = b * RUN_BLOCK;
            let end = (start + RUN_BLOCK).min(runs);
            for r in start..end {
                let traj = simulate_run_with(ctx, horizon, derive_seed(master_seed, r as u64))
                    .map_err(|e| Error::RunFailed {
                        run: r,
                        source: Box::new(e),
                    })?;
                step(&mut acc, r, &traj);
            }
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut iter = partials.into_iter();
    let first = iter.next().expect("at least one block");
    Ok(iter.fold(first, merge))
}

/// Ensemble statistics over independent runs.
///
/// `empirical_e[k]` is the population-convention sample covariance of
/// `e[k]` across runs, `(1/R)·Σ_r (e_r − ē)(e_r − ē)ᵀ`; a single run
/// therefore yields zero matrices. `steady_mse` averages each run's
/// mean `‖e[k]‖²` over `k ∈ [burn_in, horizon]` and then averages those
/// per-run values, with `steady_mse_se` their standard error across runs.
#[derive(Debug, Clone)]
pub struct EnsembleStats<T: FloatScalar> {
    pub runs: usize,
    pub empirical_e: Vec<Matrix<T>>,
    pub mean_sq_error: Vec<T>,
    pub steady_mse: T,
    pub steady_mse_se: T,
    pub burn_in: usize,
}

/// Burn-in index for a horizon: the first 20% of the steps.
pub fn default_burn_in(horizon: usize) -> usize {
    ((horizon as f64) * DEFAULT_BURN_IN_FRAC).floor() as usize
}

struct MomentAcc<T: FloatScalar> {
    sum_e: Matrix<T>,
    sum_outer: Vec<Matrix<T>>,
    sum_sq: Vec<T>,
    window_means: Vec<T>,
}

/// Runs `runs` independent simulations and aggregates error statistics.
pub fn monte_carlo<T: FloatScalar>(
    model: &SystemModel<T>,
    pool: &SensorPool<T>,
    observer: &ObserverConfig<T>,
    horizon: usize,
    runs: usize,
    master_seed: u64,
) -> Result<EnsembleStats<T>>
where
    StandardNormal: Distribution<T>,
{
    let ctx = SimContext::new(model, pool, observer)?;
    let n = ctx.n;
    let burn_in = default_burn_in(horizon);
    let steps = horizon + 1;

    let acc = fold_ensemble(
        &ctx,
        horizon,
        runs,
        master_seed,
        || MomentAcc {
            sum_e: Matrix::zeros(n, steps),
            sum_outer: vec![Matrix::zeros(n, n); steps],
            sum_sq: vec![T::zero(); steps],
            window_means: Vec::new(),
        },
        |acc: &mut MomentAcc<T>, _r, traj| {
            let mut window = T::zero();
            for k in 0..steps {
                let e = traj.errors().column(k);
                let mut col = acc.sum_e.column_mut(k);
                col += e;
                acc.sum_outer[k].ger(T::one(), &e, &e, T::one());
                let sq = e.norm_squared();
                acc.sum_sq[k] += sq;
                if k >= burn_in {
                    window += sq;
                }
            }
            acc.window_means
                .push(window / real::<T>((steps - burn_in) as f64));
        },
        |mut a, b| {
            a.sum_e += b.sum_e;
            for (x, y) in a.sum_outer.iter_mut().zip(&b.sum_outer) {
                *x += y;
            }
            for (x, y) in a.sum_sq.iter_mut().zip(&b.sum_sq) {
                *x += *y;
            }
            a.window_means.extend(b.window_means);
            a
        },
    )?;

    let r = real::<T>(runs as f64);
    let mut empirical_e = Vec::with_capacity(steps);
    let mut mean_sq_error = Vec::with_capacity(steps);
    for k in 0..steps {
        let mean = acc.sum_e.column(k) / r;
        let mut cov = &acc.sum_outer[k] / r;
        cov.ger(-T::one(), &mean, &mean, T::one());
        empirical_e.push(crate::linalg::symmetrize(&cov));
        mean_sq_error.push(acc.sum_sq[k] / r);
    }

    let steady_mse = acc.window_means.iter().fold(T::zero(), |a, x| a + *x) / r;
    let steady_mse_se = if runs > 1 {
        let var = acc
            .window_means
            .iter()
            .fold(T::zero(), |a, x| a + (*x - steady_mse) * (*x - steady_mse))
            / real::<T>((runs - 1) as f64);
        (var / r).sqrt()
    } else {
        T::zero()
    };

    Ok(EnsembleStats {
        runs,
        empirical_e,
        mean_sq_error,
        steady_mse,
        steady_mse_se,
        burn_in,
    })
}

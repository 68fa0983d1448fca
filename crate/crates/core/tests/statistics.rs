//! Statistical validation of the sampler, the ensemble machinery, and the
//! identity detectors against the exact covariance recursion.

use privsense::adversary::{
    best_point, default_tau_grid, detection_stats, map_detect, threshold_sweep,
};
use privsense::covariance::cov_sequence;
use privsense::model::SensorPool;
use privsense::simulate::{
    default_burn_in, derive_seed, monte_carlo, simulate_run, GaussianSampler,
};
use privsense::synth::{scalar_system, two_room_system};
use privsense::{Matrix, Vector};

#[test]
fn monte_carlo_matches_recursion_on_scalar_example() {
    let (model, pool, observer) = scalar_system(0.5, 0.25, 0.01, 0.0);
    let horizon = 30;
    let runs = 10_000;
    let seed = 2024;

    let exact = cov_sequence(&model, &pool, &observer, horizon).unwrap();
    let stats = monte_carlo(&model, &pool, &observer, horizon, runs, seed).unwrap();

    // standard error of the second moment, estimated from the runs themselves
    let mut sum = vec![0.0f64; horizon + 1];
    let mut sum_sq = vec![0.0f64; horizon + 1];
    for r in 0..runs {
        let traj =
            simulate_run(&model, &pool, &observer, horizon, derive_seed(seed, r as u64)).unwrap();
        for k in 0..=horizon {
            let q = traj.errors()[(0, k)].powi(2);
            sum[k] += q;
            sum_sq[k] += q * q;
        }
    }
    for k in 0..=horizon {
        let mean = sum[k] / runs as f64;
        let var = (sum_sq[k] - runs as f64 * mean * mean) / (runs - 1) as f64;
        let se = (var / runs as f64).sqrt();
        let emp = stats.empirical_e[k][(0, 0)];
        let diff = (emp - exact[k][(0, 0)]).abs();
        assert!(
            diff <= 5.0 * se + 1e-12,
            "k={k}: |{emp} - {}| > 5*{se}",
            exact[k][(0, 0)]
        );
    }
}

#[test]
fn gaussian_sampler_moments() {
    let cov = Matrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 0.5]);
    let sampler = GaussianSampler::new(&cov, "test covariance").unwrap();
    let mut rng = privsense::simulate::rng_from_seed(99);
    let draws = 1_000_000usize;

    let mut mean = Vector::<f64>::zeros(2);
    let mut second = Matrix::<f64>::zeros(2, 2);
    let mut scratch = Vector::<f64>::zeros(2);
    let mut out = Vector::<f64>::zeros(2);
    for _ in 0..draws {
        sampler.sample_into(&mut rng, &mut scratch, &mut out);
        mean += &out;
        second.ger(1.0, &out, &out, 1.0);
    }
    mean /= draws as f64;
    second /= draws as f64;

    let n = draws as f64;
    for i in 0..2 {
        let tol = 5.0 * (cov[(i, i)] / n).sqrt();
        assert!(mean[i].abs() <= tol, "mean[{i}] = {} > {tol}", mean[i]);
    }
    for i in 0..2 {
        for j in 0..2 {
            // Var(x_i x_j) = Σ_ii Σ_jj + Σ_ij² for a centered Gaussian
            let se = ((cov[(i, i)] * cov[(j, j)] + cov[(i, j)].powi(2)) / n).sqrt();
            let diff = (second[(i, j)] - cov[(i, j)]).abs();
            assert!(diff <= 5.0 * se, "cov[{i}{j}]: |{diff}| > 5*{se}");
        }
    }
}

#[test]
fn window_average_matches_recursion_on_reference_system() {
    let (model, pool, observer) = two_room_system(0.0);
    let horizon = 1000;
    let runs = 1000;
    let seed = 77;

    let stats = monte_carlo(&model, &pool, &observer, horizon, runs, seed).unwrap();
    let burn_in = stats.burn_in;
    assert_eq!(burn_in, 200);

    // the exact time-averaged expected squared error over the same window
    let exact_seq = cov_sequence(&model, &pool, &observer, horizon).unwrap();
    let exact_window: f64 = exact_seq[burn_in..]
        .iter()
        .map(|e| e.trace())
        .sum::<f64>()
        / (horizon + 1 - burn_in) as f64;

    let diff = (stats.steady_mse - exact_window).abs();
    assert!(
        diff <= 5.0 * stats.steady_mse_se,
        "|{} - {exact_window}| > 5*{}",
        stats.steady_mse,
        stats.steady_mse_se
    );
}

struct Ensemble {
    stats: Vec<Vec<f64>>,
    ids: Vec<Vec<usize>>,
}

fn run_ensemble(
    cfg: &(
        privsense::SystemModel64,
        SensorPool<f64>,
        privsense::ObserverConfig64,
    ),
    horizon: usize,
    runs: usize,
    seed: u64,
) -> Ensemble {
    let (model, pool, observer) = cfg;
    let c = pool.sensor(0).c().clone();
    let mut stats = Vec::with_capacity(runs);
    let mut ids = Vec::with_capacity(runs);
    for r in 0..runs {
        let traj =
            simulate_run(model, pool, observer, horizon, derive_seed(seed, r as u64)).unwrap();
        stats.push(detection_stats(&traj, &c).unwrap());
        ids.push(traj.sensor_ids().to_vec());
    }
    Ensemble { stats, ids }
}

#[test]
fn map_detector_is_competitive_with_best_threshold() {
    let cfg = two_room_system(0.0);
    let horizon = 300;
    let runs = 1000;
    let seed = 5150;
    let burn_in = default_burn_in(horizon);

    let ens = run_ensemble(&cfg, horizon, runs, seed);
    let sweep = threshold_sweep(&ens.stats, &ens.ids, burn_in, &default_tau_grid()).unwrap();
    let best = best_point(&sweep).unwrap();

    let (model, pool, observer) = &cfg;
    let mut correct = 0usize;
    let mut total = 0usize;
    for r in 0..runs {
        let traj =
            simulate_run(model, pool, observer, horizon, derive_seed(seed, r as u64)).unwrap();
        let det = map_detect(model, pool, observer, &traj).unwrap();
        // diag(0, 1e-32) masking noise leaves the hypothesis covariance
        // numerically rank one, so the range-space likelihood kicks in
        assert!(det.pseudo_inverse_used);
        correct += det.decisions[burn_in..]
            .iter()
            .zip(&traj.sensor_ids()[burn_in..])
            .filter(|(a, b)| a == b)
            .count();
        total += horizon - burn_in;
    }
    let map_acc = correct as f64 / total as f64;
    assert!(
        map_acc >= best.accuracy - 0.02,
        "map {map_acc} vs best-tau {}",
        best.accuracy
    );
}

#[test]
fn best_threshold_is_not_worse_than_majority_guessing() {
    let cfg = two_room_system(0.0);
    let burn_in = default_burn_in(400);
    let ens = run_ensemble(&cfg, 400, 300, 31);
    let sweep = threshold_sweep(&ens.stats, &ens.ids, burn_in, &default_tau_grid()).unwrap();
    let best = best_point(&sweep).unwrap();
    // uniform selection: majority guessing achieves one half
    assert!(best.accuracy >= 0.5 - 3.0 * best.accuracy_se);
}

#[test]
fn hundredfold_noise_pushes_accuracy_toward_chance() {
    let horizon = 500;
    let runs = 400;
    let burn_in = default_burn_in(horizon);
    let mut accs = Vec::new();
    for (i, sigma) in [1e-3, 1e-1].into_iter().enumerate() {
        let cfg = two_room_system(sigma);
        let ens = run_ensemble(&cfg, horizon, runs, 600 + i as u64);
        let sweep =
            threshold_sweep(&ens.stats, &ens.ids, burn_in, &default_tau_grid()).unwrap();
        let best = best_point(&sweep).unwrap();
        accs.push((best.accuracy, best.accuracy_se));
    }
    let (low, low_se) = accs[0];
    let (high, high_se) = accs[1];
    let se = (low_se * low_se + high_se * high_se).sqrt();
    assert!(high <= low + 3.0 * se, "accuracy did not fall: {low} -> {high}");
    assert!(high >= 0.5 - 3.0 * high_se);
}

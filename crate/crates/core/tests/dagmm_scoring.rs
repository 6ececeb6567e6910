//! Energy model: mixture algebra against brute force, training and scoring.

use celltwin::dagmm::{gmm_update, latent, train, DagmmConfig, DagmmError, DagmmModel, GmmStats, Z, Z_DIM};
use celltwin::dataio::{CycleFeatures, Normalizer, N_FEATURES};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::direct_energy;

fn random_z(rng: &mut ChaCha8Rng, n: usize) -> Vec<Z> {
    (0..n).map(|_| std::array::from_fn(|_| rng.random_range(-2.0..2.0))).collect()
}

fn random_gamma(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let g: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
            let s: f64 = g.iter().sum();
            g.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

#[test]
fn weighted_moments_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let z = random_z(&mut rng, 50);
    let gamma = random_gamma(&mut rng, 50, 3);
    let eps = 1e-6;
    let (stats, starved) = gmm_update(&z, &gamma, eps).unwrap();
    assert_eq!(starved, vec![false; 3]);
    assert!((stats.phi.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    for k in 0..3 {
        let nk: f64 = gamma.iter().map(|g| g[k]).sum();
        assert!((stats.phi[k] - nk / 50.0).abs() <= 1e-10);
        let mut mu = [0.0; Z_DIM];
        for (zi, g) in z.iter().zip(&gamma) {
            for j in 0..Z_DIM {
                mu[j] += g[k] * zi[j] / nk;
            }
        }
        for j in 0..Z_DIM {
            assert!((stats.mu[k][j] - mu[j]).abs() <= 1e-10);
            for l in 0..Z_DIM {
                let mut c = 0.0;
                for (zi, g) in z.iter().zip(&gamma) {
                    c += g[k] * (zi[j] - mu[j]) * (zi[l] - mu[l]);
                }
                c /= nk;
                if j == l {
                    c += eps;
                }
                assert!((stats.sigma[k][j][l] - c).abs() <= 1e-10, "Σ{k}[{j}][{l}]");
            }
        }
    }
}

#[test]
fn duplicated_rows_give_that_row_as_every_mean() {
    let row: Z = [0.3, -1.2, 0.05, 0.9];
    let z = vec![row; 10];
    let gamma = vec![vec![1.0 / 3.0; 3]; 10];
    let (stats, _) = gmm_update(&z, &gamma, 1e-6).unwrap();
    for mu in &stats.mu {
        for j in 0..Z_DIM {
            assert!((mu[j] - row[j]).abs() <= 1e-15);
        }
    }
    assert!(stats.factor().is_ok());
}

#[test]
fn energy_matches_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let mut sigma = Vec::new();
        let mut mu = Vec::new();
        for _ in 0..3 {
            let a: [Z; Z_DIM] = std::array::from_fn(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)));
            sigma.push(std::array::from_fn(|i| {
                std::array::from_fn(|j| {
                    (0..Z_DIM).map(|m| a[i][m] * a[j][m]).sum::<f64>() + if i == j { 0.5 } else { 0.0 }
                })
            }));
            mu.push(std::array::from_fn(|_| rng.random_range(-1.0..1.0)));
        }
        let raw: Vec<f64> = (0..3).map(|_| rng.random_range(0.1..1.0)).collect();
        let s: f64 = raw.iter().sum();
        let stats = GmmStats {
            phi: raw.iter().map(|v| v / s).collect(),
            mu,
            sigma,
        };
        let z: Z = std::array::from_fn(|_| rng.random_range(-2.0..2.0));
        let e = stats.energy(&z).unwrap();
        let oracle = direct_energy(&stats, &z);
        assert!((e.value - oracle).abs() <= 1e-10, "{} vs {oracle}", e.value);
        assert!((e.gamma.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn reconstruction_features_follow_their_definitions() {
    let x = [1.0, -2.0, 0.5, 3.0];
    let z = latent(&[0.1, 0.2], &x, &x);
    assert_eq!((z[2], z[3]), (0.0, 1.0));
    let neg: Vec<f64> = x.iter().map(|v| -v).collect();
    let z = latent(&[0.1, 0.2], &x, &neg);
    assert!((z[2] - 2.0).abs() < 1e-15 && (z[3] + 1.0).abs() < 1e-15);
    let zero = [0.0; 4];
    let z = latent(&[0.0, 0.0], &zero, &x);
    assert!((z[2] - x.iter().map(|v| v * v).sum::<f64>().sqrt()).abs() < 1e-15);
    assert_eq!(z[3], 0.0);
}

/// Three clusters in feature space.
fn clustered_rows(n: usize, seed: u64) -> Vec<CycleFeatures> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let centre = (i % 3) as f64 * 2.0 - 2.0;
            let mut values = [0.0; N_FEATURES];
            for (j, v) in values.iter_mut().enumerate() {
                *v = centre * ((j % 4) as f64 - 1.5) + rng.random_range(-0.3..0.3);
            }
            CycleFeatures {
                cell_id: format!("C2-c{:02}", i % 4),
                cycle: i as u32,
                values,
                soh: None,
            }
        })
        .collect()
}

#[test]
fn training_scoring_and_model_files() {
    let rows = clustered_rows(600, 3);
    let norm = Normalizer::fit(&rows).unwrap();
    let cfg = DagmmConfig {
        epochs: 40,
        ..DagmmConfig::default()
    };
    let (model, log) = train(&rows, &norm, &cfg, 7).unwrap();
    assert_eq!(log.len(), 40);
    assert!((model.gmm.phi.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    assert!(model.gmm.factor().is_ok());
    assert!(log.last().unwrap().terms.total < log[0].terms.total);

    let a = model.score(&rows).unwrap();
    let b = model.score(&rows).unwrap();
    assert_eq!(a, b);
    assert!(a.iter().all(|s| s.energy.is_finite() && (0.0..=100.0).contains(&s.percentile)));

    let doubled: Vec<CycleFeatures> = rows[..5].iter().chain(&rows[..5]).cloned().collect();
    let d = model.score(&doubled).unwrap();
    assert_eq!(d[..5], d[5..]);
    assert_eq!(d[..5], a[..5]);

    let (again, _) = train(&rows, &norm, &cfg, 7).unwrap();
    assert_eq!(again, model);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("uq.json");
    model.save(&path).unwrap();
    let back = DagmmModel::load(&path).unwrap();
    assert_eq!(back.score(&rows).unwrap(), a);

    let bad = ndarray::Array2::zeros((2, norm.dim() + 1));
    assert!(matches!(model.score_standardized(&bad), Err(DagmmError::Dimension { .. })));
    assert!(matches!(
        train(&rows[..499], &norm, &cfg, 7),
        Err(DagmmError::TooFewRows { min: 500, got: 499 })
    ));
}

//! SOH regressor: gradients, loss decomposition, training and model files.

use celltwin::dataio::{CycleFeatures, CYCLE_NORM, N_FEATURES};
use celltwin::nn::grad_at;
use celltwin::pinn::{track_errors, train, PinnBatch, PinnConfig, PinnError, SohModel, SOH_MAX, SOH_MIN};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::{model_and_batch, random_rows};

/// Only `cycle_norm` varies; the label is linear in it.
fn linear_rows(cycles: u32) -> Vec<CycleFeatures> {
    (0..cycles)
        .map(|n| {
            let mut values = [1.0; N_FEATURES];
            let cn = f64::from(n) / f64::from(cycles);
            values[CYCLE_NORM] = cn;
            CycleFeatures {
                cell_id: "C3-c00".into(),
                cycle: n,
                values,
                soh: Some(1.0 - 0.15 * cn),
            }
        })
        .collect()
}

#[test]
fn weight_gradients_match_central_differences() {
    let (mut model, batch) = model_and_batch(3);
    // large physics weight so every loss term contributes to the gradient
    model.config.lambda_phys = 50.0;
    let (_, grads) = model.loss_and_grad(&batch);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let k = rng.random_range(0..model.net.n_params());
        let w = model.net.param(k);
        model.net.set_param(k, w + h);
        let up = model.loss(&batch).total;
        model.net.set_param(k, w - h);
        let down = model.loss(&batch).total;
        model.net.set_param(k, w);
        let fd = (up - down) / (2.0 * h);
        let an = grad_at(&grads, k);
        worst = worst.max((an - fd).abs() / an.abs().max(fd.abs()).max(1e-6));
    }
    assert!(worst <= 1e-4, "worst relative error {worst:.2e}");
}

#[test]
fn cycle_slope_matches_finite_differences() {
    let (model, batch) = model_and_batch(4);
    let c = model.normalizer.position(CYCLE_NORM).unwrap();
    let std_c = model.normalizer.std[c];
    let (_, slope) = model.forward_with_slope(&batch.x);
    let h = 1e-4;
    for (i, s) in slope.iter().enumerate() {
        let mut up = batch.x.row(i).to_vec();
        let mut down = up.clone();
        up[c] += h / std_c;
        down[c] -= h / std_c;
        let fd = (model.forward(&up).unwrap() - model.forward(&down).unwrap()) / (2.0 * h);
        assert!((s - fd).abs() <= 1e-4 * s.abs().max(1e-6), "row {i}: {s} vs {fd}");
    }
}

#[test]
fn loss_is_the_weighted_sum_of_its_terms() {
    let (mut model, batch) = model_and_batch(5);
    for (lm, lp) in [(1.0, 0.1), (0.0, 0.0), (3.0, 7.0)] {
        model.config.lambda_mono = lm;
        model.config.lambda_phys = lp;
        let t = model.loss(&batch);
        assert!((t.total - (t.data + lm * t.mono + lp * t.phys)).abs() <= 1e-15 * t.total.max(1.0));
        if lm == 0.0 && lp == 0.0 {
            let pred = model.forward_batch(&batch.x).unwrap();
            let mse = pred.iter().zip(&batch.y).map(|(p, y)| (p - y).powi(2)).sum::<f64>() / pred.len() as f64;
            assert!((t.total - mse).abs() <= 1e-15);
        }
    }
}

#[test]
fn increasing_model_activates_monotonicity_penalty() {
    let (mut model, batch) = model_and_batch(6);
    let c = model.normalizer.position(CYCLE_NORM).unwrap();
    for layer in &mut model.net.layers {
        layer.w.fill(0.0);
        layer.b.fill(0.0);
    }
    // one tanh path from cycle_norm to the output, all positive weights
    model.net.layers[0].w[(c, 0)] = 1.0;
    model.net.layers[1].w[(0, 0)] = 1.0;
    model.net.layers[2].w[(0, 0)] = 1.0;
    let (_, slope) = model.forward_with_slope(&batch.colloc);
    assert!(slope.iter().all(|&s| s > 0.0));
    assert!(model.loss(&batch).mono > 0.0);
    // constant model on constant labels fits exactly
    model.net.layers[0].w.fill(0.0);
    let mid = model.forward(&vec![0.0; model.normalizer.dim()]).unwrap();
    let flat = PinnBatch {
        y: vec![mid; batch.x.nrows()],
        ..batch
    };
    let t = model.loss(&flat);
    assert_eq!((t.data, t.mono), (0.0, 0.0));
}

#[test]
fn outputs_stay_in_range_for_extreme_inputs() {
    let (model, batch) = model_and_batch(7);
    let big = batch.x.mapv(|v| v * 1e3);
    for y in model.forward_batch(&big).unwrap() {
        assert!((SOH_MIN..=SOH_MAX).contains(&y));
    }
    assert!(matches!(model.forward(&[0.0; 3]), Err(PinnError::Dimension { .. })));
}

#[test]
fn linear_toy_problem_is_fitted() {
    let rows = linear_rows(200);
    let cfg = PinnConfig::default();
    let (model, log) = train(&rows, &cfg, 2.0, 42).unwrap();
    assert_eq!(model.normalizer.dim(), 1);
    let pred = model.predict(&rows).unwrap();
    let mse = pred.iter().zip(&rows).map(|(p, r)| (p - r.soh.unwrap()).powi(2)).sum::<f64>() / pred.len() as f64;
    assert!(mse <= 1e-3, "MSE {mse:.2e}");
    assert!(log.last().unwrap().terms.total < 0.5 * log[0].terms.total);
}

#[test]
fn training_is_seeded_and_model_files_round_trip() {
    let rows = random_rows(2, 60, 9);
    let cfg = PinnConfig {
        epochs: 5,
        ..PinnConfig::default()
    };
    let (a, la) = train(&rows, &cfg, 2.0, 11).unwrap();
    let (b, lb) = train(&rows, &cfg, 2.0, 11).unwrap();
    assert_eq!(a.net, b.net);
    assert_eq!(la, lb);
    let (c, _) = train(&rows, &cfg, 2.0, 12).unwrap();
    assert_ne!(a.net, c.net);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("soh.json");
    a.save(&path).unwrap();
    let back = SohModel::load(&path).unwrap();
    assert_eq!(back.predict(&rows).unwrap(), a.predict(&rows).unwrap());

    assert!(matches!(train(&rows[..99], &cfg, 2.0, 1), Err(PinnError::TooFewRows(99))));
}

#[test]
fn track_errors_follow_uniform_scaling() {
    let ids = ["C2-c00", "C2-c00", "SAT-c01", "SAT-c01"];
    let truth = [1.0, 0.95, 0.9, 0.85];
    let same = track_errors(&ids, &truth, &truth);
    assert_eq!(same.pooled, 0.0);
    let scaled: Vec<f64> = truth.iter().map(|t| 0.97 * t).collect();
    let e = track_errors(&ids, &truth, &scaled);
    assert!((e.pooled - 3.0).abs() < 1e-9);
    assert!(e.per_family.values().all(|m| (m - 3.0).abs() < 1e-9));
    assert_eq!(e.per_cell.len(), 2);
}

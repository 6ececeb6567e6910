//! Surrogate algebra against hand-evaluated closed forms, and the loop on a small space.

use celltwin::calib::{
    calibrate, expected_improvement, objective, propose_next, simulate_discharge, CalibError, Experiment,
    GpSurrogate, ParameterSpace, RateReference, Scale, SpaceEntry, LENGTHSCALE_GRID,
};
use celltwin::sim::ParamFile;

fn matern(r: f64, l: f64) -> f64 {
    let s = 5f64.sqrt() * r / l;
    (1.0 + s + s * s / 3.0) * (-s).exp()
}

#[test]
fn two_point_posterior_matches_hand_algebra() {
    let x = vec![vec![0.2], vec![0.7]];
    let g = GpSurrogate::fit_with_grid(&x, &[1.0, 3.0], &[0.4]).unwrap();
    // standardised targets are −1 and +1
    assert_eq!(g.y, vec![-1.0, 1.0]);
    let a = 1.0 + g.nugget;
    let b = matern(0.5, 0.4);
    let det = a * a - b * b;
    let inv = [[a / det, -b / det], [-b / det, a / det]];
    let y = [-1.0, 1.0];
    for xs in [0.0, 0.2, 0.33, 0.45, 0.7, 1.0] {
        let k = [matern((xs - 0.2f64).abs(), 0.4), matern((xs - 0.7f64).abs(), 0.4)];
        let kinv = [
            inv[0][0] * k[0] + inv[0][1] * k[1],
            inv[1][0] * k[0] + inv[1][1] * k[1],
        ];
        let mean = kinv[0] * y[0] + kinv[1] * y[1];
        let var = 1.0 - (kinv[0] * k[0] + kinv[1] * k[1]);
        let (m, v) = g.predict(&[xs]);
        assert!((m - mean).abs() <= 1e-10, "mean at {xs}: {m} vs {mean}");
        assert!((v - var.max(0.0)).abs() <= 1e-10, "variance at {xs}: {v} vs {var}");
    }
}

#[test]
fn far_from_data_reverts_to_the_prior() {
    let x = vec![vec![0.0, 0.0], vec![0.05, 0.02], vec![0.02, 0.06]];
    let g = GpSurrogate::fit_with_grid(&x, &[1.0, 2.0, 4.0], &[0.05]).unwrap();
    let (m, v) = g.predict(&[1.0, 1.0]);
    assert!(m.abs() < 1e-6 && (v - 1.0).abs() < 1e-6, "({m}, {v})");
    let (_, v0) = g.predict(&[0.0, 0.0]);
    assert!(v0 <= 2.0 * g.nugget * 10.0);
}

#[test]
fn chosen_lengthscale_maximises_marginal_likelihood() {
    let x: Vec<Vec<f64>> = (0..12).map(|i| vec![i as f64 / 11.0, ((i * 7) % 12) as f64 / 11.0]).collect();
    let y: Vec<f64> = x.iter().map(|p| (4.0 * p[0]).sin() + p[1]).collect();
    let g = GpSurrogate::fit(&x, &y).unwrap();
    for l in LENGTHSCALE_GRID {
        assert!(g.log_marginal_likelihood >= g.log_marginal_likelihood_at(l).unwrap());
    }
    let flat = GpSurrogate::fit(&x[..2], &[5.0, 5.0]).unwrap();
    assert_eq!(flat.predict(&[0.3, 0.9]).0, flat.predict(&[0.8, 0.1]).0);
}

#[test]
fn proposal_beats_incumbent_and_is_seeded() {
    let x: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64 / 7.0, 1.0 - i as f64 / 7.0]).collect();
    let y: Vec<f64> = x.iter().map(|p| (p[0] - 0.4).powi(2)).collect();
    let g = GpSurrogate::fit(&x, &y).unwrap();
    let inc = x[3].clone();
    let best = g.standardize(y[3]);
    let p = propose_next(&g, best, &inc, 5);
    let ei = |q: &[f64]| {
        let (m, v) = g.predict(q);
        expected_improvement(m, v, best)
    };
    assert!(ei(&p) >= ei(&inc));
    assert_eq!(p, propose_next(&g, best, &inc, 5));
}

fn references(file: &ParamFile) -> Vec<RateReference> {
    [1.0, 2.0, 3.0]
        .iter()
        .enumerate()
        .map(|(k, &r)| {
            let rec = simulate_discharge(file, &file.params, r, &Experiment::default(), "ref", k as u32).unwrap();
            RateReference::from_record(&rec, file.params.q_nom).unwrap()
        })
        .collect()
}

fn small_space(file: &ParamFile) -> ParameterSpace {
    let entry = |name: &str, scale| {
        let v = file.params.get(name).unwrap();
        SpaceEntry {
            name: name.into(),
            lower: 0.7 * v,
            upper: 1.3 * v,
            scale,
        }
    };
    ParameterSpace::new(vec![entry("R0", Scale::Linear), entry("D_p", Scale::Log)]).unwrap()
}

#[test]
fn truth_scores_near_zero_on_its_own_reference() {
    let file = ParamFile::default();
    let refs = references(&file);
    let (j, per_rate, failed) = objective(&file, &file.params, &refs, &Experiment::default());
    assert!(!failed);
    assert_eq!(per_rate.len(), 3);
    assert!(j <= 0.05, "J = {j}");
}

#[test]
fn loop_is_monotone_seeded_and_respects_the_budget() {
    let file = ParamFile::default();
    let refs = references(&file);
    let space = small_space(&file);
    let exp = Experiment::default();

    let lhs_only = calibrate(&space, &file, &refs, &exp, 4, 3).unwrap();
    assert_eq!(lhs_only.history.len(), 4);
    let min = lhs_only.history.iter().map(|r| r.j).fold(f64::INFINITY, f64::min);
    assert_eq!(lhs_only.best.j, min);

    let cal = calibrate(&space, &file, &refs, &exp, 12, 3).unwrap();
    assert_eq!(cal.history.len(), 12);
    let bsf = cal.best_so_far();
    assert!(bsf.windows(2).all(|w| w[1] <= w[0]));
    assert!(cal.best.j <= min);
    assert_eq!(&cal.history[..4].iter().map(|r| r.j).collect::<Vec<_>>(), &lhs_only.history.iter().map(|r| r.j).collect::<Vec<_>>());

    let again = calibrate(&space, &file, &refs, &exp, 12, 3).unwrap();
    assert_eq!(
        cal.history.iter().map(|r| r.x_unit.clone()).collect::<Vec<_>>(),
        again.history.iter().map(|r| r.x_unit.clone()).collect::<Vec<_>>()
    );

    match calibrate(&space, &file, &refs, &exp, 3, 3) {
        Err(CalibError::Budget { .. }) => {}
        other => panic!("expected a budget error, got {other:?}"),
    }
}

#[test]
fn default_space_covers_fifteen_parameters_and_round_trips() {
    let file = ParamFile::default();
    let space = ParameterSpace::around(&file.params, 0.3);
    assert_eq!(space.dim(), 15);
    let back = ParameterSpace::from_toml_str(&space.to_toml_string()).unwrap();
    assert_eq!(back, space);
    let x = space.encode(&file.params);
    let decoded = space.decode(&file.params, &x);
    for e in &space.entries {
        let (a, b) = (decoded.get(&e.name).unwrap(), file.params.get(&e.name).unwrap());
        assert!((a - b).abs() <= 1e-12 * b.abs(), "{}", e.name);
    }
}

#[test]
fn shipped_configs_match_the_built_in_defaults() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let file = ParamFile::load(&dir.join("reference_cell.toml")).unwrap();
    assert_eq!(file, ParamFile::default());
    let space = ParameterSpace::load(&dir.join("search_space.toml")).unwrap();
    assert_eq!(space, ParameterSpace::around(&file.params, 0.3));
}

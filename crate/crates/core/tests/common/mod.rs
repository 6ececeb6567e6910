//! Reference computations shared by the test targets.

#![allow(dead_code)]

use celltwin::dagmm::{GmmStats, Z, Z_DIM};
use celltwin::dataio::{CycleFeatures, Normalizer, CYCLE_NORM, N_FEATURES};
use celltwin::pinn::{FadeLaw, PinnBatch, PinnConfig, SohModel};
use celltwin::sim::{CellState, SphericalMesh, Spm};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Explicit finite volumes in physical units on a fine mesh; returns the
/// extrapolated surface concentration after `t_end` seconds.
pub fn explicit_surface(radius: f64, shells: usize, d: f64, flux: f64, c0: f64, t_end: f64, dt: f64) -> f64 {
    let h = radius / shells as f64;
    let vol: Vec<f64> = (0..shells)
        .map(|i| ((i as f64 + 1.0) * h).powi(3) / 3.0 - (i as f64 * h).powi(3) / 3.0)
        .collect();
    let mut c = vec![c0; shells];
    let mut rate = vec![0.0; shells];
    let steps = (t_end / dt).round() as usize;
    for _ in 0..steps {
        rate.iter_mut().for_each(|r| *r = 0.0);
        for i in 1..shells {
            let r = i as f64 * h;
            let q = d * r * r * (c[i] - c[i - 1]) / h;
            rate[i - 1] += q;
            rate[i] -= q;
        }
        rate[shells - 1] -= radius * radius * flux;
        for i in 0..shells {
            c[i] += dt * rate[i] / vol[i];
        }
    }
    c[shells - 1] - flux * 0.5 * h / d
}

pub fn implicit_surface(mesh: &SphericalMesh, d: f64, flux: f64, c0: f64, t_end: f64, dt: f64) -> f64 {
    let mut c = vec![c0; mesh.shells()];
    let mut next = c.clone();
    let steps = (t_end / dt).round() as usize;
    for _ in 0..steps {
        mesh.step_into(&c, flux, d, dt, &mut next).unwrap();
        std::mem::swap(&mut c, &mut next);
    }
    mesh.surface(&c, flux, d)
}

/// A state with a non-uniform history.
pub fn random_state(spm: &Spm, rng: &mut ChaCha8Rng) -> CellState {
    let soc = rng.random_range(0.15..0.85);
    let temp = rng.random_range(283.15..318.15);
    let mut s = spm.initial_state(soc, temp);
    for _ in 0..rng.random_range(0..120) {
        let current = rng.random_range(-4.0..4.0);
        spm.step_in_place(&mut s, current, temp, 1.0).unwrap();
    }
    s
}

/// Determinant and inverse by Gauss-Jordan elimination with partial pivoting.
pub fn det_inv(m: &[Z; Z_DIM]) -> (f64, [Z; Z_DIM]) {
    let mut a = *m;
    let mut inv = [[0.0; Z_DIM]; Z_DIM];
    for (i, row) in inv.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    let mut det = 1.0;
    for col in 0..Z_DIM {
        let p = (col..Z_DIM).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        if p != col {
            a.swap(p, col);
            inv.swap(p, col);
            det = -det;
        }
        let piv = a[col][col];
        det *= piv;
        for j in 0..Z_DIM {
            a[col][j] /= piv;
            inv[col][j] /= piv;
        }
        for i in 0..Z_DIM {
            if i != col {
                let f = a[i][col];
                for j in 0..Z_DIM {
                    a[i][j] -= f * a[col][j];
                    inv[i][j] -= f * inv[col][j];
                }
            }
        }
    }
    (det, inv)
}

pub fn direct_energy(s: &GmmStats, z: &Z) -> f64 {
    let mut total = 0.0;
    for k in 0..s.k() {
        let (det, inv) = det_inv(&s.sigma[k]);
        let u: Vec<f64> = (0..Z_DIM).map(|i| z[i] - s.mu[k][i]).collect();
        let mut q = 0.0;
        for i in 0..Z_DIM {
            for j in 0..Z_DIM {
                q += u[i] * inv[i][j] * u[j];
            }
        }
        let norm = ((2.0 * std::f64::consts::PI).powi(Z_DIM as i32) * det).sqrt();
        total += s.phi[k] * (-0.5 * q).exp() / norm;
    }
    -total.ln()
}

/// Rows with random features and a fade-law label; `cycle_norm` = n / cycles.
pub fn random_rows(cells: usize, cycles: u32, seed: u64) -> Vec<CycleFeatures> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for c in 0..cells {
        for n in 0..cycles {
            let mut values = [0.0; N_FEATURES];
            for v in values.iter_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
            let cn = f64::from(n) / f64::from(cycles);
            values[CYCLE_NORM] = cn;
            let soh = 1.0 - (0.012 * f64::from(n).sqrt() + 0.00025 * f64::from(n)) / 2.0;
            rows.push(CycleFeatures {
                cell_id: format!("C2-c{c:02}"),
                cycle: n,
                values,
                soh: Some(soh),
            });
        }
    }
    rows
}

/// Model with a fitted fade law and a batch drawn from random rows.
pub fn model_and_batch(seed: u64) -> (SohModel, PinnBatch) {
    let rows = random_rows(2, 100, seed);
    let norm = Normalizer::fit(&rows).unwrap();
    let mut model = SohModel::init(norm.clone(), &PinnConfig::default(), 100.0, 2.0, seed);
    let pts: Vec<(f64, f64)> = rows.iter().map(|r| (f64::from(r.cycle), r.soh.unwrap())).collect();
    model.fade = FadeLaw::fit(&pts, 2.0);
    let z = norm.apply_rows(&rows);
    let x = Array2::from_shape_fn((32, norm.dim()), |(i, j)| z[i * 5][j]);
    let y = (0..32).map(|i| rows[i * 5].soh.unwrap()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let c = norm.position(CYCLE_NORM).unwrap();
    let colloc = Array2::from_shape_fn((16, norm.dim()), |(i, j)| {
        if j == c {
            (rng.random::<f64>() - norm.mean[c]) / norm.std[c]
        } else {
            z[i * 7][j]
        }
    });
    (model, PinnBatch { x, y, colloc })
}

//! Physics-regularised SOH regressor.
//!
//! A tanh MLP maps standardised cycle features to SOH through a scaled sigmoid.
//! Besides the data MSE, training penalises a positive slope along
//! `cycle_norm` and the residual of the square-root + linear fade law at
//! collocation points. Both penalties use the exact input derivative,
//! propagated forward through the network and differentiated in reverse.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{CycleFeatures, Normalizer, CYCLE_NORM};
use crate::degrade::family_of;
use crate::metrics::mape;
use crate::nn::{Adam, Mlp};

pub const SOH_MIN: f64 = 0.5;
pub const SOH_MAX: f64 = 1.05;
pub const MODEL_VERSION: u32 = 1;
pub const MIN_TRAIN_ROWS: usize = 100;

#[derive(Debug, thiserror::Error)]
pub enum PinnError {
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("need at least {MIN_TRAIN_ROWS} labeled training rows, got {0}")]
    TooFewRows(usize),
    #[error("expected {expected} inputs, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("model file {path}: {reason}")]
    ModelFile { path: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PinnConfig {
    pub hidden: Vec<usize>,
    pub lambda_mono: f64,
    pub lambda_phys: f64,
    pub n_colloc: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for PinnConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            lambda_mono: 1.0,
            lambda_phys: 0.1,
            n_colloc: 64,
            learning_rate: 1e-3,
            batch_size: 64,
            epochs: 300,
        }
    }
}

impl PinnConfig {
    pub fn validate(&self) -> Result<(), PinnError> {
        if !(self.lambda_mono >= 0.0 && self.lambda_phys >= 0.0) {
            return Err(PinnError::Config("loss weights must be non-negative".into()));
        }
        if self.n_colloc == 0 || self.batch_size == 0 || self.epochs == 0 {
            return Err(PinnError::Config("n_colloc, batch_size and epochs must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(PinnError::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Coefficients of `Q_nom (1 − SOH) = b1 √n + b2 n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FadeLaw {
    pub b1: f64,
    pub b2: f64,
}

impl FadeLaw {
    /// Least squares over `(cycle, soh)` pairs.
    pub fn fit(points: &[(f64, f64)], q_nom: f64) -> Self {
        let (mut s11, mut s12, mut s22, mut r1, mut r2) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for &(n, soh) in points {
            let (f1, f2) = (n.sqrt(), n);
            let t = (1.0 - soh) * q_nom;
            s11 += f1 * f1;
            s12 += f1 * f2;
            s22 += f2 * f2;
            r1 += f1 * t;
            r2 += f2 * t;
        }
        let det = s11 * s22 - s12 * s12;
        if det.abs() <= 1e-12 * (s11 * s22).max(f64::MIN_POSITIVE) {
            return Self { b1: 0.0, b2: 0.0 };
        }
        Self {
            b1: (r1 * s22 - r2 * s12) / det,
            b2: (s11 * r2 - s12 * r1) / det,
        }
    }

    /// dSOH/dn implied by the law.
    pub fn slope(&self, n: f64, q_nom: f64) -> f64 {
        -(self.b1 / (2.0 * n.sqrt()) + self.b2) / q_nom
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SohModel {
    pub version: u32,
    pub net: Mlp,
    pub normalizer: Normalizer,
    pub fade: FadeLaw,
    /// Cycle count that maps to `cycle_norm = 1`.
    pub max_cycle: f64,
    pub q_nom: f64,
    pub config: PinnConfig,
    pub seed: u64,
    pub config_hash: String,
}

/// Terms of the composite loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub data: f64,
    pub mono: f64,
    pub phys: f64,
}

/// Standardised inputs, labels and collocation inputs.
#[derive(Debug, Clone)]
pub struct PinnBatch {
    pub x: Array2<f64>,
    pub y: Vec<f64>,
    pub colloc: Array2<f64>,
}

fn sigmoid(o: f64) -> f64 {
    1.0 / (1.0 + (-o).exp())
}

fn squash(o: f64) -> f64 {
    SOH_MIN + (SOH_MAX - SOH_MIN) * sigmoid(o)
}

impl SohModel {
    /// Untrained model with seeded Glorot weights.
    pub fn init(normalizer: Normalizer, cfg: &PinnConfig, max_cycle: f64, q_nom: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sizes = vec![normalizer.dim()];
        sizes.extend(&cfg.hidden);
        sizes.push(1);
        Self {
            version: MODEL_VERSION,
            net: Mlp::new(&sizes, &mut rng),
            normalizer,
            fade: FadeLaw { b1: 0.0, b2: 0.0 },
            max_cycle,
            q_nom,
            config: cfg.clone(),
            seed,
            config_hash: String::new(),
        }
    }

    /// Column of `cycle_norm` among the standardised inputs.
    fn cycle_column(&self) -> usize {
        self.normalizer
            .position(CYCLE_NORM)
            .expect("cycle_norm is never constant in a training set")
    }

    fn cycle_std(&self) -> f64 {
        self.normalizer.std[self.cycle_column()]
    }

    fn check_dim(&self, d: usize) -> Result<(), PinnError> {
        if d != self.net.inputs() {
            return Err(PinnError::Dimension {
                expected: self.net.inputs(),
                got: d,
            });
        }
        Ok(())
    }

    /// SOH for standardised inputs.
    pub fn forward(&self, x: &[f64]) -> Result<f64, PinnError> {
        self.check_dim(x.len())?;
        let xm = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("shape");
        let y = squash(self.net.forward(&xm, None).output()[(0, 0)]);
        if y.is_finite() {
            Ok(y)
        } else {
            Err(PinnError::NonFinite("prediction"))
        }
    }

    pub fn forward_batch(&self, x: &Array2<f64>) -> Result<Vec<f64>, PinnError> {
        self.check_dim(x.ncols())?;
        let out = self.net.forward(x, None);
        let y: Vec<f64> = out.output().column(0).iter().map(|&o| squash(o)).collect();
        if y.iter().all(|v| v.is_finite()) {
            Ok(y)
        } else {
            Err(PinnError::NonFinite("prediction"))
        }
    }

    /// Predictions for raw feature rows.
    pub fn predict(&self, rows: &[CycleFeatures]) -> Result<Vec<f64>, PinnError> {
        let x = Array2::from_shape_fn((rows.len(), self.normalizer.dim()), |(i, j)| {
            let k = self.normalizer.kept[j];
            (rows[i].values[k] - self.normalizer.mean[j]) / self.normalizer.std[j]
        });
        self.forward_batch(&x)
    }

    /// SOH and its derivative with respect to raw `cycle_norm`.
    pub fn forward_with_slope(&self, x: &Array2<f64>) -> (Vec<f64>, Vec<f64>) {
        let c = self.cycle_column();
        let mut dx = Array2::zeros(x.raw_dim());
        dx.column_mut(c).fill(1.0 / self.cycle_std());
        let t = self.net.forward(x, Some(&dx));
        let o = t.output().column(0).to_owned();
        let d_o = t.tangent().expect("tangent pass").column(0).to_owned();
        let y = o.iter().map(|&v| squash(v)).collect();
        let dy = o
            .iter()
            .zip(d_o.iter())
            .map(|(&v, &d)| {
                let s = sigmoid(v);
                (SOH_MAX - SOH_MIN) * s * (1.0 - s) * d
            })
            .collect();
        (y, dy)
    }

    /// Loss terms and, when `grad` is set, parameter gradients.
    fn loss_impl(&self, batch: &PinnBatch, grad: bool) -> (LossTerms, Option<Vec<crate::nn::Dense>>) {
        let cfg = &self.config;
        let nb = batch.x.nrows();
        let nc = batch.colloc.nrows();
        let d = batch.x.ncols();
        let mut x = Array2::zeros((nb + nc, d));
        x.slice_mut(ndarray::s![..nb, ..]).assign(&batch.x);
        x.slice_mut(ndarray::s![nb.., ..]).assign(&batch.colloc);
        let c = self.cycle_column();
        let std_c = self.cycle_std();
        let mut dx = Array2::zeros((nb + nc, d));
        dx.column_mut(c).fill(1.0 / std_c);
        let trace = self.net.forward(&x, Some(&dx));
        let o = trace.output();
        let d_o = trace.tangent().expect("tangent pass");
        let span = SOH_MAX - SOH_MIN;

        let mut g_out = Array2::zeros((nb + nc, 1));
        let mut g_tan = Array2::zeros((nb + nc, 1));
        let mut data = 0.0;
        for i in 0..nb {
            let y = squash(o[(i, 0)]);
            let r = y - batch.y[i];
            data += r * r;
            let s = sigmoid(o[(i, 0)]);
            g_out[(i, 0)] = 2.0 * r / nb as f64 * span * s * (1.0 - s);
        }
        data /= nb.max(1) as f64;

        let (mut mono, mut phys) = (0.0, 0.0);
        for i in nb..nb + nc {
            let s = sigmoid(o[(i, 0)]);
            let q = span * s * (1.0 - s);
            let dq_do = q * (1.0 - 2.0 * s);
            let slope = q * d_o[(i, 0)];
            let n = ((batch.colloc[(i - nb, c)] * std_c + self.normalizer.mean[c]) * self.max_cycle).max(1.0);
            let pos = slope.max(0.0);
            mono += pos * pos;
            let resid = slope / self.max_cycle - self.fade.slope(n, self.q_nom);
            phys += resid * resid;
            // ∂L/∂slope
            let g = (cfg.lambda_mono * 2.0 * pos + cfg.lambda_phys * 2.0 * resid / self.max_cycle) / nc as f64;
            g_tan[(i, 0)] = g * q;
            g_out[(i, 0)] = g * d_o[(i, 0)] * dq_do;
        }
        mono /= nc.max(1) as f64;
        phys /= nc.max(1) as f64;
        let total = data + cfg.lambda_mono * mono + cfg.lambda_phys * phys;
        let terms = LossTerms {
            total,
            data,
            mono,
            phys,
        };
        let grads = grad.then(|| self.net.backward(&trace, &g_out, Some(&g_tan)).0);
        (terms, grads)
    }

    pub fn loss(&self, batch: &PinnBatch) -> LossTerms {
        self.loss_impl(batch, false).0
    }

    pub fn loss_and_grad(&self, batch: &PinnBatch) -> (LossTerms, Vec<crate::nn::Dense>) {
        let (t, g) = self.loss_impl(batch, true);
        (t, g.expect("requested"))
    }

    pub fn save(&self, path: &Path) -> Result<(), PinnError> {
        let json = serde_json::to_string(self).expect("model serialises");
        std::fs::write(path, json + "\n").map_err(|e| PinnError::ModelFile {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, PinnError> {
        let err = |reason: String| PinnError::ModelFile {
            path: path.display().to_string(),
            reason,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        if m.version != MODEL_VERSION {
            return Err(err(format!("unsupported version {}", m.version)));
        }
        if m.net.inputs() != m.normalizer.dim() || !m.net.is_finite() {
            return Err(err("inconsistent weights".into()));
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    #[serde(flatten)]
    pub terms: LossTerms,
}

/// Cycle count implied by rows' `cycle` and `cycle_norm`.
pub fn infer_max_cycle(rows: &[CycleFeatures]) -> f64 {
    rows.iter()
        .filter(|r| r.values[CYCLE_NORM] > 0.0)
        .max_by_key(|r| r.cycle)
        .map_or(1.0, |r| (f64::from(r.cycle) / r.values[CYCLE_NORM]).round().max(1.0))
}

/// Trains on labeled rows.
pub fn train(
    rows: &[CycleFeatures],
    cfg: &PinnConfig,
    q_nom: f64,
    seed: u64,
) -> Result<(SohModel, Vec<EpochLoss>), PinnError> {
    cfg.validate()?;
    let labeled: Vec<&CycleFeatures> = rows.iter().filter(|r| r.soh.is_some()).collect();
    if labeled.len() < MIN_TRAIN_ROWS {
        return Err(PinnError::TooFewRows(labeled.len()));
    }
    let owned: Vec<CycleFeatures> = labeled.iter().map(|r| (*r).clone()).collect();
    let normalizer = Normalizer::fit(&owned).map_err(|e| PinnError::Config(e.to_string()))?;
    if normalizer.position(CYCLE_NORM).is_none() {
        return Err(PinnError::Config("cycle_norm is constant in the training set".into()));
    }
    let max_cycle = infer_max_cycle(&owned);
    let mut model = SohModel::init(normalizer, cfg, max_cycle, q_nom, seed);
    let pairs: Vec<(f64, f64)> = owned.iter().map(|r| (f64::from(r.cycle), r.soh.expect("labeled"))).collect();
    model.fade = FadeLaw::fit(&pairs, q_nom);
    let x = Array2::from_shape_vec(
        (owned.len(), model.normalizer.dim()),
        model.normalizer.apply_rows(&owned).concat(),
    )
    .expect("shape");
    let y: Vec<f64> = pairs.iter().map(|p| p.1).collect();

    // start the output at the mean label
    let mean_y = y.iter().sum::<f64>() / y.len() as f64;
    let p = ((mean_y - SOH_MIN) / (SOH_MAX - SOH_MIN)).clamp(1e-3, 1.0 - 1e-3);
    let last = model.net.layers.last_mut().expect("layers");
    last.b[0] = (p / (1.0 - p)).ln();

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_7a11);
    let mut adam = Adam::new(cfg.learning_rate, &[&model.net]);
    let c = model.cycle_column();
    let (mean_c, std_c) = (model.normalizer.mean[c], model.normalizer.std[c]);
    let mut order: Vec<usize> = (0..owned.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut acc = LossTerms {
            total: 0.0,
            data: 0.0,
            mono: 0.0,
            phys: 0.0,
        };
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let bx = x.select(ndarray::Axis(0), chunk);
            let by: Vec<f64> = chunk.iter().map(|&i| y[i]).collect();
            let picks: Vec<usize> = (0..cfg.n_colloc).map(|_| rng.random_range(0..owned.len())).collect();
            let mut colloc = x.select(ndarray::Axis(0), &picks);
            for i in 0..cfg.n_colloc {
                let u: f64 = rng.random();
                colloc[(i, c)] = (u - mean_c) / std_c;
            }
            let batch = PinnBatch { x: bx, y: by, colloc };
            let (terms, grads) = model.loss_and_grad(&batch);
            if !terms.total.is_finite() {
                return Err(PinnError::Diverged { epoch });
            }
            adam.step(&mut [&mut model.net], &[grads]);
            acc.total += terms.total;
            acc.data += terms.data;
            acc.mono += terms.mono;
            acc.phys += terms.phys;
            batches += 1;
        }
        let b = f64::from(batches);
        let terms = LossTerms {
            total: acc.total / b,
            data: acc.data / b,
            mono: acc.mono / b,
            phys: acc.phys / b,
        };
        if !model.net.is_finite() || !terms.total.is_finite() {
            return Err(PinnError::Diverged { epoch });
        }
        if epoch == 1 || epoch % 50 == 0 || epoch == cfg.epochs {
            log::info!("epoch {epoch}: loss {:.3e} (data {:.3e})", terms.total, terms.data);
        }
        log.push(EpochLoss { epoch, terms });
    }
    Ok((model, log))
}

/// MAPE per cell, per family and pooled over all rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackErrors {
    pub pooled: f64,
    pub per_cell: BTreeMap<String, f64>,
    pub per_family: BTreeMap<String, f64>,
}

pub fn track_errors(cell_ids: &[&str], truth: &[f64], pred: &[f64]) -> TrackErrors {
    let mut by_cell: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut by_family: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for ((id, &t), &p) in cell_ids.iter().zip(truth).zip(pred) {
        let c = by_cell.entry(id.to_string()).or_default();
        c.0.push(t);
        c.1.push(p);
        let f = by_family.entry(family_of(id).to_string()).or_default();
        f.0.push(t);
        f.1.push(p);
    }
    TrackErrors {
        pooled: mape(truth, pred),
        per_cell: by_cell.into_iter().map(|(k, (t, p))| (k, mape(&t, &p))).collect(),
        per_family: by_family.into_iter().map(|(k, (t, p))| (k, mape(&t, &p))).collect(),
    }
}

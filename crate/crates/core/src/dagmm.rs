//! Autoencoder + Gaussian mixture density model scoring how atypical a
//! feature row is.
//!
//! The latent vector is the 2-d code plus the relative reconstruction
//! distance and the cosine similarity between input and reconstruction. An
//! estimation network assigns soft memberships from which mixture moments are
//! computed per batch; the energy of a row is its negative log mixture
//! density.

use std::path::Path;

use nalgebra::{Matrix4, Vector4};
use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataio::{CycleFeatures, Normalizer};
use crate::nn::{Adam, Dense, Mlp};

pub const Z_DIM: usize = 4;
pub const CODE_DIM: usize = 2;
pub const MODEL_VERSION: u32 = 1;
pub const MIN_TRAIN_ROWS: usize = 500;
/// Total membership below which a component is reset.
pub const STARVATION: f64 = 1e-8;

pub type Z = [f64; Z_DIM];

#[derive(Debug, thiserror::Error)]
pub enum DagmmError {
    #[error("covariance of component {0} is not positive definite")]
    NotPositiveDefinite(usize),
    #[error("need at least {min} rows, got {got}")]
    TooFewRows { min: usize, got: usize },
    #[error("expected {expected} inputs, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("model file {path}: {reason}")]
    ModelFile { path: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DagmmConfig {
    pub components: usize,
    pub encoder_hidden: usize,
    pub estimator_hidden: usize,
    pub lambda_energy: f64,
    pub lambda_cov: f64,
    pub eps: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for DagmmConfig {
    fn default() -> Self {
        Self {
            components: 3,
            encoder_hidden: 8,
            estimator_hidden: 10,
            lambda_energy: 0.1,
            lambda_cov: 0.005,
            eps: 1e-6,
            learning_rate: 1e-3,
            batch_size: 128,
            epochs: 200,
        }
    }
}

impl DagmmConfig {
    pub fn validate(&self) -> Result<(), DagmmError> {
        if self.components == 0 || self.encoder_hidden == 0 || self.estimator_hidden == 0 {
            return Err(DagmmError::Config("layer and component counts must be positive".into()));
        }
        if !(self.lambda_energy >= 0.0 && self.lambda_cov >= 0.0 && self.eps > 0.0) {
            return Err(DagmmError::Config("weights must be non-negative and eps positive".into()));
        }
        if self.batch_size < self.components || self.epochs == 0 || !(self.learning_rate > 0.0) {
            return Err(DagmmError::Config(
                "batch must hold at least one row per component; epochs and learning rate must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Mixture weights, means and covariances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmStats {
    pub phi: Vec<f64>,
    pub mu: Vec<Z>,
    pub sigma: Vec<[Z; Z_DIM]>,
}

/// Energy of one row and its posterior component memberships.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyScore {
    pub value: f64,
    pub gamma: Vec<f64>,
}

fn to_vec4(z: &Z) -> Vector4<f64> {
    Vector4::from_column_slice(z)
}

fn to_mat4(s: &[Z; Z_DIM]) -> Matrix4<f64> {
    Matrix4::from_fn(|i, j| s[i][j])
}

fn from_mat4(m: &Matrix4<f64>) -> [Z; Z_DIM] {
    std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)]))
}

/// One factorised component.
#[derive(Debug, Clone)]
struct Component {
    log_phi: f64,
    mu: Vector4<f64>,
    chol: nalgebra::Cholesky<f64, nalgebra::U4>,
    /// `log det(2π Σ)`.
    log_norm: f64,
}

/// Mixture with precomputed Cholesky factors.
#[derive(Debug, Clone)]
pub struct FactoredGmm {
    comps: Vec<Component>,
}

impl GmmStats {
    pub fn k(&self) -> usize {
        self.phi.len()
    }

    pub fn factor(&self) -> Result<FactoredGmm, DagmmError> {
        let comps = (0..self.k())
            .map(|k| {
                let chol = to_mat4(&self.sigma[k])
                    .cholesky()
                    .ok_or(DagmmError::NotPositiveDefinite(k))?;
                let logdet: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
                Ok(Component {
                    log_phi: self.phi[k].ln(),
                    mu: to_vec4(&self.mu[k]),
                    chol,
                    log_norm: Z_DIM as f64 * (2.0 * std::f64::consts::PI).ln() + logdet,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(FactoredGmm { comps })
    }

    pub fn energy(&self, z: &Z) -> Result<EnergyScore, DagmmError> {
        self.factor()?.energy(z)
    }
}

impl FactoredGmm {
    /// `log φ_k + log N(z; μ_k, Σ_k)` per component.
    fn log_terms(&self, z: &Vector4<f64>) -> Vec<f64> {
        self.comps
            .iter()
            .map(|c| {
                let u = z - c.mu;
                let y = c.chol.l_dirty().solve_lower_triangular(&u).expect("factor has positive diagonal");
                c.log_phi - 0.5 * (y.norm_squared() + c.log_norm)
            })
            .collect()
    }

    pub fn energy(&self, z: &Z) -> Result<EnergyScore, DagmmError> {
        let lt = self.log_terms(&to_vec4(z));
        let m = lt.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = lt.iter().map(|l| (l - m).exp()).sum();
        let value = -(m + s.ln());
        if !value.is_finite() {
            return Err(DagmmError::NonFinite("energy"));
        }
        let gamma = lt.iter().map(|l| (l - m).exp() / s).collect();
        Ok(EnergyScore { value, gamma })
    }
}

/// Membership-weighted moments. Returns the statistics and which components
/// were reset for lack of membership.
pub fn gmm_update(z: &[Z], gamma: &[Vec<f64>], eps: f64) -> Result<(GmmStats, Vec<bool>), DagmmError> {
    let n = z.len();
    let k = gamma.first().map_or(0, Vec::len);
    if k == 0 || n < k || gamma.len() != n {
        return Err(DagmmError::TooFewRows { min: k.max(1), got: n });
    }
    let batch_mean: Vector4<f64> = z.iter().map(to_vec4).sum::<Vector4<f64>>() / n as f64;
    let mut stats = GmmStats {
        phi: Vec::with_capacity(k),
        mu: Vec::with_capacity(k),
        sigma: Vec::with_capacity(k),
    };
    let mut starved = vec![false; k];
    for c in 0..k {
        let nk: f64 = gamma.iter().map(|g| g[c]).sum();
        stats.phi.push(nk / n as f64);
        if nk < STARVATION {
            log::warn!("mixture component {c} starved (total membership {nk:.3e}); reset");
            starved[c] = true;
            stats.mu.push(batch_mean.into());
            stats.sigma.push(from_mat4(&Matrix4::identity()));
            continue;
        }
        let mu: Vector4<f64> = z.iter().zip(gamma).map(|(zi, g)| g[c] * to_vec4(zi)).sum::<Vector4<f64>>() / nk;
        let mut cov = Matrix4::zeros();
        for (zi, g) in z.iter().zip(gamma) {
            let u = to_vec4(zi) - mu;
            cov += g[c] * u * u.transpose();
        }
        cov /= nk;
        for j in 0..Z_DIM {
            cov[(j, j)] += eps;
        }
        stats.mu.push(mu.into());
        stats.sigma.push(from_mat4(&cov));
    }
    Ok((stats, starved))
}

/// Latent vector from an input and its reconstruction.
pub fn latent(code: &[f64], x: &[f64], xh: &[f64]) -> Z {
    let nx = norm(x);
    let nxh = norm(xh);
    let ne = x.iter().zip(xh).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let rel = if nx > 0.0 { ne / nx } else { ne };
    let cos = if nx > 0.0 && nxh > 0.0 {
        dot(x, xh) / (nx * nxh)
    } else {
        0.0
    };
    [code[0], code[1], rel, cos]
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax_rows(o: &Array2<f64>) -> Vec<Vec<f64>> {
    o.rows()
        .into_iter()
        .map(|r| {
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = r.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

/// Terms of the training objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DagmmLoss {
    pub total: f64,
    pub recon: f64,
    pub energy: f64,
    pub cov_penalty: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DagmmNets {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub estimator: Mlp,
}

/// Per-network gradients in [encoder, decoder, estimator] order.
pub type NetGrads = [Vec<Dense>; 3];

/// Forward pass products for a batch.
struct Pass {
    enc: crate::nn::Trace,
    dec: crate::nn::Trace,
    est: crate::nn::Trace,
    z: Vec<Z>,
    gamma: Vec<Vec<f64>>,
}

impl DagmmNets {
    pub fn init(d: usize, cfg: &DagmmConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            encoder: Mlp::new(&[d, cfg.encoder_hidden, CODE_DIM], &mut rng),
            decoder: Mlp::new(&[CODE_DIM, cfg.encoder_hidden, d], &mut rng),
            estimator: Mlp::new(&[Z_DIM, cfg.estimator_hidden, cfg.components], &mut rng),
        }
    }

    pub fn inputs(&self) -> usize {
        self.encoder.inputs()
    }

    fn pass(&self, x: &Array2<f64>) -> Pass {
        let enc = self.encoder.forward(x, None);
        let dec = self.decoder.forward(enc.output(), None);
        let code = enc.output();
        let xh = dec.output();
        let z: Vec<Z> = (0..x.nrows())
            .map(|i| {
                latent(
                    code.row(i).as_slice().expect("standard layout"),
                    x.row(i).as_slice().expect("standard layout"),
                    xh.row(i).as_slice().expect("standard layout"),
                )
            })
            .collect();
        let zm = Array2::from_shape_fn((z.len(), Z_DIM), |(i, j)| z[i][j]);
        let est = self.estimator.forward(&zm, None);
        let gamma = softmax_rows(est.output());
        Pass {
            enc,
            dec,
            est,
            z,
            gamma,
        }
    }

    /// Latent vectors and estimator memberships.
    pub fn embed(&self, x: &Array2<f64>) -> (Vec<Z>, Vec<Vec<f64>>) {
        let p = self.pass(x);
        (p.z, p.gamma)
    }

    /// Objective on a batch with mixture moments from the batch itself.
    pub fn loss(&self, x: &Array2<f64>, cfg: &DagmmConfig) -> Result<DagmmLoss, DagmmError> {
        Ok(self.loss_impl(x, cfg, false)?.0)
    }

    pub fn loss_and_grad(&self, x: &Array2<f64>, cfg: &DagmmConfig) -> Result<(DagmmLoss, NetGrads), DagmmError> {
        let (l, g) = self.loss_impl(x, cfg, true)?;
        Ok((l, g.expect("requested")))
    }

    fn loss_impl(&self, x: &Array2<f64>, cfg: &DagmmConfig, grad: bool) -> Result<(DagmmLoss, Option<NetGrads>), DagmmError> {
        let n = x.nrows();
        let d = x.ncols();
        let p = self.pass(x);
        let xh = p.dec.output();
        let recon = (x - xh).mapv(|v| v * v).sum() / (n * d) as f64;
        let (stats, starved) = gmm_update(&p.z, &p.gamma, cfg.eps)?;
        let f = stats.factor()?;
        let k = stats.k();

        // energies and posteriors
        let mut energy = 0.0;
        let mut post = Vec::with_capacity(n);
        for zi in &p.z {
            let e = f.energy(zi)?;
            energy += e.value;
            post.push(e.gamma);
        }
        energy /= n as f64;
        let cov_penalty: f64 = stats.sigma.iter().map(|s| (0..Z_DIM).map(|j| 1.0 / s[j][j]).sum::<f64>()).sum();
        let total = recon + cfg.lambda_energy * energy + cfg.lambda_cov * cov_penalty;
        let terms = DagmmLoss {
            total,
            recon,
            energy,
            cov_penalty,
        };
        if !grad {
            return Ok((terms, None));
        }

        // gradients with respect to the mixture moments
        let inv: Vec<Matrix4<f64>> = f.comps.iter().map(|c| c.chol.inverse()).collect();
        let mut g_phi = vec![0.0; k];
        let mut g_mu = vec![Vector4::zeros(); k];
        let mut g_sig = vec![Matrix4::zeros(); k];
        let mut g_z: Vec<Vector4<f64>> = vec![Vector4::zeros(); n];
        for i in 0..n {
            let zi = to_vec4(&p.z[i]);
            for c in 0..k {
                // ∂L/∂(log-term ik)
                let g = -cfg.lambda_energy * post[i][c] / n as f64;
                if g == 0.0 {
                    continue;
                }
                let u = zi - f.comps[c].mu;
                let pu = inv[c] * u;
                g_phi[c] += g / stats.phi[c];
                g_mu[c] += g * pu;
                g_z[i] -= g * pu;
                g_sig[c] += 0.5 * g * (pu * pu.transpose() - inv[c]);
            }
        }
        for c in 0..k {
            for j in 0..Z_DIM {
                g_sig[c][(j, j)] -= cfg.lambda_cov / stats.sigma[c][j][j].powi(2);
            }
        }

        // through the moments to memberships and latents
        let nk: Vec<f64> = (0..k).map(|c| stats.phi[c] * n as f64).collect();
        let mut g_gamma = Array2::zeros((n, k));
        for c in 0..k {
            if starved[c] {
                for i in 0..n {
                    g_gamma[(i, c)] = g_phi[c] / n as f64;
                }
                continue;
            }
            let mu = f.comps[c].mu;
            let mut cov = to_mat4(&stats.sigma[c]);
            for j in 0..Z_DIM {
                cov[(j, j)] -= cfg.eps;
            }
            let gs_sym = g_sig[c] + g_sig[c].transpose();
            let tr_gc = (g_sig[c].component_mul(&cov)).sum();
            for i in 0..n {
                let u = to_vec4(&p.z[i]) - mu;
                let quad = (u.transpose() * g_sig[c] * u)[(0, 0)];
                g_gamma[(i, c)] = g_phi[c] / n as f64 + g_mu[c].dot(&u) / nk[c] + (quad - tr_gc) / nk[c];
                let w = p.gamma[i][c] / nk[c];
                g_z[i] += w * (g_mu[c] + gs_sym * u);
            }
        }
        let mut g_logit = Array2::zeros((n, k));
        for i in 0..n {
            let s: f64 = (0..k).map(|c| p.gamma[i][c] * g_gamma[(i, c)]).sum();
            for c in 0..k {
                g_logit[(i, c)] = p.gamma[i][c] * (g_gamma[(i, c)] - s);
            }
        }
        let (g_est, g_zin) = self.estimator.backward(&p.est, &g_logit, None);
        for i in 0..n {
            for j in 0..Z_DIM {
                g_z[i][j] += g_zin[(i, j)];
            }
        }

        // latent features to reconstruction and code
        let mut g_xh = (xh - x) * (2.0 / (n * d) as f64);
        let mut g_code = Array2::zeros((n, CODE_DIM));
        for i in 0..n {
            g_code[(i, 0)] = g_z[i][0];
            g_code[(i, 1)] = g_z[i][1];
            let xi = x.row(i);
            let xhi = xh.row(i);
            let nx = xi.dot(&xi).sqrt();
            let nxh = xhi.dot(&xhi).sqrt();
            let e = &xi - &xhi;
            let ne = e.dot(&e).sqrt();
            let mut row = g_xh.row_mut(i);
            if ne > 0.0 {
                let denom = ne * if nx > 0.0 { nx } else { 1.0 };
                row.scaled_add(-g_z[i][2] / denom, &e);
            }
            if nx > 0.0 && nxh > 0.0 {
                let cos = xi.dot(&xhi) / (nx * nxh);
                row.scaled_add(g_z[i][3] / (nx * nxh), &xi);
                row.scaled_add(-g_z[i][3] * cos / (nxh * nxh), &xhi);
            }
        }
        let (g_dec, g_code_dec) = self.decoder.backward(&p.dec, &g_xh, None);
        g_code += &g_code_dec;
        let (g_enc, _) = self.encoder.backward(&p.enc, &g_code, None);
        Ok((terms, Some([g_enc, g_dec, g_est])))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DagmmModel {
    pub version: u32,
    pub nets: DagmmNets,
    pub gmm: GmmStats,
    pub normalizer: Normalizer,
    pub normalizer_hash: String,
    /// Training-set energies, ascending.
    pub train_energies: Vec<f64>,
    pub config: DagmmConfig,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DagmmEpoch {
    pub epoch: usize,
    #[serde(flatten)]
    pub terms: DagmmLoss,
}

/// Scored row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowScore {
    pub energy: f64,
    /// Share of training energies at or below this one, in percent.
    pub percentile: f64,
}

pub fn normalizer_hash(n: &Normalizer) -> String {
    let json = serde_json::to_string(n).expect("normalizer serialises");
    hex::encode(Sha256::digest(json.as_bytes()))[..16].to_string()
}

fn standardize(normalizer: &Normalizer, rows: &[CycleFeatures]) -> Array2<f64> {
    Array2::from_shape_vec((rows.len(), normalizer.dim()), normalizer.apply_rows(rows).concat()).expect("shape")
}

/// Trains on standardised training rows using `normalizer`.
pub fn train(
    rows: &[CycleFeatures],
    normalizer: &Normalizer,
    cfg: &DagmmConfig,
    seed: u64,
) -> Result<(DagmmModel, Vec<DagmmEpoch>), DagmmError> {
    cfg.validate()?;
    if rows.len() < MIN_TRAIN_ROWS {
        return Err(DagmmError::TooFewRows {
            min: MIN_TRAIN_ROWS,
            got: rows.len(),
        });
    }
    let x = standardize(normalizer, rows);
    let mut nets = DagmmNets::init(x.ncols(), cfg, seed);
    let mut adam = Adam::new(cfg.learning_rate, &[&nets.encoder, &nets.decoder, &nets.estimator]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xda6_e1b0);
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut acc = [0.0; 4];
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < cfg.components {
                continue;
            }
            let bx = x.select(Axis(0), chunk);
            let (t, g) = nets.loss_and_grad(&bx, cfg).map_err(|e| match e {
                DagmmError::NonFinite(_) | DagmmError::NotPositiveDefinite(_) => DagmmError::Diverged { epoch },
                other => other,
            })?;
            if !t.total.is_finite() {
                return Err(DagmmError::Diverged { epoch });
            }
            adam.step(&mut [&mut nets.encoder, &mut nets.decoder, &mut nets.estimator], &g);
            acc[0] += t.total;
            acc[1] += t.recon;
            acc[2] += t.energy;
            acc[3] += t.cov_penalty;
            batches += 1;
        }
        let b = f64::from(batches);
        let terms = DagmmLoss {
            total: acc[0] / b,
            recon: acc[1] / b,
            energy: acc[2] / b,
            cov_penalty: acc[3] / b,
        };
        let finite = [&nets.encoder, &nets.decoder, &nets.estimator].iter().all(|m| m.is_finite());
        if !finite || !terms.total.is_finite() {
            return Err(DagmmError::Diverged { epoch });
        }
        if epoch == 1 || epoch % 50 == 0 || epoch == cfg.epochs {
            log::info!(
                "epoch {epoch}: loss {:.4e} (recon {:.3e}, energy {:.3})",
                terms.total,
                terms.recon,
                terms.energy
            );
        }
        log.push(DagmmEpoch { epoch, terms });
    }

    let (z, gamma) = nets.embed(&x);
    let (gmm, _) = gmm_update(&z, &gamma, cfg.eps)?;
    let f = gmm.factor()?;
    let mut train_energies = z.iter().map(|zi| f.energy(zi).map(|e| e.value)).collect::<Result<Vec<_>, _>>()?;
    train_energies.sort_by(f64::total_cmp);
    let model = DagmmModel {
        version: MODEL_VERSION,
        nets,
        gmm,
        normalizer: normalizer.clone(),
        normalizer_hash: normalizer_hash(normalizer),
        train_energies,
        config: cfg.clone(),
        seed,
        config_hash: String::new(),
    };
    Ok((model, log))
}

impl DagmmModel {
    /// Percentile of `energy` among training energies.
    pub fn percentile(&self, energy: f64) -> f64 {
        let below = self.train_energies.partition_point(|&e| e <= energy);
        100.0 * below as f64 / self.train_energies.len().max(1) as f64
    }

    /// Scores standardised rows.
    pub fn score_standardized(&self, x: &Array2<f64>) -> Result<Vec<RowScore>, DagmmError> {
        if x.ncols() != self.nets.inputs() {
            return Err(DagmmError::Dimension {
                expected: self.nets.inputs(),
                got: x.ncols(),
            });
        }
        let f = self.gmm.factor()?;
        let (z, _) = self.nets.embed(x);
        z.iter()
            .map(|zi| {
                let e = f.energy(zi)?.value;
                Ok(RowScore {
                    energy: e,
                    percentile: self.percentile(e),
                })
            })
            .collect()
    }

    pub fn score(&self, rows: &[CycleFeatures]) -> Result<Vec<RowScore>, DagmmError> {
        self.score_standardized(&standardize(&self.normalizer, rows))
    }

    pub fn save(&self, path: &Path) -> Result<(), DagmmError> {
        let json = serde_json::to_string(self).expect("model serialises");
        std::fs::write(path, json + "\n").map_err(|e| DagmmError::ModelFile {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, DagmmError> {
        let err = |reason: String| DagmmError::ModelFile {
            path: path.display().to_string(),
            reason,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        if m.version != MODEL_VERSION {
            return Err(err(format!("unsupported version {}", m.version)));
        }
        if m.nets.inputs() != m.normalizer.dim() || m.normalizer_hash != normalizer_hash(&m.normalizer) {
            return Err(err("normalizer does not match the weights".into()));
        }
        m.gmm.factor().map_err(|e| err(e.to_string()))?;
        Ok(m)
    }
}

//! Bayesian-optimisation calibration of cell parameters against reference
//! discharge telemetry.
//!
//! The loop samples a Latin hypercube, then repeatedly fits a Matérn-5/2
//! Gaussian process to the log-objective and evaluates the candidate with the
//! largest expected improvement.

use std::io::Write;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::degrade::parallel_map;
use crate::metrics::mape;
use crate::protocol::{CycleRecord, ProtocolStep, Runner, DISCHARGE_CUTOFF};
use crate::sim::{CellParameters, ParamFile, Spm};

/// Objective assigned to failed simulations.
pub const PENALTY: f64 = 1e3;
pub const LENGTHSCALE_GRID: [f64; 5] = [0.05, 0.1, 0.2, 0.4, 0.8];
pub const NUGGET: f64 = 1e-6;
pub const MAX_NUGGET: f64 = 1e-2;
pub const N_UNIFORM: usize = 4096;
pub const N_LOCAL: usize = 256;
pub const LOCAL_SIGMA: f64 = 0.05;

/// The default calibrated parameters.
pub const DEFAULT_NAMES: [&str; 15] = [
    "D_n", "D_p", "k_n", "k_p", "R0", "eps_n", "eps_p", "L_n", "L_p", "R_part_n", "R_part_p", "hA", "C_th",
    "Ea_D", "Ea_k",
];

#[derive(Debug, thiserror::Error)]
pub enum CalibError {
    #[error("invalid parameter space: {0}")]
    Space(String),
    #[error("invalid reference telemetry: {0}")]
    Reference(String),
    #[error("budget {budget} is below the required minimum {min} (2 × {dim} dimensions)")]
    Budget { budget: usize, min: usize, dim: usize },
    #[error("Gaussian process: {0}")]
    Gp(String),
    #[error("all {0} objective evaluations failed")]
    AllFailed(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Linear,
    Log,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceEntry {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
    pub scale: Scale,
}

impl SpaceEntry {
    pub fn decode(&self, u: f64) -> f64 {
        match self.scale {
            Scale::Linear => self.lower + u * (self.upper - self.lower),
            Scale::Log => (self.lower.ln() + u * (self.upper.ln() - self.lower.ln())).exp(),
        }
    }

    pub fn encode(&self, v: f64) -> f64 {
        match self.scale {
            Scale::Linear => (v - self.lower) / (self.upper - self.lower),
            Scale::Log => (v.ln() - self.lower.ln()) / (self.upper.ln() - self.lower.ln()),
        }
    }
}

/// Bounded box over named [`CellParameters`] fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParameterSpace {
    #[serde(rename = "parameter")]
    pub entries: Vec<SpaceEntry>,
}

impl ParameterSpace {
    pub fn new(entries: Vec<SpaceEntry>) -> Result<Self, CalibError> {
        let s = Self { entries };
        s.validate()?;
        Ok(s)
    }

    /// The default 15 parameters within `[v/(1+f), v(1+f)]` (log-scaled rates)
    /// or `[v(1−f), v(1+f)]` (others) of `center`.
    pub fn around(center: &CellParameters, f: f64) -> Self {
        let entries = DEFAULT_NAMES
            .iter()
            .map(|&name| {
                let v = center.get(name).expect("default names are parameters");
                let scale = if matches!(name, "D_n" | "D_p" | "k_n" | "k_p") {
                    Scale::Log
                } else {
                    Scale::Linear
                };
                let (lower, upper) = match scale {
                    Scale::Log => (v / (1.0 + f), v * (1.0 + f)),
                    Scale::Linear => (v * (1.0 - f), v * (1.0 + f)),
                };
                SpaceEntry {
                    name: name.into(),
                    lower,
                    upper,
                    scale,
                }
            })
            .collect();
        Self { entries }
    }

    pub fn dim(&self) -> usize {
        self.entries.len()
    }

    pub fn validate(&self) -> Result<(), CalibError> {
        if self.entries.is_empty() {
            return Err(CalibError::Space("no parameters".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for e in &self.entries {
            if !CellParameters::NAMES.contains(&e.name.as_str()) {
                return Err(CalibError::Space(format!(
                    "unknown parameter `{}` (valid: {})",
                    e.name,
                    CellParameters::NAMES.join(", ")
                )));
            }
            if !seen.insert(e.name.as_str()) {
                return Err(CalibError::Space(format!("duplicate parameter `{}`", e.name)));
            }
            if !(e.lower.is_finite() && e.upper.is_finite() && e.lower < e.upper) {
                return Err(CalibError::Space(format!("{}: need lower < upper", e.name)));
            }
            if e.scale == Scale::Log && e.lower <= 0.0 {
                return Err(CalibError::Space(format!("{}: log scale needs positive bounds", e.name)));
            }
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self, CalibError> {
        let s: Self = toml::from_str(text).map_err(|e| CalibError::Space(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, CalibError> {
        let text = std::fs::read_to_string(path).map_err(|e| CalibError::Space(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("space serialises")
    }

    /// Overlays the decoded point onto `base`.
    pub fn decode(&self, base: &CellParameters, x: &[f64]) -> CellParameters {
        let mut p = base.clone();
        for (e, &u) in self.entries.iter().zip(x) {
            p.set(&e.name, e.decode(u.clamp(0.0, 1.0))).expect("validated name");
        }
        p
    }

    pub fn encode(&self, p: &CellParameters) -> Vec<f64> {
        self.entries
            .iter()
            .map(|e| e.encode(p.get(&e.name).expect("validated name")))
            .collect()
    }
}

/// One constant-current discharge of the reference set, timed from its start.
#[derive(Debug, Clone, PartialEq)]
pub struct RateReference {
    pub rate: f64,
    pub tau: Vec<f64>,
    pub voltage: Vec<f64>,
    /// Kelvin.
    pub temp: Vec<f64>,
}

impl RateReference {
    /// Converts discharge records; the rate is the mean discharge current over
    /// `q_nom`. Time starts one sample spacing before the first sample.
    pub fn from_record(rec: &CycleRecord, q_nom: f64) -> Result<Self, CalibError> {
        let n = rec.len();
        if n < 2 {
            return Err(CalibError::Reference(format!(
                "cell {} cycle {} has fewer than 2 samples",
                rec.cell_id, rec.cycle
            )));
        }
        let dis: Vec<f64> = rec.current.iter().copied().filter(|&i| i > 0.0).collect();
        if dis.len() != n {
            return Err(CalibError::Reference(format!(
                "cell {} cycle {} is not a pure discharge",
                rec.cell_id, rec.cycle
            )));
        }
        let rate = dis.iter().sum::<f64>() / n as f64 / q_nom;
        let t0 = rec.t[0] - (rec.t[1] - rec.t[0]);
        Ok(Self {
            rate,
            tau: rec.t.iter().map(|t| t - t0).collect(),
            voltage: rec.voltage.clone(),
            temp: rec.temp_c.iter().map(|t| t + 273.15).collect(),
        })
    }

    pub fn label(&self) -> String {
        rate_label(self.rate)
    }
}

/// `1c`, `2c`, `2_5c`.
pub fn rate_label(rate: f64) -> String {
    let r = (rate * 100.0).round() / 100.0;
    format!("{r}c").replace('.', "_")
}

/// Reference runs sorted by rate.
pub fn references_from_records(records: &[CycleRecord], q_nom: f64) -> Result<Vec<RateReference>, CalibError> {
    if records.is_empty() {
        return Err(CalibError::Reference("no discharge records".into()));
    }
    let mut refs = records
        .iter()
        .map(|r| RateReference::from_record(r, q_nom))
        .collect::<Result<Vec<_>, _>>()?;
    refs.sort_by(|a, b| a.rate.total_cmp(&b.rate));
    Ok(refs)
}

/// Conditions of the reference experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub t_amb: f64,
    pub initial_soc: f64,
    pub cutoff_v: f64,
    pub dt: f64,
}

impl Default for Experiment {
    fn default() -> Self {
        Self {
            t_amb: 298.15,
            initial_soc: 1.0,
            cutoff_v: DISCHARGE_CUTOFF,
            dt: 1.0,
        }
    }
}

/// Simulated constant-current discharge from the experiment's initial state.
pub fn simulate_discharge(
    file: &ParamFile,
    params: &CellParameters,
    rate: f64,
    exp: &Experiment,
    cell_id: &str,
    cycle: u32,
) -> Result<CycleRecord, String> {
    let spm = Spm::new(params.clone(), file.ocp.clone(), file.options.clone()).map_err(|e| e.to_string())?;
    let mut state = spm.initial_state(exp.initial_soc, exp.t_amb);
    let mut rec = CycleRecord::new(cell_id, cycle);
    let mut runner = Runner::new(&spm, exp.dt, exp.t_amb, 0);
    runner
        .run_step(&mut state, &ProtocolStep::cc_discharge(rate, exp.cutoff_v), cycle, &mut rec)
        .map_err(|e| e.to_string())?;
    if rec.is_empty() {
        return Err("discharge produced no samples".into());
    }
    Ok(rec)
}

/// Piecewise-linear interpolation holding the end values outside the data.
pub fn resample(x: &[f64], y: &[f64], at: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(at.len());
    let mut k = 0;
    for &a in at {
        if a <= x[0] {
            out.push(y[0]);
            continue;
        }
        if a >= x[x.len() - 1] {
            out.push(y[y.len() - 1]);
            continue;
        }
        while x[k + 1] < a {
            k += 1;
        }
        while k > 0 && x[k] > a {
            k -= 1;
        }
        let w = (a - x[k]) / (x[k + 1] - x[k]);
        out.push(y[k] + w * (y[k + 1] - y[k]));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateMape {
    pub rate: f64,
    pub mape_v: f64,
    pub mape_t: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationRecord {
    pub x_unit: Vec<f64>,
    pub theta: CellParameters,
    pub j: f64,
    pub per_rate: Vec<RateMape>,
    pub failed: bool,
}

/// Simulated voltage and temperature on each reference's timestamps.
pub fn simulate_on_reference(
    file: &ParamFile,
    theta: &CellParameters,
    reference: &[RateReference],
    exp: &Experiment,
) -> Result<Vec<(Vec<f64>, Vec<f64>)>, String> {
    reference
        .iter()
        .enumerate()
        .map(|(k, r)| {
            let rec = simulate_discharge(file, theta, r.rate, exp, "sim", k as u32)?;
            let temp: Vec<f64> = rec.temp_c.iter().map(|t| t + 273.15).collect();
            Ok((resample(&rec.t, &rec.voltage, &r.tau), resample(&rec.t, &temp, &r.tau)))
        })
        .collect()
}

/// Mean over rates of voltage MAPE plus temperature MAPE (kelvin).
pub fn objective(
    file: &ParamFile,
    theta: &CellParameters,
    reference: &[RateReference],
    exp: &Experiment,
) -> (f64, Vec<RateMape>, bool) {
    match simulate_on_reference(file, theta, reference, exp) {
        Ok(sims) => {
            let per_rate: Vec<RateMape> = reference
                .iter()
                .zip(&sims)
                .map(|(r, (v, t))| RateMape {
                    rate: r.rate,
                    mape_v: mape(&r.voltage, v),
                    mape_t: mape(&r.temp, t),
                })
                .collect();
            let j = per_rate.iter().map(|m| m.mape_v + m.mape_t).sum::<f64>() / per_rate.len() as f64;
            if j.is_finite() {
                (j, per_rate, false)
            } else {
                (PENALTY, Vec::new(), true)
            }
        }
        Err(e) => {
            log::debug!("objective evaluation failed: {e}");
            (PENALTY, Vec::new(), true)
        }
    }
}

/// Latin hypercube in `[0,1]^d`.
pub fn lhs_init(d: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts = vec![vec![0.0; d]; n];
    for j in 0..d {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        for (i, p) in pts.iter_mut().enumerate() {
            let u: f64 = rng.random();
            p[j] = (perm[i] as f64 + u) / n as f64;
        }
    }
    pts
}

/// Matérn-5/2 correlation at distance `r`.
pub fn matern52(r: f64, lengthscale: f64) -> f64 {
    let s = 5f64.sqrt() * r / lengthscale;
    (1.0 + s + s * s / 3.0) * (-s).exp()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Zero-mean GP on standardised targets with unit signal variance.
#[derive(Debug, Clone)]
pub struct GpSurrogate {
    pub x: Vec<Vec<f64>>,
    /// Standardised targets.
    pub y: Vec<f64>,
    pub y_mean: f64,
    pub y_std: f64,
    pub lengthscale: f64,
    pub nugget: f64,
    pub log_marginal_likelihood: f64,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
}

struct Fit {
    nugget: f64,
    lml: f64,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
}

fn fit_one(x: &[Vec<f64>], y: &DVector<f64>, lengthscale: f64) -> Result<Fit, CalibError> {
    let n = x.len();
    let base = DMatrix::from_fn(n, n, |i, j| matern52(distance(&x[i], &x[j]), lengthscale));
    let mut nugget = NUGGET;
    loop {
        let mut k = base.clone();
        for i in 0..n {
            k[(i, i)] += nugget;
        }
        if let Some(chol) = Cholesky::new(k) {
            let alpha = chol.solve(y);
            let log_det: f64 = chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            let lml = -0.5 * y.dot(&alpha) - log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
            return Ok(Fit {
                nugget,
                lml,
                chol,
                alpha,
            });
        }
        nugget *= 10.0;
        if nugget > MAX_NUGGET * (1.0 + 1e-9) {
            return Err(CalibError::Gp(format!(
                "kernel matrix not positive definite (lengthscale {lengthscale}, nugget up to {MAX_NUGGET})"
            )));
        }
    }
}

impl GpSurrogate {
    /// Fits with the lengthscale from [`LENGTHSCALE_GRID`] maximising the
    /// marginal likelihood (first on ties).
    pub fn fit(x: &[Vec<f64>], y_raw: &[f64]) -> Result<Self, CalibError> {
        Self::fit_with_grid(x, y_raw, &LENGTHSCALE_GRID)
    }

    pub fn fit_with_grid(x: &[Vec<f64>], y_raw: &[f64], grid: &[f64]) -> Result<Self, CalibError> {
        if x.len() < 2 || x.len() != y_raw.len() {
            return Err(CalibError::Gp(format!(
                "need at least 2 matching points, got {} inputs and {} targets",
                x.len(),
                y_raw.len()
            )));
        }
        let n = y_raw.len() as f64;
        let y_mean = y_raw.iter().sum::<f64>() / n;
        let var = y_raw.iter().map(|v| (v - y_mean).powi(2)).sum::<f64>() / n;
        let y_std = if var > 0.0 { var.sqrt() } else { 1.0 };
        let y: Vec<f64> = y_raw.iter().map(|v| (v - y_mean) / y_std).collect();
        let yv = DVector::from_vec(y.clone());
        let mut best: Option<(f64, Fit)> = None;
        for &l in grid {
            let fit = fit_one(x, &yv, l)?;
            if best.as_ref().is_none_or(|(_, b)| fit.lml > b.lml) {
                best = Some((l, fit));
            }
        }
        let (lengthscale, fit) = best.expect("non-empty grid");
        Ok(Self {
            x: x.to_vec(),
            y,
            y_mean,
            y_std,
            lengthscale,
            nugget: fit.nugget,
            log_marginal_likelihood: fit.lml,
            chol: fit.chol,
            alpha: fit.alpha,
        })
    }

    /// Log marginal likelihood of the data at an arbitrary lengthscale.
    pub fn log_marginal_likelihood_at(&self, lengthscale: f64) -> Result<f64, CalibError> {
        Ok(fit_one(&self.x, &DVector::from_vec(self.y.clone()), lengthscale)?.lml)
    }

    pub fn standardize(&self, y: f64) -> f64 {
        (y - self.y_mean) / self.y_std
    }

    /// Posterior mean and variance (standardised units).
    pub fn predict(&self, x: &[f64]) -> (f64, f64) {
        let k = DVector::from_iterator(
            self.x.len(),
            self.x.iter().map(|xi| matern52(distance(xi, x), self.lengthscale)),
        );
        let mean = k.dot(&self.alpha);
        let v = self.chol.l_dirty().solve_lower_triangular(&k).expect("non-singular factor");
        let var = 1.0 - v.dot(&v);
        (mean, if var < 0.0 { 0.0 } else { var })
    }
}

/// Minimisation expected improvement.
pub fn expected_improvement(mean: f64, variance: f64, best: f64) -> f64 {
    let delta = best - mean;
    let sigma = variance.max(0.0).sqrt();
    if sigma == 0.0 {
        return delta.max(0.0);
    }
    let z = delta / sigma;
    let n = Normal::standard();
    (delta * n.cdf(z) + sigma * n.pdf(z)).max(0.0)
}

/// Candidate points for one proposal: uniform draws followed by Gaussian
/// perturbations of the incumbent.
pub fn candidates(d: usize, incumbent: &[f64], seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<Vec<f64>> = (0..N_UNIFORM)
        .map(|_| (0..d).map(|_| rng.random::<f64>()).collect())
        .collect();
    for _ in 0..N_LOCAL {
        out.push(
            incumbent
                .iter()
                .map(|&c| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (c + LOCAL_SIGMA * z).clamp(0.0, 1.0)
                })
                .collect(),
        );
    }
    out
}

/// Candidate with the largest EI; ties go to the lowest index.
pub fn propose_next(g: &GpSurrogate, best: f64, incumbent: &[f64], seed: u64) -> Vec<f64> {
    let cands = candidates(incumbent.len(), incumbent, seed);
    let mut best_idx = 0;
    let mut best_ei = f64::NEG_INFINITY;
    for (i, c) in cands.iter().enumerate() {
        let (m, v) = g.predict(c);
        let ei = expected_improvement(m, v, best);
        if ei > best_ei {
            best_ei = ei;
            best_idx = i;
        }
    }
    cands.into_iter().nth(best_idx).expect("non-empty")
}

#[derive(Debug, Clone)]
pub struct Calibration {
    pub best: EvaluationRecord,
    pub history: Vec<EvaluationRecord>,
}

impl Calibration {
    /// Running minimum of J.
    pub fn best_so_far(&self) -> Vec<f64> {
        let mut b = f64::INFINITY;
        self.history
            .iter()
            .map(|r| {
                b = b.min(r.j);
                b
            })
            .collect()
    }
}

/// Calibrates the space's parameters of `file.params` against `reference`.
/// The surrogate models `ln J`.
pub fn calibrate(
    space: &ParameterSpace,
    file: &ParamFile,
    reference: &[RateReference],
    exp: &Experiment,
    budget: usize,
    seed: u64,
) -> Result<Calibration, CalibError> {
    space.validate()?;
    if reference.is_empty() {
        return Err(CalibError::Reference("no reference rates".into()));
    }
    let d = space.dim();
    let n0 = 2 * d;
    if budget < n0 {
        return Err(CalibError::Budget { budget, min: n0, dim: d });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let evaluate = |x: &Vec<f64>| -> Result<EvaluationRecord, CalibError> {
        let theta = space.decode(&file.params, x);
        let (j, per_rate, failed) = objective(file, &theta, reference, exp);
        Ok(EvaluationRecord {
            x_unit: x.clone(),
            theta,
            j,
            per_rate,
            failed,
        })
    };
    let init = lhs_init(d, n0, rng.random());
    let mut history = parallel_map(&init, evaluate)?;
    log::info!(
        "initial design: best J = {:.4}",
        history.iter().map(|r| r.j).fold(f64::INFINITY, f64::min)
    );
    while history.len() < budget {
        let xs: Vec<Vec<f64>> = history.iter().map(|r| r.x_unit.clone()).collect();
        let ys: Vec<f64> = history.iter().map(|r| log_objective(r.j)).collect();
        let g = GpSurrogate::fit(&xs, &ys)?;
        let inc = argmin(&history);
        let best = g.standardize(log_objective(history[inc].j));
        let x = propose_next(&g, best, &history[inc].x_unit, rng.random());
        let rec = evaluate(&x)?;
        log::info!(
            "iter {:3}: J = {:.4} (best {:.4}, lengthscale {})",
            history.len(),
            rec.j,
            rec.j.min(history[inc].j),
            g.lengthscale
        );
        history.push(rec);
    }
    if history.iter().all(|r| r.failed) {
        return Err(CalibError::AllFailed(history.len()));
    }
    let best = history[argmin(&history)].clone();
    Ok(Calibration { best, history })
}

/// Surrogate target; floored so an exact fit stays finite.
fn log_objective(j: f64) -> f64 {
    j.max(1e-12).ln()
}

fn argmin(h: &[EvaluationRecord]) -> usize {
    let mut k = 0;
    for (i, r) in h.iter().enumerate() {
        if r.j < h[k].j {
            k = i;
        }
    }
    k
}

/// `iter,J,mape_v_<rate>,mape_t_<rate>,…,best_so_far,failed,<parameters>`.
pub fn write_history<W: Write>(
    out: &mut W,
    cal: &Calibration,
    space: &ParameterSpace,
    rates: &[f64],
    comment: Option<&str>,
) -> std::io::Result<()> {
    if let Some(c) = comment {
        out.write_all(c.as_bytes())?;
    }
    let mut header = vec!["iter".to_string(), "J".into()];
    for &r in rates {
        header.push(format!("mape_v_{}", rate_label(r)));
        header.push(format!("mape_t_{}", rate_label(r)));
    }
    header.push("best_so_far".into());
    header.push("failed".into());
    header.extend(space.entries.iter().map(|e| e.name.clone()));
    writeln!(out, "{}", header.join(","))?;
    for (i, (rec, best)) in cal.history.iter().zip(cal.best_so_far()).enumerate() {
        write!(out, "{i},{:.8}", rec.j)?;
        for k in 0..rates.len() {
            match rec.per_rate.get(k) {
                Some(m) => write!(out, ",{:.8},{:.8}", m.mape_v, m.mape_t)?,
                None => write!(out, ",,")?,
            }
        }
        write!(out, ",{best:.8},{}", u8::from(rec.failed))?;
        for e in &space.entries {
            write!(out, ",{:.10e}", rec.theta.get(&e.name).expect("validated"))?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Overlay rows `rate,t_s,v_ref,v_sim,temp_ref_c,temp_sim_c` for the given parameters.
pub fn write_overlay<W: Write>(
    out: &mut W,
    file: &ParamFile,
    theta: &CellParameters,
    reference: &[RateReference],
    exp: &Experiment,
    comment: Option<&str>,
) -> Result<(), String> {
    let sims = simulate_on_reference(file, theta, reference, exp)?;
    let io = |e: std::io::Error| e.to_string();
    if let Some(c) = comment {
        out.write_all(c.as_bytes()).map_err(io)?;
    }
    writeln!(out, "rate,t_s,v_ref,v_sim,temp_ref_c,temp_sim_c").map_err(io)?;
    for (r, (v, t)) in reference.iter().zip(&sims) {
        for k in 0..r.tau.len() {
            writeln!(
                out,
                "{:.4},{:.6},{:.6},{:.6},{:.6},{:.6}",
                r.rate,
                r.tau[k],
                r.voltage[k],
                v[k],
                r.temp[k] - 273.15,
                t[k] - 273.15
            )
            .map_err(io)?;
        }
    }
    Ok(())
}

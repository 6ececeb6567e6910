//! Prediction and uncertainty tables, summary metrics and the noise sweep.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dagmm::{DagmmError, DagmmModel, RowScore};
use crate::dataio::CycleFeatures;
use crate::degrade::family_of;
use crate::metrics::{mape, median, spearman};
use crate::pinn::{PinnError, SohModel};

pub const PREDICTIONS_HEADER: &str = "cell_id,cycle,soh_pred";
pub const SCORES_HEADER: &str = "cell_id,cycle,energy,energy_percentile";
/// Standard deviations of the injected noise, in standardised units.
pub const NOISE_LEVELS: [f64; 5] = [0.0, 0.1, 0.3, 0.5, 1.0];

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("{path}: {reason}")]
    Table { path: String, reason: String },
    #[error("{0}")]
    Join(String),
    #[error(transparent)]
    Pinn(#[from] PinnError),
    #[error(transparent)]
    Dagmm(#[from] DagmmError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub cell_id: String,
    pub cycle: u32,
    pub soh_pred: f64,
    pub soh_true: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub cell_id: String,
    pub cycle: u32,
    pub energy: f64,
    pub percentile: f64,
}

/// Writes `cell_id,cycle,soh_pred[,soh_true]`; the truth column appears when
/// every row is labeled.
pub fn write_predictions<W: Write>(
    out: &mut W,
    rows: &[CycleFeatures],
    pred: &[f64],
    comment: Option<&str>,
) -> std::io::Result<()> {
    let labeled = !rows.is_empty() && rows.iter().all(|r| r.soh.is_some());
    if let Some(c) = comment {
        out.write_all(c.as_bytes())?;
    }
    writeln!(out, "{PREDICTIONS_HEADER}{}", if labeled { ",soh_true" } else { "" })?;
    for (r, p) in rows.iter().zip(pred) {
        write!(out, "{},{},{p:.10}", r.cell_id, r.cycle)?;
        if labeled {
            write!(out, ",{:.10}", r.soh.expect("checked"))?;
        }
        writeln!(out)?;
    }
    Ok(())
}

pub fn write_scores<W: Write>(
    out: &mut W,
    rows: &[CycleFeatures],
    scores: &[RowScore],
    comment: Option<&str>,
) -> std::io::Result<()> {
    if let Some(c) = comment {
        out.write_all(c.as_bytes())?;
    }
    writeln!(out, "{SCORES_HEADER}")?;
    for (r, s) in rows.iter().zip(scores) {
        writeln!(out, "{},{},{:.10e},{:.4}", r.cell_id, r.cycle, s.energy, s.percentile)?;
    }
    Ok(())
}

fn table<R: Read>(input: R, name: &str, required: &[&str]) -> Result<(Vec<usize>, Option<usize>, Vec<csv::StringRecord>), ReportError> {
    let err = |reason: String| ReportError::Table {
        path: name.into(),
        reason,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(input);
    let header = rdr.headers().map_err(|e| err(e.to_string()))?.clone();
    let idx = required
        .iter()
        .map(|c| {
            header
                .iter()
                .position(|h| h == *c)
                .ok_or_else(|| err(format!("missing column `{c}`")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let optional = header.iter().position(|h| h == "soh_true");
    let records = rdr
        .records()
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| err(e.to_string()))?;
    Ok((idx, optional, records))
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, name: &str) -> Result<T, ReportError> {
    rec[i].parse().map_err(|_| ReportError::Table {
        path: name.into(),
        reason: format!(
            "line {}: unparsable `{}`",
            rec.position().map_or(0, |p| p.line()),
            &rec[i]
        ),
    })
}

pub fn read_predictions<R: Read>(input: R, name: &str) -> Result<Vec<Prediction>, ReportError> {
    let (idx, truth, recs) = table(input, name, &["cell_id", "cycle", "soh_pred"])?;
    recs.iter()
        .map(|r| {
            Ok(Prediction {
                cell_id: r[idx[0]].to_string(),
                cycle: field(r, idx[1], name)?,
                soh_pred: field(r, idx[2], name)?,
                soh_true: truth.map(|t| field(r, t, name)).transpose()?,
            })
        })
        .collect()
}

pub fn read_scores<R: Read>(input: R, name: &str) -> Result<Vec<ScoreRow>, ReportError> {
    let (idx, _, recs) = table(input, name, &["cell_id", "cycle", "energy", "energy_percentile"])?;
    recs.iter()
        .map(|r| {
            Ok(ScoreRow {
                cell_id: r[idx[0]].to_string(),
                cycle: field(r, idx[1], name)?,
                energy: field(r, idx[2], name)?,
                percentile: field(r, idx[3], name)?,
            })
        })
        .collect()
}

fn open(path: &Path) -> Result<std::io::BufReader<std::fs::File>, ReportError> {
    std::fs::File::open(path)
        .map(std::io::BufReader::new)
        .map_err(|e| ReportError::Table {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
}

pub fn load_predictions(path: &Path) -> Result<Vec<Prediction>, ReportError> {
    read_predictions(open(path)?, &path.display().to_string())
}

pub fn load_scores(path: &Path) -> Result<Vec<ScoreRow>, ReportError> {
    read_scores(open(path)?, &path.display().to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetrics {
    pub mape_overall: f64,
    pub mape_per_family: BTreeMap<String, f64>,
    /// Rank correlation of energy with absolute SOH error.
    pub spearman_energy_vs_error: Option<f64>,
    pub rows: usize,
}

/// Metrics over labeled predictions, joined with scores on `(cell_id, cycle)`.
pub fn build_metrics(pred: &[Prediction], scores: Option<&[ScoreRow]>) -> Result<ReportMetrics, ReportError> {
    if pred.is_empty() {
        return Err(ReportError::Join("no predictions".into()));
    }
    let truth: Vec<f64> = pred
        .iter()
        .map(|p| {
            p.soh_true
                .ok_or_else(|| ReportError::Join(format!("{} cycle {} has no soh_true", p.cell_id, p.cycle)))
        })
        .collect::<Result<_, _>>()?;
    let est: Vec<f64> = pred.iter().map(|p| p.soh_pred).collect();
    let mut fam: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for ((p, t), e) in pred.iter().zip(&truth).zip(&est) {
        let f = fam.entry(family_of(&p.cell_id).to_string()).or_default();
        f.0.push(*t);
        f.1.push(*e);
    }
    let spearman_energy_vs_error = match scores {
        None => None,
        Some(s) => {
            let by_key: HashMap<(&str, u32), f64> = s.iter().map(|r| ((r.cell_id.as_str(), r.cycle), r.energy)).collect();
            let mut energy = Vec::with_capacity(pred.len());
            let mut err = Vec::with_capacity(pred.len());
            for ((p, t), e) in pred.iter().zip(&truth).zip(&est) {
                let en = by_key
                    .get(&(p.cell_id.as_str(), p.cycle))
                    .ok_or_else(|| ReportError::Join(format!("no energy for {} cycle {}", p.cell_id, p.cycle)))?;
                energy.push(*en);
                err.push((t - e).abs());
            }
            Some(spearman(&energy, &err))
        }
    };
    Ok(ReportMetrics {
        mape_overall: mape(&truth, &est),
        mape_per_family: fam.into_iter().map(|(k, (t, e))| (k, mape(&t, &e))).collect(),
        spearman_energy_vs_error,
        rows: pred.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoisePoint {
    pub sigma: f64,
    pub median_abs_error: f64,
    pub mean_abs_error: f64,
    pub median_energy: f64,
}

/// Outcome of a noise-injection sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSweep {
    pub points: Vec<NoisePoint>,
    /// Per-row `(sigma, |error|, energy)` across all levels.
    pub rows: Vec<(f64, f64, f64)>,
}

impl NoiseSweep {
    /// Rank correlation of energy with absolute error, pooled across levels.
    pub fn spearman(&self) -> f64 {
        let err: Vec<f64> = self.rows.iter().map(|r| r.1).collect();
        let en: Vec<f64> = self.rows.iter().map(|r| r.2).collect();
        spearman(&en, &err)
    }

    pub fn median_energy_non_decreasing(&self) -> bool {
        self.points.windows(2).all(|w| w[1].median_energy >= w[0].median_energy)
    }
}

/// Adds Gaussian noise of each level to the standardised labeled rows and
/// records SOH error and energy. Levels are drawn in order from one stream.
pub fn noise_sweep(
    soh: &SohModel,
    uq: &DagmmModel,
    rows: &[CycleFeatures],
    sigmas: &[f64],
    seed: u64,
) -> Result<NoiseSweep, ReportError> {
    let truth: Vec<f64> = rows
        .iter()
        .map(|r| r.soh.ok_or_else(|| ReportError::Join(format!("{} cycle {} has no label", r.cell_id, r.cycle))))
        .collect::<Result<_, _>>()?;
    let norm = &soh.normalizer;
    let x0 = Array2::from_shape_vec((rows.len(), norm.dim()), norm.apply_rows(rows).concat()).expect("shape");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut points = Vec::with_capacity(sigmas.len());
    let mut all = Vec::with_capacity(rows.len() * sigmas.len());
    for &s in sigmas {
        let x = x0.mapv(|v| v + s * unit.sample(&mut rng));
        let pred = soh.forward_batch(&x)?;
        let scores = uq.score_standardized(&x)?;
        let err: Vec<f64> = pred.iter().zip(&truth).map(|(p, t)| (p - t).abs()).collect();
        let en: Vec<f64> = scores.iter().map(|r| r.energy).collect();
        points.push(NoisePoint {
            sigma: s,
            median_abs_error: median(&err),
            mean_abs_error: err.iter().sum::<f64>() / err.len().max(1) as f64,
            median_energy: median(&en),
        });
        all.extend(err.iter().zip(&en).map(|(e, n)| (s, *e, *n)));
    }
    Ok(NoiseSweep { points, rows: all })
}

//! Telemetry ingestion, per-cycle features, normalisation and cell-wise splits.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::degrade::{family_of, fleet_cells, parallel_map, simulate_cell, DegradeError, FleetConfig};
use crate::sim::ParamFile;
use crate::protocol::{CycleRecord, CHARGE_CUTOFF, TELEMETRY_HEADER};

pub const N_FEATURES: usize = 13;

pub const FEATURE_NAMES: [&str; N_FEATURES] = [
    "discharge_capacity",
    "discharge_energy",
    "mean_discharge_v",
    "v_at_half_capacity",
    "discharge_duration",
    "t_max",
    "t_mean",
    "t_rise",
    "r_proxy",
    "cv_duration",
    "charge_capacity",
    "coulombic_eff",
    "cycle_norm",
];

/// Index of `cycle_norm` in the feature vector.
pub const CYCLE_NORM: usize = 12;
/// Band around the CV voltage counted as constant-voltage time (V).
pub const CV_BAND: f64 = 5e-3;
pub const MAX_COULOMBIC_EFF: f64 = 1.02;

/// At most this many offending lines are listed in an error.
const MAX_REPORTED: usize = 20;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: missing column `{column}`")]
    MissingColumn { path: String, column: String },
    #[error("{path}: invalid rows:\n{}", format_lines(.lines))]
    Malformed { path: String, lines: Vec<(u64, String)> },
    #[error("cell {cell_id} cycle {cycle}: {reason}")]
    Feature { cell_id: String, cycle: u32, reason: String },
    #[error("split: {0}")]
    Split(String),
    #[error("normalizer: {0}")]
    Normalizer(String),
    #[error("expected {expected} features, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error(transparent)]
    Fleet(#[from] DegradeError),
}

fn format_lines(lines: &[(u64, String)]) -> String {
    lines
        .iter()
        .map(|(l, m)| format!("  line {l}: {m}"))
        .collect::<Vec<_>>()
        .join("\n")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Column indices of `names` in a header row.
fn locate(path: &str, header: &csv::StringRecord, names: &[&str]) -> Result<Vec<usize>, DataError> {
    names
        .iter()
        .map(|&n| {
            header
                .iter()
                .position(|h| h == n)
                .ok_or_else(|| DataError::MissingColumn {
                    path: path.into(),
                    column: n.into(),
                })
        })
        .collect()
}

fn csv_reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(input)
}

fn parse_num(field: &str, name: &str) -> Result<f64, String> {
    match field.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        Ok(v) => Err(format!("non-finite {name} `{v}`")),
        Err(_) => Err(format!("unparsable {name} `{field}`")),
    }
}

/// Reads a telemetry CSV into per-(cell, cycle) records sorted by time.
/// Groups are ordered by cell id then cycle.
pub fn load_telemetry(path: &Path) -> Result<Vec<CycleRecord>, DataError> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    read_telemetry(std::io::BufReader::new(file), &path.display().to_string())
}

/// [`load_telemetry`] over any reader; `name` labels error messages.
pub fn read_telemetry<R: Read>(input: R, name: &str) -> Result<Vec<CycleRecord>, DataError> {
    let mut rdr = csv_reader(input);
    let header = rdr
        .headers()
        .map_err(|e| DataError::Malformed {
            path: name.into(),
            lines: vec![(1, e.to_string())],
        })?
        .clone();
    let columns: Vec<&str> = TELEMETRY_HEADER.split(',').collect();
    let idx = locate(name, &header, &columns)?;

    // (t, I, V, T, line) per group
    type Row = (f64, f64, f64, f64, u64);
    let mut groups: BTreeMap<(String, u32), Vec<Row>> = BTreeMap::new();
    let mut bad: Vec<(u64, String)> = Vec::new();
    let mut rec = csv::StringRecord::new();
    loop {
        match rdr.read_record(&mut rec) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                bad.push((line, e.to_string()));
                if bad.len() >= MAX_REPORTED {
                    break;
                }
                continue;
            }
        }
        let line = rec.position().map_or(0, |p| p.line());
        let parsed = (|| {
            let cell = rec.get(idx[0]).ok_or("short row")?.to_string();
            let cycle: u32 = rec
                .get(idx[1])
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| format!("unparsable cycle `{}`", rec.get(idx[1]).unwrap_or("")))?;
            let mut v = [0.0; 4];
            for (k, slot) in v.iter_mut().enumerate() {
                let field = rec.get(idx[k + 2]).ok_or("short row")?;
                *slot = parse_num(field, columns[k + 2])?;
            }
            Ok::<_, String>((cell, cycle, v))
        })();
        match parsed {
            Ok((cell, cycle, [t, i, v, temp])) => {
                groups.entry((cell, cycle)).or_default().push((t, i, v, temp, line))
            }
            Err(m) => {
                bad.push((line, m));
                if bad.len() >= MAX_REPORTED {
                    break;
                }
            }
        }
    }
    if bad.is_empty() {
        for ((cell, cycle), rows) in groups.iter_mut() {
            rows.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.4.cmp(&b.4)));
            for w in rows.windows(2) {
                if w[1].0 <= w[0].0 {
                    bad.push((
                        w[1].4,
                        format!(
                            "time {} not strictly increasing in cell {cell} cycle {cycle} (also line {})",
                            w[1].0, w[0].4
                        ),
                    ));
                }
            }
        }
    }
    if !bad.is_empty() {
        bad.sort();
        bad.truncate(MAX_REPORTED);
        return Err(DataError::Malformed {
            path: name.into(),
            lines: bad,
        });
    }
    Ok(groups
        .into_iter()
        .map(|((cell, cycle), rows)| {
            let mut r = CycleRecord::new(cell, cycle);
            for (t, i, v, temp, _) in rows {
                r.push_row(t, i, v, temp);
            }
            r
        })
        .collect())
}

/// One row of the feature table.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleFeatures {
    pub cell_id: String,
    pub cycle: u32,
    pub values: [f64; N_FEATURES],
    pub soh: Option<f64>,
}

/// Sample durations: the gap to the previous sample, the first sample taking
/// the following gap.
fn durations(t: &[f64]) -> Vec<f64> {
    let n = t.len();
    let mut dt = vec![0.0; n];
    for k in 1..n {
        dt[k] = t[k] - t[k - 1];
    }
    if n >= 2 {
        dt[0] = dt[1];
    }
    dt
}

/// Per-cycle features; `max_cycle` scales `cycle_norm`.
pub fn extract_features(rec: &CycleRecord, max_cycle: u32) -> Result<CycleFeatures, DataError> {
    let fail = |reason: &str| DataError::Feature {
        cell_id: rec.cell_id.clone(),
        cycle: rec.cycle,
        reason: reason.into(),
    };
    let (t, cur, volt, temp) = (&rec.t, &rec.current, &rec.voltage, &rec.temp_c);
    let dt = durations(t);

    let mut q_dis = 0.0;
    let mut e_dis = 0.0;
    let mut v_time = 0.0;
    let mut t_dis = 0.0;
    let mut q_ch = 0.0;
    let mut cv = 0.0;
    let mut temp_int = 0.0;
    let mut cum: Vec<(f64, f64)> = Vec::new();
    let mut onset: Option<usize> = None;
    for k in 0..t.len() {
        let (i, v, h) = (cur[k], volt[k], dt[k]);
        temp_int += temp[k] * h;
        if i > 0.0 {
            if onset.is_none() {
                onset = Some(k);
            }
            q_dis += i * h;
            e_dis += i * v * h;
            v_time += v * h;
            t_dis += h;
            cum.push((q_dis / 3600.0, v));
        } else if i < 0.0 {
            q_ch += -i * h;
            if k > 0 && (v - CHARGE_CUTOFF).abs() < CV_BAND && i.abs() < cur[k - 1].abs() {
                cv += h;
            }
        }
    }
    let onset = onset.ok_or_else(|| fail("no discharge segment"))?;
    let (q_dis, e_dis, q_ch) = (q_dis / 3600.0, e_dis / 3600.0, q_ch / 3600.0);
    if !(q_dis > 0.0 && t_dis > 0.0) {
        return Err(fail("discharge segment has zero duration"));
    }

    let half = 0.5 * q_dis;
    let v_half = match cum.iter().position(|&(q, _)| q >= half) {
        Some(0) | None => cum[0].1,
        Some(k) => {
            let (q0, v0) = cum[k - 1];
            let (q1, v1) = cum[k];
            v0 + (v1 - v0) * (half - q0) / (q1 - q0)
        }
    };
    let r_proxy = if onset > 0 {
        (volt[onset - 1] - volt[onset]) / (cur[onset] - cur[onset - 1])
    } else {
        0.0
    };
    let total_time: f64 = dt.iter().sum();
    let t_max = temp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let t_mean = if total_time > 0.0 {
        temp_int / total_time
    } else {
        temp[0]
    };
    let ce = if q_ch > 0.0 {
        (q_dis / q_ch).min(MAX_COULOMBIC_EFF)
    } else {
        1.0
    };
    let values = [
        q_dis,
        e_dis,
        v_time / t_dis,
        v_half,
        t_dis,
        t_max,
        t_mean,
        t_max - temp[0],
        r_proxy,
        cv,
        q_ch,
        ce,
        f64::from(rec.cycle) / f64::from(max_cycle.max(1)),
    ];
    if let Some(k) = values.iter().position(|v| !v.is_finite()) {
        return Err(fail(&format!("non-finite {}", FEATURE_NAMES[k])));
    }
    Ok(CycleFeatures {
        cell_id: rec.cell_id.clone(),
        cycle: rec.cycle,
        values,
        soh: None,
    })
}

/// Labels keyed by (cell_id, cycle).
pub type Labels = HashMap<(String, u32), f64>;

/// Simulates a fleet in memory and returns its labeled feature rows, ordered
/// by cell then cycle.
pub fn fleet_features(base: &ParamFile, cfg: &FleetConfig, seed: u64) -> Result<Vec<CycleFeatures>, DataError> {
    cfg.validate()?;
    let cells = fleet_cells(cfg, seed);
    let per_cell = parallel_map(&cells, |cell| {
        let mut rows = Vec::with_capacity(cfg.cycles as usize);
        let mut failure = None;
        simulate_cell(base, cfg, cell, |rec, soh| {
            match extract_features(rec, cfg.cycles) {
                Ok(mut f) => {
                    f.soh = Some(soh);
                    rows.push(f);
                }
                Err(e) => {
                    failure.get_or_insert(e);
                }
            }
            Ok(())
        })?;
        match failure {
            Some(e) => Err(e),
            None => Ok(rows),
        }
    })?;
    Ok(per_cell.into_iter().flatten().collect())
}

pub fn load_labels(path: &Path) -> Result<Labels, DataError> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let name = path.display().to_string();
    let mut rdr = csv_reader(std::io::BufReader::new(file));
    let header = rdr.headers().map_err(|e| DataError::Malformed {
        path: name.clone(),
        lines: vec![(1, e.to_string())],
    })?;
    let idx = locate(&name, header, &["cell_id", "cycle", "soh_true"])?;
    let mut out = Labels::new();
    let mut bad = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| DataError::Malformed {
            path: name.clone(),
            lines: vec![(e.position().map_or(0, |p| p.line()), e.to_string())],
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let cycle = rec[idx[1]].parse::<u32>();
        let soh = parse_num(&rec[idx[2]], "soh_true");
        match (cycle, soh) {
            (Ok(c), Ok(s)) => {
                out.insert((rec[idx[0]].to_string(), c), s);
            }
            (Err(_), _) => bad.push((line, format!("unparsable cycle `{}`", &rec[idx[1]]))),
            (_, Err(m)) => bad.push((line, m)),
        }
    }
    if bad.is_empty() {
        Ok(out)
    } else {
        bad.truncate(MAX_REPORTED);
        Err(DataError::Malformed { path: name, lines: bad })
    }
}

/// Attaches labels; rows without a label keep `soh = None`.
pub fn join_labels(rows: &mut [CycleFeatures], labels: &Labels) {
    for r in rows {
        r.soh = labels.get(&(r.cell_id.clone(), r.cycle)).copied();
    }
}

pub fn features_header(with_soh: bool) -> String {
    let mut h = format!("cell_id,cycle,{}", FEATURE_NAMES.join(","));
    if with_soh {
        h.push_str(",soh");
    }
    h
}

/// Writes the features table; the `soh` column is present when every row is labeled.
pub fn write_features<W: Write>(out: &mut W, rows: &[CycleFeatures], comment: Option<&str>) -> std::io::Result<()> {
    let with_soh = !rows.is_empty() && rows.iter().all(|r| r.soh.is_some());
    if let Some(c) = comment {
        out.write_all(c.as_bytes())?;
    }
    writeln!(out, "{}", features_header(with_soh))?;
    for r in rows {
        write!(out, "{},{}", r.cell_id, r.cycle)?;
        for v in &r.values {
            write!(out, ",{v:.10e}")?;
        }
        if with_soh {
            write!(out, ",{:.10}", r.soh.expect("checked"))?;
        }
        writeln!(out)?;
    }
    Ok(())
}

pub fn load_features(path: &Path) -> Result<Vec<CycleFeatures>, DataError> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    read_features(std::io::BufReader::new(file), &path.display().to_string())
}

pub fn read_features<R: Read>(input: R, name: &str) -> Result<Vec<CycleFeatures>, DataError> {
    let mut rdr = csv_reader(input);
    let header = rdr
        .headers()
        .map_err(|e| DataError::Malformed {
            path: name.into(),
            lines: vec![(1, e.to_string())],
        })?
        .clone();
    let mut cols = vec!["cell_id", "cycle"];
    cols.extend(FEATURE_NAMES);
    let idx = locate(name, &header, &cols)?;
    let soh_idx = header.iter().position(|h| h == "soh");
    let mut rows = Vec::new();
    let mut bad = Vec::new();
    for rec in rdr.records() {
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                bad.push((e.position().map_or(0, |p| p.line()), e.to_string()));
                continue;
            }
        };
        let line = rec.position().map_or(0, |p| p.line());
        let parsed = (|| {
            let cycle: u32 = rec[idx[1]]
                .parse()
                .map_err(|_| format!("unparsable cycle `{}`", &rec[idx[1]]))?;
            let mut values = [0.0; N_FEATURES];
            for (k, v) in values.iter_mut().enumerate() {
                *v = parse_num(&rec[idx[k + 2]], FEATURE_NAMES[k])?;
            }
            let soh = match soh_idx {
                Some(i) if !rec[i].is_empty() => Some(parse_num(&rec[i], "soh")?),
                _ => None,
            };
            Ok::<_, String>(CycleFeatures {
                cell_id: rec[idx[0]].to_string(),
                cycle,
                values,
                soh,
            })
        })();
        match parsed {
            Ok(r) => rows.push(r),
            Err(m) => bad.push((line, m)),
        }
    }
    if bad.is_empty() {
        Ok(rows)
    } else {
        bad.truncate(MAX_REPORTED);
        Err(DataError::Malformed {
            path: name.into(),
            lines: bad,
        })
    }
}

/// Whole-cell train/test partition stratified by family. Each family sends
/// `round(test_fraction · n)` cells (at least one, at most n − 1) to the test
/// split. Row order is preserved within each split.
pub fn split_by_cell(
    rows: &[CycleFeatures],
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<CycleFeatures>, Vec<CycleFeatures>), DataError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(DataError::Split(format!("test fraction {test_fraction} outside (0, 1)")));
    }
    let mut families: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for r in rows {
        families.entry(family_of(&r.cell_id)).or_default().insert(&r.cell_id);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut test_cells: BTreeSet<&str> = BTreeSet::new();
    for (family, cells) in &families {
        if cells.len() < 2 {
            return Err(DataError::Split(format!(
                "family {family} has {} cell(s); at least 2 are needed",
                cells.len()
            )));
        }
        let mut ids: Vec<&str> = cells.iter().copied().collect();
        ids.shuffle(&mut rng);
        let n_test = ((test_fraction * ids.len() as f64).round() as usize).clamp(1, ids.len() - 1);
        test_cells.extend(&ids[..n_test]);
    }
    let (test, train): (Vec<_>, Vec<_>) = rows
        .iter()
        .cloned()
        .partition(|r| test_cells.contains(r.cell_id.as_str()));
    Ok((train, test))
}

/// Z-scoring with training statistics; constant features are dropped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    /// Indices into the raw feature vector that are kept.
    pub kept: Vec<usize>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub dropped: Vec<String>,
}

impl Normalizer {
    pub fn fit(train: &[CycleFeatures]) -> Result<Self, DataError> {
        if train.is_empty() {
            return Err(DataError::Normalizer("empty training set".into()));
        }
        let n = train.len() as f64;
        let mut kept = Vec::new();
        let mut mean = Vec::new();
        let mut std = Vec::new();
        let mut dropped = Vec::new();
        for j in 0..N_FEATURES {
            let m = train.iter().map(|r| r.values[j]).sum::<f64>() / n;
            let var = train.iter().map(|r| (r.values[j] - m).powi(2)).sum::<f64>() / n;
            let s = var.sqrt();
            if s > 1e-12 * m.abs().max(1.0) {
                kept.push(j);
                mean.push(m);
                std.push(s);
            } else {
                log::warn!("dropping constant feature {}", FEATURE_NAMES[j]);
                dropped.push(FEATURE_NAMES[j].to_string());
            }
        }
        if kept.is_empty() {
            return Err(DataError::Normalizer("every feature is constant".into()));
        }
        Ok(Self {
            kept,
            mean,
            std,
            dropped,
        })
    }

    pub fn dim(&self) -> usize {
        self.kept.len()
    }

    /// Position of a raw feature among the kept ones.
    pub fn position(&self, feature: usize) -> Option<usize> {
        self.kept.iter().position(|&k| k == feature)
    }

    pub fn apply(&self, raw: &[f64; N_FEATURES]) -> Vec<f64> {
        self.kept
            .iter()
            .enumerate()
            .map(|(i, &j)| (raw[j] - self.mean[i]) / self.std[i])
            .collect()
    }

    pub fn apply_rows(&self, rows: &[CycleFeatures]) -> Vec<Vec<f64>> {
        rows.iter().map(|r| self.apply(&r.values)).collect()
    }

    /// Raw values of the kept features.
    pub fn invert(&self, z: &[f64]) -> Result<Vec<f64>, DataError> {
        if z.len() != self.dim() {
            return Err(DataError::Dimension {
                expected: self.dim(),
                got: z.len(),
            });
        }
        Ok(z.iter()
            .enumerate()
            .map(|(i, v)| v * self.std[i] + self.mean[i])
            .collect())
    }
}

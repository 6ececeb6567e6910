//! Parameter-level aging and synthetic labeled fleets.
//!
//! Capacity fade follows a square-root plus linear law in the cycle count,
//! thermally accelerated on the square-root term. A cell aged by `n` cycles has
//! its cyclable lithium reduced (both stoichiometry windows shifted by the lost
//! charge) and its ohmic resistance grown linearly.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::protocol::{CsvTelemetryWriter, CycleRecord, CycleSchedule, Family, ProtocolError, Runner, DEFAULT_DT};
use crate::provenance::{comment_header, config_hash};
use crate::sim::{arrhenius_scale, CellParameters, Electrode, ParamFile, SimError, Spm, FARADAY};

pub const LABELS_HEADER: &str = "cell_id,cycle,soh_true";

#[derive(Debug, thiserror::Error)]
pub enum DegradeError {
    #[error("end of life at cycle {cycle}: {reason}")]
    EndOfLife { cycle: u32, reason: String },
    #[error("invalid degradation parameter {name} = {value}")]
    InvalidParameter { name: &'static str, value: f64 },
    #[error("invalid fleet configuration: {0}")]
    Config(String),
    #[error("cell {cell_id}: {source}")]
    Cell {
        cell_id: String,
        #[source]
        source: Box<DegradeError>,
    },
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl DegradeError {
    fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Self + '_ {
        move |source| DegradeError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradationParams {
    /// Ah per √cycle.
    pub beta_sqrt: f64,
    /// Ah per cycle.
    pub beta_lin: f64,
    /// Fractional R0 growth per cycle.
    pub gamma_r: f64,
    /// J/mol, accelerates `beta_sqrt` above the reference temperature.
    pub ea_age: f64,
    /// Lognormal cell-to-cell spread.
    pub sigma_noise: f64,
}

impl Default for DegradationParams {
    fn default() -> Self {
        Self {
            beta_sqrt: 0.012,
            beta_lin: 0.00025,
            gamma_r: 0.0005,
            ea_age: 2.0e4,
            sigma_noise: 0.15,
        }
    }
}

impl DegradationParams {
    pub fn validate(&self) -> Result<(), DegradeError> {
        for (name, value) in [
            ("beta_sqrt", self.beta_sqrt),
            ("beta_lin", self.beta_lin),
            ("gamma_r", self.gamma_r),
            ("ea_age", self.ea_age),
            ("sigma_noise", self.sigma_noise),
        ] {
            if !(value.is_finite() && value >= 0.0) {
                return Err(DegradeError::InvalidParameter { name, value });
            }
        }
        Ok(())
    }

    /// Per-cell draw: each rate coefficient multiplied by an independent
    /// median-one lognormal factor.
    pub fn perturbed<R: Rng>(&self, rng: &mut R) -> Self {
        if self.sigma_noise == 0.0 {
            return self.clone();
        }
        let ln = LogNormal::new(0.0, self.sigma_noise).expect("sigma validated");
        Self {
            beta_sqrt: self.beta_sqrt * ln.sample(rng),
            beta_lin: self.beta_lin * ln.sample(rng),
            gamma_r: self.gamma_r * ln.sample(rng),
            ..self.clone()
        }
    }
}

/// Capacity-fade SOH after `n` cycles at mean temperature `t_mean` (K).
pub fn soh_of_cycle(
    n: u32,
    d: &DegradationParams,
    t_mean: f64,
    t_ref: f64,
    q_nom: f64,
) -> Result<f64, DegradeError> {
    let nf = f64::from(n);
    let arrh = arrhenius_scale(1.0, d.ea_age, t_mean, t_ref);
    let soh = 1.0 - (d.beta_sqrt * arrh * nf.sqrt() + d.beta_lin * nf) / q_nom;
    if soh <= 0.0 {
        return Err(DegradeError::EndOfLife {
            cycle: n,
            reason: format!("SOH {soh:.4} ≤ 0"),
        });
    }
    Ok(soh)
}

/// Parameters of `base` aged by `n` cycles.
pub fn apply_degradation(
    base: &CellParameters,
    n: u32,
    d: &DegradationParams,
    t_mean: f64,
) -> Result<CellParameters, DegradeError> {
    let soh = soh_of_cycle(n, d, t_mean, base.t_ref, base.q_nom)?;
    let loss_ah = (1.0 - soh) * base.q_nom;
    let mut p = base.clone();
    let dx = |e: Electrode| loss_ah * 3600.0 / (FARADAY * p.solid_volume(e) * p.c_max(e));
    let (dxn, dxp) = (dx(Electrode::Negative), dx(Electrode::Positive));
    p.x_n_max -= dxn;
    p.x_p_max -= dxp;
    p.r0 *= 1.0 + d.gamma_r * f64::from(n);
    if p.x_n_max <= p.x_n_min || p.x_p_max <= p.x_p_min {
        return Err(DegradeError::EndOfLife {
            cycle: n,
            reason: "stoichiometry window collapsed".into(),
        });
    }
    Ok(p)
}

/// Lithium lost (mol) between SOH levels.
pub fn lithium_loss_moles(soh_from: f64, soh_to: f64, q_nom: f64) -> f64 {
    (soh_from - soh_to) * q_nom * 3600.0 / FARADAY
}

/// Fleet layout and aging model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FleetConfig {
    pub families: Vec<Family>,
    pub cells_per_family: u32,
    pub cycles: u32,
    pub degradation: DegradationParams,
    /// Ambient temperature (K).
    pub t_amb: f64,
    pub dt: f64,
}

impl FleetConfig {
    pub const MIN_CYCLES: u32 = 10;

    pub fn new(families: Vec<Family>, cells_per_family: u32, cycles: u32) -> Self {
        Self {
            families,
            cells_per_family,
            cycles,
            degradation: DegradationParams::default(),
            t_amb: 298.15,
            dt: DEFAULT_DT,
        }
    }

    pub fn validate(&self) -> Result<(), DegradeError> {
        if self.families.is_empty() || self.cells_per_family == 0 {
            return Err(DegradeError::Config("fleet has no cells".into()));
        }
        if self.cycles < Self::MIN_CYCLES {
            return Err(DegradeError::Config(format!(
                "cycles must be at least {}, got {}",
                Self::MIN_CYCLES,
                self.cycles
            )));
        }
        self.degradation.validate()
    }
}

/// One synthetic cell of a fleet.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSpec {
    pub cell_id: String,
    pub family: Family,
    pub seed: u64,
    pub degradation: DegradationParams,
}

/// `<family>-c<index>`, e.g. `R2_5-c03`.
pub fn cell_id(family: Family, index: u32) -> String {
    format!("{family}-c{index:02}")
}

/// Family prefix of a cell id.
pub fn family_of(cell_id: &str) -> &str {
    cell_id.rsplit_once('-').map_or(cell_id, |(f, _)| f)
}

/// Deterministic per-cell seeds and degradation draws.
pub fn fleet_cells(cfg: &FleetConfig, seed: u64) -> Vec<CellSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cells = Vec::new();
    for &family in &cfg.families {
        for i in 0..cfg.cells_per_family {
            let cell_seed: u64 = rng.random();
            let mut cell_rng = ChaCha8Rng::seed_from_u64(cell_seed);
            cells.push(CellSpec {
                cell_id: cell_id(family, i),
                family,
                seed: cell_rng.random(),
                degradation: cfg.degradation.perturbed(&mut cell_rng),
            });
        }
    }
    cells
}

/// Runs one cell through `cfg.cycles` cycles. Cycle 0 uses the fresh cell and
/// fixes its mean temperature for the aging law; afterwards each cycle starts
/// from the previous end state with the lithium lost since then removed.
/// `on_cycle` receives every cycle with its SOH label.
pub fn simulate_cell(
    base: &ParamFile,
    cfg: &FleetConfig,
    cell: &CellSpec,
    mut on_cycle: impl FnMut(&CycleRecord, f64) -> Result<(), DegradeError>,
) -> Result<(), DegradeError> {
    let wrap = |e: DegradeError| DegradeError::Cell {
        cell_id: cell.cell_id.clone(),
        source: Box::new(e),
    };
    let schedule = CycleSchedule::for_family(cell.family, 1, cfg.t_amb, base.params.q_nom);
    let fresh = base.simulator().map_err(|e| wrap(e.into()))?;
    let mut state = fresh.initial_state(schedule.initial_soc, cfg.t_amb);
    let mut rng = ChaCha8Rng::seed_from_u64(cell.seed);
    let mut rec = CycleRecord::new(cell.cell_id.clone(), 0);
    let mut t_mean = cfg.t_amb;
    let mut soh_prev = 1.0;
    let p0 = &base.params;
    for n in 0..cfg.cycles {
        let run = |rng: &mut ChaCha8Rng, state: &mut _, rec: &mut CycleRecord| -> Result<f64, DegradeError> {
            let soh = soh_of_cycle(n, &cell.degradation, t_mean, p0.t_ref, p0.q_nom)?;
            let params = apply_degradation(p0, n, &cell.degradation, t_mean)?;
            let spm = Spm::new(params, base.ocp.clone(), base.options.clone())?;
            if soh < soh_prev {
                let moles = lithium_loss_moles(soh_prev, soh, p0.q_nom);
                spm.remove_lithium(state, Electrode::Positive, moles)?;
            }
            let mut runner = Runner::new(&spm, cfg.dt, cfg.t_amb, rng.random());
            runner.run_cycle(state, &schedule, n, rec)?;
            Ok(soh)
        };
        rec.clear();
        rec.cycle = n;
        let soh = run(&mut rng, &mut state, &mut rec).map_err(wrap)?;
        if n == 0 && !rec.is_empty() {
            t_mean = rec.temp_c.iter().sum::<f64>() / rec.len() as f64 + 273.15;
        }
        soh_prev = soh;
        on_cycle(&rec, soh).map_err(wrap)?;
    }
    Ok(())
}

/// Maps `f` over `items` on all available cores, preserving order. The first
/// error (by item order) is returned.
pub fn parallel_map<T, U, E, F>(items: &[T], f: F) -> Result<Vec<U>, E>
where
    T: Sync,
    U: Send,
    E: Send,
    F: Fn(&T) -> Result<U, E> + Sync,
{
    let workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(items.len().max(1));
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<U, E>>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::Relaxed);
                if k >= items.len() {
                    break;
                }
                let r = f(&items[k]);
                slots.lock().expect("worker panicked")[k] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetManifest {
    pub seed: u64,
    pub config_hash: String,
    pub families: Vec<Family>,
    pub cells_per_family: u32,
    pub cycles: u32,
    /// Telemetry files relative to the output directory.
    pub files: Vec<String>,
    pub labels: String,
}

/// Hash over the base parameter file and the fleet configuration.
pub fn fleet_hash(base: &ParamFile, cfg: &FleetConfig) -> String {
    config_hash(&(base.to_toml_string(), cfg))
}

/// Writes `telemetry/<cell>.csv`, `labels.csv` and `manifest.json` under `out_dir`.
pub fn generate_fleet(
    base: &ParamFile,
    cfg: &FleetConfig,
    seed: u64,
    out_dir: &Path,
) -> Result<FleetManifest, DegradeError> {
    cfg.validate()?;
    let hash = fleet_hash(base, cfg);
    let header = comment_header(seed, &hash);
    let tele_dir = out_dir.join("telemetry");
    fs::create_dir_all(&tele_dir).map_err(DegradeError::io(&tele_dir))?;
    let cells = fleet_cells(cfg, seed);

    let labels = parallel_map(&cells, |cell| {
        let rel = format!("telemetry/{}.csv", cell.cell_id);
        let path = out_dir.join(&rel);
        let file = File::create(&path).map_err(DegradeError::io(&path))?;
        let mut w = CsvTelemetryWriter::new(BufWriter::new(file), cell.cell_id.clone(), Some(&header))
            .map_err(DegradeError::io(&path))?;
        let mut labels = Vec::with_capacity(cfg.cycles as usize);
        simulate_cell(base, cfg, cell, |rec, soh| {
            for row in rec.rows() {
                w.write_record(&row).map_err(DegradeError::io(&path))?;
            }
            labels.push((rec.cycle, soh));
            Ok(())
        })?;
        w.into_inner().map_err(DegradeError::io(&path))?;
        log::info!("{}: {} cycles written", cell.cell_id, cfg.cycles);
        Ok::<_, DegradeError>((rel, labels))
    })?;

    let labels_path = out_dir.join("labels.csv");
    let mut out = BufWriter::new(File::create(&labels_path).map_err(DegradeError::io(&labels_path))?);
    let write_labels = |out: &mut BufWriter<File>| -> std::io::Result<()> {
        out.write_all(header.as_bytes())?;
        writeln!(out, "{LABELS_HEADER}")?;
        for (cell, (_, track)) in cells.iter().zip(&labels) {
            for (n, soh) in track {
                writeln!(out, "{},{n},{soh:.8}", cell.cell_id)?;
            }
        }
        out.flush()
    };
    write_labels(&mut out).map_err(DegradeError::io(&labels_path))?;

    let manifest = FleetManifest {
        seed,
        config_hash: hash,
        families: cfg.families.clone(),
        cells_per_family: cfg.cells_per_family,
        cycles: cfg.cycles,
        files: labels.into_iter().map(|(rel, _)| rel).collect(),
        labels: "labels.csv".into(),
    };
    let manifest_path = out_dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    fs::write(&manifest_path, json + "\n").map_err(DegradeError::io(&manifest_path))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_cell_has_unit_soh() {
        let d = DegradationParams::default();
        assert_eq!(soh_of_cycle(0, &d, 310.0, 298.15, 2.0).unwrap(), 1.0);
    }

    #[test]
    fn soh_at_500_cycles() {
        let d = DegradationParams::default();
        let soh = soh_of_cycle(500, &d, 298.15, 298.15, 2.0).unwrap();
        let expected = 1.0 - (0.012 * 500f64.sqrt() + 0.125) / 2.0;
        assert!((soh - expected).abs() < 1e-14);
        assert!((soh - 0.8033).abs() < 1e-4);
    }

    #[test]
    fn end_of_life_is_reported() {
        let d = DegradationParams {
            beta_lin: 0.01,
            ..Default::default()
        };
        assert!(matches!(
            soh_of_cycle(400, &d, 298.15, 298.15, 2.0),
            Err(DegradeError::EndOfLife { cycle: 400, .. })
        ));
        let base = CellParameters::default();
        assert!(apply_degradation(&base, 150, &d, 298.15).is_ok());
        assert!(apply_degradation(&base, 199, &d, 298.15).is_err());
    }

    #[test]
    fn zero_cycles_is_identity() {
        let base = CellParameters::default();
        let aged = apply_degradation(&base, 0, &DegradationParams::default(), 305.0).unwrap();
        assert_eq!(aged, base);
    }

    #[test]
    fn resistance_growth_is_linear() {
        let base = CellParameters::default();
        let aged = apply_degradation(&base, 200, &DegradationParams::default(), 298.15).unwrap();
        assert!((aged.r0 / base.r0 - 1.1).abs() < 1e-12);
    }

    #[test]
    fn window_shift_matches_lost_charge() {
        let base = CellParameters::default();
        let d = DegradationParams::default();
        let aged = apply_degradation(&base, 300, &d, 298.15).unwrap();
        let soh = soh_of_cycle(300, &d, 298.15, 298.15, 2.0).unwrap();
        for e in [Electrode::Negative, Electrode::Positive] {
            let lost = base.window_capacity(e) - aged.window_capacity(e);
            assert!((lost - (1.0 - soh) * 2.0).abs() < 1e-9, "{e}: {lost}");
        }
    }

    #[test]
    fn cell_ids_carry_family() {
        assert_eq!(cell_id(Family::R2_5, 3), "R2_5-c03");
        assert_eq!(family_of("R2_5-c03"), "R2_5");
    }

    #[test]
    fn fleet_cells_are_seeded() {
        let cfg = FleetConfig::new(vec![Family::C2, Family::RW], 3, 10);
        let a = fleet_cells(&cfg, 9);
        assert_eq!(a, fleet_cells(&cfg, 9));
        assert_ne!(a, fleet_cells(&cfg, 10));
        assert_eq!(a.len(), 6);
        assert_ne!(a[0].degradation, a[1].degradation);
    }

    #[test]
    fn parallel_map_preserves_order() {
        let v: Vec<u32> = (0..37).collect();
        let out: Result<Vec<u32>, ()> = parallel_map(&v, |x| Ok(x * 2));
        assert_eq!(out.unwrap(), v.iter().map(|x| x * 2).collect::<Vec<_>>());
        let err: Result<Vec<u32>, u32> = parallel_map(&v, |&x| if x % 10 == 5 { Err(x) } else { Ok(x) });
        assert_eq!(err.unwrap_err(), 5);
    }
}

//! Cycler protocols: constant-current, CC-CV, rest and randomized discharge
//! steps driven through the simulator at a fixed sampling interval.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::sim::{CellState, SimError, Spm, StepOutput};

/// Exact telemetry CSV header.
pub const TELEMETRY_HEADER: &str = "cell_id,cycle,t_s,current_a,voltage_v,temp_c";
/// Cutoff voltages must lie in this band.
pub const CUTOFF_BAND: (f64, f64) = (2.0, 4.4);
pub const DEFAULT_DT: f64 = 1.0;
pub const DISCHARGE_CUTOFF: f64 = 2.5;
pub const CHARGE_CUTOFF: f64 = 4.2;
/// CV regulation tolerance (V) and iteration budget.
pub const CV_TOLERANCE: f64 = 1e-3;
pub const CV_MAX_ITER: usize = 50;
/// Cutoff landing resolution as a fraction of dt.
const LANDING_BISECTIONS: usize = 12;

#[derive(Debug, thiserror::Error)]
pub enum ProtocolError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("CV regulation did not converge within {iterations} iterations at t = {t} s")]
    CvRegulation { iterations: usize, t: f64 },
    #[error("invalid protocol step: {0}")]
    InvalidStep(String),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("telemetry output: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    CcDischarge,
    CcCharge,
    CccvCharge,
    Rest,
    RandomCc,
}

/// Bounds for randomized discharge currents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomSpec {
    pub c_rate_min: f64,
    pub c_rate_max: f64,
    /// Without a dwell one rate is drawn per step execution; with a dwell the
    /// rate follows a bounded random walk updated every `dwell_s` seconds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dwell_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolStep {
    pub kind: StepKind,
    /// Current as a multiple of the nominal capacity.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_rate: Option<f64>,
    /// Absolute current magnitude (A); alternative to `c_rate`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub current_a: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cutoff_v: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_s: Option<f64>,
    /// CV phase ends once the charge current magnitude falls to this value (A).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub taper_a: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rng: Option<RandomSpec>,
}

impl ProtocolStep {
    fn bare(kind: StepKind) -> Self {
        Self {
            kind,
            c_rate: None,
            current_a: None,
            cutoff_v: None,
            time_s: None,
            taper_a: None,
            rng: None,
        }
    }

    pub fn cc_discharge(c_rate: f64, cutoff_v: f64) -> Self {
        Self {
            c_rate: Some(c_rate),
            cutoff_v: Some(cutoff_v),
            ..Self::bare(StepKind::CcDischarge)
        }
    }

    pub fn cc_charge(c_rate: f64, cutoff_v: f64) -> Self {
        Self {
            c_rate: Some(c_rate),
            cutoff_v: Some(cutoff_v),
            ..Self::bare(StepKind::CcCharge)
        }
    }

    pub fn cccv_charge(c_rate: f64, cv_v: f64, taper_a: f64) -> Self {
        Self {
            c_rate: Some(c_rate),
            cutoff_v: Some(cv_v),
            taper_a: Some(taper_a),
            ..Self::bare(StepKind::CccvCharge)
        }
    }

    pub fn rest(seconds: f64) -> Self {
        Self {
            time_s: Some(seconds),
            ..Self::bare(StepKind::Rest)
        }
    }

    pub fn random_cc(c_rate_min: f64, c_rate_max: f64, dwell_s: Option<f64>, cutoff_v: f64) -> Self {
        Self {
            cutoff_v: Some(cutoff_v),
            rng: Some(RandomSpec {
                c_rate_min,
                c_rate_max,
                dwell_s,
            }),
            ..Self::bare(StepKind::RandomCc)
        }
    }

    pub fn with_time_limit(mut self, seconds: f64) -> Self {
        self.time_s = Some(seconds);
        self
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        let bad = |m: String| Err(ProtocolError::InvalidStep(m));
        for (name, v) in [
            ("c_rate", self.c_rate),
            ("current_a", self.current_a),
            ("time_s", self.time_s),
            ("taper_a", self.taper_a),
        ] {
            if let Some(v) = v {
                if !(v.is_finite() && v >= 0.0) {
                    return bad(format!("{name} must be finite and non-negative, got {v}"));
                }
            }
        }
        if let Some(v) = self.cutoff_v {
            if !(CUTOFF_BAND.0..=CUTOFF_BAND.1).contains(&v) {
                return bad(format!(
                    "cutoff {v} V outside [{}, {}] V",
                    CUTOFF_BAND.0, CUTOFF_BAND.1
                ));
            }
        }
        let needs_magnitude = matches!(
            self.kind,
            StepKind::CcDischarge | StepKind::CcCharge | StepKind::CccvCharge
        );
        if needs_magnitude && self.c_rate.is_none() == self.current_a.is_none() {
            return bad(format!("{:?} needs exactly one of c_rate / current_a", self.kind));
        }
        match self.kind {
            StepKind::Rest if self.time_s.is_none() => bad("rest needs time_s".into()),
            StepKind::CccvCharge if self.cutoff_v.is_none() || self.taper_a.is_none() => {
                bad("cccv_charge needs cutoff_v and taper_a".into())
            }
            StepKind::CcDischarge | StepKind::CcCharge | StepKind::RandomCc
                if self.cutoff_v.is_none() && self.time_s.is_none() =>
            {
                bad(format!("{:?} needs a cutoff_v or time_s limit", self.kind))
            }
            StepKind::RandomCc => match &self.rng {
                None => bad("random_cc needs an rng spec".into()),
                Some(r) => {
                    if !(r.c_rate_min >= 0.0 && r.c_rate_min <= r.c_rate_max && r.c_rate_max.is_finite()) {
                        bad(format!("invalid C-rate bounds [{}, {}]", r.c_rate_min, r.c_rate_max))
                    } else if r.dwell_s.is_some_and(|d| !(d > 0.0)) {
                        bad("dwell_s must be positive".into())
                    } else {
                        Ok(())
                    }
                }
            },
            _ => Ok(()),
        }
    }

    fn magnitude(&self, q_nom: f64) -> f64 {
        match (self.c_rate, self.current_a) {
            (Some(r), _) => r * q_nom,
            (None, Some(a)) => a,
            (None, None) => 0.0,
        }
    }
}

/// The six cycling regimes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Family {
    C2,
    C3,
    R2_5,
    R3,
    RW,
    SAT,
}

impl Family {
    pub const ALL: [Family; 6] = [
        Family::C2,
        Family::C3,
        Family::R2_5,
        Family::R3,
        Family::RW,
        Family::SAT,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Family::C2 => "C2",
            Family::C3 => "C3",
            Family::R2_5 => "R2_5",
            Family::R3 => "R3",
            Family::RW => "RW",
            Family::SAT => "SAT",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Family {
    type Err = ProtocolError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Family::ALL
            .into_iter()
            .find(|f| f.tag().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                let valid: Vec<_> = Family::ALL.iter().map(|f| f.tag()).collect();
                ProtocolError::InvalidSchedule(format!(
                    "unknown family `{s}` (valid: {})",
                    valid.join(", ")
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CycleSchedule {
    pub family: Family,
    pub steps: Vec<ProtocolStep>,
    pub repeat_count: u32,
    /// Ambient temperature (K).
    pub t_amb: f64,
    /// State of charge the run starts from.
    #[serde(default)]
    pub initial_soc: f64,
}

impl CycleSchedule {
    /// Rest between charge and discharge (s).
    pub const REST_S: f64 = 300.0;
    /// Taper current ending the CV phase, as a C-rate.
    pub const TAPER_C: f64 = 0.05;
    /// Orbit-like rest used by the satellite regime (s).
    pub const SAT_REST_S: f64 = 1800.0;
    pub const SAT_DOD: f64 = 0.3;

    /// Charge at 1C CC-CV, rest, then the family's discharge pattern.
    pub fn for_family(family: Family, repeat_count: u32, t_amb: f64, q_nom: f64) -> Self {
        let charge = ProtocolStep::cccv_charge(1.0, CHARGE_CUTOFF, Self::TAPER_C * q_nom);
        let rest = ProtocolStep::rest(Self::REST_S);
        let mut initial_soc = 0.0;
        let steps = match family {
            Family::C2 => vec![charge, rest, ProtocolStep::cc_discharge(2.0, DISCHARGE_CUTOFF)],
            Family::C3 => vec![charge, rest, ProtocolStep::cc_discharge(3.0, DISCHARGE_CUTOFF)],
            Family::R2_5 => vec![
                charge,
                rest,
                ProtocolStep::random_cc(2.0, 3.0, None, DISCHARGE_CUTOFF),
            ],
            Family::R3 => vec![
                charge,
                rest,
                ProtocolStep::random_cc(2.5, 3.5, None, DISCHARGE_CUTOFF),
            ],
            Family::RW => vec![
                charge,
                rest,
                ProtocolStep::random_cc(0.5, 3.0, Some(60.0), DISCHARGE_CUTOFF),
            ],
            Family::SAT => {
                initial_soc = 1.0 - Self::SAT_DOD;
                vec![
                    charge,
                    ProtocolStep::rest(Self::SAT_REST_S),
                    ProtocolStep::cc_discharge(1.0, DISCHARGE_CUTOFF).with_time_limit(Self::SAT_DOD * 3600.0),
                    ProtocolStep::rest(Self::SAT_REST_S),
                ]
            }
        };
        Self {
            family,
            steps,
            repeat_count,
            t_amb,
            initial_soc,
        }
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        if self.steps.is_empty() {
            return Err(ProtocolError::InvalidSchedule("schedule has no steps".into()));
        }
        if !(self.t_amb > 0.0 && self.t_amb.is_finite()) {
            return Err(ProtocolError::InvalidSchedule(format!("invalid ambient {}", self.t_amb)));
        }
        if !(0.0..=1.0).contains(&self.initial_soc) {
            return Err(ProtocolError::InvalidSchedule(format!(
                "initial_soc {} outside [0, 1]",
                self.initial_soc
            )));
        }
        self.steps.iter().try_for_each(ProtocolStep::validate)
    }

    /// Parses a protocol file with a `[schedule]` table and `[[schedule.steps]]`.
    pub fn from_toml_str(text: &str) -> Result<Self, ProtocolError> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct File {
            schedule: CycleSchedule,
        }
        let f: File = toml::from_str(text).map_err(|e| ProtocolError::InvalidSchedule(e.to_string()))?;
        f.schedule.validate()?;
        Ok(f.schedule)
    }

    pub fn load(path: &Path) -> Result<Self, ProtocolError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        #[derive(Serialize)]
        struct File<'a> {
            schedule: &'a CycleSchedule,
        }
        toml::to_string(&File { schedule: self }).expect("schedule serialises")
    }
}

/// One emitted sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub t: f64,
    pub current: f64,
    pub voltage: f64,
    /// Kelvin.
    pub temp: f64,
}

impl Sample {
    fn from_step(state: &CellState, current: f64, out: &StepOutput) -> Self {
        Self {
            t: state.t,
            current,
            voltage: out.voltage,
            temp: out.temp,
        }
    }
}

/// Destination of emitted samples.
pub trait TelemetrySink {
    fn push(&mut self, cycle: u32, sample: &Sample) -> Result<(), ProtocolError>;
}

impl<F: FnMut(u32, &Sample)> TelemetrySink for F {
    fn push(&mut self, cycle: u32, sample: &Sample) -> Result<(), ProtocolError> {
        self(cycle, sample);
        Ok(())
    }
}

/// One telemetry row; temperature in °C as in the CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesRecord {
    pub cell_id: String,
    pub cycle: u32,
    pub t: f64,
    pub current: f64,
    pub voltage: f64,
    pub temp_c: f64,
}

/// In-memory sink.
#[derive(Debug, Clone, Default)]
pub struct RecordBuffer {
    pub cell_id: String,
    pub records: Vec<TimeSeriesRecord>,
}

impl RecordBuffer {
    pub fn new(cell_id: impl Into<String>) -> Self {
        Self {
            cell_id: cell_id.into(),
            records: Vec::new(),
        }
    }
}

impl TelemetrySink for RecordBuffer {
    fn push(&mut self, cycle: u32, s: &Sample) -> Result<(), ProtocolError> {
        self.records.push(TimeSeriesRecord {
            cell_id: self.cell_id.clone(),
            cycle,
            t: s.t,
            current: s.current,
            voltage: s.voltage,
            temp_c: s.temp - 273.15,
        });
        Ok(())
    }
}

/// Columnar samples of one cycle of one cell.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CycleRecord {
    pub cell_id: String,
    pub cycle: u32,
    pub t: Vec<f64>,
    pub current: Vec<f64>,
    pub voltage: Vec<f64>,
    pub temp_c: Vec<f64>,
}

impl CycleRecord {
    pub fn new(cell_id: impl Into<String>, cycle: u32) -> Self {
        Self {
            cell_id: cell_id.into(),
            cycle,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn push_row(&mut self, t: f64, current: f64, voltage: f64, temp_c: f64) {
        self.t.push(t);
        self.current.push(current);
        self.voltage.push(voltage);
        self.temp_c.push(temp_c);
    }

    pub fn clear(&mut self) {
        self.t.clear();
        self.current.clear();
        self.voltage.clear();
        self.temp_c.clear();
    }

    pub fn rows(&self) -> impl Iterator<Item = TimeSeriesRecord> + '_ {
        (0..self.len()).map(move |k| TimeSeriesRecord {
            cell_id: self.cell_id.clone(),
            cycle: self.cycle,
            t: self.t[k],
            current: self.current[k],
            voltage: self.voltage[k],
            temp_c: self.temp_c[k],
        })
    }

    /// Writes the rows without header.
    pub fn write_csv_rows<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        for k in 0..self.len() {
            write_row(
                out,
                &self.cell_id,
                self.cycle,
                self.t[k],
                self.current[k],
                self.voltage[k],
                self.temp_c[k],
            )?;
        }
        Ok(())
    }
}

impl TelemetrySink for CycleRecord {
    fn push(&mut self, _cycle: u32, s: &Sample) -> Result<(), ProtocolError> {
        self.push_row(s.t, s.current, s.voltage, s.temp - 273.15);
        Ok(())
    }
}

/// Streams telemetry rows as CSV.
pub struct CsvTelemetryWriter<W: Write> {
    cell_id: String,
    out: W,
}

impl<W: Write> CsvTelemetryWriter<W> {
    /// Writes the optional comment line and the header.
    pub fn new(mut out: W, cell_id: impl Into<String>, comment: Option<&str>) -> std::io::Result<Self> {
        if let Some(c) = comment {
            out.write_all(c.as_bytes())?;
        }
        writeln!(out, "{TELEMETRY_HEADER}")?;
        Ok(Self {
            cell_id: cell_id.into(),
            out,
        })
    }

    pub fn write_record(&mut self, r: &TimeSeriesRecord) -> std::io::Result<()> {
        write_row(&mut self.out, &r.cell_id, r.cycle, r.t, r.current, r.voltage, r.temp_c)
    }

    pub fn into_inner(mut self) -> std::io::Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}

fn write_row<W: Write>(
    out: &mut W,
    cell_id: &str,
    cycle: u32,
    t: f64,
    current: f64,
    voltage: f64,
    temp_c: f64,
) -> std::io::Result<()> {
    writeln!(out, "{cell_id},{cycle},{t:.6},{current:.6},{voltage:.6},{temp_c:.6}")
}

impl<W: Write> TelemetrySink for CsvTelemetryWriter<W> {
    fn push(&mut self, cycle: u32, s: &Sample) -> Result<(), ProtocolError> {
        write_row(
            &mut self.out,
            &self.cell_id,
            cycle,
            s.t,
            s.current,
            s.voltage,
            s.temp - 273.15,
        )?;
        Ok(())
    }
}

/// Why a step ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepEnd {
    Cutoff,
    TimeLimit,
    Taper,
    /// An electrode surface was exhausted before any voltage cutoff.
    Saturated,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSummary {
    pub end: StepEnd,
    pub samples: usize,
    /// Charge moved out of the cell (Ah); negative while charging.
    pub charge_ah: f64,
    pub energy_wh: f64,
    pub duration_s: f64,
}

#[derive(Clone, Copy)]
enum Direction {
    /// Voltage falls toward the cutoff.
    Down,
    Up,
}

impl Direction {
    fn past(self, v: f64, cutoff: f64) -> bool {
        match self {
            Direction::Down => v <= cutoff,
            Direction::Up => v >= cutoff,
        }
    }
}

/// Drives a simulator through protocol steps.
pub struct Runner<'a> {
    spm: &'a Spm,
    dt: f64,
    ambient: f64,
    rng: ChaCha8Rng,
}

struct Tally {
    samples: usize,
    charge_ah: f64,
    energy_wh: f64,
    duration_s: f64,
}

impl Tally {
    fn new() -> Self {
        Self {
            samples: 0,
            charge_ah: 0.0,
            energy_wh: 0.0,
            duration_s: 0.0,
        }
    }

    fn add(&mut self, current: f64, voltage: f64, h: f64) {
        self.samples += 1;
        self.charge_ah += current * h / 3600.0;
        self.energy_wh += current * voltage * h / 3600.0;
        self.duration_s += h;
    }

    fn finish(self, end: StepEnd) -> StepSummary {
        StepSummary {
            end,
            samples: self.samples,
            charge_ah: self.charge_ah,
            energy_wh: self.energy_wh,
            duration_s: self.duration_s,
        }
    }
}

impl<'a> Runner<'a> {
    pub fn new(spm: &'a Spm, dt: f64, ambient: f64, seed: u64) -> Self {
        Self {
            spm,
            dt,
            ambient,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn spm(&self) -> &Spm {
        self.spm
    }

    /// Applies one protocol step until its termination condition, pushing every
    /// timestep into `sink`.
    pub fn run_step(
        &mut self,
        state: &mut CellState,
        step: &ProtocolStep,
        cycle: u32,
        sink: &mut dyn TelemetrySink,
    ) -> Result<StepSummary, ProtocolError> {
        step.validate()?;
        let q_nom = self.spm.params().q_nom;
        let mag = step.magnitude(q_nom);
        match step.kind {
            StepKind::Rest => self.run_constant(state, |_, _| 0.0, None, step.time_s, cycle, sink),
            StepKind::CcDischarge => self.run_constant(
                state,
                |_, _| mag,
                step.cutoff_v.map(|v| (v, Direction::Down)),
                step.time_s,
                cycle,
                sink,
            ),
            StepKind::CcCharge => self.run_constant(
                state,
                |_, _| -mag,
                step.cutoff_v.map(|v| (v, Direction::Up)),
                step.time_s,
                cycle,
                sink,
            ),
            StepKind::RandomCc => {
                let spec = step.rng.clone().expect("validated");
                let (lo, hi) = (spec.c_rate_min, spec.c_rate_max);
                let mut rate = self.draw(lo, hi);
                let mut dwell_index = 0u64;
                let walk = 0.25 * (hi - lo);
                let mut rng = ChaCha8Rng::seed_from_u64(self.rng.random());
                self.run_constant(
                    state,
                    move |elapsed, _| {
                        if let Some(d) = spec.dwell_s {
                            let idx = (elapsed / d + 1e-9).floor() as u64;
                            while dwell_index < idx {
                                rate = reflect(rate + rng.random_range(-walk..=walk), lo, hi);
                                dwell_index += 1;
                            }
                        }
                        rate * q_nom
                    },
                    step.cutoff_v.map(|v| (v, Direction::Down)),
                    step.time_s,
                    cycle,
                    sink,
                )
            }
            StepKind::CccvCharge => {
                let cv = step.cutoff_v.expect("validated");
                let taper = step.taper_a.expect("validated");
                let mut cc = self.run_constant(
                    state,
                    |_, _| -mag,
                    Some((cv, Direction::Up)),
                    step.time_s,
                    cycle,
                    sink,
                )?;
                if cc.end != StepEnd::Cutoff {
                    return Ok(cc);
                }
                let remaining = step.time_s.map(|t| t - cc.duration_s);
                let hold = self.run_cv(state, cv, taper, -mag, remaining, cycle, sink)?;
                cc.samples += hold.samples;
                cc.charge_ah += hold.charge_ah;
                cc.energy_wh += hold.energy_wh;
                cc.duration_s += hold.duration_s;
                cc.end = hold.end;
                Ok(cc)
            }
        }
    }

    /// Runs every cycle of a schedule, starting from `state`.
    pub fn run_cycle(
        &mut self,
        state: &mut CellState,
        schedule: &CycleSchedule,
        cycle: u32,
        sink: &mut dyn TelemetrySink,
    ) -> Result<Vec<StepSummary>, ProtocolError> {
        schedule
            .steps
            .iter()
            .map(|s| self.run_step(state, s, cycle, sink))
            .collect()
    }

    fn draw(&mut self, lo: f64, hi: f64) -> f64 {
        if hi > lo {
            self.rng.random_range(lo..=hi)
        } else {
            lo
        }
    }

    fn run_constant(
        &mut self,
        state: &mut CellState,
        mut current_at: impl FnMut(f64, &CellState) -> f64,
        cutoff: Option<(f64, Direction)>,
        time_limit: Option<f64>,
        cycle: u32,
        sink: &mut dyn TelemetrySink,
    ) -> Result<StepSummary, ProtocolError> {
        let mut tally = Tally::new();
        let mut elapsed = 0.0;
        loop {
            let mut h = self.dt;
            if let Some(limit) = time_limit {
                let left = limit - elapsed;
                if left <= 1e-9 {
                    return Ok(tally.finish(StepEnd::TimeLimit));
                }
                h = h.min(left);
            }
            let current = current_at(elapsed, state);
            let attempt = self.spm.step(state, current, self.ambient, h);
            let crossed = match &attempt {
                Ok((_, out)) => cutoff.is_some_and(|(v, d)| d.past(out.voltage, v)),
                Err(e) if e.is_cutoff() => true,
                Err(_) => false,
            };
            if !crossed {
                let (next, out) = attempt?;
                *state = next;
                sink.push(cycle, &Sample::from_step(state, current, &out))?;
                tally.add(current, out.voltage, h);
                elapsed += h;
                continue;
            }
            // Bisect the sub-step so the final sample sits on the cutoff.
            let (mut lo, mut hi) = (0.0, h);
            let mut lo_hit: Option<(CellState, StepOutput, f64)> = None;
            let mut hi_hit = attempt.ok().map(|(s, o)| (s, o, h));
            for _ in 0..LANDING_BISECTIONS {
                let mid = 0.5 * (lo + hi);
                match self.spm.step(state, current, self.ambient, mid) {
                    Ok((s, o)) if !cutoff.is_some_and(|(v, d)| d.past(o.voltage, v)) => {
                        lo = mid;
                        lo_hit = Some((s, o, mid));
                    }
                    Ok((s, o)) => {
                        hi = mid;
                        hi_hit = Some((s, o, mid));
                    }
                    Err(e) if e.is_cutoff() => {
                        hi = mid;
                        hi_hit = None;
                    }
                    Err(e) => return Err(e.into()),
                }
            }
            let landed = hi_hit.or(lo_hit);
            let end = if cutoff.is_some() {
                StepEnd::Cutoff
            } else {
                StepEnd::Saturated
            };
            if let Some((s, out, h)) = landed {
                *state = s;
                sink.push(cycle, &Sample::from_step(state, current, &out))?;
                tally.add(current, out.voltage, h);
            }
            return Ok(tally.finish(end));
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn run_cv(
        &mut self,
        state: &mut CellState,
        cv: f64,
        taper: f64,
        start_current: f64,
        time_limit: Option<f64>,
        cycle: u32,
        sink: &mut dyn TelemetrySink,
    ) -> Result<StepSummary, ProtocolError> {
        let mut tally = Tally::new();
        let mut current = start_current;
        loop {
            let mut h = self.dt;
            if let Some(limit) = time_limit {
                let left = limit - tally.duration_s;
                if left <= 1e-9 {
                    return Ok(tally.finish(StepEnd::TimeLimit));
                }
                h = h.min(left);
            }
            let (i, next, out) = self.regulate(state, cv, current, h)?;
            if -i <= taper {
                return Ok(tally.finish(StepEnd::Taper));
            }
            current = i;
            *state = next;
            sink.push(cycle, &Sample::from_step(state, current, &out))?;
            tally.add(current, out.voltage, h);
        }
    }

    /// Secant iteration on the (negative) charge current so the step ends at `cv`.
    fn regulate(
        &self,
        state: &CellState,
        cv: f64,
        guess: f64,
        h: f64,
    ) -> Result<(f64, CellState, StepOutput), ProtocolError> {
        let eval = |i: f64| -> Result<Option<(CellState, StepOutput)>, ProtocolError> {
            match self.spm.step(state, i, self.ambient, h) {
                Ok(r) => Ok(Some(r)),
                Err(e) if e.is_cutoff() => Ok(None),
                Err(e) => Err(e.into()),
            }
        };
        let mut i0 = guess.min(0.0);
        let mut r0 = eval(i0)?;
        let mut evals = 1;
        // back off until the trial step is feasible
        while r0.is_none() {
            i0 *= 0.5;
            r0 = eval(i0)?;
            evals += 1;
            if evals > CV_MAX_ITER {
                return Err(ProtocolError::CvRegulation { iterations: evals, t: state.t });
            }
        }
        let (s0, o0) = r0.expect("feasible");
        let mut f0 = o0.voltage - cv;
        if f0.abs() < CV_TOLERANCE {
            return Ok((i0, s0, o0));
        }
        let mut i1 = if i0 == 0.0 { -1e-3 } else { i0 * 0.98 };
        while evals < CV_MAX_ITER {
            evals += 1;
            let Some((s1, o1)) = eval(i1)? else {
                i1 = 0.5 * (i1 + i0.max(i1));
                continue;
            };
            let f1 = o1.voltage - cv;
            if f1.abs() < CV_TOLERANCE || i1 == 0.0 && f1 < 0.0 {
                return Ok((i1, s1, o1));
            }
            let slope = (f1 - f0) / (i1 - i0);
            let next = if slope != 0.0 && slope.is_finite() {
                i1 - f1 / slope
            } else {
                i1 * 0.5
            };
            i0 = i1;
            f0 = f1;
            i1 = next.min(0.0);
        }
        Err(ProtocolError::CvRegulation {
            iterations: evals,
            t: state.t,
        })
    }
}

fn reflect(x: f64, lo: f64, hi: f64) -> f64 {
    let mut v = x;
    if v < lo {
        v = 2.0 * lo - v;
    }
    if v > hi {
        v = 2.0 * hi - v;
    }
    v.clamp(lo, hi)
}

/// Runs `repeat_count` cycles from the schedule's initial state. Deterministic
/// in `(spm, schedule, seed, dt)`.
pub fn run_schedule(
    spm: &Spm,
    schedule: &CycleSchedule,
    seed: u64,
    dt: f64,
    sink: &mut dyn TelemetrySink,
) -> Result<CellState, ProtocolError> {
    schedule.validate()?;
    let mut state = spm.initial_state(schedule.initial_soc, schedule.t_amb);
    let mut runner = Runner::new(spm, dt, schedule.t_amb, seed);
    for cycle in 0..schedule.repeat_count {
        runner.run_cycle(&mut state, schedule, cycle, sink)?;
    }
    Ok(state)
}

/// Convenience wrapper returning the records of a run.
pub fn run_schedule_records(
    spm: &Spm,
    schedule: &CycleSchedule,
    seed: u64,
    cell_id: &str,
) -> Result<Vec<TimeSeriesRecord>, ProtocolError> {
    let mut buf = RecordBuffer::new(cell_id);
    run_schedule(spm, schedule, seed, DEFAULT_DT, &mut buf)?;
    Ok(buf.records)
}

//! Single-particle electrochemical model coupled to a lumped thermal node.
//!
//! Sign convention: positive current discharges the cell.

mod config;
mod diffusion;
mod kinetics;
mod ocp;
mod thermal;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use config::{ParamFile, SimOptions};
pub use diffusion::SphericalMesh;
pub use kinetics::{arrhenius_scale, exchange_current, overpotential, FARADAY, R_GAS};
pub use ocp::{ocp_eval, OcpSet, OcpTable};
pub use thermal::thermal_step;

/// Largest admissible time step for the explicit thermal update.
pub const MAX_DT: f64 = 1.0;
/// Lower/upper temperature bounds of a valid simulation (K).
pub const TEMP_RANGE: (f64, f64) = (200.0, 400.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Electrode {
    Negative,
    Positive,
}

impl fmt::Display for Electrode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Electrode::Negative => "negative",
            Electrode::Positive => "positive",
        })
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error("stoichiometry {value} of the {electrode} electrode is outside [0, 1]")]
    Domain { electrode: Electrode, value: f64 },
    #[error("{electrode} electrode surface saturated (stoichiometry {stoichiometry})")]
    Saturation {
        electrode: Electrode,
        stoichiometry: f64,
    },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("invalid OCP table: {0}")]
    InvalidTable(String),
    #[error("invalid parameter {name} = {value}: {reason}")]
    InvalidParameter {
        name: String,
        value: f64,
        reason: &'static str,
    },
    #[error("unknown parameter name `{0}`")]
    UnknownParameter(String),
    #[error("parameter file: {0}")]
    Config(String),
}

impl SimError {
    /// Whether the error marks an exhausted electrode (a natural protocol cutoff)
    /// rather than a breakdown of the solver.
    pub fn is_cutoff(&self) -> bool {
        matches!(self, SimError::Saturation { .. })
    }
}

/// Calibratable physical parameters of one cell, SI units throughout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellParameters {
    /// Solid diffusivity, negative / positive (m²/s).
    pub d_n: f64,
    pub d_p: f64,
    /// Reaction rate constants (m^2.5 mol^-0.5 s^-1).
    pub k_n: f64,
    pub k_p: f64,
    /// Particle radii (m).
    pub r_part_n: f64,
    pub r_part_p: f64,
    /// Active-material volume fractions.
    pub eps_n: f64,
    pub eps_p: f64,
    /// Electrode thicknesses (m).
    pub l_n: f64,
    pub l_p: f64,
    /// Electrode plate area (m²).
    pub a_cell: f64,
    /// Maximum solid concentrations (mol/m³).
    pub c_max_n: f64,
    pub c_max_p: f64,
    /// Stoichiometry windows: SOC 0 ↔ (x_n_min, x_p_max), SOC 1 ↔ (x_n_max, x_p_min).
    pub x_n_min: f64,
    pub x_n_max: f64,
    pub x_p_min: f64,
    pub x_p_max: f64,
    /// Lumped ohmic resistance (Ω).
    pub r0: f64,
    /// Heat capacity (J/K).
    pub c_th: f64,
    /// Surface heat-transfer conductance (W/K).
    pub h_a: f64,
    /// Activation energies for diffusion and kinetics (J/mol).
    pub ea_d: f64,
    pub ea_k: f64,
    /// Electrolyte concentration, held fixed (mol/m³).
    pub c_e: f64,
    /// Reference temperature (K).
    pub t_ref: f64,
    /// Nominal capacity (Ah).
    pub q_nom: f64,
}

macro_rules! named_fields {
    ($($field:ident => $name:literal),* $(,)?) => {
        impl CellParameters {
            /// Canonical external names, as used in parameter and space files.
            pub const NAMES: &'static [&'static str] = &[$($name),*];

            pub fn get(&self, name: &str) -> Option<f64> {
                match name {
                    $($name => Some(self.$field),)*
                    _ => None,
                }
            }

            pub fn set(&mut self, name: &str, value: f64) -> Result<(), SimError> {
                match name {
                    $($name => self.$field = value,)*
                    _ => return Err(SimError::UnknownParameter(name.to_string())),
                }
                Ok(())
            }
        }
    };
}

named_fields! {
    d_n => "D_n", d_p => "D_p", k_n => "k_n", k_p => "k_p",
    r_part_n => "R_part_n", r_part_p => "R_part_p",
    eps_n => "eps_n", eps_p => "eps_p", l_n => "L_n", l_p => "L_p",
    a_cell => "A_cell", c_max_n => "c_max_n", c_max_p => "c_max_p",
    x_n_min => "x_n_min", x_n_max => "x_n_max", x_p_min => "x_p_min", x_p_max => "x_p_max",
    r0 => "R0", c_th => "C_th", h_a => "hA", ea_d => "Ea_D", ea_k => "Ea_k",
    c_e => "c_e", t_ref => "T_ref", q_nom => "Q_nom",
}

impl Default for CellParameters {
    /// The reference 2.0 Ah / 3.6 V NCM-graphite 18650 cell.
    fn default() -> Self {
        Self {
            d_n: 3.9e-14,
            d_p: 1.0e-14,
            k_n: 2.0e-11,
            k_p: 6.0e-11,
            r_part_n: 5.86e-6,
            r_part_p: 5.22e-6,
            eps_n: 0.6,
            eps_p: 0.55,
            l_n: 60.93e-6,
            l_p: 47.87e-6,
            a_cell: 0.1,
            c_max_n: 31_000.0,
            c_max_p: 51_000.0,
            x_n_min: 0.02,
            x_n_max: 0.6710,
            x_p_min: 0.3401,
            x_p_max: 0.8895,
            r0: 0.025,
            c_th: 45.0,
            h_a: 0.1,
            ea_d: 3.0e4,
            ea_k: 3.5e4,
            c_e: 1000.0,
            t_ref: 298.15,
            q_nom: 2.0,
        }
    }
}

impl CellParameters {
    pub fn validate(&self) -> Result<(), SimError> {
        for name in Self::NAMES {
            let v = self.get(name).expect("listed name");
            if !(v.is_finite() && v > 0.0) {
                return Err(SimError::InvalidParameter {
                    name: name.to_string(),
                    value: v,
                    reason: "must be finite and strictly positive",
                });
            }
        }
        for (name, v) in [("eps_n", self.eps_n), ("eps_p", self.eps_p)] {
            if v >= 1.0 {
                return Err(SimError::InvalidParameter {
                    name: name.into(),
                    value: v,
                    reason: "volume fraction must lie in (0, 1)",
                });
            }
        }
        for (lo_name, lo, hi) in [
            ("x_n_min", self.x_n_min, self.x_n_max),
            ("x_p_min", self.x_p_min, self.x_p_max),
        ] {
            if !(lo < hi && hi < 1.0) {
                return Err(SimError::InvalidParameter {
                    name: lo_name.into(),
                    value: lo,
                    reason: "stoichiometry window must satisfy 0 < min < max < 1",
                });
            }
        }
        Ok(())
    }

    /// Total active particle surface area of an electrode, `3 ε L A / R` (m²).
    pub fn surface_area(&self, electrode: Electrode) -> f64 {
        match electrode {
            Electrode::Negative => 3.0 * self.eps_n * self.l_n * self.a_cell / self.r_part_n,
            Electrode::Positive => 3.0 * self.eps_p * self.l_p * self.a_cell / self.r_part_p,
        }
    }

    /// Active solid volume of an electrode, `ε L A` (m³).
    pub fn solid_volume(&self, electrode: Electrode) -> f64 {
        match electrode {
            Electrode::Negative => self.eps_n * self.l_n * self.a_cell,
            Electrode::Positive => self.eps_p * self.l_p * self.a_cell,
        }
    }

    pub fn c_max(&self, electrode: Electrode) -> f64 {
        match electrode {
            Electrode::Negative => self.c_max_n,
            Electrode::Positive => self.c_max_p,
        }
    }

    /// Charge (Ah) swept by an electrode over its stoichiometry window.
    pub fn window_capacity(&self, electrode: Electrode) -> f64 {
        let span = match electrode {
            Electrode::Negative => self.x_n_max - self.x_n_min,
            Electrode::Positive => self.x_p_max - self.x_p_min,
        };
        self.solid_volume(electrode) * self.c_max(electrode) * span * FARADAY / 3600.0
    }

    /// Stoichiometries (negative, positive) at a state of charge.
    pub fn stoichiometry_at_soc(&self, soc: f64) -> (f64, f64) {
        (
            self.x_n_min + soc * (self.x_n_max - self.x_n_min),
            self.x_p_max - soc * (self.x_p_max - self.x_p_min),
        )
    }

    /// Current of a C-rate relative to the nominal capacity (A).
    pub fn c_rate(&self, rate: f64) -> f64 {
        rate * self.q_nom
    }
}

/// Radial lithium concentration profile of one representative particle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleState {
    pub electrode: Electrode,
    pub c: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellState {
    pub neg: ParticleState,
    pub pos: ParticleState,
    /// Cell temperature (K).
    pub temp: f64,
    /// Elapsed time (s).
    pub t: f64,
    /// Cumulative |I| dt (Ah).
    pub throughput: f64,
}

impl CellState {
    pub fn particle(&self, electrode: Electrode) -> &ParticleState {
        match electrode {
            Electrode::Negative => &self.neg,
            Electrode::Positive => &self.pos,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepOutput {
    /// Terminal voltage (V).
    pub voltage: f64,
    /// Temperature at the end of the step (K).
    pub temp: f64,
    /// Heat generation (W).
    pub heat: f64,
    pub eta_n: f64,
    pub eta_p: f64,
    /// Open-circuit voltage at the surface stoichiometries (V).
    pub ocv: f64,
}

/// A parameterised simulator. Immutable; every call takes and returns state.
#[derive(Debug, Clone)]
pub struct Spm {
    params: CellParameters,
    ocp: OcpSet,
    options: SimOptions,
    neg_mesh: SphericalMesh,
    pos_mesh: SphericalMesh,
}

impl Spm {
    pub fn new(params: CellParameters, ocp: OcpSet, options: SimOptions) -> Result<Self, SimError> {
        params.validate()?;
        let neg_mesh = SphericalMesh::new(params.r_part_n, options.shells)?;
        let pos_mesh = SphericalMesh::new(params.r_part_p, options.shells)?;
        Ok(Self {
            params,
            ocp,
            options,
            neg_mesh,
            pos_mesh,
        })
    }

    /// Default OCP tables and options.
    pub fn with_params(params: CellParameters) -> Result<Self, SimError> {
        Self::new(params, OcpSet::default(), SimOptions::default())
    }

    pub fn params(&self) -> &CellParameters {
        &self.params
    }

    pub fn ocp(&self) -> &OcpSet {
        &self.ocp
    }

    pub fn options(&self) -> &SimOptions {
        &self.options
    }

    pub fn mesh(&self, electrode: Electrode) -> &SphericalMesh {
        match electrode {
            Electrode::Negative => &self.neg_mesh,
            Electrode::Positive => &self.pos_mesh,
        }
    }

    /// Equilibrated state with uniform profiles at the given SOC.
    pub fn initial_state(&self, soc: f64, temp: f64) -> CellState {
        let (xn, xp) = self.params.stoichiometry_at_soc(soc);
        let n = self.options.shells;
        CellState {
            neg: ParticleState {
                electrode: Electrode::Negative,
                c: vec![xn * self.params.c_max_n; n],
            },
            pos: ParticleState {
                electrode: Electrode::Positive,
                c: vec![xp * self.params.c_max_p; n],
            },
            temp,
            t: 0.0,
            throughput: 0.0,
        }
    }

    /// Equilibrium OCV of a state's mean stoichiometries.
    pub fn rest_ocv(&self, state: &CellState) -> Result<f64, SimError> {
        let xn = self.neg_mesh.mean(&state.neg.c) / self.params.c_max_n;
        let xp = self.pos_mesh.mean(&state.pos.c) / self.params.c_max_p;
        Ok(ocp_eval(&self.ocp, Electrode::Positive, xp)? - ocp_eval(&self.ocp, Electrode::Negative, xn)?)
    }

    /// Total lithium in the two particles scaled to the electrode solid volumes (mol).
    pub fn lithium_moles(&self, state: &CellState) -> f64 {
        self.neg_mesh.mean(&state.neg.c) * self.params.solid_volume(Electrode::Negative)
            + self.pos_mesh.mean(&state.pos.c) * self.params.solid_volume(Electrode::Positive)
    }

    /// Effective (D, k) of an electrode at a temperature.
    pub fn effective_rates(&self, electrode: Electrode, temp: f64) -> (f64, f64) {
        let f = self.rate_factors(temp);
        self.scaled_rates(electrode, f)
    }

    /// Arrhenius multipliers for diffusivities and rate constants.
    fn rate_factors(&self, temp: f64) -> (f64, f64) {
        let p = &self.params;
        (
            arrhenius_scale(1.0, p.ea_d, temp, p.t_ref),
            arrhenius_scale(1.0, p.ea_k, temp, p.t_ref),
        )
    }

    fn scaled_rates(&self, electrode: Electrode, (fd, fk): (f64, f64)) -> (f64, f64) {
        let p = &self.params;
        match electrode {
            Electrode::Negative => (p.d_n * fd, p.k_n * fk),
            Electrode::Positive => (p.d_p * fd, p.k_p * fk),
        }
    }

    /// Outward surface molar flux of an electrode for a cell current.
    pub fn surface_flux(&self, electrode: Electrode, current: f64) -> f64 {
        let s = self.params.surface_area(electrode);
        match electrode {
            Electrode::Negative => current / (s * FARADAY),
            Electrode::Positive => -current / (s * FARADAY),
        }
    }

    /// Terminal voltage and heat for a current applied to the given state, at
    /// the state's temperature.
    pub fn terminal_voltage(&self, state: &CellState, current: f64) -> Result<StepOutput, SimError> {
        let p = &self.params;
        let temp = state.temp;
        let mut eta = [0.0; 2];
        let mut u = [0.0; 2];
        let mut dudt = [0.0; 2];
        let factors = self.rate_factors(temp);
        for (slot, electrode) in [Electrode::Negative, Electrode::Positive].into_iter().enumerate() {
            let (d_eff, k_eff) = self.scaled_rates(electrode, factors);
            let flux = self.surface_flux(electrode, current);
            let c_max = p.c_max(electrode);
            let c_surf = self.mesh(electrode).surface(&state.particle(electrode).c, flux, d_eff);
            let j0 = exchange_current(electrode, k_eff, p.c_e, c_surf, c_max)?;
            let x = c_surf / c_max;
            let table = self.ocp.table(electrode);
            u[slot] = table.eval_unchecked(x);
            dudt[slot] = table.entropic_unchecked(x);
            // interfacial current density is the molar flux times F
            eta[slot] = overpotential(flux * FARADAY, j0, temp);
        }
        let ocv = u[1] - u[0];
        let voltage = ocv + eta[1] - eta[0] - current * p.r0;
        let mut heat = current * (ocv - voltage);
        if self.options.entropic_heat {
            heat -= current * temp * (dudt[1] - dudt[0]);
        }
        Ok(StepOutput {
            voltage,
            temp,
            heat,
            eta_n: eta[0],
            eta_p: eta[1],
            ocv,
        })
    }

    /// Advances a state by `dt` under constant current and ambient temperature.
    pub fn step(
        &self,
        state: &CellState,
        current: f64,
        ambient: f64,
        dt: f64,
    ) -> Result<(CellState, StepOutput), SimError> {
        let mut next = state.clone();
        let out = self.step_in_place(&mut next, current, ambient, dt)?;
        Ok((next, out))
    }

    /// Same as [`Spm::step`] but updates `state` in place. On error the state
    /// is left untouched.
    pub fn step_in_place(
        &self,
        state: &mut CellState,
        current: f64,
        ambient: f64,
        dt: f64,
    ) -> Result<StepOutput, SimError> {
        if !(dt > 0.0 && dt <= MAX_DT) {
            return Err(SimError::Numerical(format!("time step {dt} s outside (0, {MAX_DT}]")));
        }
        if !current.is_finite() {
            return Err(SimError::Numerical(format!("non-finite current {current}")));
        }
        let p = &self.params;
        let factors = self.rate_factors(state.temp);
        let (d_n, _) = self.scaled_rates(Electrode::Negative, factors);
        let (d_p, _) = self.scaled_rates(Electrode::Positive, factors);

        let mut trial = CellState {
            neg: ParticleState {
                electrode: Electrode::Negative,
                c: vec![0.0; state.neg.c.len()],
            },
            pos: ParticleState {
                electrode: Electrode::Positive,
                c: vec![0.0; state.pos.c.len()],
            },
            temp: state.temp,
            t: state.t,
            throughput: state.throughput,
        };
        self.neg_mesh.step_into(
            &state.neg.c,
            self.surface_flux(Electrode::Negative, current),
            d_n,
            dt,
            &mut trial.neg.c,
        )?;
        self.pos_mesh.step_into(
            &state.pos.c,
            self.surface_flux(Electrode::Positive, current),
            d_p,
            dt,
            &mut trial.pos.c,
        )?;

        let mut out = self.terminal_voltage(&trial, current)?;
        let temp = thermal_step(state.temp, out.heat, ambient, p.c_th, p.h_a, dt)?;
        if !(TEMP_RANGE.0..=TEMP_RANGE.1).contains(&temp) {
            return Err(SimError::Numerical(format!(
                "temperature {temp:.2} K left the valid range"
            )));
        }
        out.temp = temp;
        trial.temp = temp;
        trial.t += dt;
        trial.throughput += current.abs() * dt / 3600.0;
        *state = trial;
        Ok(out)
    }

    /// Removes lithium uniformly from one particle, e.g. to emulate inventory
    /// consumed by side reactions. `moles` refers to the whole electrode.
    pub fn remove_lithium(
        &self,
        state: &mut CellState,
        electrode: Electrode,
        moles: f64,
    ) -> Result<(), SimError> {
        let dc = moles / self.params.solid_volume(electrode);
        let c_max = self.params.c_max(electrode);
        let particle = match electrode {
            Electrode::Negative => &mut state.neg,
            Electrode::Positive => &mut state.pos,
        };
        let min = particle.c.iter().cloned().fold(f64::INFINITY, f64::min);
        if min - dc <= 0.0 {
            return Err(SimError::Saturation {
                electrode,
                stoichiometry: (min - dc) / c_max,
            });
        }
        particle.c.iter_mut().for_each(|c| *c -= dc);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spm() -> Spm {
        Spm::with_params(CellParameters::default()).unwrap()
    }

    #[test]
    fn default_parameters_are_valid() {
        CellParameters::default().validate().unwrap();
        assert_eq!(CellParameters::default().q_nom, 2.0);
    }

    #[test]
    fn name_access_round_trips() {
        let mut p = CellParameters::default();
        for (i, name) in CellParameters::NAMES.iter().enumerate() {
            p.set(name, i as f64 + 0.5).unwrap();
            assert_eq!(p.get(name), Some(i as f64 + 0.5));
        }
        assert!(p.set("nope", 1.0).is_err());
        assert_eq!(CellParameters::NAMES.len(), 25);
    }

    #[test]
    fn invalid_windows_rejected() {
        let mut p = CellParameters::default();
        p.x_n_min = 0.7;
        assert!(p.validate().is_err());
        let mut p = CellParameters::default();
        p.eps_p = 1.2;
        assert!(p.validate().is_err());
        let mut p = CellParameters::default();
        p.r0 = 0.0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn rest_voltage_equals_ocv() {
        let s = spm();
        let st = s.initial_state(1.0, 298.15);
        let out = s.terminal_voltage(&st, 0.0).unwrap();
        let (xn, xp) = s.params().stoichiometry_at_soc(1.0);
        let ocv = ocp_eval(s.ocp(), Electrode::Positive, xp).unwrap()
            - ocp_eval(s.ocp(), Electrode::Negative, xn).unwrap();
        assert_eq!(out.voltage, ocv);
        assert_eq!(out.heat, 0.0);
    }

    #[test]
    fn full_cell_ocv_at_full_charge_in_band() {
        let s = spm();
        let ocv = s.rest_ocv(&s.initial_state(1.0, 298.15)).unwrap();
        assert!((4.0..=4.3).contains(&ocv), "{ocv}");
    }

    #[test]
    fn overpotential_signs_follow_current() {
        let s = spm();
        let st = s.initial_state(0.5, 298.15);
        let d = s.terminal_voltage(&st, 2.0).unwrap();
        let c = s.terminal_voltage(&st, -2.0).unwrap();
        assert!(d.voltage < d.ocv && c.voltage > c.ocv);
        assert!(d.heat >= 0.0 && c.heat >= 0.0);
    }

    #[test]
    fn first_step_voltage_at_one_c() {
        let s = spm();
        let (_, out) = s.step(&s.initial_state(1.0, 298.15), 2.0, 298.15, 1.0).unwrap();
        assert!((3.9..=4.2).contains(&out.voltage), "{}", out.voltage);
    }

    #[test]
    fn failed_step_leaves_state_untouched() {
        let s = spm();
        let mut st = s.initial_state(0.5, 298.15);
        let before = st.clone();
        assert!(s.step_in_place(&mut st, 2.0, 298.15, 2.0).is_err());
        assert_eq!(st, before);
    }

    #[test]
    fn lithium_removal_lowers_inventory() {
        let s = spm();
        let mut st = s.initial_state(0.5, 298.15);
        let before = s.lithium_moles(&st);
        s.remove_lithium(&mut st, Electrode::Positive, 1e-3).unwrap();
        assert!((before - s.lithium_moles(&st) - 1e-3).abs() < 1e-12);
    }
}

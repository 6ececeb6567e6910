//! Temperature scaling and symmetric Butler–Volmer kinetics.

use super::{Electrode, SimError};

/// Molar gas constant, J/(mol·K).
pub const R_GAS: f64 = 8.314_462_618;
/// Faraday constant, C/mol.
pub const FARADAY: f64 = 96_485.332_12;

/// `value_ref · exp(−(Ea/R)(1/T − 1/T_ref))`.
pub fn arrhenius_scale(value_ref: f64, activation_energy: f64, temp: f64, temp_ref: f64) -> f64 {
    debug_assert!(temp > 0.0 && temp_ref > 0.0);
    if activation_energy == 0.0 || temp == temp_ref {
        return value_ref;
    }
    value_ref * (-(activation_energy / R_GAS) * (1.0 / temp - 1.0 / temp_ref)).exp()
}

/// Exchange current density (A/m²) with α = 0.5:
/// `F · k · c_e^½ · c_s^½ · (c_max − c_s)^½`.
///
/// A surface concentration at (or beyond) either end of the lattice means the
/// electrode is exhausted; that is reported as [`SimError::Saturation`].
pub fn exchange_current(
    electrode: Electrode,
    k_eff: f64,
    c_e: f64,
    c_surf: f64,
    c_max: f64,
) -> Result<f64, SimError> {
    if !(c_surf > 0.0 && c_surf < c_max) {
        return Err(SimError::Saturation {
            electrode,
            stoichiometry: c_surf / c_max,
        });
    }
    Ok(FARADAY * k_eff * (c_e * c_surf * (c_max - c_surf)).sqrt())
}

/// Symmetric Butler–Volmer inverse: `(2RT/F) · asinh(i / 2j0)`.
pub fn overpotential(i_area: f64, j0: f64, temp: f64) -> f64 {
    debug_assert!(j0 > 0.0);
    2.0 * R_GAS * temp / FARADAY * (i_area / (2.0 * j0)).asinh()
}

//! TOML parameter files.
//!
//! ```toml
//! [electrochemical]
//! D_n = 3.9e-14
//! # ... remaining electrochemical keys
//!
//! [thermal]
//! C_th = 45.0
//! hA = 0.1
//! T_ref = 298.15
//!
//! [windows]
//! x_n_min = 0.02
//! # ...
//!
//! [ocp.negative]      # optional, defaults are embedded
//! x = [0.0, 0.5, 1.0]
//! u = [1.0, 0.1, 0.0]
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CellParameters, OcpSet, SimError, Spm};

/// Solver switches that are not physical parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimOptions {
    /// Finite-volume shells per particle.
    #[serde(default = "default_shells")]
    pub shells: usize,
    /// Adds the reversible `−I T dU/dT` heat; needs `dudt` columns in the OCP tables.
    #[serde(default)]
    pub entropic_heat: bool,
}

fn default_shells() -> usize {
    20
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            shells: default_shells(),
            entropic_heat: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Electrochemical {
    #[serde(rename = "D_n")]
    d_n: f64,
    #[serde(rename = "D_p")]
    d_p: f64,
    k_n: f64,
    k_p: f64,
    #[serde(rename = "R_part_n")]
    r_part_n: f64,
    #[serde(rename = "R_part_p")]
    r_part_p: f64,
    eps_n: f64,
    eps_p: f64,
    #[serde(rename = "L_n")]
    l_n: f64,
    #[serde(rename = "L_p")]
    l_p: f64,
    #[serde(rename = "A_cell")]
    a_cell: f64,
    c_max_n: f64,
    c_max_p: f64,
    #[serde(rename = "R0")]
    r0: f64,
    #[serde(rename = "Ea_D")]
    ea_d: f64,
    #[serde(rename = "Ea_k")]
    ea_k: f64,
    c_e: f64,
    #[serde(rename = "Q_nom")]
    q_nom: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Thermal {
    #[serde(rename = "C_th")]
    c_th: f64,
    #[serde(rename = "hA")]
    h_a: f64,
    #[serde(rename = "T_ref")]
    t_ref: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Windows {
    x_n_min: f64,
    x_n_max: f64,
    x_p_min: f64,
    x_p_max: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Repr {
    electrochemical: Electrochemical,
    thermal: Thermal,
    windows: Windows,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ocp: Option<OcpSet>,
    #[serde(default)]
    options: SimOptions,
}

/// Everything needed to build a simulator.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamFile {
    pub params: CellParameters,
    pub ocp: OcpSet,
    pub options: SimOptions,
}

impl Default for ParamFile {
    fn default() -> Self {
        Self {
            params: CellParameters::default(),
            ocp: OcpSet::default(),
            options: SimOptions::default(),
        }
    }
}

impl ParamFile {
    pub fn from_toml_str(text: &str) -> Result<Self, SimError> {
        let r: Repr = toml::from_str(text).map_err(|e| SimError::Config(e.to_string()))?;
        let e = r.electrochemical;
        let params = CellParameters {
            d_n: e.d_n,
            d_p: e.d_p,
            k_n: e.k_n,
            k_p: e.k_p,
            r_part_n: e.r_part_n,
            r_part_p: e.r_part_p,
            eps_n: e.eps_n,
            eps_p: e.eps_p,
            l_n: e.l_n,
            l_p: e.l_p,
            a_cell: e.a_cell,
            c_max_n: e.c_max_n,
            c_max_p: e.c_max_p,
            x_n_min: r.windows.x_n_min,
            x_n_max: r.windows.x_n_max,
            x_p_min: r.windows.x_p_min,
            x_p_max: r.windows.x_p_max,
            r0: e.r0,
            c_th: r.thermal.c_th,
            h_a: r.thermal.h_a,
            ea_d: e.ea_d,
            ea_k: e.ea_k,
            c_e: e.c_e,
            t_ref: r.thermal.t_ref,
            q_nom: e.q_nom,
        };
        params.validate()?;
        Ok(Self {
            params,
            ocp: r.ocp.unwrap_or_default(),
            options: r.options,
        })
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SimError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        let p = &self.params;
        let r = Repr {
            electrochemical: Electrochemical {
                d_n: p.d_n,
                d_p: p.d_p,
                k_n: p.k_n,
                k_p: p.k_p,
                r_part_n: p.r_part_n,
                r_part_p: p.r_part_p,
                eps_n: p.eps_n,
                eps_p: p.eps_p,
                l_n: p.l_n,
                l_p: p.l_p,
                a_cell: p.a_cell,
                c_max_n: p.c_max_n,
                c_max_p: p.c_max_p,
                r0: p.r0,
                ea_d: p.ea_d,
                ea_k: p.ea_k,
                c_e: p.c_e,
                q_nom: p.q_nom,
            },
            thermal: Thermal {
                c_th: p.c_th,
                h_a: p.h_a,
                t_ref: p.t_ref,
            },
            windows: Windows {
                x_n_min: p.x_n_min,
                x_n_max: p.x_n_max,
                x_p_min: p.x_p_min,
                x_p_max: p.x_p_max,
            },
            ocp: Some(self.ocp.clone()),
            options: self.options.clone(),
        };
        toml::to_string(&r).expect("parameter file serialises")
    }

    pub fn simulator(&self) -> Result<Spm, SimError> {
        Spm::new(self.params.clone(), self.ocp.clone(), self.options.clone())
    }
}

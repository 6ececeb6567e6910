//! Open-circuit potential curves stored as monotone cubic breakpoint tables.

use serde::{Deserialize, Serialize};

use super::{Electrode, SimError};

/// Breakpoint table `U(x)` over stoichiometry `x ∈ [0, 1]`, interpolated with a
/// shape-preserving (Fritsch–Carlson) cubic Hermite spline.
///
/// `dudt` holds optional entropic coefficients dU/dT (V/K) at the same knots;
/// they are only consulted when the entropic heat term is switched on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "OcpTableRepr", into = "OcpTableRepr")]
pub struct OcpTable {
    x: Vec<f64>,
    u: Vec<f64>,
    slopes: Vec<f64>,
    dudt: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct OcpTableRepr {
    x: Vec<f64>,
    u: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dudt: Option<Vec<f64>>,
}

impl TryFrom<OcpTableRepr> for OcpTable {
    type Error = SimError;

    fn try_from(r: OcpTableRepr) -> Result<Self, SimError> {
        let mut t = OcpTable::new(r.x, r.u)?;
        if let Some(d) = r.dudt {
            t = t.with_entropic(d)?;
        }
        Ok(t)
    }
}

impl From<OcpTable> for OcpTableRepr {
    fn from(t: OcpTable) -> Self {
        OcpTableRepr {
            x: t.x,
            u: t.u,
            dudt: t.dudt,
        }
    }
}

impl OcpTable {
    /// Builds a table. Knots must start at 0, end at 1, be strictly increasing,
    /// and the potentials must be strictly decreasing.
    pub fn new(x: Vec<f64>, u: Vec<f64>) -> Result<Self, SimError> {
        if x.len() < 2 || x.len() != u.len() {
            return Err(SimError::InvalidTable(format!(
                "need at least two knots with matching lengths (x: {}, u: {})",
                x.len(),
                u.len()
            )));
        }
        if x[0] != 0.0 || x[x.len() - 1] != 1.0 {
            return Err(SimError::InvalidTable(
                "knots must span exactly [0, 1]".into(),
            ));
        }
        if x.iter().chain(&u).any(|v| !v.is_finite()) {
            return Err(SimError::InvalidTable("non-finite knot value".into()));
        }
        for w in x.windows(2) {
            if w[1] <= w[0] {
                return Err(SimError::InvalidTable(
                    "stoichiometry knots must be strictly increasing".into(),
                ));
            }
        }
        for w in u.windows(2) {
            if w[1] >= w[0] {
                return Err(SimError::InvalidTable(
                    "potential must be strictly decreasing in stoichiometry".into(),
                ));
            }
        }
        let slopes = pchip_slopes(&x, &u);
        Ok(Self {
            x,
            u,
            slopes,
            dudt: None,
        })
    }

    pub fn with_entropic(mut self, dudt: Vec<f64>) -> Result<Self, SimError> {
        if dudt.len() != self.x.len() || dudt.iter().any(|v| !v.is_finite()) {
            return Err(SimError::InvalidTable(
                "entropic coefficients must be finite and match the knot count".into(),
            ));
        }
        self.dudt = Some(dudt);
        Ok(self)
    }

    pub fn knots(&self) -> (&[f64], &[f64]) {
        (&self.x, &self.u)
    }

    /// Interpolated potential; `x` must already be validated to lie in [0, 1].
    pub(crate) fn eval_unchecked(&self, x: f64) -> f64 {
        let k = self.segment(x);
        let (x0, x1) = (self.x[k], self.x[k + 1]);
        let h = x1 - x0;
        let s = (x - x0) / h;
        let s2 = s * s;
        let s3 = s2 * s;
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        h00 * self.u[k] + h10 * h * self.slopes[k] + h01 * self.u[k + 1] + h11 * h * self.slopes[k + 1]
    }

    /// Entropic coefficient, linearly interpolated; zero when no column was given.
    pub(crate) fn entropic_unchecked(&self, x: f64) -> f64 {
        match &self.dudt {
            None => 0.0,
            Some(d) => {
                let k = self.segment(x);
                let s = (x - self.x[k]) / (self.x[k + 1] - self.x[k]);
                d[k] + s * (d[k + 1] - d[k])
            }
        }
    }

    fn segment(&self, x: f64) -> usize {
        let n = self.x.len();
        // index of the last knot <= x, clamped so that k + 1 is valid
        let k = self.x.partition_point(|&xi| xi <= x);
        k.saturating_sub(1).min(n - 2)
    }
}

fn pchip_slopes(x: &[f64], u: &[f64]) -> Vec<f64> {
    let n = x.len();
    let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
    let delta: Vec<f64> = (0..n - 1).map(|k| (u[k + 1] - u[k]) / h[k]).collect();
    if n == 2 {
        return vec![delta[0]; 2];
    }
    let mut m = vec![0.0; n];
    for k in 1..n - 1 {
        if delta[k - 1] * delta[k] > 0.0 {
            let w1 = 2.0 * h[k] + h[k - 1];
            let w2 = h[k] + 2.0 * h[k - 1];
            m[k] = (w1 + w2) / (w1 / delta[k - 1] + w2 / delta[k]);
        }
    }
    m[0] = end_slope(h[0], h[1], delta[0], delta[1]);
    m[n - 1] = end_slope(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
    m
}

fn end_slope(h0: f64, h1: f64, d0: f64, d1: f64) -> f64 {
    let m = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
    if m.signum() != d0.signum() {
        0.0
    } else if d0.signum() != d1.signum() && m.abs() > 3.0 * d0.abs() {
        3.0 * d0
    } else {
        m
    }
}

/// Potential curves for both electrodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcpSet {
    pub negative: OcpTable,
    pub positive: OcpTable,
}

impl OcpSet {
    pub fn table(&self, electrode: Electrode) -> &OcpTable {
        match electrode {
            Electrode::Negative => &self.negative,
            Electrode::Positive => &self.positive,
        }
    }
}

impl Default for OcpSet {
    /// Graphite negative and NCM523-like positive curves.
    fn default() -> Self {
        let negative = OcpTable::new(
            vec![
                0.0, 0.005, 0.01, 0.02, 0.04, 0.08, 0.15, 0.25, 0.35, 0.5, 0.6, 0.7, 0.8, 0.9,
                0.97, 1.0,
            ],
            vec![
                1.0, 0.62, 0.42, 0.26, 0.205, 0.17, 0.136, 0.117, 0.106, 0.096, 0.089, 0.085,
                0.081, 0.074, 0.055, 0.01,
            ],
        )
        .expect("default negative OCP table");
        let positive = OcpTable::new(
            vec![
                0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.85, 0.9, 0.94, 0.97, 0.99, 1.0,
            ],
            vec![
                4.8, 4.6, 4.45, 4.33, 4.2, 4.02, 3.87, 3.75, 3.64, 3.58, 3.5, 3.4, 3.2, 2.9, 2.6,
            ],
        )
        .expect("default positive OCP table");
        Self { negative, positive }
    }
}

/// Electrode open-circuit potential at a stoichiometry in [0, 1].
pub fn ocp_eval(ocp: &OcpSet, electrode: Electrode, stoichiometry: f64) -> Result<f64, SimError> {
    if !(0.0..=1.0).contains(&stoichiometry) {
        return Err(SimError::Domain {
            electrode,
            value: stoichiometry,
        });
    }
    Ok(ocp.table(electrode).eval_unchecked(stoichiometry))
}

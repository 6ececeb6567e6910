//! Fickian diffusion in a sphere: finite volumes on equal-width shells,
//! backward Euler in time.
//!
//! Shell `i` spans `[iΔr, (i+1)Δr]`. Dividing the balance by `4πΔr³` gives the
//! dimensionless row
//!
//! ```text
//! v_i/3 (c'_i − c_i) = λ a_i (c'_{i+1} − c'_i) − λ a_{i−1} (c'_i − c'_{i−1}) − [i = N−1] N² j dt / Δr
//! ```
//!
//! with `v_i = (i+1)³ − i³`, `a_i = (i+1)²` on interior faces, `λ = D dt / Δr²`
//! and `j` the outward molar flux at the surface. Interior face terms telescope,
//! so the discrete inventory changes by exactly the boundary term.

use super::SimError;

/// Radial finite-volume mesh for one representative particle.
#[derive(Debug, Clone, PartialEq)]
pub struct SphericalMesh {
    radius: f64,
    dr: f64,
    /// `v_i / 3`
    vol: Vec<f64>,
    /// `a_i` for the face between shell i and i+1 (length n − 1)
    face: Vec<f64>,
}

impl SphericalMesh {
    pub fn new(radius: f64, shells: usize) -> Result<Self, SimError> {
        if shells < 3 {
            return Err(SimError::Numerical(format!(
                "radial mesh needs at least 3 shells, got {shells}"
            )));
        }
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(SimError::Numerical(format!("invalid particle radius {radius}")));
        }
        let vol = (0..shells)
            .map(|i| {
                let (a, b) = (i as f64, (i + 1) as f64);
                (b * b * b - a * a * a) / 3.0
            })
            .collect();
        let face = (1..shells).map(|i| (i * i) as f64).collect();
        Ok(Self {
            radius,
            dr: radius / shells as f64,
            vol,
            face,
        })
    }

    pub fn shells(&self) -> usize {
        self.vol.len()
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    /// Volume-weighted mean concentration.
    pub fn mean(&self, c: &[f64]) -> f64 {
        let n = self.shells() as f64;
        self.inventory(c) / (n * n * n / 3.0)
    }

    /// Inventory in units of `4πΔr³ · mol/m³`; proportional to total moles.
    pub fn inventory(&self, c: &[f64]) -> f64 {
        self.vol.iter().zip(c).map(|(v, c)| v * c).sum()
    }

    /// Total moles of lithium held in the particle.
    pub fn moles(&self, c: &[f64]) -> f64 {
        4.0 * std::f64::consts::PI * self.dr.powi(3) * self.inventory(c)
    }

    /// Surface concentration extrapolated from the outer shell centre using the
    /// imposed boundary gradient `−D ∂c/∂r = j`.
    pub fn surface(&self, c: &[f64], flux: f64, d_eff: f64) -> f64 {
        c[c.len() - 1] - flux * 0.5 * self.dr / d_eff
    }

    /// One implicit step, writing the new profile into `out`.
    ///
    /// `flux` is the outward molar flux at the surface (mol m⁻² s⁻¹): positive
    /// removes lithium from the particle.
    pub fn step_into(
        &self,
        c: &[f64],
        flux: f64,
        d_eff: f64,
        dt: f64,
        out: &mut [f64],
    ) -> Result<(), SimError> {
        let n = self.shells();
        assert_eq!(c.len(), n, "profile length does not match mesh");
        assert_eq!(out.len(), n, "output length does not match mesh");
        if !(dt > 0.0 && d_eff > 0.0) {
            return Err(SimError::Numerical(format!(
                "diffusion step needs dt > 0 and D > 0 (dt={dt}, D={d_eff})"
            )));
        }
        let lam = d_eff * dt / (self.dr * self.dr);
        let boundary = (n * n) as f64 * flux * dt / self.dr;

        // Thomas algorithm; sub/super diagonals are −λ a.
        let mut cp = [0.0f64; 64];
        let mut scratch;
        let cprime: &mut [f64] = if n <= cp.len() {
            &mut cp[..n]
        } else {
            scratch = vec![0.0; n];
            &mut scratch
        };
        let mut prev_d = 0.0;
        for i in 0..n {
            let lower = if i > 0 { lam * self.face[i - 1] } else { 0.0 };
            let upper = if i + 1 < n { lam * self.face[i] } else { 0.0 };
            let diag = self.vol[i] + lower + upper;
            let mut rhs = self.vol[i] * c[i];
            if i + 1 == n {
                rhs -= boundary;
            }
            let denom = diag + lower * if i > 0 { cprime[i - 1] } else { 0.0 };
            if denom == 0.0 || !denom.is_finite() {
                return Err(SimError::Numerical("singular tridiagonal pivot".into()));
            }
            cprime[i] = -upper / denom;
            prev_d = (rhs + lower * if i > 0 { prev_d } else { 0.0 }) / denom;
            out[i] = prev_d;
        }
        for i in (0..n - 1).rev() {
            out[i] -= cprime[i] * out[i + 1];
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(SimError::Numerical("non-finite concentration after diffusion step".into()));
        }
        Ok(())
    }
}

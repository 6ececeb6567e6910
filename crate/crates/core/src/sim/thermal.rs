use super::SimError;

/// Lumped single-node energy balance, forward Euler:
/// `T' = T + dt (Q − hA (T − T_amb)) / C_th`.
pub fn thermal_step(
    temp: f64,
    heat: f64,
    ambient: f64,
    heat_capacity: f64,
    conductance: f64,
    dt: f64,
) -> Result<f64, SimError> {
    let next = temp + dt * (heat - conductance * (temp - ambient)) / heat_capacity;
    if next.is_finite() {
        Ok(next)
    } else {
        Err(SimError::Numerical(format!(
            "non-finite temperature (T={temp}, Q={heat}, dt={dt})"
        )))
    }
}

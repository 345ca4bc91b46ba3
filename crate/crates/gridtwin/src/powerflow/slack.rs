//! Slack phasor reconstruction from a line-voltage triple.
//!
//! Panel meters at the point of common coupling report the three line
//! voltage magnitudes but no angles. We recover per-phase phasors by fixing
//! the angles at 0, -120 and +120 degrees and fitting the three phase
//! magnitudes so the reconstructed line voltages match the measured ones in
//! a least-squares sense. For a consistent triple the fit is exact; for
//! balanced inputs it reduces to v / sqrt(3).

use nalgebra::{Matrix3, Vector3};
use num_complex::Complex64;

use super::PfError;

fn unit_phasors() -> [Complex64; 3] {
    let third = 2.0 * std::f64::consts::FRAC_PI_3;
    [
        Complex64::from_polar(1.0, 0.0),
        Complex64::from_polar(1.0, -third),
        Complex64::from_polar(1.0, third),
    ]
}

/// Phase phasors in volts (a, b, c) whose pairwise differences reproduce the
/// given line voltage magnitudes, also in volts.
pub fn slack_from_line_voltages(
    v_ab: f64,
    v_bc: f64,
    v_ca: f64,
) -> Result<[Complex64; 3], PfError> {
    let v = [v_ab, v_bc, v_ca];
    if v.iter().any(|x| !x.is_finite() || *x <= 0.0) {
        return Err(PfError::SlackInput(format!(
            "line voltages must be positive and finite, got ({v_ab}, {v_bc}, {v_ca})"
        )));
    }
    // The three magnitudes form a closed phasor triangle, so each must not
    // exceed the sum of the other two.
    for k in 0..3 {
        let others = v[(k + 1) % 3] + v[(k + 2) % 3];
        if v[k] > others * (1.0 + 1e-9) {
            return Err(PfError::SlackInput(format!(
                "line voltages ({v_ab}, {v_bc}, {v_ca}) violate the triangle inequality"
            )));
        }
    }

    let units = unit_phasors();
    let pairs = [(0usize, 1usize), (1, 2), (2, 0)];
    let mut m = Vector3::from_element((v_ab + v_bc + v_ca) / (3.0 * 3f64.sqrt()));

    // Gauss-Newton on r_k = |m_p u_p - m_q u_q| - v_k.
    for _ in 0..50 {
        let mut residual = Vector3::zeros();
        let mut jacobian = Matrix3::zeros();
        for (k, &(p, q)) in pairs.iter().enumerate() {
            let d = m[p] * units[p] - m[q] * units[q];
            let mag = d.norm().max(1e-30);
            residual[k] = mag - v[k];
            jacobian[(k, p)] = (d.conj() * units[p]).re / mag;
            jacobian[(k, q)] = -(d.conj() * units[q]).re / mag;
        }
        let normal = jacobian.transpose() * jacobian;
        let rhs = -(jacobian.transpose() * residual);
        let step = normal
            .lu()
            .solve(&rhs)
            .ok_or_else(|| PfError::SlackInput("magnitude fit became degenerate".into()))?;
        m += step;
        if step.amax() < 1e-10 * m.amax().max(1.0) {
            break;
        }
    }

    if m.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
        return Err(PfError::SlackInput(format!(
            "no positive phase magnitudes fit line voltages ({v_ab}, {v_bc}, {v_ca})"
        )));
    }
    Ok([m[0] * units[0], m[1] * units[1], m[2] * units[2]])
}

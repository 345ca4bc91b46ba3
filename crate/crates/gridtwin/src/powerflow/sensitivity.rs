//! Small-signal voltage sensitivity around a solved operating point.
//!
//! [`linearize`] differentiates the power-flow equations at the solution:
//! one Newton Jacobian factorisation gives the state shift for a balanced
//! active and reactive injection at the chosen bus, and the chain rule maps
//! that to voltage magnitudes. The result is the `3n x 2` matrix `M` of the
//! twin's linear voltage model,
//!
//! ```text
//! v_predicted = M [p, q]^T + v_twin
//! ```
//!
//! with `p`, `q` the three-phase injection in per-unit (generation positive)
//! and `v_twin` the magnitudes at the linearisation point. Slack rows are
//! zero: the slack bus holds its voltage by definition.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use super::newton::injection_partials;
use super::{PfError, PowerFlowSolution};
use crate::netmodel::{build_admittance, NetworkModel, NodeIndex};

#[derive(Debug, Clone)]
pub struct SensitivityMatrix {
    pub injection_bus: String,
    pub index: NodeIndex,
    /// Rows follow the node index; columns are (d|V|/dP, d|V|/dQ) in
    /// per-unit voltage per per-unit three-phase power.
    pub m: DMatrix<f64>,
    /// Voltage magnitudes at the linearisation point, pu.
    pub v_twin_pu: DVector<f64>,
}

/// Voltage magnitudes predicted by the linear model for a balanced
/// three-phase injection of `p_pu + j q_pu` (system base, generation
/// positive) at the sensitivity's bus.
pub fn predict_voltages(sens: &SensitivityMatrix, p_pu: f64, q_pu: f64) -> DVector<f64> {
    let mut v = sens.v_twin_pu.clone();
    for n in 0..v.len() {
        v[n] += sens.m[(n, 0)] * p_pu + sens.m[(n, 1)] * q_pu;
    }
    v
}

/// Differentiates a solved power flow with respect to a balanced complex
/// injection at `injection_bus`.
pub fn linearize(
    model: &NetworkModel,
    solution: &PowerFlowSolution,
    injection_bus: &str,
) -> Result<SensitivityMatrix, PfError> {
    let bus_idx = model
        .bus_idx(injection_bus)
        .ok_or_else(|| PfError::LinearizationBus {
            bus: injection_bus.to_string(),
            reason: "no such bus".into(),
        })?;
    if injection_bus == model.slack_bus {
        return Err(PfError::LinearizationBus {
            bus: injection_bus.to_string(),
            reason: "the slack bus absorbs injections without moving".into(),
        });
    }

    let index = solution.state.index.clone();
    let bus_nodes = index.bus_nodes(bus_idx);
    if bus_nodes.len() != 3 {
        return Err(PfError::LinearizationBus {
            bus: injection_bus.to_string(),
            reason: "balanced injections need all three phases".into(),
        });
    }

    let ybus = build_admittance(model)?.ybus(model, &index);
    let slack_idx = model.bus_idx(&model.slack_bus).expect("validated slack");
    let slack_nodes = index.bus_nodes(slack_idx);
    let free_nodes: Vec<usize> = (0..index.len())
        .filter(|n| !slack_nodes.contains(n))
        .collect();
    let nfree = free_nodes.len();

    let u = &solution.state.voltages_pu;
    let i_node = &ybus * u;
    let mut jac = DMatrix::zeros(2 * nfree, 2 * nfree);
    for (r, &n) in free_nodes.iter().enumerate() {
        for (c, &m_col) in free_nodes.iter().enumerate() {
            let block = injection_partials(ybus[(n, m_col)], u[n], i_node[n], n == m_col);
            jac[(r, c)] = block[0][0];
            jac[(r, c + nfree)] = block[0][1];
            jac[(r + nfree, c)] = block[1][0];
            jac[(r + nfree, c + nfree)] = block[1][1];
        }
    }
    let lu = jac.lu();

    // Balanced unit injections, P then Q. A unit three-phase injection puts
    // a third of the power on each phase, which is exactly 1.0 in the
    // per-phase per-unit the node equations use.
    let mut m = DMatrix::zeros(index.len(), 2);
    for (col, reactive) in [(0usize, false), (1, true)] {
        let mut rhs = DVector::zeros(2 * nfree);
        for &node in &bus_nodes {
            let r = free_nodes
                .iter()
                .position(|&n| n == node)
                .expect("injection bus is not the slack");
            if reactive {
                rhs[r + nfree] = 1.0;
            } else {
                rhs[r] = 1.0;
            }
        }
        let dx = lu.solve(&rhs).ok_or_else(|| PfError::SingularJacobian {
            unreachable: model.unreachable_buses(),
        })?;
        for (r, &n) in free_nodes.iter().enumerate() {
            let du = Complex64::new(dx[r], dx[r + nfree]);
            let mag = u[n].norm();
            if mag > 0.0 {
                m[(n, col)] = (u[n].re * du.re + u[n].im * du.im) / mag;
            }
        }
    }

    Ok(SensitivityMatrix {
        injection_bus: injection_bus.to_string(),
        index,
        m,
        v_twin_pu: solution.state.magnitudes_pu(),
    })
}

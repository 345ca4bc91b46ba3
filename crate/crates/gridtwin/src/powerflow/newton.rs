//! Newton power flow on rectangular voltage coordinates.
//!
//! State is the complex voltage at every non-slack node, `U = e + jf`. With
//! nodal currents `I = Y U = a + jb`, the per-node powers are
//!
//! ```text
//! P = e a + f b        Q = f a - e b
//! ```
//!
//! and the Jacobian entries follow directly:
//!
//! ```text
//! dP/de_m = G e + B f + [n=m] a      dP/df_m = -B e + G f + [n=m] b
//! dQ/de_m = G f - B e - [n=m] b      dQ/df_m = -B f - G e + [n=m] a
//! ```
//!
//! Rectangular coordinates keep the mismatch quadratic in the state, which
//! makes the iteration robust through transformer phase shifts, and the
//! initial state is the exact no-load profile (slack propagated through
//! every ratio), so the no-load solve converges without a single step.

use nalgebra::{DMatrix, DVector, Vector3};
use num_complex::Complex64;

use super::{ComplexVoltageState, InjectionSet, PfError, SlackSpec};
use crate::netmodel::{build_admittance, NetworkModel, NodeIndex};
use crate::phase::Phase;

#[derive(Debug, Clone, Copy)]
pub struct PowerFlowOptions {
    /// Convergence threshold on the largest per-phase power mismatch, pu.
    pub tolerance_pu: f64,
    pub max_iterations: usize,
}

impl Default for PowerFlowOptions {
    fn default() -> Self {
        PowerFlowOptions {
            tolerance_pu: 1e-8,
            max_iterations: 50,
        }
    }
}

/// Per-phase complex flow of one branch at the solved state.
#[derive(Debug, Clone)]
pub struct BranchFlow {
    pub branch_id: String,
    pub from: String,
    pub to: String,
    /// Power entering the branch at the from end, pu per phase.
    pub s_from_pu: Vector3<Complex64>,
    /// Power entering the branch at the to end, pu per phase.
    pub s_to_pu: Vector3<Complex64>,
    pub i_from_pu: Vector3<Complex64>,
    pub i_to_pu: Vector3<Complex64>,
}

#[derive(Debug, Clone)]
pub struct PowerFlowSolution {
    pub state: ComplexVoltageState,
    pub iterations: usize,
    pub max_mismatch_pu: f64,
    /// Net power the slack bus injects, pu per phase.
    pub slack_power_pu: Vector3<Complex64>,
    pub branch_flows: Vec<BranchFlow>,
    /// Sum of all nodal injections: series plus shunt absorption.
    pub total_loss_pu: Complex64,
}

/// 2x2 block of power-injection partial derivatives for one node with
/// respect to the rectangular voltage at another (or the same) node.
///
/// Returns rows (dP, dQ) by columns (de, df); `u_n` and `i_n` are the
/// voltage and nodal current at the node whose injection is differentiated.
pub(crate) fn injection_partials(
    y_nm: Complex64,
    u_n: Complex64,
    i_n: Complex64,
    same_node: bool,
) -> [[f64; 2]; 2] {
    let (g, b) = (y_nm.re, y_nm.im);
    let (e, f) = (u_n.re, u_n.im);
    let mut block = [
        [g * e + b * f, -b * e + g * f],
        [g * f - b * e, -b * f - g * e],
    ];
    if same_node {
        block[0][0] += i_n.re;
        block[0][1] += i_n.im;
        block[1][0] -= i_n.im;
        block[1][1] += i_n.re;
    }
    block
}

/// Balanced unit phasor for a phase, used as the last-resort initial state.
pub(crate) fn balanced_phasor(phase: Phase) -> Complex64 {
    let third = 2.0 * std::f64::consts::FRAC_PI_3;
    match phase {
        Phase::A => Complex64::from_polar(1.0, 0.0),
        Phase::B => Complex64::from_polar(1.0, -third),
        Phase::C => Complex64::from_polar(1.0, third),
    }
}

/// Exact no-load voltage profile: slack phasors propagated through the
/// network, including transformer ratios and phase shifts. Falls back to a
/// balanced flat profile when the reduced admittance is singular (the solver
/// then reports the singularity with context).
pub(crate) fn no_load_state(
    ybus: &DMatrix<Complex64>,
    index: &NodeIndex,
    slack_nodes: &[usize],
    free_nodes: &[usize],
    slack: &SlackSpec,
) -> DVector<Complex64> {
    let mut u = DVector::from_fn(index.len(), |n, _| balanced_phasor(index.node(n).1));
    for (k, &node) in slack_nodes.iter().enumerate() {
        u[node] = slack.phasors_pu[k];
    }
    if free_nodes.is_empty() {
        return u;
    }
    let m = free_nodes.len();
    let y_rr = DMatrix::from_fn(m, m, |r, c| ybus[(free_nodes[r], free_nodes[c])]);
    let mut rhs = DVector::from_element(m, Complex64::new(0.0, 0.0));
    for (r, &node) in free_nodes.iter().enumerate() {
        for (k, &s) in slack_nodes.iter().enumerate() {
            rhs[r] -= ybus[(node, s)] * slack.phasors_pu[k];
        }
    }
    if let Some(u_free) = y_rr.lu().solve(&rhs) {
        for (r, &node) in free_nodes.iter().enumerate() {
            u[node] = u_free[r];
        }
    }
    u
}

/// Solves the unbalanced power flow for the given injections and slack.
pub fn solve_powerflow(
    model: &NetworkModel,
    injections: &InjectionSet,
    slack: &SlackSpec,
    options: &PowerFlowOptions,
) -> Result<PowerFlowSolution, PfError> {
    model.validate()?;
    let index = model.node_index();
    let admittance = build_admittance(model)?;
    let ybus = admittance.ybus(model, &index);

    let slack_idx = model.bus_idx(&model.slack_bus).expect("validated slack");
    let slack_nodes = index.bus_nodes(slack_idx);
    let free_nodes: Vec<usize> = (0..index.len())
        .filter(|n| !slack_nodes.contains(n))
        .collect();
    let s_spec = injections.node_injections_pu(model, &index)?;

    let mut u = no_load_state(&ybus, &index, &slack_nodes, &free_nodes, slack);
    let m = free_nodes.len();
    let mut history = Vec::new();
    let mut iterations = 0;

    loop {
        let i_node = &ybus * &u;
        let s_calc = u.zip_map(&i_node, |u, i| u * i.conj());
        let mut worst = 0.0f64;
        let mut worst_node = free_nodes.first().copied().unwrap_or(0);
        for &n in &free_nodes {
            let ds = s_spec[n] - s_calc[n];
            let local = ds.re.abs().max(ds.im.abs());
            if !local.is_finite() {
                worst = f64::INFINITY;
                worst_node = n;
                break;
            }
            if local > worst {
                worst = local;
                worst_node = n;
            }
        }
        history.push(worst);

        if worst <= options.tolerance_pu || m == 0 {
            return Ok(finish(
                model, &admittance, &ybus, index, u, iterations, worst, slack_idx,
            ));
        }
        if iterations >= options.max_iterations {
            let (bus_idx, phase) = index.node(worst_node);
            return Err(PfError::NotConverged {
                iterations,
                worst_bus: model.buses[bus_idx].id.clone(),
                worst_phase: phase,
                worst_mismatch_pu: worst,
                mismatch_history: history,
            });
        }

        let mut jac = DMatrix::zeros(2 * m, 2 * m);
        for (r, &n) in free_nodes.iter().enumerate() {
            for (c, &nm) in free_nodes.iter().enumerate() {
                let block = injection_partials(ybus[(n, nm)], u[n], i_node[n], n == nm);
                jac[(r, c)] = block[0][0];
                jac[(r, c + m)] = block[0][1];
                jac[(r + m, c)] = block[1][0];
                jac[(r + m, c + m)] = block[1][1];
            }
        }
        let mut rhs = DVector::zeros(2 * m);
        for (r, &n) in free_nodes.iter().enumerate() {
            let ds = s_spec[n] - s_calc[n];
            rhs[r] = ds.re;
            rhs[r + m] = ds.im;
        }
        let step = jac.lu().solve(&rhs).ok_or_else(|| PfError::SingularJacobian {
            unreachable: model.unreachable_buses(),
        })?;
        for (r, &n) in free_nodes.iter().enumerate() {
            u[n] += Complex64::new(step[r], step[r + m]);
        }
        iterations += 1;
    }
}

#[allow(clippy::too_many_arguments)]
fn finish(
    model: &NetworkModel,
    admittance: &crate::netmodel::AdmittanceMap,
    ybus: &DMatrix<Complex64>,
    index: NodeIndex,
    u: DVector<Complex64>,
    iterations: usize,
    max_mismatch_pu: f64,
    slack_idx: usize,
) -> PowerFlowSolution {
    let state = ComplexVoltageState {
        index,
        voltages_pu: u,
    };
    let mut branch_flows = Vec::with_capacity(admittance.branches.len());
    let mut total_loss = Complex64::new(0.0, 0.0);
    for branch in &admittance.branches {
        let from = model.bus_idx(&branch.from).expect("validated");
        let to = model.bus_idx(&branch.to).expect("validated");
        let u_f = state.bus_voltages(from);
        let u_t = state.bus_voltages(to);
        let i_f = branch.current_from(&u_f, &u_t);
        let i_t = branch.current_to(&u_f, &u_t);
        let s_f = Vector3::from_fn(|k, _| u_f[k] * i_f[k].conj());
        let s_t = Vector3::from_fn(|k, _| u_t[k] * i_t[k].conj());
        total_loss += s_f.sum() + s_t.sum();
        branch_flows.push(BranchFlow {
            branch_id: branch.id.clone(),
            from: branch.from.clone(),
            to: branch.to.clone(),
            s_from_pu: s_f,
            s_to_pu: s_t,
            i_from_pu: i_f,
            i_to_pu: i_t,
        });
    }
    let u_slack = state.bus_voltages(slack_idx);
    let slack_nodes = state.index.bus_nodes(slack_idx);
    let i_all = ybus * &state.voltages_pu;
    let slack_power =
        Vector3::from_fn(|k, _| u_slack[k] * i_all[slack_nodes[k]].conj());
    PowerFlowSolution {
        state,
        iterations,
        max_mismatch_pu,
        slack_power_pu: slack_power,
        branch_flows,
        total_loss_pu: total_loss,
    }
}

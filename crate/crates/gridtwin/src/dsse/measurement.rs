//! Measurement functions for the state estimator.
//!
//! The state is the rectangular complex voltage at every node, slack
//! included, flattened as `x = [e_0 .. e_{N-1}, f_0 .. f_{N-1}]` in node
//! index order. Every measurement is expressed in per unit on the network
//! bases so that weighting is purely statistical.
//!
//! Magnitude-only measurements leave two gauge freedoms: a global rotation
//! (complex powers and all magnitudes are invariant under `U -> e^{j t} U`)
//! and, on networks whose slack side has no zero-sequence ground path, a
//! uniform zero-sequence offset. Both are closed by reference equations
//! pinned with a tiny sigma rather than by eliminating state variables.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::phase::Phase;

/// Guard for magnitude derivatives at a vanishing phasor.
const MAG_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeasurementKind {
    /// Line voltage magnitude between two nodes of one bus, per unit on the
    /// line-line base: `|U_p - U_q| / sqrt(3)`.
    LineVoltageMag { from_node: usize, to_node: usize },
    /// Phase voltage magnitude at one node, per unit on the phase base.
    PhaseVoltageMag { node: usize },
    /// Magnitude of the net nodal current, per unit.
    CurrentMag { node: usize },
    /// Net active power injected at one node, per unit per phase.
    ActiveInjection { node: usize },
    /// Net reactive power injected at one node, per unit per phase.
    ReactiveInjection { node: usize },
    /// Imaginary voltage part at one node; pins the rotation gauge.
    AngleReference { node: usize },
    /// Real part of the phasor sum over a bus; pins zero sequence.
    ZeroSequenceRe { nodes: [usize; 3] },
    /// Imaginary part of the phasor sum over a bus.
    ZeroSequenceIm { nodes: [usize; 3] },
}

/// One row of the estimation problem: a measured (or virtual) value with
/// its standard deviation and a label tracing where it came from.
#[derive(Debug, Clone)]
pub struct MeasurementEquation {
    pub kind: MeasurementKind,
    pub value_pu: f64,
    pub sigma_pu: f64,
    /// Origin, e.g. `pcc:v_ab`, `zero_injection:mv4:b`, `gauge:rotation`.
    pub source: String,
}

/// Shared per-iteration quantities: the state and the nodal currents.
pub(crate) struct EvalContext<'a> {
    pub ybus: &'a DMatrix<Complex64>,
    pub u: &'a DVector<Complex64>,
    pub i: &'a DVector<Complex64>,
}

impl MeasurementKind {
    pub(crate) fn evaluate(&self, ctx: &EvalContext) -> f64 {
        match *self {
            MeasurementKind::LineVoltageMag { from_node, to_node } => {
                (ctx.u[from_node] - ctx.u[to_node]).norm() / 3.0_f64.sqrt()
            }
            MeasurementKind::PhaseVoltageMag { node } => ctx.u[node].norm(),
            MeasurementKind::CurrentMag { node } => ctx.i[node].norm(),
            MeasurementKind::ActiveInjection { node } => {
                (ctx.u[node] * ctx.i[node].conj()).re
            }
            MeasurementKind::ReactiveInjection { node } => {
                (ctx.u[node] * ctx.i[node].conj()).im
            }
            MeasurementKind::AngleReference { node } => ctx.u[node].im,
            MeasurementKind::ZeroSequenceRe { nodes } => {
                nodes.iter().map(|&n| ctx.u[n].re).sum()
            }
            MeasurementKind::ZeroSequenceIm { nodes } => {
                nodes.iter().map(|&n| ctx.u[n].im).sum()
            }
        }
    }

    /// Writes `dh/dx` into `row`, which must be zeroed and of length `2 N`.
    pub(crate) fn fill_jacobian_row(&self, ctx: &EvalContext, row: &mut [f64]) {
        let n_nodes = ctx.u.len();
        match *self {
            MeasurementKind::LineVoltageMag { from_node, to_node } => {
                let d = ctx.u[from_node] - ctx.u[to_node];
                let mag = d.norm().max(MAG_FLOOR) * 3.0_f64.sqrt();
                row[from_node] = d.re / mag;
                row[from_node + n_nodes] = d.im / mag;
                row[to_node] = -d.re / mag;
                row[to_node + n_nodes] = -d.im / mag;
            }
            MeasurementKind::PhaseVoltageMag { node } => {
                let u = ctx.u[node];
                let mag = u.norm().max(MAG_FLOOR);
                row[node] = u.re / mag;
                row[node + n_nodes] = u.im / mag;
            }
            MeasurementKind::CurrentMag { node } => {
                let i = ctx.i[node];
                let mag = i.norm().max(MAG_FLOOR);
                for m in 0..n_nodes {
                    let y = ctx.ybus[(node, m)];
                    if y == Complex64::new(0.0, 0.0) {
                        continue;
                    }
                    let c = i.conj() * y;
                    row[m] = c.re / mag;
                    row[m + n_nodes] = -c.im / mag;
                }
            }
            MeasurementKind::ActiveInjection { node } => {
                for m in 0..n_nodes {
                    let y = ctx.ybus[(node, m)];
                    if y == Complex64::new(0.0, 0.0) && node != m {
                        continue;
                    }
                    let block = crate::powerflow::injection_partials(
                        y,
                        ctx.u[node],
                        ctx.i[node],
                        node == m,
                    );
                    row[m] = block[0][0];
                    row[m + n_nodes] = block[0][1];
                }
            }
            MeasurementKind::ReactiveInjection { node } => {
                for m in 0..n_nodes {
                    let y = ctx.ybus[(node, m)];
                    if y == Complex64::new(0.0, 0.0) && node != m {
                        continue;
                    }
                    let block = crate::powerflow::injection_partials(
                        y,
                        ctx.u[node],
                        ctx.i[node],
                        node == m,
                    );
                    row[m] = block[1][0];
                    row[m + n_nodes] = block[1][1];
                }
            }
            MeasurementKind::AngleReference { node } => {
                row[node + n_nodes] = 1.0;
            }
            MeasurementKind::ZeroSequenceRe { nodes } => {
                for &n in &nodes {
                    row[n] = 1.0;
                }
            }
            MeasurementKind::ZeroSequenceIm { nodes } => {
                for &n in &nodes {
                    row[n + n_nodes] = 1.0;
                }
            }
        }
    }
}

/// Convenience for labelling sources by bus and phase.
pub(crate) fn phase_suffix(phase: Phase) -> &'static str {
    match phase {
        Phase::A => "a",
        Phase::B => "b",
        Phase::C => "c",
    }
}

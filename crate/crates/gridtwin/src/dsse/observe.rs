//! Observability analysis: which bus voltages does a measurement set
//! actually determine?
//!
//! The test is algebraic. The unit-weight measurement Jacobian is formed at
//! a generic operating point and the null space of `J' J` is extracted from
//! its eigendecomposition. Any state direction in that null space can change
//! without moving a single measured value, so every bus with meaningful
//! weight in a null direction is reported as unobservable. Measurement
//! values are irrelevant here; only which equations exist matters, so
//! weighting is deliberately uniform to keep the rank decision free of
//! accuracy assumptions.
//!
//! The evaluation point is the no-load profile with a small fixed-seed
//! perturbation. The exact no-load state is rank-deficient by accident: all
//! nodal currents vanish there, which zeroes every current-magnitude row,
//! and its symmetry can hide the generic rank. Any generic state gives the
//! same answer; the fixed seed keeps the report reproducible.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use super::measurement::{EvalContext, MeasurementEquation};
use super::DsseError;
use crate::netmodel::{build_admittance, NetworkModel};
use crate::powerflow::{no_load_state, SlackSpec};

/// Relative eigenvalue threshold below which a direction counts as null.
const NULL_EIGEN_REL: f64 = 1e-10;
/// Per-bus squared weight in a null direction that marks it unobservable.
const BUS_WEIGHT_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct ObservabilityReport {
    pub observable: bool,
    /// Dimension of the unseen state space.
    pub null_dimension: usize,
    /// Buses with weight in some null direction, in declaration order.
    pub unobservable_buses: Vec<String>,
    /// Unit-norm state directions spanning the null space, for diagnostics.
    pub null_directions: Vec<DVector<f64>>,
    /// The generic state the rank was evaluated at.
    pub evaluation_state: DVector<Complex64>,
}

/// Analyze which buses the given measurement equations can see.
pub fn analyze_observability(
    model: &NetworkModel,
    equations: &[MeasurementEquation],
) -> Result<ObservabilityReport, DsseError> {
    model.validate()?;
    if equations.is_empty() {
        return Err(DsseError::NoMeasurements);
    }
    let index = model.node_index();
    let n_nodes = index.len();
    let admittance = build_admittance(model)?;
    let ybus = admittance.ybus(model, &index);

    let slack_idx = model.bus_idx(&model.slack_bus).expect("validated slack");
    let slack_nodes = index.bus_nodes(slack_idx);
    let free_nodes: Vec<usize> = (0..n_nodes).filter(|n| !slack_nodes.contains(n)).collect();
    let mut u = no_load_state(
        &ybus,
        &index,
        &slack_nodes,
        &free_nodes,
        &SlackSpec::balanced(1.0),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(0x0b5e);
    for value in u.iter_mut() {
        let mag: f64 = rng.gen_range(-0.03..0.03);
        let ang: f64 = rng.gen_range(-0.05..0.05);
        *value *= Complex64::from_polar(1.0 + mag, ang);
    }
    let i = &ybus * &u;
    let ctx = EvalContext {
        ybus: &ybus,
        u: &u,
        i: &i,
    };

    let cols = 2 * n_nodes;
    let mut jac = DMatrix::zeros(equations.len(), cols);
    let mut row = vec![0.0; cols];
    for (r, eq) in equations.iter().enumerate() {
        row.iter_mut().for_each(|v| *v = 0.0);
        eq.kind.fill_jacobian_row(&ctx, &mut row);
        for (c, value) in row.iter().enumerate() {
            if *value != 0.0 {
                jac[(r, c)] = *value;
            }
        }
    }

    let gram = jac.transpose() * &jac;
    let eigen = gram.symmetric_eigen();
    let max_eigen = eigen.eigenvalues.amax().max(1e-300);

    let mut null_directions = Vec::new();
    for (k, &value) in eigen.eigenvalues.iter().enumerate() {
        if value < NULL_EIGEN_REL * max_eigen {
            null_directions.push(DVector::from(eigen.eigenvectors.column(k).clone_owned()));
        }
    }

    let mut unobservable_buses = Vec::new();
    for (bus_idx, bus) in model.buses.iter().enumerate() {
        let nodes = index.bus_nodes(bus_idx);
        let weight: f64 = null_directions
            .iter()
            .map(|v| {
                nodes
                    .iter()
                    .map(|&n| v[n] * v[n] + v[n + n_nodes] * v[n + n_nodes])
                    .sum::<f64>()
            })
            .sum();
        if weight > BUS_WEIGHT_FLOOR {
            unobservable_buses.push(bus.id.clone());
        }
    }

    Ok(ObservabilityReport {
        observable: null_directions.is_empty(),
        null_dimension: null_directions.len(),
        unobservable_buses,
        null_directions,
        evaluation_state: u,
    })
}

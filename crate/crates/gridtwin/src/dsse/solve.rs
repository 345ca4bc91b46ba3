//! Weighted least-squares state estimation.
//!
//! Minimises the sum of squared sigma-scaled residuals over the full
//! rectangular voltage state with a Levenberg-Marquardt iteration. Each step
//! solves the damped linear least-squares problem on the augmented matrix
//! `[J; sqrt(lambda) I]` by Householder QR rather than forming normal
//! equations, which keeps the solve well conditioned even though gauge pins
//! and virtual injections carry weights a million times larger than metered
//! channels. The damping follows the standard gain-ratio update: shrink
//! after a productive step, grow geometrically after a rejected one.
//! Convergence is judged by gradient orthogonality, which stays meaningful
//! across those weight scales.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use super::measurement::{EvalContext, MeasurementEquation, MeasurementKind};
use super::DsseError;
use crate::powerflow::{
    no_load_state, solve_powerflow, ComplexVoltageState, InjectionSet, PowerFlowOptions, SlackSpec,
};
use crate::netmodel::{build_admittance, NetworkModel};

#[derive(Debug, Clone, Copy)]
pub struct EstimatorOptions {
    pub max_iterations: usize,
    /// Convergence threshold on gradient orthogonality: the estimate is
    /// accepted once every Jacobian column is within this cosine of
    /// perpendicular to the weighted residual. Scale invariant, so it works
    /// unchanged whether sigmas sit at 1e-6 or 1e-1.
    pub gradient_tolerance: f64,
    /// Stop polishing once an accepted step falls below this fraction of the
    /// state magnitude.
    pub step_tolerance: f64,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        EstimatorOptions {
            max_iterations: 100,
            gradient_tolerance: 1e-6,
            step_tolerance: 1e-12,
        }
    }
}

/// One measurement's fit at the estimated state.
#[derive(Debug, Clone)]
pub struct ResidualEntry {
    pub source: String,
    pub measured_pu: f64,
    pub estimated_pu: f64,
    /// Estimated minus measured, pu.
    pub residual_pu: f64,
    /// Residual over sigma.
    pub weighted: f64,
}

#[derive(Debug, Clone)]
pub struct StateEstimate {
    pub state: ComplexVoltageState,
    /// Sum of squared weighted residuals at the solution.
    pub objective: f64,
    pub iterations: usize,
    pub residuals: Vec<ResidualEntry>,
}

struct Problem<'a> {
    equations: &'a [MeasurementEquation],
    ybus: DMatrix<Complex64>,
    n_nodes: usize,
}

impl Problem<'_> {
    fn residuals(&self, u: &DVector<Complex64>) -> DVector<f64> {
        let i = &self.ybus * u;
        let ctx = EvalContext {
            ybus: &self.ybus,
            u,
            i: &i,
        };
        DVector::from_iterator(
            self.equations.len(),
            self.equations
                .iter()
                .map(|eq| (eq.kind.evaluate(&ctx) - eq.value_pu) / eq.sigma_pu),
        )
    }

    fn jacobian(&self, u: &DVector<Complex64>) -> DMatrix<f64> {
        let i = &self.ybus * u;
        let ctx = EvalContext {
            ybus: &self.ybus,
            u,
            i: &i,
        };
        let mut jac = DMatrix::zeros(self.equations.len(), 2 * self.n_nodes);
        let mut row = vec![0.0; 2 * self.n_nodes];
        for (r, eq) in self.equations.iter().enumerate() {
            row.iter_mut().for_each(|v| *v = 0.0);
            eq.kind.fill_jacobian_row(&ctx, &mut row);
            let w = 1.0 / eq.sigma_pu;
            for (c, value) in row.iter().enumerate() {
                if *value != 0.0 {
                    jac[(r, c)] = value * w;
                }
            }
        }
        jac
    }
}

fn apply_step(u: &DVector<Complex64>, step: &DVector<f64>) -> DVector<Complex64> {
    let n = u.len();
    DVector::from_fn(n, |k, _| u[k] + Complex64::new(step[k], step[k + n]))
}

/// Below this weighted-residual magnitude every equation fits to within a
/// hundred-millionth of its sigma; the residual direction is rounding noise
/// and the orthogonality test would be meaningless.
const RESIDUAL_FLOOR: f64 = 1e-8;

/// Worst-case cosine between a Jacobian column and the residual vector.
/// Zero at a least-squares optimum, one when a column lines up with the
/// residual entirely.
fn gradient_orthogonality(jac: &DMatrix<f64>, gradient: &DVector<f64>, r_norm: f64) -> f64 {
    (0..jac.ncols())
        .map(|j| {
            let denom = jac.column(j).norm() * r_norm;
            if denom == 0.0 {
                0.0
            } else {
                gradient[j].abs() / denom
            }
        })
        .fold(0.0, f64::max)
}

/// Estimate the network state from a set of measurement equations.
pub fn estimate_state(
    model: &NetworkModel,
    equations: &[MeasurementEquation],
    options: &EstimatorOptions,
) -> Result<StateEstimate, DsseError> {
    model.validate()?;
    if equations.is_empty() {
        return Err(DsseError::NoMeasurements);
    }
    let index = model.node_index();
    let n_nodes = index.len();
    for eq in equations {
        if !(eq.sigma_pu.is_finite() && eq.sigma_pu > 0.0) || !eq.value_pu.is_finite() {
            return Err(DsseError::BadEquation {
                origin: eq.source.clone(),
                detail: format!("value {} sigma {}", eq.value_pu, eq.sigma_pu),
            });
        }
    }

    let admittance = build_admittance(model)?;
    let ybus = admittance.ybus(model, &index);
    let slack_idx = model.bus_idx(&model.slack_bus).expect("validated slack");
    let slack_nodes = index.bus_nodes(slack_idx);
    let free_nodes: Vec<usize> = (0..n_nodes).filter(|n| !slack_nodes.contains(n)).collect();
    // Start from a power flow conditioned on the metered injections: each
    // device's nameplate power is scaled so its bus total matches the
    // active-injection rows. Magnitude-only rows make the objective
    // multimodal, and a start with roughly correct flow directions lands
    // in the right basin; nameplate alone puts full generation into hours
    // where the meters read none. Fall back to plain nameplate, then to
    // no load, when the conditioned case will not solve.
    let mut injections = InjectionSet::from_model(model);
    let mut measured_p = vec![0.0; model.buses.len()];
    let mut metered = vec![false; model.buses.len()];
    for eq in equations {
        if let MeasurementKind::ActiveInjection { node } = eq.kind {
            let (bus, _) = index.node(node);
            measured_p[bus] += eq.value_pu;
            metered[bus] = true;
        }
    }
    let s1 = model.power_base_1ph();
    for (bus_idx, bus) in model.buses.iter().enumerate() {
        if !metered[bus_idx] {
            continue;
        }
        let at_bus: Vec<&str> = model
            .loads
            .iter()
            .map(|l| (&l.bus, l.id.as_str()))
            .chain(model.generators.iter().map(|g| (&g.bus, g.id.as_str())))
            .filter(|(b, _)| **b == bus.id)
            .map(|(_, id)| id)
            .collect();
        let nameplate_p: f64 = at_bus
            .iter()
            .filter_map(|id| injections.injection_va(id))
            .flatten()
            .map(|s| s.re)
            .sum::<f64>()
            / s1;
        if nameplate_p.abs() < 1e-9 {
            continue;
        }
        let scale = (measured_p[bus_idx] / nameplate_p).clamp(-2.0, 2.0);
        for id in at_bus {
            if let Some(per_phase) = injections.injection_va(id) {
                let scaled: Vec<Complex64> = per_phase.iter().map(|s| s * scale).collect();
                injections.set_injection_va(id, scaled);
            }
        }
    }
    let start = solve_powerflow(
        model,
        &injections,
        &SlackSpec::balanced(1.0),
        &PowerFlowOptions::default(),
    )
    .or_else(|_| {
        solve_powerflow(
            model,
            &InjectionSet::from_model(model),
            &SlackSpec::balanced(1.0),
            &PowerFlowOptions::default(),
        )
    });
    let mut u = match start {
        Ok(solution) => solution.state.voltages_pu,
        Err(_) => no_load_state(
            &ybus,
            &index,
            &slack_nodes,
            &free_nodes,
            &SlackSpec::balanced(1.0),
        ),
    };

    let problem = Problem {
        equations,
        ybus,
        n_nodes,
    };

    let mut r = problem.residuals(&u);
    let mut objective = r.norm_squared();
    let mut lambda = 0.0;
    let mut growth = 2.0;
    let mut iterations = 0;

    while iterations < options.max_iterations {
        if r.amax() < RESIDUAL_FLOOR {
            break;
        }
        let jac = problem.jacobian(&u);
        let gradient = jac.transpose() * &r;
        if gradient_orthogonality(&jac, &gradient, r.norm()) < options.gradient_tolerance {
            break;
        }
        // Damping scaled per column by its own curvature (Marquardt). A
        // scalar damping cannot serve rows whose weights span many orders
        // of magnitude: virtual rows need a far stiffer leash than meter
        // rows. The floor keeps columns no equation touches (unobservable
        // directions) at full rank, which pins their step at zero.
        let mut curvature = DVector::from_iterator(
            jac.ncols(),
            (0..jac.ncols()).map(|c| jac.column(c).norm_squared()),
        );
        let max_curvature = curvature.amax();
        if max_curvature == 0.0 {
            return Err(DsseError::LinearAlgebra("jacobian is identically zero".into()));
        }
        curvature.apply(|d| *d = d.max(1e-12 * max_curvature));
        if lambda == 0.0 {
            lambda = 1e-3;
        }

        // Damped step from the augmented least-squares system.
        let m_rows = equations.len();
        let cols = 2 * n_nodes;
        let mut augmented = DMatrix::zeros(m_rows + cols, cols);
        augmented.view_mut((0, 0), (m_rows, cols)).copy_from(&jac);
        for c in 0..cols {
            augmented[(m_rows + c, c)] = (lambda * curvature[c]).sqrt();
        }
        let mut rhs = DVector::zeros(m_rows + cols);
        rhs.rows_mut(0, m_rows).copy_from(&(-&r));
        // Householder QR: the damping rows keep the matrix at full column
        // rank, so the triangular solve only fails on hopeless scaling.
        let qr = augmented.qr();
        let r_upper = qr.r();
        qr.q_tr_mul(&mut rhs);
        let step = r_upper
            .solve_upper_triangular(&rhs.rows(0, cols).into_owned())
            .ok_or_else(|| {
                DsseError::LinearAlgebra("damped least-squares system is singular".into())
            })?;

        let u_new = apply_step(&u, &step);
        let r_new = problem.residuals(&u_new);
        let objective_new = r_new.norm_squared();
        let damping: f64 = step
            .iter()
            .zip(curvature.iter())
            .map(|(s, d)| d * s * s)
            .sum();
        let predicted = lambda * damping - step.dot(&gradient);
        let rho = if predicted > 0.0 {
            (objective - objective_new) / predicted
        } else {
            -1.0
        };
        iterations += 1;
        if std::env::var_os("DSSE_TRACE").is_some() {
            eprintln!(
                "iter {iterations:3} objective {objective:12.4e} -> {objective_new:12.4e} lambda {lambda:10.2e} rho {rho:9.2e} step {:9.2e} grad {:9.2e}",
                step.amax(),
                gradient.amax()
            );
        }

        if rho > 0.0 && objective_new.is_finite() {
            let step_scale = step.amax();
            let state_scale = u.iter().map(|c| c.norm()).fold(0.0f64, f64::max);
            u = u_new;
            r = r_new;
            objective = objective_new;
            lambda *= (1.0 - (2.0 * rho - 1.0).powi(3)).max(1.0 / 3.0);
            growth = 2.0;
            if step_scale < options.step_tolerance * (state_scale + options.step_tolerance) {
                break;
            }
        } else {
            lambda *= growth;
            growth *= 2.0;
            // Rejections this deep mean the model cannot improve on the
            // current point; let the verdict below judge it.
            if lambda > 1e30 {
                break;
            }
        }
    }

    // Whatever path exited the loop, the estimate stands or falls on the
    // optimality of the final point.
    if r.amax() >= RESIDUAL_FLOOR {
        let jac = problem.jacobian(&u);
        let gradient = jac.transpose() * &r;
        let orthogonality = gradient_orthogonality(&jac, &gradient, r.norm());
        if orthogonality >= options.gradient_tolerance {
            if std::env::var_os("DSSE_TRACE").is_some() {
                let mut worst: Vec<(f64, String)> = equations
                    .iter()
                    .zip(r.iter())
                    .map(|(eq, &w)| (w.abs(), eq.source.clone()))
                    .collect();
                worst.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
                for (w, src) in worst.iter().take(20) {
                    eprintln!("stalled row weighted {w:12.3e}  {src}");
                }
            }
            return Err(DsseError::NotConverged {
                iterations,
                objective,
                gradient: orthogonality,
            });
        }
    }

    let i = &problem.ybus * &u;
    let ctx = EvalContext {
        ybus: &problem.ybus,
        u: &u,
        i: &i,
    };
    let residuals = equations
        .iter()
        .map(|eq| {
            let estimated = eq.kind.evaluate(&ctx);
            let residual = estimated - eq.value_pu;
            ResidualEntry {
                source: eq.source.clone(),
                measured_pu: eq.value_pu,
                estimated_pu: estimated,
                residual_pu: residual,
                weighted: residual / eq.sigma_pu,
            }
        })
        .collect();

    Ok(StateEstimate {
        state: ComplexVoltageState {
            index,
            voltages_pu: u,
        },
        objective,
        iterations,
        residuals,
    })
}

//! Unbalanced power flow in rectangular coordinates.
//!
//! The solver works on the full three-phase node set: voltages are complex
//! per-unit phasors per (bus, phase), injections are net complex powers per
//! phase (generation positive), and the slack bus holds three fixed phasors.
//! See [`solve_powerflow`] for the Newton iteration itself and
//! [`linearize`] for the small-signal voltage sensitivity extracted from a
//! solved operating point.

mod newton;
mod sensitivity;
mod slack;

pub use newton::{solve_powerflow, BranchFlow, PowerFlowOptions, PowerFlowSolution};
pub(crate) use newton::{injection_partials, no_load_state};
pub use sensitivity::{linearize, predict_voltages, SensitivityMatrix};
pub use slack::slack_from_line_voltages;

use std::collections::BTreeMap;

use nalgebra::{DVector, Vector3};
use num_complex::Complex64;
use thiserror::Error;

use crate::netmodel::{NetError, NetworkModel, NodeIndex};
use crate::phase::Phase;

#[derive(Debug, Error)]
pub enum PfError {
    #[error(transparent)]
    Model(#[from] NetError),
    #[error("injection set entry '{device}' does not match any load or generator")]
    UnknownDevice { device: String },
    #[error("injection for '{device}' has {got} entries for {expected} phases")]
    InjectionShape {
        device: String,
        got: usize,
        expected: usize,
    },
    #[error(
        "did not converge in {iterations} iterations; worst mismatch {worst_mismatch_pu:.3e} pu \
         at bus '{worst_bus}' phase {worst_phase}"
    )]
    NotConverged {
        iterations: usize,
        worst_bus: String,
        worst_phase: Phase,
        worst_mismatch_pu: f64,
        mismatch_history: Vec<f64>,
    },
    #[error("singular Jacobian{}", hint_suffix(.unreachable))]
    SingularJacobian { unreachable: Vec<String> },
    #[error("slack reconstruction: {0}")]
    SlackInput(String),
    #[error("cannot linearise around injections at '{bus}': {reason}")]
    LinearizationBus { bus: String, reason: String },
}

fn hint_suffix(unreachable: &[String]) -> String {
    if unreachable.is_empty() {
        String::new()
    } else {
        format!(" (buses unreachable from slack: {})", unreachable.join(", "))
    }
}

/// Fixed slack-bus phasors, per-unit, in a, b, c order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlackSpec {
    pub phasors_pu: [Complex64; 3],
}

impl SlackSpec {
    /// Balanced set at the given magnitude, phase a at angle zero.
    pub fn balanced(magnitude_pu: f64) -> SlackSpec {
        let third = 2.0 * std::f64::consts::FRAC_PI_3;
        SlackSpec {
            phasors_pu: [
                Complex64::from_polar(magnitude_pu, 0.0),
                Complex64::from_polar(magnitude_pu, -third),
                Complex64::from_polar(magnitude_pu, third),
            ],
        }
    }

    pub fn flat() -> SlackSpec {
        SlackSpec::balanced(1.0)
    }

    /// Reconstructs slack phasors from the three line voltages a meter
    /// reports, in volts, normalised to the given line-to-line base.
    pub fn from_line_voltages(
        v_ab: f64,
        v_bc: f64,
        v_ca: f64,
        base_voltage_v: f64,
    ) -> Result<SlackSpec, PfError> {
        let phase_base = base_voltage_v / 3f64.sqrt();
        let phasors_v = slack_from_line_voltages(v_ab, v_bc, v_ca)?;
        Ok(SlackSpec {
            phasors_pu: phasors_v.map(|u| u / phase_base),
        })
    }
}

/// Net complex power injection per device, in VA per phase (generation
/// positive, so load consumption enters negative).
///
/// Devices absent from the set inject nothing; entries that name no declared
/// load or generator are rejected at solve time.
#[derive(Debug, Clone, Default)]
pub struct InjectionSet {
    injections_va: BTreeMap<String, Vec<Complex64>>,
}

impl InjectionSet {
    pub fn empty() -> InjectionSet {
        InjectionSet::default()
    }

    /// Injections from the device powers declared in the model document.
    pub fn from_model(model: &NetworkModel) -> InjectionSet {
        let mut set = InjectionSet::default();
        for load in &model.loads {
            set.injections_va
                .insert(load.id.clone(), load.power_va.iter().map(|s| -s).collect());
        }
        for gen in &model.generators {
            set.injections_va.insert(gen.id.clone(), gen.power_va.clone());
        }
        set
    }

    /// Sets a device's net injection, VA per phase in the device's phase
    /// order. Generation positive.
    pub fn set_injection_va(&mut self, device: &str, per_phase: Vec<Complex64>) {
        self.injections_va.insert(device.to_string(), per_phase);
    }

    pub fn injection_va(&self, device: &str) -> Option<&[Complex64]> {
        self.injections_va.get(device).map(|v| v.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<Complex64>)> {
        self.injections_va.iter()
    }

    /// Per-node net injection in per-unit over `index`.
    pub(crate) fn node_injections_pu(
        &self,
        model: &NetworkModel,
        index: &NodeIndex,
    ) -> Result<DVector<Complex64>, PfError> {
        let s1 = model.power_base_1ph();
        let mut s = DVector::from_element(index.len(), Complex64::new(0.0, 0.0));
        for (device, per_phase) in &self.injections_va {
            let (bus, phases) = model
                .loads
                .iter()
                .find(|l| &l.id == device)
                .map(|l| (&l.bus, l.phases))
                .or_else(|| {
                    model
                        .generators
                        .iter()
                        .find(|g| &g.id == device)
                        .map(|g| (&g.bus, g.phases))
                })
                .ok_or_else(|| PfError::UnknownDevice {
                    device: device.clone(),
                })?;
            if per_phase.len() != phases.len() {
                return Err(PfError::InjectionShape {
                    device: device.clone(),
                    got: per_phase.len(),
                    expected: phases.len(),
                });
            }
            let bus_idx = model.bus_idx(bus).expect("validated device bus");
            for (phase, s_va) in phases.iter().zip(per_phase) {
                let node = index
                    .node_of(bus_idx, phase)
                    .expect("validated device phases");
                s[node] += s_va / s1;
            }
        }
        Ok(s)
    }
}

/// Complex voltages for every (bus, phase) node, per-unit.
#[derive(Debug, Clone)]
pub struct ComplexVoltageState {
    pub index: NodeIndex,
    pub voltages_pu: DVector<Complex64>,
}

impl ComplexVoltageState {
    pub fn voltage(&self, model: &NetworkModel, bus: &str, phase: Phase) -> Option<Complex64> {
        let bus_idx = model.bus_idx(bus)?;
        let node = self.index.node_of(bus_idx, phase)?;
        Some(self.voltages_pu[node])
    }

    /// Three-phase voltages of a bus; requires the bus to carry all phases.
    pub fn bus_voltages(&self, bus_idx: usize) -> Vector3<Complex64> {
        let nodes = self.index.bus_nodes(bus_idx);
        assert_eq!(nodes.len(), 3, "bus does not carry all three phases");
        Vector3::new(
            self.voltages_pu[nodes[0]],
            self.voltages_pu[nodes[1]],
            self.voltages_pu[nodes[2]],
        )
    }

    pub fn magnitudes_pu(&self) -> DVector<f64> {
        self.voltages_pu.map(|u| u.norm())
    }

    /// Net complex power injected at every node at this state, pu.
    pub fn nodal_injections_pu(&self, model: &NetworkModel) -> Result<DVector<Complex64>, PfError> {
        let admittance = crate::netmodel::build_admittance(model)?;
        let ybus = admittance.ybus(model, &self.index);
        let i_node = &ybus * &self.voltages_pu;
        Ok(self.voltages_pu.zip_map(&i_node, |u, i| u * i.conj()))
    }
}

//! Validated three-phase network description.
//!
//! The model is deliberately plain: buses, π-model line segments, two-winding
//! transformers and the devices hanging off them, everything identified by
//! string ids. [`parse_network`] builds one from a JSON document (see
//! `docs/formats.md`), [`NetworkModel::validate`] enforces the structural
//! rules, and [`build_admittance`] turns branches into per-unit admittance
//! blocks for the solvers.

mod admittance;
mod parse;

pub use admittance::{
    build_admittance, sequence_to_phase, AdmittanceMap, BranchAdmittance, PhaseMatrix,
};
pub use parse::parse_network;

use std::collections::HashMap;

use num_complex::Complex64;
use thiserror::Error;

use crate::phase::{Phase, PhaseSet};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("failed to parse network document: {0}")]
    Document(#[from] serde_json::Error),
    #[error("duplicate {kind} id '{id}'")]
    DuplicateId { kind: &'static str, id: String },
    #[error("{referenced_by} references unknown bus '{bus}'")]
    UnknownBus { referenced_by: String, bus: String },
    #[error("{context}: {detail}")]
    InvalidValue { context: String, detail: String },
    #[error("branch '{branch}' spans phases {detail}")]
    PhaseMismatch { branch: String, detail: String },
    #[error("line '{line}' connects buses with different base voltages ({from_v} V vs {to_v} V)")]
    BaseVoltageMismatch { line: String, from_v: f64, to_v: f64 },
    #[error("branch '{branch}' has a non-invertible series impedance")]
    SingularImpedance { branch: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    pub id: String,
    /// Nominal line-to-line voltage, volts. Per-unit base for this bus.
    pub base_voltage_v: f64,
    pub phases: PhaseSet,
    /// Steady-state magnitude limits in per-unit, (lower, upper).
    pub voltage_limits_pu: (f64, f64),
}

/// π-model line segment with 3x3 phase-frame admittances in siemens.
///
/// `series_admittance_s` is the inverse of the full series impedance matrix;
/// the shunt blocks are the per-end halves of the charging admittance. Lines
/// always span all three phases and both ends must share a voltage base.
#[derive(Debug, Clone, PartialEq)]
pub struct LineSegment {
    pub id: String,
    pub from: String,
    pub to: String,
    pub length_m: f64,
    pub series_admittance_s: PhaseMatrix,
    pub shunt_from_s: PhaseMatrix,
    pub shunt_to_s: PhaseMatrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindingConnection {
    Delta,
    /// Solidly grounded wye.
    WyeGrounded,
}

/// Off-load tap changer acting on the winding-2 voltage.
///
/// Positive positions raise the no-load winding-2 voltage: the multiplier
/// `1 + position * step_pct / 100` scales the winding-2 rating, so the
/// effective leg ratio is `nominal / multiplier`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TapChanger {
    pub step_pct: f64,
    pub position: i32,
    pub range: (i32, i32),
}

impl TapChanger {
    pub fn fixed() -> TapChanger {
        TapChanger {
            step_pct: 0.0,
            position: 0,
            range: (0, 0),
        }
    }

    pub fn multiplier(&self) -> f64 {
        1.0 + self.position as f64 * self.step_pct / 100.0
    }
}

/// Two-winding transformer: ideal per-leg ratio plus a series impedance on
/// the winding-2 side, lifted to the phase frame by the winding connections.
#[derive(Debug, Clone, PartialEq)]
pub struct Transformer {
    pub id: String,
    /// Winding-1 (usually HV) bus.
    pub from: String,
    /// Winding-2 (usually LV) bus.
    pub to: String,
    pub rated_va: f64,
    /// Series impedance in per-unit on the transformer's own rating.
    pub series_impedance_pu: Complex64,
    pub connection: (WindingConnection, WindingConnection),
    /// Winding-1 line-to-line voltage rating, volts.
    pub winding1_voltage_v: f64,
    /// Winding-1 over winding-2 line-to-line voltage ratio at nominal tap.
    pub nominal_ratio: f64,
    pub tap: TapChanger,
}

impl Transformer {
    pub fn winding2_voltage_v(&self) -> f64 {
        self.winding1_voltage_v / self.nominal_ratio
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeviceKind {
    /// Power is taken from the model document.
    Fixed,
    /// Power is filled in at runtime, e.g. by load allocation.
    Allocated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Load {
    pub id: String,
    pub bus: String,
    pub phases: PhaseSet,
    /// Complex power per phase in `phases` order, VA, consumption positive.
    pub power_va: Vec<Complex64>,
    pub kind: DeviceKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub id: String,
    pub bus: String,
    pub phases: PhaseSet,
    /// Complex power per phase in `phases` order, VA, output positive.
    pub power_va: Vec<Complex64>,
    pub kind: DeviceKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    pub buses: Vec<Bus>,
    pub lines: Vec<LineSegment>,
    pub transformers: Vec<Transformer>,
    pub loads: Vec<Load>,
    pub generators: Vec<Generator>,
    pub slack_bus: String,
    /// Three-phase system power base, VA.
    pub power_base_va: f64,
    pub frequency_hz: f64,
}

impl NetworkModel {
    pub fn bus_idx(&self, id: &str) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }

    pub fn bus(&self, id: &str) -> Option<&Bus> {
        self.buses.iter().find(|b| b.id == id)
    }

    /// Phase-to-neutral voltage base of a bus, volts.
    pub fn phase_base_v(&self, bus_idx: usize) -> f64 {
        self.buses[bus_idx].base_voltage_v / 3f64.sqrt()
    }

    /// Single-phase power base, VA.
    pub fn power_base_1ph(&self) -> f64 {
        self.power_base_va / 3.0
    }

    pub fn node_index(&self) -> NodeIndex {
        NodeIndex::new(self)
    }

    /// Structural checks. Errors are hard failures; connectivity problems are
    /// reported separately by [`NetworkModel::unreachable_buses`] because an
    /// intentionally de-energised section is not necessarily a mistake.
    pub fn validate(&self) -> Result<(), NetError> {
        let invalid = |context: &str, detail: String| NetError::InvalidValue {
            context: context.to_string(),
            detail,
        };

        if !(self.power_base_va > 0.0) {
            return Err(invalid("bases", "power base must be positive".into()));
        }
        if !(self.frequency_hz > 0.0) {
            return Err(invalid("bases", "frequency must be positive".into()));
        }

        let mut bus_ids = HashMap::new();
        for bus in &self.buses {
            if bus_ids.insert(bus.id.as_str(), ()).is_some() {
                return Err(NetError::DuplicateId {
                    kind: "bus",
                    id: bus.id.clone(),
                });
            }
            if !(bus.base_voltage_v > 0.0) {
                return Err(invalid(
                    &format!("bus '{}'", bus.id),
                    "base voltage must be positive".into(),
                ));
            }
            let (lo, hi) = bus.voltage_limits_pu;
            if !(lo > 0.0 && lo < hi) {
                return Err(invalid(
                    &format!("bus '{}'", bus.id),
                    format!("voltage limits ({lo}, {hi}) must satisfy 0 < lower < upper"),
                ));
            }
        }

        let slack = self
            .bus(&self.slack_bus)
            .ok_or_else(|| NetError::UnknownBus {
                referenced_by: "slack".into(),
                bus: self.slack_bus.clone(),
            })?;
        if slack.phases != PhaseSet::abc() {
            return Err(invalid(
                &format!("slack bus '{}'", slack.id),
                "slack bus must carry all three phases".into(),
            ));
        }

        let mut branch_ids = HashMap::new();
        for line in &self.lines {
            if branch_ids.insert(line.id.as_str(), ()).is_some() {
                return Err(NetError::DuplicateId {
                    kind: "branch",
                    id: line.id.clone(),
                });
            }
            let from = self.branch_end(&line.id, &line.from)?;
            let to = self.branch_end(&line.id, &line.to)?;
            if line.from == line.to {
                return Err(invalid(
                    &format!("line '{}'", line.id),
                    "connects a bus to itself".into(),
                ));
            }
            if !(line.length_m > 0.0) {
                return Err(invalid(
                    &format!("line '{}'", line.id),
                    "length must be positive".into(),
                ));
            }
            for bus in [from, to] {
                if bus.phases != PhaseSet::abc() {
                    return Err(NetError::PhaseMismatch {
                        branch: line.id.clone(),
                        detail: format!("bus '{}' lacks phases (lines are three-phase)", bus.id),
                    });
                }
            }
            let rel = (from.base_voltage_v - to.base_voltage_v).abs() / from.base_voltage_v;
            if rel > 1e-9 {
                return Err(NetError::BaseVoltageMismatch {
                    line: line.id.clone(),
                    from_v: from.base_voltage_v,
                    to_v: to.base_voltage_v,
                });
            }
            for m in [&line.series_admittance_s, &line.shunt_from_s, &line.shunt_to_s] {
                if m.iter().any(|y| !y.re.is_finite() || !y.im.is_finite()) {
                    return Err(invalid(
                        &format!("line '{}'", line.id),
                        "admittance entries must be finite".into(),
                    ));
                }
            }
        }

        for tx in &self.transformers {
            if branch_ids.insert(tx.id.as_str(), ()).is_some() {
                return Err(NetError::DuplicateId {
                    kind: "branch",
                    id: tx.id.clone(),
                });
            }
            let from = self.branch_end(&tx.id, &tx.from)?;
            let to = self.branch_end(&tx.id, &tx.to)?;
            if tx.from == tx.to {
                return Err(invalid(
                    &format!("transformer '{}'", tx.id),
                    "connects a bus to itself".into(),
                ));
            }
            for bus in [from, to] {
                if bus.phases != PhaseSet::abc() {
                    return Err(NetError::PhaseMismatch {
                        branch: tx.id.clone(),
                        detail: format!(
                            "bus '{}' lacks phases (transformer windings are three-phase)",
                            bus.id
                        ),
                    });
                }
            }
            if !(tx.rated_va > 0.0) {
                return Err(invalid(
                    &format!("transformer '{}'", tx.id),
                    "rated power must be positive".into(),
                ));
            }
            if !(tx.nominal_ratio > 0.0) || !(tx.winding1_voltage_v > 0.0) {
                return Err(invalid(
                    &format!("transformer '{}'", tx.id),
                    "winding voltages and ratio must be positive".into(),
                ));
            }
            if tx.series_impedance_pu.norm() == 0.0 {
                return Err(NetError::SingularImpedance {
                    branch: tx.id.clone(),
                });
            }
            let tap = &tx.tap;
            if tap.range.0 > tap.range.1 {
                return Err(invalid(
                    &format!("transformer '{}'", tx.id),
                    format!("tap range ({}, {}) is inverted", tap.range.0, tap.range.1),
                ));
            }
            if tap.position < tap.range.0 || tap.position > tap.range.1 {
                return Err(invalid(
                    &format!("transformer '{}'", tx.id),
                    format!(
                        "tap position {} outside range ({}, {})",
                        tap.position, tap.range.0, tap.range.1
                    ),
                ));
            }
            if tap.range != (0, 0) && !(tap.step_pct > 0.0) {
                return Err(invalid(
                    &format!("transformer '{}'", tx.id),
                    "tap step must be positive".into(),
                ));
            }
            if !(tap.multiplier() > 0.0) {
                return Err(invalid(
                    &format!("transformer '{}'", tx.id),
                    format!("tap position {} drives the ratio non-positive", tap.position),
                ));
            }
        }

        let mut device_ids = HashMap::new();
        for (id, bus_id, phases, power, what) in self
            .loads
            .iter()
            .map(|l| (&l.id, &l.bus, l.phases, &l.power_va, "load"))
            .chain(
                self.generators
                    .iter()
                    .map(|g| (&g.id, &g.bus, g.phases, &g.power_va, "generator")),
            )
        {
            if device_ids.insert(id.as_str(), ()).is_some() {
                return Err(NetError::DuplicateId {
                    kind: "device",
                    id: id.clone(),
                });
            }
            let bus = self.bus(bus_id).ok_or_else(|| NetError::UnknownBus {
                referenced_by: format!("{what} '{id}'"),
                bus: bus_id.clone(),
            })?;
            if !bus.phases.contains_all(phases) {
                return Err(invalid(
                    &format!("{what} '{id}'"),
                    format!("phases {} not all present on bus '{}'", phases, bus.id),
                ));
            }
            if power.len() != phases.len() {
                return Err(invalid(
                    &format!("{what} '{id}'"),
                    format!(
                        "{} power entries for {} phases",
                        power.len(),
                        phases.len()
                    ),
                ));
            }
            if power
                .iter()
                .any(|s| !s.re.is_finite() || !s.im.is_finite())
            {
                return Err(invalid(
                    &format!("{what} '{id}'"),
                    "power entries must be finite".into(),
                ));
            }
        }

        Ok(())
    }

    /// Buses with no branch path to the slack, in declaration order.
    ///
    /// Callers should surface these as warnings: power flow over a
    /// disconnected island fails with a singular Jacobian.
    pub fn unreachable_buses(&self) -> Vec<String> {
        let n = self.buses.len();
        let mut adjacency = vec![Vec::new(); n];
        let ends = self
            .lines
            .iter()
            .map(|l| (&l.from, &l.to))
            .chain(self.transformers.iter().map(|t| (&t.from, &t.to)));
        for (from, to) in ends {
            if let (Some(f), Some(t)) = (self.bus_idx(from), self.bus_idx(to)) {
                adjacency[f].push(t);
                adjacency[t].push(f);
            }
        }
        let mut reached = vec![false; n];
        let Some(start) = self.bus_idx(&self.slack_bus) else {
            return self.buses.iter().map(|b| b.id.clone()).collect();
        };
        let mut stack = vec![start];
        reached[start] = true;
        while let Some(i) = stack.pop() {
            for &j in &adjacency[i] {
                if !reached[j] {
                    reached[j] = true;
                    stack.push(j);
                }
            }
        }
        self.buses
            .iter()
            .enumerate()
            .filter(|(i, _)| !reached[*i])
            .map(|(_, b)| b.id.clone())
            .collect()
    }

    fn branch_end(&self, branch: &str, bus_id: &str) -> Result<&Bus, NetError> {
        self.bus(bus_id).ok_or_else(|| NetError::UnknownBus {
            referenced_by: format!("branch '{branch}'"),
            bus: bus_id.to_string(),
        })
    }
}

/// Flat indexing of every (bus, phase) pair, buses in declaration order and
/// phases in a, b, c order. All vectors and matrices in the solvers use this
/// ordering.
#[derive(Debug, Clone)]
pub struct NodeIndex {
    entries: Vec<(usize, Phase)>,
    offsets: Vec<usize>,
    phase_sets: Vec<PhaseSet>,
}

impl NodeIndex {
    fn new(model: &NetworkModel) -> NodeIndex {
        let mut entries = Vec::new();
        let mut offsets = Vec::with_capacity(model.buses.len());
        let mut phase_sets = Vec::with_capacity(model.buses.len());
        for (bus_idx, bus) in model.buses.iter().enumerate() {
            offsets.push(entries.len());
            phase_sets.push(bus.phases);
            for phase in bus.phases.iter() {
                entries.push((bus_idx, phase));
            }
        }
        NodeIndex {
            entries,
            offsets,
            phase_sets,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// (bus index, phase) of a node.
    pub fn node(&self, node: usize) -> (usize, Phase) {
        self.entries[node]
    }

    pub fn node_of(&self, bus_idx: usize, phase: Phase) -> Option<usize> {
        let pos = self.phase_sets[bus_idx].position(phase)?;
        Some(self.offsets[bus_idx] + pos)
    }

    /// Nodes of one bus, in phase order.
    pub fn bus_nodes(&self, bus_idx: usize) -> Vec<usize> {
        self.phase_sets[bus_idx]
            .iter()
            .map(|p| self.node_of(bus_idx, p).unwrap())
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, (usize, Phase))> + '_ {
        self.entries.iter().copied().enumerate()
    }
}

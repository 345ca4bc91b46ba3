//! Branch admittance blocks and system matrix assembly.
//!
//! Every branch is reduced to a generalised π two-port in per-unit,
//!
//! ```text
//! I_from = (Y_series_from + Y_shunt_from) U_from - Y_series_from U_to
//! I_to   = (Y_series_to   + Y_shunt_to)   U_to   - Y_series_to   U_from
//! ```
//!
//! with 3x3 complex blocks and `Y_series_to = Y_series_from^T`. For lines the
//! blocks come straight from the π model. For transformers the per-leg series
//! admittance `y` (winding-2 side, siemens) and the per-leg voltage ratio `r`
//! are lifted to the phase frame by the winding connection matrices `C1`,
//! `C2` (identity for grounded wye, line-to-line difference matrix for
//! delta):
//!
//! ```text
//! Y_ff = (y/r^2) C1^T C1    Y_ft = -(y/r) C1^T C2
//! Y_tf = Y_ft^T             Y_tt =  y     C2^T C2
//! ```
//!
//! The tap multiplier scales the winding-2 voltage rating before `r` is
//! formed, so positive taps raise the no-load secondary voltage. Impedance
//! stays on the nominal base; only the ideal ratio moves with the tap.
//!
//! SI blocks are converted entry-wise to per-unit with the bus voltage bases,
//! `Y_pu = Y_SI * Vb_row * Vb_col / S_1ph`, which keeps the two-port exact
//! across voltage levels.

use std::collections::HashMap;

use nalgebra::{DMatrix, Matrix3, Vector3};
use num_complex::Complex64;

use super::{NetError, NetworkModel, NodeIndex, Transformer, WindingConnection};

pub type PhaseMatrix = Matrix3<Complex64>;

/// Phase-frame series impedance matrix from zero/positive-sequence values.
///
/// Assumes a transposed line: `Z = zs I + zm (J - I)` with
/// `zs = (z0 + 2 z1)/3` and `zm = (z0 - z1)/3`.
pub fn sequence_to_phase(z0: Complex64, z1: Complex64) -> PhaseMatrix {
    let zs = (z0 + 2.0 * z1) / 3.0;
    let zm = (z0 - z1) / 3.0;
    Matrix3::from_fn(|r, c| if r == c { zs } else { zm })
}

/// One branch of the network as per-unit admittance blocks.
#[derive(Debug, Clone)]
pub struct BranchAdmittance {
    pub id: String,
    pub from: String,
    pub to: String,
    pub series_from_pu: PhaseMatrix,
    pub series_to_pu: PhaseMatrix,
    pub shunt_from_pu: PhaseMatrix,
    pub shunt_to_pu: PhaseMatrix,
}

impl BranchAdmittance {
    /// Current leaving the from-bus into the branch, per-unit.
    pub fn current_from(
        &self,
        u_from: &Vector3<Complex64>,
        u_to: &Vector3<Complex64>,
    ) -> Vector3<Complex64> {
        (self.series_from_pu + self.shunt_from_pu) * u_from - self.series_from_pu * u_to
    }

    /// Current leaving the to-bus into the branch, per-unit.
    pub fn current_to(
        &self,
        u_from: &Vector3<Complex64>,
        u_to: &Vector3<Complex64>,
    ) -> Vector3<Complex64> {
        (self.series_to_pu + self.shunt_to_pu) * u_to - self.series_to_pu * u_from
    }

    /// The 6x6 two-port admittance block in (from, to) node order.
    pub fn two_port(&self) -> DMatrix<Complex64> {
        let mut block = DMatrix::zeros(6, 6);
        let y_ff = self.series_from_pu + self.shunt_from_pu;
        let y_tt = self.series_to_pu + self.shunt_to_pu;
        for r in 0..3 {
            for c in 0..3 {
                block[(r, c)] = y_ff[(r, c)];
                block[(r, c + 3)] = -self.series_from_pu[(r, c)];
                block[(r + 3, c)] = -self.series_to_pu[(r, c)];
                block[(r + 3, c + 3)] = y_tt[(r, c)];
            }
        }
        block
    }
}

/// Per-unit admittance blocks for every branch, lines first then
/// transformers, both in declaration order.
#[derive(Debug, Clone)]
pub struct AdmittanceMap {
    pub branches: Vec<BranchAdmittance>,
    by_id: HashMap<String, usize>,
}

impl AdmittanceMap {
    pub fn branch(&self, id: &str) -> Option<&BranchAdmittance> {
        self.by_id.get(id).map(|&i| &self.branches[i])
    }

    /// Dense nodal admittance matrix over `index`.
    pub fn ybus(&self, model: &NetworkModel, index: &NodeIndex) -> DMatrix<Complex64> {
        let n = index.len();
        let mut y = DMatrix::zeros(n, n);
        for branch in &self.branches {
            let from = model.bus_idx(&branch.from).expect("validated bus id");
            let to = model.bus_idx(&branch.to).expect("validated bus id");
            let fn_ = index.bus_nodes(from);
            let tn = index.bus_nodes(to);
            let y_ff = branch.series_from_pu + branch.shunt_from_pu;
            let y_tt = branch.series_to_pu + branch.shunt_to_pu;
            for r in 0..3 {
                for c in 0..3 {
                    y[(fn_[r], fn_[c])] += y_ff[(r, c)];
                    y[(fn_[r], tn[c])] -= branch.series_from_pu[(r, c)];
                    y[(tn[r], fn_[c])] -= branch.series_to_pu[(r, c)];
                    y[(tn[r], tn[c])] += y_tt[(r, c)];
                }
            }
        }
        y
    }
}

/// Builds per-unit admittance blocks for every branch of a validated model.
pub fn build_admittance(model: &NetworkModel) -> Result<AdmittanceMap, NetError> {
    let s1 = model.power_base_1ph();
    let mut branches = Vec::with_capacity(model.lines.len() + model.transformers.len());

    for line in &model.lines {
        let from = model.bus_idx(&line.from).ok_or_else(|| NetError::UnknownBus {
            referenced_by: format!("branch '{}'", line.id),
            bus: line.from.clone(),
        })?;
        let vb = model.phase_base_v(from);
        let scale = Complex64::new(vb * vb / s1, 0.0);
        let series = line.series_admittance_s * scale;
        branches.push(BranchAdmittance {
            id: line.id.clone(),
            from: line.from.clone(),
            to: line.to.clone(),
            series_from_pu: series,
            series_to_pu: series.transpose(),
            shunt_from_pu: line.shunt_from_s * scale,
            shunt_to_pu: line.shunt_to_s * scale,
        });
    }

    for tx in &model.transformers {
        branches.push(transformer_admittance(model, tx)?);
    }

    let by_id = branches
        .iter()
        .enumerate()
        .map(|(i, b)| (b.id.clone(), i))
        .collect();
    Ok(AdmittanceMap { branches, by_id })
}

fn connection_matrix(conn: WindingConnection) -> Matrix3<f64> {
    match conn {
        WindingConnection::WyeGrounded => Matrix3::identity(),
        // Leg k spans phases k and k+1; rows are leg voltages in terms of
        // phase voltages.
        WindingConnection::Delta => {
            Matrix3::new(1.0, -1.0, 0.0, 0.0, 1.0, -1.0, -1.0, 0.0, 1.0)
        }
    }
}

fn winding_voltage(conn: WindingConnection, line_volts: f64) -> f64 {
    match conn {
        WindingConnection::Delta => line_volts,
        WindingConnection::WyeGrounded => line_volts / 3f64.sqrt(),
    }
}

fn transformer_admittance(
    model: &NetworkModel,
    tx: &Transformer,
) -> Result<BranchAdmittance, NetError> {
    let from = model.bus_idx(&tx.from).ok_or_else(|| NetError::UnknownBus {
        referenced_by: format!("branch '{}'", tx.id),
        bus: tx.from.clone(),
    })?;
    let to = model.bus_idx(&tx.to).ok_or_else(|| NetError::UnknownBus {
        referenced_by: format!("branch '{}'", tx.id),
        bus: tx.to.clone(),
    })?;

    let multiplier = tx.tap.multiplier();
    if !(multiplier > 0.0) {
        return Err(NetError::InvalidValue {
            context: format!("transformer '{}'", tx.id),
            detail: format!("tap position {} drives the ratio non-positive", tx.tap.position),
        });
    }
    let (conn1, conn2) = tx.connection;
    let u1 = winding_voltage(conn1, tx.winding1_voltage_v);
    let u2 = winding_voltage(conn2, tx.winding2_voltage_v()) * multiplier;
    let ratio = u1 / u2;

    // Impedance base on the winding-2 side: per leg, a delta winding sees the
    // full line voltage at a third of the rated power.
    let delta_factor = match conn2 {
        WindingConnection::Delta => 3.0,
        WindingConnection::WyeGrounded => 1.0,
    };
    let z_base2 = tx.winding2_voltage_v().powi(2) / tx.rated_va * delta_factor;
    let z_si = tx.series_impedance_pu * z_base2;
    if z_si.norm() == 0.0 {
        return Err(NetError::SingularImpedance {
            branch: tx.id.clone(),
        });
    }
    let y_leg = z_si.inv();

    let c1 = connection_matrix(conn1).map(|v| Complex64::new(v, 0.0));
    let c2 = connection_matrix(conn2).map(|v| Complex64::new(v, 0.0));
    let y_ff_si = c1.transpose() * c1 * (y_leg / (ratio * ratio));
    let y_ft_si = -(c1.transpose() * c2) * (y_leg / ratio);
    let y_tf_si = y_ft_si.transpose();
    let y_tt_si = c2.transpose() * c2 * y_leg;

    let vb1 = model.phase_base_v(from);
    let vb2 = model.phase_base_v(to);
    let s1 = model.power_base_1ph();
    let pu = |block: Matrix3<Complex64>, vr: f64, vc: f64| block * Complex64::new(vr * vc / s1, 0.0);

    let y_ff = pu(y_ff_si, vb1, vb1);
    let y_ft = pu(y_ft_si, vb1, vb2);
    let y_tf = pu(y_tf_si, vb2, vb1);
    let y_tt = pu(y_tt_si, vb2, vb2);

    Ok(BranchAdmittance {
        id: tx.id.clone(),
        from: tx.from.clone(),
        to: tx.to.clone(),
        series_from_pu: -y_ft,
        series_to_pu: -y_tf,
        shunt_from_pu: y_ff + y_ft,
        shunt_to_pu: y_tt + y_tf,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::{Bus, LineSegment, TapChanger};
    use crate::phase::PhaseSet;
    use approx::assert_relative_eq;

    fn bus(id: &str, volts: f64) -> Bus {
        Bus {
            id: id.into(),
            base_voltage_v: volts,
            phases: PhaseSet::abc(),
            voltage_limits_pu: (0.9, 1.1),
        }
    }

    fn model_with_line(series_s: PhaseMatrix) -> NetworkModel {
        NetworkModel {
            buses: vec![bus("a", 11e3), bus("b", 11e3)],
            lines: vec![LineSegment {
                id: "l1".into(),
                from: "a".into(),
                to: "b".into(),
                length_m: 100.0,
                series_admittance_s: series_s,
                shunt_from_s: Matrix3::zeros(),
                shunt_to_s: Matrix3::zeros(),
            }],
            transformers: vec![],
            loads: vec![],
            generators: vec![],
            slack_bus: "a".into(),
            power_base_va: 1e6,
            frequency_hz: 50.0,
        }
    }

    fn transformer_model(
        conn: (WindingConnection, WindingConnection),
        tap: TapChanger,
    ) -> NetworkModel {
        NetworkModel {
            buses: vec![bus("hv", 11e3), bus("lv", 433.0)],
            lines: vec![],
            transformers: vec![Transformer {
                id: "tx".into(),
                from: "hv".into(),
                to: "lv".into(),
                rated_va: 500e3,
                series_impedance_pu: Complex64::new(0.01, 0.05),
                connection: conn,
                winding1_voltage_v: 11e3,
                nominal_ratio: 11e3 / 433.0,
                tap,
            }],
            loads: vec![],
            generators: vec![],
            slack_bus: "hv".into(),
            power_base_va: 1e6,
            frequency_hz: 50.0,
        }
    }

    /// No-load winding-2 voltage from the block algebra: U2 = -Ytt^-1 Ytf U1.
    fn no_load_secondary(model: &NetworkModel) -> Vector3<Complex64> {
        let map = build_admittance(model).unwrap();
        let b = &map.branches[0];
        let y_tt = b.series_to_pu + b.shunt_to_pu;
        let y_tf = -b.series_to_pu;
        let a = Complex64::from_polar(1.0, 0.0);
        let u1 = Vector3::new(
            a,
            Complex64::from_polar(1.0, -2.0 * std::f64::consts::FRAC_PI_3),
            Complex64::from_polar(1.0, 2.0 * std::f64::consts::FRAC_PI_3),
        );
        let rhs = -(y_tf * u1);
        y_tt.lu().solve(&rhs).expect("winding-2 block invertible")
    }

    #[test]
    fn line_block_is_input_in_per_unit() {
        let z = Complex64::new(0.3, 0.25);
        let series_s = Matrix3::from_diagonal_element(1.0 / z);
        let model = model_with_line(series_s);
        let map = build_admittance(&model).unwrap();
        let b = map.branch("l1").unwrap();
        // Zbase = Vll^2 / S3ph = 121 ohm on 11 kV / 1 MVA
        let expected = series_s * Complex64::new(121.0, 0.0);
        assert_relative_eq!(
            (b.series_from_pu - expected).norm(),
            0.0,
            epsilon = 1e-12 * expected.norm()
        );
        assert_eq!(b.shunt_from_pu, Matrix3::zeros());
    }

    #[test]
    fn line_two_port_is_symmetric() {
        let z = sequence_to_phase(Complex64::new(0.9, 0.4), Complex64::new(0.3, 0.2));
        let model = model_with_line(z.try_inverse().unwrap());
        let map = build_admittance(&model).unwrap();
        let block = map.branches[0].two_port();
        for r in 0..6 {
            for c in 0..6 {
                assert_relative_eq!(
                    (block[(r, c)] - block[(c, r)]).norm(),
                    0.0,
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn sequence_transform_recovers_diagonal_for_equal_sequences() {
        let z = Complex64::new(0.4, 0.3);
        let m = sequence_to_phase(z, z);
        for r in 0..3 {
            for c in 0..3 {
                let expected = if r == c { z } else { Complex64::new(0.0, 0.0) };
                assert_relative_eq!((m[(r, c)] - expected).norm(), 0.0, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn sequence_transform_splits_self_and_mutual() {
        let z0 = Complex64::new(0.9, 0.6);
        let z1 = Complex64::new(0.3, 0.15);
        let m = sequence_to_phase(z0, z1);
        assert_relative_eq!((m[(0, 0)] - (z0 + 2.0 * z1) / 3.0).norm(), 0.0, epsilon = 1e-15);
        assert_relative_eq!((m[(0, 1)] - (z0 - z1) / 3.0).norm(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn wye_wye_at_nominal_tap_is_plain_series_branch() {
        let model = transformer_model(
            (WindingConnection::WyeGrounded, WindingConnection::WyeGrounded),
            TapChanger::fixed(),
        );
        let map = build_admittance(&model).unwrap();
        let b = map.branch("tx").unwrap();
        // z_pu on system base: 0.01+0.05j * (1 MVA / 500 kVA)
        let y_expected = (Complex64::new(0.02, 0.1)).inv();
        for r in 0..3 {
            for c in 0..3 {
                let expected = if r == c {
                    y_expected
                } else {
                    Complex64::new(0.0, 0.0)
                };
                assert_relative_eq!(
                    (b.series_from_pu[(r, c)] - expected).norm(),
                    0.0,
                    epsilon = 1e-9
                );
            }
        }
        assert!(b.shunt_from_pu.norm() < 1e-9);
        assert!(b.shunt_to_pu.norm() < 1e-9);
    }

    #[test]
    fn no_load_ratio_follows_tap_multiplier() {
        for (position, expected) in [(0, 1.0), (2, 1.025), (-6, 0.925)] {
            let model = transformer_model(
                (WindingConnection::WyeGrounded, WindingConnection::WyeGrounded),
                TapChanger {
                    step_pct: 1.25,
                    position,
                    range: (-6, 6),
                },
            );
            let u2 = no_load_secondary(&model);
            for k in 0..3 {
                assert_relative_eq!(u2[k].norm(), expected, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn delta_wye_shifts_secondary_by_thirty_degrees() {
        let model = transformer_model(
            (WindingConnection::Delta, WindingConnection::WyeGrounded),
            TapChanger::fixed(),
        );
        let u2 = no_load_secondary(&model);
        assert_relative_eq!(u2[0].norm(), 1.0, epsilon = 1e-12);
        let shift = u2[0].arg().to_degrees();
        assert_relative_eq!(shift, 30.0, epsilon = 1e-9);
        // still a balanced set
        assert_relative_eq!((u2[0] + u2[1] + u2[2]).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn delta_winding_leaves_primary_zero_sequence_floating() {
        let model = transformer_model(
            (WindingConnection::Delta, WindingConnection::WyeGrounded),
            TapChanger::fixed(),
        );
        let map = build_admittance(&model).unwrap();
        let b = map.branch("tx").unwrap();
        let y_ff = b.series_from_pu + b.shunt_from_pu;
        let ones = Vector3::from_element(Complex64::new(1.0, 0.0));
        assert!((y_ff * ones).norm() < 1e-12, "zero-sequence current into a delta winding");
    }

    #[test]
    fn ybus_matches_two_port_blocks() {
        let z = Complex64::new(0.3, 0.25);
        let model = model_with_line(Matrix3::from_diagonal_element(1.0 / z));
        let map = build_admittance(&model).unwrap();
        let index = model.node_index();
        let ybus = map.ybus(&model, &index);
        let block = map.branches[0].two_port();
        for r in 0..6 {
            for c in 0..6 {
                assert_relative_eq!((ybus[(r, c)] - block[(r, c)]).norm(), 0.0, epsilon = 1e-14);
            }
        }
    }
}

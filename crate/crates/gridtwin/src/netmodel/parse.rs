//! JSON network document parsing.
//!
//! The document layout is described in `docs/formats.md`. Parsing is strict:
//! unknown keys anywhere in the document are rejected so that typos fail
//! loudly instead of silently dropping data. All quantities are converted to
//! SI on the way in; per-unit conversion happens later against the declared
//! bases.

use nalgebra::Matrix3;
use num_complex::Complex64;
use serde::Deserialize;

use super::admittance::sequence_to_phase;
use super::{
    Bus, DeviceKind, Generator, LineSegment, Load, NetError, NetworkModel, PhaseMatrix,
    TapChanger, Transformer, WindingConnection,
};
use crate::phase::PhaseSet;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NetworkDoc {
    buses: Vec<BusDoc>,
    #[serde(default)]
    lines: Vec<LineDoc>,
    #[serde(default)]
    transformers: Vec<TransformerDoc>,
    #[serde(default)]
    loads: Vec<DeviceDoc>,
    #[serde(default)]
    generators: Vec<DeviceDoc>,
    slack: String,
    bases: BasesDoc,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BasesDoc {
    power_kva: f64,
    #[serde(default = "default_frequency")]
    frequency_hz: f64,
}

fn default_frequency() -> f64 {
    50.0
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BusDoc {
    id: String,
    base_voltage_v: f64,
    #[serde(default = "PhaseSet::abc")]
    phases: PhaseSet,
    #[serde(default)]
    voltage_limits_pu: Option<[f64; 2]>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LineDoc {
    id: String,
    from: String,
    to: String,
    length_m: f64,
    #[serde(default)]
    z_seq: Option<SequenceDoc>,
    #[serde(default)]
    z_matrix: Option<MatrixDoc>,
}

/// Cable datasheet form: per-kilometre sequence impedances, optional
/// per-kilometre capacitances.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SequenceDoc {
    r1_ohm_per_km: f64,
    x1_ohm_per_km: f64,
    r0_ohm_per_km: f64,
    x0_ohm_per_km: f64,
    #[serde(default)]
    c1_nf_per_km: f64,
    #[serde(default)]
    c0_nf_per_km: f64,
}

/// Explicit form: total series impedance matrices in ohms and an optional
/// per-end shunt susceptance matrix in microsiemens.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MatrixDoc {
    r_ohm: [[f64; 3]; 3],
    x_ohm: [[f64; 3]; 3],
    #[serde(default)]
    shunt_b_us: Option<[[f64; 3]; 3]>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TransformerDoc {
    id: String,
    from: String,
    to: String,
    rated_kva: f64,
    r_pu: f64,
    x_pu: f64,
    connection: [ConnectionDoc; 2],
    #[serde(default)]
    ratio: Option<f64>,
    #[serde(default)]
    hv_voltage_v: Option<f64>,
    #[serde(default)]
    lv_voltage_v: Option<f64>,
    #[serde(default)]
    tap: Option<TapDoc>,
}

#[derive(Deserialize, Clone, Copy)]
#[serde(rename_all = "snake_case")]
enum ConnectionDoc {
    Delta,
    WyeG,
}

impl From<ConnectionDoc> for WindingConnection {
    fn from(c: ConnectionDoc) -> WindingConnection {
        match c {
            ConnectionDoc::Delta => WindingConnection::Delta,
            ConnectionDoc::WyeG => WindingConnection::WyeGrounded,
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TapDoc {
    step_pct: f64,
    #[serde(default)]
    position: i32,
    range: [i32; 2],
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DeviceDoc {
    id: String,
    bus: String,
    #[serde(default = "PhaseSet::abc")]
    phases: PhaseSet,
    p_kw: PowerDoc,
    q_kvar: PowerDoc,
    #[serde(default)]
    kind: KindDoc,
}

/// A scalar is the device total, split equally over its phases; an array
/// gives one value per phase in the declared phase order.
#[derive(Deserialize)]
#[serde(untagged)]
enum PowerDoc {
    Total(f64),
    PerPhase(Vec<f64>),
}

#[derive(Deserialize, Default, Clone, Copy)]
#[serde(rename_all = "lowercase")]
enum KindDoc {
    #[default]
    Fixed,
    Allocated,
}

impl From<KindDoc> for DeviceKind {
    fn from(k: KindDoc) -> DeviceKind {
        match k {
            KindDoc::Fixed => DeviceKind::Fixed,
            KindDoc::Allocated => DeviceKind::Allocated,
        }
    }
}

/// Parses and validates a network document.
pub fn parse_network(text: &str) -> Result<NetworkModel, NetError> {
    let doc: NetworkDoc = serde_json::from_str(text)?;
    let model = lower(doc)?;
    model.validate()?;
    Ok(model)
}

fn lower(doc: NetworkDoc) -> Result<NetworkModel, NetError> {
    let invalid = |context: String, detail: String| NetError::InvalidValue { context, detail };

    let bus_bases: std::collections::HashMap<String, f64> = doc
        .buses
        .iter()
        .map(|b| (b.id.clone(), b.base_voltage_v))
        .collect();
    let buses = doc
        .buses
        .into_iter()
        .map(|b| Bus {
            id: b.id,
            base_voltage_v: b.base_voltage_v,
            phases: b.phases,
            voltage_limits_pu: b
                .voltage_limits_pu
                .map(|l| (l[0], l[1]))
                .unwrap_or((0.94, 1.06)),
        })
        .collect();

    let frequency_hz = doc.bases.frequency_hz;
    let mut lines = Vec::with_capacity(doc.lines.len());
    for line in doc.lines {
        let context = format!("line '{}'", line.id);
        let (z_total, shunt_end): (PhaseMatrix, PhaseMatrix) = match (line.z_seq, line.z_matrix) {
            (Some(seq), None) => {
                let km = line.length_m / 1e3;
                let z0 = Complex64::new(seq.r0_ohm_per_km, seq.x0_ohm_per_km) * km;
                let z1 = Complex64::new(seq.r1_ohm_per_km, seq.x1_ohm_per_km) * km;
                let omega = 2.0 * std::f64::consts::PI * frequency_hz;
                let b0 = omega * seq.c0_nf_per_km * 1e-9 * km;
                let b1 = omega * seq.c1_nf_per_km * 1e-9 * km;
                let shunt_total =
                    sequence_to_phase(Complex64::new(0.0, b0), Complex64::new(0.0, b1));
                (sequence_to_phase(z0, z1), shunt_total * Complex64::new(0.5, 0.0))
            }
            (None, Some(m)) => {
                let z = Matrix3::from_fn(|r, c| Complex64::new(m.r_ohm[r][c], m.x_ohm[r][c]));
                let shunt = match m.shunt_b_us {
                    Some(b) => Matrix3::from_fn(|r, c| Complex64::new(0.0, b[r][c] * 1e-6)),
                    None => Matrix3::zeros(),
                };
                (z, shunt)
            }
            (Some(_), Some(_)) => {
                return Err(invalid(
                    context,
                    "give either z_seq or z_matrix, not both".into(),
                ))
            }
            (None, None) => {
                return Err(invalid(context, "missing impedance (z_seq or z_matrix)".into()))
            }
        };
        let series_admittance_s = z_total.try_inverse().ok_or(NetError::SingularImpedance {
            branch: line.id.clone(),
        })?;
        lines.push(LineSegment {
            id: line.id,
            from: line.from,
            to: line.to,
            length_m: line.length_m,
            series_admittance_s,
            shunt_from_s: shunt_end,
            shunt_to_s: shunt_end,
        });
    }

    let mut transformers = Vec::with_capacity(doc.transformers.len());
    for tx in doc.transformers {
        let context = format!("transformer '{}'", tx.id);
        let (winding1_voltage_v, nominal_ratio) =
            match (tx.ratio, tx.hv_voltage_v, tx.lv_voltage_v) {
                (Some(r), None, None) => {
                    // Anchor the winding rating to the from-bus base.
                    let hv = *bus_bases.get(&tx.from).ok_or_else(|| NetError::UnknownBus {
                        referenced_by: context.clone(),
                        bus: tx.from.clone(),
                    })?;
                    (hv, r)
                }
                (None, Some(hv), Some(lv)) => {
                    if !(hv > 0.0 && lv > 0.0) {
                        return Err(invalid(context, "winding voltages must be positive".into()));
                    }
                    (hv, hv / lv)
                }
                _ => {
                    return Err(invalid(
                        context,
                        "give either ratio or both hv_voltage_v and lv_voltage_v".into(),
                    ))
                }
            };
        let tap = match tx.tap {
            Some(t) => TapChanger {
                step_pct: t.step_pct,
                position: t.position,
                range: (t.range[0], t.range[1]),
            },
            None => TapChanger::fixed(),
        };
        transformers.push(Transformer {
            id: tx.id,
            from: tx.from,
            to: tx.to,
            rated_va: tx.rated_kva * 1e3,
            series_impedance_pu: Complex64::new(tx.r_pu, tx.x_pu),
            connection: (tx.connection[0].into(), tx.connection[1].into()),
            winding1_voltage_v,
            nominal_ratio,
            tap,
        });
    }

    let mut loads = Vec::with_capacity(doc.loads.len());
    for dev in doc.loads {
        let (phases, power_va, kind) = lower_device(&dev, "load")?;
        loads.push(Load {
            id: dev.id,
            bus: dev.bus,
            phases,
            power_va,
            kind,
        });
    }
    let mut generators = Vec::with_capacity(doc.generators.len());
    for dev in doc.generators {
        let (phases, power_va, kind) = lower_device(&dev, "generator")?;
        generators.push(Generator {
            id: dev.id,
            bus: dev.bus,
            phases,
            power_va,
            kind,
        });
    }

    Ok(NetworkModel {
        buses,
        lines,
        transformers,
        loads,
        generators,
        slack_bus: doc.slack,
        power_base_va: doc.bases.power_kva * 1e3,
        frequency_hz,
    })
}

fn lower_device(
    dev: &DeviceDoc,
    what: &str,
) -> Result<(PhaseSet, Vec<Complex64>, DeviceKind), NetError> {
    let n = dev.phases.len();
    let expand = |value: &PowerDoc, unit: &str| -> Result<Vec<f64>, NetError> {
        match value {
            PowerDoc::Total(total) => Ok(vec![total * 1e3 / n as f64; n]),
            PowerDoc::PerPhase(values) => {
                if values.len() != n {
                    return Err(NetError::InvalidValue {
                        context: format!("{what} '{}'", dev.id),
                        detail: format!(
                            "{} {unit} entries for {} phases",
                            values.len(),
                            n
                        ),
                    });
                }
                Ok(values.iter().map(|v| v * 1e3).collect())
            }
        }
    };
    let p = expand(&dev.p_kw, "p_kw")?;
    let q = expand(&dev.q_kvar, "q_kvar")?;
    let power_va = p
        .iter()
        .zip(&q)
        .map(|(&p, &q)| Complex64::new(p, q))
        .collect();
    Ok((dev.phases, power_va, dev.kind.into()))
}

//! Export limits and curtailment economics on a linearised voltage-rise
//! model.
//!
//! A generator pushing power into a weak network raises the local voltage
//! roughly linearly: dv = R dP + X dQ with R and X taken from the voltage
//! sensitivity matrix. Everything here builds on that relation: how much a
//! site may export before the binding bus hits the upper limit, how the
//! answer changes when the inverter absorbs reactive power at a fixed power
//! factor, how much energy a static margin costs, and what the recovered
//! energy is worth.
//!
//! Power figures at this layer are in megawatts and voltages in per unit,
//! so sensitivities carry units of pu per MW. Energies integrate with the
//! rectangle rule at the series cadence, since rms measurements are already
//! time averages over their interval.

use nalgebra::DVector;

use crate::netmodel::NetworkModel;
use crate::powerflow::SensitivityMatrix;

#[derive(Debug, thiserror::Error)]
pub enum ExportError {
    #[error("power factor {0} outside [0.1, 1]")]
    BadPowerFactor(f64),
    #[error("{0}")]
    BadInput(String),
}

/// Reactive-to-active ratio of a generator absorbing vars at a lagging
/// power factor: q = -pf_coefficient(pf) * p. Power factors below 0.1 are
/// rejected, the ratio diverges there.
pub fn pf_coefficient(power_factor: f64) -> Result<f64, ExportError> {
    if !(0.1..=1.0).contains(&power_factor) {
        return Err(ExportError::BadPowerFactor(power_factor));
    }
    Ok((1.0 - power_factor * power_factor).sqrt() / power_factor)
}

/// How an export limit is set for a generation site.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExportScheme {
    /// Live limit from the present voltage headroom, exporting at unity
    /// power factor.
    DynamicUnity,
    /// Live limit with the inverter absorbing reactive power at this power
    /// factor, which partially cancels the voltage rise.
    QControl { power_factor: f64 },
    /// Live limit at unity power factor minus a fixed safety margin: the
    /// export worth `tolerance_pct` percent of voltage rise is held back to
    /// cover measurement and model error, and the result never goes below
    /// zero.
    Conservative { tolerance_pct: f64 },
}

impl ExportScheme {
    pub fn label(&self) -> String {
        match self {
            ExportScheme::DynamicUnity => "dynamic_unity".into(),
            ExportScheme::QControl { power_factor } => format!("q_control_{power_factor:.2}"),
            ExportScheme::Conservative { tolerance_pct } => {
                format!("conservative_{tolerance_pct:.2}")
            }
        }
    }

    /// Reactive injection per unit of active export under this scheme.
    fn q_per_p(&self) -> Result<f64, ExportError> {
        match self {
            ExportScheme::QControl { power_factor } => Ok(-pf_coefficient(*power_factor)?),
            ExportScheme::DynamicUnity | ExportScheme::Conservative { .. } => Ok(0.0),
        }
    }
}

/// Largest allowed export in MW, or no finite bound at all.
///
/// A `Limited` value can be negative: a bus already above the voltage limit
/// would need the site to absorb power to come back down. Downstream
/// accounting clamps negative limits to zero rather than monetising them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExportCeiling {
    Limited(f64),
    /// Exporting cannot raise any voltage under this scheme, so the voltage
    /// constraint imposes no cap.
    Unbounded,
}

impl ExportCeiling {
    pub fn mw(&self) -> Option<f64> {
        match self {
            ExportCeiling::Limited(mw) => Some(*mw),
            ExportCeiling::Unbounded => None,
        }
    }

    /// The usable export: negative and unbounded ceilings collapse to zero
    /// and infinity respectively.
    pub fn usable_mw(&self) -> f64 {
        match self {
            ExportCeiling::Limited(mw) => mw.max(0.0),
            ExportCeiling::Unbounded => f64::INFINITY,
        }
    }
}

/// Local voltage response of one connection point to its own injection.
#[derive(Debug, Clone, Copy)]
pub struct VoltageRiseModel {
    /// Voltage rise per MW of active injection, pu/MW.
    pub dv_dp: f64,
    /// Voltage rise per Mvar of reactive injection, pu/Mvar.
    pub dv_dq: f64,
}

impl VoltageRiseModel {
    /// The injection bus's own worst-phase response from a sensitivity
    /// matrix.
    pub fn from_sensitivity(
        model: &NetworkModel,
        sens: &SensitivityMatrix,
    ) -> Result<VoltageRiseModel, ExportError> {
        let bus_idx = model.bus_idx(&sens.injection_bus).ok_or_else(|| {
            ExportError::BadInput(format!("unknown injection bus {}", sens.injection_bus))
        })?;
        let mw_per_pu = model.power_base_va / 1e6;
        let node = sens
            .index
            .bus_nodes(bus_idx)
            .into_iter()
            .max_by(|a, b| sens.m[(*a, 0)].total_cmp(&sens.m[(*b, 0)]))
            .ok_or_else(|| ExportError::BadInput("injection bus has no nodes".into()))?;
        Ok(VoltageRiseModel {
            dv_dp: sens.m[(node, 0)] / mw_per_pu,
            dv_dq: sens.m[(node, 1)] / mw_per_pu,
        })
    }

    /// Voltage rise per MW exported under a scheme, pu/MW. Negative when
    /// reactive absorption overcompensates the active-power rise.
    pub fn rise_per_mw(&self, scheme: &ExportScheme) -> Result<f64, ExportError> {
        Ok(self.dv_dp + scheme.q_per_p()? * self.dv_dq)
    }

    /// Export that raises the local voltage by one percent, MW. Infinite
    /// when the scheme produces no rise at all.
    pub fn export_per_percent_rise(&self, scheme: &ExportScheme) -> Result<f64, ExportError> {
        let rise = self.rise_per_mw(scheme)?;
        if rise <= 0.0 {
            return Ok(f64::INFINITY);
        }
        Ok(0.01 / rise)
    }
}

/// Export held back per percent of voltage tolerance, MW.
pub fn safety_margin_mw(tolerance_pct: f64, mw_per_percent: f64) -> Result<f64, ExportError> {
    if !(tolerance_pct >= 0.0) {
        return Err(ExportError::BadInput(format!(
            "voltage tolerance {tolerance_pct} must be non-negative"
        )));
    }
    Ok(tolerance_pct * mw_per_percent)
}

/// Largest injection at the sensitivity matrix's bus before any node
/// voltage reaches `upper_limit_pu`, evaluated at the operating point
/// `v_twin_pu`.
///
/// Every node whose voltage rises with the injection is checked; nodes
/// whose voltage falls or stays put cannot bind and are skipped. The result
/// is negative when some rising node already sits above the limit. The
/// conservative scheme takes the unity-power-factor answer and subtracts
/// its safety margin, floored at zero.
pub fn max_injection_mw(
    model: &NetworkModel,
    sens: &SensitivityMatrix,
    v_twin_pu: &DVector<f64>,
    scheme: &ExportScheme,
    upper_limit_pu: f64,
) -> Result<ExportCeiling, ExportError> {
    if v_twin_pu.len() != sens.v_twin_pu.len() {
        return Err(ExportError::BadInput(format!(
            "operating point has {} nodes, sensitivity has {}",
            v_twin_pu.len(),
            sens.v_twin_pu.len()
        )));
    }
    if !(upper_limit_pu > 1.0) {
        return Err(ExportError::BadInput(format!(
            "upper voltage limit {upper_limit_pu} pu must exceed 1"
        )));
    }

    if let ExportScheme::Conservative { tolerance_pct } = scheme {
        let unity =
            max_injection_mw(model, sens, v_twin_pu, &ExportScheme::DynamicUnity, upper_limit_pu)?;
        let rise = VoltageRiseModel::from_sensitivity(model, sens)?;
        let per_percent = rise.export_per_percent_rise(&ExportScheme::DynamicUnity)?;
        let margin = safety_margin_mw(*tolerance_pct, per_percent)?;
        return Ok(match unity {
            ExportCeiling::Unbounded => ExportCeiling::Unbounded,
            ExportCeiling::Limited(mw) => ExportCeiling::Limited((mw - margin).max(0.0)),
        });
    }

    let mw_per_pu = model.power_base_va / 1e6;
    let q_per_p = scheme.q_per_p()?;
    let mut ceiling = f64::INFINITY;
    for n in 0..v_twin_pu.len() {
        let rise = (sens.m[(n, 0)] + q_per_p * sens.m[(n, 1)]) / mw_per_pu;
        if rise <= 0.0 {
            continue;
        }
        ceiling = ceiling.min((upper_limit_pu - v_twin_pu[n]) / rise);
    }
    if ceiling.is_finite() {
        Ok(ExportCeiling::Limited(ceiling))
    } else {
        Ok(ExportCeiling::Unbounded)
    }
}

/// `max_injection_mw` at the operating point the sensitivity matrix was
/// linearised around.
pub fn max_export_mw(
    model: &NetworkModel,
    sens: &SensitivityMatrix,
    scheme: &ExportScheme,
    upper_limit_pu: f64,
) -> Result<ExportCeiling, ExportError> {
    max_injection_mw(model, sens, &sens.v_twin_pu.clone(), scheme, upper_limit_pu)
}

/// Potential against measured generation, per timestamp.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurtailmentSample {
    pub potential_mw: f64,
    pub measured_mw: f64,
    /// max(potential - measured, 0).
    pub curtailment_mw: f64,
}

/// Generation a site could have delivered versus what it did deliver.
#[derive(Debug, Clone, PartialEq)]
pub struct CurtailmentSeries {
    pub samples: Vec<CurtailmentSample>,
}

impl CurtailmentSeries {
    /// Total curtailed energy with rectangle integration at a fixed
    /// cadence, MWh.
    pub fn curtailed_mwh(&self, cadence_s: f64) -> f64 {
        self.samples
            .iter()
            .map(|s| s.curtailment_mw)
            .sum::<f64>()
            * cadence_s
            / 3600.0
    }
}

/// How the reference profile gets aligned to the measurements.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CurtailmentOffset {
    /// Add this many MW to the scaled reference.
    Fixed(f64),
    /// Fit the offset as the mean difference between measurement and scaled
    /// reference over samples where the measurement stayed below this
    /// level, treating those periods as uncurtailed. The mean difference is
    /// the least-squares constant offset over that window.
    FitBelow { uncurtailed_mw: f64 },
}

/// Reconstruct potential generation from clipped output and a shape
/// reference.
///
/// Metered output says nothing about what the plant would have produced
/// while it sat clipped. A normalized reference profile with the right
/// shape (clear-sky model, nearby unconstrained plant) fills the gap: it is
/// scaled by the installed capacity, shifted by the offset, and the excess
/// of the result over the measurement is the curtailment, with spurious
/// negative values clamped to zero.
pub fn estimate_curtailment(
    measured_mw: &[f64],
    reference_profile: &[f64],
    capacity_mw: f64,
    offset: CurtailmentOffset,
) -> Result<CurtailmentSeries, ExportError> {
    if measured_mw.len() != reference_profile.len() || measured_mw.is_empty() {
        return Err(ExportError::BadInput(format!(
            "need matching non-empty measured and reference series, got {} and {}",
            measured_mw.len(),
            reference_profile.len()
        )));
    }
    if !(capacity_mw > 0.0) {
        return Err(ExportError::BadInput(format!(
            "installed capacity {capacity_mw} MW must be positive"
        )));
    }
    let offset_mw = match offset {
        CurtailmentOffset::Fixed(mw) => mw,
        CurtailmentOffset::FitBelow { uncurtailed_mw } => {
            let diffs: Vec<f64> = measured_mw
                .iter()
                .zip(reference_profile)
                .filter(|(m, _)| **m < uncurtailed_mw)
                .map(|(m, r)| m - r * capacity_mw)
                .collect();
            if diffs.is_empty() {
                return Err(ExportError::BadInput(
                    "no samples below the uncurtailed level to fit the offset against".into(),
                ));
            }
            diffs.iter().sum::<f64>() / diffs.len() as f64
        }
    };
    let samples = measured_mw
        .iter()
        .zip(reference_profile)
        .map(|(m, r)| {
            let potential = r * capacity_mw + offset_mw;
            CurtailmentSample {
                potential_mw: potential,
                measured_mw: *m,
                curtailment_mw: (potential - m).max(0.0),
            }
        })
        .collect();
    Ok(CurtailmentSeries { samples })
}

pub const ENERGY_PRICE_USD_PER_MWH: f64 = 100.0;
pub const CO2_INTENSITY_KG_PER_MWH: f64 = 400.0;

/// Value of the energy one scheme recovers from curtailment.
#[derive(Debug, Clone, PartialEq)]
pub struct SchemeBenefit {
    pub scheme: ExportScheme,
    pub recovered_mwh: f64,
    pub revenue_usd: f64,
    pub avoided_co2_t: f64,
    /// Export ceiling per timestep, MW. Negative means a voltage constraint
    /// was already violated; infinite means unconstrained.
    pub limit_mw: Vec<f64>,
    /// Curtailed power the scheme wins back per timestep, MW.
    pub recovered_mw: Vec<f64>,
}

impl SchemeBenefit {
    pub fn from_energy(
        scheme: ExportScheme,
        recovered_mwh: f64,
        price_usd_per_mwh: f64,
        co2_kg_per_mwh: f64,
    ) -> SchemeBenefit {
        SchemeBenefit {
            scheme,
            recovered_mwh,
            revenue_usd: recovered_mwh * price_usd_per_mwh,
            avoided_co2_t: recovered_mwh * co2_kg_per_mwh / 1000.0,
            limit_mw: Vec::new(),
            recovered_mw: Vec::new(),
        }
    }
}

/// Per-scheme recovered energy, revenue, and avoided emissions.
#[derive(Debug, Clone, PartialEq)]
pub struct BenefitReport {
    pub rows: Vec<SchemeBenefit>,
}

/// Score export schemes against an estimated curtailment history.
///
/// At each timestep the scheme's export ceiling comes from the linear
/// voltage model evaluated at that step's operating voltages; the power it
/// wins back is the curtailed power up to that ceiling, with negative
/// ceilings recovering nothing. Energy integrates by rectangles at the
/// cadence and is priced with the given energy price and carbon intensity.
pub fn scheme_benefit(
    model: &NetworkModel,
    sens: &SensitivityMatrix,
    curtailment: &CurtailmentSeries,
    v_twin_steps: &[DVector<f64>],
    schemes: &[ExportScheme],
    upper_limit_pu: f64,
    price_usd_per_mwh: f64,
    co2_kg_per_mwh: f64,
    cadence_s: f64,
) -> Result<BenefitReport, ExportError> {
    if v_twin_steps.len() != curtailment.samples.len() {
        return Err(ExportError::BadInput(format!(
            "{} operating points for {} curtailment samples",
            v_twin_steps.len(),
            curtailment.samples.len()
        )));
    }
    if !(cadence_s > 0.0) {
        return Err(ExportError::BadInput(format!(
            "cadence {cadence_s} s must be positive"
        )));
    }
    let mut rows = Vec::with_capacity(schemes.len());
    for scheme in schemes {
        let mut limit_mw = Vec::with_capacity(v_twin_steps.len());
        let mut recovered_mw = Vec::with_capacity(v_twin_steps.len());
        for (v_twin, sample) in v_twin_steps.iter().zip(&curtailment.samples) {
            let ceiling = max_injection_mw(model, sens, v_twin, scheme, upper_limit_pu)?;
            let limit = ceiling.mw().unwrap_or(f64::INFINITY);
            limit_mw.push(limit);
            recovered_mw.push(sample.curtailment_mw.min(ceiling.usable_mw()));
        }
        let recovered_mwh = recovered_mw.iter().sum::<f64>() * cadence_s / 3600.0;
        let mut row =
            SchemeBenefit::from_energy(*scheme, recovered_mwh, price_usd_per_mwh, co2_kg_per_mwh);
        row.limit_mw = limit_mw;
        row.recovered_mw = recovered_mw;
        rows.push(row);
    }
    Ok(BenefitReport { rows })
}

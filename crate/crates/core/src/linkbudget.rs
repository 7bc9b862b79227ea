//! Link budget: free-space loss, outdoor-to-indoor penetration, receiver
//! noise and cascaded path amplitudes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::SPEED_OF_LIGHT;

/// Boltzmann constant (J/K).
pub const BOLTZMANN: f64 = 1.380649e-23;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BudgetError {
    #[error("invalid link-budget input: {0}")]
    InvalidInput(String),
    #[error("indoor user without a building class")]
    MissingBuildingClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuildingClass {
    #[default]
    Traditional,
    ThermallyEfficient,
}

/// Building-entry loss per building class (dB), constant in frequency and
/// incidence angle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct O2iTable {
    pub traditional: f64,
    pub thermally_efficient: f64,
}

impl Default for O2iTable {
    fn default() -> Self {
        Self {
            traditional: 20.0,
            thermally_efficient: 38.0,
        }
    }
}

impl O2iTable {
    pub fn get(&self, class: BuildingClass) -> f64 {
        match class {
            BuildingClass::Traditional => self.traditional,
            BuildingClass::ThermallyEfficient => self.thermally_efficient,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BudgetConfig {
    /// Total transmit power per satellite, spread evenly over subcarriers.
    pub tx_power_dbm: f64,
    /// Extra satellite antenna gain on top of the array model.
    pub sat_antenna_gain_dbi: f64,
    pub noise_figure_db: f64,
    pub antenna_temperature_k: f64,
    pub o2i_loss_db: O2iTable,
    pub polarization_loss_db: f64,
    /// Frequency at which free-space loss is evaluated. `None` uses the
    /// carrier. Setting it fixes the user's effective aperture to that of an
    /// isotropic antenna at this frequency.
    pub path_loss_frequency_hz: Option<f64>,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self::leo_default()
    }
}

impl BudgetConfig {
    pub fn leo_default() -> Self {
        Self {
            tx_power_dbm: 55.0,
            sat_antenna_gain_dbi: 0.0,
            noise_figure_db: 7.0,
            antenna_temperature_k: 290.0,
            o2i_loss_db: O2iTable::default(),
            polarization_loss_db: 0.0,
            path_loss_frequency_hz: None,
        }
    }

    /// MEO: +10 dB/MHz EIRP density over LEO on the same bandwidth, with
    /// spreading loss compared at the LEO carrier.
    pub fn meo_default() -> Self {
        Self {
            tx_power_dbm: 65.0,
            path_loss_frequency_hz: Some(28e9),
            ..Self::leo_default()
        }
    }

    pub fn validate(&self) -> Result<(), BudgetError> {
        let finite = [
            ("tx_power_dbm", self.tx_power_dbm),
            ("sat_antenna_gain_dbi", self.sat_antenna_gain_dbi),
            ("noise_figure_db", self.noise_figure_db),
            ("antenna_temperature_k", self.antenna_temperature_k),
            ("polarization_loss_db", self.polarization_loss_db),
        ];
        for (name, v) in finite {
            if !v.is_finite() {
                return Err(BudgetError::InvalidInput(format!("{name} must be finite")));
            }
        }
        if !(self.antenna_temperature_k > 0.0) {
            return Err(BudgetError::InvalidInput("antenna_temperature_k must be > 0".into()));
        }
        for (name, v) in [
            ("o2i_loss_db.traditional", self.o2i_loss_db.traditional),
            ("o2i_loss_db.thermally_efficient", self.o2i_loss_db.thermally_efficient),
        ] {
            if !(v >= 0.0) {
                return Err(BudgetError::InvalidInput(format!("{name} must be >= 0")));
            }
        }
        if let Some(f) = self.path_loss_frequency_hz {
            if !(f > 0.0 && f.is_finite()) {
                return Err(BudgetError::InvalidInput("path_loss_frequency_hz must be > 0".into()));
            }
        }
        Ok(())
    }

    pub fn tx_power_w(&self) -> f64 {
        dbm_to_watts(self.tx_power_dbm)
    }

    /// Frequency used for free-space loss on links at carrier `fc`.
    pub fn loss_frequency(&self, fc: f64) -> f64 {
        self.path_loss_frequency_hz.unwrap_or(fc)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathBudget {
    /// Field amplitude relative to a 1 W reference.
    pub rx_amplitude_linear: f64,
    pub fspl_db: f64,
    pub o2i_db: f64,
    pub aggregate_gain_db: f64,
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf(dbm / 10.0) * 1e-3
}

pub fn watts_to_dbm(w: f64) -> f64 {
    10.0 * w.log10() + 30.0
}

pub fn db_to_power_ratio(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn free_space_path_loss(d: f64, fc: f64) -> Result<f64, BudgetError> {
    if !(d > 0.0 && fc > 0.0) || !d.is_finite() || !fc.is_finite() {
        return Err(BudgetError::InvalidInput(format!(
            "free-space loss needs d > 0 and fc > 0 (got d={d}, fc={fc})"
        )));
    }
    Ok(20.0 * (4.0 * std::f64::consts::PI * d * fc / SPEED_OF_LIGHT).log10())
}

/// Building-entry loss. The constant-per-class model ignores `fc`.
pub fn o2i_penetration_loss(
    user_indoor: bool,
    building_class: Option<BuildingClass>,
    _fc: f64,
    table: &O2iTable,
) -> Result<f64, BudgetError> {
    if !user_indoor {
        return Ok(0.0);
    }
    let class = building_class.ok_or(BudgetError::MissingBuildingClass)?;
    Ok(table.get(class))
}

/// Thermal noise power in one subcarrier (W).
pub fn noise_power_per_subcarrier(
    subcarrier_spacing: f64,
    noise_figure_db: f64,
    temperature_k: f64,
) -> Result<f64, BudgetError> {
    if !(subcarrier_spacing > 0.0 && temperature_k > 0.0) || !noise_figure_db.is_finite() {
        return Err(BudgetError::InvalidInput(format!(
            "noise power needs positive spacing/temperature (spacing={subcarrier_spacing}, T={temperature_k}, NF={noise_figure_db})"
        )));
    }
    Ok(BOLTZMANN * temperature_k * subcarrier_spacing * db_to_power_ratio(noise_figure_db))
}

/// Amplitude of a cascade of free-space legs `(distance, frequency)`.
/// Leg losses add in dB, i.e. leg amplitudes multiply.
pub fn path_amplitude(
    legs: &[(f64, f64)],
    gains_db: &[f64],
    o2i_db: f64,
) -> Result<PathBudget, BudgetError> {
    if legs.is_empty() {
        return Err(BudgetError::InvalidInput("path needs at least one leg".into()));
    }
    if !(o2i_db >= 0.0) {
        return Err(BudgetError::InvalidInput(format!("o2i loss {o2i_db} must be >= 0")));
    }
    let mut fspl_db = 0.0;
    for &(d, f) in legs {
        fspl_db += free_space_path_loss(d, f)?;
    }
    let gains: f64 = gains_db.iter().sum();
    if !gains.is_finite() {
        return Err(BudgetError::InvalidInput("gains must be finite".into()));
    }
    let aggregate_gain_db = gains - fspl_db - o2i_db;
    Ok(PathBudget {
        rx_amplitude_linear: 10f64.powf(aggregate_gain_db / 20.0),
        fspl_db,
        o2i_db,
        aggregate_gain_db,
    })
}

/// Total received power (dBm) from one satellite at slant range `d` with an
/// ideal (unit-gain) beam, before any building loss.
pub fn received_power_dbm(cfg: &BudgetConfig, d: f64, fc: f64) -> Result<f64, BudgetError> {
    Ok(cfg.tx_power_dbm + cfg.sat_antenna_gain_dbi
        - cfg.polarization_loss_db
        - free_space_path_loss(d, cfg.loss_frequency(fc))?)
}

//! OFDM observation model for LoS and satellite → RIS → user paths.
//!
//! The noiseless observation on subcarrier `n` of transmission `t` is
//!
//! ```text
//! mu[t, n] = pilot * sum_l alpha_l * beta_l[t] * exp(-j 2π f_n tau_l) * exp(j 2π nu_l t T)
//! ```
//!
//! where `alpha_l` is the (unknown, nuisance) complex path gain whose true
//! value is the link-budget amplitude, `beta_l[t]` the beamforming / RIS
//! inner product, `f_n` the baseband subcarrier frequency and `nu_l` the
//! Doppler shift (zero on RIS paths).

use std::f64::consts::TAU;

use nalgebra::{DMatrix, DVector, Vector3};
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constellation::SatelliteState;
use crate::fim::{Unknown, UnknownsLayout};
use crate::geometry::{
    AngleTuple, GeometryError, OrientationFrame, PathGeometry, PathKind, Point3, Vec3,
};
use crate::linkbudget::{
    self, dbm_to_watts, db_to_power_ratio, free_space_path_loss, noise_power_per_subcarrier,
    BudgetConfig, BudgetError, BuildingClass, BOLTZMANN,
};

/// Element spacing of every array, in wavelengths.
pub const HALF_WAVELENGTH: f64 = 0.5;

const J: Complex64 = Complex64 { re: 0.0, im: 1.0 };

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ChannelError {
    #[error("refract branch requested on a reflect-only panel")]
    BranchUnsupported,
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid scenario: {0}")]
    ScenarioInvalid(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Budget(#[from] BudgetError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct WaveformConfig {
    pub carrier_hz: f64,
    pub bandwidth_hz: f64,
    pub n_subcarriers: usize,
    pub n_transmissions: usize,
    /// Defaults to `1/Δf` (no cyclic prefix).
    pub symbol_period_s: Option<f64>,
}

impl WaveformConfig {
    pub fn validate(&self) -> Result<(), ChannelError> {
        if self.n_subcarriers == 0 || self.n_transmissions == 0 {
            return Err(ChannelError::InvalidInput(
                "n_subcarriers and n_transmissions must be >= 1".into(),
            ));
        }
        if !(self.bandwidth_hz > 0.0 && self.carrier_hz > 0.0) {
            return Err(ChannelError::InvalidInput(
                "bandwidth and carrier must be > 0".into(),
            ));
        }
        if let Some(ts) = self.symbol_period_s {
            if !(ts >= 1.0 / self.subcarrier_spacing() * (1.0 - 1e-12)) {
                return Err(ChannelError::InvalidInput(format!(
                    "symbol period {ts} s shorter than 1/Δf"
                )));
            }
        }
        Ok(())
    }

    pub fn subcarrier_spacing(&self) -> f64 {
        self.bandwidth_hz / self.n_subcarriers as f64
    }

    pub fn symbol_period(&self) -> f64 {
        self.symbol_period_s.unwrap_or(1.0 / self.subcarrier_spacing())
    }

    /// Baseband frequency of subcarrier `n`, centered on the carrier.
    pub fn baseband_frequency(&self, n: usize) -> f64 {
        (n as f64 - (self.n_subcarriers as f64 - 1.0) / 2.0) * self.subcarrier_spacing()
    }

    pub fn baseband_frequencies(&self) -> Vec<f64> {
        (0..self.n_subcarriers).map(|n| self.baseband_frequency(n)).collect()
    }

    pub fn wavelength(&self) -> f64 {
        crate::geometry::SPEED_OF_LIGHT / self.carrier_hz
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RisMode {
    ReflectOnly,
    ActiveReflect,
    Star,
    ActiveStar,
}

impl RisMode {
    pub fn is_active(self) -> bool {
        matches!(self, RisMode::ActiveReflect | RisMode::ActiveStar)
    }

    pub fn supports_refract(self) -> bool {
        matches!(self, RisMode::Star | RisMode::ActiveStar)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Reflect,
    Refract,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RisPanel {
    pub position: Point3,
    /// Local z is the outward (reflect-side) normal.
    pub orientation: OrientationFrame,
    pub rows: usize,
    pub cols: usize,
    pub mode: RisMode,
    pub epsilon: f64,
    pub supply_power_dbm: f64,
    pub amplifier_noise_figure_db: f64,
    /// Building whose facade carries the panel.
    pub building: Option<usize>,
    /// One unit-modulus element vector per transmission.
    pub phase_profiles: Vec<DVector<Complex64>>,
    /// Amplitude gain of the reflection amplifiers; 1 for passive panels.
    /// Resolved by [`Scenario::new`].
    pub amp_gain: f64,
}

impl RisPanel {
    pub fn n_elements(&self) -> usize {
        self.rows * self.cols
    }

    pub fn normal(&self) -> Vec3 {
        self.orientation.boresight()
    }

    pub fn branch_amplitude(&self, branch: Branch) -> Result<f64, ChannelError> {
        match branch {
            Branch::Reflect => Ok(self.epsilon),
            Branch::Refract if self.mode.supports_refract() => {
                Ok((1.0 - self.epsilon * self.epsilon).max(0.0).sqrt())
            }
            Branch::Refract => Err(ChannelError::BranchUnsupported),
        }
    }

    pub fn validate(&self, n_transmissions: usize) -> Result<(), ChannelError> {
        if self.rows == 0 || self.cols == 0 {
            return Err(ChannelError::InvalidInput("panel needs rows, cols >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(ChannelError::InvalidInput(format!(
                "epsilon {} outside [0, 1]",
                self.epsilon
            )));
        }
        if !self.supply_power_dbm.is_finite() && self.mode.is_active() {
            return Err(ChannelError::InvalidInput("supply power must be finite".into()));
        }
        if self.phase_profiles.len() != n_transmissions {
            return Err(ChannelError::InvalidInput(format!(
                "panel has {} phase profiles, expected {n_transmissions}",
                self.phase_profiles.len()
            )));
        }
        for p in &self.phase_profiles {
            if p.len() != self.n_elements() {
                return Err(ChannelError::InvalidInput("phase profile length mismatch".into()));
            }
            if p.iter().any(|c| (c.norm() - 1.0).abs() > 1e-12) {
                return Err(ChannelError::InvalidInput("phase profile not unit-modulus".into()));
            }
        }
        Ok(())
    }
}

fn element_offsets(rows: usize, cols: usize) -> impl Iterator<Item = (f64, f64)> {
    let r0 = (rows as f64 - 1.0) / 2.0;
    let c0 = (cols as f64 - 1.0) / 2.0;
    (0..rows).flat_map(move |r| (0..cols).map(move |c| (r as f64 - r0, c as f64 - c0)))
}

/// Steering vector of a `rows × cols` planar array for a local-frame unit
/// direction. Element `(r, c)` (offsets centered on the panel) has phase
/// `2π·spacing·(r·u_y + c·u_x)`; index is `r·cols + c`.
pub fn array_response_local(rows: usize, cols: usize, spacing: f64, w: &Vec3) -> DVector<Complex64> {
    DVector::from_iterator(
        rows * cols,
        element_offsets(rows, cols).map(|(r, c)| Complex64::cis(TAU * spacing * (r * w.y + c * w.x))),
    )
}

pub fn array_response(rows: usize, cols: usize, spacing: f64, angles: &AngleTuple) -> DVector<Complex64> {
    array_response_local(rows, cols, spacing, &angles.to_unit())
}

/// `a(θ)` and its derivatives with respect to azimuth and elevation.
pub fn array_response_angle_derivatives(
    rows: usize,
    cols: usize,
    spacing: f64,
    angles: &AngleTuple,
) -> (DVector<Complex64>, DVector<Complex64>, DVector<Complex64>) {
    let (sa, ca) = angles.azimuth.sin_cos();
    let (se, ce) = angles.elevation.sin_cos();
    let (ux, uy) = (ce * ca, ce * sa);
    let (dux_daz, duy_daz) = (-ce * sa, ce * ca);
    let (dux_del, duy_del) = (-se * ca, -se * sa);
    let n = rows * cols;
    let mut a = DVector::zeros(n);
    let mut d_az = DVector::zeros(n);
    let mut d_el = DVector::zeros(n);
    for (m, (r, c)) in element_offsets(rows, cols).enumerate() {
        let k = TAU * spacing;
        let am = Complex64::cis(k * (r * uy + c * ux));
        a[m] = am;
        d_az[m] = J * k * (r * duy_daz + c * dux_daz) * am;
        d_el[m] = J * k * (r * duy_del + c * dux_del) * am;
    }
    (a, d_az, d_el)
}

/// `Σ_m weights[m]·a_m(w)` and its gradient with respect to the local unit
/// vector `w`.
fn weighted_response(
    rows: usize,
    cols: usize,
    w: &Vec3,
    weights: &DVector<Complex64>,
) -> (Complex64, Vector3<Complex64>) {
    let k = TAU * HALF_WAVELENGTH;
    let mut value = Complex64::new(0.0, 0.0);
    let mut grad = Vector3::zeros();
    for ((r, c), wt) in element_offsets(rows, cols).zip(weights.iter()) {
        let term = wt * Complex64::cis(k * (r * w.y + c * w.x));
        value += term;
        grad[0] += J * k * c * term;
        grad[1] += J * k * r * term;
    }
    (value, grad)
}

/// Unit-norm beamformer with i.i.d. uniform element phases.
pub fn random_beamformer<R: Rng + ?Sized>(length: usize, rng: &mut R) -> DVector<Complex64> {
    let scale = 1.0 / (length as f64).sqrt();
    DVector::from_iterator(length, (0..length).map(|_| Complex64::from_polar(scale, rng.random_range(0.0..TAU))))
}

/// Unit-modulus RIS phase profile with i.i.d. uniform phases.
pub fn random_phase_profile<R: Rng + ?Sized>(length: usize, rng: &mut R) -> DVector<Complex64> {
    DVector::from_iterator(length, (0..length).map(|_| Complex64::cis(rng.random_range(0.0..TAU))))
}

/// Per-element coefficients of one branch at transmission `t`.
pub fn star_coefficients(
    panel: &RisPanel,
    branch: Branch,
    t: usize,
) -> Result<DVector<Complex64>, ChannelError> {
    let amp = panel.branch_amplitude(branch)? * panel.amp_gain;
    let profile = panel
        .phase_profiles
        .get(t)
        .ok_or_else(|| ChannelError::InvalidInput(format!("no phase profile for transmission {t}")))?;
    Ok(profile.map(|c| c * amp))
}

/// Amplitude gain of a reflection amplifier that adds `supply_power_dbm` to
/// an input of `incident_power_w`.
pub fn active_gain(incident_power_w: f64, supply_power_dbm: f64) -> Result<f64, ChannelError> {
    if !(incident_power_w > 0.0) || !incident_power_w.is_finite() {
        return Err(ChannelError::InvalidInput(format!(
            "incident power {incident_power_w} W must be > 0"
        )));
    }
    let supply = dbm_to_watts(supply_power_dbm);
    Ok(((incident_power_w + supply) / incident_power_w).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockBiasMode {
    #[default]
    Known,
    Unknown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserTerminal {
    pub position: Point3,
    pub indoor: bool,
    pub building: Option<usize>,
    pub building_class: Option<BuildingClass>,
}

impl UserTerminal {
    pub fn outdoor(position: Point3) -> Self {
        Self {
            position,
            indoor: false,
            building: None,
            building_class: None,
        }
    }

    pub fn indoor(position: Point3, building: usize) -> Self {
        Self {
            position,
            indoor: true,
            building: Some(building),
            building_class: Some(BuildingClass::default()),
        }
    }
}

/// Everything needed to build a [`Scenario`].
#[derive(Debug, Clone)]
pub struct ScenarioParts {
    pub waveform: WaveformConfig,
    pub budget: BudgetConfig,
    pub satellites: Vec<SatelliteState>,
    /// `beams[sat][t]`, unit norm, length = satellite antenna count.
    pub beams: Vec<Vec<DVector<Complex64>>>,
    pub panels: Vec<RisPanel>,
    pub user: UserTerminal,
    pub clock_bias: ClockBiasMode,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Route {
    kind: PathKind,
    sat: usize,
    ris: Option<usize>,
    branch: Option<Branch>,
    o2i_db: f64,
    /// Link-budget field amplitude per subcarrier (true |alpha|).
    amplitude: f64,
    /// `amplitude` per unit of [`Scenario::amplitude_unit`].
    link_gain: f64,
}

/// One resolved path at the user's true position.
#[derive(Debug, Clone, PartialEq)]
pub struct PropagationPath {
    pub kind: PathKind,
    pub satellite_id: usize,
    pub ris_id: Option<usize>,
    pub branch: Option<Branch>,
    pub link_amplitude: f64,
    /// Beamforming (and RIS) inner product per transmission.
    pub beam_factors: Vec<Complex64>,
    pub geometry: PathGeometry,
}

impl PropagationPath {
    pub fn complex_gain(&self, t: usize) -> Complex64 {
        self.beam_factors[t] * self.link_amplitude
    }
}

/// Parameter point at which the observation mean is evaluated.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub position: Point3,
    pub clock_bias_s: f64,
    pub gains: Vec<Complex64>,
}

/// Analytic gradient of `mu` in separable form:
/// `d mu[t, n] / d eta_k = Σ_l e[l, n] · (a[t][l, k] + f_n · b[t][l, k])`
/// with `e[l, n] = exp(-j 2π f_n tau_l)`.
#[derive(Debug, Clone)]
pub struct GradientTerms {
    pub freqs: Vec<f64>,
    pub delays: Vec<f64>,
    pub a: Vec<DMatrix<Complex64>>,
    pub b: Vec<DMatrix<Complex64>>,
}

impl GradientTerms {
    pub fn n_columns(&self) -> usize {
        self.a.first().map_or(0, |m| m.ncols())
    }

    pub fn gradient(&self, t: usize, n: usize) -> DVector<Complex64> {
        let f = self.freqs[n];
        let mut g = DVector::zeros(self.n_columns());
        for (l, tau) in self.delays.iter().enumerate() {
            let e = Complex64::cis(-TAU * f * tau);
            for k in 0..g.len() {
                g[k] += e * (self.a[t][(l, k)] + self.b[t][(l, k)] * f);
            }
        }
        g
    }
}

/// Channel parameters of one path, in the order used by the chain-rule route.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelParam {
    Delay(usize),
    Azimuth(usize),
    Elevation(usize),
    Doppler(usize),
    GainRe(usize),
    GainIm(usize),
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub waveform: WaveformConfig,
    pub budget: BudgetConfig,
    pub satellites: Vec<SatelliteState>,
    pub beams: Vec<Vec<DVector<Complex64>>>,
    pub panels: Vec<RisPanel>,
    pub user: UserTerminal,
    pub clock_bias: ClockBiasMode,
    /// Common unit-modulus pilot symbol.
    pub pilot: Complex64,
    tx_power_w: f64,
    noise_var: f64,
    routes: Vec<Route>,
    /// Per route and transmission: satellite-side beam product, and for RIS
    /// routes the element weights `c_t ∘ a_in` of the RIS inner product.
    sat_factors: Vec<Vec<Complex64>>,
    ris_weights: Vec<Vec<DVector<Complex64>>>,
}

impl Scenario {
    pub fn new(parts: ScenarioParts) -> Result<Self, ChannelError> {
        let tx_power_w = dbm_to_watts(parts.budget.tx_power_dbm);
        Self::build(parts, tx_power_w)
    }

    fn build(parts: ScenarioParts, tx_power_w: f64) -> Result<Self, ChannelError> {
        let ScenarioParts {
            waveform,
            budget,
            satellites,
            beams,
            mut panels,
            user,
            clock_bias,
        } = parts;
        waveform.validate()?;
        budget.validate()?;
        if !(tx_power_w >= 0.0) || !tx_power_w.is_finite() {
            return Err(ChannelError::InvalidInput("transmit power must be finite".into()));
        }
        if beams.len() != satellites.len() {
            return Err(ChannelError::ScenarioInvalid("one beam set per satellite required".into()));
        }
        for (sat, set) in satellites.iter().zip(&beams) {
            if set.len() != waveform.n_transmissions
                || set.iter().any(|b| b.len() != sat.n_antennas())
            {
                return Err(ChannelError::ScenarioInvalid("beamformer dimensions mismatch".into()));
            }
        }
        for p in &panels {
            p.validate(waveform.n_transmissions)?;
        }
        if user.indoor && user.building_class.is_none() {
            return Err(BudgetError::MissingBuildingClass.into());
        }

        let n_sc = waveform.n_subcarriers as f64;
        let fc = waveform.carrier_hz;
        let f_loss = budget.loss_frequency(fc);
        let extra_db = budget.sat_antenna_gain_dbi - budget.polarization_loss_db;
        let user_o2i = linkbudget::o2i_penetration_loss(
            user.indoor,
            user.building_class,
            fc,
            &budget.o2i_loss_db,
        )?;
        let p_sub = tx_power_w / n_sc;
        let temperature = budget.antenna_temperature_k;

        // Amplifier operating point: strongest illuminating satellite plus the
        // amplifier's own input noise, over the full band.
        for panel in panels.iter_mut() {
            panel.amp_gain = 1.0;
            if !panel.mode.is_active() {
                continue;
            }
            let n_el = panel.n_elements() as f64;
            let mut strongest: f64 = 0.0;
            for (s, sat) in satellites.iter().enumerate() {
                if !illuminates(sat, panel) {
                    continue;
                }
                let u1 = crate::geometry::los_direction(&sat.position, &panel.position)?;
                let w = sat.array_orientation.to_local(&u1);
                let a = array_response_local(sat.array_rows, sat.array_cols, HALF_WAVELENGTH, &w);
                let beam_gain: f64 = beams[s].iter().map(|f| a.dot(f).norm_sqr()).sum::<f64>()
                    / waveform.n_transmissions as f64;
                let d1 = (panel.position - sat.position).norm();
                let leg = db_to_power_ratio(extra_db - free_space_path_loss(d1, f_loss)?);
                strongest = strongest.max(tx_power_w * beam_gain * leg * n_el);
            }
            let amp_noise = n_el
                * BOLTZMANN
                * temperature
                * waveform.bandwidth_hz
                * db_to_power_ratio(panel.amplifier_noise_figure_db);
            panel.amp_gain = active_gain(strongest + amp_noise, panel.supply_power_dbm)?;
        }

        let mut noise_var = noise_power_per_subcarrier(
            waveform.subcarrier_spacing(),
            budget.noise_figure_db,
            temperature,
        )?;

        let mut routes = Vec::new();
        for (s, _) in satellites.iter().enumerate() {
            let d = (user.position - satellites[s].position).norm();
            let pb = linkbudget::path_amplitude(&[(d, f_loss)], &[extra_db], user_o2i)?;
            routes.push(Route {
                kind: PathKind::Los,
                sat: s,
                ris: None,
                branch: None,
                o2i_db: user_o2i,
                amplitude: p_sub.sqrt() * pb.rx_amplitude_linear,
                link_gain: pb.rx_amplitude_linear,
            });
        }
        for (j, panel) in panels.iter().enumerate() {
            let Some((branch, o2i_db)) = panel_link(panel, &user, &budget.o2i_loss_db)? else {
                continue;
            };
            let d2 = (user.position - panel.position).norm();
            // amplified noise re-radiated toward the user
            if panel.mode.is_active() {
                let branch_amp = panel.branch_amplitude(branch)?;
                let leg2 = linkbudget::path_amplitude(&[(d2, f_loss)], &[], o2i_db)?.rx_amplitude_linear;
                let sigma_v = noise_power_per_subcarrier(
                    waveform.subcarrier_spacing(),
                    panel.amplifier_noise_figure_db,
                    temperature,
                )?;
                noise_var += (panel.amp_gain * branch_amp * leg2).powi(2)
                    * panel.n_elements() as f64
                    * sigma_v;
            }
            for (s, sat) in satellites.iter().enumerate() {
                if !illuminates(sat, panel) {
                    continue;
                }
                let d1 = (panel.position - sat.position).norm();
                let pb = linkbudget::path_amplitude(&[(d1, f_loss), (d2, f_loss)], &[extra_db], o2i_db)?;
                routes.push(Route {
                    kind: PathKind::ViaRis,
                    sat: s,
                    ris: Some(j),
                    branch: Some(branch),
                    o2i_db,
                    amplitude: p_sub.sqrt() * pb.rx_amplitude_linear,
                    link_gain: pb.rx_amplitude_linear,
                });
            }
        }

        let mut scenario = Self {
            waveform,
            budget,
            satellites,
            beams,
            panels,
            user,
            clock_bias,
            pilot: Complex64::new(1.0, 0.0),
            tx_power_w,
            noise_var,
            routes,
            sat_factors: Vec::new(),
            ris_weights: Vec::new(),
        };
        scenario.cache_static_factors()?;
        Ok(scenario)
    }

    /// Precomputes the position-independent factors of each route.
    fn cache_static_factors(&mut self) -> Result<(), ChannelError> {
        let n_t = self.waveform.n_transmissions;
        let mut sat_factors = Vec::with_capacity(self.routes.len());
        let mut ris_weights = Vec::with_capacity(self.routes.len());
        for route in &self.routes {
            let sat = &self.satellites[route.sat];
            match (route.kind, route.ris) {
                (PathKind::ViaRis, Some(j)) => {
                    let panel = &self.panels[j];
                    let g = PathGeometry::via_ris(
                        &sat.position,
                        &sat.array_orientation,
                        &panel.position,
                        &panel.orientation,
                        &self.user.position,
                    )?;
                    let a_sat = array_response_local(sat.array_rows, sat.array_cols, HALF_WAVELENGTH, &g.sat_dir_local);
                    let a_in = array_response_local(
                        panel.rows,
                        panel.cols,
                        HALF_WAVELENGTH,
                        g.ris_incident_local.as_ref().expect("via-RIS geometry"),
                    );
                    let branch = route.branch.expect("via-RIS route has a branch");
                    let mut sf = Vec::with_capacity(n_t);
                    let mut rw = Vec::with_capacity(n_t);
                    for t in 0..n_t {
                        sf.push(a_sat.dot(&self.beams[route.sat][t]));
                        let c = star_coefficients(panel, branch, t)?;
                        rw.push(c.component_mul(&a_in));
                    }
                    sat_factors.push(sf);
                    ris_weights.push(rw);
                }
                _ => {
                    sat_factors.push(Vec::new());
                    ris_weights.push(Vec::new());
                }
            }
        }
        self.sat_factors = sat_factors;
        self.ris_weights = ris_weights;
        Ok(())
    }

    /// Same scenario with the total satellite transmit power set to `watts`.
    pub fn with_tx_power_w(&self, watts: f64) -> Result<Self, ChannelError> {
        let mut s = Self::build(self.parts(), watts)?;
        s.pilot = self.pilot;
        Ok(s)
    }

    /// Same geometry and random draws for a different user terminal.
    pub fn with_user(&self, user: UserTerminal) -> Result<Self, ChannelError> {
        let mut parts = self.parts();
        parts.user = user;
        let mut s = Self::build(parts, self.tx_power_w)?;
        s.pilot = self.pilot;
        Ok(s)
    }

    pub fn parts(&self) -> ScenarioParts {
        ScenarioParts {
            waveform: self.waveform.clone(),
            budget: self.budget.clone(),
            satellites: self.satellites.clone(),
            beams: self.beams.clone(),
            panels: self.panels.clone(),
            user: self.user.clone(),
            clock_bias: self.clock_bias,
        }
    }

    pub fn tx_power_w(&self) -> f64 {
        self.tx_power_w
    }

    /// Per-subcarrier noise variance, including amplified RIS noise.
    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }

    pub fn set_noise_var(&mut self, var: f64) {
        self.noise_var = var;
    }

    pub fn n_paths(&self) -> usize {
        self.routes.len()
    }

    pub fn layout(&self) -> UnknownsLayout {
        UnknownsLayout::new(self.clock_bias == ClockBiasMode::Unknown, self.routes.len())
    }

    pub fn true_params(&self) -> Params {
        Params {
            position: self.user.position,
            clock_bias_s: 0.0,
            gains: self.routes.iter().map(|r| Complex64::new(r.amplitude, 0.0)).collect(),
        }
    }

    fn route_geometry(&self, route: &Route, p: &Point3) -> Result<PathGeometry, GeometryError> {
        let sat = &self.satellites[route.sat];
        match route.ris {
            None => PathGeometry::los(&sat.position, &sat.velocity, &sat.array_orientation, p, self.waveform.carrier_hz),
            Some(j) => {
                let panel = &self.panels[j];
                PathGeometry::via_ris(&sat.position, &sat.array_orientation, &panel.position, &panel.orientation, p)
            }
        }
    }

    /// Beam factor of route `l` at transmission `t` and its gradient with
    /// respect to the position-dependent local departure direction.
    fn beam_factor(&self, l: usize, g: &PathGeometry, t: usize) -> (Complex64, Vector3<Complex64>) {
        let route = &self.routes[l];
        match route.ris {
            None => {
                let sat = &self.satellites[route.sat];
                weighted_response(sat.array_rows, sat.array_cols, &g.sat_dir_local, &self.beams[route.sat][t])
            }
            Some(j) => {
                let panel = &self.panels[j];
                let w = g.ris_dir_local.as_ref().expect("via-RIS geometry");
                let (rho, d_rho) = weighted_response(panel.rows, panel.cols, w, &self.ris_weights[l][t]);
                let s = self.sat_factors[l][t];
                (s * rho, d_rho * s)
            }
        }
    }

    pub fn paths(&self) -> Result<Vec<PropagationPath>, ChannelError> {
        let n_t = self.waveform.n_transmissions;
        self.routes
            .iter()
            .enumerate()
            .map(|(l, route)| {
                let geometry = self.route_geometry(route, &self.user.position)?;
                let beam_factors = (0..n_t).map(|t| self.beam_factor(l, &geometry, t).0).collect();
                Ok(PropagationPath {
                    kind: route.kind,
                    satellite_id: route.sat,
                    ris_id: route.ris,
                    branch: route.branch,
                    link_amplitude: route.amplitude,
                    beam_factors,
                    geometry,
                })
            })
            .collect()
    }

    fn check_indices(&self, t: usize, n: usize) -> Result<(), ChannelError> {
        if t >= self.waveform.n_transmissions || n >= self.waveform.n_subcarriers {
            return Err(ChannelError::ScenarioInvalid(format!(
                "(t={t}, n={n}) outside {}×{}",
                self.waveform.n_transmissions, self.waveform.n_subcarriers
            )));
        }
        Ok(())
    }

    /// Noiseless observation at an arbitrary parameter point.
    pub fn observation_mean_at(&self, params: &Params, t: usize, n: usize) -> Result<Complex64, ChannelError> {
        self.check_indices(t, n)?;
        if params.gains.len() != self.routes.len() {
            return Err(ChannelError::ScenarioInvalid("gain vector length mismatch".into()));
        }
        let f = self.waveform.baseband_frequency(n);
        let ts = self.waveform.symbol_period();
        let mut mu = Complex64::new(0.0, 0.0);
        for (l, route) in self.routes.iter().enumerate() {
            let g = self.route_geometry(route, &params.position)?;
            let (beta, _) = self.beam_factor(l, &g, t);
            let tau = g.delay_s + params.clock_bias_s;
            let nu = g.doppler_hz.unwrap_or(0.0);
            mu += params.gains[l] * beta * Complex64::cis(-TAU * f * tau) * Complex64::cis(TAU * nu * t as f64 * ts);
        }
        Ok(mu * self.pilot)
    }

    /// Per-subcarrier transmit amplitude `sqrt(P_tx / N)`.
    pub fn amplitude_unit(&self) -> f64 {
        (self.tx_power_w / self.waveform.n_subcarriers as f64).sqrt()
    }

    /// Separable gradient over the full unknown layout, with position
    /// derivatives taken through the unit-vector (direct) route.
    pub fn gradient_terms(&self, layout: &UnknownsLayout) -> Result<GradientTerms, ChannelError> {
        self.gradient_terms_scaled(layout, false)
    }

    /// As [`Scenario::gradient_terms`], but position and clock-bias columns
    /// are taken per unit of [`Scenario::amplitude_unit`], so they do not
    /// depend on transmit power except through active-panel gains.
    pub fn gradient_terms_per_unit_amplitude(&self, layout: &UnknownsLayout) -> Result<GradientTerms, ChannelError> {
        self.gradient_terms_scaled(layout, true)
    }

    fn gradient_terms_scaled(&self, layout: &UnknownsLayout, per_unit: bool) -> Result<GradientTerms, ChannelError> {
        if layout.n_paths() != self.routes.len() {
            return Err(ChannelError::ScenarioInvalid("unknowns layout does not match scenario".into()));
        }
        let n_t = self.waveform.n_transmissions;
        let l_paths = self.routes.len();
        let k = layout.len();
        let ts = self.waveform.symbol_period();
        let mut a = vec![DMatrix::zeros(l_paths, k); n_t];
        let mut b = vec![DMatrix::zeros(l_paths, k); n_t];
        let mut delays = Vec::with_capacity(l_paths);
        for (l, route) in self.routes.iter().enumerate() {
            let g = self.route_geometry(route, &self.user.position)?;
            delays.push(g.delay_s);
            let magnitude = if per_unit { route.link_gain } else { route.amplitude };
            let alpha = Complex64::new(magnitude, 0.0) * self.pilot;
            let nu = g.doppler_hz.unwrap_or(0.0);
            let d_nu = g.jacobians.doppler;
            let d_tau = g.jacobians.delay;
            for t in 0..n_t {
                let (beta, d_beta_w) = self.beam_factor(l, &g, t);
                let ramp = Complex64::cis(TAU * nu * t as f64 * ts);
                let d_beta_p = g.dir_jacobian.transpose().map(Complex64::from) * d_beta_w;
                for (col, unknown) in layout.iter().enumerate() {
                    match *unknown {
                        Unknown::Position(i) => {
                            a[t][(l, col)] = alpha * ramp * (d_beta_p[i] + beta * J * TAU * t as f64 * ts * d_nu[i]);
                            b[t][(l, col)] = alpha * ramp * beta * (-J * TAU * d_tau[i]);
                        }
                        Unknown::ClockBias => {
                            b[t][(l, col)] = alpha * ramp * beta * (-J * TAU);
                        }
                        Unknown::GainRe(p) if p == l => {
                            a[t][(l, col)] = self.pilot * ramp * beta;
                        }
                        Unknown::GainIm(p) if p == l => {
                            a[t][(l, col)] = self.pilot * ramp * beta * J;
                        }
                        _ => {}
                    }
                }
            }
        }
        Ok(GradientTerms {
            freqs: self.waveform.baseband_frequencies(),
            delays,
            a,
            b,
        })
    }

    /// Channel-parameter vector: per path delay, the two position-dependent
    /// departure angles, Doppler (LoS only) and Re/Im gain.
    pub fn channel_params(&self) -> Vec<ChannelParam> {
        let mut out = Vec::new();
        for (l, route) in self.routes.iter().enumerate() {
            out.push(ChannelParam::Delay(l));
            out.push(ChannelParam::Azimuth(l));
            out.push(ChannelParam::Elevation(l));
            if route.kind == PathKind::Los {
                out.push(ChannelParam::Doppler(l));
            }
            out.push(ChannelParam::GainRe(l));
            out.push(ChannelParam::GainIm(l));
        }
        out
    }

    /// Gradient terms with respect to the channel parameters, with angle
    /// derivatives taken in (azimuth, elevation) coordinates, together with
    /// the Jacobian `d eta / d (layout unknowns)` built from the geometry
    /// module's angle Jacobians.
    pub fn channel_param_terms(
        &self,
        layout: &UnknownsLayout,
    ) -> Result<(GradientTerms, Vec<ChannelParam>, DMatrix<f64>), ChannelError> {
        let params = self.channel_params();
        let n_t = self.waveform.n_transmissions;
        let l_paths = self.routes.len();
        let ts = self.waveform.symbol_period();
        let mut a = vec![DMatrix::zeros(l_paths, params.len()); n_t];
        let mut b = vec![DMatrix::zeros(l_paths, params.len()); n_t];
        let mut jac = DMatrix::zeros(params.len(), layout.len());
        let mut delays = Vec::with_capacity(l_paths);
        let geoms = self
            .routes
            .iter()
            .map(|r| self.route_geometry(r, &self.user.position))
            .collect::<Result<Vec<_>, _>>()?;
        for g in &geoms {
            delays.push(g.delay_s);
        }
        for (row, param) in params.iter().enumerate() {
            let l = match *param {
                ChannelParam::Delay(l)
                | ChannelParam::Azimuth(l)
                | ChannelParam::Elevation(l)
                | ChannelParam::Doppler(l)
                | ChannelParam::GainRe(l)
                | ChannelParam::GainIm(l) => l,
            };
            let route = &self.routes[l];
            let g = &geoms[l];
            let alpha = Complex64::new(route.amplitude, 0.0) * self.pilot;
            let nu = g.doppler_hz.unwrap_or(0.0);
            // geometry Jacobian row
            let d_p: Vec3 = match (*param, route.kind) {
                (ChannelParam::Delay(_), _) => g.jacobians.delay,
                (ChannelParam::Azimuth(_), PathKind::Los) => g.jacobians.sat_azimuth,
                (ChannelParam::Elevation(_), PathKind::Los) => g.jacobians.sat_elevation,
                (ChannelParam::Azimuth(_), PathKind::ViaRis) => g.jacobians.ris_azimuth,
                (ChannelParam::Elevation(_), PathKind::ViaRis) => g.jacobians.ris_elevation,
                (ChannelParam::Doppler(_), _) => g.jacobians.doppler,
                _ => Vec3::zeros(),
            };
            for (col, unknown) in layout.iter().enumerate() {
                jac[(row, col)] = match (*unknown, *param) {
                    (Unknown::Position(i), _) => d_p[i],
                    (Unknown::ClockBias, ChannelParam::Delay(_)) => 1.0,
                    (Unknown::GainRe(p), ChannelParam::GainRe(q)) if p == q => 1.0,
                    (Unknown::GainIm(p), ChannelParam::GainIm(q)) if p == q => 1.0,
                    _ => 0.0,
                };
            }
            // observation derivative
            let (angles, rows, cols) = match route.ris {
                None => {
                    let s = &self.satellites[route.sat];
                    (g.sat_aod, s.array_rows, s.array_cols)
                }
                Some(j) => (g.ris_aod.expect("via-RIS geometry"), self.panels[j].rows, self.panels[j].cols),
            };
            let (_, da_daz, da_del) = array_response_angle_derivatives(rows, cols, HALF_WAVELENGTH, &angles);
            for t in 0..n_t {
                let ramp = Complex64::cis(TAU * nu * t as f64 * ts);
                let (beta, _) = self.beam_factor(l, g, t);
                let weights = match route.ris {
                    None => &self.beams[route.sat][t],
                    Some(_) => &self.ris_weights[l][t],
                };
                let outer = match route.ris {
                    None => Complex64::new(1.0, 0.0),
                    Some(_) => self.sat_factors[l][t],
                };
                match *param {
                    ChannelParam::Delay(_) => b[t][(l, row)] = alpha * ramp * beta * (-J * TAU),
                    ChannelParam::Azimuth(_) => {
                        a[t][(l, row)] = alpha * ramp * outer * da_daz.dot(weights)
                    }
                    ChannelParam::Elevation(_) => {
                        a[t][(l, row)] = alpha * ramp * outer * da_del.dot(weights)
                    }
                    ChannelParam::Doppler(_) => {
                        a[t][(l, row)] = alpha * ramp * beta * J * TAU * t as f64 * ts
                    }
                    ChannelParam::GainRe(_) => a[t][(l, row)] = self.pilot * ramp * beta,
                    ChannelParam::GainIm(_) => a[t][(l, row)] = self.pilot * ramp * beta * J,
                }
            }
        }
        Ok((
            GradientTerms {
                freqs: self.waveform.baseband_frequencies(),
                delays,
                a,
                b,
            },
            params,
            jac,
        ))
    }
}

/// The satellite sits on the panel's reflect side.
fn illuminates(sat: &SatelliteState, panel: &RisPanel) -> bool {
    panel.normal().dot(&(sat.position - panel.position)) > 0.0
}

/// Branch that carries the panel's output to the user, and the building
/// entry loss on that leg. Reflect serves the outward half-space (through
/// a wall if the user is indoors); refract serves the far side only for
/// users sharing the panel's building (or lack of one).
fn panel_link(
    panel: &RisPanel,
    user: &UserTerminal,
    table: &linkbudget::O2iTable,
) -> Result<Option<(Branch, f64)>, ChannelError> {
    let side = panel.normal().dot(&(user.position - panel.position));
    if side > 0.0 {
        let o2i = linkbudget::o2i_penetration_loss(user.indoor, user.building_class, 0.0, table)?;
        return Ok(Some((Branch::Reflect, o2i)));
    }
    if side < 0.0 && panel.mode.supports_refract() && user.building == panel.building {
        return Ok(Some((Branch::Refract, 0.0)));
    }
    Ok(None)
}

/// Noiseless observation at the true parameters.
pub fn observation_mean(scenario: &Scenario, t: usize, n: usize) -> Result<Complex64, ChannelError> {
    scenario.observation_mean_at(&scenario.true_params(), t, n)
}

/// Analytic gradient `d mu[t, n] / d eta` over `layout`.
pub fn observation_gradient(
    scenario: &Scenario,
    t: usize,
    n: usize,
    layout: &UnknownsLayout,
) -> Result<DVector<Complex64>, ChannelError> {
    scenario.check_indices(t, n)?;
    Ok(scenario.gradient_terms(layout)?.gradient(t, n))
}


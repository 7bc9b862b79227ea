//! JSON configuration, the satellite-count and area-map experiments, CSV
//! output and the command-line entry point.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::channel::{
    random_beamformer, random_phase_profile, ChannelError, ClockBiasMode, RisMode, RisPanel,
    Scenario, ScenarioParts, UserTerminal, WaveformConfig,
};
use crate::constellation::{draw_constellation, ConstellationError, ConstellationSpec, SatelliteState};
use crate::fim::{evaluate, FimError};
use crate::geometry::{OrientationFrame, Point3, Vec3};
use crate::linkbudget::{BudgetConfig, BuildingClass};

/// Maximum distance between a STAR panel and its facade plane (m).
pub const FACADE_TOLERANCE_M: f64 = 0.01;

const BEAM_STREAM: u64 = 1000;
const PROFILE_STREAM: u64 = 100;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid config at `{path}`: {message}")]
    Validation { path: String, message: String },
    #[error("bad override `{0}` (expected key.path=value)")]
    Override(String),
}

fn invalid(path: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError::Validation {
        path: path.into(),
        message: message.into(),
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Constellation(#[from] ConstellationError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Fim(#[from] FimError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("experiment `{0}` does not match the requested command")]
    WrongExperiment(String),
    #[error("{0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WaveformSettings {
    /// Hz
    pub bandwidth: f64,
    pub n_subcarriers: usize,
    pub n_transmissions: usize,
    /// s; `null` means 1/Δf
    pub symbol_period: Option<f64>,
}

impl Default for WaveformSettings {
    fn default() -> Self {
        Self {
            bandwidth: 300e6,
            n_subcarriers: 3000,
            n_transmissions: 5,
            symbol_period: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConstellationSettings {
    pub altitude_m: f64,
    pub carrier_hz: f64,
    pub elevation_mask_deg: f64,
    pub array_rows: usize,
    pub array_cols: usize,
    pub budget: BudgetConfig,
}

impl ConstellationSettings {
    pub fn leo() -> Self {
        Self {
            altitude_m: 600e3,
            carrier_hz: 28e9,
            elevation_mask_deg: 10.0,
            array_rows: 8,
            array_cols: 8,
            budget: BudgetConfig::leo_default(),
        }
    }

    pub fn meo() -> Self {
        Self {
            altitude_m: 10_000e3,
            carrier_hz: 1.575e9,
            budget: BudgetConfig::meo_default(),
            ..Self::leo()
        }
    }
}

impl Default for ConstellationSettings {
    fn default() -> Self {
        Self::leo()
    }
}

fn default_constellations() -> BTreeMap<String, ConstellationSettings> {
    BTreeMap::from([
        ("leo".to_string(), ConstellationSettings::leo()),
        ("meo".to_string(), ConstellationSettings::meo()),
    ])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BuildingSettings {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub height: f64,
    #[serde(default)]
    pub class: BuildingClass,
}

impl BuildingSettings {
    pub fn contains(&self, p: &Point3) -> bool {
        p.x > self.x_min
            && p.x < self.x_max
            && p.y > self.y_min
            && p.y < self.y_max
            && p.z >= 0.0
            && p.z < self.height
    }

    fn center(&self) -> Point3 {
        Point3::new(
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
            0.5 * self.height,
        )
    }

    /// Whether `p` lies on one of the four walls (within `tol`).
    fn on_facade(&self, p: &Point3, tol: f64) -> bool {
        let in_x = p.x >= self.x_min - tol && p.x <= self.x_max + tol;
        let in_y = p.y >= self.y_min - tol && p.y <= self.y_max + tol;
        let in_z = p.z >= -tol && p.z <= self.height + tol;
        let on_x_wall = (p.x - self.x_min).abs() <= tol || (p.x - self.x_max).abs() <= tol;
        let on_y_wall = (p.y - self.y_min).abs() <= tol || (p.y - self.y_max).abs() <= tol;
        in_z && ((on_x_wall && in_y) || (on_y_wall && in_x))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PanelSettings {
    pub position: [f64; 3],
    /// Outward normal (the reflect side).
    pub normal: [f64; 3],
    #[serde(default = "default_panel_size")]
    pub rows: usize,
    #[serde(default = "default_panel_size")]
    pub cols: usize,
    #[serde(default = "default_mode")]
    pub mode: RisMode,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub supply_power_dbm: f64,
    #[serde(default = "default_amp_nf")]
    pub amplifier_noise_figure_db: f64,
}

fn default_panel_size() -> usize {
    20
}
fn default_mode() -> RisMode {
    RisMode::ActiveStar
}
fn default_epsilon() -> f64 {
    0.5
}
fn default_amp_nf() -> f64 {
    5.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserSettings {
    pub name: String,
    pub position: [f64; 3],
    #[serde(default)]
    pub indoor: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DrawMode {
    #[default]
    Nested,
    Independent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepCase {
    pub label: String,
    pub constellation: String,
    pub user: String,
    #[serde(default)]
    pub ris: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSettings {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub nx: usize,
    pub ny: usize,
    /// User height above ground (m).
    pub height: f64,
}

impl Default for GridSettings {
    fn default() -> Self {
        Self {
            x_min: -50.0,
            x_max: 50.0,
            y_min: -50.0,
            y_max: 50.0,
            nx: 50,
            ny: 50,
            height: 1.5,
        }
    }
}

impl GridSettings {
    /// Cell centers, x fastest.
    pub fn cells(&self) -> Vec<(f64, f64)> {
        let dx = (self.x_max - self.x_min) / self.nx as f64;
        let dy = (self.y_max - self.y_min) / self.ny as f64;
        let mut out = Vec::with_capacity(self.nx * self.ny);
        for iy in 0..self.ny {
            for ix in 0..self.nx {
                out.push((
                    self.x_min + (ix as f64 + 0.5) * dx,
                    self.y_min + (iy as f64 + 0.5) * dy,
                ));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Experiment {
    SatcountSweep {
        #[serde(default = "default_counts")]
        counts: Vec<usize>,
        #[serde(default)]
        draw_mode: DrawMode,
        #[serde(default = "default_cases")]
        cases: Vec<SweepCase>,
    },
    AreaMap {
        #[serde(default = "default_map_constellation")]
        constellation: String,
        #[serde(default = "default_map_count")]
        satellite_count: usize,
        #[serde(default)]
        grid: GridSettings,
        #[serde(default = "default_epsilons")]
        epsilons: Vec<f64>,
    },
}

fn default_counts() -> Vec<usize> {
    (1..=12).collect()
}
fn default_map_constellation() -> String {
    "leo".into()
}
fn default_map_count() -> usize {
    10
}
fn default_epsilons() -> Vec<f64> {
    vec![0.25, 0.5, 0.75]
}

fn default_cases() -> Vec<SweepCase> {
    let case = |label: &str, constellation: &str, user: &str, ris: bool| SweepCase {
        label: label.into(),
        constellation: constellation.into(),
        user: user.into(),
        ris,
    };
    vec![
        case("leo_ris_indoor", "leo", "indoor", true),
        case("leo_ris_outdoor", "leo", "outdoor", true),
        case("leo_indoor", "leo", "indoor", false),
        case("leo_outdoor", "leo", "outdoor", false),
        case("meo_indoor", "meo", "indoor", false),
        case("meo_outdoor", "meo", "outdoor", false),
    ]
}

impl Default for Experiment {
    fn default() -> Self {
        Experiment::SatcountSweep {
            counts: default_counts(),
            draw_mode: DrawMode::Nested,
            cases: default_cases(),
        }
    }
}

/// Fully resolved experiment configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub waveform: WaveformSettings,
    pub constellations: BTreeMap<String, ConstellationSettings>,
    pub ris_panels: Vec<PanelSettings>,
    pub users: Vec<UserSettings>,
    pub buildings: Vec<BuildingSettings>,
    pub experiment: Experiment,
    /// `null` means 0..20 for sweeps and [0] for area maps.
    pub seeds: Option<Vec<u64>>,
    pub clock_bias_mode: ClockBiasMode,
}

/// Panel 15 m from both default users, on the facade of the default building.
fn fig5_panel() -> PanelSettings {
    PanelSettings {
        position: [0.0, 0.0, 4.0],
        normal: [1.0, 0.0, 0.0],
        rows: 20,
        cols: 20,
        mode: RisMode::ActiveStar,
        epsilon: 0.5,
        supply_power_dbm: 0.0,
        amplifier_noise_figure_db: default_amp_nf(),
    }
}

fn fig5_users() -> Vec<UserSettings> {
    let d = Vec3::new(-0.8, 0.5, -0.2).normalize() * 15.0;
    let p = Point3::new(0.0, 0.0, 4.0);
    let indoor = p + d;
    let outdoor = p + Vec3::new(-d.x, d.y, d.z);
    vec![
        UserSettings {
            name: "indoor".into(),
            position: [indoor.x, indoor.y, indoor.z],
            indoor: true,
        },
        UserSettings {
            name: "outdoor".into(),
            position: [outdoor.x, outdoor.y, outdoor.z],
            indoor: false,
        },
    ]
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            waveform: WaveformSettings::default(),
            constellations: default_constellations(),
            ris_panels: vec![fig5_panel()],
            users: fig5_users(),
            buildings: vec![BuildingSettings {
                x_min: -20.0,
                x_max: 0.0,
                y_min: -10.0,
                y_max: 10.0,
                height: 15.0,
                class: BuildingClass::Traditional,
            }],
            experiment: Experiment::default(),
            seeds: None,
            clock_bias_mode: ClockBiasMode::Known,
        }
    }
}

impl ScenarioConfig {
    /// Two buildings across a street, one active STAR panel on each
    /// street-facing facade, 10 LEO satellites over a 100 m square.
    pub fn area_map_default() -> Self {
        let building = |x_min, x_max| BuildingSettings {
            x_min,
            x_max,
            y_min: -40.0,
            y_max: 40.0,
            height: 20.0,
            class: BuildingClass::Traditional,
        };
        let panel = |x: f64, nx: f64| PanelSettings {
            position: [x, 0.0, 4.0],
            normal: [nx, 0.0, 0.0],
            ..fig5_panel()
        };
        Self {
            ris_panels: vec![panel(-10.0, 1.0), panel(10.0, -1.0)],
            users: Vec::new(),
            buildings: vec![building(-45.0, -10.0), building(10.0, 45.0)],
            experiment: Experiment::AreaMap {
                constellation: default_map_constellation(),
                satellite_count: default_map_count(),
                grid: GridSettings::default(),
                epsilons: default_epsilons(),
            },
            ..Self::default()
        }
    }

    pub fn resolved_seeds(&self) -> Vec<u64> {
        match (&self.seeds, &self.experiment) {
            (Some(s), _) => s.clone(),
            (None, Experiment::SatcountSweep { .. }) => (0..20).collect(),
            (None, Experiment::AreaMap { .. }) => vec![0],
        }
    }

    pub fn waveform_for(&self, constellation: &ConstellationSettings) -> WaveformConfig {
        WaveformConfig {
            carrier_hz: constellation.carrier_hz,
            bandwidth_hz: self.waveform.bandwidth,
            n_subcarriers: self.waveform.n_subcarriers,
            n_transmissions: self.waveform.n_transmissions,
            symbol_period_s: self.waveform.symbol_period,
        }
    }

    /// Index of the building whose interior contains `p`.
    pub fn building_of(&self, p: &Point3) -> Option<usize> {
        self.buildings.iter().position(|b| b.contains(p))
    }

    /// Building whose facade carries panel `j`.
    pub fn panel_building(&self, j: usize) -> Option<usize> {
        let p = point(self.ris_panels[j].position);
        self.buildings
            .iter()
            .position(|b| b.on_facade(&p, FACADE_TOLERANCE_M))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let w = &self.waveform;
        if !(w.bandwidth > 0.0) || !w.bandwidth.is_finite() {
            return Err(invalid("waveform.bandwidth", "must be > 0"));
        }
        if w.n_subcarriers == 0 {
            return Err(invalid("waveform.n_subcarriers", "must be >= 1"));
        }
        if w.n_transmissions == 0 {
            return Err(invalid("waveform.n_transmissions", "must be >= 1"));
        }
        if let Some(ts) = w.symbol_period {
            if !(ts * w.bandwidth / w.n_subcarriers as f64 >= 1.0 - 1e-12) {
                return Err(invalid("waveform.symbol_period", "must be >= 1/Δf"));
            }
        }
        for (name, c) in &self.constellations {
            let at = |f: &str| format!("constellations.{name}.{f}");
            if !(c.altitude_m > 0.0) || !c.altitude_m.is_finite() {
                return Err(invalid(at("altitude_m"), "must be > 0"));
            }
            if !(c.carrier_hz > 0.0) || !c.carrier_hz.is_finite() {
                return Err(invalid(at("carrier_hz"), "must be > 0"));
            }
            if !(0.0..90.0).contains(&c.elevation_mask_deg) {
                return Err(invalid(at("elevation_mask_deg"), "must be in [0, 90)"));
            }
            if c.array_rows == 0 || c.array_cols == 0 {
                return Err(invalid(at("array_rows"), "array needs at least one element"));
            }
            c.budget
                .validate()
                .map_err(|e| invalid(at("budget"), e.to_string()))?;
        }
        for (i, b) in self.buildings.iter().enumerate() {
            if !(b.x_max > b.x_min && b.y_max > b.y_min && b.height > 0.0) {
                return Err(invalid(format!("buildings[{i}]"), "footprint and height must be positive"));
            }
        }
        for (j, p) in self.ris_panels.iter().enumerate() {
            let at = |f: &str| format!("ris_panels[{j}].{f}");
            if !(0.0..=1.0).contains(&p.epsilon) {
                return Err(invalid(at("epsilon"), format!("{} outside [0, 1]", p.epsilon)));
            }
            if p.rows == 0 || p.cols == 0 {
                return Err(invalid(at("rows"), "panel needs at least one element"));
            }
            if !p.supply_power_dbm.is_finite() {
                return Err(invalid(at("supply_power_dbm"), "must be finite"));
            }
            if !p.amplifier_noise_figure_db.is_finite() {
                return Err(invalid(at("amplifier_noise_figure_db"), "must be finite"));
            }
            let n = Vec3::from(p.normal);
            if !(n.norm() > 1e-9) || p.position.iter().any(|v| !v.is_finite()) {
                return Err(invalid(at("normal"), "must be a finite non-zero vector"));
            }
            match self.panel_building(j) {
                Some(b) => {
                    let out = point(p.position) - self.buildings[b].center();
                    if n.dot(&out) <= 0.0 {
                        return Err(invalid(at("normal"), "must point out of the building"));
                    }
                }
                None if p.mode.supports_refract() => {
                    return Err(invalid(at("position"), "STAR panel must lie on a building facade"));
                }
                None => {}
            }
        }
        for (i, u) in self.users.iter().enumerate() {
            if u.position.iter().any(|v| !v.is_finite()) {
                return Err(invalid(format!("users[{i}].position"), "must be finite"));
            }
            let inside = self.building_of(&point(u.position));
            if u.indoor && inside.is_none() {
                return Err(invalid(format!("users[{i}].position"), "indoor user outside every building"));
            }
            if !u.indoor && inside.is_some() {
                return Err(invalid(format!("users[{i}].indoor"), "user inside a building must be indoor"));
            }
        }
        if let Some(seeds) = &self.seeds {
            if seeds.is_empty() {
                return Err(invalid("seeds", "at least one seed required"));
            }
        }
        match &self.experiment {
            Experiment::SatcountSweep { counts, cases, .. } => {
                if counts.is_empty() {
                    return Err(invalid("experiment.counts", "at least one count required"));
                }
                for (i, c) in cases.iter().enumerate() {
                    if !self.constellations.contains_key(&c.constellation) {
                        return Err(invalid(
                            format!("experiment.cases[{i}].constellation"),
                            format!("unknown constellation `{}`", c.constellation),
                        ));
                    }
                    if !self.users.iter().any(|u| u.name == c.user) {
                        return Err(invalid(
                            format!("experiment.cases[{i}].user"),
                            format!("unknown user `{}`", c.user),
                        ));
                    }
                }
            }
            Experiment::AreaMap {
                constellation,
                grid,
                epsilons,
                ..
            } => {
                if !self.constellations.contains_key(constellation) {
                    return Err(invalid("experiment.constellation", format!("unknown constellation `{constellation}`")));
                }
                if grid.nx == 0 || grid.ny == 0 || !(grid.x_max > grid.x_min) || !(grid.y_max > grid.y_min) {
                    return Err(invalid("experiment.grid", "grid bounds and counts must be positive"));
                }
                if epsilons.is_empty() {
                    return Err(invalid("experiment.epsilons", "at least one value required"));
                }
                for (i, e) in epsilons.iter().enumerate() {
                    if !(0.0..=1.0).contains(e) {
                        return Err(invalid(format!("experiment.epsilons[{i}]"), format!("{e} outside [0, 1]")));
                    }
                }
            }
        }
        Ok(())
    }
}

fn point(p: [f64; 3]) -> Point3 {
    Point3::new(p[0], p[1], p[2])
}

pub fn parse_config(text: &str) -> Result<ScenarioConfig, ConfigError> {
    parse_config_with_overrides(text, &[])
}

/// Parses a JSON config after applying `key.path=value` overrides to the
/// document. Values are read as JSON, falling back to a plain string.
pub fn parse_config_with_overrides(text: &str, overrides: &[String]) -> Result<ScenarioConfig, ConfigError> {
    let mut doc: Value = serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    let cfg: ScenarioConfig = serde_json::from_value(doc).map_err(|e| ConfigError::Parse(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn apply_override(doc: &mut Value, spec: &str) -> Result<(), ConfigError> {
    let (key, raw) = spec
        .split_once('=')
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| ConfigError::Override(spec.to_string()))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        node = match node {
            Value::Array(items) => {
                let idx: usize = part.parse().map_err(|_| ConfigError::Override(spec.to_string()))?;
                items.get_mut(idx).ok_or_else(|| ConfigError::Override(spec.to_string()))?
            }
            Value::Object(map) => map
                .entry(part.to_string())
                .or_insert_with(|| Value::Object(Default::default())),
            _ => return Err(ConfigError::Override(spec.to_string())),
        };
        if last {
            *node = value;
            return Ok(());
        }
    }
    Err(ConfigError::Override(spec.to_string()))
}

/// One CSV row of a satellite-count sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub label: String,
    pub sweep: usize,
    pub seed: u64,
    pub peb_m: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    /// (label, sweep point, median PEB over seeds), in row order.
    pub medians: Vec<(String, usize, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub x_m: f64,
    pub y_m: f64,
    pub indoor: bool,
    pub epsilon: f64,
    pub peb_m: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AreaMapResult {
    pub rows: Vec<GridRow>,
}

impl AreaMapResult {
    pub fn for_epsilon(&self, eps: f64) -> impl Iterator<Item = &GridRow> {
        self.rows.iter().filter(move |r| r.epsilon == eps)
    }
}

/// Median; +∞ entries sort last.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 1 || v[m - 1].is_infinite() || v[m].is_infinite() {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Satellites and beams for one draw. Satellite `i` and its beams depend only
/// on (seed, i) in nested mode.
fn draw_satellites(
    settings: &ConstellationSettings,
    count: usize,
    seed: u64,
    n_transmissions: usize,
) -> Result<(Vec<SatelliteState>, Vec<Vec<nalgebra::DVector<num_complex::Complex64>>>), RunError> {
    if count == 0 {
        return Ok((Vec::new(), Vec::new()));
    }
    let spec = ConstellationSpec {
        count,
        altitude_m: settings.altitude_m,
        elevation_mask_rad: settings.elevation_mask_deg.to_radians(),
        rng_seed: seed,
        array_rows: settings.array_rows,
        array_cols: settings.array_cols,
    };
    let sats = draw_constellation(&spec)?;
    let beams = sats
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = stream_rng(seed, BEAM_STREAM + i as u64);
            (0..n_transmissions)
                .map(|_| random_beamformer(s.n_antennas(), &mut rng))
                .collect()
        })
        .collect();
    Ok((sats, beams))
}

fn build_panels(cfg: &ScenarioConfig, seed: u64, epsilon: Option<f64>) -> Result<Vec<RisPanel>, RunError> {
    cfg.ris_panels
        .iter()
        .enumerate()
        .map(|(j, p)| {
            let mut rng = stream_rng(seed, PROFILE_STREAM + j as u64);
            let n = p.rows * p.cols;
            let orientation = OrientationFrame::from_boresight(&Vec3::from(p.normal), &Vec3::z())
                .map_err(ChannelError::from)?;
            Ok(RisPanel {
                position: point(p.position),
                orientation,
                rows: p.rows,
                cols: p.cols,
                mode: p.mode,
                epsilon: epsilon.unwrap_or(p.epsilon),
                supply_power_dbm: p.supply_power_dbm,
                amplifier_noise_figure_db: p.amplifier_noise_figure_db,
                building: cfg.panel_building(j),
                phase_profiles: (0..cfg.waveform.n_transmissions)
                    .map(|_| random_phase_profile(n, &mut rng))
                    .collect(),
                amp_gain: 1.0,
            })
        })
        .collect()
}

fn user_terminal(cfg: &ScenarioConfig, position: Point3, indoor: bool) -> UserTerminal {
    match cfg.building_of(&position).filter(|_| indoor) {
        Some(b) => UserTerminal {
            position,
            indoor: true,
            building: Some(b),
            building_class: Some(cfg.buildings[b].class),
        },
        None => UserTerminal::outdoor(position),
    }
}

/// Independent-mode seed for one sweep point.
fn independent_seed(seed: u64, count: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (count as u64)
}

/// PEB of one sweep cell; singular or unserved cells give +∞.
pub fn satcount_point(
    cfg: &ScenarioConfig,
    case: &SweepCase,
    count: usize,
    seed: u64,
    draw_mode: DrawMode,
) -> Result<f64, RunError> {
    let settings = &cfg.constellations[&case.constellation];
    let user = cfg
        .users
        .iter()
        .find(|u| u.name == case.user)
        .ok_or_else(|| RunError::Config(format!("unknown user `{}`", case.user)))?;
    let draw_seed = match draw_mode {
        DrawMode::Nested => seed,
        DrawMode::Independent => independent_seed(seed, count),
    };
    let (satellites, beams) = draw_satellites(settings, count, draw_seed, cfg.waveform.n_transmissions)?;
    let panels = if case.ris { build_panels(cfg, seed, None)? } else { Vec::new() };
    let scenario = Scenario::new(ScenarioParts {
        waveform: cfg.waveform_for(settings),
        budget: settings.budget.clone(),
        satellites,
        beams,
        panels,
        user: user_terminal(cfg, point(user.position), user.indoor),
        clock_bias: cfg.clock_bias_mode,
    })?;
    Ok(evaluate(&scenario)?.peb_m)
}

pub fn run_satcount_sweep(cfg: &ScenarioConfig) -> Result<SweepResult, RunError> {
    let Experiment::SatcountSweep {
        counts,
        draw_mode,
        cases,
    } = &cfg.experiment
    else {
        return Err(RunError::WrongExperiment("area_map".into()));
    };
    let seeds = cfg.resolved_seeds();
    let mut items: Vec<(&SweepCase, usize, u64)> = Vec::new();
    for c in cases {
        for &k in counts {
            items.extend(seeds.iter().map(|&s| (c, k, s)));
        }
    }
    let pebs = items
        .par_iter()
        .map(|&(c, k, s)| satcount_point(cfg, c, k, s, *draw_mode))
        .collect::<Result<Vec<f64>, RunError>>()?;
    let rows: Vec<SweepRow> = items
        .iter()
        .zip(pebs)
        .map(|(&(c, k, s), peb_m)| SweepRow {
            label: c.label.clone(),
            sweep: k,
            seed: s,
            peb_m,
        })
        .collect();
    let medians = rows
        .chunks(seeds.len())
        .map(|g| {
            let v: Vec<f64> = g.iter().map(|r| r.peb_m).collect();
            (g[0].label.clone(), g[0].sweep, median(&v))
        })
        .collect();
    Ok(SweepResult { rows, medians })
}

pub fn run_area_map(cfg: &ScenarioConfig) -> Result<AreaMapResult, RunError> {
    let Experiment::AreaMap {
        constellation,
        satellite_count,
        grid,
        epsilons,
    } = &cfg.experiment
    else {
        return Err(RunError::WrongExperiment("satcount_sweep".into()));
    };
    let settings = &cfg.constellations[constellation];
    let seeds = cfg.resolved_seeds();
    let cells = grid.cells();
    let mut rows = Vec::with_capacity(cells.len() * epsilons.len());
    for &eps in epsilons {
        let per_seed = seeds
            .iter()
            .map(|&seed| {
                let (satellites, beams) =
                    draw_satellites(settings, *satellite_count, seed, cfg.waveform.n_transmissions)?;
                let base = ScenarioParts {
                    waveform: cfg.waveform_for(settings),
                    budget: settings.budget.clone(),
                    satellites,
                    beams,
                    panels: build_panels(cfg, seed, Some(eps))?,
                    user: UserTerminal::outdoor(Point3::new(0.0, 0.0, grid.height)),
                    clock_bias: cfg.clock_bias_mode,
                };
                cells
                    .par_iter()
                    .map(|&(x, y)| {
                        let p = Point3::new(x, y, grid.height);
                        let mut parts = base.clone();
                        parts.user = user_terminal(cfg, p, cfg.building_of(&p).is_some());
                        Ok(evaluate(&Scenario::new(parts)?)?.peb_m)
                    })
                    .collect::<Result<Vec<f64>, RunError>>()
            })
            .collect::<Result<Vec<_>, RunError>>()?;
        for (i, &(x, y)) in cells.iter().enumerate() {
            let v: Vec<f64> = per_seed.iter().map(|s| s[i]).collect();
            rows.push(GridRow {
                x_m: x,
                y_m: y,
                indoor: cfg.building_of(&Point3::new(x, y, grid.height)).is_some(),
                epsilon: eps,
                peb_m: median(&v),
            });
        }
    }
    Ok(AreaMapResult { rows })
}

/// Formats like C's `%.9g`, with +∞ as `inf`.
pub fn format_g9(x: f64) -> String {
    const P: i32 = 9;
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{:.*e}", (P - 1) as usize, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("exponent digits");
    if !(-4..P).contains(&exp) {
        let m = strip_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        strip_zeros(&format!("{:.*}", (P - 1 - exp) as usize, x)).to_string()
    }
}

fn strip_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn sweep_csv(result: &SweepResult) -> String {
    let mut out = String::from("label,sweep,seed,peb_m\n");
    for r in &result.rows {
        let _ = writeln!(out, "{},{},{},{}", r.label, r.sweep, r.seed, format_g9(r.peb_m));
    }
    out
}

pub fn grid_csv(result: &AreaMapResult) -> String {
    let mut out = String::from("x_m,y_m,indoor,epsilon,peb_m\n");
    for r in &result.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            format_g9(r.x_m),
            format_g9(r.y_m),
            r.indoor as u8,
            format_g9(r.epsilon),
            format_g9(r.peb_m)
        );
    }
    out
}

/// Parses `--seeds` as a comma list with optional `a-b` inclusive ranges.
pub fn parse_seeds(text: &str) -> Result<Vec<u64>, ConfigError> {
    let bad = || invalid("--seeds", format!("cannot parse `{text}`"));
    let mut out = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (u64, u64) = (a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?);
                if b < a {
                    return Err(bad());
                }
                out.extend(a..=b);
            }
            None => out.push(part.parse().map_err(|_| bad())?),
        }
    }
    if out.is_empty() {
        return Err(bad());
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    Satcount,
    Areamap,
    Validate,
}

#[derive(Debug, clap::Parser)]
#[command(name = "pebsim", about = "Position error bounds for satellite + RIS localization")]
pub struct Cli {
    #[arg(value_enum)]
    pub command: Command,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma list with ranges, e.g. `0-19` or `1,4,7`
    #[arg(long)]
    pub seeds: Option<String>,
    /// `key.path=value`, applied to the JSON before parsing; repeatable
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

/// Environment variable fixing the worker thread count.
pub const THREADS_ENV: &str = "PEBSIM_THREADS";

pub fn load_config(cli: &Cli) -> Result<ScenarioConfig, ConfigError> {
    let text = std::fs::read_to_string(&cli.config).map_err(|source| ConfigError::Io {
        path: cli.config.clone(),
        source,
    })?;
    let mut cfg = parse_config_with_overrides(&text, &cli.overrides)?;
    if let Some(s) = &cli.seeds {
        cfg.seeds = Some(parse_seeds(s)?);
    }
    Ok(cfg)
}

fn write_output(dir: &Path, name: String, body: &str) -> Result<PathBuf, RunError> {
    std::fs::create_dir_all(dir).map_err(|source| RunError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let path = dir.join(name);
    std::fs::write(&path, body).map_err(|source| RunError::Io {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "pebsim".into())
}

/// Runs the command and returns the process exit code.
pub fn cli_main(cli: &Cli) -> i32 {
    if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
        // ignore "already initialized" when called more than once in-process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let cfg = match load_config(cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("pebsim: {e}");
            return EXIT_CONFIG;
        }
    };
    let out_dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    let result = match cli.command {
        Command::Validate => {
            let mut resolved = cfg.clone();
            resolved.seeds = Some(cfg.resolved_seeds());
            match serde_json::to_string_pretty(&resolved) {
                Ok(s) => {
                    // a closed pipe (e.g. `| head`) is not a failure
                    let _ = std::io::Write::write_all(&mut std::io::stdout(), format!("{s}\n").as_bytes());
                    Ok(())
                }
                Err(e) => Err(RunError::Config(e.to_string())),
            }
        }
        Command::Satcount => run_satcount_sweep(&cfg).and_then(|r| {
            let path = write_output(&out_dir, format!("{}_peb.csv", stem(&cli.config)), &sweep_csv(&r))?;
            for (label, k, m) in &r.medians {
                println!("{label} satellites={k} median_peb_m={}", format_g9(*m));
            }
            println!("wrote {}", path.display());
            Ok(())
        }),
        Command::Areamap => run_area_map(&cfg).and_then(|r| {
            let path = write_output(&out_dir, format!("{}_map.csv", stem(&cli.config)), &grid_csv(&r))?;
            let Experiment::AreaMap { epsilons, .. } = &cfg.experiment else {
                unreachable!("run_area_map checked the experiment kind")
            };
            for &eps in epsilons {
                for indoor in [true, false] {
                    let v: Vec<f64> = r.for_epsilon(eps).filter(|c| c.indoor == indoor).map(|c| c.peb_m).collect();
                    let tag = if indoor { "indoor" } else { "outdoor" };
                    println!("epsilon={} {tag} cells={} median_peb_m={}", format_g9(eps), v.len(), format_g9(median(&v)));
                }
            }
            println!("wrote {}", path.display());
            Ok(())
        }),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(RunError::WrongExperiment(kind)) => {
            eprintln!("pebsim: config describes a `{kind}` experiment");
            EXIT_CONFIG
        }
        Err(e) => {
            eprintln!("pebsim: {e}");
            EXIT_RUNTIME
        }
    }
}

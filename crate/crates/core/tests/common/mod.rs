#![allow(dead_code)]

use std::f64::consts::TAU;

use nalgebra::DMatrix;
use num_complex::Complex64;
use pebsim::channel::{
    random_beamformer, random_phase_profile, ClockBiasMode, RisMode, RisPanel, Scenario,
    ScenarioParts, UserTerminal, WaveformConfig,
};
use pebsim::constellation::{draw_constellation, ConstellationSpec};
use pebsim::geometry::{OrientationFrame, Point3, Vec3};
use pebsim::linkbudget::BudgetConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const MODES: [RisMode; 4] = [
    RisMode::ReflectOnly,
    RisMode::ActiveReflect,
    RisMode::Star,
    RisMode::ActiveStar,
];

pub struct RandomSpec {
    pub max_sats: usize,
    pub max_panels: usize,
    pub n_subcarriers: usize,
    pub n_transmissions: usize,
    pub panel_size: usize,
}

impl Default for RandomSpec {
    fn default() -> Self {
        Self {
            max_sats: 10,
            max_panels: 2,
            n_subcarriers: 3000,
            n_transmissions: 5,
            panel_size: 8,
        }
    }
}

pub fn leo_waveform(n_subcarriers: usize, n_transmissions: usize) -> WaveformConfig {
    WaveformConfig {
        carrier_hz: 28e9,
        bandwidth_hz: 300e6,
        n_subcarriers,
        n_transmissions,
        symbol_period_s: None,
    }
}

fn random_unit<R: Rng>(rng: &mut R) -> Vec3 {
    let z: f64 = rng.random_range(-1.0..1.0);
    let phi = rng.random_range(0.0..TAU);
    let r = (1.0 - z * z).sqrt();
    Vec3::new(r * phi.cos(), r * phi.sin(), z)
}

/// Random LEO scenario: satellites, RIS panels with random modes and
/// orientations, an indoor or outdoor user, random clock-bias mode.
pub fn random_scenario(seed: u64, spec: &RandomSpec) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_sats = rng.random_range(1..=spec.max_sats);
    let n_panels = rng.random_range(0..=spec.max_panels);
    let sats = draw_constellation(&ConstellationSpec::new(n_sats, 600e3, 0.2, seed)).unwrap();
    let beams = sats
        .iter()
        .map(|s| (0..spec.n_transmissions).map(|_| random_beamformer(s.n_antennas(), &mut rng)).collect())
        .collect();
    let indoor = rng.random_bool(0.5);
    let mut panels = Vec::new();
    for _ in 0..n_panels {
        let position = Point3::new(
            rng.random_range(-30.0..30.0),
            rng.random_range(-30.0..30.0),
            rng.random_range(1.0..10.0),
        );
        // tilt the normal upward a little so satellites usually illuminate it
        let mut normal = random_unit(&mut rng);
        normal.z = normal.z.abs() + 0.2;
        let orientation = OrientationFrame::from_boresight(&normal, &Vec3::z())
            .or_else(|_| OrientationFrame::from_boresight(&normal, &Vec3::x()))
            .unwrap();
        let mode = MODES[rng.random_range(0..4)];
        let n = spec.panel_size;
        panels.push(RisPanel {
            position,
            orientation,
            rows: n,
            cols: n,
            mode,
            epsilon: rng.random_range(0.1..0.9),
            supply_power_dbm: 0.0,
            amplifier_noise_figure_db: 5.0,
            building: if indoor { Some(0) } else { None },
            phase_profiles: (0..spec.n_transmissions)
                .map(|_| random_phase_profile(n * n, &mut rng))
                .collect(),
            amp_gain: 1.0,
        });
    }
    let position = Point3::new(
        rng.random_range(-40.0..40.0),
        rng.random_range(-40.0..40.0),
        rng.random_range(0.5..12.0),
    );
    let user = if indoor {
        UserTerminal::indoor(position, 0)
    } else {
        UserTerminal::outdoor(position)
    };
    let clock_bias = if rng.random_bool(0.5) {
        ClockBiasMode::Unknown
    } else {
        ClockBiasMode::Known
    };
    Scenario::new(ScenarioParts {
        waveform: leo_waveform(spec.n_subcarriers, spec.n_transmissions),
        budget: BudgetConfig::leo_default(),
        satellites: sats,
        beams,
        panels,
        user,
        clock_bias,
    })
    .unwrap()
}

/// Brute-force `(2/σ²) Σ_{t,n} Re{gᴴ g}` from per-sample gradients.
pub fn reference_fim(scenario: &Scenario) -> DMatrix<f64> {
    let layout = scenario.layout();
    let terms = scenario.gradient_terms(&layout).unwrap();
    let k = layout.len();
    let mut f = DMatrix::<f64>::zeros(k, k);
    for t in 0..scenario.waveform.n_transmissions {
        for n in 0..scenario.waveform.n_subcarriers {
            let g = terms.gradient(t, n);
            for i in 0..k {
                for j in 0..k {
                    f[(i, j)] += (g[i].conj() * g[j]).re;
                }
            }
        }
    }
    f * (2.0 / scenario.noise_var())
}

pub fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

/// Worst column-wise relative error between analytic gradients and
/// five-point central differences of `observation_mean_at`, over a few
/// sampled (t, n) pairs. Error is max|Δ| / max|analytic|, with the
/// denominator taken over the column's group (the three position columns
/// share one scale, since an individual position column can vanish).
pub fn fd_gradient_error(scenario: &Scenario, samples: &[(usize, usize)]) -> f64 {
    use pebsim::channel::observation_gradient;
    use pebsim::fim::Unknown;
    let layout = scenario.layout();
    let base = scenario.true_params();
    let gain_scale = base.gains.iter().map(|g| g.norm()).fold(0.0, f64::max).max(1e-30);
    let mut worst: f64 = 0.0;
    let mut pos_scale: f64 = 0.0;
    let analytic: Vec<_> = samples
        .iter()
        .map(|&(t, n)| observation_gradient(scenario, t, n, &layout).unwrap())
        .collect();
    for g in &analytic {
        for i in 0..3 {
            pos_scale = pos_scale.max(g[i].norm());
        }
    }
    for (col, unknown) in layout.iter().enumerate() {
        let h = match unknown {
            Unknown::Position(_) => 1e-2,
            Unknown::ClockBias => 1e-2 / pebsim::geometry::SPEED_OF_LIGHT,
            _ => 1e-3 * gain_scale,
        };
        let shifted = |step: f64, t: usize, n: usize| {
            let mut p = base.clone();
            match *unknown {
                Unknown::Position(i) => p.position[i] += step,
                Unknown::ClockBias => p.clock_bias_s += step,
                Unknown::GainRe(l) => p.gains[l] += c(step, 0.0),
                Unknown::GainIm(l) => p.gains[l] += c(0.0, step),
            }
            scenario.observation_mean_at(&p, t, n).unwrap()
        };
        let mut max_diff: f64 = 0.0;
        let mut max_an: f64 = 0.0;
        for (s, &(t, n)) in samples.iter().enumerate() {
            let fd = (shifted(-2.0 * h, t, n) - shifted(2.0 * h, t, n)
                + (shifted(h, t, n) - shifted(-h, t, n)) * 8.0)
                / (12.0 * h);
            let an = analytic[s][col];
            max_diff = max_diff.max((fd - an).norm());
            max_an = max_an.max(an.norm());
        }
        if matches!(unknown, Unknown::Position(_)) {
            max_an = pos_scale;
        }
        let err = if max_an > 0.0 { max_diff / max_an } else if max_diff == 0.0 { 0.0 } else { f64::INFINITY };
        worst = worst.max(err);
    }
    worst
}

/// Static satellite with an `rows × cols` array facing the user.
pub fn fixed_satellite(position: Point3, user: Point3, rows: usize, cols: usize) -> pebsim::constellation::SatelliteState {
    pebsim::constellation::SatelliteState {
        position,
        velocity: Vec3::zeros(),
        array_rows: rows,
        array_cols: cols,
        array_orientation: OrientationFrame::from_boresight(&(user - position), &Vec3::y()).unwrap(),
    }
}

/// One satellite, one LoS path, 1×1 array and no motion, so only the delay
/// carries position information. Noise is set for the requested
/// post-integration SNR `Σ|μ|²/σ²`.
pub fn single_path_scenario(sat: Point3, n_subcarriers: usize, n_transmissions: usize, snr_db: f64) -> Scenario {
    let user = Point3::new(1.0, 2.0, 1.5);
    let parts = ScenarioParts {
        waveform: leo_waveform(n_subcarriers, n_transmissions),
        budget: BudgetConfig::leo_default(),
        satellites: vec![fixed_satellite(sat, user, 1, 1)],
        beams: vec![vec![nalgebra::DVector::from_element(1, c(1.0, 0.0)); n_transmissions]],
        panels: Vec::new(),
        user: UserTerminal::outdoor(user),
        clock_bias: ClockBiasMode::Known,
    };
    let mut s = Scenario::new(parts).unwrap();
    let energy = total_signal_energy(&s);
    s.set_noise_var(energy / 10f64.powf(snr_db / 10.0));
    s
}

pub fn total_signal_energy(s: &Scenario) -> f64 {
    let mut e = 0.0;
    for t in 0..s.waveform.n_transmissions {
        for n in 0..s.waveform.n_subcarriers {
            e += pebsim::channel::observation_mean(s, t, n).unwrap().norm_sqr();
        }
    }
    e
}

/// Mean-square baseband frequency about its mean, computed directly.
pub fn mean_square_frequency(s: &Scenario) -> f64 {
    let n = s.waveform.n_subcarriers;
    let df = s.waveform.bandwidth_hz / n as f64;
    let f: Vec<f64> = (0..n).map(|k| k as f64 * df).collect();
    let mean = f.iter().sum::<f64>() / n as f64;
    f.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64
}

/// Random scenario restricted to passive panels.
pub fn random_passive_scenario(seed: u64, spec: &RandomSpec) -> Scenario {
    let s = random_scenario(seed, spec);
    let mut parts = s.parts();
    for p in parts.panels.iter_mut() {
        p.mode = match p.mode {
            RisMode::ActiveReflect => RisMode::ReflectOnly,
            RisMode::ActiveStar => RisMode::Star,
            m => m,
        };
    }
    Scenario::new(parts).unwrap()
}

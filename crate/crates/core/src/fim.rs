//! Fisher information, nuisance elimination and the position error bound.

use nalgebra::{DMatrix, Matrix3, SymmetricEigen};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use std::f64::consts::TAU;
use thiserror::Error;

use crate::channel::{ChannelError, GradientTerms, Scenario};
use crate::geometry::Vec3;

/// Relative eigenvalue floor below which a direction counts as unobservable.
pub const DEGENERACY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FimError {
    #[error("noise variance must be > 0 (got {0})")]
    NoisePowerZero(f64),
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error(transparent)]
    Channel(#[from] ChannelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unknown {
    /// Component 0, 1, 2 of the user position.
    Position(usize),
    ClockBias,
    GainRe(usize),
    GainIm(usize),
}

/// Ordering of the unknown vector: position, optional clock bias, then
/// Re/Im gain of every path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnknownsLayout {
    entries: Vec<Unknown>,
    clock_bias: bool,
    n_paths: usize,
}

impl UnknownsLayout {
    pub fn new(clock_bias: bool, n_paths: usize) -> Self {
        let mut entries: Vec<Unknown> = (0..3).map(Unknown::Position).collect();
        if clock_bias {
            entries.push(Unknown::ClockBias);
        }
        for l in 0..n_paths {
            entries.push(Unknown::GainRe(l));
            entries.push(Unknown::GainIm(l));
        }
        Self {
            entries,
            clock_bias,
            n_paths,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn has_clock_bias(&self) -> bool {
        self.clock_bias
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Unknown> {
        self.entries.iter()
    }

    pub fn index_of(&self, u: Unknown) -> Option<usize> {
        self.entries.iter().position(|&e| e == u)
    }
}

/// `Σ_{t,n} Re{g^H g}` for separable gradient terms, through the per-pair
/// subcarrier sums `S_m[l, l'] = Σ_n f_n^m conj(e[l, n]) e[l', n]`.
pub fn gram_from_terms(terms: &GradientTerms) -> DMatrix<f64> {
    let l_paths = terms.delays.len();
    let k = terms.n_columns();
    let mut out = DMatrix::zeros(k, k);
    if l_paths == 0 || k == 0 {
        return out;
    }
    let (s0, s1, s2) = subcarrier_sums(&terms.freqs, &terms.delays);
    for (a, b) in terms.a.iter().zip(&terms.b) {
        let m = &s0 * a + &s1 * b;
        let p = &s1 * a + &s2 * b;
        let f = a.adjoint() * m + b.adjoint() * p;
        out += f.map(|z| z.re);
    }
    out
}

fn subcarrier_sums(
    freqs: &[f64],
    delays: &[f64],
) -> (DMatrix<Complex64>, DMatrix<Complex64>, DMatrix<Complex64>) {
    let l_paths = delays.len();
    let e: Vec<Vec<Complex64>> = delays
        .iter()
        .map(|tau| freqs.iter().map(|f| Complex64::cis(-TAU * f * tau)).collect())
        .collect();
    let mut s0 = DMatrix::zeros(l_paths, l_paths);
    let mut s1 = DMatrix::zeros(l_paths, l_paths);
    let mut s2 = DMatrix::zeros(l_paths, l_paths);
    for l in 0..l_paths {
        for lp in l..l_paths {
            let (mut a0, mut a1, mut a2) = (Complex64::default(), Complex64::default(), Complex64::default());
            for ((x, y), f) in e[l].iter().zip(&e[lp]).zip(freqs) {
                let z = x.conj() * y;
                a0 += z;
                a1 += z * f;
                a2 += z * (f * f);
            }
            s0[(l, lp)] = a0;
            s1[(l, lp)] = a1;
            s2[(l, lp)] = a2;
            s0[(lp, l)] = a0.conj();
            s1[(lp, l)] = a1.conj();
            s2[(lp, l)] = a2.conj();
        }
    }
    (s0, s1, s2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FimResult {
    pub fim: DMatrix<f64>,
    pub layout: UnknownsLayout,
    pub noise_var: f64,
}

/// Full FIM over the scenario's unknowns.
pub fn assemble_fim(scenario: &Scenario) -> Result<FimResult, FimError> {
    let noise_var = scenario.noise_var();
    if !(noise_var > 0.0) || !noise_var.is_finite() {
        return Err(FimError::NoisePowerZero(noise_var));
    }
    let layout = scenario.layout();
    let terms = scenario.gradient_terms(&layout)?;
    let fim = gram_from_terms(&terms) * (2.0 / noise_var);
    Ok(FimResult {
        fim,
        layout,
        noise_var,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EfimResult {
    pub efim: Matrix3<f64>,
    pub degenerate: bool,
    /// Least observable position direction when `degenerate`.
    pub null_direction: Option<Vec3>,
    /// `trace(efim^-1)`, +∞ when degenerate.
    pub crb_trace: f64,
}

fn pinv_symmetric(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    let eig = SymmetricEigen::new(m.clone());
    let max = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let floor = DEGENERACY_TOL * max;
    let mut inv = DMatrix::zeros(n, n);
    for (i, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam > floor && lam > 0.0 {
            let v = eig.eigenvectors.column(i);
            inv += v * v.transpose() / lam;
        }
    }
    inv
}

/// Equivalent FIM of the position after eliminating clock bias and gains.
pub fn efim_position(fim: &DMatrix<f64>) -> EfimResult {
    let k = fim.nrows();
    assert!(k >= 3 && fim.ncols() == k, "FIM must be square with at least 3 rows");
    // Jacobi scaling keeps meters, seconds and gain units comparable
    let d: Vec<f64> = (0..k)
        .map(|i| {
            let v = fim[(i, i)];
            if v > 0.0 { 1.0 / v.sqrt() } else { 1.0 }
        })
        .collect();
    let scaled = DMatrix::from_fn(k, k, |i, j| fim[(i, j)] * d[i] * d[j]);
    let fpp = scaled.view((0, 0), (3, 3)).into_owned();
    let schur = if k > 3 {
        let fpn = scaled.view((0, 3), (3, k - 3)).into_owned();
        let fnn = scaled.view((3, 3), (k - 3, k - 3)).into_owned();
        fpp - &fpn * pinv_symmetric(&fnn) * fpn.transpose()
    } else {
        fpp
    };
    let schur = Matrix3::from_fn(|i, j| 0.5 * (schur[(i, j)] + schur[(j, i)]));
    let efim = Matrix3::from_fn(|i, j| schur[(i, j)] / (d[i] * d[j]));

    let eig = SymmetricEigen::new(schur);
    let max = eig.eigenvalues.max();
    let (imin, min) = eig
        .eigenvalues
        .iter()
        .cloned()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, v)| if v < acc.1 { (i, v) } else { acc });
    let degenerate = !(max > 0.0) || min <= DEGENERACY_TOL * max;
    if degenerate {
        let v = eig.eigenvectors.column(imin);
        let dir = Vec3::new(v[0] * d[0], v[1] * d[1], v[2] * d[2]).normalize();
        return EfimResult {
            efim,
            degenerate,
            null_direction: Some(dir),
            crb_trace: f64::INFINITY,
        };
    }
    let mut trace = 0.0;
    for i in 0..3 {
        let mut inv_ii = 0.0;
        for (j, lam) in eig.eigenvalues.iter().enumerate() {
            inv_ii += eig.eigenvectors[(i, j)].powi(2) / lam;
        }
        trace += inv_ii * d[i] * d[i];
    }
    EfimResult {
        efim,
        degenerate,
        null_direction: None,
        crb_trace: trace,
    }
}

/// Position error bound in meters; +∞ for unobservable geometries.
pub fn peb(efim: &EfimResult) -> f64 {
    efim.crb_trace.sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PebResult {
    pub peb_m: f64,
    pub fim: FimResult,
    pub efim: EfimResult,
    pub gimbal_warning: bool,
}

pub fn evaluate(scenario: &Scenario) -> Result<PebResult, FimError> {
    let fim = assemble_fim(scenario)?;
    // the reduction runs on power-normalized information, then rescales
    let unit = scenario.amplitude_unit();
    let terms = scenario.gradient_terms_per_unit_amplitude(&fim.layout)?;
    let normalized = efim_position(&(gram_from_terms(&terms) * (2.0 / fim.noise_var)));
    let efim = if unit > 0.0 {
        EfimResult {
            efim: normalized.efim * (unit * unit),
            crb_trace: normalized.crb_trace / (unit * unit),
            ..normalized
        }
    } else {
        EfimResult {
            efim: Matrix3::zeros(),
            degenerate: true,
            null_direction: Some(Vec3::x()),
            crb_trace: f64::INFINITY,
        }
    };
    let gimbal_warning = scenario.paths()?.iter().any(|p| p.geometry.gimbal_warning);
    Ok(PebResult {
        peb_m: peb(&efim),
        fim,
        efim,
        gimbal_warning,
    })
}

/// Largest element-wise discrepancy between the direct FIM and `Jᵀ F_η J`
/// from the channel-parameter route, normalized by `sqrt(F_ii F_jj)`.
pub fn chain_rule_check(scenario: &Scenario) -> Result<f64, FimError> {
    let direct = assemble_fim(scenario)?;
    let (terms, _, jac) = scenario.channel_param_terms(&direct.layout)?;
    let f_eta = gram_from_terms(&terms) * (2.0 / direct.noise_var);
    let chained = jac.transpose() * f_eta * &jac;
    let f = &direct.fim;
    let mut worst: f64 = 0.0;
    for i in 0..f.nrows() {
        for j in 0..f.ncols() {
            let scale = (f[(i, i)] * f[(j, j)]).abs().sqrt();
            let diff = (f[(i, j)] - chained[(i, j)]).abs();
            if scale > 0.0 {
                worst = worst.max(diff / scale);
            } else if diff > 0.0 {
                worst = f64::INFINITY;
            }
        }
    }
    Ok(worst)
}

/// Delay-only Fisher information `F_ττ` of a scenario (gains known).
pub fn delay_information(scenario: &Scenario) -> Result<f64, FimError> {
    let noise_var = scenario.noise_var();
    if !(noise_var > 0.0) || !noise_var.is_finite() {
        return Err(FimError::NoisePowerZero(noise_var));
    }
    let layout = UnknownsLayout::new(true, scenario.n_paths());
    let col = layout.index_of(Unknown::ClockBias).expect("bias column");
    let terms = scenario.gradient_terms(&layout)?;
    let narrowed = GradientTerms {
        freqs: terms.freqs,
        delays: terms.delays,
        a: terms.a.iter().map(|m| m.columns(col, 1).into_owned()).collect(),
        b: terms.b.iter().map(|m| m.columns(col, 1).into_owned()).collect(),
    };
    Ok(gram_from_terms(&narrowed)[(0, 0)] * 2.0 / noise_var)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlDelayReport {
    pub rmse_s: f64,
    /// `sqrt(1 / F_ττ)`
    pub crb_s: f64,
    pub trials: usize,
}

/// Monte-Carlo RMSE of the maximum-likelihood delay estimate for a
/// single-path scenario with known gain, against its delay-only bound.
/// The estimate maximizes `Re{conj(s) · Σ y e^{+j2π f τ}}` (the known-gain
/// log-likelihood): a coarse search over ±16 resolution cells followed by
/// iterated three-point parabolic refinement.
pub fn ml_delay_oracle<R: Rng + ?Sized>(
    scenario: &Scenario,
    trials: usize,
    rng: &mut R,
) -> Result<MlDelayReport, FimError> {
    if scenario.n_paths() != 1 {
        return Err(FimError::InvalidScenario(format!(
            "delay oracle needs exactly one path, got {}",
            scenario.n_paths()
        )));
    }
    let crb_s = (1.0 / delay_information(scenario)?).sqrt();
    let wf = &scenario.waveform;
    let freqs = wf.baseband_frequencies();
    let tau0 = scenario.paths()?[0].geometry.delay_s;
    let truth = scenario.true_params();
    let clean: Vec<Vec<Complex64>> = (0..wf.n_transmissions)
        .map(|t| (0..wf.n_subcarriers).map(|n| scenario.observation_mean_at(&truth, t, n)).collect())
        .collect::<Result<_, _>>()?;
    // known per-transmission signal with the true delay removed
    let reference: Vec<Complex64> = clean
        .iter()
        .map(|row| row[0] * Complex64::cis(TAU * freqs[0] * tau0))
        .collect();
    let sigma = (scenario.noise_var() / 2.0).sqrt();
    let cell = 1.0 / wf.bandwidth_hz;
    let mut sq = 0.0;
    for _ in 0..trials {
        let y: Vec<Vec<Complex64>> = clean
            .iter()
            .map(|row| {
                row.iter()
                    .map(|m| {
                        let re: f64 = rng.sample(StandardNormal);
                        let im: f64 = rng.sample(StandardNormal);
                        m + Complex64::new(re, im) * sigma
                    })
                    .collect()
            })
            .collect();
        let est = ml_delay_estimate(&y, &reference, &freqs, tau0, cell);
        sq += (est - tau0).powi(2);
    }
    Ok(MlDelayReport {
        rmse_s: (sq / trials.max(1) as f64).sqrt(),
        crb_s,
        trials,
    })
}

/// Known-gain log-likelihood (up to constants) at delay `tau0 + offset`,
/// for observations already de-rotated by `tau0`.
fn delay_likelihood(y: &[Vec<Complex64>], reference: &[Complex64], freqs: &[f64], offset: f64) -> f64 {
    let mut acc = 0.0;
    for (row, s) in y.iter().zip(reference) {
        let mut c = Complex64::default();
        for (v, f) in row.iter().zip(freqs) {
            c += v * Complex64::cis(TAU * f * offset);
        }
        acc += (s.conj() * c).re;
    }
    acc
}

fn ml_delay_estimate(y: &[Vec<Complex64>], reference: &[Complex64], freqs: &[f64], tau0: f64, cell: f64) -> f64 {
    // offsets from the nominal delay keep the phases small
    let mut y_rel = y.to_vec();
    for row in y_rel.iter_mut() {
        for (v, f) in row.iter_mut().zip(freqs) {
            *v *= Complex64::cis(TAU * f * tau0);
        }
    }
    let ll = |off: f64| delay_likelihood(&y_rel, reference, freqs, off);
    let step = cell / 4.0;
    let mut best = 0.0;
    let mut best_val = f64::NEG_INFINITY;
    for k in -64..=64 {
        let off = k as f64 * step;
        let v = ll(off);
        if v > best_val {
            best_val = v;
            best = off;
        }
    }
    let mut h = step;
    for _ in 0..40 {
        let (lm, l0, lp) = (ll(best - h), ll(best), ll(best + h));
        let denom = lm - 2.0 * l0 + lp;
        if denom < 0.0 {
            let shift = 0.5 * h * (lm - lp) / denom;
            best += shift.clamp(-h, h);
        }
        h /= 4.0;
        if h < cell * 1e-9 {
            break;
        }
    }
    tau0 + best
}

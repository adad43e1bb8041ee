//! Stochastic response simulation and Welch spectral estimation.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::truss::Structure;

/// Number of bins kept after downsampling.
pub const FEATURE_BINS: usize = 512;
/// Floor added before taking `log10` of spectra.
pub const PSD_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    Hann,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WelchConfig {
    pub segment_len: usize,
    pub overlap: f64,
    pub window: Window,
}

impl Default for WelchConfig {
    fn default() -> Self {
        Self { segment_len: 2048, overlap: 0.5, window: Window::Hann }
    }
}

impl WelchConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.segment_len.is_power_of_two() || self.segment_len < 2 {
            return Err(Error::Config(format!("segment length {} is not a power of two", self.segment_len)));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::Config(format!("overlap {} outside [0, 1)", self.overlap)));
        }
        Ok(())
    }

    /// One-sided bin count `n_seg / 2 + 1`.
    pub fn bins(&self) -> usize {
        self.segment_len / 2 + 1
    }

    pub fn hop(&self) -> usize {
        ((self.segment_len as f64 * (1.0 - self.overlap)).round() as usize).max(1)
    }

    /// Samples needed for `segments` overlapped segments.
    pub fn samples_for(&self, segments: usize) -> usize {
        self.segment_len + (segments.max(1) - 1) * self.hop()
    }

    pub fn window(&self) -> Vec<f64> {
        let n = self.segment_len;
        match self.window {
            // periodic Hann, the usual choice for spectral estimation
            Window::Hann => (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect(),
        }
    }
}

/// Averaged, windowed, one-sided periodogram (density scaling).
pub fn welch_psd(series: &[f64], cfg: &WelchConfig, fs: f64) -> Result<Vec<f64>> {
    cfg.validate()?;
    let n = cfg.segment_len;
    if series.len() < n {
        return Err(Error::Signal(format!("series of {} samples is shorter than one segment ({n})", series.len())));
    }
    if !(fs > 0.0) {
        return Err(Error::Signal(format!("sampling rate must be positive, got {fs}")));
    }
    let window = cfg.window();
    let win_power: f64 = window.iter().map(|w| w * w).sum();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let hop = cfg.hop();
    let bins = cfg.bins();
    let mut acc = vec![0.0; bins];
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    let mut segments = 0usize;
    let mut start = 0;
    while start + n <= series.len() {
        for (slot, (x, w)) in buf.iter_mut().zip(series[start..start + n].iter().zip(&window)) {
            *slot = Complex::new(x * w, 0.0);
        }
        fft.process(&mut buf);
        for (a, c) in acc.iter_mut().zip(&buf[..bins]) {
            *a += c.norm_sqr();
        }
        segments += 1;
        start += hop;
    }
    let scale = 1.0 / (fs * win_power * segments as f64);
    for (k, a) in acc.iter_mut().enumerate() {
        *a *= scale;
        if k != 0 && !(n % 2 == 0 && k == n / 2) {
            *a *= 2.0;
        }
    }
    Ok(acc)
}

pub fn frequency_axis(cfg: &WelchConfig, fs: f64) -> Vec<f64> {
    let df = fs / cfg.segment_len as f64;
    (0..cfg.bins()).map(|k| k as f64 * df).collect()
}

/// 1025 one-sided bins to 512: drop the Nyquist bin, then average pairs.
pub fn downsample_psd(psd: &[f64]) -> Result<Vec<f64>> {
    let expected = 2 * FEATURE_BINS + 1;
    if psd.len() != expected {
        return Err(Error::Signal(format!("downsampling expects {expected} bins, got {}", psd.len())));
    }
    Ok(psd[..2 * FEATURE_BINS].chunks_exact(2).map(|p| 0.5 * (p[0] + p[1])).collect())
}

/// Per-node spectra and their frequency axis.
#[derive(Debug, Clone, PartialEq)]
pub struct NodePsdMatrix {
    /// `N × F`
    pub values: Array2<f64>,
    pub frequencies: Vec<f64>,
}

impl NodePsdMatrix {
    pub fn from_series(series: &Array2<f64>, cfg: &WelchConfig, fs: f64) -> Result<Self> {
        let mut values = Array2::zeros((series.nrows(), cfg.bins()));
        for (i, row) in series.rows().into_iter().enumerate() {
            let row: Vec<f64> = row.to_vec();
            let psd = welch_psd(&row, cfg, fs)?;
            values.row_mut(i).assign(&ndarray::Array1::from(psd));
        }
        Ok(Self { values, frequencies: frequency_axis(cfg, fs) })
    }

    /// Halved resolution; the axis keeps the left edge of each merged pair.
    pub fn downsampled(&self) -> Result<Self> {
        let mut values = Array2::zeros((self.values.nrows(), FEATURE_BINS));
        for (i, row) in self.values.rows().into_iter().enumerate() {
            let d = downsample_psd(&row.to_vec())?;
            values.row_mut(i).assign(&ndarray::Array1::from(d));
        }
        let frequencies = (0..FEATURE_BINS).map(|k| self.frequencies[2 * k]).collect();
        Ok(Self { values, frequencies })
    }

    pub fn log_features(&self) -> Array2<f64> {
        self.values.mapv(|v| (v + PSD_FLOOR).log10())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcitationSpec {
    /// Standard deviation of the force at each free DOF, N.
    pub force_std: f64,
    pub sample_rate: f64,
    pub n_samples: usize,
    pub seed: u64,
}

impl ExcitationSpec {
    pub fn validate(&self, highest_target_hz: f64, welch: &WelchConfig) -> Result<()> {
        if !(self.sample_rate > 2.0 * highest_target_hz) {
            return Err(Error::Signal(format!(
                "sampling rate {} Hz violates Nyquist for {highest_target_hz} Hz",
                self.sample_rate
            )));
        }
        if self.n_samples < 4 * welch.segment_len {
            return Err(Error::Signal(format!(
                "{} samples is fewer than four Welch segments of {}",
                self.n_samples, welch.segment_len
            )));
        }
        if !(self.force_std >= 0.0) {
            return Err(Error::Signal("force standard deviation must be >= 0".into()));
        }
        Ok(())
    }
}

/// Exact zero-order-hold transition of `q̈ + 2ζωq̇ + ω²q = u` over one step.
#[derive(Debug, Clone, Copy)]
struct Oscillator {
    a: [[f64; 2]; 2],
    b: [f64; 2],
}

impl Oscillator {
    fn new(omega: f64, zeta: f64, dt: f64) -> Self {
        let wd = omega * (1.0 - zeta * zeta).sqrt();
        let e = (-zeta * omega * dt).exp();
        let (s, c) = (wd * dt).sin_cos();
        let a11 = e * (c + zeta * omega / wd * s);
        let a12 = e * s / wd;
        let a21 = -e * omega * omega / wd * s;
        let a22 = e * (c - zeta * omega / wd * s);
        let w2 = omega * omega;
        Self { a: [[a11, a12], [a21, a22]], b: [(1.0 - a11) / w2, -a21 / w2] }
    }
}

/// Vertical displacement histories (`N × n_samples`) by modal superposition
/// under independent white-noise forces at every free DOF.
///
/// Only modes inside the excitation band (below Nyquist) are integrated.
pub fn simulate_response(structure: &Structure, exc: &ExcitationSpec, welch: &WelchConfig) -> Result<Array2<f64>> {
    let highest = structure.modal.frequencies.last().copied().unwrap_or(0.0);
    exc.validate(highest, welch)?;
    let dt = 1.0 / exc.sample_rate;
    let nyquist = 0.5 * exc.sample_rate;
    let freqs = structure.modes.frequencies_hz();
    let zetas = structure.all_damping();
    let omegas = structure.modes.omegas();
    let active: Vec<usize> = (0..freqs.len()).filter(|&k| freqs[k] < nyquist && zetas[k] < 1.0).collect();
    let oscillators: Vec<Oscillator> = active.iter().map(|&k| Oscillator::new(omegas[k], zetas[k], dt)).collect();

    let n_nodes = structure.truss.n_nodes();
    let n_dof = structure.system.n_dof();
    let phi = &structure.modes.vectors;
    // participation[k][d] = φ_k[d]; output[i][k] = φ_k[vertical dof of node i]
    let participation: Vec<Vec<f64>> = active.iter().map(|&k| (0..n_dof).map(|d| phi[(d, k)]).collect()).collect();
    let mut output = vec![vec![0.0; active.len()]; n_nodes];
    for (i, row) in output.iter_mut().enumerate() {
        if let Some(r) = structure.system.dof_map[2 * i + 1] {
            for (slot, &k) in row.iter_mut().zip(&active) {
                *slot = phi[(r, k)];
            }
        }
    }

    let mut rng = rng::stream(exc.seed, 0, tag::EXCITATION);
    let mut state = vec![[0.0f64; 2]; active.len()];
    let mut force = vec![0.0; n_dof];
    let mut series = Array2::<f64>::zeros((n_nodes, exc.n_samples));
    for t in 0..exc.n_samples {
        if exc.force_std > 0.0 {
            for f in force.iter_mut() {
                let g: f64 = StandardNormal.sample(&mut rng);
                *f = exc.force_std * g;
            }
        }
        for ((s, osc), p) in state.iter_mut().zip(&oscillators).zip(&participation) {
            let u: f64 = p.iter().zip(&force).map(|(a, b)| a * b).sum();
            let q = osc.a[0][0] * s[0] + osc.a[0][1] * s[1] + osc.b[0] * u;
            let v = osc.a[1][0] * s[0] + osc.a[1][1] * s[1] + osc.b[1] * u;
            *s = [q, v];
        }
        for (i, row) in output.iter().enumerate() {
            let y: f64 = row.iter().zip(&state).map(|(w, s)| w * s[0]).sum();
            series[(i, t)] = y;
        }
    }
    if series.iter().any(|v| !v.is_finite()) {
        return Err(Error::Signal("non-finite response".into()));
    }
    Ok(series)
}

/// Measurement noise level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Snr {
    Clean,
    Db(f64),
}

impl fmt::Display for Snr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Snr::Clean => write!(f, "clean"),
            Snr::Db(db) => write!(f, "{db}dB"),
        }
    }
}

impl FromStr for Snr {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase();
        if t == "clean" {
            return Ok(Snr::Clean);
        }
        let num = t.trim_end_matches("db");
        num.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .map(Snr::Db)
            .ok_or_else(|| Error::Config(format!("invalid SNR `{s}`")))
    }
}

impl Serialize for Snr {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Snr::Clean => s.serialize_str("clean"),
            Snr::Db(db) => s.serialize_f64(*db),
        }
    }
}

impl<'de> Deserialize<'de> for Snr {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Snr::Db(v)),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Adds zero-mean Gaussian noise so that `10 log10(P_signal / P_noise)`
/// equals the requested SNR, with powers measured on this series.
pub fn add_noise(series: &[f64], snr: Snr, seed: u64) -> Result<Vec<f64>> {
    let Snr::Db(db) = snr else {
        return Ok(series.to_vec());
    };
    if !db.is_finite() {
        return Err(Error::Signal(format!("SNR must be finite, got {db}")));
    }
    let power = series.iter().map(|v| v * v).sum::<f64>() / series.len().max(1) as f64;
    if !(power > 0.0) {
        return Err(Error::Signal("cannot set an SNR on a zero-power signal".into()));
    }
    let sigma = (power / 10f64.powf(db / 10.0)).sqrt();
    let mut rng = rng::stream(seed, 0, tag::NOISE);
    Ok(series
        .iter()
        .map(|v| {
            let g: f64 = StandardNormal.sample(&mut rng);
            v + sigma * g
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_signal_gives_zero_psd() {
        let psd = welch_psd(&vec![0.0; 8192], &WelchConfig::default(), 100.0).unwrap();
        assert_eq!(psd.len(), 1025);
        assert!(psd.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn short_series_rejected() {
        assert!(welch_psd(&[1.0; 100], &WelchConfig::default(), 100.0).is_err());
    }

    #[test]
    fn downsample_contract() {
        let out = downsample_psd(&[3.5; 1025]).unwrap();
        assert_eq!(out.len(), 512);
        assert!(out.iter().all(|&v| v == 3.5));
        assert!(downsample_psd(&[1.0; 513]).is_err());
    }

    #[test]
    fn snr_parsing() {
        assert_eq!("clean".parse::<Snr>().unwrap(), Snr::Clean);
        assert_eq!("30".parse::<Snr>().unwrap(), Snr::Db(30.0));
        assert_eq!("20dB".parse::<Snr>().unwrap(), Snr::Db(20.0));
        assert!("loud".parse::<Snr>().is_err());
    }

    #[test]
    fn clean_noise_is_identity_and_zero_power_errors() {
        let x = vec![1.0, -2.0, 0.5];
        assert_eq!(add_noise(&x, Snr::Clean, 1).unwrap(), x);
        assert!(add_noise(&[0.0; 10], Snr::Db(10.0), 1).is_err());
        assert_eq!(add_noise(&x, Snr::Db(3.0), 9).unwrap(), add_noise(&x, Snr::Db(3.0), 9).unwrap());
    }

    #[test]
    fn oscillator_at_rest_stays_at_rest() {
        let osc = Oscillator::new(10.0, 0.02, 1e-3);
        let mut s = [0.0f64; 2];
        for _ in 0..1000 {
            s = [osc.a[0][0] * s[0] + osc.a[0][1] * s[1], osc.a[1][0] * s[0] + osc.a[1][1] * s[1]];
        }
        assert_eq!(s, [0.0, 0.0]);
    }

    #[test]
    fn oscillator_step_response_settles_at_static_deflection() {
        let (w, z) = (20.0, 0.05);
        let osc = Oscillator::new(w, z, 1e-3);
        let mut s = [0.0f64; 2];
        for _ in 0..20000 {
            s = [
                osc.a[0][0] * s[0] + osc.a[0][1] * s[1] + osc.b[0],
                osc.a[1][0] * s[0] + osc.a[1][1] * s[1] + osc.b[1],
            ];
        }
        assert!((s[0] - 1.0 / (w * w)).abs() < 1e-9);
    }
}

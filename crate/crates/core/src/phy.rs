//! The feedback link between UE and BS: real/complex codeword packing,
//! average power normalization, SNR-calibrated noise, and per-subcarrier
//! fading with maximum-ratio combining across the BS array.
//!
//! SNR convention: symbols have unit average power, so the noise variance
//! is `sigma^2 = 10^(-mu/10)`. With the dataset's unit-mean uplink gain this
//! also makes `mu` the mean post-combining SNR.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::complex::ComplexMatrix;
use crate::error::{Error, Result};
use crate::rng;

/// Signal-to-noise ratio in dB. `+inf` is reserved for the noiseless cap.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct SnrDb(f64);

impl SnrDb {
    pub const NOISELESS: SnrDb = SnrDb(f64::INFINITY);

    pub fn new(db: f64) -> Result<Self> {
        if !db.is_finite() {
            return Err(Error::Config(format!("SNR must be finite, got {db}")));
        }
        Ok(Self(db))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_noiseless(self) -> bool {
        self.0 == f64::INFINITY
    }
}

/// Complex codeword `s` of length `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedbackSymbols(pub Vec<Complex64>);

impl FeedbackSymbols {
    pub fn k(&self) -> usize {
        self.0.len()
    }

    pub fn energy(&self) -> f64 {
        self.0.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelMode {
    Awgn,
    FadingMrc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub mode: ChannelMode,
    /// Divide the combiner output by `|h_u^i|`.
    #[serde(default)]
    pub equalize_mrc: bool,
    /// First uplink subcarrier carrying feedback symbols.
    #[serde(default)]
    pub subcarrier_offset: usize,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            mode: ChannelMode::FadingMrc,
            equalize_mrc: false,
            subcarrier_offset: 0,
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self, k: usize, n_sub: usize) -> Result<()> {
        if self.mode == ChannelMode::FadingMrc && self.subcarrier_offset + k > n_sub {
            return Err(Error::Config(format!(
                "feedback occupies subcarriers {}..{} but only {n_sub} exist",
                self.subcarrier_offset,
                self.subcarrier_offset + k
            )));
        }
        Ok(())
    }

    /// Standard normal draws needed for one codeword of length `k`.
    pub fn noise_len(&self, k: usize, n_tx: usize) -> usize {
        match self.mode {
            ChannelMode::Awgn => k,
            ChannelMode::FadingMrc => k * n_tx,
        }
    }
}

/// `s_i = c_i + j c_{k+i}`.
pub fn real_to_complex(c: &[f64]) -> Result<FeedbackSymbols> {
    if c.len() % 2 != 0 {
        return Err(Error::Shape(format!("codeword length {} is odd", c.len())));
    }
    let k = c.len() / 2;
    Ok(FeedbackSymbols(
        (0..k).map(|i| Complex64::new(c[i], c[k + i])).collect(),
    ))
}

/// Inverse of [`real_to_complex`]: real parts first, then imaginary parts.
pub fn complex_to_real(s: &[Complex64]) -> Vec<f64> {
    s.iter().map(|z| z.re).chain(s.iter().map(|z| z.im)).collect()
}

/// Scales `s` so that `sum |s_i|^2 = k`.
pub fn power_normalize(s: &FeedbackSymbols) -> Result<FeedbackSymbols> {
    let energy = s.energy();
    if !(energy > 0.0) {
        return Err(Error::DegenerateCodeword);
    }
    let scale = (s.k() as f64 / energy).sqrt();
    Ok(FeedbackSymbols(s.0.iter().map(|z| z * scale).collect()))
}

pub fn snr_to_noise_power(mu: SnrDb) -> f64 {
    10f64.powf(-mu.value() / 10.0)
}

/// `len` i.i.d. CN(0, 1) draws.
pub fn draw_noise(len: usize, seed: u64) -> Vec<Complex64> {
    let mut r = rng::stream(seed, &[rng::tag::NOISE]);
    let scale = std::f64::consts::FRAC_1_SQRT_2;
    (0..len)
        .map(|_| {
            let re: f64 = r.sample(StandardNormal);
            let im: f64 = r.sample(StandardNormal);
            Complex64::new(re * scale, im * scale)
        })
        .collect()
}

pub fn apply_awgn(s: &FeedbackSymbols, mu: SnrDb, noise_seed: u64) -> Vec<Complex64> {
    let eps = draw_noise(s.k(), noise_seed);
    awgn_with_noise(s, snr_to_noise_power(mu), &eps)
}

/// `s + sigma * eps` for a fixed standard-normal realization.
pub fn awgn_with_noise(s: &FeedbackSymbols, noise_power: f64, eps: &[Complex64]) -> Vec<Complex64> {
    let sigma = noise_power.sqrt();
    s.0.iter().zip(eps).map(|(x, e)| x + e * sigma).collect()
}

/// Per-subcarrier uplink channel norms `|h_u^i|` for the `k` subcarriers in use.
pub fn uplink_norms(h_up: &ComplexMatrix, k: usize, cfg: &ChannelConfig) -> Result<Vec<f64>> {
    cfg.validate(k, h_up.rows())?;
    (0..k)
        .map(|i| {
            let row = h_up.row(cfg.subcarrier_offset + i);
            let n = row.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            if n > 0.0 {
                Ok(n)
            } else {
                Err(Error::DegenerateChannel(cfg.subcarrier_offset + i))
            }
        })
        .collect()
}

pub fn apply_fading_mrc(
    s: &FeedbackSymbols,
    h_up: &ComplexMatrix,
    mu: SnrDb,
    cfg: &ChannelConfig,
    noise_seed: u64,
) -> Result<Vec<Complex64>> {
    let eps = draw_noise(s.k() * h_up.cols(), noise_seed);
    fading_mrc_with_noise(s, h_up, snr_to_noise_power(mu), cfg, &eps)
}

/// `y_i = h_i s_i + sigma eps_i` over the antennas, then `s_hat_i = w_i^H y_i`
/// with `w_i = h_i / |h_i|`. `eps` holds `k * n_tx` CN(0, 1) draws.
pub fn fading_mrc_with_noise(
    s: &FeedbackSymbols,
    h_up: &ComplexMatrix,
    noise_power: f64,
    cfg: &ChannelConfig,
    eps: &[Complex64],
) -> Result<Vec<Complex64>> {
    let k = s.k();
    let n_tx = h_up.cols();
    if eps.len() != k * n_tx {
        return Err(Error::Shape(format!(
            "noise realization has {} draws, need {}",
            eps.len(),
            k * n_tx
        )));
    }
    let norms = uplink_norms(h_up, k, cfg)?;
    let sigma = noise_power.sqrt();
    Ok((0..k)
        .map(|i| {
            let h = h_up.row(cfg.subcarrier_offset + i);
            let noise = &eps[i * n_tx..(i + 1) * n_tx];
            let combined: Complex64 = h
                .iter()
                .zip(noise)
                .map(|(hj, ej)| hj.conj() * (hj * s.0[i] + ej * sigma))
                .sum::<Complex64>()
                / norms[i];
            if cfg.equalize_mrc {
                combined / norms[i]
            } else {
                combined
            }
        })
        .collect())
}

/// Sends `s` through the configured link with a fixed noise realization.
pub fn transmit(
    s: &FeedbackSymbols,
    h_up: &ComplexMatrix,
    noise_power: f64,
    cfg: &ChannelConfig,
    eps: &[Complex64],
) -> Result<Vec<Complex64>> {
    match cfg.mode {
        ChannelMode::Awgn => {
            if eps.len() != s.k() {
                return Err(Error::Shape("awgn noise length differs from k".into()));
            }
            Ok(awgn_with_noise(s, noise_power, eps))
        }
        ChannelMode::FadingMrc => fading_mrc_with_noise(s, h_up, noise_power, cfg, eps),
    }
}

/// Multiplier the link applies to each transmitted symbol (noise aside):
/// `|h_u^i|` for plain MRC, one for AWGN or equalized MRC.
pub fn symbol_gains(h_up: &ComplexMatrix, k: usize, cfg: &ChannelConfig) -> Result<Vec<f64>> {
    match cfg.mode {
        ChannelMode::Awgn => Ok(vec![1.0; k]),
        ChannelMode::FadingMrc if cfg.equalize_mrc => {
            uplink_norms(h_up, k, cfg)?;
            Ok(vec![1.0; k])
        }
        ChannelMode::FadingMrc => uplink_norms(h_up, k, cfg),
    }
}

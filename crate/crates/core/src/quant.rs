//! Non-uniform scalar quantizer for codewords and the capacity-bound
//! separate-coding baseline.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::SweepResult;
use crate::phy::SnrDb;

/// μ-law companded midtread quantizer on [-1, 1] with `2^bits - 1` levels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizerSpec {
    pub bits: u32,
    pub companding_mu: f64,
}

impl Default for QuantizerSpec {
    fn default() -> Self {
        Self {
            bits: 5,
            companding_mu: 255.0,
        }
    }
}

impl QuantizerSpec {
    pub fn new(bits: u32, companding_mu: f64) -> Result<Self> {
        let s = Self { bits, companding_mu };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=8).contains(&self.bits) {
            return Err(Error::Config(format!("quantizer bits {} outside 2..=8", self.bits)));
        }
        if !(self.companding_mu > 0.0 && self.companding_mu.is_finite()) {
            return Err(Error::Config(format!(
                "companding parameter {} must be positive",
                self.companding_mu
            )));
        }
        Ok(())
    }

    pub fn levels(&self) -> u16 {
        (1u16 << self.bits) - 1
    }

    /// Spacing of the levels in the companded domain.
    pub fn step(&self) -> f64 {
        2.0 / (self.levels() - 1) as f64
    }

    pub fn compand(&self, x: f64) -> f64 {
        let mu = self.companding_mu;
        x.signum() * (mu * x.abs()).ln_1p() / mu.ln_1p()
    }

    pub fn expand(&self, y: f64) -> f64 {
        let mu = self.companding_mu;
        if y == 0.0 {
            return 0.0;
        }
        y.signum() * ((y.abs() * mu.ln_1p()).exp() - 1.0) / mu
    }

    /// Reconstruction value of a level index.
    pub fn level(&self, idx: u16) -> f64 {
        let top = self.levels() - 1;
        match idx {
            0 => -1.0,
            i if i >= top => 1.0,
            i if 2 * i == top => 0.0,
            i => self.expand(-1.0 + i as f64 * self.step()),
        }
    }

    pub fn quantize_value(&self, x: f64) -> u16 {
        let y = self.compand(x.clamp(-1.0, 1.0));
        let idx = ((y + 1.0) / self.step()).round();
        idx.clamp(0.0, (self.levels() - 1) as f64) as u16
    }

    pub fn quantize(&self, c: &[f64]) -> Vec<u16> {
        c.iter().map(|&x| self.quantize_value(x)).collect()
    }

    pub fn dequantize(&self, idx: &[u16]) -> Vec<f64> {
        idx.iter().map(|&i| self.level(i)).collect()
    }

    /// Largest round-trip error for inputs that map to level `idx`: the
    /// distance from the level to the expanded edges of its companded cell.
    pub fn cell_error_bound(&self, idx: u16) -> f64 {
        let y = -1.0 + idx as f64 * self.step();
        let half = self.step() / 2.0;
        let lo = self.expand((y - half).max(-1.0));
        let hi = self.expand((y + half).min(1.0));
        let c = self.level(idx);
        (c - lo).max(hi - c)
    }
}

/// Shannon capacity at the mean post-combining SNR, bits per channel use.
pub fn capacity(mu: SnrDb) -> f64 {
    (1.0 + 10f64.powf(mu.value() / 10.0)).log2()
}

/// Capacity averaged over per-use gains `|h|^2`, for fading-aware designs.
pub fn ergodic_capacity(mu: SnrDb, gains_sq: &[f64]) -> f64 {
    let snr = 10f64.powf(mu.value() / 10.0);
    gains_sq.iter().map(|g| (1.0 + g * snr).log2()).sum::<f64>() / gains_sq.len() as f64
}

/// Codeword length a capacity-achieving link can carry: `ceil(k C / B)`.
pub fn ideal_dimension(k: usize, mu: SnrDb, bits: u32) -> Result<usize> {
    if k == 0 || bits == 0 {
        return Err(Error::Config("k and bits must be positive".into()));
    }
    Ok(ideal_dimension_for_capacity(k, capacity(mu), bits))
}

pub fn ideal_dimension_for_capacity(k: usize, cap: f64, bits: u32) -> usize {
    ((k as f64 * cap / bits as f64).ceil() as usize).max(1)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdealSchemeSpec {
    pub k: usize,
    pub bits: u32,
    pub design_snr_db: f64,
    pub m: usize,
}

impl IdealSchemeSpec {
    pub fn new(k: usize, bits: u32, design_snr: SnrDb) -> Result<Self> {
        Ok(Self {
            k,
            bits,
            design_snr_db: design_snr.value(),
            m: ideal_dimension(k, design_snr, bits)?,
        })
    }
}

/// NMSE (dB) of quantized autoencoders per codeword length, measured on
/// error-free bit transport.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderTable {
    pub entries: BTreeMap<usize, f64>,
    #[serde(default)]
    pub provenance: BTreeMap<String, String>,
}

impl AutoencoderTable {
    pub fn get(&self, m: usize) -> Result<f64> {
        self.entries.get(&m).copied().ok_or(Error::MissingTableEntry(m))
    }
}

/// Threshold model: the table value at or above the design SNR, 0 dB below.
pub fn sscc_ideal_nmse(scheme: &IdealSchemeSpec, test_mu: SnrDb, table: &AutoencoderTable) -> Result<f64> {
    let v = table.get(scheme.m)?;
    Ok(if test_mu.value() >= scheme.design_snr_db { v } else { 0.0 })
}

/// Pointwise best (lowest) NMSE over curves sharing one grid.
pub fn envelope(curves: &[SweepResult], label: &str) -> Result<SweepResult> {
    let first = curves
        .first()
        .ok_or_else(|| Error::GridMismatch("no curves".into()))?;
    for c in curves {
        if c.snr_grid_db != first.snr_grid_db {
            return Err(Error::GridMismatch(format!("{} vs {}", c.label, first.label)));
        }
    }
    let nmse_db = (0..first.snr_grid_db.len())
        .map(|i| curves.iter().map(|c| c.nmse_db[i]).fold(f64::INFINITY, f64::min))
        .collect();
    let mut out = first.clone();
    out.label = label.to_string();
    out.nmse_db = nmse_db;
    Ok(out)
}

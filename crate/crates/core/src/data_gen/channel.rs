//! Clustered multipath channel model with a half-wavelength ULA at the BS.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::complex::ComplexMatrix;
use crate::error::{Error, Result};
use crate::rng;

/// Power-delay profile decay constant as a fraction of the delay spread.
const DECAY_FRACTION: f64 = 1.0 / 3.0;
/// Subpath delay jitter as a fraction of the delay spread.
const DELAY_JITTER: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelScenario {
    pub n_tx: usize,
    pub n_sub: usize,
    /// Retained delay rows of the companion truncation.
    pub n_trunc: usize,
    pub bandwidth_hz: f64,
    pub f_down_hz: f64,
    pub f_up_hz: f64,
    pub n_clusters: usize,
    pub paths_per_cluster: usize,
    pub delay_spread_s: f64,
    pub angle_spread_deg: f64,
    /// Cluster centre angles are drawn from `[-span, span]` degrees.
    #[serde(default = "default_center_span")]
    pub center_span_deg: f64,
    /// Common delay added to every path: the receiver's FFT window opens this
    /// long before the first arrival.
    #[serde(default)]
    pub timing_offset_s: f64,
    pub seed: u64,
}

fn default_center_span() -> f64 {
    60.0
}

impl ChannelScenario {
    /// 32 antennas, 256 subcarriers, 32 retained delay rows.
    pub fn full() -> Self {
        Self {
            n_tx: 32,
            n_sub: 256,
            n_trunc: 32,
            bandwidth_hz: 20e6,
            f_down_hz: 5.2e9,
            f_up_hz: 5.4e9,
            n_clusters: 3,
            paths_per_cluster: 8,
            delay_spread_s: 400e-9,
            angle_spread_deg: 5.0,
            center_span_deg: default_center_span(),
            timing_offset_s: 300e-9,
            seed: 1,
        }
    }

    /// 16 antennas, 64 subcarriers, 16 retained delay rows.
    pub fn desk() -> Self {
        Self {
            n_tx: 16,
            n_sub: 64,
            n_trunc: 16,
            timing_offset_s: 200e-9,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_tx < 1 {
            return bad("n_tx must be >= 1".into());
        }
        if self.n_sub < 2 {
            return bad("n_sub must be >= 2".into());
        }
        if self.n_trunc < 1 || self.n_trunc > self.n_sub {
            return bad(format!("n_trunc {} outside 1..={}", self.n_trunc, self.n_sub));
        }
        if self.n_clusters < 1 || self.paths_per_cluster < 1 {
            return bad("need at least one cluster with one path".into());
        }
        if !(self.bandwidth_hz > 0.0) || !(self.f_down_hz > 0.0) || !(self.f_up_hz > 0.0) {
            return bad("frequencies must be positive".into());
        }
        if self.f_up_hz == self.f_down_hz {
            return bad("uplink and downlink carriers must differ (FDD)".into());
        }
        if !(self.delay_spread_s >= 0.0) || !(self.timing_offset_s >= 0.0) {
            return bad("delays must be non-negative".into());
        }
        if !(self.angle_spread_deg >= 0.0) {
            return bad("angle spread must be non-negative".into());
        }
        if !(0.0..=90.0).contains(&self.center_span_deg) {
            return bad("cluster centre span must lie in [0, 90] degrees".into());
        }
        let window = self.n_trunc as f64 / self.bandwidth_hz;
        if self.timing_offset_s + self.delay_spread_s >= window {
            return bad(format!(
                "timing offset + delay spread ({:.3e} s) must stay below the truncation window {:.3e} s",
                self.timing_offset_s + self.delay_spread_s,
                window
            ));
        }
        Ok(())
    }

    pub fn total_paths(&self) -> usize {
        self.n_clusters * self.paths_per_cluster
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathSet {
    pub gains: Vec<Complex64>,
    /// Excess delays in seconds, within `[0, delay_spread_s]`.
    pub delays: Vec<f64>,
    /// Azimuth of departure in radians.
    pub angles: Vec<f64>,
}

impl PathSet {
    pub fn len(&self) -> usize {
        self.gains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gains.is_empty()
    }

    pub fn total_power(&self) -> f64 {
        self.gains.iter().map(|g| g.norm_sqr()).sum()
    }

    pub fn validate(&self, scenario: &ChannelScenario) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Config("path set is empty".into()));
        }
        if self.delays.len() != self.len() || self.angles.len() != self.len() {
            return Err(Error::Shape("path set fields differ in length".into()));
        }
        if self
            .delays
            .iter()
            .any(|&d| !(0.0..=scenario.delay_spread_s).contains(&d))
        {
            return Err(Error::Config("path delay outside [0, delay_spread]".into()));
        }
        if self.total_power() == 0.0 {
            return Err(Error::Config("all path gains are zero".into()));
        }
        Ok(())
    }
}

fn laplacian(rng: &mut impl Rng, scale: f64) -> f64 {
    let u: f64 = rng.gen_range(-0.5..0.5);
    -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

/// Draws one multipath realization.
pub fn sample_paths(scenario: &ChannelScenario, seed: u64) -> Result<PathSet> {
    scenario.validate()?;
    let mut rng = rng::stream(seed, &[rng::tag::PATHS]);
    let spread = scenario.delay_spread_s;
    let angle_spread = scenario.angle_spread_deg.to_radians();
    let decay = spread * DECAY_FRACTION;
    let n = scenario.total_paths();
    let mut set = PathSet {
        gains: Vec::with_capacity(n),
        delays: Vec::with_capacity(n),
        angles: Vec::with_capacity(n),
    };
    for _ in 0..scenario.n_clusters {
        let center = rng.gen_range(-scenario.center_span_deg..=scenario.center_span_deg).to_radians();
        let cluster_delay = if spread > 0.0 {
            rng.gen_range(0.0..=spread)
        } else {
            0.0
        };
        for _ in 0..scenario.paths_per_cluster {
            // Laplacian with standard deviation equal to the spread, clipped to it
            let offset = laplacian(&mut rng, angle_spread / 2f64.sqrt())
                .clamp(-angle_spread, angle_spread);
            let jitter = if spread > 0.0 {
                rng.gen_range(-DELAY_JITTER..=DELAY_JITTER) * spread
            } else {
                0.0
            };
            let delay = (cluster_delay + jitter).clamp(0.0, spread);
            let power = if decay > 0.0 { (-delay / decay).exp() } else { 1.0 };
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            set.gains
                .push(Complex64::new(re, im) * (power / 2.0).sqrt());
            set.delays.push(delay);
            set.angles.push(center + offset);
        }
    }
    let total = set.total_power();
    if total == 0.0 {
        return Err(Error::Config("drawn path gains are all zero".into()));
    }
    let norm = total.sqrt();
    for g in &mut set.gains {
        *g /= norm;
    }
    Ok(set)
}

/// Spatial-frequency CSI at `carrier_hz` for the given geometry.
///
/// `H[n, t] = sum_p g_p exp(-j 2 pi f_n tau_p) exp(-j 2 pi (d / lambda) t sin(theta_p))`
/// with `f_n = n * bandwidth / n_sub`, `tau_p` including the timing offset,
/// and the element spacing `d` fixed at half the downlink wavelength.
pub fn synthesize_csi(paths: &PathSet, carrier_hz: f64, scenario: &ChannelScenario) -> ComplexMatrix {
    let spacing = 0.5 * carrier_hz / scenario.f_down_hz;
    let df = scenario.bandwidth_hz / scenario.n_sub as f64;
    let mut h = ComplexMatrix::zeros(scenario.n_sub, scenario.n_tx);
    let mut freq_phase = vec![Complex64::new(0.0, 0.0); scenario.n_sub];
    let mut steering = vec![Complex64::new(0.0, 0.0); scenario.n_tx];
    for p in 0..paths.len() {
        let tau = paths.delays[p] + scenario.timing_offset_s;
        let sin = paths.angles[p].sin();
        for (n, z) in freq_phase.iter_mut().enumerate() {
            *z = Complex64::from_polar(1.0, -2.0 * PI * n as f64 * df * tau);
        }
        for (t, z) in steering.iter_mut().enumerate() {
            *z = Complex64::from_polar(1.0, -2.0 * PI * spacing * t as f64 * sin);
        }
        let g = paths.gains[p];
        for n in 0..scenario.n_sub {
            let a = g * freq_phase[n];
            let row = &mut h.as_mut_slice()[n * scenario.n_tx..(n + 1) * scenario.n_tx];
            for (dst, s) in row.iter_mut().zip(&steering) {
                *dst += a * s;
            }
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transforms;

    fn single_path_scenario() -> ChannelScenario {
        ChannelScenario {
            n_tx: 4,
            n_sub: 8,
            n_trunc: 4,
            n_clusters: 1,
            paths_per_cluster: 1,
            delay_spread_s: 100e-9,
            timing_offset_s: 0.0,
            ..ChannelScenario::full()
        }
    }

    #[test]
    fn single_path_has_unit_gain() {
        let p = sample_paths(&single_path_scenario(), 3).unwrap();
        assert_eq!(p.len(), 1);
        assert!((p.gains[0].norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn default_paths_normalized_and_deterministic() {
        let s = ChannelScenario::full();
        let a = sample_paths(&s, 11).unwrap();
        assert_eq!(a.len(), 24);
        assert!((a.total_power() - 1.0).abs() < 1e-9);
        a.validate(&s).unwrap();
        assert_eq!(a, sample_paths(&s, 11).unwrap());
        assert_ne!(a, sample_paths(&s, 12).unwrap());
        let max_center = (s.center_span_deg + s.angle_spread_deg).to_radians();
        assert!(a.angles.iter().all(|t| t.abs() <= max_center + 1e-12));
    }

    #[test]
    fn zero_delay_broadside_path_is_all_ones() {
        let s = single_path_scenario();
        let paths = PathSet {
            gains: vec![Complex64::new(1.0, 0.0)],
            delays: vec![0.0],
            angles: vec![0.0],
        };
        let h = synthesize_csi(&paths, s.f_down_hz, &s);
        for z in h.as_slice() {
            assert!((z - Complex64::new(1.0, 0.0)).norm() < 1e-15);
        }
        let f = transforms::sf_to_ad(&h).values;
        assert!((f.get(0, 0).norm_sqr() - h.frobenius_sq()).abs() < 1e-9);
    }

    #[test]
    fn invalid_scenarios_are_rejected() {
        let mut s = ChannelScenario::full();
        s.f_up_hz = s.f_down_hz;
        assert!(matches!(sample_paths(&s, 0), Err(Error::Config(_))));
        let mut s = ChannelScenario::full();
        s.delay_spread_s = 2e-6;
        assert!(s.validate().is_err());
        let mut s = ChannelScenario::full();
        s.n_sub = 1;
        assert!(s.validate().is_err());
        assert!(ChannelScenario::desk().validate().is_ok());
    }

    #[test]
    fn full_profile_truncation_keeps_most_energy() {
        // energy oracle: direct sum over delay rows of the unitary transform
        let s = ChannelScenario::full();
        let n = 100;
        let mean: f64 = (0..n)
            .map(|i| {
                let h = synthesize_csi(&sample_paths(&s, i).unwrap(), s.f_down_hz, &s);
                let f = transforms::sf_to_ad(&h).values;
                let kept: f64 = (0..s.n_trunc)
                    .flat_map(|r| f.row(r).iter())
                    .map(|z| z.norm_sqr())
                    .sum();
                kept / f.frobenius_sq()
            })
            .sum::<f64>()
            / n as f64;
        assert!(mean >= 0.99, "retained {mean}");
    }
}

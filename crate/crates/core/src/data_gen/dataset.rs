use std::fs;
use std::io::Write;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::channel::{sample_paths, synthesize_csi, ChannelScenario};
use crate::complex::ComplexMatrix;
use crate::error::{Error, Result};
use crate::rng;
use crate::transforms;

pub const DATASET_VERSION: &str = "csi-djscc-dataset/1";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Paired downlink/uplink CSI for one UE position.
#[derive(Clone, Debug, PartialEq)]
pub struct CsiSamplePair {
    pub h_down: ComplexMatrix,
    pub h_up: ComplexMatrix,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.bin",
            Split::Val => "val.bin",
            Split::Test => "test.bin",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Global min/max of the real and imaginary parts, used for the affine map
/// onto [0, 1].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub re_min: f64,
    pub re_max: f64,
    pub im_min: f64,
    pub im_max: f64,
}

impl NormStats {
    /// Scans every entry of every matrix.
    pub fn from_matrices<'a>(mats: impl IntoIterator<Item = &'a ComplexMatrix>) -> Result<Self> {
        let mut s = NormStats {
            re_min: f64::INFINITY,
            re_max: f64::NEG_INFINITY,
            im_min: f64::INFINITY,
            im_max: f64::NEG_INFINITY,
        };
        for m in mats {
            for z in m.as_slice() {
                s.re_min = s.re_min.min(z.re);
                s.re_max = s.re_max.max(z.re);
                s.im_min = s.im_min.min(z.im);
                s.im_max = s.im_max.max(z.im);
            }
        }
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |lo: f64, hi: f64| lo.is_finite() && hi.is_finite() && hi > lo;
        if !ok(self.re_min, self.re_max) || !ok(self.im_min, self.im_max) {
            return Err(Error::DegenerateStats(format!(
                "re [{}, {}], im [{}, {}]",
                self.re_min, self.re_max, self.im_min, self.im_max
            )));
        }
        Ok(())
    }
}

/// Real-valued tensor with layout `[2][rows][cols]` (real plane first).
#[derive(Clone, Debug, PartialEq)]
pub struct RealTensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl RealTensor {
    pub fn plane_len(&self) -> usize {
        self.rows * self.cols
    }
}

/// Maps real and imaginary parts affinely onto [0, 1].
pub fn normalize(h: &ComplexMatrix, stats: &NormStats) -> Result<RealTensor> {
    stats.validate()?;
    let (rows, cols) = h.shape();
    let re_span = stats.re_max - stats.re_min;
    let im_span = stats.im_max - stats.im_min;
    let mut data = vec![0.0; 2 * rows * cols];
    let (re, im) = data.split_at_mut(rows * cols);
    for (i, z) in h.as_slice().iter().enumerate() {
        re[i] = (z.re - stats.re_min) / re_span;
        im[i] = (z.im - stats.im_min) / im_span;
    }
    Ok(RealTensor { rows, cols, data })
}

/// [`normalize`] followed by clamping into [0, 1]; used on evaluation inputs
/// that may fall outside the training range.
pub fn normalize_clamped(h: &ComplexMatrix, stats: &NormStats) -> Result<RealTensor> {
    let mut t = normalize(h, stats)?;
    for v in &mut t.data {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(t)
}

pub fn denormalize(x: &RealTensor, stats: &NormStats) -> Result<ComplexMatrix> {
    stats.validate()?;
    let n = x.plane_len();
    if x.data.len() != 2 * n {
        return Err(Error::Shape(format!(
            "tensor holds {} values, expected {}",
            x.data.len(),
            2 * n
        )));
    }
    let re_span = stats.re_max - stats.re_min;
    let im_span = stats.im_max - stats.im_min;
    let data = (0..n)
        .map(|i| {
            Complex64::new(
                x.data[i] * re_span + stats.re_min,
                x.data[n + i] * im_span + stats.im_min,
            )
        })
        .collect();
    ComplexMatrix::from_vec(x.rows, x.cols, data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: String,
    pub scenario: ChannelScenario,
    pub seed: u64,
    pub splits: SplitSizes,
    /// Downlink statistics over the training split.
    pub stats: NormStats,
    /// Factor applied to every uplink matrix so that the mean per-subcarrier
    /// uplink energy over the training split is one.
    pub uplink_gain_scale: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CsiDataset {
    pub manifest: DatasetManifest,
    pub train: Vec<CsiSamplePair>,
    pub val: Vec<CsiSamplePair>,
    pub test: Vec<CsiSamplePair>,
}

impl CsiDataset {
    pub fn split(&self, split: Split) -> &[CsiSamplePair] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stats(&self) -> &NormStats {
        &self.manifest.stats
    }

    pub fn scenario(&self) -> &ChannelScenario {
        &self.manifest.scenario
    }

    /// Mean over a split of the per-subcarrier uplink energy `|h_u^i|^2`.
    pub fn mean_uplink_energy(&self, split: Split) -> f64 {
        mean_row_energy(self.split(split).iter().map(|p| &p.h_up))
    }

    /// Mean fraction of angular-delay energy within the retained delay rows.
    pub fn mean_retained_energy(&self, split: Split) -> f64 {
        let samples = self.split(split);
        let n_trunc = self.manifest.scenario.n_trunc;
        samples
            .iter()
            .map(|p| transforms::retained_energy_fraction(&p.h_down, n_trunc))
            .sum::<f64>()
            / samples.len().max(1) as f64
    }

    /// SHA-256 over the manifest and all stored values.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(&self.manifest).expect("manifest serializes"));
        for split in Split::ALL {
            hasher.update(encode_split(self.split(split)));
        }
        hex::encode(hasher.finalize())
    }
}

fn mean_row_energy<'a>(mats: impl Iterator<Item = &'a ComplexMatrix>) -> f64 {
    let mut total = 0.0;
    let mut rows = 0usize;
    for m in mats {
        total += m.frobenius_sq();
        rows += m.rows();
    }
    total / rows.max(1) as f64
}

/// Pearson correlation between `|H_d|` and `|H_u|` entries of one pair.
pub fn link_magnitude_correlation(pair: &CsiSamplePair) -> f64 {
    let a: Vec<f64> = pair.h_down.as_slice().iter().map(|z| z.norm()).collect();
    let b: Vec<f64> = pair.h_up.as_slice().iter().map(|z| z.norm()).collect();
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(&b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

fn generate_pair(scenario: &ChannelScenario, seed: u64, index: usize) -> Result<CsiSamplePair> {
    let sample_seed = rng::derive_seed(seed, &[rng::tag::PATHS, index as u64]);
    let paths = sample_paths(scenario, sample_seed)?;
    let mut h_down = synthesize_csi(&paths, scenario.f_down_hz, scenario);
    let h_up = synthesize_csi(&paths, scenario.f_up_hz, scenario);
    h_down.round_to_f32();
    Ok(CsiSamplePair { h_down, h_up })
}

/// Generates train/val/test splits. Each sample is a pure function of
/// `(scenario, seed, index)`.
pub fn generate_dataset(
    scenario: &ChannelScenario,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    seed: u64,
) -> Result<CsiDataset> {
    scenario.validate()?;
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::Config("every split needs at least one sample".into()));
    }
    let total = n_train + n_val + n_test;
    let mut pairs = (0..total)
        .map(|i| generate_pair(scenario, seed, i))
        .collect::<Result<Vec<_>>>()?;

    let train_energy = mean_row_energy(pairs[..n_train].iter().map(|p| &p.h_up));
    if !(train_energy > 0.0) {
        return Err(Error::DegenerateStats("uplink training energy is zero".into()));
    }
    let uplink_gain_scale = 1.0 / train_energy.sqrt();
    for p in &mut pairs {
        p.h_up.scale(uplink_gain_scale);
        p.h_up.round_to_f32();
    }
    let stats = NormStats::from_matrices(pairs[..n_train].iter().map(|p| &p.h_down))?;

    let test = pairs.split_off(n_train + n_val);
    let val = pairs.split_off(n_train);
    Ok(CsiDataset {
        manifest: DatasetManifest {
            version: DATASET_VERSION.to_string(),
            scenario: scenario.clone(),
            seed,
            splits: SplitSizes {
                train: n_train,
                val: n_val,
                test: n_test,
            },
            stats,
            uplink_gain_scale,
        },
        train: pairs,
        val,
        test,
    })
}

fn encode_split(samples: &[CsiSamplePair]) -> Vec<u8> {
    let per = samples.first().map_or(0, |p| p.h_down.as_slice().len());
    let mut out = Vec::with_capacity(samples.len() * per * 16);
    for p in samples {
        for (d, u) in p.h_down.as_slice().iter().zip(p.h_up.as_slice()) {
            for v in [d.re, d.im, u.re, u.im] {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    out
}

fn decode_split(bytes: &[u8], n: usize, rows: usize, cols: usize) -> Result<Vec<CsiSamplePair>> {
    let per_sample = rows * cols * 4;
    let expected = n * per_sample * 4;
    if bytes.len() != expected {
        return Err(Error::Shape(format!(
            "split file holds {} bytes, manifest implies {expected}",
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    values
        .chunks_exact(per_sample)
        .map(|s| {
            let down = s.chunks_exact(4).map(|v| Complex64::new(v[0], v[1])).collect();
            let up = s.chunks_exact(4).map(|v| Complex64::new(v[2], v[3])).collect();
            Ok(CsiSamplePair {
                h_down: ComplexMatrix::from_vec(rows, cols, down)?,
                h_up: ComplexMatrix::from_vec(rows, cols, up)?,
            })
        })
        .collect()
}

/// Writes `manifest.json` plus one little-endian f32 file per split with
/// layout `[N, N_c, N_t, link, re/im]`.
pub fn save_dataset(d: &CsiDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for split in Split::ALL {
        let path = dir.join(split.file_name());
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(&encode_split(d.split(split)))
            .map_err(|e| Error::io(&path, e))?;
    }
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&d.manifest)?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn load_dataset(dir: &Path) -> Result<CsiDataset> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::CorruptManifest {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    let version = raw.get("version").and_then(|v| v.as_str()).unwrap_or("");
    if version != DATASET_VERSION {
        return Err(Error::Version {
            found: version.to_string(),
            expected: DATASET_VERSION.to_string(),
        });
    }
    let manifest: DatasetManifest =
        serde_json::from_value(raw).map_err(|e| Error::CorruptManifest {
            path: path.clone(),
            reason: e.to_string(),
        })?;
    let (rows, cols) = (manifest.scenario.n_sub, manifest.scenario.n_tx);
    let read = |split: Split, n: usize| -> Result<Vec<CsiSamplePair>> {
        let p = dir.join(split.file_name());
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        decode_split(&bytes, n, rows, cols)
    };
    let train = read(Split::Train, manifest.splits.train)?;
    let val = read(Split::Val, manifest.splits.val)?;
    let test = read(Split::Test, manifest.splits.test)?;
    Ok(CsiDataset {
        manifest,
        train,
        val,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ChannelScenario {
        ChannelScenario {
            n_tx: 4,
            n_sub: 16,
            n_trunc: 8,
            delay_spread_s: 150e-9,
            timing_offset_s: 50e-9,
            ..ChannelScenario::desk()
        }
    }

    #[test]
    fn split_sizes_and_stats() {
        let d = generate_dataset(&tiny(), 10, 2, 2, 7).unwrap();
        assert_eq!(d.len(), 14);
        assert_eq!((d.train.len(), d.val.len(), d.test.len()), (10, 2, 2));
        let s = d.stats();
        assert!(s.re_min < s.re_max && s.im_min < s.im_max);
        assert!((d.mean_uplink_energy(Split::Train) - 1.0).abs() < 1e-6);
        for p in d.train.iter().chain(&d.val).chain(&d.test) {
            assert!(p.h_down.is_finite() && p.h_up.is_finite());
            assert_eq!(p.h_down.shape(), p.h_up.shape());
        }
        assert!(matches!(generate_dataset(&tiny(), 0, 1, 1, 0), Err(Error::Config(_))));
    }

    #[test]
    fn links_are_correlated_but_distinct() {
        let d = generate_dataset(&tiny(), 20, 1, 1, 3).unwrap();
        let mean: f64 = d.train.iter().map(link_magnitude_correlation).sum::<f64>() / 20.0;
        assert!(mean > 0.0);
        assert!(d.train.iter().any(|p| p.h_down != p.h_up));
    }

    #[test]
    fn normalize_endpoints_and_inverse() {
        let stats = NormStats {
            re_min: -2.0,
            re_max: 2.0,
            im_min: -1.0,
            im_max: 3.0,
        };
        let lo = ComplexMatrix::from_fn(2, 2, |_, _| Complex64::new(-2.0, -1.0));
        assert!(normalize(&lo, &stats).unwrap().data.iter().all(|&v| v == 0.0));
        let mid = ComplexMatrix::from_fn(2, 2, |_, _| Complex64::new(0.0, 1.0));
        assert!(normalize(&mid, &stats).unwrap().data.iter().all(|&v| v == 0.5));

        let h = ComplexMatrix::from_fn(3, 2, |r, c| Complex64::new(r as f64 * 0.3 - 0.7, c as f64 * 1.1));
        let back = denormalize(&normalize(&h, &stats).unwrap(), &stats).unwrap();
        assert!(back.max_abs_diff(&h).unwrap() < 1e-12);

        let outside = ComplexMatrix::from_fn(1, 1, |_, _| Complex64::new(5.0, -4.0));
        let t = normalize_clamped(&outside, &stats).unwrap();
        assert_eq!(t.data, vec![1.0, 0.0]);
    }

    #[test]
    fn degenerate_stats_rejected() {
        let stats = NormStats {
            re_min: 1.0,
            re_max: 1.0,
            im_min: 0.0,
            im_max: 1.0,
        };
        let h = ComplexMatrix::zeros(1, 1);
        assert!(matches!(normalize(&h, &stats), Err(Error::DegenerateStats(_))));
        let flat = [ComplexMatrix::zeros(2, 2)];
        assert!(NormStats::from_matrices(flat.iter()).is_err());
    }

    #[test]
    fn save_load_round_trip_and_errors() {
        let d = generate_dataset(&tiny(), 5, 2, 3, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&d, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.content_hash(), d.content_hash());

        // byte-identical on regeneration
        let again = generate_dataset(&tiny(), 5, 2, 3, 1).unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        save_dataset(&again, dir2.path()).unwrap();
        for name in ["manifest.json", "train.bin", "val.bin", "test.bin"] {
            assert_eq!(
                fs::read(dir.path().join(name)).unwrap(),
                fs::read(dir2.path().join(name)).unwrap()
            );
        }

        let train = dir.path().join("train.bin");
        let bytes = fs::read(&train).unwrap();
        fs::write(&train, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Shape(_))));

        let manifest = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&manifest).unwrap();
        fs::write(&manifest, text.replace(DATASET_VERSION, "csi-djscc-dataset/99")).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Version { .. })));

        fs::write(&manifest, "{ not json").unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::CorruptManifest { .. })));
    }
}

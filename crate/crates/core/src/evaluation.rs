//! NMSE metrics and SNR-sweep results.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::complex::ComplexMatrix;
use crate::data_gen::CsiSamplePair;
use crate::error::{Error, Result};
use crate::model::ModelBundle;
use crate::phy::SnrDb;
use crate::pipelines::{InputMap, Link, Pipeline, PipelineConfig};
use crate::rng::{self, tag};

pub const RESULTS_FILE: &str = "results.json";
pub const REPORT_FILE: &str = "report.md";

/// Default test grid, -10..10 dB in 1 dB steps.
pub fn default_grid() -> Vec<f64> {
    (-10..=10).map(f64::from).collect()
}

/// How per-sample errors are averaged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NmseMode {
    /// `E[|H - H'|^2 / |H|^2]`
    #[default]
    MeanOfRatios,
    /// `E[|H - H'|^2] / E[|H|^2]`
    RatioOfMeans,
}

/// Running NMSE over a set of reconstructions.
#[derive(Clone, Copy, Debug, Default)]
pub struct NmseAccumulator {
    ratio_sum: f64,
    err_sum: f64,
    ref_sum: f64,
    count: usize,
}

impl NmseAccumulator {
    pub fn add(&mut self, h: &ComplexMatrix, h_hat: &ComplexMatrix) -> Result<()> {
        let r = h.frobenius_sq();
        if r <= 0.0 {
            return Err(Error::Contract("NMSE reference has zero norm".into()));
        }
        let e = h.distance_sq(h_hat)?;
        self.add_energies(e, r);
        Ok(())
    }

    pub fn add_energies(&mut self, err: f64, reference: f64) {
        self.ratio_sum += err / reference;
        self.err_sum += err;
        self.ref_sum += reference;
        self.count += 1;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn linear(&self, mode: NmseMode) -> f64 {
        match mode {
            NmseMode::MeanOfRatios => self.ratio_sum / self.count as f64,
            NmseMode::RatioOfMeans => self.err_sum / self.ref_sum,
        }
    }

    /// NMSE in dB; exact reconstruction gives negative infinity.
    pub fn db(&self, mode: NmseMode) -> f64 {
        to_db(self.linear(mode))
    }
}

pub fn to_db(linear: f64) -> f64 {
    if linear == 0.0 {
        f64::NEG_INFINITY
    } else {
        10.0 * linear.log10()
    }
}

/// NMSE of a single reconstruction, in dB.
pub fn nmse(h: &ComplexMatrix, h_hat: &ComplexMatrix) -> Result<f64> {
    let mut acc = NmseAccumulator::default();
    acc.add(h, h_hat)?;
    Ok(acc.db(NmseMode::MeanOfRatios))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_hash: Option<String>,
    #[serde(default)]
    pub seeds: Vec<u64>,
}

/// NMSE-versus-SNR curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub label: String,
    pub snr_grid_db: Vec<f64>,
    #[serde(with = "db_values")]
    pub nmse_db: Vec<f64>,
    #[serde(default)]
    pub provenance: Provenance,
}

impl SweepResult {
    pub fn new(label: impl Into<String>, snr_grid_db: Vec<f64>, nmse_db: Vec<f64>) -> Result<Self> {
        let r = Self {
            label: label.into(),
            snr_grid_db,
            nmse_db,
            provenance: Provenance::default(),
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if self.snr_grid_db.len() != self.nmse_db.len() {
            return Err(Error::GridMismatch(format!(
                "{}: {} grid points, {} values",
                self.label,
                self.snr_grid_db.len(),
                self.nmse_db.len()
            )));
        }
        if self.snr_grid_db.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::GridMismatch(format!("{}: grid not strictly increasing", self.label)));
        }
        if self.nmse_db.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::Contract(format!("{}: non-finite NMSE", self.label)));
        }
        Ok(())
    }

    pub fn mean_db(&self) -> f64 {
        self.nmse_db.iter().sum::<f64>() / self.nmse_db.len() as f64
    }

    /// Value at a grid point, if present.
    pub fn at(&self, snr_db: f64) -> Option<f64> {
        self.snr_grid_db
            .iter()
            .position(|&s| (s - snr_db).abs() < 1e-9)
            .map(|i| self.nmse_db[i])
    }
}

/// Largest jump between neighbouring grid points, in dB.
pub fn cliff_metric(r: &SweepResult) -> Result<f64> {
    if r.nmse_db.len() < 2 {
        return Err(Error::GridMismatch("cliff metric needs at least two points".into()));
    }
    Ok(r.nmse_db
        .windows(2)
        .map(|w| (w[1] - w[0]).abs())
        .fold(0.0, f64::max))
}

/// Evaluation-mode pipeline over a copy of the bundle's weights.
pub fn eval_pipeline(bundle: &mut ModelBundle, pcfg: &PipelineConfig) -> Result<Pipeline<f32>> {
    let map = InputMap::new(&bundle.meta.spec, bundle.meta.norm.clone())?;
    Pipeline::new(pcfg.clone(), bundle.model.cast(), map)
}

/// NMSE accumulated over `pairs` at one SNR. Noise for sample `i` comes
/// from `(seed, point, i)`.
pub fn evaluate_point(
    p: &mut Pipeline<f32>,
    pairs: &[CsiSamplePair],
    snr: SnrDb,
    seed: u64,
    point: u64,
    batch: usize,
) -> Result<NmseAccumulator> {
    let mut acc = NmseAccumulator::default();
    for start in (0..pairs.len()).step_by(batch.max(1)) {
        let chunk: Vec<&CsiSamplePair> = pairs[start..(start + batch).min(pairs.len())].iter().collect();
        let links: Vec<Link> = chunk
            .iter()
            .enumerate()
            .map(|(j, pair)| Link {
                h_up: &pair.h_up,
                snr,
                noise_seed: rng::derive_seed(seed, &[tag::EVAL, point, (start + j) as u64]),
            })
            .collect();
        for (pair, h_hat) in chunk.iter().zip(p.reconstruct(&chunk, &links)?) {
            acc.add(&pair.h_down, &h_hat)?;
        }
    }
    Ok(acc)
}

/// NMSE-versus-SNR curve of a trained bundle on one split.
pub fn snr_sweep(
    bundle: &mut ModelBundle,
    pairs: &[CsiSamplePair],
    pcfg: &PipelineConfig,
    grid: &[f64],
    seed: u64,
    mode: NmseMode,
) -> Result<SweepResult> {
    if pairs.is_empty() {
        return Err(Error::Config("cannot sweep an empty split".into()));
    }
    let mut p = eval_pipeline(bundle, pcfg)?;
    let nmse_db = grid
        .iter()
        .enumerate()
        .map(|(i, &g)| Ok(evaluate_point(&mut p, pairs, SnrDb::new(g)?, seed, i as u64, 256)?.db(mode)))
        .collect::<Result<Vec<_>>>()?;
    let mut r = SweepResult::new(bundle.meta.spec.backbone.name(), grid.to_vec(), nmse_db)?;
    r.provenance = Provenance {
        config_hash: None,
        model_hash: Some(bundle.content_hash()),
        dataset_hash: bundle.meta.dataset_hash.clone(),
        seeds: vec![seed],
    };
    Ok(r)
}

/// NMSE with the noise switched off.
pub fn noiseless_nmse(
    bundle: &mut ModelBundle,
    pairs: &[CsiSamplePair],
    pcfg: &PipelineConfig,
    mode: NmseMode,
) -> Result<f64> {
    let mut p = eval_pipeline(bundle, pcfg)?;
    Ok(evaluate_point(&mut p, pairs, SnrDb::NOISELESS, 0, u64::MAX, 256)?.db(mode))
}

/// One plot: a named group of curves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Figure {
    pub name: String,
    pub title: String,
    pub curves: Vec<String>,
}

/// Everything a run reports, as written to `results.json`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultSet {
    pub experiment: String,
    #[serde(default)]
    pub config_hash: String,
    pub curves: Vec<SweepResult>,
    #[serde(default)]
    pub figures: Vec<Figure>,
    /// Scalar findings, e.g. cliff metrics and margins.
    #[serde(default)]
    pub summary: BTreeMap<String, f64>,
}

impl ResultSet {
    pub fn curve(&self, label: &str) -> Option<&SweepResult> {
        self.curves.iter().find(|c| c.label == label)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let r: ResultSet = serde_json::from_str(&text).map_err(|e| Error::CorruptManifest {
            path: path.into(),
            reason: e.to_string(),
        })?;
        for c in &r.curves {
            c.validate()?;
        }
        Ok(r)
    }
}

/// Writes `results.json`, one SVG per figure (a single figure of every
/// curve when none are declared), and `report.md`.
pub fn make_report(results: &ResultSet, out_dir: &Path) -> Result<()> {
    if results.curves.is_empty() {
        return Err(Error::Config("no results to report".into()));
    }
    for c in &results.curves {
        c.validate()?;
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let path = out_dir.join(RESULTS_FILE);
    fs::write(&path, results.to_json()?).map_err(|e| Error::io(&path, e))?;

    let figures = if results.figures.is_empty() {
        vec![Figure {
            name: "nmse".into(),
            title: results.experiment.clone(),
            curves: results.curves.iter().map(|c| c.label.clone()).collect(),
        }]
    } else {
        results.figures.clone()
    };
    let mut md = String::new();
    let _ = writeln!(md, "# {}\n", results.experiment);
    if !results.config_hash.is_empty() {
        let _ = writeln!(md, "Config hash: `{}`\n", results.config_hash);
    }
    let _ = writeln!(md, "| curve | mean NMSE (dB) | cliff (dB) | best (dB) | worst (dB) |");
    let _ = writeln!(md, "|---|---|---|---|---|");
    for c in &results.curves {
        let cliff = cliff_metric(c).map(|v| format!("{v:.2}")).unwrap_or_else(|_| "-".into());
        let best = c.nmse_db.iter().copied().fold(f64::INFINITY, f64::min);
        let worst = c.nmse_db.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let _ = writeln!(md, "| {} | {:.2} | {} | {:.2} | {:.2} |", c.label, c.mean_db(), cliff, best, worst);
    }
    if !results.summary.is_empty() {
        let _ = writeln!(md, "\n| metric | value |\n|---|---|");
        for (k, v) in &results.summary {
            let _ = writeln!(md, "| {k} | {v:.4} |");
        }
    }
    for f in &figures {
        let curves = f
            .curves
            .iter()
            .map(|l| {
                results
                    .curve(l)
                    .ok_or_else(|| Error::Config(format!("figure {} names unknown curve {l}", f.name)))
            })
            .collect::<Result<Vec<_>>>()?;
        let file = format!("{}.svg", f.name);
        let path = out_dir.join(&file);
        fs::write(&path, svg_plot(&f.title, &curves)).map_err(|e| Error::io(&path, e))?;
        let _ = writeln!(md, "\n## {}\n\n![{}]({})", f.title, f.name, file);
    }
    let path = out_dir.join(REPORT_FILE);
    fs::write(&path, md).map_err(|e| Error::io(&path, e))
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

/// Line plot of NMSE (dB) against SNR (dB). Exact reconstructions sit on
/// the bottom edge.
pub fn svg_plot(title: &str, curves: &[&SweepResult]) -> String {
    let (w, h, left, right, top, bottom) = (640.0, 420.0, 60.0, 170.0, 40.0, 50.0);
    let xs = curves.iter().flat_map(|c| c.snr_grid_db.iter().copied());
    let (mut x0, mut x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let finite = curves.iter().flat_map(|c| c.nmse_db.iter().copied()).filter(|v| v.is_finite());
    let (mut y0, mut y1) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !(x0 < x1) {
        x0 -= 1.0;
        x1 += 1.0;
    }
    if !y0.is_finite() {
        (y0, y1) = (-1.0, 0.0);
    }
    y0 = (y0 - 1.0).floor();
    y1 = (y1 + 1.0).ceil();
    let pw = w - left - right;
    let ph = h - top - bottom;
    let px = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let py = |y: f64| top + (y1 - y.max(y0)) / (y1 - y0) * ph;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, left + pw / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let xv = x0 + (x1 - x0) * i as f64 / 4.0;
        let yv = y0 + (y1 - y0) * i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{:.1}</text>"#,
            px(xv),
            top + ph + 16.0,
            xv
        );
        let _ = writeln!(
            s,
            r##"<line x1="{left}" x2="{:.1}" y1="{:.1}" y2="{:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{:.1}</text>"##,
            left + pw,
            py(yv),
            py(yv),
            left - 6.0,
            py(yv) + 4.0,
            yv
        );
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">SNR (dB)</text>"#, left + pw / 2.0, h - 12.0);
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">NMSE (dB)</text>"#,
        top + ph / 2.0,
        top + ph / 2.0
    );
    for (i, c) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = c
            .snr_grid_db
            .iter()
            .zip(&c.nmse_db)
            .map(|(&x, &y)| format!("{:.1},{:.1}", px(x), py(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = top + 14.0 + 18.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{:.1}" x2="{:.1}" y1="{ly:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            left + pw + 10.0,
            left + pw + 30.0,
            left + pw + 36.0,
            ly + 4.0,
            escape(&c.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Serializes `-inf` as the string `"-inf"`; JSON has no infinities.
mod db_values {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Db {
        Value(f64),
        Tag(String),
    }

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        v.iter()
            .map(|&x| {
                if x == f64::NEG_INFINITY {
                    Db::Tag("-inf".into())
                } else {
                    Db::Value(x)
                }
            })
            .collect::<Vec<_>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Vec::<Db>::deserialize(d)?
            .into_iter()
            .map(|v| match v {
                Db::Value(x) => Ok(x),
                Db::Tag(t) if t == "-inf" => Ok(f64::NEG_INFINITY),
                Db::Tag(t) => Err(serde::de::Error::custom(format!("bad NMSE value {t:?}"))),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64;

    fn mat(seed: u64) -> ComplexMatrix {
        let mut s = seed;
        ComplexMatrix::from_fn(4, 3, |_, _| {
            s = crate::rng::derive_seed(s, &[1]);
            Complex64::new((s % 1000) as f64 / 500.0 - 1.0, ((s >> 20) % 1000) as f64 / 500.0 - 1.0)
        })
    }

    #[test]
    fn nmse_reference_points() {
        let h = mat(3);
        assert_eq!(nmse(&h, &h).unwrap(), f64::NEG_INFINITY);
        assert!((nmse(&h, &ComplexMatrix::zeros(4, 3)).unwrap()).abs() < 1e-12);
        let mut s = h.clone();
        s.scale(0.9);
        assert!((nmse(&h, &s).unwrap() + 20.0).abs() < 1e-9);
        assert!(nmse(&ComplexMatrix::zeros(4, 3), &h).is_err());
    }

    #[test]
    fn averaging_modes_differ_as_defined() {
        let mut acc = NmseAccumulator::default();
        acc.add_energies(1.0, 1.0);
        acc.add_energies(1.0, 4.0);
        assert!((acc.linear(NmseMode::MeanOfRatios) - 0.625).abs() < 1e-15);
        assert!((acc.linear(NmseMode::RatioOfMeans) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn cliff_metric_matches_pairwise_scan() {
        let vals = vec![-3.0, -4.5, -4.0, -9.0, -9.5];
        let r = SweepResult::new("c", vec![0.0, 1.0, 2.0, 3.0, 4.0], vals.clone()).unwrap();
        let mut best: f64 = 0.0;
        for i in 0..vals.len() - 1 {
            best = best.max((vals[i] - vals[i + 1]).abs());
        }
        assert_eq!(cliff_metric(&r).unwrap(), best);
        let flat = SweepResult::new("f", vec![0.0, 1.0], vec![-2.0, -2.0]).unwrap();
        assert_eq!(cliff_metric(&flat).unwrap(), 0.0);
        let one = SweepResult::new("o", vec![0.0], vec![-2.0]).unwrap();
        assert!(cliff_metric(&one).is_err());
    }

    #[test]
    fn sentinel_survives_json() {
        let r = SweepResult::new("x", vec![-1.0, 0.0], vec![f64::NEG_INFINITY, -3.25]).unwrap();
        let s = serde_json::to_string(&r).unwrap();
        assert!(s.contains("\"-inf\""));
        assert_eq!(serde_json::from_str::<SweepResult>(&s).unwrap(), r);
    }

    #[test]
    fn grid_must_increase() {
        assert!(SweepResult::new("x", vec![1.0, 0.0], vec![0.0, 0.0]).is_err());
        assert!(SweepResult::new("x", vec![0.0], vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn report_round_trips_and_rejects_empty() {
        let dir = tempfile::tempdir().unwrap();
        assert!(make_report(&ResultSet::default(), dir.path()).is_err());
        let one = ResultSet {
            experiment: "single".into(),
            curves: vec![SweepResult::new("a", vec![-1.0, 0.0, 1.0], vec![-2.0, f64::NEG_INFINITY, -4.0]).unwrap()],
            ..ResultSet::default()
        };
        make_report(&one, dir.path()).unwrap();
        assert_eq!(ResultSet::load(&dir.path().join(RESULTS_FILE)).unwrap(), one);
        let svg = fs::read_to_string(dir.path().join("nmse.svg")).unwrap();
        assert!(svg.starts_with("<svg") && svg.contains("polyline"));
        assert!(fs::read_to_string(dir.path().join(REPORT_FILE)).unwrap().contains("| a |"));
    }

    #[test]
    fn figure_with_unknown_curve_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let r = ResultSet {
            experiment: "x".into(),
            curves: vec![SweepResult::new("a", vec![0.0], vec![-1.0]).unwrap()],
            figures: vec![Figure {
                name: "f".into(),
                title: "f".into(),
                curves: vec!["b".into()],
            }],
            ..ResultSet::default()
        };
        assert!(make_report(&r, dir.path()).is_err());
    }

    #[test]
    fn sweep_is_deterministic_and_noiseless_point_is_best() {
        use crate::data_gen::{generate_dataset, ChannelScenario};
        use crate::model::{Backbone, TransformKind};
        use crate::phy::ChannelConfig;
        use crate::pipelines::Variant;
        use crate::quant::QuantizerSpec;
        use crate::training::{train, TrainConfig};
        let scenario = ChannelScenario {
            n_tx: 4,
            n_sub: 16,
            n_trunc: 8,
            delay_spread_s: 150e-9,
            timing_offset_s: 50e-9,
            ..ChannelScenario::desk()
        };
        let d = generate_dataset(&scenario, 32, 8, 16, 11).unwrap();
        let pcfg = PipelineConfig {
            variant: Variant::Adjscc,
            backbone: Backbone::Csinet,
            k: 4,
            channel: ChannelConfig::default(),
            transform: TransformKind::TruncatedAd,
            quantizer: QuantizerSpec::default(),
            af_hidden: None,
        };
        let spec = pcfg.arch(d.scenario(), None).unwrap();
        let norm = InputMap::fit_stats(&spec, &d.train).unwrap();
        let b = ModelBundle::new(&spec, norm, 3).unwrap();
        let cfg = TrainConfig {
            batch_size: 8,
            max_epochs: 8,
            lr_init: 3e-3,
            ..TrainConfig::desk()
        };
        let mut best = train(b, &d, &pcfg, &cfg).unwrap().best;
        let grid = [-10.0, 0.0, 10.0];
        let a = snr_sweep(&mut best, &d.test, &pcfg, &grid, 5, NmseMode::MeanOfRatios).unwrap();
        let b = snr_sweep(&mut best, &d.test, &pcfg, &grid, 5, NmseMode::MeanOfRatios).unwrap();
        assert_eq!(a, b);
        let one = snr_sweep(&mut best, &d.test, &pcfg, &[0.0], 5, NmseMode::MeanOfRatios).unwrap();
        assert_eq!(one.nmse_db.len(), 1);
        let clean = noiseless_nmse(&mut best, &d.test, &pcfg, NmseMode::MeanOfRatios).unwrap();
        assert!(a.nmse_db.iter().all(|&v| clean <= v), "{clean} vs {:?}", a.nmse_db);
    }
}

//! Named experiments: config files, run directories, and the
//! generate-data, train, sweep and report stages.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data_gen::{generate_dataset, load_dataset, save_dataset, ChannelScenario, CsiDataset, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::evaluation::{
    cliff_metric, default_grid, eval_pipeline, evaluate_point, make_report, snr_sweep, Figure, NmseMode,
    Provenance, ResultSet, SweepResult, RESULTS_FILE,
};
use crate::model::{ModelBundle, BUNDLE_FILE};
use crate::phy::SnrDb;
use crate::pipelines::{InputMap, PipelineConfig, Variant};
use crate::quant::{envelope, sscc_ideal_nmse, AutoencoderTable, IdealSchemeSpec};
use crate::rng::{self, tag};
use crate::training::{train_bitlevel, train_with, SnrPolicy, TrainConfig};

/// Environment variable holding the root directory of run outputs.
pub const OUTPUT_ROOT_VAR: &str = "CSI_DJSCC_OUT";
const DEFAULT_OUTPUT_ROOT: &str = "runs";
const TRAIN_REPORT: &str = "train_report.json";

const PRESETS: [(&str, &str); 5] = [
    ("ablation", include_str!("../presets/ablation.json")),
    ("adaptability", include_str!("../presets/adaptability.json")),
    ("generality", include_str!("../presets/generality.json")),
    ("smoke", include_str!("../presets/smoke.json")),
    ("validity", include_str!("../presets/validity.json")),
];

pub fn list_presets() -> Vec<&'static str> {
    PRESETS.iter().map(|(n, _)| *n).collect()
}

pub fn preset_text(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    #[default]
    Desk,
    Full,
}

impl Profile {
    pub fn scenario(self) -> ChannelScenario {
        match self {
            Profile::Desk => ChannelScenario::desk(),
            Profile::Full => ChannelScenario::full(),
        }
    }

    pub fn train(self) -> TrainConfig {
        match self {
            Profile::Desk => TrainConfig::desk(),
            Profile::Full => TrainConfig::full(),
        }
    }

    pub fn splits(self) -> [usize; 3] {
        match self {
            Profile::Desk => [4000, 500, 500],
            Profile::Full => [100_000, 10_000, 10_000],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// Split sizes `[train, val, test]`; the profile default when absent.
    #[serde(default)]
    pub splits: Option<[usize; 3]>,
    /// Existing dataset directory, relative to the output root.
    #[serde(default)]
    pub path: Option<PathBuf>,
    /// Generate the dataset when the directory holds none.
    #[serde(default = "yes")]
    pub generate: bool,
}

fn yes() -> bool {
    true
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            splits: None,
            path: None,
            generate: true,
        }
    }
}

/// Training fields a config may override; the rest come from the profile.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOverrides {
    pub batch_size: Option<usize>,
    pub max_epochs: Option<usize>,
    pub lr_init: Option<f64>,
    pub lr_floor: Option<f64>,
    pub plateau_patience_epochs: Option<usize>,
    pub snr_range_db: Option<SnrPolicy>,
    pub loss_domain: Option<crate::training::LossDomain>,
    pub bitlevel_epochs: Option<[usize; 3]>,
}

impl TrainOverrides {
    fn apply(&self, mut t: TrainConfig) -> TrainConfig {
        macro_rules! set {
            ($($f:ident),*) => {$(if let Some(v) = self.$f { t.$f = v; })*};
        }
        set!(batch_size, max_epochs, lr_init, lr_floor, plateau_patience_epochs, snr_range_db, loss_domain);
        if self.bitlevel_epochs.is_some() {
            t.bitlevel_epochs = self.bitlevel_epochs;
        }
        t
    }
}

/// One trained (or untrained) model and how it is evaluated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelEntry {
    pub label: String,
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub train: TrainOverrides,
    /// Evaluate the initial weights without training.
    #[serde(default)]
    pub untrained: bool,
    /// Codeword length of a quantized autoencoder.
    #[serde(default)]
    pub m: Option<usize>,
    /// Design SNRs of the ideal separate scheme.
    #[serde(default)]
    pub design_snr_db: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub profile: Profile,
    #[serde(default)]
    pub seed: u64,
    /// Replaces the profile's scenario.
    #[serde(default)]
    pub scenario: Option<ChannelScenario>,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub train: TrainOverrides,
    #[serde(default = "default_grid")]
    pub grid: Vec<f64>,
    #[serde(default)]
    pub nmse_mode: NmseMode,
    pub models: Vec<ModelEntry>,
    #[serde(default)]
    pub figures: Vec<Figure>,
    /// Curve the others are compared against in the summary.
    #[serde(default)]
    pub reference: Option<String>,
    /// Run directory, relative to the output root; defaults to the name.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Reuse trained models from the shared cache under the output root.
    #[serde(default = "yes")]
    pub reuse_models: bool,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    /// Reads a config file, or a preset when `arg` names one.
    pub fn load(arg: &str) -> Result<Self> {
        if let Some(text) = preset_text(arg) {
            return Self::from_json(text);
        }
        let text = fs::read_to_string(arg).map_err(|e| Error::Config(format!("cannot read config {arg}: {e}")))?;
        Self::from_json(&text)
    }

    pub fn scenario(&self) -> ChannelScenario {
        self.scenario.clone().unwrap_or_else(|| self.profile.scenario())
    }

    pub fn splits(&self) -> [usize; 3] {
        self.dataset.splits.unwrap_or_else(|| self.profile.splits())
    }

    pub fn train_config(&self, entry: &ModelEntry) -> TrainConfig {
        let mut t = entry.train.apply(self.train.apply(self.profile.train()));
        t.seed = self.seed;
        t
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.models.is_empty() {
            return bad("no models".into());
        }
        let scenario = self.scenario();
        scenario.validate()?;
        if self.splits().contains(&0) {
            return bad("every split needs at least one sample".into());
        }
        if self.grid.is_empty() || self.grid.windows(2).any(|w| !(w[0] < w[1])) || self.grid.iter().any(|g| !g.is_finite()) {
            return bad("grid must be finite and strictly increasing".into());
        }
        let mut labels = std::collections::BTreeSet::new();
        for e in &self.models {
            if !labels.insert(e.label.as_str()) {
                return bad(format!("duplicate label {}", e.label));
            }
            e.pipeline.validate(&scenario)?;
            self.train_config(e).validate()?;
            let ideal = e.pipeline.variant == Variant::SsccIdeal;
            if ideal == e.design_snr_db.is_empty() {
                return bad(format!("{}: design SNRs belong to, and are required by, the ideal scheme", e.label));
            }
            if e.m.is_some() && e.pipeline.variant != Variant::SsccBit {
                return bad(format!("{}: m applies to the quantized autoencoder only", e.label));
            }
        }
        if let Some(r) = &self.reference {
            if !labels.contains(r.as_str()) {
                return bad(format!("reference {r} is not a model label"));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

/// Resolved locations of one run.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub root: PathBuf,
    pub run: PathBuf,
    pub dataset: PathBuf,
}

impl RunPaths {
    pub fn new(cfg: &ExperimentConfig, root: &Path) -> Self {
        let run = root.join(cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from(&cfg.name)));
        let dataset = match &cfg.dataset.path {
            Some(p) => root.join(p),
            None => run.join("dataset"),
        };
        Self {
            root: root.to_path_buf(),
            run,
            dataset,
        }
    }

    pub fn from_env(cfg: &ExperimentConfig) -> Self {
        let root = std::env::var_os(OUTPUT_ROOT_VAR)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT));
        Self::new(cfg, &root)
    }

    pub fn model_dir(&self, label: &str) -> PathBuf {
        self.run.join("models").join(label)
    }

    fn cache_dir(&self, key: &str) -> PathBuf {
        self.root.join("cache").join(key)
    }
}

/// Progress messages go to stderr; results go to files.
fn note(msg: impl AsRef<str>) {
    eprintln!("{}", msg.as_ref());
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Loads the dataset, generating it when allowed and absent.
pub fn generate_data(cfg: &ExperimentConfig, paths: &RunPaths) -> Result<CsiDataset> {
    let stage = |e| Error::stage("generate-data", e);
    let scenario = cfg.scenario();
    let [n_train, n_val, n_test] = cfg.splits();
    if paths.dataset.join(MANIFEST_FILE).exists() {
        let d = load_dataset(&paths.dataset).map_err(stage)?;
        let m = &d.manifest;
        if m.scenario != scenario || m.seed != cfg.seed || [m.splits.train, m.splits.val, m.splits.test] != [n_train, n_val, n_test] {
            return Err(stage(Error::Config(format!(
                "dataset at {} was generated from a different configuration",
                paths.dataset.display()
            ))));
        }
        return Ok(d);
    }
    if !cfg.dataset.generate {
        return Err(stage(Error::Config(format!(
            "no dataset at {} and generation is disabled",
            paths.dataset.display()
        ))));
    }
    note(format!("generating {n_train}/{n_val}/{n_test} samples into {}", paths.dataset.display()));
    let d = generate_dataset(&scenario, n_train, n_val, n_test, cfg.seed).map_err(stage)?;
    save_dataset(&d, &paths.dataset).map_err(stage)?;
    Ok(d)
}

/// A concrete network to train: an entry, or one quantized autoencoder
/// behind an ideal-scheme entry.
#[derive(Clone, Debug, Serialize)]
struct Job {
    label: String,
    pipeline: PipelineConfig,
    m: Option<usize>,
    untrained: bool,
    train: TrainConfig,
}

fn ideal_spec(entry: &ModelEntry, mu: f64) -> Result<IdealSchemeSpec> {
    IdealSchemeSpec::new(entry.pipeline.k, entry.pipeline.quantizer.bits, SnrDb::new(mu)?)
}

fn bit_label(entry: &str, m: usize) -> String {
    format!("{entry}-bit-m{m}")
}

fn jobs(cfg: &ExperimentConfig) -> Result<Vec<Job>> {
    let mut out: Vec<Job> = Vec::new();
    for e in &cfg.models {
        let train = cfg.train_config(e);
        if e.pipeline.variant == Variant::SsccIdeal {
            let pipeline = PipelineConfig {
                variant: Variant::SsccBit,
                ..e.pipeline.clone()
            };
            for &mu in &e.design_snr_db {
                let m = ideal_spec(e, mu)?.m;
                let label = bit_label(&e.label, m);
                if out.iter().all(|j| j.label != label) {
                    out.push(Job {
                        label,
                        pipeline: pipeline.clone(),
                        m: Some(m),
                        untrained: e.untrained,
                        train: train.clone(),
                    });
                }
            }
        } else {
            out.push(Job {
                label: e.label.clone(),
                pipeline: e.pipeline.clone(),
                m: e.m,
                untrained: e.untrained,
                train,
            });
        }
    }
    Ok(out)
}

fn init_bundle(job: &Job, d: &CsiDataset, seed: u64) -> Result<ModelBundle> {
    let spec = job.pipeline.arch(d.scenario(), job.m)?;
    let norm = InputMap::fit_stats(&spec, &d.train)?;
    let mut b = ModelBundle::new(&spec, norm, rng::derive_seed(seed, &[tag::INIT]))?;
    b.meta.dataset_hash = Some(d.content_hash());
    Ok(b)
}

fn cache_key(job: &Job, dataset_hash: &str, seed: u64) -> String {
    let key = serde_json::json!({
        "dataset": dataset_hash,
        "pipeline": job.pipeline,
        "m": job.m,
        "train": job.train,
        "seed": seed,
    });
    hex::encode(Sha256::digest(key.to_string()))
}

fn copy_dir(from: &Path, to: &Path) -> Result<()> {
    fs::create_dir_all(to).map_err(|e| Error::io(to, e))?;
    for entry in fs::read_dir(from).map_err(|e| Error::io(from, e))? {
        let entry = entry.map_err(|e| Error::io(from, e))?;
        let (src, dst) = (entry.path(), to.join(entry.file_name()));
        if src.is_dir() {
            copy_dir(&src, &dst)?;
        } else {
            fs::copy(&src, &dst).map_err(|e| Error::io(&src, e))?;
        }
    }
    Ok(())
}

/// Trains one job into `dir` (`best/`, `last/`, `train_report.json`).
fn train_job(job: &Job, d: &CsiDataset, seed: u64, config_hash: &str, dir: &Path) -> Result<()> {
    let bundle = init_bundle(job, d, seed)?;
    let label = job.label.clone();
    let mut hook = |stage: &str, r: &crate::training::EpochRecord| {
        note(format!(
            "[{label}] {stage} epoch {:>3} train {:.5} val {:.5}{} lr {:.1e}",
            r.epoch,
            r.train_loss,
            r.val_loss,
            r.val_nmse_db.map(|v| format!(" nmse {v:.2} dB")).unwrap_or_default(),
            r.lr
        ))
    };
    let (mut best, mut last, report) = if job.pipeline.variant == Variant::SsccBit {
        let out = train_bitlevel(bundle, d, &job.pipeline, &job.train, &mut hook)?;
        let mut bundle = out.bundle;
        let last = bundle.try_clone()?;
        (bundle, last, serde_json::to_value(&out.report)?)
    } else {
        let out = train_with(bundle, d, &job.pipeline, &job.train, &mut hook)?;
        (out.best, out.last, serde_json::to_value(&out.report)?)
    };
    best.save(&dir.join("best"))?;
    last.save(&dir.join("last"))?;
    write_json(
        &dir.join(TRAIN_REPORT),
        &serde_json::json!({
            "label": job.label,
            "config_hash": config_hash,
            "seed": seed,
            "train_config": job.train,
            "report": report,
        }),
    )
}

/// Trains every model of the experiment, or reuses cached results.
pub fn train_models(cfg: &ExperimentConfig, paths: &RunPaths, d: &CsiDataset) -> Result<()> {
    let config_hash = cfg.hash();
    let dataset_hash = d.content_hash();
    for job in jobs(cfg)? {
        let dir = paths.model_dir(&job.label);
        if job.untrained {
            init_bundle(&job, d, cfg.seed)?.save(&dir.join("best"))?;
            continue;
        }
        let key = cache_key(&job, &dataset_hash, cfg.seed);
        let cached = paths.cache_dir(&key);
        if cfg.reuse_models && cached.join("best").join(BUNDLE_FILE).exists() {
            note(format!("[{}] reusing cached model {}", job.label, &key[..12]));
        } else {
            let tmp = paths.root.join("cache").join(format!("{key}.partial"));
            let _ = fs::remove_dir_all(&tmp);
            train_job(&job, d, cfg.seed, &config_hash, &tmp)?;
            let _ = fs::remove_dir_all(&cached);
            fs::rename(&tmp, &cached).map_err(|e| Error::io(&cached, e))?;
        }
        let _ = fs::remove_dir_all(&dir);
        copy_dir(&cached, &dir)?;
    }
    Ok(())
}

pub fn load_model(paths: &RunPaths, label: &str) -> Result<ModelBundle> {
    ModelBundle::load(&paths.model_dir(label).join("best"))
}

/// Test-split NMSE curves for every entry, plus summary metrics.
pub fn sweep(cfg: &ExperimentConfig, paths: &RunPaths, d: &CsiDataset) -> Result<ResultSet> {
    let config_hash = cfg.hash();
    let mut curves = Vec::new();
    let mut summary = BTreeMap::new();
    let stamp = |mut r: SweepResult, label: &str| {
        r.label = label.to_string();
        r.provenance.config_hash = Some(config_hash.clone());
        r
    };
    for e in &cfg.models {
        if e.pipeline.variant == Variant::SsccIdeal {
            let mut table = AutoencoderTable::default();
            let mut per_design = Vec::new();
            for &mu in &e.design_snr_db {
                let scheme = ideal_spec(e, mu)?;
                let label = bit_label(&e.label, scheme.m);
                if !table.entries.contains_key(&scheme.m) {
                    let mut b = load_model(paths, &label)?;
                    let mut p = eval_pipeline(&mut b, &PipelineConfig {
                        variant: Variant::SsccBit,
                        ..e.pipeline.clone()
                    })?;
                    let v = evaluate_point(&mut p, &d.test, SnrDb::NOISELESS, cfg.seed, 0, 256)?.db(cfg.nmse_mode);
                    table.entries.insert(scheme.m, v);
                    table.provenance.insert(scheme.m.to_string(), b.content_hash());
                    summary.insert(format!("table_nmse_db:{label}"), v);
                }
                let vals = cfg
                    .grid
                    .iter()
                    .map(|&g| sscc_ideal_nmse(&scheme, SnrDb::new(g)?, &table))
                    .collect::<Result<Vec<_>>>()?;
                let mut r = SweepResult::new(format!("{}@{}dB", e.label, mu), cfg.grid.clone(), vals)?;
                r.provenance = Provenance {
                    config_hash: Some(config_hash.clone()),
                    model_hash: table.provenance.get(&scheme.m.to_string()).cloned(),
                    dataset_hash: Some(d.content_hash()),
                    seeds: vec![cfg.seed],
                };
                per_design.push(r);
            }
            let env = stamp(envelope(&per_design, &e.label)?, &e.label);
            curves.extend(per_design);
            curves.push(env);
        } else {
            let mut b = load_model(paths, &e.label)?;
            let r = snr_sweep(&mut b, &d.test, &e.pipeline, &cfg.grid, cfg.seed, cfg.nmse_mode)?;
            curves.push(stamp(r, &e.label));
        }
    }
    for c in &curves {
        if c.snr_grid_db.len() > 1 {
            summary.insert(format!("cliff_db:{}", c.label), cliff_metric(c)?);
        }
        summary.insert(format!("mean_nmse_db:{}", c.label), c.mean_db());
    }
    if let Some(reference) = &cfg.reference {
        compare_to_reference(cfg, reference, &curves, &mut summary)?;
    }
    Ok(ResultSet {
        experiment: cfg.name.clone(),
        config_hash,
        curves,
        figures: cfg.figures.clone(),
        summary,
    })
}

/// For models trained at one SNR: reference minus model NMSE at that SNR
/// and at the far end of the grid (negative means the reference is better).
fn compare_to_reference(
    cfg: &ExperimentConfig,
    reference: &str,
    curves: &[SweepResult],
    summary: &mut BTreeMap<String, f64>,
) -> Result<()> {
    let r = curves
        .iter()
        .find(|c| c.label == reference)
        .ok_or_else(|| Error::Config(format!("no curve {reference}")))?;
    let (lo, hi) = (cfg.grid[0], cfg.grid[cfg.grid.len() - 1]);
    for e in &cfg.models {
        let SnrPolicy::Fixed(mu) = cfg.train_config(e).snr_range_db else {
            continue;
        };
        let Some(c) = curves.iter().find(|c| c.label == e.label) else {
            continue;
        };
        if let (Some(a), Some(b)) = (r.at(mu), c.at(mu)) {
            summary.insert(format!("gap_at_train_snr_db:{}", e.label), a - b);
        }
        let far = if (mu - lo).abs() > (hi - mu).abs() { lo } else { hi };
        if let (Some(a), Some(b)) = (r.at(far), c.at(far)) {
            summary.insert(format!("gap_at_far_end_db:{}", e.label), a - b);
        }
    }
    Ok(())
}

/// Renders `results.json`, plots and `report.md` into the run directory.
pub fn report(paths: &RunPaths, results: &ResultSet) -> Result<()> {
    make_report(results, &paths.run)
}

/// Sweeps and writes the report from already trained models.
pub fn sweep_and_report(cfg: &ExperimentConfig, paths: &RunPaths, d: &CsiDataset) -> Result<ResultSet> {
    let results = sweep(cfg, paths, d).map_err(|e| Error::stage("sweep", e))?;
    report(paths, &results).map_err(|e| Error::stage("report", e))?;
    Ok(results)
}

/// Writes the config echo: the text as given and its resolved form.
pub fn echo_config(cfg: &ExperimentConfig, raw: Option<&str>, paths: &RunPaths) -> Result<()> {
    fs::create_dir_all(&paths.run).map_err(|e| Error::io(&paths.run, e))?;
    if let Some(raw) = raw {
        let p = paths.run.join("config.json");
        fs::write(&p, raw).map_err(|e| Error::io(&p, e))?;
    }
    write_json(
        &paths.run.join("config.resolved.json"),
        &serde_json::json!({
            "config_hash": cfg.hash(),
            "config": cfg,
            "scenario": cfg.scenario(),
            "splits": cfg.splits(),
            "train": cfg.models.iter().map(|e| (e.label.clone(), cfg.train_config(e))).collect::<BTreeMap<_, _>>(),
        }),
    )
}

/// Full pipeline: data, training, sweep, report.
pub fn run_experiment(cfg: &ExperimentConfig, raw: Option<&str>, paths: &RunPaths) -> Result<ResultSet> {
    echo_config(cfg, raw, paths).map_err(|e| Error::stage("setup", e))?;
    let d = generate_data(cfg, paths)?;
    train_models(cfg, paths, &d).map_err(|e| Error::stage("train", e))?;
    sweep_and_report(cfg, paths, &d)
}

pub fn load_results(paths: &RunPaths) -> Result<ResultSet> {
    ResultSet::load(&paths.run.join(RESULTS_FILE))
}

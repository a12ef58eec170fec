//! Optimization of feedback pipelines: joint training over random SNR and
//! the three-step procedure of the quantized autoencoder.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_gen::{CsiDataset, CsiSamplePair, NormStats};
use crate::error::{Error, Result};
use crate::evaluation::{to_db, NmseAccumulator, NmseMode};
use crate::model::{Model, ModelBundle, TransformKind};
use crate::nn::{zero_grads, Ctx, Layer, Param, ParamFn, Real, Tensor};
use crate::phy::SnrDb;
use crate::pipelines::{mse_loss, sf_loss, InputMap, Link, Pipeline, PipelineConfig, Variant};
use crate::rng::{self, tag};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-7;

/// Stream index reserved for validation draws.
const VALIDATION: u64 = u64::MAX;

/// SNR seen by each training sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnrPolicy {
    Fixed(f64),
    /// Uniform over `[lo, hi]` dB.
    Uniform([f64; 2]),
}

impl SnrPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            SnrPolicy::Fixed(v) if v.is_finite() => Ok(()),
            SnrPolicy::Uniform([lo, hi]) if lo.is_finite() && hi.is_finite() && lo <= hi => Ok(()),
            p => Err(Error::Config(format!("bad SNR policy {p:?}"))),
        }
    }

    pub fn range(&self) -> [f64; 2] {
        match *self {
            SnrPolicy::Fixed(v) => [v, v],
            SnrPolicy::Uniform(r) => r,
        }
    }
}

/// Domain in which the training loss is measured.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossDomain {
    #[default]
    SpatialFrequency,
    TruncatedAd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub lr_init: f64,
    pub lr_floor: f64,
    pub plateau_patience_epochs: usize,
    pub snr_range_db: SnrPolicy,
    #[serde(default)]
    pub loss_domain: LossDomain,
    pub seed: u64,
    /// Epochs of the three quantized-autoencoder steps; defaults to
    /// `max_epochs` for each.
    #[serde(default)]
    pub bitlevel_epochs: Option<[usize; 3]>,
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            batch_size: 64,
            max_epochs: 40,
            lr_init: 1e-3,
            lr_floor: 1e-4,
            plateau_patience_epochs: 8,
            snr_range_db: SnrPolicy::Uniform([-10.0, 10.0]),
            loss_domain: LossDomain::SpatialFrequency,
            seed: 1,
            bitlevel_epochs: None,
        }
    }

    pub fn full() -> Self {
        Self {
            batch_size: 200,
            max_epochs: 500,
            plateau_patience_epochs: 20,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2".into()));
        }
        if !(self.lr_floor > 0.0 && self.lr_floor <= self.lr_init && self.lr_init.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 < lr_floor ({}) <= lr_init ({})",
                self.lr_floor, self.lr_init
            )));
        }
        if self.plateau_patience_epochs == 0 {
            return Err(Error::Config("plateau patience must be positive".into()));
        }
        self.snr_range_db.validate()
    }
}

pub fn sample_snr(cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> SnrDb {
    let v = match cfg.snr_range_db {
        SnrPolicy::Fixed(v) => v,
        SnrPolicy::Uniform([lo, hi]) if lo == hi => lo,
        SnrPolicy::Uniform([lo, hi]) => rng.gen_range(lo..=hi),
    };
    SnrDb::new(v).expect("validated policy")
}

/// Adaptive-moment optimizer with bias correction folded into the step size.
pub struct Adam {
    pub lr: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies the accumulated gradients of `nets` and clears them. The
    /// same networks must be passed, in the same order, on every call.
    pub fn step<T: Real>(&mut self, nets: Vec<&mut dyn Layer<T>>) {
        self.t += 1;
        let alpha = self.lr * (1.0 - BETA2.powi(self.t)).sqrt() / (1.0 - BETA1.powi(self.t));
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut idx = 0;
        for net in nets {
            net.visit(
                "",
                false,
                &mut ParamFn(|_: &str, p: &mut Param<T>, _| {
                    if idx == ms.len() {
                        ms.push(vec![0.0; p.len()]);
                        vs.push(vec![0.0; p.len()]);
                    }
                    let (m, v) = (&mut ms[idx], &mut vs[idx]);
                    for j in 0..p.len() {
                        let g = p.grad[j].as_f64();
                        m[j] = BETA1 * m[j] + (1.0 - BETA1) * g;
                        v[j] = BETA2 * v[j] + (1.0 - BETA2) * g * g;
                        let w = p.value[j].as_f64() - alpha * m[j] / (v[j].sqrt() + ADAM_EPS);
                        p.value[j] = T::from_f64(w);
                        p.grad[j] = T::zero();
                    }
                    idx += 1;
                }),
            );
        }
    }
}

/// Halves the learning rate after `patience` epochs without a new best.
#[derive(Clone, Debug)]
pub struct PlateauSchedule {
    pub lr: f64,
    floor: f64,
    patience: usize,
    best: f64,
    stale: usize,
}

impl PlateauSchedule {
    pub fn new(lr: f64, floor: f64, patience: usize) -> Self {
        Self {
            lr,
            floor,
            patience,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    /// Records a validation loss; returns true on a plateau event.
    pub fn observe(&mut self, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.stale = 0;
            return false;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            self.stale = 0;
            self.lr = (self.lr / 2.0).max(self.floor);
            return true;
        }
        false
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_nmse_db: Option<f64>,
    pub lr: f64,
    /// Best checkpoint-selection score so far.
    pub best_score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: String,
    pub epochs: Vec<EpochRecord>,
    /// Score of the starting point, when it competes for the checkpoint.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_score: Option<f64>,
    /// 0 when the starting point was kept.
    pub best_epoch: usize,
    pub wall_time_s: f64,
}

impl TrainReport {
    pub fn best_score(&self) -> f64 {
        self.epochs
            .last()
            .map(|e| e.best_score)
            .or(self.initial_score)
            .unwrap_or(f64::INFINITY)
    }

    pub fn lr_trace(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.lr).collect()
    }
}

pub struct TrainOutcome {
    pub best: ModelBundle,
    pub last: ModelBundle,
    pub report: TrainReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BitLevelReport {
    pub autoencoder: TrainReport,
    pub offset: TrainReport,
    pub finetune: TrainReport,
    /// Held-out codeword MSE of plain dequantization.
    pub dequantized_mse: f64,
    /// Held-out codeword MSE after the offset network.
    pub compensated_mse: f64,
    pub step2_nmse_db: f64,
    pub step3_nmse_db: f64,
    pub encoder_frozen: bool,
}

pub struct BitLevelOutcome {
    pub bundle: ModelBundle,
    pub report: BitLevelReport,
}

/// Per-epoch callback: stage name and the finished record.
pub type EpochHook<'a> = &'a mut dyn FnMut(&str, &EpochRecord);

struct Val {
    loss: f64,
    nmse_db: Option<f64>,
    score: f64,
}

trait Objective {
    fn n_train(&self) -> usize;
    /// One optimizer step on training samples `batch`, which sit at
    /// positions `pos..` of the epoch order.
    fn step(&mut self, batch: &[usize], epoch: usize, pos: usize, adam: &mut Adam) -> Result<f64>;
    fn validate(&mut self) -> Result<Val>;
    fn model(&mut self) -> &mut Model<f32>;
}

fn gather(x: &Tensor<f32>, idx: &[usize]) -> Tensor<f32> {
    let per = x.per_sample();
    let mut data = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        data.extend_from_slice(x.sample(i));
    }
    Tensor::from_vec(idx.len(), x.c, x.h, x.w, data)
}

fn batches(n: usize, size: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    (0..n).step_by(size).map(move |s| s..(s + size).min(n))
}

fn output_nmse(map: &InputMap, y: &Tensor<f32>, pairs: &[&CsiSamplePair], acc: &mut NmseAccumulator) -> Result<()> {
    for (i, p) in pairs.iter().enumerate() {
        let out: Vec<f64> = y.sample(i).iter().map(|v| v.as_f64()).collect();
        acc.add(&p.h_down, &map.decode(&out)?)?;
    }
    Ok(())
}

#[derive(Clone, Copy, PartialEq)]
enum LossKind {
    Native,
    SpatialFrequency,
}

fn loss_kind(transform: TransformKind, domain: LossDomain) -> Result<LossKind> {
    match (transform, domain) {
        (TransformKind::Nonlinear, LossDomain::SpatialFrequency) => Ok(LossKind::Native),
        (TransformKind::Nonlinear, LossDomain::TruncatedAd) => Err(Error::Config(
            "the nonlinear transform has no truncated angular-delay output".into(),
        )),
        (TransformKind::TruncatedAd, LossDomain::SpatialFrequency) => Ok(LossKind::SpatialFrequency),
        (TransformKind::TruncatedAd, LossDomain::TruncatedAd) => Ok(LossKind::Native),
    }
}

struct Joint<'a> {
    p: Pipeline<f32>,
    cfg: &'a TrainConfig,
    loss: LossKind,
    sf_norm: NormStats,
    train: Vec<&'a CsiSamplePair>,
    val: Vec<&'a CsiSamplePair>,
    x_train: Tensor<f32>,
    x_val: Tensor<f32>,
}

impl Joint<'_> {
    fn loss(&self, y: &Tensor<f32>, x: &Tensor<f32>, pairs: &[&CsiSamplePair]) -> Result<(f64, Tensor<f32>)> {
        match self.loss {
            LossKind::Native => mse_loss(y, x),
            LossKind::SpatialFrequency => {
                let targets: Vec<_> = pairs.iter().map(|p| &p.h_down).collect();
                sf_loss(&self.p.map, &self.sf_norm, y, &targets)
            }
        }
    }
}

fn link_at<'a>(cfg: &TrainConfig, pair: &'a CsiSamplePair, epoch: u64, pos: u64) -> Link<'a> {
    Link {
        h_up: &pair.h_up,
        snr: sample_snr(cfg, &mut rng::stream(cfg.seed, &[tag::SNR, epoch, pos])),
        noise_seed: rng::derive_seed(cfg.seed, &[tag::NOISE, epoch, pos]),
    }
}

impl Objective for Joint<'_> {
    fn n_train(&self) -> usize {
        self.train.len()
    }

    fn step(&mut self, batch: &[usize], epoch: usize, pos: usize, adam: &mut Adam) -> Result<f64> {
        let pairs: Vec<&CsiSamplePair> = batch.iter().map(|&i| self.train[i]).collect();
        let links: Vec<Link> = pairs
            .iter()
            .enumerate()
            .map(|(j, p)| link_at(self.cfg, p, epoch as u64, (pos + j) as u64))
            .collect();
        let x = gather(&self.x_train, batch);
        let y = self.p.forward(&x, &links, true)?;
        let (loss, dy) = self.loss(&y, &x, &pairs)?;
        if loss.is_finite() {
            self.p.backward(&dy);
            adam.step(self.p.model.networks(true, true, false));
        }
        Ok(loss)
    }

    fn validate(&mut self) -> Result<Val> {
        let mut loss = 0.0;
        let mut acc = NmseAccumulator::default();
        for r in batches(self.val.len(), self.cfg.batch_size) {
            let pairs = &self.val[r.clone()];
            let links: Vec<Link> = r
                .clone()
                .map(|i| link_at(self.cfg, self.val[i], VALIDATION, i as u64))
                .collect();
            let idx: Vec<usize> = r.collect();
            let x = gather(&self.x_val, &idx);
            let y = self.p.forward(&x, &links, false)?;
            loss += self.loss(&y, &x, pairs)?.0 * idx.len() as f64;
            output_nmse(&self.p.map, &y, pairs, &mut acc)?;
        }
        let loss = loss / self.val.len() as f64;
        Ok(Val {
            loss,
            nmse_db: Some(acc.db(NmseMode::MeanOfRatios)),
            score: loss,
        })
    }

    fn model(&mut self) -> &mut Model<f32> {
        &mut self.p.model
    }
}

#[derive(Clone, Copy, PartialEq)]
enum BitStep {
    Autoencoder,
    Finetune,
}

struct Bits<'a> {
    p: &'a mut Pipeline<f32>,
    step: BitStep,
    batch_size: usize,
    train: Vec<&'a CsiSamplePair>,
    val: Vec<&'a CsiSamplePair>,
    x_train: Tensor<f32>,
    x_val: Tensor<f32>,
}

impl Bits<'_> {
    fn quantized(&self) -> bool {
        self.step == BitStep::Finetune
    }

    fn run(&mut self, x: &Tensor<f32>, train: bool) -> Tensor<f32> {
        let q = self.quantized();
        self.p.forward_bits(x, q, train && !q, train)
    }
}

impl Objective for Bits<'_> {
    fn n_train(&self) -> usize {
        self.train.len()
    }

    fn step(&mut self, batch: &[usize], _epoch: usize, _pos: usize, adam: &mut Adam) -> Result<f64> {
        let x = gather(&self.x_train, batch);
        let y = self.run(&x, true);
        let (loss, dy) = mse_loss(&y, &x)?;
        if loss.is_finite() {
            let q = self.quantized();
            self.p.backward_bits(&dy, q);
            adam.step(self.p.model.networks(!q, true, q));
        }
        Ok(loss)
    }

    fn validate(&mut self) -> Result<Val> {
        let mut loss = 0.0;
        let mut acc = NmseAccumulator::default();
        for r in batches(self.val.len(), self.batch_size) {
            let idx: Vec<usize> = r.clone().collect();
            let x = gather(&self.x_val, &idx);
            let y = self.run(&x, false);
            loss += mse_loss(&y, &x)?.0 * idx.len() as f64;
            output_nmse(&self.p.map, &y, &self.val[r], &mut acc)?;
        }
        let loss = loss / self.val.len() as f64;
        let nmse = acc.linear(NmseMode::MeanOfRatios);
        Ok(Val {
            loss,
            nmse_db: Some(to_db(nmse)),
            score: if self.quantized() { nmse } else { loss },
        })
    }

    fn model(&mut self) -> &mut Model<f32> {
        &mut self.p.model
    }
}

/// Offset network on (dequantized, original) codeword pairs.
struct Offset<'a> {
    model: &'a mut Model<f32>,
    batch_size: usize,
    deq_train: Tensor<f32>,
    code_train: Tensor<f32>,
    deq_val: Tensor<f32>,
    code_val: Tensor<f32>,
}

impl Offset<'_> {
    fn run(&mut self, deq: &Tensor<f32>, train: bool) -> Tensor<f32> {
        let gate = vec![0.0; deq.n];
        self.model.compensate(deq, &Ctx { train, snr_db: &gate })
    }
}

impl Objective for Offset<'_> {
    fn n_train(&self) -> usize {
        self.deq_train.n
    }

    fn step(&mut self, batch: &[usize], _epoch: usize, _pos: usize, adam: &mut Adam) -> Result<f64> {
        let deq = gather(&self.deq_train, batch);
        let code = gather(&self.code_train, batch);
        let y = self.run(&deq, true);
        let (loss, dy) = mse_loss(&y, &code)?;
        if loss.is_finite() {
            self.model.compensate_backward(&dy);
            adam.step(self.model.networks(false, false, true));
        }
        Ok(loss)
    }

    fn validate(&mut self) -> Result<Val> {
        let mut loss = 0.0;
        for r in batches(self.deq_val.n, self.batch_size) {
            let idx: Vec<usize> = r.collect();
            let y = self.run(&gather(&self.deq_val, &idx), false);
            loss += mse_loss(&y, &gather(&self.code_val, &idx))?.0 * idx.len() as f64;
        }
        let loss = loss / self.deq_val.n as f64;
        Ok(Val {
            loss,
            nmse_db: None,
            score: loss,
        })
    }

    fn model(&mut self) -> &mut Model<f32> {
        self.model
    }
}

/// Shared loop: shuffled mini-batches, plateau schedule on the validation
/// loss, best checkpoint on the validation score. With `keep_initial` the
/// starting point competes for the checkpoint. Leaves the best state loaded
/// and returns the last one.
fn fit(
    stage: &str,
    obj: &mut dyn Objective,
    cfg: &TrainConfig,
    stream: u64,
    epochs: usize,
    keep_initial: bool,
    hook: EpochHook,
) -> Result<(TrainReport, Vec<Vec<f32>>)> {
    let start = Instant::now();
    let mut adam = Adam::new(cfg.lr_init);
    let mut sched = PlateauSchedule::new(cfg.lr_init, cfg.lr_floor, cfg.plateau_patience_epochs);
    let mut best_score = f64::INFINITY;
    let mut best_state = None;
    let mut best_epoch = 0;
    let mut initial_score = None;
    if keep_initial {
        let v = obj.validate()?;
        best_score = v.score;
        initial_score = Some(v.score);
        best_state = Some(obj.model().snapshot());
    }
    for net in obj.model().networks(true, true, true) {
        zero_grads(net);
    }
    let n = obj.n_train();
    if n < 2 {
        return Err(Error::Config(format!("{stage}: need at least two training samples")));
    }
    let mut records = Vec::with_capacity(epochs);
    for epoch in 1..=epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(cfg.seed, &[tag::SHUFFLE, stream, epoch as u64]));
        adam.lr = sched.lr;
        let mut sum = 0.0;
        let mut seen = 0;
        for r in batches(n, cfg.batch_size) {
            if r.len() < 2 {
                continue;
            }
            let loss = obj.step(&order[r.clone()], epoch, r.start, &mut adam)?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    detail: format!("{stage}: training loss {loss} at sample {}", r.start),
                });
            }
            sum += loss * r.len() as f64;
            seen += r.len();
        }
        let v = obj.validate()?;
        if !v.loss.is_finite() || !v.score.is_finite() {
            return Err(Error::Divergence {
                epoch,
                detail: format!("{stage}: validation loss {}", v.loss),
            });
        }
        if v.score < best_score {
            best_score = v.score;
            best_epoch = epoch;
            best_state = Some(obj.model().snapshot());
        }
        let rec = EpochRecord {
            epoch,
            train_loss: sum / seen as f64,
            val_loss: v.loss,
            val_nmse_db: v.nmse_db,
            lr: adam.lr,
            best_score,
        };
        hook(stage, &rec);
        records.push(rec);
        sched.observe(v.loss);
    }
    let last = obj.model().snapshot();
    if let Some(s) = best_state {
        obj.model().restore(&s)?;
    }
    Ok((
        TrainReport {
            stage: stage.to_string(),
            epochs: records,
            initial_score,
            best_epoch,
            wall_time_s: start.elapsed().as_secs_f64(),
        },
        last,
    ))
}

fn check_dataset(d: &CsiDataset) -> Result<()> {
    if d.train.is_empty() || d.val.is_empty() {
        return Err(Error::Config("training needs non-empty train and validation splits".into()));
    }
    Ok(())
}

fn pipeline_for(bundle: ModelBundle, pcfg: &PipelineConfig) -> Result<(Pipeline<f32>, crate::model::BundleMeta)> {
    let ModelBundle { meta, model } = bundle;
    let map = InputMap::new(&meta.spec, meta.norm.clone())?;
    Ok((Pipeline::new(pcfg.clone(), model, map)?, meta))
}

/// End-to-end training of a joint pipeline.
pub fn train(bundle: ModelBundle, data: &CsiDataset, pcfg: &PipelineConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(bundle, data, pcfg, cfg, &mut |_, _| {})
}

pub fn train_with(
    bundle: ModelBundle,
    data: &CsiDataset,
    pcfg: &PipelineConfig,
    cfg: &TrainConfig,
    hook: EpochHook,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_dataset(data)?;
    if !matches!(pcfg.variant, Variant::Adjscc | Variant::Djscc) {
        return Err(Error::Config("use the bit-level procedure for separate coding".into()));
    }
    if pcfg.arch(data.scenario(), None)? != bundle.meta.spec {
        return Err(Error::Config("bundle architecture does not match the pipeline".into()));
    }
    let (p, mut meta) = pipeline_for(bundle, pcfg)?;
    let train: Vec<&CsiSamplePair> = data.train.iter().collect();
    let val: Vec<&CsiSamplePair> = data.val.iter().collect();
    let mut obj = Joint {
        loss: loss_kind(meta.spec.transform, cfg.loss_domain)?,
        sf_norm: data.stats().clone(),
        x_train: p.inputs(&train)?,
        x_val: p.inputs(&val)?,
        p,
        cfg,
        train,
        val,
    };
    let (report, last) = fit("joint", &mut obj, cfg, 0, cfg.max_epochs, false, hook)?;
    meta.snr_range_db = Some(cfg.snr_range_db.range());
    meta.dataset_hash = Some(data.content_hash());
    let mut best = ModelBundle {
        meta: meta.clone(),
        model: obj.p.model,
    };
    let mut last_bundle = best.try_clone()?;
    last_bundle.restore(&last)?;
    best.content_hash();
    last_bundle.content_hash();
    Ok(TrainOutcome {
        best,
        last: last_bundle,
        report,
    })
}

/// Three steps: plain autoencoder, offset network on quantized codewords,
/// then decoder and offset fine-tuned through the quantizer with the
/// encoder frozen.
pub fn train_bitlevel(
    bundle: ModelBundle,
    data: &CsiDataset,
    pcfg: &PipelineConfig,
    cfg: &TrainConfig,
    hook: EpochHook,
) -> Result<BitLevelOutcome> {
    cfg.validate()?;
    check_dataset(data)?;
    if pcfg.variant != Variant::SsccBit {
        return Err(Error::Config("bit-level training needs the quantized variant".into()));
    }
    if !bundle.meta.spec.offset_network {
        return Err(Error::Config("bit-level training needs an offset network".into()));
    }
    let [e1, e2, e3] = cfg.bitlevel_epochs.unwrap_or([cfg.max_epochs; 3]);
    let (mut p, mut meta) = pipeline_for(bundle, pcfg)?;
    let train: Vec<&CsiSamplePair> = data.train.iter().collect();
    let val: Vec<&CsiSamplePair> = data.val.iter().collect();
    let x_train = p.inputs(&train)?;
    let x_val = p.inputs(&val)?;

    let mut step1 = Bits {
        p: &mut p,
        step: BitStep::Autoencoder,
        batch_size: cfg.batch_size,
        train: train.clone(),
        val: val.clone(),
        x_train,
        x_val,
    };
    let (autoencoder, _) = fit("autoencoder", &mut step1, cfg, 1, e1, false, hook)?;
    let Bits { x_train, x_val, .. } = step1;

    let codes = |p: &mut Pipeline<f32>, x: &Tensor<f32>| {
        let gate = vec![0.0; x.n];
        let code = p.model.encode(x, &Ctx { train: false, snr_db: &gate });
        (p.dequantized(&code), code)
    };
    let (deq_train, code_train) = codes(&mut p, &x_train);
    let (deq_val, code_val) = codes(&mut p, &x_val);
    let dequantized_mse = mse_loss(&deq_val, &code_val)?.0;
    let mut step2 = Offset {
        model: &mut p.model,
        batch_size: cfg.batch_size,
        deq_train,
        code_train,
        deq_val,
        code_val,
    };
    let (offset, _) = fit("offset", &mut step2, cfg, 2, e2, true, hook)?;
    let compensated_mse = step2.validate()?.loss;

    let encoder_before = p.model.group_state(crate::model::Group::Theta);
    let mut step3 = Bits {
        p: &mut p,
        step: BitStep::Finetune,
        batch_size: cfg.batch_size,
        train,
        val,
        x_train,
        x_val,
    };
    let (finetune, _) = fit("finetune", &mut step3, cfg, 3, e3, true, hook)?;
    let step3_nmse = step3.validate()?.score;
    let step2_nmse = finetune.initial_score.expect("baseline scored");
    let encoder_frozen = p.model.group_state(crate::model::Group::Theta) == encoder_before;

    meta.dataset_hash = Some(data.content_hash());
    let mut bundle = ModelBundle { meta, model: p.model };
    bundle.content_hash();
    Ok(BitLevelOutcome {
        bundle,
        report: BitLevelReport {
            autoencoder,
            offset,
            finetune,
            dequantized_mse,
            compensated_mse,
            step2_nmse_db: to_db(step2_nmse),
            step3_nmse_db: to_db(step3_nmse),
            encoder_frozen,
        },
    })
}

//! End-to-end feedback systems built from the transforms, the networks and
//! the link model.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::complex::ComplexMatrix;
use crate::data_gen::{denormalize, normalize, ChannelScenario, CsiSamplePair, NormStats, RealTensor};
use crate::error::{Error, Result};
use crate::model::{ArchSpec, Backbone, Model, TransformKind};
use crate::nn::{Ctx, Real, Tensor};
use crate::phy::{self, ChannelConfig, FeedbackSymbols, SnrDb};
use crate::quant::QuantizerSpec;
use crate::transforms::{ad_to_sf, sf_to_ad, truncate, zero_pad, AngularDelayMatrix, TruncationSpec};

/// SNR fed to attention gates when the link is noiseless.
pub const GATE_SNR_CAP_DB: f64 = 40.0;

/// Tolerance on the transmitted energy relative to `k`.
const POWER_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// SNR-adaptive joint coding.
    Adjscc,
    /// Joint coding without attention gates.
    Djscc,
    /// Quantized autoencoder over error-free bits.
    SsccBit,
    /// Capacity threshold model (no per-sample forward pass).
    SsccIdeal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub variant: Variant,
    pub backbone: Backbone,
    /// Complex channel uses per codeword.
    pub k: usize,
    #[serde(default)]
    pub channel: ChannelConfig,
    pub transform: TransformKind,
    #[serde(default)]
    pub quantizer: QuantizerSpec,
    #[serde(default)]
    pub af_hidden: Option<usize>,
}

impl PipelineConfig {
    pub fn validate(&self, scenario: &ChannelScenario) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("feedback bandwidth k must be positive".into()));
        }
        if matches!(self.variant, Variant::SsccBit | Variant::SsccIdeal) {
            if self.transform != TransformKind::TruncatedAd {
                return Err(Error::Config("separate coding uses the truncated angular-delay transform".into()));
            }
            self.quantizer.validate()?;
        } else {
            self.channel.validate(self.k, scenario.n_sub)?;
        }
        Ok(())
    }

    /// Network topology; `m` overrides the codeword length of the quantized
    /// autoencoder, joint variants always use `2k`.
    pub fn arch(&self, scenario: &ChannelScenario, m: Option<usize>) -> Result<ArchSpec> {
        self.validate(scenario)?;
        let dims = (scenario.n_sub, scenario.n_trunc, scenario.n_tx);
        let bit = matches!(self.variant, Variant::SsccBit | Variant::SsccIdeal);
        let m = if bit { m.unwrap_or(2 * self.k) } else { 2 * self.k };
        let mut spec = ArchSpec::new(self.backbone, m, dims, self.transform, self.variant == Variant::Adjscc);
        spec.af_hidden = self.af_hidden;
        spec.bounded_codeword = bit;
        spec.offset_network = bit;
        spec.validate()?;
        Ok(spec)
    }
}

/// Map between spatial-frequency CSI and normalized network tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct InputMap {
    pub transform: TransformKind,
    pub trunc: TruncationSpec,
    pub norm: NormStats,
}

impl InputMap {
    pub fn new(spec: &ArchSpec, norm: NormStats) -> Result<Self> {
        norm.validate()?;
        Ok(Self {
            transform: spec.transform,
            trunc: TruncationSpec::new(spec.n_trunc, spec.n_sub, spec.n_tx)?,
            norm,
        })
    }

    /// Normalization statistics of the model input over a training split.
    pub fn fit_stats(spec: &ArchSpec, train: &[CsiSamplePair]) -> Result<NormStats> {
        match spec.transform {
            TransformKind::Nonlinear => NormStats::from_matrices(train.iter().map(|p| &p.h_down)),
            TransformKind::TruncatedAd => {
                let trunc = TruncationSpec::new(spec.n_trunc, spec.n_sub, spec.n_tx)?;
                let ads = train
                    .iter()
                    .map(|p| Ok(truncate(&sf_to_ad(&p.h_down), &trunc)?.values))
                    .collect::<Result<Vec<_>>>()?;
                NormStats::from_matrices(ads.iter())
            }
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        match self.transform {
            TransformKind::Nonlinear => (2, self.trunc.n_sub, self.trunc.n_tx),
            TransformKind::TruncatedAd => (2, self.trunc.n_trunc, self.trunc.n_tx),
        }
    }

    /// Normalized tensor, layout `[2][rows][cols]`.
    pub fn encode(&self, h: &ComplexMatrix) -> Result<Vec<f64>> {
        if h.shape() != (self.trunc.n_sub, self.trunc.n_tx) {
            return Err(Error::Shape(format!(
                "expected {}x{} CSI, got {:?}",
                self.trunc.n_sub,
                self.trunc.n_tx,
                h.shape()
            )));
        }
        let t = match self.transform {
            TransformKind::Nonlinear => normalize(h, &self.norm)?,
            TransformKind::TruncatedAd => normalize(&truncate(&sf_to_ad(h), &self.trunc)?.values, &self.norm)?,
        };
        Ok(t.data)
    }

    /// Spatial-frequency CSI from a network output.
    pub fn decode(&self, y: &[f64]) -> Result<ComplexMatrix> {
        let (_, rows, cols) = self.shape();
        let m = denormalize(&RealTensor { rows, cols, data: y.to_vec() }, &self.norm)?;
        match self.transform {
            TransformKind::Nonlinear => Ok(m),
            TransformKind::TruncatedAd => {
                let f = AngularDelayMatrix { values: m, truncated: true };
                ad_to_sf(&zero_pad(&f, &self.trunc)?)
            }
        }
    }

    /// Gradient of a real loss w.r.t. the network output given its gradient
    /// `g = dL/dRe + j dL/dIm` w.r.t. the decoded spatial-frequency CSI.
    pub fn decode_adjoint(&self, g: &ComplexMatrix) -> Result<Vec<f64>> {
        let ad = match self.transform {
            TransformKind::Nonlinear => g.clone(),
            TransformKind::TruncatedAd => truncate(&sf_to_ad(g), &self.trunc)?.values,
        };
        let n = ad.rows() * ad.cols();
        let mut out = vec![0.0; 2 * n];
        let (re_span, im_span) = (self.norm.re_max - self.norm.re_min, self.norm.im_max - self.norm.im_min);
        for (i, z) in ad.as_slice().iter().enumerate() {
            out[i] = z.re * re_span;
            out[n + i] = z.im * im_span;
        }
        Ok(out)
    }
}

/// One codeword's trip over the uplink.
#[derive(Clone, Copy, Debug)]
pub struct Link<'a> {
    pub h_up: &'a ComplexMatrix,
    pub snr: SnrDb,
    pub noise_seed: u64,
}

impl Link<'_> {
    /// SNR value presented to attention gates.
    pub fn gate_input(&self) -> f64 {
        if self.snr.is_noiseless() {
            GATE_SNR_CAP_DB
        } else {
            self.snr.value()
        }
    }
}

struct SymbolCache {
    /// `sqrt(k) / |c|`
    scale: f64,
    /// transmitted symbols, real packing
    s: Vec<f64>,
    gains: Vec<f64>,
}

/// Differentiable link: power normalization, fading with combining, and
/// noise at a fixed realization.
pub struct ChannelLayer {
    pub cfg: ChannelConfig,
    cache: Vec<SymbolCache>,
    /// `sum |s_i|^2` of each codeword of the last forward pass.
    pub energies: Vec<f64>,
}

impl ChannelLayer {
    pub fn new(cfg: ChannelConfig) -> Self {
        Self {
            cfg,
            cache: Vec::new(),
            energies: Vec::new(),
        }
    }

    pub fn forward<T: Real>(&mut self, c: &Tensor<T>, links: &[Link]) -> Result<Tensor<T>> {
        let m = c.per_sample();
        let k = m / 2;
        if links.len() != c.n {
            return Err(Error::Shape(format!("{} links for {} codewords", links.len(), c.n)));
        }
        self.cache.clear();
        self.energies.clear();
        let mut out = Vec::with_capacity(c.data.len());
        for (i, link) in links.iter().enumerate() {
            let ci = c.sample(i);
            let norm_sq: T = ci.iter().map(|&v| v * v).sum();
            if norm_sq <= T::zero() || !norm_sq.is_finite() {
                return Err(Error::DegenerateCodeword);
            }
            let scale = T::from_f64(k as f64).sqrt() / norm_sq.sqrt();
            let s: Vec<T> = ci.iter().map(|&v| v * scale).collect();
            let energy: f64 = s.iter().map(|&v| (v * v).as_f64()).sum();
            if (energy - k as f64).abs() > POWER_TOLERANCE * k as f64 {
                return Err(Error::Contract(format!("codeword energy {energy} differs from {k}")));
            }
            self.energies.push(energy);
            let s64: Vec<f64> = s.iter().map(|v| v.as_f64()).collect();
            let symbols = phy::real_to_complex(&s64)?;
            let noise_power = phy::snr_to_noise_power(link.snr);
            let len = self.cfg.noise_len(k, link.h_up.cols());
            let eps = if noise_power > 0.0 {
                phy::draw_noise(len, link.noise_seed)
            } else {
                vec![Complex64::new(0.0, 0.0); len]
            };
            let received = phy::transmit(&symbols, link.h_up, noise_power, &self.cfg, &eps)?;
            out.extend(phy::complex_to_real(&received).into_iter().map(T::from_f64));
            self.cache.push(SymbolCache {
                scale: scale.as_f64(),
                s: s64,
                gains: phy::symbol_gains(link.h_up, k, &self.cfg)?,
            });
        }
        Ok(Tensor::from_vec(c.n, c.c, c.h, c.w, out))
    }

    pub fn backward<T: Real>(&self, dy: &Tensor<T>) -> Tensor<T> {
        let m = dy.per_sample();
        let k = m / 2;
        let mut dx = dy.zeros_like();
        for (i, cache) in self.cache.iter().enumerate() {
            let g: Vec<f64> = dy
                .sample(i)
                .iter()
                .enumerate()
                .map(|(j, v)| v.as_f64() * cache.gains[j % k])
                .collect();
            let proj: f64 = cache.s.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>() / k as f64;
            for (j, d) in dx.sample_mut(i).iter_mut().enumerate() {
                *d = T::from_f64(cache.scale * (g[j] - cache.s[j] * proj));
            }
        }
        dx
    }

    /// Transmitted symbols of codeword `i` from the last forward pass.
    pub fn symbols(&self, i: usize) -> Result<FeedbackSymbols> {
        phy::real_to_complex(&self.cache[i].s)
    }
}

/// A model wired to its link and input map.
pub struct Pipeline<T> {
    pub cfg: PipelineConfig,
    pub model: Model<T>,
    pub map: InputMap,
    pub channel: ChannelLayer,
}

impl<T: Real> Pipeline<T> {
    pub fn new(cfg: PipelineConfig, model: Model<T>, map: InputMap) -> Result<Self> {
        if cfg.variant == Variant::SsccIdeal {
            return Err(Error::Config(
                "the ideal separate scheme is a threshold model without a forward pass".into(),
            ));
        }
        let channel = ChannelLayer::new(cfg.channel);
        Ok(Self {
            cfg,
            model,
            map,
            channel,
        })
    }

    pub fn is_joint(&self) -> bool {
        matches!(self.cfg.variant, Variant::Adjscc | Variant::Djscc)
    }

    /// Batch of normalized inputs.
    pub fn inputs(&self, pairs: &[&CsiSamplePair]) -> Result<Tensor<T>> {
        let (c, h, w) = self.map.shape();
        let mut data = Vec::with_capacity(pairs.len() * c * h * w);
        for p in pairs {
            data.extend(self.map.encode(&p.h_down)?.into_iter().map(T::from_f64));
        }
        Ok(Tensor::from_vec(pairs.len(), c, h, w, data))
    }

    /// Normalized reconstruction of a batch. Joint variants send the
    /// codeword over `links`; the quantized variant ignores them.
    pub fn forward(&mut self, x: &Tensor<T>, links: &[Link], train: bool) -> Result<Tensor<T>> {
        if !self.is_joint() {
            return Ok(self.forward_bits(x, true, train, train));
        }
        let gate: Vec<T> = links.iter().map(|l| T::from_f64(l.gate_input())).collect();
        let ctx = Ctx { train, snr_db: &gate };
        let code = self.model.encode(x, &ctx);
        let received = self.channel.forward(&code, links)?;
        Ok(self.model.decode(&received, &ctx))
    }

    /// Quantized-autoencoder pass. Without `quantize` the codeword goes
    /// straight to the decoder; the encoder and the remaining networks
    /// can run in different modes.
    pub fn forward_bits(&mut self, x: &Tensor<T>, quantize: bool, train_encoder: bool, train_rest: bool) -> Tensor<T> {
        let gate = vec![T::zero(); x.n];
        let code = self.model.encode(x, &Ctx { train: train_encoder, snr_db: &gate });
        let rest = Ctx { train: train_rest, snr_db: &gate };
        let received = if quantize {
            let deq = self.dequantized(&code);
            self.model.compensate(&deq, &rest)
        } else {
            code
        };
        self.model.decode(&received, &rest)
    }

    /// `dequantize(quantize(c))` elementwise.
    pub fn dequantized(&self, code: &Tensor<T>) -> Tensor<T> {
        let q = self.cfg.quantizer;
        code.map(|v| T::from_f64(q.level(q.quantize_value(v.as_f64()))))
    }

    /// Accumulates parameter gradients of a joint pipeline from `dL/dy`.
    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let dr = self.model.decode_backward(dy);
        let dc = self.channel.backward(&dr);
        self.model.encode_backward(&dc)
    }

    /// Backward pass of [`Pipeline::forward_bits`]. Through the quantizer
    /// the gradient stops at the offset network.
    pub fn backward_bits(&mut self, dy: &Tensor<T>, quantized: bool) {
        let dr = self.model.decode_backward(dy);
        if quantized {
            self.model.compensate_backward(&dr);
        } else {
            self.model.encode_backward(&dr);
        }
    }

    /// Spatial-frequency reconstructions of `pairs` at one SNR, in eval mode.
    pub fn reconstruct(&mut self, pairs: &[&CsiSamplePair], links: &[Link]) -> Result<Vec<ComplexMatrix>> {
        let x = self.inputs(pairs)?;
        let y = self.forward(&x, links, false)?;
        (0..y.n)
            .map(|i| self.map.decode(&y.sample(i).iter().map(|v| v.as_f64()).collect::<Vec<_>>()))
            .collect()
    }
}

/// Sum of squared errors over each sample, averaged over the batch, and its
/// gradient.
pub fn mse_loss<T: Real>(y: &Tensor<T>, target: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    if y.shape() != target.shape() {
        return Err(Error::Shape(format!("output {:?} vs target {:?}", y.shape(), target.shape())));
    }
    let n = y.n as f64;
    let mut loss = 0.0;
    let mut dy = y.zeros_like();
    let two_over_n = T::from_f64(2.0 / n);
    for ((d, &a), &b) in dy.data.iter_mut().zip(&y.data).zip(&target.data) {
        let e = a - b;
        loss += (e * e).as_f64();
        *d = e * two_over_n;
    }
    Ok((loss / n, dy))
}

/// Loss on the spatial-frequency reconstruction, with errors scaled by the
/// spans of `sf_norm`, and its gradient w.r.t. the network output.
pub fn sf_loss<T: Real>(
    map: &InputMap,
    sf_norm: &NormStats,
    y: &Tensor<T>,
    targets: &[&ComplexMatrix],
) -> Result<(f64, Tensor<T>)> {
    let n = y.n as f64;
    let (wr, wi) = (
        1.0 / (sf_norm.re_max - sf_norm.re_min).powi(2),
        1.0 / (sf_norm.im_max - sf_norm.im_min).powi(2),
    );
    let mut loss = 0.0;
    let mut dy = y.zeros_like();
    for (i, h) in targets.iter().enumerate() {
        let out: Vec<f64> = y.sample(i).iter().map(|v| v.as_f64()).collect();
        let h_hat = map.decode(&out)?;
        let mut g = h_hat.clone();
        for (gz, (a, b)) in g.as_mut_slice().iter_mut().zip(h_hat.as_slice().iter().zip(h.as_slice())) {
            let e = a - b;
            loss += e.re * e.re * wr + e.im * e.im * wi;
            *gz = Complex64::new(2.0 * e.re * wr / n, 2.0 * e.im * wi / n);
        }
        for (d, v) in dy.sample_mut(i).iter_mut().zip(map.decode_adjoint(&g)?) {
            *d = T::from_f64(v);
        }
    }
    Ok((loss / n, dy))
}

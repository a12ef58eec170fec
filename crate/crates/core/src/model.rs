//! Encoder/decoder backbones, learned transforms, and the serialized bundle.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data_gen::NormStats;
use crate::error::{Error, Result};
use crate::nn::{
    export_state, import_state, ActKind, Activation, AfModule, BatchNorm, Branches, Conv2d,
    ConvTranspose2d, Ctx, Dense, Layer, PRelu, Real, Reshape, Residual, Sequential, Tensor,
};
use crate::rng;

pub const BUNDLE_VERSION: &str = "csi-djscc-model/1";
pub const BUNDLE_FILE: &str = "model.json";
const LEAKY_SLOPE: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    Csinet,
    CsinetPlus,
    Crnet,
}

impl Backbone {
    pub const ALL: [Backbone; 3] = [Backbone::Csinet, Backbone::CsinetPlus, Backbone::Crnet];

    pub fn name(self) -> &'static str {
        match self {
            Backbone::Csinet => "csinet",
            Backbone::CsinetPlus => "csinet_plus",
            Backbone::Crnet => "crnet",
        }
    }
}

/// How the UE maps spatial-frequency CSI to the compact code domain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    /// Learned analysis/synthesis networks.
    Nonlinear,
    /// 2-D DFT followed by delay truncation.
    TruncatedAd,
}

/// Everything that determines the network topology.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub backbone: Backbone,
    /// Codeword length in real values.
    pub m: usize,
    pub n_sub: usize,
    pub n_trunc: usize,
    pub n_tx: usize,
    pub transform: TransformKind,
    /// Attention gates conditioned on the SNR.
    pub snr_adaptive: bool,
    #[serde(default = "default_filters")]
    pub transform_filters: usize,
    #[serde(default = "default_kernel")]
    pub transform_kernel: usize,
    /// Hidden width of attention gates; `None` uses the gated channel count.
    #[serde(default)]
    pub af_hidden: Option<usize>,
    /// `tanh` on the codeword, for quantized feedback.
    #[serde(default)]
    pub bounded_codeword: bool,
    #[serde(default)]
    pub offset_network: bool,
}

fn default_filters() -> usize {
    32
}

fn default_kernel() -> usize {
    3
}

impl ArchSpec {
    pub fn new(
        backbone: Backbone,
        m: usize,
        (n_sub, n_trunc, n_tx): (usize, usize, usize),
        transform: TransformKind,
        snr_adaptive: bool,
    ) -> Self {
        Self {
            backbone,
            m,
            n_sub,
            n_trunc,
            n_tx,
            transform,
            snr_adaptive,
            transform_filters: default_filters(),
            transform_kernel: default_kernel(),
            af_hidden: None,
            bounded_codeword: false,
            offset_network: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::Config("codeword length must be positive".into()));
        }
        if !self.bounded_codeword && self.m % 2 != 0 {
            return Err(Error::Config(format!("codeword length {} must be even", self.m)));
        }
        if self.n_tx == 0 || self.n_trunc == 0 || self.n_trunc > self.n_sub {
            return Err(Error::Config(format!(
                "bad dimensions: n_sub {}, n_trunc {}, n_tx {}",
                self.n_sub, self.n_trunc, self.n_tx
            )));
        }
        if self.transform_filters == 0 || self.transform_kernel == 0 || self.af_hidden == Some(0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.transform == TransformKind::Nonlinear {
            self.transform_strides()?;
        }
        Ok(())
    }

    /// Vertical strides of the three analysis stages.
    pub fn transform_strides(&self) -> Result<[usize; 3]> {
        if self.n_sub % self.n_trunc != 0 {
            return Err(Error::Config(format!(
                "{} subcarriers do not reduce to {} by an integer stride",
                self.n_sub, self.n_trunc
            )));
        }
        let mut rem = self.n_sub / self.n_trunc;
        let mut s = [1; 3];
        for v in s.iter_mut().take(2) {
            if rem % 2 == 0 {
                *v = 2;
                rem /= 2;
            }
        }
        s[2] = rem;
        Ok(s)
    }

    /// Shape `(c, h, w)` of the pipeline input and output.
    pub fn io_shape(&self) -> (usize, usize, usize) {
        match self.transform {
            TransformKind::Nonlinear => (2, self.n_sub, self.n_tx),
            TransformKind::TruncatedAd => (2, self.n_trunc, self.n_tx),
        }
    }

    pub fn code_shape(&self) -> (usize, usize, usize) {
        (2, self.n_trunc, self.n_tx)
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        hex::encode(Sha256::digest(json))
    }
}

/// Parameter groups of a bundle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Group {
    Alpha,
    Theta,
    Phi,
    Beta,
    Gamma,
    Psi,
    Rho,
    Tau,
    Offset,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Ue,
    Bs,
}

impl Group {
    pub const ALL: [Group; 9] = [
        Group::Alpha,
        Group::Theta,
        Group::Phi,
        Group::Beta,
        Group::Gamma,
        Group::Psi,
        Group::Rho,
        Group::Tau,
        Group::Offset,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Group::Alpha => "alpha",
            Group::Theta => "theta",
            Group::Phi => "phi",
            Group::Beta => "beta",
            Group::Gamma => "gamma",
            Group::Psi => "psi",
            Group::Rho => "rho",
            Group::Tau => "tau",
            Group::Offset => "offset",
        }
    }

    pub fn side(self) -> Side {
        match self {
            Group::Alpha | Group::Theta | Group::Gamma | Group::Psi => Side::Ue,
            _ => Side::Bs,
        }
    }

    fn is_gate(self) -> bool {
        matches!(self, Group::Gamma | Group::Psi | Group::Rho | Group::Tau)
    }
}

/// Seeds each layer from its path so that shared layers of two
/// architectures start from identical weights.
struct Init {
    seed: u64,
}

impl Init {
    fn rng(&self, path: &str) -> ChaCha8Rng {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in path.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        rng::stream(self.seed, &[rng::tag::INIT, h])
    }
}

struct Builder<'a> {
    init: &'a Init,
    spec: &'a ArchSpec,
}

impl Builder<'_> {
    fn conv<T: Real>(&self, path: &str, cin: usize, cout: usize, k: (usize, usize), s: (usize, usize)) -> Conv2d<T> {
        Conv2d::new(cin, cout, k, s, &mut self.init.rng(path))
    }

    fn gate<T: Real>(&self, path: &str, c: usize) -> AfModule<T> {
        AfModule::new(c, self.spec.af_hidden.unwrap_or(c), &mut self.init.rng(path))
    }

    /// conv, batch norm, activation and (when adaptive) an attention gate.
    #[allow(clippy::too_many_arguments)]
    fn stage<T: Real>(
        &self,
        seq: &mut Sequential<T>,
        prefix: &str,
        name: &str,
        conv: impl Layer<T> + 'static,
        c: usize,
        prelu: bool,
    ) {
        seq.push(format!("{name}_conv"), conv);
        seq.push(format!("{name}_bn"), BatchNorm::new(c));
        if prelu {
            seq.push(format!("{name}_act"), PRelu::new(c));
        } else {
            seq.push(format!("{name}_act"), Activation::new(ActKind::LeakyRelu(LEAKY_SLOPE)));
        }
        if self.spec.snr_adaptive {
            seq.push(format!("{name}_af"), self.gate::<T>(&format!("{prefix}.{name}_af"), c));
        }
    }

    fn atn<T: Real>(&self) -> Result<Sequential<T>> {
        let s = self.spec.transform_strides()?;
        let (f, k) = (self.spec.transform_filters, self.spec.transform_kernel);
        let mut seq = Sequential::new();
        let widths = [(2, f), (f, f)];
        for (i, &(cin, cout)) in widths.iter().enumerate() {
            let name = format!("s{}", i + 1);
            let conv = self.conv(&format!("atn.{name}_conv"), cin, cout, (k, k), (s[i], 1));
            self.stage(&mut seq, "atn", &name, conv, cout, true);
        }
        seq.push("s3_conv", self.conv::<T>("atn.s3_conv", f, 2, (k, k), (s[2], 1)));
        seq.push("out", Activation::new(ActKind::Sigmoid));
        Ok(seq)
    }

    fn stn<T: Real>(&self) -> Result<Sequential<T>> {
        let s = self.spec.transform_strides()?;
        let (f, k) = (self.spec.transform_filters, self.spec.transform_kernel);
        let mut seq = Sequential::new();
        let stages = [(2, f, s[2]), (f, f, s[1])];
        for (i, &(cin, cout, st)) in stages.iter().enumerate() {
            let name = format!("s{}", i + 1);
            let path = format!("stn.{name}_conv");
            let conv = ConvTranspose2d::new(cin, cout, (k, k), (st, 1), &mut self.init.rng(&path));
            self.stage(&mut seq, "stn", &name, conv, cout, true);
        }
        seq.push(
            "s3_conv",
            ConvTranspose2d::<T>::new(f, 2, (k, k), (s[0], 1), &mut self.init.rng("stn.s3_conv")),
        );
        seq.push("out", Activation::new(ActKind::Sigmoid));
        Ok(seq)
    }

    fn encoder<T: Real>(&self) -> Sequential<T> {
        let (c, h, w) = self.spec.code_shape();
        let n = c * h * w;
        let mut seq = Sequential::new();
        let p = "enc";
        match self.spec.backbone {
            Backbone::Csinet => {
                let conv = self.conv(&format!("{p}.c1_conv"), 2, 2, (3, 3), (1, 1));
                self.stage(&mut seq, p, "c1", conv, 2, false);
            }
            Backbone::CsinetPlus => {
                for name in ["c1", "c2"] {
                    let conv = self.conv(&format!("{p}.{name}_conv"), 2, 2, (7, 7), (1, 1));
                    self.stage(&mut seq, p, name, conv, 2, false);
                }
            }
            Backbone::Crnet => {
                let mut a = Sequential::new();
                for (name, k) in [("a1", (3, 3)), ("a2", (1, 9)), ("a3", (9, 1))] {
                    let conv = self.conv(&format!("{p}.{name}_conv"), 2, 2, k, (1, 1));
                    a.push(format!("{name}_conv"), conv);
                    a.push(format!("{name}_bn"), BatchNorm::new(2));
                    a.push(format!("{name}_act"), Activation::new(ActKind::LeakyRelu(LEAKY_SLOPE)));
                }
                let mut b = Sequential::new();
                b.push("b1_conv", self.conv::<T>(&format!("{p}.b1_conv"), 2, 2, (3, 3), (1, 1)));
                b.push("b1_bn", BatchNorm::new(2));
                b.push("b1_act", Activation::new(ActKind::LeakyRelu(LEAKY_SLOPE)));
                seq.push("paths", Branches::new(vec![("a".into(), a), ("b".into(), b)]));
                let fuse = self.conv(&format!("{p}.fuse_conv"), 4, 2, (1, 1), (1, 1));
                self.stage(&mut seq, p, "fuse", fuse, 2, false);
            }
        }
        seq.push("flatten", Reshape::new(n, 1, 1));
        seq.push(
            "fc",
            Dense::new(n, self.spec.m, &mut self.init.rng(&format!("{p}.fc"))),
        );
        if self.spec.bounded_codeword {
            seq.push("bound", Activation::new(ActKind::Tanh));
        }
        seq
    }

    fn refine_block<T: Real>(&self, path: &str) -> Residual<T> {
        let mut body = Sequential::new();
        match self.spec.backbone {
            Backbone::Csinet | Backbone::CsinetPlus => {
                let k = if self.spec.backbone == Backbone::Csinet { 3 } else { 7 };
                for (name, cin, cout) in [("r1", 2, 8), ("r2", 8, 16)] {
                    let conv = self.conv(&format!("{path}.{name}_conv"), cin, cout, (k, k), (1, 1));
                    self.stage(&mut body, path, name, conv, cout, false);
                }
                body.push(
                    "r3_conv",
                    self.conv::<T>(&format!("{path}.r3_conv"), 16, 2, (k, k), (1, 1)).zero_weights(),
                );
                body.push("r3_bn", BatchNorm::new(2));
            }
            Backbone::Crnet => {
                let mut a = Sequential::new();
                let conv = self.conv(&format!("{path}.a1_conv"), 2, 8, (3, 3), (1, 1));
                self.stage(&mut a, path, "a1", conv, 8, false);
                let mut b = Sequential::new();
                for (name, cin, k) in [("b1", 2, (1, 9)), ("b2", 8, (9, 1))] {
                    let conv = self.conv(&format!("{path}.{name}_conv"), cin, 8, k, (1, 1));
                    self.stage(&mut b, path, name, conv, 8, false);
                }
                body.push("paths", Branches::new(vec![("a".into(), a), ("b".into(), b)]));
                body.push(
                    "fuse_conv",
                    self.conv::<T>(&format!("{path}.fuse_conv"), 16, 2, (1, 1), (1, 1)).zero_weights(),
                );
                body.push("fuse_bn", BatchNorm::new(2));
            }
        }
        Residual::new(body)
    }

    fn decoder<T: Real>(&self) -> Sequential<T> {
        let (c, h, w) = self.spec.code_shape();
        let mut seq = Sequential::new();
        seq.push("fc", Dense::new(self.spec.m, c * h * w, &mut self.init.rng("dec.fc")));
        seq.push("unflatten", Reshape::new(c, h, w));
        for name in ["block1", "block2"] {
            seq.push(name, self.refine_block::<T>(&format!("dec.{name}")));
        }
        seq.push("out", Activation::new(ActKind::Sigmoid));
        seq
    }

    /// `m -> m -> m` residual correction of dequantized codewords; the
    /// second layer starts at zero so the network starts as the identity.
    fn offset<T: Real>(&self) -> Residual<T> {
        let m = self.spec.m;
        let mut fc2 = Dense::new(m, m, &mut self.init.rng("offset.fc2"));
        fc2.weight.value.fill(T::zero());
        Residual::new(
            Sequential::new()
                .with("fc1", Dense::new(m, m, &mut self.init.rng("offset.fc1")))
                .with("act", Activation::new(ActKind::LeakyRelu(LEAKY_SLOPE)))
                .with("fc2", fc2),
        )
    }
}

/// The networks of one pipeline.
pub struct Model<T> {
    pub spec: ArchSpec,
    pub atn: Option<Sequential<T>>,
    pub encoder: Sequential<T>,
    pub decoder: Sequential<T>,
    pub stn: Option<Sequential<T>>,
    pub offset: Option<Residual<T>>,
}

impl<T: Real> Model<T> {
    pub fn new(spec: &ArchSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let init = Init { seed };
        let b = Builder { init: &init, spec };
        let learned = spec.transform == TransformKind::Nonlinear;
        Ok(Self {
            spec: spec.clone(),
            atn: if learned { Some(b.atn()?) } else { None },
            encoder: b.encoder(),
            decoder: b.decoder(),
            stn: if learned { Some(b.stn()?) } else { None },
            offset: spec.offset_network.then(|| b.offset()),
        })
    }

    /// Input (normalized CSI) to codeword, `(n, m, 1, 1)`.
    pub fn encode(&mut self, x: &Tensor<T>, ctx: &Ctx<T>) -> Tensor<T> {
        let t = match self.atn.as_mut() {
            Some(atn) => atn.forward(x, ctx),
            None => x.clone(),
        };
        self.encoder.forward(&t, ctx)
    }

    pub fn encode_backward(&mut self, dc: &Tensor<T>) -> Tensor<T> {
        let dt = self.encoder.backward(dc);
        match self.atn.as_mut() {
            Some(atn) => atn.backward(&dt),
            None => dt,
        }
    }

    pub fn decode(&mut self, c: &Tensor<T>, ctx: &Ctx<T>) -> Tensor<T> {
        let t = self.decoder.forward(c, ctx);
        match self.stn.as_mut() {
            Some(stn) => stn.forward(&t, ctx),
            None => t,
        }
    }

    pub fn decode_backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let dt = match self.stn.as_mut() {
            Some(stn) => stn.backward(dy),
            None => dy.clone(),
        };
        self.decoder.backward(&dt)
    }

    pub fn has_offset(&self) -> bool {
        self.offset.is_some()
    }

    pub fn compensate(&mut self, c: &Tensor<T>, ctx: &Ctx<T>) -> Tensor<T> {
        match self.offset.as_mut() {
            Some(o) => o.forward(c, ctx),
            None => c.clone(),
        }
    }

    pub fn compensate_backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        match self.offset.as_mut() {
            Some(o) => o.backward(dy),
            None => dy.clone(),
        }
    }

    /// Networks selected by side: UE (transform and encoder), BS
    /// (decoder and synthesis transform), and the offset network.
    pub fn networks(&mut self, ue: bool, bs: bool, offset: bool) -> Vec<&mut dyn Layer<T>> {
        let Model {
            atn,
            encoder,
            decoder,
            stn,
            offset: off,
            ..
        } = self;
        let mut out: Vec<&mut dyn Layer<T>> = Vec::new();
        if ue {
            if let Some(a) = atn.as_mut() {
                out.push(a);
            }
            out.push(encoder);
        }
        if offset {
            if let Some(o) = off.as_mut() {
                out.push(o);
            }
        }
        if bs {
            out.push(decoder);
            if let Some(s) = stn.as_mut() {
                out.push(s);
            }
        }
        out
    }

    pub fn force_identity_gates(&mut self) {
        for net in self.networks_mut().into_iter().flatten() {
            net.force_identity_gates();
        }
    }

    /// See [`Layer::pin_rectifiers`]; the pattern comes from the last forward pass.
    pub fn pin_rectifiers(&mut self, on: bool) {
        for net in self.networks_mut().into_iter().flatten() {
            net.pin_rectifiers(on);
        }
    }

    fn networks_mut(&mut self) -> [Option<&mut dyn Layer<T>>; 4] {
        [
            self.atn.as_mut().map(|n| n as &mut dyn Layer<T>),
            Some(&mut self.encoder),
            Some(&mut self.decoder),
            self.stn.as_mut().map(|n| n as &mut dyn Layer<T>),
        ]
    }

    pub fn group_layer(&mut self, g: Group) -> Option<&mut dyn Layer<T>> {
        match g {
            Group::Alpha | Group::Gamma => self.atn.as_mut().map(|n| n as &mut dyn Layer<T>),
            Group::Theta | Group::Psi => Some(&mut self.encoder),
            Group::Phi | Group::Rho => Some(&mut self.decoder),
            Group::Beta | Group::Tau => self.stn.as_mut().map(|n| n as &mut dyn Layer<T>),
            Group::Offset => self.offset.as_mut().map(|n| n as &mut dyn Layer<T>),
        }
    }

    /// Serialized state (parameters and running statistics) of a group.
    pub fn group_state(&mut self, g: Group) -> Vec<f32> {
        match self.group_layer(g) {
            Some(l) => export_state(l, g.is_gate()),
            None => Vec::new(),
        }
    }

    pub fn set_group_state(&mut self, g: Group, state: &[f32]) -> Result<()> {
        match self.group_layer(g) {
            Some(l) => import_state(l, g.is_gate(), state).map_err(|expected| {
                Error::Shape(format!(
                    "group {} holds {} values, architecture needs {expected}",
                    g.name(),
                    state.len()
                ))
            }),
            None if state.is_empty() => Ok(()),
            None => Err(Error::Shape(format!("group {} is absent from this architecture", g.name()))),
        }
    }

    /// Trainable scalar count of a group.
    pub fn group_param_count(&mut self, g: Group) -> usize {
        match self.group_layer(g) {
            Some(l) => {
                let (main, gate) = crate::nn::count_params(l);
                if g.is_gate() {
                    gate
                } else {
                    main
                }
            }
            None => 0,
        }
    }

    pub fn count_params(&mut self, side: Side) -> usize {
        Group::ALL
            .iter()
            .filter(|g| g.side() == side)
            .map(|&g| self.group_param_count(g))
            .sum()
    }

    /// State of every group, in [`Group::ALL`] order.
    pub fn snapshot(&mut self) -> Vec<Vec<f32>> {
        Group::ALL.iter().map(|&g| self.group_state(g)).collect()
    }

    pub fn restore(&mut self, snapshot: &[Vec<f32>]) -> Result<()> {
        for (&g, state) in Group::ALL.iter().zip(snapshot) {
            self.set_group_state(g, state)?;
        }
        Ok(())
    }

    /// Copy in another precision.
    pub fn cast<U: Real>(&mut self) -> Model<U> {
        let mut out = Model::<U>::new(&self.spec, 0).expect("spec already validated");
        for g in Group::ALL {
            out.set_group_state(g, &self.group_state(g)).expect("same architecture");
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupInfo {
    pub len: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub version: String,
    pub spec: ArchSpec,
    pub spec_hash: String,
    /// Affine map between physical and normalized values of the model input.
    pub norm: NormStats,
    #[serde(default)]
    pub snr_range_db: Option<[f64; 2]>,
    pub init_seed: u64,
    #[serde(default)]
    pub dataset_hash: Option<String>,
    pub groups: BTreeMap<String, GroupInfo>,
}

/// Trained model plus what is needed to use it.
pub struct ModelBundle {
    pub meta: BundleMeta,
    pub model: Model<f32>,
}

impl ModelBundle {
    pub fn new(spec: &ArchSpec, norm: NormStats, seed: u64) -> Result<Self> {
        norm.validate()?;
        let model = Model::new(spec, seed)?;
        let mut b = Self {
            meta: BundleMeta {
                version: BUNDLE_VERSION.into(),
                spec: spec.clone(),
                spec_hash: spec.hash(),
                norm,
                snr_range_db: None,
                init_seed: seed,
                dataset_hash: None,
                groups: BTreeMap::new(),
            },
            model,
        };
        b.refresh_groups();
        Ok(b)
    }

    fn refresh_groups(&mut self) {
        self.meta.groups = Group::ALL
            .iter()
            .map(|&g| {
                let state = self.model.group_state(g);
                (
                    g.name().to_string(),
                    GroupInfo {
                        len: state.len(),
                        sha256: hex::encode(Sha256::digest(f32_bytes(&state))),
                    },
                )
            })
            .collect();
    }

    /// Hash over the spec and every group's contents.
    pub fn content_hash(&mut self) -> String {
        self.refresh_groups();
        let mut h = Sha256::new();
        h.update(self.meta.spec_hash.as_bytes());
        for info in self.meta.groups.values() {
            h.update(info.sha256.as_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn count_params(&mut self, side: Side) -> usize {
        self.model.count_params(side)
    }

    pub fn snapshot(&mut self) -> Vec<Vec<f32>> {
        self.model.snapshot()
    }

    pub fn restore(&mut self, snapshot: &[Vec<f32>]) -> Result<()> {
        self.model.restore(snapshot)
    }

    pub fn try_clone(&mut self) -> Result<Self> {
        let mut model = Model::new(&self.meta.spec, self.meta.init_seed)?;
        for g in Group::ALL {
            model.set_group_state(g, &self.model.group_state(g))?;
        }
        Ok(Self {
            meta: self.meta.clone(),
            model,
        })
    }

    pub fn is_finite(&mut self) -> bool {
        Group::ALL
            .iter()
            .all(|&g| self.model.group_state(g).iter().all(|v| v.is_finite()))
    }

    pub fn save(&mut self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.refresh_groups();
        for g in Group::ALL {
            let path = dir.join(format!("{}.bin", g.name()));
            fs::write(&path, f32_bytes(&self.model.group_state(g))).map_err(|e| Error::io(&path, e))?;
        }
        let path = dir.join(BUNDLE_FILE);
        fs::write(&path, serde_json::to_vec_pretty(&self.meta)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(BUNDLE_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::CorruptManifest {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        let found = raw.get("version").and_then(|v| v.as_str()).unwrap_or("");
        if found != BUNDLE_VERSION {
            return Err(Error::Version {
                found: found.into(),
                expected: BUNDLE_VERSION.into(),
            });
        }
        let meta: BundleMeta = serde_json::from_value(raw).map_err(|e| Error::CorruptManifest {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        if meta.spec.hash() != meta.spec_hash {
            return Err(Error::CorruptManifest {
                path,
                reason: "architecture hash does not match its spec".into(),
            });
        }
        let mut model = Model::new(&meta.spec, meta.init_seed)?;
        for g in Group::ALL {
            let blob = dir.join(format!("{}.bin", g.name()));
            let bytes = fs::read(&blob).map_err(|e| Error::io(&blob, e))?;
            if bytes.len() % 4 != 0 {
                return Err(Error::Shape(format!("{} is not a whole number of floats", blob.display())));
            }
            let state: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if let Some(info) = meta.groups.get(g.name()) {
                if hex::encode(Sha256::digest(&bytes)) != info.sha256 {
                    return Err(Error::CorruptManifest {
                        path: blob,
                        reason: "blob hash differs from manifest".into(),
                    });
                }
            }
            if state.iter().any(|v| !v.is_finite()) {
                return Err(Error::Contract(format!("group {} holds non-finite values", g.name())));
            }
            model.set_group_state(g, &state)?;
        }
        Ok(Self { meta, model })
    }
}

fn f32_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn norm() -> NormStats {
        NormStats {
            re_min: -1.0,
            re_max: 1.0,
            im_min: -1.0,
            im_max: 1.0,
        }
    }

    fn spec(b: Backbone, transform: TransformKind, adaptive: bool) -> ArchSpec {
        ArchSpec::new(b, 32, (64, 16, 16), transform, adaptive)
    }

    fn ctx(snr: &[f32]) -> Ctx<'_, f32> {
        Ctx { train: false, snr_db: snr }
    }

    #[test]
    fn strides_split_the_reduction() {
        let mut s = spec(Backbone::Csinet, TransformKind::Nonlinear, true);
        assert_eq!(s.transform_strides().unwrap(), [2, 2, 1]);
        s.n_sub = 256;
        s.n_trunc = 32;
        assert_eq!(s.transform_strides().unwrap(), [2, 2, 2]);
        s.n_sub = 48;
        s.n_trunc = 16;
        assert_eq!(s.transform_strides().unwrap(), [1, 1, 3]);
        s.n_sub = 50;
        assert!(matches!(s.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn shapes_through_every_backbone() {
        for b in Backbone::ALL {
            let s = ArchSpec::new(b, 64, (256, 32, 32), TransformKind::Nonlinear, true);
            let mut m = Model::<f32>::new(&s, 1).unwrap();
            let x = Tensor::from_vec(2, 2, 256, 32, vec![0.3; 2 * 2 * 256 * 32]);
            let snr = [0.0f32, 5.0];
            let c = m.encode(&x, &ctx(&snr));
            assert_eq!(c.shape(), [2, 64, 1, 1]);
            let y = m.decode(&c, &ctx(&snr));
            assert_eq!(y.shape(), [2, 2, 256, 32]);
            assert!(y.data.iter().all(|&v| v > 0.0 && v < 1.0));
            let t = m.atn.as_mut().unwrap().forward(&x, &ctx(&snr));
            assert_eq!(t.shape(), [2, 2, 32, 32]);
        }
    }

    #[test]
    fn zero_input_gives_half_transform_and_zero_codeword() {
        let s = spec(Backbone::Csinet, TransformKind::Nonlinear, true);
        let mut m = Model::<f32>::new(&s, 2).unwrap();
        let x = Tensor::zeros(1, 2, 64, 16);
        // biases start at zero
        let t = m.atn.as_mut().unwrap().forward(&x, &ctx(&[3.0]));
        assert!(t.data.iter().all(|&v| v == 0.5));
        let u = m.stn.as_mut().unwrap().forward(&Tensor::zeros(1, 2, 16, 16), &ctx(&[3.0]));
        assert!(u.data.iter().all(|&v| v == 0.5));
        let c = m.encoder.forward(&Tensor::zeros(1, 2, 16, 16), &ctx(&[3.0]));
        assert!(c.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn untrained_residual_blocks_are_identity() {
        for b in Backbone::ALL {
            let s = spec(b, TransformKind::TruncatedAd, true);
            let mut m = Model::<f64>::new(&s, 3).unwrap();
            let c = Tensor::matrix(2, 32, (0..64).map(|i| (i as f64 * 0.37).sin()).collect());
            let snr = [1.0, -1.0];
            let cx = Ctx { train: false, snr_db: &snr[..] };
            let y = m.decode(&c, &cx);
            let mut first = Dense::<f64>::new(32, 512, &mut Init { seed: 3 }.rng("dec.fc"));
            let direct = first.forward(&c, &cx).map(crate::nn::sigmoid);
            for (a, b) in y.data.iter().zip(&direct.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    /// Closed-form trainable parameter counts of the reference layers.
    fn conv(cin: usize, cout: usize, kh: usize, kw: usize) -> usize {
        cin * cout * kh * kw + cout
    }
    fn dense(nin: usize, nout: usize) -> usize {
        nin * nout + nout
    }
    fn bn(c: usize) -> usize {
        2 * c
    }
    fn af(c: usize) -> usize {
        dense(c + 1, c) + dense(c, c)
    }

    fn hand_counts(b: Backbone, m: usize, code: usize) -> (usize, usize, usize, usize) {
        let (enc, enc_af) = match b {
            Backbone::Csinet => (conv(2, 2, 3, 3) + bn(2), af(2)),
            Backbone::CsinetPlus => (2 * (conv(2, 2, 7, 7) + bn(2)), 2 * af(2)),
            Backbone::Crnet => (
                conv(2, 2, 3, 3) + conv(2, 2, 1, 9) + conv(2, 2, 9, 1) + conv(2, 2, 3, 3)
                    + 4 * bn(2)
                    + conv(4, 2, 1, 1)
                    + bn(2),
                af(2),
            ),
        };
        let (block, block_af) = match b {
            Backbone::Csinet => (
                conv(2, 8, 3, 3) + conv(8, 16, 3, 3) + conv(16, 2, 3, 3) + bn(8) + bn(16) + bn(2),
                af(8) + af(16),
            ),
            Backbone::CsinetPlus => (
                conv(2, 8, 7, 7) + conv(8, 16, 7, 7) + conv(16, 2, 7, 7) + bn(8) + bn(16) + bn(2),
                af(8) + af(16),
            ),
            Backbone::Crnet => (
                conv(2, 8, 3, 3) + conv(2, 8, 1, 9) + conv(8, 8, 9, 1) + conv(16, 2, 1, 1)
                    + 3 * bn(8)
                    + bn(2),
                3 * af(8),
            ),
        };
        (
            enc + dense(code, m),
            enc_af,
            dense(m, code) + 2 * block,
            2 * block_af,
        )
    }

    #[test]
    fn param_counts_match_closed_form() {
        for b in Backbone::ALL {
            for m in [32, 64] {
                for (dims, code) in [((256, 32, 32), 2048), ((64, 16, 16), 512)] {
                    let s = ArchSpec::new(b, m, dims, TransformKind::TruncatedAd, true);
                    let mut model = Model::<f32>::new(&s, 0).unwrap();
                    let (theta, psi, phi, rho) = hand_counts(b, m, code);
                    assert_eq!(model.group_param_count(Group::Theta), theta, "{b:?} m={m}");
                    assert_eq!(model.group_param_count(Group::Psi), psi);
                    assert_eq!(model.group_param_count(Group::Phi), phi);
                    assert_eq!(model.group_param_count(Group::Rho), rho);
                    assert_eq!(model.count_params(Side::Ue), theta + psi);
                    assert_eq!(model.count_params(Side::Bs), phi + rho);
                }
            }
        }
        let s = ArchSpec::new(Backbone::Csinet, 64, (256, 32, 32), TransformKind::TruncatedAd, false);
        let mut model = Model::<f32>::new(&s, 0).unwrap();
        // projection layers alone
        assert_eq!(dense(2048, 64), 131_136);
        assert_eq!(dense(64, 2048), 133_120);
        assert_eq!(model.group_param_count(Group::Theta), 38 + 4 + 131_136);
        assert_eq!(model.group_param_count(Group::Psi), 0);
    }

    #[test]
    fn transform_counts_and_side_partition() {
        let s = ArchSpec::new(Backbone::Csinet, 32, (64, 16, 16), TransformKind::Nonlinear, true);
        let mut model = Model::<f32>::new(&s, 0).unwrap();
        let stage = |cin: usize, cout: usize| conv(cin, cout, 3, 3) + bn(cout) + cout;
        let transform = stage(2, 32) + stage(32, 32) + conv(32, 2, 3, 3);
        assert_eq!(model.group_param_count(Group::Alpha), transform);
        assert_eq!(model.group_param_count(Group::Beta), transform);
        assert_eq!(model.group_param_count(Group::Gamma), 2 * af(32));
        assert_eq!(model.group_param_count(Group::Tau), 2 * af(32));
        let total: usize = Group::ALL.iter().map(|&g| model.group_param_count(g)).sum();
        assert_eq!(model.count_params(Side::Ue) + model.count_params(Side::Bs), total);
    }

    #[test]
    fn identity_gates_reproduce_plain_network() {
        let a = spec(Backbone::Crnet, TransformKind::Nonlinear, true);
        let d = spec(Backbone::Crnet, TransformKind::Nonlinear, false);
        let mut adj = Model::<f32>::new(&a, 9).unwrap();
        let mut dj = Model::<f32>::new(&d, 9).unwrap();
        adj.force_identity_gates();
        let x = Tensor::from_vec(2, 2, 64, 16, (0..4096).map(|i| ((i * 7919) % 1000) as f32 / 1000.0).collect());
        let snr = [-5.0f32, 5.0];
        let c = Ctx { train: true, snr_db: &snr };
        let ya = adj.encode(&x, &c);
        let yd = dj.encode(&x, &c);
        assert_eq!(ya, yd);
        assert_eq!(adj.decode(&ya, &c), dj.decode(&yd, &c));
    }

    #[test]
    fn bundle_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = spec(Backbone::CsinetPlus, TransformKind::Nonlinear, true);
        s.offset_network = true;
        let mut b = ModelBundle::new(&s, norm(), 4).unwrap();
        b.meta.snr_range_db = Some([-10.0, 10.0]);
        b.save(dir.path()).unwrap();
        let mut back = ModelBundle::load(dir.path()).unwrap();
        assert_eq!(back.meta, b.meta);
        assert_eq!(back.content_hash(), b.content_hash());
        for g in Group::ALL {
            assert_eq!(back.model.group_state(g), b.model.group_state(g));
        }
        assert!(dir.path().join("tau.bin").exists());
        let theta = dir.path().join("theta.bin");
        let mut bytes = fs::read(&theta).unwrap();
        bytes[0] ^= 1;
        fs::write(&theta, bytes).unwrap();
        assert!(matches!(ModelBundle::load(dir.path()), Err(Error::CorruptManifest { .. })));
        let mut meta = b.meta.clone();
        meta.version = "other".into();
        fs::write(dir.path().join(BUNDLE_FILE), serde_json::to_vec(&meta).unwrap()).unwrap();
        assert!(matches!(ModelBundle::load(dir.path()), Err(Error::Version { .. })));
    }
}

//! Layers with hand-written backward passes. Each layer caches what its
//! backward pass needs during `forward` and accumulates parameter gradients
//! in `backward`; `backward` must follow the matching `forward`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::real::{gemm, Real};
use super::tensor::Tensor;

/// Learnable parameter with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Real> Param<T> {
    pub fn new(value: Vec<T>) -> Self {
        let grad = vec![T::zero(); value.len()];
        Self { value, grad }
    }

    pub fn zeros(len: usize) -> Self {
        Self::new(vec![T::zero(); len])
    }

    pub fn filled(len: usize, v: T) -> Self {
        Self::new(vec![v; len])
    }

    pub fn glorot(len: usize, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Self::new(
            (0..len)
                .map(|_| T::from_f64(rng.gen_range(-limit..limit)))
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Walks parameters and non-trainable buffers in a fixed order. `gate`
/// marks members of SNR-attention modules.
pub trait Visitor<T> {
    fn param(&mut self, name: &str, p: &mut Param<T>, gate: bool);
    fn buffer(&mut self, name: &str, b: &mut [T], gate: bool);
}

/// Per-call context: training mode and the SNR (dB) fed to attention gates,
/// one value per batch sample.
pub struct Ctx<'a, T> {
    pub train: bool,
    pub snr_db: &'a [T],
}

pub trait Layer<T: Real>: Send {
    fn forward(&mut self, x: &Tensor<T>, ctx: &Ctx<T>) -> Tensor<T>;
    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T>;
    fn visit(&mut self, path: &str, gate: bool, v: &mut dyn Visitor<T>);
    /// Output `(c, h, w)` for an input of shape `(c, h, w)`.
    fn out_shape(&self, input: (usize, usize, usize)) -> (usize, usize, usize);
    /// Pins every contained attention gate to a unit scale.
    fn force_identity_gates(&mut self) {}
    /// While on, rectifiers keep the sign pattern of their last forward pass,
    /// which makes the network smooth around the current point.
    fn pin_rectifiers(&mut self, _on: bool) {}
}

pub(crate) fn join(path: &str, name: &str) -> String {
    if path.is_empty() {
        name.to_string()
    } else {
        format!("{path}.{name}")
    }
}

/// "Same"-padded strided convolution geometry (output = ceil(input / stride)).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ho: usize,
    pub wo: usize,
    pad_t: usize,
    pad_l: usize,
}

impl ConvGeom {
    pub fn same(cin: usize, h: usize, w: usize, k: (usize, usize), s: (usize, usize)) -> Self {
        let (kh, kw) = k;
        let (sh, sw) = s;
        let ho = h.div_ceil(sh);
        let wo = w.div_ceil(sw);
        let pad_h = ((ho - 1) * sh + kh).saturating_sub(h);
        let pad_w = ((wo - 1) * sw + kw).saturating_sub(w);
        Self {
            cin,
            h,
            w,
            kh,
            kw,
            sh,
            sw,
            ho,
            wo,
            pad_t: pad_h / 2,
            pad_l: pad_w / 2,
        }
    }

    pub fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    /// Output columns `lo..hi` whose tap `kj` lands inside the input row.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let lo = if self.pad_l > kj { (self.pad_l - kj).div_ceil(self.sw) } else { 0 };
        let reach = self.w + self.pad_l;
        let hi = if reach > kj { ((reach - kj - 1) / self.sw + 1).min(self.wo) } else { 0 };
        let lo = lo.min(self.wo);
        (lo, hi.max(lo))
    }

    /// Writes the patches of one sample into columns `offset..offset+ho*wo`
    /// of a row-major matrix with `stride` columns.
    fn im2col<T: Real>(&self, x: &[T], col: &mut [T], stride: usize, offset: usize) {
        let plane = self.out_plane();
        for ci in 0..self.cin {
            let xc = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let r = (ci * self.kh + ki) * self.kw + kj;
                    let dst = &mut col[r * stride + offset..r * stride + offset + plane];
                    let (lo, hi) = self.valid_cols(kj);
                    for oy in 0..self.ho {
                        let iy = (oy * self.sh + ki) as isize - self.pad_t as isize;
                        let row = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize || lo >= hi {
                            row.fill(T::zero());
                            continue;
                        }
                        let src = &xc[iy as usize * self.w..(iy as usize + 1) * self.w];
                        row[..lo].fill(T::zero());
                        row[hi..].fill(T::zero());
                        let start = lo * self.sw + kj - self.pad_l;
                        if self.sw == 1 {
                            row[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                        } else {
                            for (d, s) in row[lo..hi].iter_mut().zip(src[start..].iter().step_by(self.sw)) {
                                *d = *s;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`ConvGeom::im2col`]: scatters-adds columns back to an image.
    fn col2im<T: Real>(&self, col: &[T], x: &mut [T], stride: usize, offset: usize) {
        let plane = self.out_plane();
        for ci in 0..self.cin {
            let xc = &mut x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let r = (ci * self.kh + ki) * self.kw + kj;
                    let src = &col[r * stride + offset..r * stride + offset + plane];
                    let (lo, hi) = self.valid_cols(kj);
                    if lo >= hi {
                        continue;
                    }
                    let start = lo * self.sw + kj - self.pad_l;
                    for oy in 0..self.ho {
                        let iy = (oy * self.sh + ki) as isize - self.pad_t as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut xc[iy as usize * self.w + start..(iy as usize + 1) * self.w];
                        let s = &src[oy * self.wo + lo..oy * self.wo + hi];
                        if self.sw == 1 {
                            for (d, v) in dst.iter_mut().zip(s) {
                                *d += *v;
                            }
                        } else {
                            for (d, v) in dst.iter_mut().step_by(self.sw).zip(s) {
                                *d += *v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// NCHW batch -> row-major `(c, n * plane)` matrix.
fn gather_channels<T: Real>(x: &Tensor<T>) -> Vec<T> {
    let plane = x.plane();
    let cols = x.n * plane;
    let mut out = vec![T::zero(); x.c * cols];
    for i in 0..x.n {
        for c in 0..x.c {
            let src = &x.data[(i * x.c + c) * plane..(i * x.c + c + 1) * plane];
            out[c * cols + i * plane..c * cols + (i + 1) * plane].copy_from_slice(src);
        }
    }
    out
}

/// Inverse of [`gather_channels`].
fn scatter_channels<T: Real>(m: &[T], n: usize, c: usize, h: usize, w: usize) -> Tensor<T> {
    let plane = h * w;
    let cols = n * plane;
    let mut t = Tensor::zeros(n, c, h, w);
    for i in 0..n {
        for ch in 0..c {
            t.data[(i * c + ch) * plane..(i * c + ch + 1) * plane]
                .copy_from_slice(&m[ch * cols + i * plane..ch * cols + (i + 1) * plane]);
        }
    }
    t
}

pub struct Conv2d<T> {
    pub cin: usize,
    pub cout: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub weight: Param<T>,
    pub bias: Param<T>,
    geom: Option<ConvGeom>,
    cols: Vec<T>,
    batch: usize,
}

impl<T: Real> Conv2d<T> {
    pub fn new(
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let area = kernel.0 * kernel.1;
        Self {
            cin,
            cout,
            kernel,
            stride,
            weight: Param::glorot(cout * cin * area, cin * area, cout * area, rng),
            bias: Param::zeros(cout),
            geom: None,
            cols: Vec::new(),
            batch: 0,
        }
    }

    pub fn zero_weights(mut self) -> Self {
        self.weight.value.fill(T::zero());
        self
    }
}

impl<T: Real> Layer<T> for Conv2d<T> {
    fn forward(&mut self, x: &Tensor<T>, _ctx: &Ctx<T>) -> Tensor<T> {
        assert_eq!(x.c, self.cin, "conv input channels");
        let g = ConvGeom::same(self.cin, x.h, x.w, self.kernel, self.stride);
        let plane = g.out_plane();
        let cols = x.n * plane;
        let rows = g.col_rows();
        self.cols.resize(rows * cols, T::zero());
        for i in 0..x.n {
            g.im2col(x.sample(i), &mut self.cols, cols, i * plane);
        }
        let mut y = vec![T::zero(); self.cout * cols];
        for (co, row) in y.chunks_mut(cols).enumerate() {
            row.fill(self.bias.value[co]);
        }
        gemm(false, false, self.cout, cols, rows, &self.weight.value, &self.cols, T::one(), &mut y);
        self.geom = Some(g);
        self.batch = x.n;
        scatter_channels(&y, x.n, self.cout, g.ho, g.wo)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let g = self.geom.expect("conv backward before forward");
        let n = self.batch;
        let plane = g.out_plane();
        let cols = n * plane;
        let rows = g.col_rows();
        let dym = gather_channels(dy);
        for (co, row) in dym.chunks(cols).enumerate() {
            let s: T = row.iter().copied().sum();
            self.bias.grad[co] += s;
        }
        gemm(false, true, self.cout, rows, cols, &dym, &self.cols, T::one(), &mut self.weight.grad);
        let mut dcol = vec![T::zero(); rows * cols];
        gemm(true, false, rows, cols, self.cout, &self.weight.value, &dym, T::zero(), &mut dcol);
        let mut dx = Tensor::zeros(n, self.cin, g.h, g.w);
        for i in 0..n {
            g.col2im(&dcol, dx.sample_mut(i), cols, i * plane);
        }
        dx
    }

    fn visit(&mut self, path: &str, gate: bool, v: &mut dyn Visitor<T>) {
        v.param(&join(path, "weight"), &mut self.weight, gate);
        v.param(&join(path, "bias"), &mut self.bias, gate);
    }

    fn out_shape(&self, (_, h, w): (usize, usize, usize)) -> (usize, usize, usize) {
        (self.cout, h.div_ceil(self.stride.0), w.div_ceil(self.stride.1))
    }
}

/// Transposed convolution: the adjoint of a "same" convolution, so the
/// output is `input * stride` along each axis.
pub struct ConvTranspose2d<T> {
    pub cin: usize,
    pub cout: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    /// `cin x (cout * kh * kw)`
    pub weight: Param<T>,
    pub bias: Param<T>,
    geom: Option<ConvGeom>,
    input: Vec<T>,
    batch: usize,
}

impl<T: Real> ConvTranspose2d<T> {
    pub fn new(
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let area = kernel.0 * kernel.1;
        Self {
            cin,
            cout,
            kernel,
            stride,
            weight: Param::glorot(cin * cout * area, cin * area, cout * area, rng),
            bias: Param::zeros(cout),
            geom: None,
            input: Vec::new(),
            batch: 0,
        }
    }
}

impl<T: Real> Layer<T> for ConvTranspose2d<T> {
    fn forward(&mut self, x: &Tensor<T>, _ctx: &Ctx<T>) -> Tensor<T> {
        assert_eq!(x.c, self.cin, "transposed conv input channels");
        let (ho, wo) = (x.h * self.stride.0, x.w * self.stride.1);
        let g = ConvGeom::same(self.cout, ho, wo, self.kernel, self.stride);
        debug_assert_eq!((g.ho, g.wo), (x.h, x.w));
        let plane = x.plane();
        let cols = x.n * plane;
        let rows = g.col_rows();
        self.input = gather_channels(x);
        let mut col = vec![T::zero(); rows * cols];
        gemm(true, false, rows, cols, self.cin, &self.weight.value, &self.input, T::zero(), &mut col);
        let mut y = Tensor::zeros(x.n, self.cout, ho, wo);
        for i in 0..x.n {
            g.col2im(&col, y.sample_mut(i), cols, i * plane);
        }
        let out_plane = ho * wo;
        for i in 0..x.n {
            for co in 0..self.cout {
                let b = self.bias.value[co];
                for v in &mut y.data[(i * self.cout + co) * out_plane..(i * self.cout + co + 1) * out_plane] {
                    *v += b;
                }
            }
        }
        self.geom = Some(g);
        self.batch = x.n;
        y
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let g = self.geom.expect("transposed conv backward before forward");
        let n = self.batch;
        let plane = g.out_plane();
        let cols = n * plane;
        let rows = g.col_rows();
        let out_plane = dy.plane();
        for i in 0..n {
            for co in 0..self.cout {
                let s: T = dy.data[(i * self.cout + co) * out_plane..(i * self.cout + co + 1) * out_plane]
                    .iter()
                    .copied()
                    .sum();
                self.bias.grad[co] += s;
            }
        }
        let mut dcol = vec![T::zero(); rows * cols];
        for i in 0..n {
            g.im2col(dy.sample(i), &mut dcol, cols, i * plane);
        }
        gemm(false, true, self.cin, rows, cols, &self.input, &dcol, T::one(), &mut self.weight.grad);
        let mut dx = vec![T::zero(); self.cin * cols];
        gemm(false, false, self.cin, cols, rows, &self.weight.value, &dcol, T::zero(), &mut dx);
        scatter_channels(&dx, n, self.cin, g.ho, g.wo)
    }

    fn visit(&mut self, path: &str, gate: bool, v: &mut dyn Visitor<T>) {
        v.param(&join(path, "weight"), &mut self.weight, gate);
        v.param(&join(path, "bias"), &mut self.bias, gate);
    }

    fn out_shape(&self, (_, h, w): (usize, usize, usize)) -> (usize, usize, usize) {
        (self.cout, h * self.stride.0, w * self.stride.1)
    }
}

/// Per-channel batch normalization with running statistics.
pub struct BatchNorm<T> {
    pub channels: usize,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    trained: bool,
}

impl<T: Real> BatchNorm<T> {
    pub const MOMENTUM: f64 = 0.99;
    pub const EPS: f64 = 1e-3;

    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: Param::filled(channels, T::one()),
            beta: Param::zeros(channels),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: Self::MOMENTUM,
            eps: Self::EPS,
            xhat: Vec::new(),
            inv_std: Vec::new(),
            trained: false,
        }
    }
}

impl<T: Real> Layer<T> for BatchNorm<T> {
    fn forward(&mut self, x: &Tensor<T>, ctx: &Ctx<T>) -> Tensor<T> {
        assert_eq!(x.c, self.channels, "batch norm channels");
        let plane = x.plane();
        let count = T::from_f64((x.n * plane) as f64);
        let eps = T::from_f64(self.eps);
        let mut y = x.zeros_like();
        self.xhat.resize(x.data.len(), T::zero());
        self.inv_std.resize(self.channels, T::zero());
        self.trained = ctx.train;
        let mom = T::from_f64(self.momentum);
        for c in 0..self.channels {
            let chan = |i: usize| (i * x.c + c) * plane..(i * x.c + c + 1) * plane;
            let (mean, var) = if ctx.train {
                let mut sum = T::zero();
                for i in 0..x.n {
                    sum += x.data[chan(i)].iter().copied().sum::<T>();
                }
                let mean = sum / count;
                let mut sq = T::zero();
                for i in 0..x.n {
                    sq += x.data[chan(i)].iter().map(|&v| (v - mean) * (v - mean)).sum::<T>();
                }
                let var = sq / count;
                self.running_mean[c] = mom * self.running_mean[c] + (T::one() - mom) * mean;
                self.running_var[c] = mom * self.running_var[c] + (T::one() - mom) * var;
                (mean, var)
            } else {
                (self.running_mean[c], self.running_var[c])
            };
            let inv = T::one() / (var + eps).sqrt();
            self.inv_std[c] = inv;
            let (g, b) = (self.gamma.value[c], self.beta.value[c]);
            for i in 0..x.n {
                for j in chan(i) {
                    let xh = (x.data[j] - mean) * inv;
                    self.xhat[j] = xh;
                    y.data[j] = g * xh + b;
                }
            }
        }
        y
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let plane = dy.plane();
        let count = T::from_f64((dy.n * plane) as f64);
        let mut dx = dy.zeros_like();
        for c in 0..self.channels {
            let chan = |i: usize| (i * dy.c + c) * plane..(i * dy.c + c + 1) * plane;
            let (mut sum_dy, mut sum_dy_xh) = (T::zero(), T::zero());
            for i in 0..dy.n {
                for j in chan(i) {
                    sum_dy += dy.data[j];
                    sum_dy_xh += dy.data[j] * self.xhat[j];
                }
            }
            self.gamma.grad[c] += sum_dy_xh;
            self.beta.grad[c] += sum_dy;
            let g = self.gamma.value[c];
            let inv = self.inv_std[c];
            for i in 0..dy.n {
                for j in chan(i) {
                    dx.data[j] = if self.trained {
                        g * inv * (dy.data[j] - sum_dy / count - self.xhat[j] * sum_dy_xh / count)
                    } else {
                        g * inv * dy.data[j]
                    };
                }
            }
        }
        dx
    }

    fn visit(&mut self, path: &str, gate: bool, v: &mut dyn Visitor<T>) {
        v.param(&join(path, "gamma"), &mut self.gamma, gate);
        v.param(&join(path, "beta"), &mut self.beta, gate);
        v.buffer(&join(path, "running_mean"), &mut self.running_mean, gate);
        v.buffer(&join(path, "running_var"), &mut self.running_var, gate);
    }

    fn out_shape(&self, s: (usize, usize, usize)) -> (usize, usize, usize) {
        s
    }
}

/// Leaky rectifier with one learnable slope per channel.
pub struct PRelu<T> {
    pub alpha: Param<T>,
    input: Tensor<T>,
    pinned: Option<Vec<bool>>,
}

impl<T: Real> PRelu<T> {
    pub const INIT_SLOPE: f64 = 0.25;

    pub fn new(channels: usize) -> Self {
        Self {
            alpha: Param::filled(channels, T::from_f64(Self::INIT_SLOPE)),
            input: Tensor::zeros(0, 0, 0, 0),
            pinned: None,
        }
    }

    fn negative(&self, x: &[T]) -> Vec<bool> {
        match &self.pinned {
            Some(m) if m.len() == x.len() => m.clone(),
            _ => x.iter().map(|&v| v < T::zero()).collect(),
        }
    }
}

impl<T: Real> Layer<T> for PRelu<T> {
    fn forward(&mut self, x: &Tensor<T>, _ctx: &Ctx<T>) -> Tensor<T> {
        let plane = x.plane();
        let mut y = x.clone();
        for (idx, (v, n)) in y.data.iter_mut().zip(self.negative(&x.data)).enumerate() {
            if n {
                *v *= self.alpha.value[(idx / plane) % x.c];
            }
        }
        self.input = x.clone();
        y
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let plane = dy.plane();
        let mut dx = dy.clone();
        for (idx, (d, n)) in dx.data.iter_mut().zip(self.negative(&self.input.data)).enumerate() {
            let x = self.input.data[idx];
            if n {
                let c = (idx / plane) % dy.c;
                self.alpha.grad[c] += *d * x;
                *d *= self.alpha.value[c];
            }
        }
        dx
    }

    fn visit(&mut self, path: &str, gate: bool, v: &mut dyn Visitor<T>) {
        v.param(&join(path, "alpha"), &mut self.alpha, gate);
    }

    fn out_shape(&self, s: (usize, usize, usize)) -> (usize, usize, usize) {
        s
    }

    fn pin_rectifiers(&mut self, on: bool) {
        self.pinned = None;
        if on {
            self.pinned = Some(self.negative(&self.input.data));
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ActKind {
    LeakyRelu(f64),
    Relu,
    Sigmoid,
    Tanh,
}

pub struct Activation<T> {
    pub kind: ActKind,
    cache: Tensor<T>,
    /// negative-side flags when pinned
    pinned: Option<Vec<bool>>,
}

impl<T: Real> Activation<T> {
    pub fn new(kind: ActKind) -> Self {
        Self {
            kind,
            cache: Tensor::zeros(0, 0, 0, 0),
            pinned: None,
        }
    }

    fn negative(&self, x: &[T]) -> Vec<bool> {
        match &self.pinned {
            Some(m) if m.len() == x.len() => m.clone(),
            _ => match self.kind {
                ActKind::Relu => x.iter().map(|&v| v <= T::zero()).collect(),
                _ => x.iter().map(|&v| v < T::zero()).collect(),
            },
        }
    }
}

pub fn sigmoid<T: Real>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

impl<T: Real> Layer<T> for Activation<T> {
    fn forward(&mut self, x: &Tensor<T>, _ctx: &Ctx<T>) -> Tensor<T> {
        let y = match self.kind {
            ActKind::LeakyRelu(s) => {
                let s = T::from_f64(s);
                let neg = self.negative(&x.data);
                let mut y = x.clone();
                for (v, n) in y.data.iter_mut().zip(neg) {
                    if n {
                        *v *= s;
                    }
                }
                y
            }
            ActKind::Relu => {
                let neg = self.negative(&x.data);
                let mut y = x.clone();
                for (v, n) in y.data.iter_mut().zip(neg) {
                    if n {
                        *v = T::zero();
                    }
                }
                y
            }
            ActKind::Sigmoid => x.map(sigmoid),
            ActKind::Tanh => x.map(|v| v.tanh()),
        };
        // rectifiers need the input, the squashing functions their output
        self.cache = match self.kind {
            ActKind::LeakyRelu(_) | ActKind::Relu => x.clone(),
            ActKind::Sigmoid | ActKind::Tanh => y.clone(),
        };
        y
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let mut dx = dy.clone();
        let c = &self.cache.data;
        match self.kind {
            ActKind::LeakyRelu(s) => {
                let s = T::from_f64(s);
                for (d, n) in dx.data.iter_mut().zip(self.negative(c)) {
                    if n {
                        *d *= s;
                    }
                }
            }
            ActKind::Relu => {
                for (d, n) in dx.data.iter_mut().zip(self.negative(c)) {
                    if n {
                        *d = T::zero();
                    }
                }
            }
            ActKind::Sigmoid => {
                for (d, &y) in dx.data.iter_mut().zip(c) {
                    *d *= y * (T::one() - y);
                }
            }
            ActKind::Tanh => {
                for (d, &y) in dx.data.iter_mut().zip(c) {
                    *d *= T::one() - y * y;
                }
            }
        }
        dx
    }

    fn visit(&mut self, _path: &str, _gate: bool, _v: &mut dyn Visitor<T>) {}

    fn out_shape(&self, s: (usize, usize, usize)) -> (usize, usize, usize) {
        s
    }

    fn pin_rectifiers(&mut self, on: bool) {
        self.pinned = None;
        if on && matches!(self.kind, ActKind::LeakyRelu(_) | ActKind::Relu) {
            self.pinned = Some(self.negative(&self.cache.data));
        }
    }
}

/// Fully connected layer; flattens its input.
pub struct Dense<T> {
    pub nin: usize,
    pub nout: usize,
    /// `nout x nin`
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Tensor<T>,
}

impl<T: Real> Dense<T> {
    pub fn new(nin: usize, nout: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            nin,
            nout,
            weight: Param::glorot(nin * nout, nin, nout, rng),
            bias: Param::zeros(nout),
            input: Tensor::zeros(0, 0, 0, 0),
        }
    }
}

impl<T: Real> Layer<T> for Dense<T> {
    fn forward(&mut self, x: &Tensor<T>, _ctx: &Ctx<T>) -> Tensor<T> {
        assert_eq!(x.per_sample(), self.nin, "dense input width");
        let mut y = Vec::with_capacity(x.n * self.nout);
        for _ in 0..x.n {
            y.extend_from_slice(&self.bias.value);
        }
        gemm(false, true, x.n, self.nout, self.nin, &x.data, &self.weight.value, T::one(), &mut y);
        self.input = x.clone();
        Tensor::matrix(x.n, self.nout, y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let n = dy.n;
        for i in 0..n {
            for (g, &d) in self.bias.grad.iter_mut().zip(dy.sample(i)) {
                *g += d;
            }
        }
        gemm(true, false, self.nout, self.nin, n, &dy.data, &self.input.data, T::one(), &mut self.weight.grad);
        let mut dx = self.input.zeros_like();
        gemm(false, false, n, self.nin, self.nout, &dy.data, &self.weight.value, T::zero(), &mut dx.data);
        dx
    }

    fn visit(&mut self, path: &str, gate: bool, v: &mut dyn Visitor<T>) {
        v.param(&join(path, "weight"), &mut self.weight, gate);
        v.param(&join(path, "bias"), &mut self.bias, gate);
    }

    fn out_shape(&self, _s: (usize, usize, usize)) -> (usize, usize, usize) {
        (self.nout, 1, 1)
    }
}

/// Reinterprets each sample as `(c, h, w)`.
pub struct Reshape {
    pub shape: (usize, usize, usize),
    input: (usize, usize, usize),
}

impl Reshape {
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        Self {
            shape: (c, h, w),
            input: (0, 0, 0),
        }
    }
}

impl<T: Real> Layer<T> for Reshape {
    fn forward(&mut self, x: &Tensor<T>, _ctx: &Ctx<T>) -> Tensor<T> {
        self.input = (x.c, x.h, x.w);
        let (c, h, w) = self.shape;
        x.clone().reshaped(c, h, w)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let (c, h, w) = self.input;
        dy.clone().reshaped(c, h, w)
    }

    fn visit(&mut self, _path: &str, _gate: bool, _v: &mut dyn Visitor<T>) {}

    fn out_shape(&self, _s: (usize, usize, usize)) -> (usize, usize, usize) {
        self.shape
    }
}

use rand_chacha::ChaCha8Rng;

use super::layers::{join, sigmoid, ActKind, Activation, Ctx, Dense, Layer, Visitor};
use super::real::Real;
use super::tensor::Tensor;

/// Bias that saturates the output sigmoid to exactly 1 in single precision.
const SATURATING_BIAS: f64 = 100.0;

/// SNR attention gate: pools features per channel, appends the SNR, and
/// predicts one scale in (0, 1) per channel through two dense layers.
pub struct AfModule<T> {
    pub channels: usize,
    pub hidden: usize,
    pub fc1: Dense<T>,
    relu: Activation<T>,
    pub fc2: Dense<T>,
    input: Tensor<T>,
    scales: Vec<T>,
}

impl<T: Real> AfModule<T> {
    pub fn new(channels: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            channels,
            hidden,
            fc1: Dense::new(channels + 1, hidden, rng),
            relu: Activation::new(ActKind::Relu),
            fc2: Dense::new(hidden, channels, rng),
            input: Tensor::zeros(0, 0, 0, 0),
            scales: Vec::new(),
        }
    }

    /// Per-channel scales from the last forward pass, `n x channels`.
    pub fn scales(&self) -> &[T] {
        &self.scales
    }

    pub fn param_count(&self) -> usize {
        (self.channels + 1) * self.hidden + self.hidden + self.hidden * self.channels + self.channels
    }
}

impl<T: Real> Layer<T> for AfModule<T> {
    fn forward(&mut self, x: &Tensor<T>, ctx: &Ctx<T>) -> Tensor<T> {
        assert_eq!(x.c, self.channels, "attention gate channels");
        assert_eq!(ctx.snr_db.len(), x.n, "one SNR per sample");
        let plane = x.plane();
        let inv_plane = T::from_f64(1.0 / plane as f64);
        let mut z = Vec::with_capacity(x.n * (self.channels + 1));
        for i in 0..x.n {
            for c in 0..self.channels {
                let s: T = x.data[(i * x.c + c) * plane..(i * x.c + c + 1) * plane]
                    .iter()
                    .copied()
                    .sum();
                z.push(s * inv_plane);
            }
            z.push(ctx.snr_db[i]);
        }
        let z = Tensor::matrix(x.n, self.channels + 1, z);
        let h = self.relu.forward(&self.fc1.forward(&z, ctx), ctx);
        let logits = self.fc2.forward(&h, ctx);
        self.scales = logits.data.iter().map(|&v| sigmoid(v)).collect();
        let mut y = x.clone();
        for (chunk, &s) in y.data.chunks_mut(plane).zip(&self.scales) {
            for v in chunk {
                *v *= s;
            }
        }
        self.input = x.clone();
        y
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let plane = dy.plane();
        let n = dy.n;
        let mut dlogit = vec![T::zero(); n * self.channels];
        for (k, d) in dlogit.iter_mut().enumerate() {
            let ds: T = dy.data[k * plane..(k + 1) * plane]
                .iter()
                .zip(&self.input.data[k * plane..(k + 1) * plane])
                .map(|(&a, &b)| a * b)
                .sum();
            let s = self.scales[k];
            *d = ds * s * (T::one() - s);
        }
        let dlogit = Tensor::matrix(n, self.channels, dlogit);
        let dz = self.fc1.backward(&self.relu.backward(&self.fc2.backward(&dlogit)));
        let inv_plane = T::from_f64(1.0 / plane as f64);
        let mut dx = dy.clone();
        for (k, chunk) in dx.data.chunks_mut(plane).enumerate() {
            let (i, c) = (k / self.channels, k % self.channels);
            let s = self.scales[k];
            let shift = dz.data[i * (self.channels + 1) + c] * inv_plane;
            for v in chunk {
                *v = *v * s + shift;
            }
        }
        dx
    }

    fn visit(&mut self, path: &str, _gate: bool, v: &mut dyn Visitor<T>) {
        self.fc1.visit(&join(path, "fc1"), true, v);
        self.fc2.visit(&join(path, "fc2"), true, v);
    }

    fn out_shape(&self, s: (usize, usize, usize)) -> (usize, usize, usize) {
        s
    }

    fn pin_rectifiers(&mut self, on: bool) {
        self.relu.pin_rectifiers(on);
    }

    fn force_identity_gates(&mut self) {
        self.fc2.weight.value.fill(T::zero());
        self.fc2.bias.value.fill(T::from_f64(SATURATING_BIAS));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn batch(seed: u64) -> Tensor<f64> {
        let mut r = rng::stream(seed, &[]);
        Tensor::from_vec(3, 4, 2, 5, (0..120).map(|_| r.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn zero_weights_halve_features() {
        let mut af = AfModule::<f64>::new(4, 4, &mut rng::stream(1, &[]));
        for p in [&mut af.fc1.weight, &mut af.fc1.bias, &mut af.fc2.weight, &mut af.fc2.bias] {
            p.value.fill(0.0);
        }
        let x = batch(2);
        let y = af.forward(&x, &Ctx { train: true, snr_db: &[0.0, 5.0, -3.0] });
        for (a, b) in y.data.iter().zip(&x.data) {
            assert!((a - 0.5 * b).abs() < 1e-15);
        }
    }

    #[test]
    fn scale_is_constant_per_channel() {
        let mut af = AfModule::<f64>::new(4, 4, &mut rng::stream(3, &[]));
        let x = batch(4);
        let y = af.forward(&x, &Ctx { train: true, snr_db: &[-8.0, 0.0, 8.0] });
        for k in 0..12 {
            let ratios: Vec<f64> = (0..10).map(|p| y.data[k * 10 + p] / x.data[k * 10 + p]).collect();
            for r in &ratios {
                assert!((r - ratios[0]).abs() < 1e-12);
                assert!(*r > 0.0 && *r < 1.0);
            }
        }
    }

    #[test]
    fn zero_features_give_zero_output() {
        let mut af = AfModule::<f64>::new(4, 4, &mut rng::stream(5, &[]));
        let x = Tensor::zeros(3, 4, 2, 5);
        let y = af.forward(&x, &Ctx { train: true, snr_db: &[20.0, -20.0, 0.0] });
        assert!(y.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_gate_passes_features_through_in_f32() {
        let mut af = AfModule::<f32>::new(4, 4, &mut rng::stream(6, &[]));
        af.force_identity_gates();
        let x: Tensor<f32> = batch(7).cast();
        let y = af.forward(&x, &Ctx { train: false, snr_db: &[-30.0, 0.0, 30.0] });
        assert_eq!(y, x);
    }
}

//! Minimal neural-network toolkit: NCHW tensors, layers with explicit
//! backward passes, and parameter traversal.

mod af;
mod containers;
mod layers;
mod real;
mod tensor;

pub use af::AfModule;
pub use containers::{Branches, Residual, Sequential};
pub use layers::{
    sigmoid, ActKind, Activation, BatchNorm, Conv2d, ConvGeom, ConvTranspose2d, Ctx, Dense, Layer,
    PRelu, Param, Reshape, Visitor,
};
pub use real::{gemm, Real};
pub use tensor::Tensor;

/// Visitor from a closure over `(name, param, gate)`; buffers are skipped.
pub struct ParamFn<F>(pub F);

impl<T, F: FnMut(&str, &mut Param<T>, bool)> Visitor<T> for ParamFn<F> {
    fn param(&mut self, name: &str, p: &mut Param<T>, gate: bool) {
        (self.0)(name, p, gate)
    }
    fn buffer(&mut self, _name: &str, _b: &mut [T], _gate: bool) {}
}

/// Counts trainable scalars, split into `(main, gate)`.
pub fn count_params<T: Real>(layer: &mut dyn Layer<T>) -> (usize, usize) {
    let mut counts = (0, 0);
    layer.visit(
        "",
        false,
        &mut ParamFn(|_: &str, p: &mut Param<T>, gate: bool| {
            if gate {
                counts.1 += p.len();
            } else {
                counts.0 += p.len();
            }
        }),
    );
    counts
}

pub fn zero_grads<T: Real>(layer: &mut dyn Layer<T>) {
    layer.visit("", false, &mut ParamFn(|_: &str, p: &mut Param<T>, _| p.grad.fill(T::zero())));
}

/// Parameters and buffers of one gate class, in traversal order.
struct Flatten<'a> {
    gate: bool,
    out: &'a mut Vec<f32>,
}

impl<T: Real> Visitor<T> for Flatten<'_> {
    fn param(&mut self, _name: &str, p: &mut Param<T>, gate: bool) {
        if gate == self.gate {
            self.out.extend(p.value.iter().map(|v| v.as_f64() as f32));
        }
    }
    fn buffer(&mut self, _name: &str, b: &mut [T], gate: bool) {
        if gate == self.gate {
            self.out.extend(b.iter().map(|v| v.as_f64() as f32));
        }
    }
}

/// Serializes the main (`gate = false`) or attention (`gate = true`) state.
pub fn export_state<T: Real>(layer: &mut dyn Layer<T>, gate: bool) -> Vec<f32> {
    let mut out = Vec::new();
    layer.visit("", false, &mut Flatten { gate, out: &mut out });
    out
}

struct Load<'a> {
    gate: bool,
    src: &'a [f32],
    pos: usize,
    short: bool,
}

impl Load<'_> {
    fn take<T: Real>(&mut self, dst: &mut [T]) {
        if self.pos + dst.len() > self.src.len() {
            self.short = true;
            return;
        }
        for (d, &s) in dst.iter_mut().zip(&self.src[self.pos..]) {
            *d = T::from_f64(s as f64);
        }
        self.pos += dst.len();
    }
}

impl<T: Real> Visitor<T> for Load<'_> {
    fn param(&mut self, _name: &str, p: &mut Param<T>, gate: bool) {
        if gate == self.gate {
            self.take(&mut p.value);
        }
    }
    fn buffer(&mut self, _name: &str, b: &mut [T], gate: bool) {
        if gate == self.gate {
            self.take(b);
        }
    }
}

/// Inverse of [`export_state`]. Returns the expected length on mismatch.
pub fn import_state<T: Real>(layer: &mut dyn Layer<T>, gate: bool, src: &[f32]) -> Result<(), usize> {
    let mut load = Load {
        gate,
        src,
        pos: 0,
        short: false,
    };
    layer.visit("", false, &mut load);
    if load.short || load.pos != src.len() {
        return Err(export_state(layer, gate).len());
    }
    Ok(())
}

#[cfg(test)]
pub(crate) mod gradcheck {
    use super::*;

    /// Relative error `|a - b| / max(|a|, |b|, floor)`.
    pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(floor)
    }

    /// Compares analytic gradients of `L = <net(x), r>` against central
    /// differences for every parameter and input entry; returns the worst
    /// relative error.
    pub fn check(net: &mut dyn Layer<f64>, x: &Tensor<f64>, snr: &[f64], r: &[f64], h: f64) -> f64 {
        let ctx = Ctx { train: true, snr_db: snr };
        let loss = |net: &mut dyn Layer<f64>, x: &Tensor<f64>| -> f64 {
            net.forward(x, &ctx).data.iter().zip(r).map(|(a, b)| a * b).sum()
        };
        zero_grads(net);
        let y = net.forward(x, &ctx);
        let dx = net.backward(&Tensor::from_vec(y.n, y.c, y.h, y.w, r.to_vec()));
        let mut grads = Vec::new();
        net.visit("", false, &mut ParamFn(|_: &str, p: &mut Param<f64>, _| grads.push(p.grad.clone())));
        let mut worst: f64 = 0.0;
        let mut idx = 0;
        loop {
            let mut value = None;
            let mut k = 0;
            net.visit("", false, &mut ParamFn(|_: &str, p: &mut Param<f64>, _| {
                if k == idx {
                    value = Some(p.value.clone());
                }
                k += 1;
            }));
            let Some(vals) = value else { break };
            for j in 0..vals.len() {
                let set = |delta: f64, net: &mut dyn Layer<f64>| {
                    let mut k = 0;
                    net.visit("", false, &mut ParamFn(|_: &str, p: &mut Param<f64>, _| {
                        if k == idx {
                            p.value[j] = vals[j] + delta;
                        }
                        k += 1;
                    }));
                };
                set(h, net);
                let lp = loss(net, x);
                set(-h, net);
                let lm = loss(net, x);
                set(0.0, net);
                let fd = (lp - lm) / (2.0 * h);
                worst = worst.max(rel_err(grads[idx][j], fd, 1e-3));
            }
            idx += 1;
        }
        for j in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[j] += h;
            let lp = loss(net, &xp);
            xp.data[j] -= 2.0 * h;
            let lm = loss(net, &xp);
            worst = worst.max(rel_err(dx.data[j], (lp - lm) / (2.0 * h), 1e-3));
        }
        worst
    }
}

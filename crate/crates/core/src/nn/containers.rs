use super::layers::{join, Ctx, Layer, Visitor};
use super::real::Real;
use super::tensor::Tensor;

/// Named layers applied in order.
pub struct Sequential<T> {
    layers: Vec<(String, Box<dyn Layer<T>>)>,
}

impl<T: Real> Default for Sequential<T> {
    fn default() -> Self {
        Self { layers: Vec::new() }
    }
}

impl<T: Real> Sequential<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, layer: impl Layer<T> + 'static) {
        self.layers.push((name.into(), Box::new(layer)));
    }

    pub fn with(mut self, name: impl Into<String>, layer: impl Layer<T> + 'static) -> Self {
        self.push(name, layer);
        self
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.layers.iter().map(|(n, _)| n.as_str())
    }
}

impl<T: Real> Layer<T> for Sequential<T> {
    fn forward(&mut self, x: &Tensor<T>, ctx: &Ctx<T>) -> Tensor<T> {
        let mut cur = x.clone();
        for (_, l) in &mut self.layers {
            cur = l.forward(&cur, ctx);
        }
        cur
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let mut cur = dy.clone();
        for (_, l) in self.layers.iter_mut().rev() {
            cur = l.backward(&cur);
        }
        cur
    }

    fn visit(&mut self, path: &str, gate: bool, v: &mut dyn Visitor<T>) {
        for (name, l) in &mut self.layers {
            l.visit(&join(path, name), gate, v);
        }
    }

    fn out_shape(&self, input: (usize, usize, usize)) -> (usize, usize, usize) {
        self.layers.iter().fold(input, |s, (_, l)| l.out_shape(s))
    }

    fn force_identity_gates(&mut self) {
        for (_, l) in &mut self.layers {
            l.force_identity_gates();
        }
    }

    fn pin_rectifiers(&mut self, on: bool) {
        for (_, l) in &mut self.layers {
            l.pin_rectifiers(on);
        }
    }
}

/// `y = x + f(x)`.
pub struct Residual<T> {
    pub body: Sequential<T>,
}

impl<T: Real> Residual<T> {
    pub fn new(body: Sequential<T>) -> Self {
        Self { body }
    }
}

impl<T: Real> Layer<T> for Residual<T> {
    fn forward(&mut self, x: &Tensor<T>, ctx: &Ctx<T>) -> Tensor<T> {
        let mut y = self.body.forward(x, ctx);
        assert_eq!(y.shape(), x.shape(), "residual branch changes shape");
        for (a, &b) in y.data.iter_mut().zip(&x.data) {
            *a += b;
        }
        y
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let mut dx = self.body.backward(dy);
        for (a, &b) in dx.data.iter_mut().zip(&dy.data) {
            *a += b;
        }
        dx
    }

    fn visit(&mut self, path: &str, gate: bool, v: &mut dyn Visitor<T>) {
        self.body.visit(path, gate, v);
    }

    fn out_shape(&self, input: (usize, usize, usize)) -> (usize, usize, usize) {
        input
    }

    fn force_identity_gates(&mut self) {
        self.body.force_identity_gates();
    }

    fn pin_rectifiers(&mut self, on: bool) {
        self.body.pin_rectifiers(on);
    }
}

/// Parallel branches on the same input, concatenated along channels.
pub struct Branches<T> {
    branches: Vec<(String, Sequential<T>)>,
    widths: Vec<usize>,
}

impl<T: Real> Branches<T> {
    pub fn new(branches: Vec<(String, Sequential<T>)>) -> Self {
        Self {
            branches,
            widths: Vec::new(),
        }
    }
}

impl<T: Real> Layer<T> for Branches<T> {
    fn forward(&mut self, x: &Tensor<T>, ctx: &Ctx<T>) -> Tensor<T> {
        let outs: Vec<Tensor<T>> = self.branches.iter_mut().map(|(_, b)| b.forward(x, ctx)).collect();
        let (h, w) = (outs[0].h, outs[0].w);
        assert!(outs.iter().all(|o| o.h == h && o.w == w), "branch spatial shapes differ");
        self.widths = outs.iter().map(|o| o.c).collect();
        let c: usize = self.widths.iter().sum();
        let mut y = Tensor::zeros(x.n, c, h, w);
        for i in 0..x.n {
            let mut off = 0;
            for o in &outs {
                let s = o.sample(i);
                y.sample_mut(i)[off..off + s.len()].copy_from_slice(s);
                off += s.len();
            }
        }
        y
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let plane = dy.plane();
        let mut dx: Option<Tensor<T>> = None;
        let mut c0 = 0;
        for ((_, b), &c) in self.branches.iter_mut().zip(&self.widths) {
            let mut part = Tensor::zeros(dy.n, c, dy.h, dy.w);
            for i in 0..dy.n {
                part.sample_mut(i)
                    .copy_from_slice(&dy.sample(i)[c0 * plane..(c0 + c) * plane]);
            }
            c0 += c;
            let d = b.backward(&part);
            match dx.as_mut() {
                None => dx = Some(d),
                Some(acc) => {
                    for (a, &v) in acc.data.iter_mut().zip(&d.data) {
                        *a += v;
                    }
                }
            }
        }
        dx.expect("at least one branch")
    }

    fn visit(&mut self, path: &str, gate: bool, v: &mut dyn Visitor<T>) {
        for (name, b) in &mut self.branches {
            b.visit(&join(path, name), gate, v);
        }
    }

    fn out_shape(&self, input: (usize, usize, usize)) -> (usize, usize, usize) {
        let shapes: Vec<_> = self.branches.iter().map(|(_, b)| b.out_shape(input)).collect();
        (shapes.iter().map(|s| s.0).sum(), shapes[0].1, shapes[0].2)
    }

    fn force_identity_gates(&mut self) {
        for (_, b) in &mut self.branches {
            b.force_identity_gates();
        }
    }

    fn pin_rectifiers(&mut self, on: bool) {
        for (_, b) in &mut self.branches {
            b.pin_rectifiers(on);
        }
    }
}

//! Minimal layer library with hand-written backward passes.
//!
//! Everything operates on one `(C, H, W)` sample at a time; batching happens
//! in the training loop, which reduces per-sample gradients in a fixed order.

mod conv;
mod optim;

pub use conv::{
    concat_channels, conv_out_len, conv_transpose_out_len, split_channels, Conv2d, ConvCache,
    ConvTranspose2d,
};
pub use optim::{Adam, AdamState};

use ndarray::{Array3, ArrayView3, Zip};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("expected {expected} input channels, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("input {height}x{width} too small for kernel {kernel}")]
    SpatialTooSmall { height: usize, width: usize, kernel: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// Anything owning trainable arrays. Visiting order is stable and defines
/// the flat parameter layout used by optimizers and checkpoints.
pub trait Parameters {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64]));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, d| n += d.len());
        n
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.visit(&mut |_, _, d| out.extend_from_slice(d));
        out
    }

    fn load_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        self.visit_mut(&mut |_, d| {
            d.copy_from_slice(&flat[offset..offset + d.len()]);
            offset += d.len();
        });
        assert_eq!(offset, flat.len(), "flat parameter length mismatch");
    }

    fn zero_(&mut self) {
        self.visit_mut(&mut |_, d| d.fill(0.0));
    }

    /// Clone with every parameter set to zero, used as a gradient accumulator.
    fn zeros_like(&self) -> Self
    where
        Self: Clone,
    {
        let mut z = self.clone();
        z.zero_();
        z
    }
}

/// `x + ReLU(Conv(ReLU(Conv(x))))` with two same-width 3x3 convolutions.
#[derive(Debug, Clone, PartialEq)]
pub struct ResnetBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

#[derive(Debug, Clone)]
pub struct ResnetCache {
    c1: ConvCache,
    a1: Array3<f64>,
    c2: ConvCache,
    a2: Array3<f64>,
}

impl ResnetBlock {
    pub fn forward(&self, x: ArrayView3<f64>) -> Result<(Array3<f64>, ResnetCache), NnError> {
        let (z1, c1) = self.conv1.forward(x)?;
        let a1 = relu(z1);
        let (z2, c2) = self.conv2.forward(a1.view())?;
        let a2 = relu(z2);
        if a2.dim() != x.dim() {
            return Err(NnError::Shape(format!("resnet block maps {:?} to {:?}", x.dim(), a2.dim())));
        }
        let y = &x + &a2;
        Ok((y, ResnetCache { c1, a1, c2, a2 }))
    }

    pub fn backward(
        &self,
        cache: &ResnetCache,
        dy: ArrayView3<f64>,
        grad: Option<&mut ResnetBlock>,
    ) -> Array3<f64> {
        let dz2 = relu_backward(&cache.a2, dy);
        let (g1, g2) = match grad {
            Some(g) => (Some(&mut g.conv1), Some(&mut g.conv2)),
            None => (None, None),
        };
        let da1 = self.conv2.backward(&cache.c2, dz2.view(), g2);
        let dz1 = relu_backward(&cache.a1, da1.view());
        let dx = self.conv1.backward(&cache.c1, dz1.view(), g1);
        &dx + &dy
    }
}

pub fn relu(mut z: Array3<f64>) -> Array3<f64> {
    z.mapv_inplace(|v| v.max(0.0));
    z
}

/// Gradient of ReLU given its output.
pub fn relu_backward(out: &Array3<f64>, dy: ArrayView3<f64>) -> Array3<f64> {
    let mut dx = dy.to_owned();
    Zip::from(&mut dx).and(out).for_each(|d, &o| {
        if o <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// One step of a sequential stack.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(Conv2d),
    ConvTranspose(ConvTranspose2d),
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Resnet(ResnetBlock),
}

#[derive(Debug, Clone)]
pub enum LayerCache {
    Conv(ConvCache),
    ConvTranspose(ConvCache),
    Relu(Array3<f64>),
    LeakyRelu(Array3<f64>),
    Sigmoid(Array3<f64>),
    Resnet(Box<ResnetCache>),
}

impl Layer {
    pub fn forward(&self, x: ArrayView3<f64>) -> Result<(Array3<f64>, LayerCache), NnError> {
        Ok(match self {
            Layer::Conv(c) => {
                let (y, cache) = c.forward(x)?;
                (y, LayerCache::Conv(cache))
            }
            Layer::ConvTranspose(c) => {
                let (y, cache) = c.forward(x)?;
                (y, LayerCache::ConvTranspose(cache))
            }
            Layer::Relu => {
                let y = relu(x.to_owned());
                (y.clone(), LayerCache::Relu(y))
            }
            Layer::LeakyRelu(slope) => {
                let y = x.mapv(|v| if v > 0.0 { v } else { slope * v });
                (y, LayerCache::LeakyRelu(x.to_owned()))
            }
            Layer::Sigmoid => {
                let y = x.mapv(sigmoid);
                (y.clone(), LayerCache::Sigmoid(y))
            }
            Layer::Resnet(block) => {
                let (y, cache) = block.forward(x)?;
                (y, LayerCache::Resnet(Box::new(cache)))
            }
        })
    }

    pub fn backward(
        &self,
        cache: &LayerCache,
        dy: ArrayView3<f64>,
        grad: Option<&mut Layer>,
    ) -> Array3<f64> {
        match (self, cache) {
            (Layer::Conv(c), LayerCache::Conv(cache)) => {
                let g = match grad {
                    Some(Layer::Conv(g)) => Some(g),
                    _ => None,
                };
                c.backward(cache, dy, g)
            }
            (Layer::ConvTranspose(c), LayerCache::ConvTranspose(cache)) => {
                let g = match grad {
                    Some(Layer::ConvTranspose(g)) => Some(g),
                    _ => None,
                };
                c.backward(cache, dy, g)
            }
            (Layer::Relu, LayerCache::Relu(out)) => relu_backward(out, dy),
            (Layer::LeakyRelu(slope), LayerCache::LeakyRelu(input)) => {
                let mut dx = dy.to_owned();
                Zip::from(&mut dx).and(input).for_each(|d, &v| {
                    if v <= 0.0 {
                        *d *= slope;
                    }
                });
                dx
            }
            (Layer::Sigmoid, LayerCache::Sigmoid(out)) => {
                let mut dx = dy.to_owned();
                Zip::from(&mut dx).and(out).for_each(|d, &s| *d *= s * (1.0 - s));
                dx
            }
            (Layer::Resnet(b), LayerCache::Resnet(cache)) => {
                let g = match grad {
                    Some(Layer::Resnet(g)) => Some(g),
                    _ => None,
                };
                b.backward(cache, dy, g)
            }
            _ => panic!("layer/cache kind mismatch"),
        }
    }

    pub fn output_shape(&self, shape: (usize, usize, usize)) -> Option<(usize, usize, usize)> {
        let (c, h, w) = shape;
        match self {
            Layer::Conv(conv) => (c == conv.in_channels).then(|| conv.output_shape(h, w)).flatten(),
            Layer::ConvTranspose(conv) => {
                (c == conv.in_channels).then(|| conv.output_shape(h, w)).flatten()
            }
            Layer::Resnet(b) => (c == b.conv1.in_channels && b.conv2.out_channels == c)
                .then_some(shape),
            Layer::Relu | Layer::LeakyRelu(_) | Layer::Sigmoid => Some(shape),
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        match self {
            Layer::Conv(c) => c.visit(prefix, f),
            Layer::ConvTranspose(c) => c.visit(prefix, f),
            Layer::Resnet(b) => {
                b.conv1.visit(&format!("{prefix}.conv1"), f);
                b.conv2.visit(&format!("{prefix}.conv2"), f);
            }
            _ => {}
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        match self {
            Layer::Conv(c) => c.visit_mut(prefix, f),
            Layer::ConvTranspose(c) => c.visit_mut(prefix, f),
            Layer::Resnet(b) => {
                b.conv1.visit_mut(&format!("{prefix}.conv1"), f);
                b.conv2.visit_mut(&format!("{prefix}.conv2"), f);
            }
            _ => {}
        }
    }
}

/// A named sequential chain of layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Stack {
    pub name: String,
    pub layers: Vec<Layer>,
}

impl Stack {
    pub fn new(name: impl Into<String>, layers: Vec<Layer>) -> Self {
        Self { name: name.into(), layers }
    }

    pub fn forward(&self, x: ArrayView3<f64>) -> Result<(Array3<f64>, Vec<LayerCache>), NnError> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.to_owned();
        for layer in &self.layers {
            let (y, cache) = layer.forward(cur.view())?;
            caches.push(cache);
            cur = y;
        }
        Ok((cur, caches))
    }

    /// Forward pass that also returns the activations after the listed layer indices.
    pub fn forward_taps(
        &self,
        x: ArrayView3<f64>,
        taps: &[usize],
    ) -> Result<(Vec<Array3<f64>>, Vec<LayerCache>), NnError> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut outs = Vec::with_capacity(taps.len());
        let mut cur = x.to_owned();
        let last = taps.iter().copied().max().unwrap_or(0);
        for (i, layer) in self.layers.iter().enumerate().take(last + 1) {
            let (y, cache) = layer.forward(cur.view())?;
            caches.push(cache);
            cur = y;
            if taps.contains(&i) {
                outs.push(cur.clone());
            }
        }
        Ok((outs, caches))
    }

    pub fn backward(
        &self,
        caches: &[LayerCache],
        dy: ArrayView3<f64>,
        grad: Option<&mut Stack>,
    ) -> Array3<f64> {
        self.backward_taps(caches, &[(caches.len() - 1, dy.to_owned())], grad)
    }

    /// Backward pass with gradient injected after several layers (see [`Stack::forward_taps`]).
    pub fn backward_taps(
        &self,
        caches: &[LayerCache],
        injections: &[(usize, Array3<f64>)],
        mut grad: Option<&mut Stack>,
    ) -> Array3<f64> {
        let mut cur: Option<Array3<f64>> = None;
        for i in (0..caches.len()).rev() {
            for (at, d) in injections.iter().filter(|(at, _)| *at == i) {
                debug_assert_eq!(*at, i);
                cur = Some(match cur {
                    Some(c) => c + d,
                    None => d.clone(),
                });
            }
            let Some(dy) = cur.take() else { continue };
            let g = grad.as_deref_mut().map(|g| &mut g.layers[i]);
            cur = Some(self.layers[i].backward(&caches[i], dy.view(), g));
        }
        cur.expect("at least one injection")
    }

    pub fn output_shape(&self, shape: (usize, usize, usize)) -> Option<(usize, usize, usize)> {
        self.layers.iter().try_fold(shape, |s, l| l.output_shape(s))
    }

    /// Shape after every layer, starting from `shape`.
    pub fn trace_shapes(&self, shape: (usize, usize, usize)) -> Option<Vec<(usize, usize, usize)>> {
        let mut out = Vec::with_capacity(self.layers.len());
        let mut cur = shape;
        for l in &self.layers {
            cur = l.output_shape(cur)?;
            out.push(cur);
        }
        Some(out)
    }
}

impl Parameters for Stack {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("{}.{i}", self.name), f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        let name = self.name.clone();
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("{name}.{i}"), f);
        }
    }
}

/// Adds `src` into `dst` parameter by parameter. Both must share a layout.
pub fn accumulate<P: Parameters>(dst: &mut P, src: &P) {
    let flat = src.flatten();
    let mut offset = 0;
    dst.visit_mut(&mut |_, d| {
        let n = d.len();
        for (a, b) in d.iter_mut().zip(&flat[offset..offset + n]) {
            *a += b;
        }
        offset += n;
    });
}

pub fn scale<P: Parameters>(p: &mut P, factor: f64) {
    p.visit_mut(&mut |_, d| d.iter_mut().for_each(|v| *v *= factor));
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random3(rng: &mut ChaCha8Rng, shape: (usize, usize, usize)) -> Array3<f64> {
        Array3::from_shape_simple_fn(shape, || rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn stack_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let stack = Stack::new(
            "s",
            vec![
                Layer::Conv(Conv2d::kaiming(&mut rng, 2, 3, 3, 1, 1)),
                Layer::LeakyRelu(0.2),
                Layer::Resnet(ResnetBlock {
                    conv1: Conv2d::kaiming(&mut rng, 3, 3, 3, 1, 1),
                    conv2: Conv2d::kaiming(&mut rng, 3, 3, 3, 1, 1),
                }),
                Layer::ConvTranspose(ConvTranspose2d::kaiming(&mut rng, 3, 2, 4, 2, 1)),
                Layer::Sigmoid,
            ],
        );
        // Nonzero biases keep pre-activations off the ReLU kink at exactly 0.
        let mut stack = stack;
        let jitter: Vec<f64> =
            stack.flatten().iter().map(|p| p + rng.gen_range(-0.1..0.1)).collect();
        stack.load_flat(&jitter);
        let x = random3(&mut rng, (2, 4, 4));
        let target = random3(&mut rng, (2, 8, 8));
        let loss = |s: &Stack, x: &Array3<f64>| {
            let (y, _) = s.forward(x.view()).unwrap();
            0.5 * (&y - &target).mapv(|v| v * v).sum()
        };
        let (y, caches) = stack.forward(x.view()).unwrap();
        let dy = &y - &target;
        let mut grad = stack.zeros_like();
        let dx = stack.backward(&caches, dy.view(), Some(&mut grad));

        let h = 1e-6;
        let params = stack.flatten();
        let g = grad.flatten();
        for i in (0..params.len()).step_by(7) {
            let mut p = params.clone();
            p[i] += h;
            let mut sp = stack.clone();
            sp.load_flat(&p);
            p[i] -= 2.0 * h;
            let mut sm = stack.clone();
            sm.load_flat(&p);
            let fd = (loss(&sp, &x) - loss(&sm, &x)) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-5 * (1.0 + fd.abs()), "param {i}: {fd} vs {}", g[i]);
        }
        for idx in [(0, 0, 0), (1, 2, 3), (0, 3, 1)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (loss(&stack, &xp) - loss(&stack, &xm)) / (2.0 * h);
            assert!((fd - dx[idx]).abs() <= 1e-5 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn flatten_roundtrip_and_accumulate() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let stack = Stack::new("s", vec![Layer::Conv(Conv2d::kaiming(&mut rng, 1, 2, 3, 1, 1))]);
        let mut acc = stack.zeros_like();
        accumulate(&mut acc, &stack);
        accumulate(&mut acc, &stack);
        scale(&mut acc, 0.5);
        assert_eq!(acc.flatten(), stack.flatten());
        assert_eq!(stack.param_count(), 2 * 9 + 2);
    }

    #[test]
    fn sigmoid_is_stable_for_large_inputs() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }
}

//! Training objectives: masked ℓ1, adversarial, perceptual and style losses.
//!
//! Every loss comes in two flavours: a plain value function, and a `*_grad`
//! function returning the value together with its gradient w.r.t. the
//! prediction. Norms are means over elements, so the default weights do not
//! depend on resolution.

use ndarray::{Array2, Array3, ArrayView3, Axis, Zip};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::BinaryMask;
use crate::nn::{Conv2d, Layer, LayerCache, NnError, Parameters, Stack};
use crate::rng::{stream_rng, Stream};

/// Probability clamp used inside logarithms.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("feature extractor has no weights")]
    UninitializedExtractor,
    #[error("loss component `{0}` is not finite")]
    NonFinite(&'static str),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Layer(#[from] NnError),
}

/// Weights of the inpainting objective `λ1·ℓ1 + λ2·GAN + λ3·Perc + λ4·Style`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 1.0, lambda2: 0.1, lambda3: 0.1, lambda4: 250.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda4", self.lambda4),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(format!("{name} must be a finite value >= 0, got {v}"));
            }
        }
        Ok(())
    }
}

/// Unweighted loss terms of one generator step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub l1: f64,
    pub gan: f64,
    pub perc: f64,
    pub style: f64,
}

/// Weighted sum of the four components; a non-finite component is reported by name.
pub fn total_inpaint_loss(weights: &LossWeights, c: &LossComponents) -> Result<f64, LossError> {
    for (name, v) in [("l1", c.l1), ("gan", c.gan), ("perc", c.perc), ("style", c.style)] {
        if !v.is_finite() {
            return Err(LossError::NonFinite(name));
        }
    }
    Ok(weights.lambda1 * c.l1
        + weights.lambda2 * c.gan
        + weights.lambda3 * c.perc
        + weights.lambda4 * c.style)
}

fn check_same(a: &Array3<f64>, b: &Array3<f64>) -> Result<(), LossError> {
    if a.dim() != b.dim() {
        return Err(LossError::Shape(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

fn mask_scale(mask: &BinaryMask) -> f64 {
    let mean = mask.coverage();
    if mean == 0.0 {
        log::warn!("masked_l1: empty mask, falling back to plain mean absolute error");
        1.0
    } else {
        1.0 / mean
    }
}

/// `(1 / Mean(M)) · mean|pred − target|` over all pixels and channels.
///
/// An empty mask falls back to the plain mean absolute error.
pub fn masked_l1(pred: &Array3<f64>, target: &Array3<f64>, mask: &BinaryMask) -> Result<f64, LossError> {
    Ok(masked_l1_grad(pred, target, mask)?.0)
}

pub fn masked_l1_grad(
    pred: &Array3<f64>,
    target: &Array3<f64>,
    mask: &BinaryMask,
) -> Result<(f64, Array3<f64>), LossError> {
    check_same(pred, target)?;
    if (pred.dim().1, pred.dim().2) != mask.dims() {
        return Err(LossError::Shape(format!("image {:?} vs mask {:?}", pred.dim(), mask.dims())));
    }
    let n = pred.len() as f64;
    let scale = mask_scale(mask);
    let diff = pred - target;
    let value = scale * diff.iter().map(|d| d.abs()).sum::<f64>() / n;
    let grad = diff.mapv(|d| scale * d.signum() * (d != 0.0) as u8 as f64 / n);
    Ok((value, grad))
}

/// Adversarial objective form.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GanMode {
    /// `gen = −E log D(fake)`, `disc = −½E log D(real) − ½E log(1 − D(fake))`.
    #[default]
    NonSaturating,
    /// Minimax form with the log terms as written: `gen = E log(1 − D(fake))`,
    /// `disc = ½E log D(fake) + ½E log(1 − D(real))`.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GanLosses {
    pub gen_loss: f64,
    pub disc_loss: f64,
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Generator and discriminator losses from post-sigmoid discriminator outputs.
pub fn gan_losses(disc_real: &[f64], disc_fake: &[f64], mode: GanMode) -> GanLosses {
    GanLosses {
        gen_loss: gen_loss_grad(disc_fake, mode).0,
        disc_loss: disc_loss_grad(disc_real, disc_fake, mode).0,
    }
}

/// Generator loss and its gradient w.r.t. each `D(fake)` entry.
pub fn gen_loss_grad(disc_fake: &[f64], mode: GanMode) -> (f64, Vec<f64>) {
    let n = disc_fake.len().max(1) as f64;
    let p: Vec<f64> = disc_fake.iter().copied().map(clamp_prob).collect();
    match mode {
        GanMode::NonSaturating => (
            -mean(&p.iter().map(|v| v.ln()).collect::<Vec<_>>()),
            p.iter().map(|v| -1.0 / (n * v)).collect(),
        ),
        GanMode::Literal => (
            mean(&p.iter().map(|v| (1.0 - v).ln()).collect::<Vec<_>>()),
            p.iter().map(|v| -1.0 / (n * (1.0 - v))).collect(),
        ),
    }
}

/// Discriminator loss and its gradients w.r.t. `D(real)` and `D(fake)`.
pub fn disc_loss_grad(disc_real: &[f64], disc_fake: &[f64], mode: GanMode) -> (f64, Vec<f64>, Vec<f64>) {
    let nr = disc_real.len().max(1) as f64;
    let nf = disc_fake.len().max(1) as f64;
    let r: Vec<f64> = disc_real.iter().copied().map(clamp_prob).collect();
    let f: Vec<f64> = disc_fake.iter().copied().map(clamp_prob).collect();
    match mode {
        GanMode::NonSaturating => {
            let value = -0.5 * mean(&r.iter().map(|v| v.ln()).collect::<Vec<_>>())
                - 0.5 * mean(&f.iter().map(|v| (1.0 - v).ln()).collect::<Vec<_>>());
            let dr = r.iter().map(|v| -0.5 / (nr * v)).collect();
            let df = f.iter().map(|v| 0.5 / (nf * (1.0 - v))).collect();
            (value, dr, df)
        }
        GanMode::Literal => {
            let value = 0.5 * mean(&f.iter().map(|v| v.ln()).collect::<Vec<_>>())
                + 0.5 * mean(&r.iter().map(|v| (1.0 - v).ln()).collect::<Vec<_>>());
            let dr = r.iter().map(|v| -0.5 / (nr * (1.0 - v))).collect();
            let df = f.iter().map(|v| 0.5 / (nf * v)).collect();
            (value, dr, df)
        }
    }
}

/// `G[i,j] = Σ_p f_i(p)·f_j(p) / (C·H·W)`.
pub fn gram(features: &Array3<f64>) -> Array2<f64> {
    let (c, h, w) = features.dim();
    let f = features
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((c, h * w))
        .expect("reshape");
    let n = (c * h * w).max(1) as f64;
    f.dot(&f.t()) / n
}

fn gram_backward(features: &Array3<f64>, d_gram: &Array2<f64>) -> Array3<f64> {
    let (c, h, w) = features.dim();
    let f = features
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((c, h * w))
        .expect("reshape");
    let n = (c * h * w).max(1) as f64;
    let sym = d_gram + &d_gram.t();
    (sym.dot(&f) / n).into_shape_with_order((c, h, w)).expect("reshape")
}

/// Fixed feature network with five taps, standing in for a pretrained classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    stack: Option<Stack>,
    taps: Vec<usize>,
}

impl FeatureExtractor {
    /// An extractor with no weights; every loss that needs it fails.
    pub fn uninitialized() -> Self {
        Self { stack: None, taps: Vec::new() }
    }

    /// Random fixed convolutional stack; stage widths are `widths[0..5]`.
    ///
    /// Stage 1 keeps resolution, stages 2–5 halve it.
    pub fn random(seed: u64, widths: [usize; 5]) -> Self {
        let mut rng = stream_rng(seed, Stream::Init, 0xE7);
        let mut layers = Vec::new();
        let mut taps = Vec::new();
        let mut input = 3;
        for (i, &w) in widths.iter().enumerate() {
            let conv = if i == 0 {
                Conv2d::kaiming(&mut rng, input, w, 3, 1, 1)
            } else {
                Conv2d::kaiming(&mut rng, input, w, 4, 2, 1)
            };
            layers.push(Layer::Conv(conv));
            layers.push(Layer::Relu);
            taps.push(layers.len() - 1);
            input = w;
        }
        Self { stack: Some(Stack::new("extractor", layers)), taps }
    }

    /// Wraps an existing stack (e.g. loaded weights); `taps` index its layers.
    pub fn from_stack(stack: Stack, taps: Vec<usize>) -> Result<Self, LossError> {
        if taps.len() != 5 || taps.iter().any(|&t| t >= stack.layers.len()) {
            return Err(LossError::Shape(format!("need 5 valid taps, got {taps:?}")));
        }
        Ok(Self { stack: Some(stack), taps })
    }

    pub fn is_initialized(&self) -> bool {
        self.stack.is_some()
    }

    pub fn stack(&self) -> Option<&Stack> {
        self.stack.as_ref()
    }

    pub fn taps(&self) -> &[usize] {
        &self.taps
    }

    fn inner(&self) -> Result<&Stack, LossError> {
        self.stack.as_ref().ok_or(LossError::UninitializedExtractor)
    }

    /// Activations at each tap.
    pub fn features(&self, image: ArrayView3<f64>) -> Result<Vec<Array3<f64>>, LossError> {
        Ok(self.inner()?.forward_taps(image, &self.taps)?.0)
    }

    fn features_cached(
        &self,
        image: ArrayView3<f64>,
    ) -> Result<(Vec<Array3<f64>>, Vec<LayerCache>), LossError> {
        Ok(self.inner()?.forward_taps(image, &self.taps)?)
    }

    fn backward(&self, caches: &[LayerCache], d_taps: Vec<Array3<f64>>) -> Array3<f64> {
        let inj: Vec<(usize, Array3<f64>)> = self.taps.iter().copied().zip(d_taps).collect();
        self.stack.as_ref().expect("checked").backward_taps(caches, &inj, None)
    }
}

fn mean_abs_diff_grad(a: &Array3<f64>, b: &Array3<f64>) -> (f64, Array3<f64>) {
    let n = a.len().max(1) as f64;
    let d = a - b;
    let v = d.iter().map(|x| x.abs()).sum::<f64>() / n;
    (v, d.mapv(|x| x.signum() * (x != 0.0) as u8 as f64 / n))
}

/// `Σ_i mean|ω_i(target) − ω_i(pred)|` over the five taps.
pub fn perceptual_loss(
    extractor: &FeatureExtractor,
    pred: &Array3<f64>,
    target: &Array3<f64>,
) -> Result<f64, LossError> {
    check_same(pred, target)?;
    let fp = extractor.features(pred.view())?;
    let ft = extractor.features(target.view())?;
    Ok(fp
        .iter()
        .zip(&ft)
        .map(|(a, b)| (a - b).iter().map(|x| x.abs()).sum::<f64>() / a.len().max(1) as f64)
        .sum())
}

pub fn perceptual_loss_grad(
    extractor: &FeatureExtractor,
    pred: &Array3<f64>,
    target: &Array3<f64>,
) -> Result<(f64, Array3<f64>), LossError> {
    check_same(pred, target)?;
    let (fp, caches) = extractor.features_cached(pred.view())?;
    let ft = extractor.features(target.view())?;
    let mut total = 0.0;
    let mut d_taps = Vec::with_capacity(fp.len());
    for (a, b) in fp.iter().zip(&ft) {
        let (v, d) = mean_abs_diff_grad(a, b);
        total += v;
        d_taps.push(d);
    }
    Ok((total, extractor.backward(&caches, d_taps)))
}

fn apply_mask(image: &Array3<f64>, mask: &BinaryMask) -> Array3<f64> {
    let m = mask.as_array().view().insert_axis(Axis(0));
    image * &m
}

/// `Σ_i mean|G(ω_i(target ⊙ M)) − G(ω_i(pred ⊙ M))|`.
pub fn style_loss(
    extractor: &FeatureExtractor,
    pred: &Array3<f64>,
    target: &Array3<f64>,
    mask: &BinaryMask,
) -> Result<f64, LossError> {
    check_same(pred, target)?;
    let fp = extractor.features(apply_mask(pred, mask).view())?;
    let ft = extractor.features(apply_mask(target, mask).view())?;
    Ok(fp
        .iter()
        .zip(&ft)
        .map(|(a, b)| {
            let d = gram(a) - gram(b);
            d.iter().map(|x| x.abs()).sum::<f64>() / d.len().max(1) as f64
        })
        .sum())
}

pub fn style_loss_grad(
    extractor: &FeatureExtractor,
    pred: &Array3<f64>,
    target: &Array3<f64>,
    mask: &BinaryMask,
) -> Result<(f64, Array3<f64>), LossError> {
    check_same(pred, target)?;
    let (fp, caches) = extractor.features_cached(apply_mask(pred, mask).view())?;
    let ft = extractor.features(apply_mask(target, mask).view())?;
    let mut total = 0.0;
    let mut d_taps = Vec::with_capacity(fp.len());
    for (a, b) in fp.iter().zip(&ft) {
        let d = gram(a) - gram(b);
        let n = d.len().max(1) as f64;
        total += d.iter().map(|x| x.abs()).sum::<f64>() / n;
        let dg = d.mapv(|x| x.signum() * (x != 0.0) as u8 as f64 / n);
        d_taps.push(gram_backward(a, &dg));
    }
    let d_masked = extractor.backward(&caches, d_taps);
    Ok((total, apply_mask(&d_masked, mask)))
}

/// Strided patch classifier with a sigmoid head.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub stack: Stack,
}

impl Parameters for Discriminator {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.stack.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.stack.visit_mut(f);
    }
}

impl Discriminator {
    /// Four convolutions: three stride-2 stages of width `base, 2·base, 4·base`, then a 1-channel head.
    pub fn new(seed: u64, base: usize) -> Self {
        let mut rng = stream_rng(seed, Stream::Init, 0xD15C);
        let layers = vec![
            Layer::Conv(Conv2d::kaiming(&mut rng, 3, base, 4, 2, 1)),
            Layer::LeakyRelu(0.2),
            Layer::Conv(Conv2d::kaiming(&mut rng, base, 2 * base, 4, 2, 1)),
            Layer::LeakyRelu(0.2),
            Layer::Conv(Conv2d::kaiming(&mut rng, 2 * base, 4 * base, 4, 2, 1)),
            Layer::LeakyRelu(0.2),
            Layer::Conv(Conv2d::kaiming(&mut rng, 4 * base, 1, 4, 1, 1)),
            Layer::Sigmoid,
        ];
        Self { stack: Stack::new("disc", layers) }
    }

    pub fn forward(&self, image: ArrayView3<f64>) -> Result<(Array3<f64>, Vec<LayerCache>), LossError> {
        Ok(self.stack.forward(image)?)
    }

    /// Backpropagates `d_prob`; accumulates parameter gradients only when `grad` is given.
    pub fn backward(
        &self,
        caches: &[LayerCache],
        d_prob: &Array3<f64>,
        grad: Option<&mut Discriminator>,
    ) -> Array3<f64> {
        self.stack.backward(caches, d_prob.view(), grad.map(|g| &mut g.stack))
    }
}

/// Sum of `a ⊙ b`; handy for scalarizing a vector-Jacobian product in tests.
pub fn inner(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    let mut s = 0.0;
    Zip::from(a).and(b).for_each(|x, y| s += x * y);
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand3(rng: &mut ChaCha8Rng, shape: (usize, usize, usize)) -> Array3<f64> {
        Array3::from_shape_simple_fn(shape, || rng.gen_range(0.0..1.0))
    }

    #[test]
    fn masked_l1_hand_case() {
        let pred = Array3::from_elem((1, 2, 2), 0.5);
        let target = Array3::from_elem((1, 2, 2), 0.4);
        let mask = BinaryMask::new(ndarray::array![[1.0, 0.0], [0.0, 0.0]]).unwrap();
        // Mean(M) = 0.25, mean |diff| = 0.1.
        let mut sum = 0.0;
        for v in (&pred - &target).iter() {
            sum += f64::abs(*v);
        }
        let expected = (sum / 4.0) / 0.25;
        let got = masked_l1(&pred, &target, &mask).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 0.4).abs() < 1e-12);
    }

    #[test]
    fn masked_l1_identity_full_mask_and_empty_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = rand3(&mut rng, (3, 4, 4));
        let b = rand3(&mut rng, (3, 4, 4));
        assert_eq!(masked_l1(&a, &a, &BinaryMask::ones(4, 4)).unwrap(), 0.0);
        let mae = (&a - &b).mapv(f64::abs).mean().unwrap();
        assert!((masked_l1(&a, &b, &BinaryMask::ones(4, 4)).unwrap() - mae).abs() < 1e-12);
        assert!((masked_l1(&a, &b, &BinaryMask::zeros(4, 4)).unwrap() - mae).abs() < 1e-12);
    }

    #[test]
    fn gan_closed_forms() {
        let half = vec![0.5; 6];
        let l = gan_losses(&half, &half, GanMode::NonSaturating);
        assert!((l.gen_loss - std::f64::consts::LN_2).abs() < 1e-12);
        let perfect = gan_losses(&[1.0 - PROB_EPS; 4], &[PROB_EPS; 4], GanMode::NonSaturating);
        assert!(perfect.disc_loss.abs() < 1e-6);
        let mut prev = f64::INFINITY;
        for p in [0.1, 0.3, 0.5, 0.7, 0.9] {
            let g = gan_losses(&[0.5], &[p; 3], GanMode::NonSaturating).gen_loss;
            assert!(g < prev);
            prev = g;
        }
        let lit = gan_losses(&[0.8], &[0.3], GanMode::Literal);
        assert!((lit.gen_loss - (0.7f64).ln()).abs() < 1e-12);
        assert!((lit.disc_loss - (0.5 * (0.3f64).ln() + 0.5 * (0.2f64).ln())).abs() < 1e-12);
    }

    #[test]
    fn gan_gradients_match_finite_differences() {
        let real = [0.3, 0.8, 0.6];
        let fake = [0.2, 0.45];
        for mode in [GanMode::NonSaturating, GanMode::Literal] {
            let (_, dr, df) = disc_loss_grad(&real, &fake, mode);
            let (_, dg) = gen_loss_grad(&fake, mode);
            let h = 1e-6;
            for i in 0..fake.len() {
                let mut p = fake;
                p[i] += h;
                let mut m = fake;
                m[i] -= h;
                let fd = (disc_loss_grad(&real, &p, mode).0 - disc_loss_grad(&real, &m, mode).0) / (2.0 * h);
                assert!((fd - df[i]).abs() < 1e-6);
                let fd = (gen_loss_grad(&p, mode).0 - gen_loss_grad(&m, mode).0) / (2.0 * h);
                assert!((fd - dg[i]).abs() < 1e-6);
            }
            let mut p = real;
            p[1] += h;
            let mut m = real;
            m[1] -= h;
            let fd = (disc_loss_grad(&p, &fake, mode).0 - disc_loss_grad(&m, &fake, mode).0) / (2.0 * h);
            assert!((fd - dr[1]).abs() < 1e-6);
        }
    }

    #[test]
    fn gram_loop_oracle_and_trace() {
        let f = ndarray::array![[[1.0, 2.0]], [[3.0, 4.0]]];
        let g = gram(&f);
        let n = 2.0 * 1.0 * 2.0;
        for i in 0..2 {
            for j in 0..2 {
                let mut s = 0.0;
                for p in 0..2 {
                    s += f[[i, 0, p]] * f[[j, 0, p]];
                }
                assert!((g[[i, j]] - s / n).abs() < 1e-15);
            }
        }
        assert_eq!(g[[0, 1]], g[[1, 0]]);
        let trace = g[[0, 0]] + g[[1, 1]];
        assert!((trace - f.mapv(|v| v * v).sum() / n).abs() < 1e-15);
        assert!(gram(&Array3::zeros((3, 2, 2))).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn extractor_losses_vanish_at_identity_and_are_symmetric() {
        let ex = FeatureExtractor::random(1, [4, 4, 4, 4, 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand3(&mut rng, (3, 16, 16));
        let b = rand3(&mut rng, (3, 16, 16));
        let m = crate::data::sample_irregular_mask(2, 16, 16, (0.2, 0.5)).unwrap();
        assert_eq!(perceptual_loss(&ex, &a, &a).unwrap(), 0.0);
        assert_eq!(style_loss(&ex, &a, &a, &m).unwrap(), 0.0);
        assert_eq!(style_loss(&ex, &a, &b, &BinaryMask::zeros(16, 16)).unwrap(), 0.0);
        let ab = perceptual_loss(&ex, &a, &b).unwrap();
        assert!((ab - perceptual_loss(&ex, &b, &a).unwrap()).abs() < 1e-12);
        assert!(ab > 0.0);
    }

    #[test]
    fn uninitialized_extractor_is_an_error() {
        let ex = FeatureExtractor::uninitialized();
        let a = Array3::zeros((3, 8, 8));
        assert!(matches!(perceptual_loss(&ex, &a, &a), Err(LossError::UninitializedExtractor)));
        assert!(matches!(
            style_loss(&ex, &a, &a, &BinaryMask::ones(8, 8)),
            Err(LossError::UninitializedExtractor)
        ));
    }

    #[test]
    fn feature_loss_gradients_match_finite_differences() {
        let ex = FeatureExtractor::random(3, [3, 4, 4, 4, 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand3(&mut rng, (3, 16, 16));
        let b = rand3(&mut rng, (3, 16, 16));
        let m = crate::data::sample_irregular_mask(5, 16, 16, (0.3, 0.6)).unwrap();
        let (_, gp) = perceptual_loss_grad(&ex, &a, &b).unwrap();
        let (_, gs) = style_loss_grad(&ex, &a, &b, &m).unwrap();
        let h = 1e-6;
        let mut checked = 0;
        for idx in [(0, 3, 4), (1, 8, 8), (2, 15, 0), (0, 7, 12), (1, 1, 1)] {
            let mut p = a.clone();
            p[idx] += h;
            let mut q = a.clone();
            q[idx] -= h;
            let fd = (perceptual_loss(&ex, &p, &b).unwrap() - perceptual_loss(&ex, &q, &b).unwrap()) / (2.0 * h);
            assert!((fd - gp[idx]).abs() < 1e-5 * (1.0 + fd.abs()), "perc {idx:?}: {fd} vs {}", gp[idx]);
            let fd = (style_loss(&ex, &p, &b, &m).unwrap() - style_loss(&ex, &q, &b, &m).unwrap()) / (2.0 * h);
            assert!((fd - gs[idx]).abs() < 1e-5 * (1.0 + fd.abs()), "style {idx:?}: {fd} vs {}", gs[idx]);
            checked += 1;
        }
        assert_eq!(checked, 5);
    }

    #[test]
    fn total_loss_weighting() {
        let w = LossWeights::default();
        let ones = LossComponents { l1: 1.0, gan: 1.0, perc: 1.0, style: 1.0 };
        assert_eq!(total_inpaint_loss(&w, &ones).unwrap(), 251.2);
        assert_eq!(total_inpaint_loss(&w, &LossComponents::default()).unwrap(), 0.0);
        let zero = LossWeights { lambda1: 0.0, lambda2: 0.0, lambda3: 0.0, lambda4: 0.0 };
        assert_eq!(total_inpaint_loss(&zero, &ones).unwrap(), 0.0);
        let bad = LossComponents { perc: f64::NAN, ..ones };
        assert!(matches!(total_inpaint_loss(&w, &bad), Err(LossError::NonFinite("perc"))));
    }
}

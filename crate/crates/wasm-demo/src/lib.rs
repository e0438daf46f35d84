//! Browser demo over the core crate.
//!
//! A [`Scene`] is one synthetic shadow triplet. From it the page can derive an
//! Otsu mask and region metrics, and run a small randomly initialized fusion
//! network to look at its `W1`/`W2` weight maps.

use wasm_bindgen::prelude::*;

use shadow_inpaint::data::{synthetic_shadow_sample, BinaryMask, ImageTensor, ShadowTriplet};
use shadow_inpaint::evaluation::{image_metrics, otsu_shadow_mask, weight_maps, MaskSource, RegionMetrics, RmseKind};
use shadow_inpaint::networks::{FeatureMap, FusionNetConfig, Generator, GeneratorConfig};

const MAX_SIZE: usize = 256;

fn rgba(image: &ImageTensor) -> Vec<u8> {
    image.to_rgb8().pixels().flat_map(|p| [p.0[0], p.0[1], p.0[2], 255]).collect()
}

fn mask_rgba(mask: &BinaryMask) -> Vec<u8> {
    mask.to_gray8().pixels().flat_map(|p| [p.0[0], p.0[0], p.0[0], 255]).collect()
}

/// Intersection over union of two masks; two empty masks agree fully.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let (h, w) = a.dims();
    let (mut inter, mut union) = (0usize, 0usize);
    for y in 0..h {
        for x in 0..w {
            let (p, q) = (a.get(y, x), b.get(y, x));
            inter += (p && q) as usize;
            union += (p || q) as usize;
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[wasm_bindgen]
pub struct Scene {
    triplet: ShadowTriplet,
    otsu: BinaryMask,
}

#[wasm_bindgen]
impl Scene {
    /// Synthetic scene of side `size` (a multiple of 4, at most 256).
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, size: usize) -> Result<Scene, JsError> {
        Scene::generate(seed, size).map_err(|e| JsError::new(&e))
    }

    pub fn size(&self) -> usize {
        self.triplet.shadow.height()
    }

    pub fn shadow_rgba(&self) -> Vec<u8> {
        rgba(&self.triplet.shadow)
    }

    pub fn shadow_free_rgba(&self) -> Vec<u8> {
        rgba(&self.triplet.shadow_free)
    }

    pub fn mask_rgba(&self) -> Vec<u8> {
        mask_rgba(&self.triplet.mask)
    }

    pub fn otsu_rgba(&self) -> Vec<u8> {
        mask_rgba(&self.otsu)
    }

    /// IoU between the Otsu mask and the generator's mask.
    pub fn otsu_iou(&self) -> f64 {
        mask_iou(&self.otsu, &self.triplet.mask)
    }

    /// Region metrics of the unrestored shadow image against the shadow-free
    /// image, as a JSON array; `mask_source` is `provided` or `otsu`.
    pub fn identity_metrics(&self, mask_source: &str) -> Result<String, JsError> {
        let rows = self.metrics(mask_source).map_err(|e| JsError::new(&e))?;
        serde_json::to_string(&rows).map_err(|e| JsError::new(&e.to_string()))
    }

    /// Runs an untrained fusion network of width `base` on the scene.
    pub fn fusion_maps(&self, seed: u32, base: usize) -> Result<FusionMaps, JsError> {
        self.fusion(seed, base).map_err(|e| JsError::new(&e))
    }
}

impl Scene {
    pub fn generate(seed: u32, size: usize) -> Result<Scene, String> {
        if size == 0 || !size.is_multiple_of(4) || size > MAX_SIZE {
            return Err(format!("size {size} must be a multiple of 4 in 4..={MAX_SIZE}"));
        }
        let triplet = synthetic_shadow_sample(seed as u64, 0, size).triplet;
        let otsu = otsu_shadow_mask(&triplet.shadow, &triplet.shadow_free).map_err(|e| e.to_string())?;
        Ok(Scene { triplet, otsu })
    }

    pub fn triplet(&self) -> &ShadowTriplet {
        &self.triplet
    }

    pub fn otsu_mask(&self) -> &BinaryMask {
        &self.otsu
    }

    pub fn metrics(&self, mask_source: &str) -> Result<Vec<RegionMetrics>, String> {
        let mask = match mask_source.parse::<MaskSource>().map_err(|e| e.to_string())? {
            MaskSource::Provided => &self.triplet.mask,
            MaskSource::Otsu => &self.otsu,
        };
        let t = &self.triplet;
        image_metrics(&t.shadow, &t.shadow_free, mask, RmseKind::MeanAbsolute, None).map_err(|e| e.to_string())
    }

    pub fn fusion(&self, seed: u32, base: usize) -> Result<FusionMaps, String> {
        if !(1..=8).contains(&base) {
            return Err(format!("base width {base} outside 1..=8"));
        }
        let cfg = GeneratorConfig::Fusion(FusionNetConfig::scaled(base, 1));
        let model = Generator::build(&cfg, seed as u64).map_err(|e| e.to_string())?;
        let t = &self.triplet;
        let out = model.forward(&t.shadow, &t.mask).map_err(|e| e.to_string())?;
        let acts = out.fusion.ok_or("fusion network produced no activations")?;
        let (w1, w2) = weight_maps(&acts.fusion.w1, &acts.fusion.w2, t.shadow.dims()).map_err(|e| e.to_string())?;
        let mean = |m: &FeatureMap| m.mean().unwrap_or(0.0);
        Ok(FusionMaps {
            restored: rgba(&ImageTensor::from_clamped(out.image)),
            w1: rgba(&w1),
            w2: rgba(&w2),
            w1_mean: mean(&acts.fusion.w1),
            w2_mean: mean(&acts.fusion.w2),
        })
    }
}

/// RGBA buffers of one fusion-network pass.
#[wasm_bindgen]
pub struct FusionMaps {
    restored: Vec<u8>,
    w1: Vec<u8>,
    w2: Vec<u8>,
    w1_mean: f64,
    w2_mean: f64,
}

#[wasm_bindgen]
impl FusionMaps {
    pub fn restored_rgba(&self) -> Vec<u8> {
        self.restored.clone()
    }

    pub fn w1_rgba(&self) -> Vec<u8> {
        self.w1.clone()
    }

    pub fn w2_rgba(&self) -> Vec<u8> {
        self.w2.clone()
    }

    /// Raw mean of `W1` before normalization.
    pub fn w1_mean(&self) -> f64 {
        self.w1_mean
    }

    pub fn w2_mean(&self) -> f64 {
        self.w2_mean
    }
}

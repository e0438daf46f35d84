//! Images, masks, paired datasets and the synthetic desk-scale generator.
//!
//! Images are stored channel-first as `(3, H, W)` arrays with values in
//! `[0, 1]`. Masks are `(H, W)` arrays holding exactly `0.0` or `1.0`, where
//! `1` marks shadow (or corrupted) pixels.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{GrayImage, RgbImage};
use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::rng::{stream_rng, Stream};

/// Side length every loaded image is resized to.
pub const CANONICAL_SIZE: usize = 256;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("invalid mask: {0}")]
    InvalidMask(String),
    #[error("infeasible mask coverage range ({lo}, {hi}) for {pixels} pixels")]
    InfeasibleCoverage { lo: f64, hi: f64, pixels: usize },
    #[error("fraction {0} outside (0, 1]")]
    InvalidFraction(f64),
    #[error("count must be at least 1")]
    EmptyRequest,
    #[error("file {orphan} has no counterpart in {missing_in}")]
    Orphan { orphan: PathBuf, missing_in: PathBuf },
    #[error("io error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot decode {path}: {source}")]
    Decode { path: PathBuf, source: image::ImageError },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

/// RGB image with channel values in `[0, 1]`, stored as `(3, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    data: Array3<f64>,
}

impl ImageTensor {
    pub fn new(data: Array3<f64>) -> Result<Self, DataError> {
        if data.dim().0 != 3 {
            return Err(DataError::InvalidImage(format!("expected 3 channels, got {}", data.dim().0)));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(DataError::InvalidImage(format!("value {v} outside [0, 1]")));
        }
        Ok(Self { data })
    }

    /// Clamps every value into `[0, 1]`; non-finite values become 0.
    pub fn from_clamped(mut data: Array3<f64>) -> Self {
        assert_eq!(data.dim().0, 3, "image needs 3 channels");
        data.mapv_inplace(|v| if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 });
        Self { data }
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        Self::from_clamped(Array3::from_shape_fn((3, height, width), |(c, _, _)| rgb[c]))
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> [f64; 3],
    ) -> Self {
        let mut data = Array3::zeros((3, height, width));
        for y in 0..height {
            for x in 0..width {
                let px = f(y, x);
                for c in 0..3 {
                    data[[c, y, x]] = px[c];
                }
            }
        }
        Self::from_clamped(data)
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn view(&self) -> ArrayView3<'_, f64> {
        self.data.view()
    }

    pub fn as_array(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_array(self) -> Array3<f64> {
        self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        [self.data[[0, y, x]], self.data[[1, y, x]], self.data[[2, y, x]]]
    }

    /// Rounds every channel to the nearest 8-bit level.
    pub fn quantized(&self) -> Self {
        Self { data: self.data.mapv(|v| (v * 255.0).round() / 255.0) }
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let (h, w) = self.dims();
        RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let p = self.pixel(y as usize, x as usize);
            image::Rgb(p.map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8))
        })
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = img.dimensions();
        Self::from_fn(h as usize, w as usize, |y, x| {
            img.get_pixel(x as u32, y as u32).0.map(|v| v as f64 / 255.0)
        })
    }

    /// Bilinear resize; a no-op when the size already matches.
    pub fn resized(&self, height: usize, width: usize) -> Self {
        if self.dims() == (height, width) {
            return self.clone();
        }
        let (h, w) = self.dims();
        let mut planes = Vec::with_capacity(3);
        for c in 0..3 {
            let plane = image::ImageBuffer::<image::Luma<f32>, Vec<f32>>::from_fn(
                w as u32,
                h as u32,
                |x, y| image::Luma([self.data[[c, y as usize, x as usize]] as f32]),
            );
            planes.push(image::imageops::resize(
                &plane,
                width as u32,
                height as u32,
                FilterType::Triangle,
            ));
        }
        Self::from_clamped(Array3::from_shape_fn((3, height, width), |(c, y, x)| {
            planes[c].get_pixel(x as u32, y as u32).0[0] as f64
        }))
    }
}

/// Binary `(H, W)` mask; 1 marks shadow or corrupted pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    data: Array2<f64>,
}

impl BinaryMask {
    pub fn new(data: Array2<f64>) -> Result<Self, DataError> {
        if let Some(v) = data.iter().find(|v| **v != 0.0 && **v != 1.0) {
            return Err(DataError::InvalidMask(format!("value {v} is not 0 or 1")));
        }
        Ok(Self { data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { data: Array2::zeros((height, width)) }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self { data: Array2::ones((height, width)) }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        Self { data: Array2::from_shape_fn((height, width), |(y, x)| f(y, x) as u8 as f64) }
    }

    /// Binarizes grayscale values in `[0, 1]` at `threshold` (strictly greater is 1).
    pub fn from_gray(gray: ArrayView2<f64>, threshold: f64) -> Self {
        Self { data: gray.mapv(|v| (v > threshold) as u8 as f64) }
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn dims(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[[y, x]] != 0.0
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v != 0.0).count()
    }

    /// Fraction of pixels set to 1.
    pub fn coverage(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.count() as f64 / self.data.len() as f64
    }

    pub fn inverted(&self) -> Self {
        Self { data: self.data.mapv(|v| 1.0 - v) }
    }

    pub fn to_gray8(&self) -> GrayImage {
        let (h, w) = self.dims();
        GrayImage::from_fn(w as u32, h as u32, |x, y| {
            image::Luma([if self.get(y as usize, x as usize) { 255 } else { 0 }])
        })
    }

    /// Nearest-neighbour resize, so the result stays binary.
    pub fn resized(&self, height: usize, width: usize) -> Self {
        if self.dims() == (height, width) {
            return self.clone();
        }
        let (h, w) = self.dims();
        Self::from_fn(height, width, |y, x| {
            let sy = ((y as f64 + 0.5) * h as f64 / height as f64).floor() as usize;
            let sx = ((x as f64 + 0.5) * w as f64 / width as f64).floor() as usize;
            self.get(sy.min(h - 1), sx.min(w - 1))
        })
    }
}

/// Paired shadow / shadow-free images with the shadow mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ShadowTriplet {
    pub shadow: ImageTensor,
    pub shadow_free: ImageTensor,
    pub mask: BinaryMask,
}

impl ShadowTriplet {
    pub fn new(
        shadow: ImageTensor,
        shadow_free: ImageTensor,
        mask: BinaryMask,
    ) -> Result<Self, DataError> {
        if shadow.dims() != shadow_free.dims() || shadow.dims() != mask.dims() {
            return Err(DataError::DimensionMismatch(format!(
                "shadow {:?}, shadow_free {:?}, mask {:?}",
                shadow.dims(),
                shadow_free.dims(),
                mask.dims()
            )));
        }
        Ok(Self { shadow, shadow_free, mask })
    }
}

/// Inpainting training example: `corrupted = clean ⊙ (1 − mask)`.
#[derive(Debug, Clone, PartialEq)]
pub struct InpaintSample {
    pub corrupted: ImageTensor,
    pub mask: BinaryMask,
    pub clean: ImageTensor,
}

impl InpaintSample {
    pub fn new(clean: ImageTensor, mask: BinaryMask) -> Result<Self, DataError> {
        let corrupted = make_shadow_masked(&clean, &mask)?;
        Ok(Self { corrupted, mask, clean })
    }
}

fn check_dims(image: &ImageTensor, mask: &BinaryMask) -> Result<(), DataError> {
    if image.dims() != mask.dims() {
        return Err(DataError::DimensionMismatch(format!(
            "image {:?} vs mask {:?}",
            image.dims(),
            mask.dims()
        )));
    }
    Ok(())
}

/// Zeroes every masked pixel: `out = image ⊙ (1 − mask)` per channel.
pub fn make_shadow_masked(image: &ImageTensor, mask: &BinaryMask) -> Result<ImageTensor, DataError> {
    check_dims(image, mask)?;
    let keep = mask.as_array().mapv(|m| 1.0 - m);
    let mut out = image.as_array().clone();
    for mut plane in out.axis_iter_mut(Axis(0)) {
        plane *= &keep;
    }
    Ok(ImageTensor { data: out })
}

/// Random free-form brush-stroke mask whose coverage lies in `coverage_range`.
///
/// A target pixel count is drawn uniformly from the feasible counts, then
/// strokes are painted pixel by pixel until exactly that many pixels are set.
pub fn sample_irregular_mask(
    seed: u64,
    height: usize,
    width: usize,
    coverage_range: (f64, f64),
) -> Result<BinaryMask, DataError> {
    let (lo, hi) = coverage_range;
    let pixels = height * width;
    let infeasible = DataError::InfeasibleCoverage { lo, hi, pixels };
    if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo >= hi || pixels == 0 {
        return Err(infeasible);
    }
    let min_count = (lo * pixels as f64).ceil() as usize;
    let max_count = (hi * pixels as f64).floor() as usize;
    if min_count > max_count {
        return Err(infeasible);
    }
    let mut rng = stream_rng(seed, Stream::Mask, 0);
    let target = rng.gen_range(min_count..=max_count);
    let mut data = Array2::<f64>::zeros((height, width));
    let mut filled = 0usize;
    let max_radius = ((height.min(width) as f64) / 12.0).max(1.0);

    while filled < target {
        let mut y = rng.gen_range(0.0..height as f64);
        let mut x = rng.gen_range(0.0..width as f64);
        let radius = rng.gen_range(1.0..=max_radius.max(1.0) + 1.0);
        let segments = rng.gen_range(2..8);
        let mut angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        'stroke: for _ in 0..segments {
            angle += rng.gen_range(-1.2..1.2);
            let len = rng.gen_range(2.0..(height.max(width) as f64 / 3.0).max(3.0));
            let steps = len.ceil() as usize;
            for _ in 0..steps {
                y = (y + angle.sin()).clamp(0.0, height as f64 - 1.0);
                x = (x + angle.cos()).clamp(0.0, width as f64 - 1.0);
                let r = radius.ceil() as isize;
                for dy in -r..=r {
                    for dx in -r..=r {
                        if ((dy * dy + dx * dx) as f64) > radius * radius {
                            continue;
                        }
                        let py = y as isize + dy;
                        let px = x as isize + dx;
                        if py < 0 || px < 0 || py >= height as isize || px >= width as isize {
                            continue;
                        }
                        let cell = &mut data[[py as usize, px as usize]];
                        if *cell == 0.0 {
                            *cell = 1.0;
                            filled += 1;
                            if filled == target {
                                break 'stroke;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(BinaryMask { data })
}

/// Indices chosen by [`subset_fraction`], in ascending order.
pub fn subset_indices(len: usize, fraction: f64, seed: u64) -> Result<Vec<usize>, DataError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DataError::InvalidFraction(fraction));
    }
    let k = (fraction * len as f64).round() as usize;
    let mut idx: Vec<usize> = (0..len).collect();
    let mut rng = stream_rng(seed, Stream::Subset, 0);
    idx.shuffle(&mut rng);
    idx.truncate(k);
    idx.sort_unstable();
    Ok(idx)
}

/// Uniform random subset of `round(fraction·N)` items, without replacement.
pub fn subset_fraction<T: Clone>(dataset: &[T], fraction: f64, seed: u64) -> Result<Vec<T>, DataError> {
    if fraction == 1.0 {
        return Ok(dataset.to_vec());
    }
    Ok(subset_indices(dataset.len(), fraction, seed)?
        .into_iter()
        .map(|i| dataset[i].clone())
        .collect())
}

/// Smooth procedural colour texture, quantized to 8-bit levels.
pub fn synthetic_texture(seed: u64, index: u64, size: usize) -> ImageTensor {
    let mut rng = stream_rng(seed, Stream::Texture, index);
    let base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.35..0.8));
    let gradient: [[f64; 2]; 3] =
        std::array::from_fn(|_| [rng.gen_range(-0.15..0.15), rng.gen_range(-0.15..0.15)]);
    let waves: Vec<(f64, f64, f64, [f64; 3])> = (0..3)
        .map(|_| {
            let freq = rng.gen_range(1.0..4.0) * std::f64::consts::TAU;
            let theta = rng.gen_range(0.0..std::f64::consts::TAU);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let amp = std::array::from_fn(|_| rng.gen_range(0.0..0.06));
            (freq, theta, phase, amp)
        })
        .collect();
    let n = size as f64;
    ImageTensor::from_fn(size, size, |y, x| {
        let (u, v) = (x as f64 / n, y as f64 / n);
        std::array::from_fn(|c| {
            let mut val = base[c] + gradient[c][0] * (u - 0.5) + gradient[c][1] * (v - 0.5);
            for (freq, theta, phase, amp) in &waves {
                val += amp[c] * (freq * (u * theta.cos() + v * theta.sin()) + phase).sin();
            }
            (val.clamp(0.0, 1.0) * 255.0).round() / 255.0
        })
    })
}

fn random_polygon_mask<R: Rng>(rng: &mut R, size: usize) -> BinaryMask {
    let n = size as f64;
    let cy = rng.gen_range(0.3..0.7) * n;
    let cx = rng.gen_range(0.3..0.7) * n;
    let vertices = rng.gen_range(5..9);
    let mut angles: Vec<f64> =
        (0..vertices).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
    angles.sort_by(f64::total_cmp);
    let poly: Vec<(f64, f64)> = angles
        .iter()
        .map(|a| {
            let r = rng.gen_range(0.15..0.35) * n;
            (cy + r * a.sin(), cx + r * a.cos())
        })
        .collect();
    BinaryMask::from_fn(size, size, |y, x| point_in_polygon(y as f64 + 0.5, x as f64 + 0.5, &poly))
}

fn point_in_polygon(py: f64, px: f64, poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (yi, xi) = poly[i];
        let (yj, xj) = poly[j];
        if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// A synthetic triplet together with the darkening factor used to make it.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticShadow {
    pub triplet: ShadowTriplet,
    pub darkening: f64,
}

/// Builds synthetic triplet `index` of the stream identified by `seed`.
///
/// The shadow-free image is a procedural texture; the shadow image multiplies
/// a random polygon by a factor in `[0.3, 0.7]`, and that polygon is the mask.
pub fn synthetic_shadow_sample(seed: u64, index: u64, size: usize) -> SyntheticShadow {
    let shadow_free = synthetic_texture(seed, index, size);
    let mut rng = stream_rng(seed, Stream::Shadow, index);
    let darkening = rng.gen_range(0.3..=0.7);
    let mut mask = random_polygon_mask(&mut rng, size);
    if mask.count() == 0 {
        mask = BinaryMask::from_fn(size, size, |y, x| y == size / 2 && x == size / 2);
    }
    let mut shadow = shadow_free.as_array().clone();
    for c in 0..3 {
        for y in 0..size {
            for x in 0..size {
                if mask.get(y, x) {
                    shadow[[c, y, x]] *= darkening;
                }
            }
        }
    }
    let triplet = ShadowTriplet {
        shadow: ImageTensor { data: shadow },
        shadow_free,
        mask,
    };
    SyntheticShadow { triplet, darkening }
}

/// `count` synthetic shadow triplets of side `size`.
pub fn generate_synthetic_shadow_sized(
    seed: u64,
    count: usize,
    size: usize,
) -> Result<Vec<ShadowTriplet>, DataError> {
    if count == 0 {
        return Err(DataError::EmptyRequest);
    }
    Ok((0..count as u64).map(|i| synthetic_shadow_sample(seed, i, size).triplet).collect())
}

/// `count` synthetic shadow triplets at the canonical 256×256 size.
pub fn generate_synthetic_shadow(seed: u64, count: usize) -> Result<Vec<ShadowTriplet>, DataError> {
    generate_synthetic_shadow_sized(seed, count, CANONICAL_SIZE)
}

/// Inpainting pairs from procedural textures and irregular masks.
pub fn generate_synthetic_inpaint(
    seed: u64,
    count: usize,
    size: usize,
    coverage_range: (f64, f64),
) -> Result<Vec<InpaintSample>, DataError> {
    if count == 0 {
        return Err(DataError::EmptyRequest);
    }
    (0..count as u64)
        .map(|i| {
            // Offset keeps inpainting textures disjoint from the shadow textures of the same seed.
            let clean = synthetic_texture(seed, 1_000_000 + i, size);
            let mask_seed = crate::rng::derive_seed(seed, Stream::Mask, i);
            let mask = sample_irregular_mask(mask_seed, size, size, coverage_range)?;
            InpaintSample::new(clean, mask)
        })
        .collect()
}

const SUBDIRS: [&str; 3] = ["shadow", "shadow_free", "mask"];

fn list_pngs(dir: &Path) -> Result<Vec<String>, DataError> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if entry.path().is_file() && name.to_ascii_lowercase().ends_with(".png") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

/// Decodes an image file and resizes it to `size`×`size`.
pub fn load_image(path: &Path, size: usize) -> Result<ImageTensor, DataError> {
    let img = image::open(path)
        .map_err(|source| DataError::Decode { path: path.to_path_buf(), source })?
        .to_rgb8();
    Ok(ImageTensor::from_rgb8(&img).resized(size, size))
}

/// Decodes a mask file (luma > 0.5 is shadow) at `size`×`size`.
pub fn load_mask(path: &Path, size: usize) -> Result<BinaryMask, DataError> {
    let img = image::open(path)
        .map_err(|source| DataError::Decode { path: path.to_path_buf(), source })?
        .to_luma8();
    let gray = Array2::from_shape_fn((img.height() as usize, img.width() as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32).0[0] as f64 / 255.0
    });
    Ok(BinaryMask::from_gray(gray.view(), 0.5).resized(size, size))
}

/// Loads `root/split/{shadow,shadow_free,mask}/*.png`, resized to `size`×`size`.
///
/// Files are matched by name and returned in lexicographic order. A file with
/// no counterpart in one of the other folders is an error.
pub fn load_triplet_dataset_sized(
    root: &Path,
    split: &str,
    size: usize,
) -> Result<Vec<ShadowTriplet>, DataError> {
    if !root.exists() {
        return Err(DataError::Io {
            path: root.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root not found"),
        });
    }
    let base = root.join(split);
    let lists: Vec<Vec<String>> =
        SUBDIRS.iter().map(|d| list_pngs(&base.join(d))).collect::<Result<_, _>>()?;
    for (i, names) in lists.iter().enumerate() {
        for name in names {
            for (j, other) in lists.iter().enumerate() {
                if i != j && other.binary_search(name).is_err() {
                    return Err(DataError::Orphan {
                        orphan: base.join(SUBDIRS[i]).join(name),
                        missing_in: base.join(SUBDIRS[j]),
                    });
                }
            }
        }
    }
    let load = |name: &String| -> Result<ShadowTriplet, DataError> {
        ShadowTriplet::new(
            load_image(&base.join("shadow").join(name), size)?,
            load_image(&base.join("shadow_free").join(name), size)?,
            load_mask(&base.join("mask").join(name), size)?,
        )
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        lists[0].par_iter().map(load).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        lists[0].iter().map(load).collect()
    }
}

/// Loads a triplet split at the canonical 256×256 resolution.
pub fn load_triplet_dataset(root: &Path, split: &str) -> Result<Vec<ShadowTriplet>, DataError> {
    load_triplet_dataset_sized(root, split, CANONICAL_SIZE)
}

/// Writes triplets as `root/split/{shadow,shadow_free,mask}/NNNNN.png`.
pub fn write_triplet_dataset(
    root: &Path,
    split: &str,
    triplets: &[ShadowTriplet],
) -> Result<Vec<PathBuf>, DataError> {
    let base = root.join(split);
    for d in SUBDIRS {
        let dir = base.join(d);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    }
    let mut written = Vec::new();
    for (i, t) in triplets.iter().enumerate() {
        let name = format!("{i:05}.png");
        let save = |img: Result<(), image::ImageError>, path: PathBuf| {
            img.map_err(|source| DataError::Decode { path, source })
        };
        let p = base.join("shadow").join(&name);
        save(t.shadow.to_rgb8().save(&p), p.clone())?;
        written.push(p);
        let p = base.join("shadow_free").join(&name);
        save(t.shadow_free.to_rgb8().save(&p), p.clone())?;
        written.push(p);
        let p = base.join("mask").join(&name);
        save(t.mask.to_gray8().save(&p), p.clone())?;
        written.push(p);
    }
    Ok(written)
}

/// Loads every PNG in `dir` as an RGB image of side `size`, in filename order.
pub fn load_image_folder(dir: &Path, size: usize) -> Result<Vec<ImageTensor>, DataError> {
    if !dir.exists() {
        return Err(DataError::Io {
            path: dir.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "image folder not found"),
        });
    }
    list_pngs(dir)?.iter().map(|n| load_image(&dir.join(n), size)).collect()
}

/// Inpainting samples built from clean images and freshly sampled masks.
pub fn inpaint_samples_from_images(
    images: Vec<ImageTensor>,
    seed: u64,
    coverage_range: (f64, f64),
) -> Result<Vec<InpaintSample>, DataError> {
    images
        .into_iter()
        .enumerate()
        .map(|(i, clean)| {
            let (h, w) = clean.dims();
            let mask_seed = crate::rng::derive_seed(seed, Stream::Mask, i as u64);
            let mask = sample_irregular_mask(mask_seed, h, w, coverage_range)?;
            InpaintSample::new(clean, mask)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_image(seed: u64, h: usize, w: usize) -> ImageTensor {
        let mut rng = stream_rng(seed, Stream::Texture, 99);
        ImageTensor::from_fn(h, w, |_, _| std::array::from_fn(|_| rng.gen_range(0.0..1.0)))
    }

    #[test]
    fn masked_image_identity_and_full_occlusion() {
        let img = rand_image(1, 5, 4);
        assert_eq!(make_shadow_masked(&img, &BinaryMask::zeros(5, 4)).unwrap(), img);
        let out = make_shadow_masked(&img, &BinaryMask::ones(5, 4)).unwrap();
        assert!(out.as_array().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn masked_image_matches_elementwise_loop() {
        let img = rand_image(2, 2, 2);
        let mask = BinaryMask::new(ndarray::array![[1.0, 0.0], [0.0, 0.0]]).unwrap();
        let out = make_shadow_masked(&img, &mask).unwrap();
        for c in 0..3 {
            for y in 0..2 {
                for x in 0..2 {
                    let m = mask.as_array()[[y, x]];
                    assert_eq!(out.as_array()[[c, y, x]], img.as_array()[[c, y, x]] * (1.0 - m));
                }
            }
        }
        assert_eq!(out.pixel(0, 0), [0.0; 3]);
        assert_eq!(out.pixel(1, 1), img.pixel(1, 1));
    }

    #[test]
    fn masked_image_rejects_mismatch() {
        let img = rand_image(3, 4, 4);
        assert!(matches!(
            make_shadow_masked(&img, &BinaryMask::zeros(4, 5)),
            Err(DataError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn masked_image_is_idempotent() {
        let img = rand_image(4, 8, 8);
        let mask = sample_irregular_mask(4, 8, 8, (0.2, 0.5)).unwrap();
        let once = make_shadow_masked(&img, &mask).unwrap();
        assert_eq!(make_shadow_masked(&once, &mask).unwrap(), once);
    }

    #[test]
    fn irregular_mask_is_deterministic() {
        let a = sample_irregular_mask(11, 32, 32, (0.1, 0.4)).unwrap();
        let b = sample_irregular_mask(11, 32, 32, (0.1, 0.4)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, sample_irregular_mask(12, 32, 32, (0.1, 0.4)).unwrap());
    }

    #[test]
    fn irregular_mask_coverage_within_range_over_1000_draws() {
        for seed in 0..1000 {
            let m = sample_irregular_mask(seed, 24, 24, (0.1, 0.4)).unwrap();
            let ones = m.as_array().iter().filter(|v| **v == 1.0).count();
            let cov = ones as f64 / (24.0 * 24.0);
            assert!((0.1..=0.4).contains(&cov), "seed {seed}: {cov}");
        }
    }

    #[test]
    fn infeasible_coverage_rejected() {
        assert!(sample_irregular_mask(0, 8, 8, (0.0, 0.0)).is_err());
        assert!(sample_irregular_mask(0, 8, 8, (0.5, 0.2)).is_err());
        // 8 pixels: no count k satisfies 0.51 <= k/8 <= 0.6.
        assert!(sample_irregular_mask(0, 2, 4, (0.51, 0.6)).is_err());
        assert!(sample_irregular_mask(0, 2, 4, (0.5, 0.51)).is_ok());
    }

    #[test]
    fn subset_fraction_sizes_and_determinism() {
        let data: Vec<usize> = (0..1330).collect();
        assert_eq!(subset_fraction(&data, 1.0, 3).unwrap(), data);
        let sub = subset_fraction(&data, 0.1, 3).unwrap();
        assert_eq!(sub.len(), 133);
        assert_eq!(sub, subset_fraction(&data, 0.1, 3).unwrap());
        let mut uniq = sub.clone();
        uniq.dedup();
        assert_eq!(uniq.len(), 133);
        assert!(subset_fraction(&data, 0.0, 3).is_err());
        assert!(subset_fraction(&data, 1.5, 3).is_err());
    }

    #[test]
    fn synthetic_shadow_construction() {
        for i in 0..6 {
            let s = synthetic_shadow_sample(5, i, 32);
            let t = &s.triplet;
            assert!((0.3..=0.7).contains(&s.darkening));
            let (mut in_shadow, mut in_free, mut n) = (0.0, 0.0, 0.0);
            for y in 0..32 {
                for x in 0..32 {
                    let (a, b) = (t.shadow.pixel(y, x), t.shadow_free.pixel(y, x));
                    if t.mask.get(y, x) {
                        for c in 0..3 {
                            assert_eq!(a[c], s.darkening * b[c]);
                        }
                        in_shadow += a.iter().sum::<f64>();
                        in_free += b.iter().sum::<f64>();
                        n += 1.0;
                    } else {
                        assert_eq!(a, b);
                    }
                }
            }
            assert!(n > 0.0);
            assert!(in_shadow / n < in_free / n);
        }
    }

    #[test]
    fn inpaint_sample_reconstructs_clean() {
        let samples = generate_synthetic_inpaint(7, 3, 16, (0.1, 0.3)).unwrap();
        for s in &samples {
            let recon = s.corrupted.as_array()
                + &(s.clean.as_array() * &s.mask.as_array().clone().insert_axis(Axis(0)));
            for (a, b) in recon.iter().zip(s.clean.as_array().iter()) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn mask_resize_stays_binary() {
        let m = sample_irregular_mask(1, 20, 20, (0.2, 0.4)).unwrap();
        let r = m.resized(7, 13);
        assert_eq!(r.dims(), (7, 13));
        assert!(r.as_array().iter().all(|v| *v == 0.0 || *v == 1.0));
    }
}

//! Measurement protocol: LAB conversion, Otsu masks, region metrics and reports.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, Array3, ArrayView3, Axis};
#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{BinaryMask, ImageTensor, ShadowTriplet};
use crate::networks::{FeatureMap, Generator};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("unknown {what} `{value}`")]
    Unknown { what: &'static str, value: String },
    #[error("io error at {path}: {message}")]
    Io { path: String, message: String },
}

fn io_error(path: &Path, e: impl fmt::Display) -> EvalError {
    EvalError::Io { path: path.display().to_string(), message: e.to_string() }
}

// sRGB primaries under D65.
const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412_456_4, 0.357_576_1, 0.180_437_5],
    [0.212_672_9, 0.715_152_2, 0.072_175_0],
    [0.019_333_9, 0.119_192_0, 0.950_304_1],
];
const XYZ_TO_RGB: [[f64; 3]; 3] = [
    [3.240_454_2, -1.537_138_5, -0.498_531_4],
    [-0.969_266_0, 1.876_010_8, 0.041_556_0],
    [0.055_643_4, -0.204_025_9, 1.057_225_2],
];

const DELTA: f64 = 6.0 / 29.0;

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn linear_to_srgb(c: f64) -> f64 {
    if c <= 0.003_130_8 {
        12.92 * c
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

fn lab_f(t: f64) -> f64 {
    if t > DELTA.powi(3) {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

fn lab_f_inv(t: f64) -> f64 {
    if t > DELTA {
        t.powi(3)
    } else {
        3.0 * DELTA * DELTA * (t - 4.0 / 29.0)
    }
}

fn white_point() -> [f64; 3] {
    // Row sums, so that sRGB white lands exactly on a = b = 0.
    std::array::from_fn(|i| RGB_TO_XYZ[i].iter().sum())
}

/// One sRGB pixel in `[0, 1]` to `L*a*b*`.
pub fn srgb_pixel_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(|c| srgb_to_linear(c.clamp(0.0, 1.0)));
    let white = white_point();
    let xyz: [f64; 3] =
        std::array::from_fn(|i| (0..3).map(|j| RGB_TO_XYZ[i][j] * lin[j]).sum::<f64>() / white[i]);
    let [fx, fy, fz] = xyz.map(lab_f);
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// Inverse of [`srgb_pixel_to_lab`]; values are not clamped.
pub fn lab_pixel_to_srgb(lab: [f64; 3]) -> [f64; 3] {
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let white = white_point();
    let xyz = [lab_f_inv(fx) * white[0], lab_f_inv(fy) * white[1], lab_f_inv(fz) * white[2]];
    let lin: [f64; 3] = std::array::from_fn(|i| (0..3).map(|j| XYZ_TO_RGB[i][j] * xyz[j]).sum());
    lin.map(linear_to_srgb)
}

/// `(3, H, W)` array of `L*, a*, b*` planes.
#[derive(Debug, Clone, PartialEq)]
pub struct LabTensor(pub Array3<f64>);

impl LabTensor {
    pub fn dims(&self) -> (usize, usize) {
        (self.0.dim().1, self.0.dim().2)
    }

    /// Back to sRGB, clamped into `[0, 1]`.
    pub fn to_rgb(&self) -> ImageTensor {
        let (h, w) = self.dims();
        ImageTensor::from_fn(h, w, |y, x| {
            lab_pixel_to_srgb([self.0[[0, y, x]], self.0[[1, y, x]], self.0[[2, y, x]]])
                .map(|v| v.clamp(0.0, 1.0))
        })
    }
}

/// CIE L*a*b* under D65.
pub fn rgb_to_lab(image: &ImageTensor) -> LabTensor {
    rgb_array_to_lab(image.view())
}

/// Like [`rgb_to_lab`] for raw arrays; values outside `[0, 1]` are clamped with a warning.
pub fn rgb_array_to_lab(rgb: ArrayView3<f64>) -> LabTensor {
    let (_, h, w) = rgb.dim();
    if rgb.iter().any(|v| !(0.0..=1.0).contains(v)) {
        log::warn!("rgb_to_lab: input outside [0, 1] clamped");
    }
    let mut out = Array3::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let lab = srgb_pixel_to_lab([rgb[[0, y, x]], rgb[[1, y, x]], rgb[[2, y, x]]]);
            for c in 0..3 {
                out[[c, y, x]] = lab[c];
            }
        }
    }
    LabTensor(out)
}

/// ITU-R BT.601 luma.
pub fn grayscale(image: ArrayView3<f64>) -> Array2<f64> {
    let (_, h, w) = image.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        0.299 * image[[0, y, x]] + 0.587 * image[[1, y, x]] + 0.114 * image[[2, y, x]]
    })
}

/// 256-bin histogram of values in `[0, 1]`, bin `round(255·v)`.
pub fn histogram_256(values: impl IntoIterator<Item = f64>) -> [u64; 256] {
    let mut hist = [0u64; 256];
    for v in values {
        hist[(v.clamp(0.0, 1.0) * 255.0).round() as usize] += 1;
    }
    hist
}

/// Between-class variance when bins `0..=t` form the lower class.
pub fn between_class_variance(hist: &[u64; 256], t: usize) -> f64 {
    let total: u64 = hist.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let (mut n0, mut s0) = (0u64, 0.0);
    for (b, &n) in hist.iter().enumerate().take(t + 1) {
        n0 += n;
        s0 += b as f64 * n as f64;
    }
    let n1 = total - n0;
    if n0 == 0 || n1 == 0 {
        return 0.0;
    }
    let s1: f64 = hist.iter().enumerate().map(|(b, &n)| b as f64 * n as f64).sum::<f64>() - s0;
    let (w0, w1) = (n0 as f64 / total as f64, n1 as f64 / total as f64);
    let d = s0 / n0 as f64 - s1 / n1 as f64;
    w0 * w1 * d * d
}

/// Otsu bin threshold: the first `t` maximizing between-class variance, or `None`
/// when no split separates anything (a single occupied bin).
pub fn otsu_threshold(hist: &[u64; 256]) -> Option<usize> {
    let mut best = None;
    let mut best_var = 0.0;
    for t in 0..255 {
        let v = between_class_variance(hist, t);
        if v > best_var {
            best_var = v;
            best = Some(t);
        }
    }
    best
}

/// Shadow mask from the grayscale absolute difference of a shadow / shadow-free pair.
///
/// Pixels whose difference bin exceeds the Otsu threshold are marked. A
/// constant difference yields an empty mask.
pub fn otsu_shadow_mask(shadow: &ImageTensor, shadow_free: &ImageTensor) -> Result<BinaryMask, EvalError> {
    check_dims(shadow, shadow_free)?;
    let diff = (grayscale(shadow.view()) - grayscale(shadow_free.view())).mapv(f64::abs);
    let hist = histogram_256(diff.iter().copied());
    let (h, w) = shadow.dims();
    Ok(match otsu_threshold(&hist) {
        None => BinaryMask::zeros(h, w),
        Some(t) => BinaryMask::from_fn(h, w, |y, x| {
            (diff[[y, x]].clamp(0.0, 1.0) * 255.0).round() as usize > t
        }),
    })
}

fn check_dims(a: &ImageTensor, b: &ImageTensor) -> Result<(), EvalError> {
    if a.dims() != b.dims() {
        return Err(EvalError::DimensionMismatch(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    All,
    Shadow,
    NonShadow,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::All, Region::Shadow, Region::NonShadow];

    pub fn as_str(self) -> &'static str {
        match self {
            Region::All => "all",
            Region::Shadow => "shadow",
            Region::NonShadow => "non_shadow",
        }
    }

    /// Whether pixel `(y, x)` belongs to the region under `mask`.
    pub fn contains(self, mask: &BinaryMask, y: usize, x: usize) -> bool {
        match self {
            Region::All => true,
            Region::Shadow => mask.get(y, x),
            Region::NonShadow => !mask.get(y, x),
        }
    }

    fn selector(self, mask: &BinaryMask) -> BinaryMask {
        match self {
            Region::All => BinaryMask::ones(mask.height(), mask.width()),
            Region::Shadow => mask.clone(),
            Region::NonShadow => mask.inverted(),
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which LAB error statistic `region_rmse` reports.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RmseKind {
    /// Per-pixel `|ΔL| + |Δa| + |Δb|`, averaged over region pixels.
    #[default]
    MeanAbsolute,
    /// `sqrt` of the mean squared LAB difference over region pixels and channels.
    RootMeanSquare,
}

impl FromStr for RmseKind {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean_absolute" | "mae" => Ok(RmseKind::MeanAbsolute),
            "root_mean_square" | "rmse" => Ok(RmseKind::RootMeanSquare),
            _ => Err(EvalError::Unknown { what: "rmse kind", value: s.into() }),
        }
    }
}

/// LAB error over a region; an empty region scores 0.
pub fn region_rmse(
    pred: &ImageTensor,
    gt: &ImageTensor,
    mask: &BinaryMask,
    region: Region,
) -> Result<f64, EvalError> {
    region_lab_error(pred, gt, mask, region, RmseKind::MeanAbsolute)
}

pub fn region_lab_error(
    pred: &ImageTensor,
    gt: &ImageTensor,
    mask: &BinaryMask,
    region: Region,
    kind: RmseKind,
) -> Result<f64, EvalError> {
    check_dims(pred, gt)?;
    if pred.dims() != mask.dims() {
        return Err(EvalError::DimensionMismatch(format!("image {:?} vs mask {:?}", pred.dims(), mask.dims())));
    }
    Ok(lab_error(&rgb_to_lab(pred), &rgb_to_lab(gt), mask, region, kind))
}

fn lab_error(a: &LabTensor, b: &LabTensor, mask: &BinaryMask, region: Region, kind: RmseKind) -> f64 {
    let (h, w) = a.dims();
    let mut terms = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !region.contains(mask, y, x) {
                continue;
            }
            let d: [f64; 3] = std::array::from_fn(|c| a.0[[c, y, x]] - b.0[[c, y, x]]);
            terms.push(match kind {
                RmseKind::MeanAbsolute => d.iter().map(|v| v.abs()).sum(),
                RmseKind::RootMeanSquare => d.iter().map(|v| v * v).sum::<f64>() / 3.0,
            });
        }
    }
    if terms.is_empty() {
        log::warn!("region `{region}` is empty; error defined as 0");
        return 0.0;
    }
    let m = pairwise_sum(&terms) / terms.len() as f64;
    match kind {
        RmseKind::MeanAbsolute => m,
        RmseKind::RootMeanSquare => m.sqrt(),
    }
}

/// Cap reported for identical images.
pub const PSNR_CAP: f64 = 100.0;

/// `10·log10(1 / MSE)` over all RGB values, capped at [`PSNR_CAP`].
pub fn psnr(pred: &ImageTensor, gt: &ImageTensor) -> Result<f64, EvalError> {
    check_dims(pred, gt)?;
    Ok(psnr_arrays(pred.view(), gt.view()))
}

fn psnr_arrays(a: ArrayView3<f64>, b: ArrayView3<f64>) -> f64 {
    let sq: Vec<f64> = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).collect();
    let mse = pairwise_sum(&sq) / sq.len().max(1) as f64;
    if mse == 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Normalized 1-D Gaussian of odd length `size`.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Window side for an `h×w` image: 11, or the largest odd size that fits.
pub fn ssim_window_size(h: usize, w: usize) -> usize {
    let s = SSIM_WINDOW.min(h).min(w).max(1);
    if s.is_multiple_of(2) {
        s - 1
    } else {
        s
    }
}

fn filter_valid(img: &Array2<f64>, g: &[f64]) -> Array2<f64> {
    let (h, w) = img.dim();
    let k = g.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = Array2::<f64>::zeros((h, ow));
    for y in 0..h {
        for x in 0..ow {
            rows[[y, x]] = (0..k).map(|i| g[i] * img[[y, x + i]]).sum::<f64>();
        }
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    for y in 0..oh {
        for x in 0..ow {
            out[[y, x]] = (0..k).map(|i| g[i] * rows[[y + i, x]]).sum::<f64>();
        }
    }
    out
}

/// Gaussian-windowed SSIM on BT.601 luma with dynamic range 1, averaged over
/// all windows lying fully inside the image.
pub fn ssim(pred: &ImageTensor, gt: &ImageTensor) -> Result<f64, EvalError> {
    check_dims(pred, gt)?;
    Ok(ssim_gray(&grayscale(pred.view()), &grayscale(gt.view())))
}

fn ssim_gray(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let (h, w) = a.dim();
    let g = gaussian_kernel(ssim_window_size(h, w), SSIM_SIGMA);
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let mu_a = filter_valid(a, &g);
    let mu_b = filter_valid(b, &g);
    let aa = filter_valid(&(a * a), &g);
    let bb = filter_valid(&(b * b), &g);
    let ab = filter_valid(&(a * b), &g);
    let mut vals = Vec::with_capacity(mu_a.len());
    for (((ma, mb), (xx, yy)), xy) in mu_a.iter().zip(&mu_b).zip(aa.iter().zip(&bb)).zip(&ab) {
        let va = xx - ma * ma;
        let vb = yy - mb * mb;
        let cov = xy - ma * mb;
        vals.push(((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2)));
    }
    pairwise_sum(&vals) / vals.len() as f64
}

/// Recursive pairwise summation.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 8 {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}

/// Full-image metrics on region-masked copies: `region(x) = x ⊙ R`.
fn region_image(image: &ImageTensor, selector: &BinaryMask) -> Array3<f64> {
    image.as_array() * &selector.as_array().view().insert_axis(Axis(0))
}

/// Perceptual distance between two images (e.g. a learned metric).
pub trait PerceptualProvider: Sync {
    fn name(&self) -> &str;
    fn distance(&self, a: &ImageTensor, b: &ImageTensor) -> f64;
}

/// Provider that reports nothing; its column is omitted.
#[derive(Debug, Clone, Copy, Default)]
pub struct NullProvider;

impl PerceptualProvider for NullProvider {
    fn name(&self) -> &str {
        "none"
    }

    fn distance(&self, _: &ImageTensor, _: &ImageTensor) -> f64 {
        0.0
    }
}

/// Anything that maps a dataset sample to a restored image.
pub trait Restorer: Sync {
    fn restore(&self, sample: &ShadowTriplet) -> Result<ImageTensor, String>;
}

impl Restorer for Generator {
    fn restore(&self, sample: &ShadowTriplet) -> Result<ImageTensor, String> {
        Generator::restore(self, &sample.shadow, &sample.mask).map_err(|e| e.to_string())
    }
}

/// Returns the shadow image unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityRestorer;

impl Restorer for IdentityRestorer {
    fn restore(&self, sample: &ShadowTriplet) -> Result<ImageTensor, String> {
        Ok(sample.shadow.clone())
    }
}

/// Returns the ground truth, for harness checks.
#[derive(Debug, Clone, Copy, Default)]
pub struct GroundTruthRestorer;

impl Restorer for GroundTruthRestorer {
    fn restore(&self, sample: &ShadowTriplet) -> Result<ImageTensor, String> {
        Ok(sample.shadow_free.clone())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    /// Masks shipped with the dataset.
    #[default]
    Provided,
    /// Masks derived per image with [`otsu_shadow_mask`].
    Otsu,
}

impl FromStr for MaskSource {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "provided" => Ok(MaskSource::Provided),
            "otsu" => Ok(MaskSource::Otsu),
            _ => Err(EvalError::Unknown { what: "mask source", value: s.into() }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionMetrics {
    pub region: Region,
    pub rmse: f64,
    pub psnr: f64,
    pub ssim: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lpips: Option<f64>,
}

/// Metrics of one image, in [`Region::ALL`] order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub index: usize,
    pub regions: Vec<RegionMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedImage {
    pub index: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mask_source: MaskSource,
    pub rmse_kind: RmseKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perceptual: Option<String>,
    /// Dataset averages, one row per region.
    pub regions: Vec<RegionMetrics>,
    pub images_evaluated: usize,
    pub images_skipped: usize,
    pub skipped: Vec<SkippedImage>,
    pub per_image: Vec<ImageMetrics>,
}

impl EvalReport {
    pub fn region(&self, region: Region) -> &RegionMetrics {
        self.regions.iter().find(|r| r.region == region).expect("every region is reported")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// `region,rmse,psnr,ssim[,lpips]`, one row per region.
    pub fn to_csv(&self) -> String {
        let with_lpips = self.perceptual.is_some();
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["region", "rmse", "psnr", "ssim"];
        if with_lpips {
            header.push("lpips");
        }
        w.write_record(&header).expect("in-memory write");
        for r in &self.regions {
            let mut row = vec![r.region.as_str().to_string(), r.rmse.to_string(), r.psnr.to_string(), r.ssim.to_string()];
            if with_lpips {
                row.push(r.lpips.map(|v| v.to_string()).unwrap_or_default());
            }
            w.write_record(&row).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }

    /// Writes `<stem>.json` and `<stem>.csv` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<(), EvalError> {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
        let json = dir.join(format!("{stem}.json"));
        fs::write(&json, self.to_json()).map_err(|e| io_error(&json, e))?;
        let csv = dir.join(format!("{stem}.csv"));
        fs::write(&csv, self.to_csv()).map_err(|e| io_error(&csv, e))?;
        Ok(())
    }
}

/// Options of [`evaluate_dataset`].
#[derive(Clone, Copy, Default)]
pub struct EvalOptions<'a> {
    pub mask_source: MaskSource,
    pub rmse_kind: RmseKind,
    pub provider: Option<&'a dyn PerceptualProvider>,
}

/// All region metrics for one restored image.
pub fn image_metrics(
    pred: &ImageTensor,
    gt: &ImageTensor,
    mask: &BinaryMask,
    rmse_kind: RmseKind,
    provider: Option<&dyn PerceptualProvider>,
) -> Result<Vec<RegionMetrics>, EvalError> {
    check_dims(pred, gt)?;
    if pred.dims() != mask.dims() {
        return Err(EvalError::DimensionMismatch(format!("image {:?} vs mask {:?}", pred.dims(), mask.dims())));
    }
    let lab_p = rgb_to_lab(pred);
    let lab_g = rgb_to_lab(gt);
    Ok(Region::ALL
        .iter()
        .map(|&region| {
            let sel = region.selector(mask);
            let (rp, rg) = (region_image(pred, &sel), region_image(gt, &sel));
            RegionMetrics {
                region,
                rmse: lab_error(&lab_p, &lab_g, mask, region, rmse_kind),
                psnr: psnr_arrays(rp.view(), rg.view()),
                ssim: ssim_gray(&grayscale(rp.view()), &grayscale(rg.view())),
                lpips: match (region, provider) {
                    (Region::All, Some(p)) => Some(p.distance(pred, gt)),
                    _ => None,
                },
            }
        })
        .collect())
}

fn evaluate_one(
    model: &dyn Restorer,
    sample: &ShadowTriplet,
    opts: &EvalOptions<'_>,
) -> Result<Vec<RegionMetrics>, String> {
    let pred = model.restore(sample)?;
    let mask = match opts.mask_source {
        MaskSource::Provided => sample.mask.clone(),
        MaskSource::Otsu => otsu_shadow_mask(&sample.shadow, &sample.shadow_free).map_err(|e| e.to_string())?,
    };
    image_metrics(&pred, &sample.shadow_free, &mask, opts.rmse_kind, opts.provider).map_err(|e| e.to_string())
}

/// Restores every sample, scores it per region and averages over the dataset.
///
/// Images that fail are recorded and skipped.
pub fn evaluate_dataset(
    model: &dyn Restorer,
    dataset: &[ShadowTriplet],
    opts: EvalOptions<'_>,
) -> Result<EvalReport, EvalError> {
    if dataset.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    #[cfg(feature = "parallel")]
    let results: Vec<_> = dataset.par_iter().map(|s| evaluate_one(model, s, &opts)).collect();
    #[cfg(not(feature = "parallel"))]
    let results: Vec<_> = dataset.iter().map(|s| evaluate_one(model, s, &opts)).collect();

    let mut per_image = Vec::new();
    let mut skipped = Vec::new();
    for (index, r) in results.into_iter().enumerate() {
        match r {
            Ok(regions) => per_image.push(ImageMetrics { index, regions }),
            Err(reason) => {
                log::warn!("image {index} skipped: {reason}");
                skipped.push(SkippedImage { index, reason });
            }
        }
    }
    let provider = opts.provider.map(|p| p.name().to_string());
    let regions = Region::ALL
        .iter()
        .enumerate()
        .map(|(i, &region)| {
            let col = |f: fn(&RegionMetrics) -> f64| {
                let v: Vec<f64> = per_image.iter().map(|m| f(&m.regions[i])).collect();
                if v.is_empty() {
                    0.0
                } else {
                    pairwise_sum(&v) / v.len() as f64
                }
            };
            RegionMetrics {
                region,
                rmse: col(|m| m.rmse),
                psnr: col(|m| m.psnr),
                ssim: col(|m| m.ssim),
                lpips: (region == Region::All && provider.is_some()).then(|| col(|m| m.lpips.unwrap_or(0.0))),
            }
        })
        .collect();
    Ok(EvalReport {
        mask_source: opts.mask_source,
        rmse_kind: opts.rmse_kind,
        perceptual: provider,
        regions,
        images_evaluated: per_image.len(),
        images_skipped: skipped.len(),
        skipped,
        per_image,
    })
}

/// Channel mean of a `(C, h, w)` map, min-max normalized (constant → 0.5).
pub fn normalized_channel_mean(w: &FeatureMap) -> Array2<f64> {
    let mean = w.mean_axis(Axis(0)).expect("at least one channel");
    let lo = mean.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = mean.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 0.0 {
        mean.mapv(|_| 0.5)
    } else {
        mean.mapv(|v| (v - lo) / (hi - lo))
    }
}

/// Nearest-neighbour upsampling of a gray map to `height×width`, as a gray RGB image.
pub fn upsample_gray(map: &Array2<f64>, height: usize, width: usize) -> ImageTensor {
    let (h, w) = map.dim();
    ImageTensor::from_fn(height, width, |y, x| {
        let v = map[[(y * h / height).min(h - 1), (x * w / width).min(w - 1)]];
        [v; 3]
    })
}

/// Visualizations of `W1` and `W2` at the source image resolution.
pub fn weight_maps(
    w1: &FeatureMap,
    w2: &FeatureMap,
    size: (usize, usize),
) -> Result<(ImageTensor, ImageTensor), EvalError> {
    if w1.dim() != w2.dim() {
        return Err(EvalError::DimensionMismatch(format!("W1 {:?} vs W2 {:?}", w1.dim(), w2.dim())));
    }
    Ok((
        upsample_gray(&normalized_channel_mean(w1), size.0, size.1),
        upsample_gray(&normalized_channel_mean(w2), size.0, size.1),
    ))
}

/// Absolute `a*` and `b*` differences between two images.
pub fn lab_ab_difference(pred: &ImageTensor, gt: &ImageTensor) -> Result<(Array2<f64>, Array2<f64>), EvalError> {
    check_dims(pred, gt)?;
    let (p, g) = (rgb_to_lab(pred), rgb_to_lab(gt));
    let d = (&p.0 - &g.0).mapv(f64::abs);
    Ok((d.index_axis(Axis(0), 1).to_owned(), d.index_axis(Axis(0), 2).to_owned()))
}

/// Scales a nonnegative map by its maximum into a gray image; an all-zero map stays black.
pub fn heatmap(map: &Array2<f64>) -> ImageTensor {
    let hi = map.iter().copied().fold(0.0, f64::max);
    let (h, w) = map.dim();
    ImageTensor::from_fn(h, w, |y, x| [if hi > 0.0 { map[[y, x]] / hi } else { 0.0 }; 3])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic_shadow_sized;

    #[test]
    fn lab_reference_points() {
        assert_eq!(srgb_pixel_to_lab([0.0; 3]), [0.0, 0.0, 0.0]);
        let white = srgb_pixel_to_lab([1.0; 3]);
        assert!((white[0] - 100.0).abs() < 1e-9 && white[1].abs() < 1e-9 && white[2].abs() < 1e-9);
        let gray = srgb_pixel_to_lab([0.5; 3]);
        assert!((gray[0] - 53.389).abs() < 1e-3, "{gray:?}");
        assert!(gray[1].abs() < 1e-9 && gray[2].abs() < 1e-9);
    }

    #[test]
    fn psnr_closed_forms() {
        let a = ImageTensor::filled(8, 8, [0.5; 3]);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let b = ImageTensor::filled(8, 8, [0.5 + 1.0 / 255.0; 3]);
        assert!((psnr(&a, &b).unwrap() - 20.0 * 255f64.log10()).abs() < 1e-9);
        let c = ImageTensor::filled(8, 8, [0.5 + 0.5 / 255.0; 3]);
        let gain = psnr(&a, &c).unwrap() - psnr(&a, &b).unwrap();
        assert!((gain - 20.0 * 2f64.log10()).abs() < 1e-9);
    }

    #[test]
    fn ssim_identity_and_negative() {
        let a = ImageTensor::from_fn(16, 16, |y, x| [(x as f64) / 15.0, (y as f64) / 15.0, 0.3]);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let neg = ImageTensor::new(a.as_array().mapv(|v| 1.0 - v)).unwrap();
        assert!(ssim(&a, &neg).unwrap() < 1.0);
    }

    #[test]
    fn otsu_rectangle_and_identity() {
        let free = ImageTensor::filled(16, 16, [0.8, 0.7, 0.6]);
        let rect = |y: usize, x: usize| (4..10).contains(&y) && (3..12).contains(&x);
        let shadow = ImageTensor::from_fn(16, 16, |y, x| {
            let p = free.pixel(y, x);
            if rect(y, x) {
                p.map(|v| v * 0.5)
            } else {
                p
            }
        });
        assert_eq!(otsu_shadow_mask(&shadow, &free).unwrap(), BinaryMask::from_fn(16, 16, rect));
        assert_eq!(otsu_shadow_mask(&free, &free).unwrap().count(), 0);
    }

    #[test]
    fn weight_map_rules() {
        let w = Array3::from_elem((4, 2, 2), 0.7);
        let (a, _) = weight_maps(&w, &w, (256, 256)).unwrap();
        assert_eq!(a.dims(), (256, 256));
        assert!(a.as_array().iter().all(|v| *v == 0.5));
        let w = Array3::from_shape_fn((3, 2, 2), |(c, y, x)| (c + 2 * y + x) as f64);
        let m = normalized_channel_mean(&w);
        // Channel means are 1, 2, 3, 4 before normalization.
        assert_eq!(m, ndarray::array![[0.0, 1.0 / 3.0], [2.0 / 3.0, 1.0]]);
    }

    #[test]
    fn identity_dataset_and_fixtures() {
        let data = generate_synthetic_shadow_sized(4, 3, 32).unwrap();
        let gt = evaluate_dataset(&GroundTruthRestorer, &data, EvalOptions::default()).unwrap();
        for r in &gt.regions {
            assert_eq!(r.rmse, 0.0);
            assert_eq!(r.psnr, PSNR_CAP);
            assert!((r.ssim - 1.0).abs() < 1e-12);
        }
        let id = evaluate_dataset(&IdentityRestorer, &data, EvalOptions::default()).unwrap();
        assert!(id.region(Region::Shadow).rmse > id.region(Region::NonShadow).rmse);
        assert_eq!(id.images_evaluated, 3);
        assert!(id.to_csv().starts_with("region,rmse,psnr,ssim\n"));
    }
}

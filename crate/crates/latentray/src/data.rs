//! Training and evaluation data: procedural phantom chest images with a
//! controllable heart-width ratio, CSV manifest ingestion, and image
//! preprocessing.
//!
//! The phantom is built from soft-edged ellipses: a dark thoracic cavity on a
//! mid-gray background, split into two lung fields by a brighter mediastinal
//! band, a bright cardiac ellipse slightly left of center, and faint
//! horizontal rib bands. The cardiac ellipse's widest row is its center row,
//! and its half-width there is exactly `heart_ratio` times the cavity
//! half-width at that row, so the cardiothoracic ratio of the rendered image
//! is `heart_ratio` by construction.

use crate::error::{Error, Result};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// A single-channel square image with values in [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pixels: Array2<f64>,
}

impl Image {
    pub fn new(pixels: Array2<f64>) -> Result<Self> {
        let (h, w) = pixels.dim();
        if h != w {
            return Err(Error::Shape(format!("image must be square, got {h}x{w}")));
        }
        if !h.is_power_of_two() {
            return Err(Error::Shape(format!("image side must be a power of two, got {h}")));
        }
        for &v in pixels.iter() {
            if !v.is_finite() {
                return Err(Error::Numeric("image contains NaN or Inf".into()));
            }
            if !(-1.0..=1.0).contains(&v) {
                return Err(Error::Parameter(format!("pixel value {v} outside [-1, 1]")));
            }
        }
        Ok(Image { pixels })
    }

    /// Clamp out-of-range values instead of rejecting them (generator output
    /// is tanh-bounded but float noise from I/O round trips is tolerated).
    pub fn from_clamped(mut pixels: Array2<f64>) -> Result<Self> {
        pixels.mapv_inplace(|v| v.clamp(-1.0, 1.0));
        Self::new(pixels)
    }

    pub fn side(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn pixels(&self) -> &Array2<f64> {
        &self.pixels
    }

    pub fn into_pixels(self) -> Array2<f64> {
        self.pixels
    }

    /// Quantize to 8-bit grayscale: [-1, 1] -> [0, 255].
    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|&v| (((v + 1.0) * 0.5 * 255.0).round()).clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let side = self.side() as u32;
        let buf = image::GrayImage::from_raw(side, side, self.to_u8())
            .expect("buffer size matches dimensions");
        buf.save(path)?;
        Ok(())
    }
}

/// Healthy/diseased class by the cardiothoracic-ratio convention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClassLabel {
    Healthy,
    Cardiomegaly,
}

/// True rendering parameters attached to a phantom record.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub theta: f64,
    pub label: ClassLabel,
}

impl GroundTruth {
    pub fn from_theta(theta: f64) -> Self {
        let label = if theta > 0.5 {
            ClassLabel::Cardiomegaly
        } else {
            ClassLabel::Healthy
        };
        GroundTruth { theta, label }
    }
}

pub const THETA_MIN: f64 = 0.30;
pub const THETA_MAX: f64 = 0.80;
pub const HEALTHY_BAND: (f64, f64) = (0.35, 0.45);
pub const CARDIOMEGALY_BAND: (f64, f64) = (0.58, 0.72);

/// Parameters of one rendered phantom.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PhantomParams {
    pub image_side: usize,
    pub heart_ratio: f64,
    pub jitter_seed: u64,
    pub intensity_scale: f64,
    pub noise_sigma: f64,
}

impl PhantomParams {
    pub fn new(image_side: usize, heart_ratio: f64, jitter_seed: u64) -> Self {
        PhantomParams {
            image_side,
            heart_ratio,
            jitter_seed,
            intensity_scale: 1.0,
            noise_sigma: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if ![32, 64, 128].contains(&self.image_side) {
            return Err(Error::Parameter(format!(
                "image_side must be one of 32, 64, 128; got {}",
                self.image_side
            )));
        }
        if !(THETA_MIN..=THETA_MAX).contains(&self.heart_ratio) {
            return Err(Error::Parameter(format!(
                "heart_ratio {} outside [{THETA_MIN}, {THETA_MAX}]",
                self.heart_ratio
            )));
        }
        if !(self.intensity_scale > 0.0 && self.intensity_scale <= 1.0) {
            return Err(Error::Parameter(format!(
                "intensity_scale {} outside (0, 1]",
                self.intensity_scale
            )));
        }
        if self.noise_sigma < 0.0 || !self.noise_sigma.is_finite() {
            return Err(Error::Parameter(format!("noise_sigma {} invalid", self.noise_sigma)));
        }
        Ok(())
    }
}

// Intensity levels of the phantom structures (scaled by intensity_scale).
const BG_LEVEL: f64 = 0.0;
const CAVITY_LEVEL: f64 = -0.80;
const MEDIASTINUM_LEVEL: f64 = -0.42;
const HEART_LEVEL: f64 = 0.75;
const RIB_AMPLITUDE: f64 = 0.06;
const EDGE_SOFTNESS_PX: f64 = 3.0;

struct Anatomy {
    cavity_cx: f64,
    cavity_cy: f64,
    cavity_a: f64,
    cavity_b: f64,
    heart_cx: f64,
    heart_cy: f64,
    heart_a: f64,
    heart_b: f64,
    medi_cx: f64,
    medi_halfwidth: f64,
    rib_phase: f64,
    rib_freq: f64,
}

impl Anatomy {
    fn from_params(p: &PhantomParams) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(p.jitter_seed);
        let mut j = |scale: f64| rng.gen_range(-1.0..1.0) * scale;

        let cavity_cx = j(0.015);
        let cavity_cy = 0.02 + j(0.015);
        let cavity_a = 0.80 * (1.0 + j(0.02));
        let cavity_b = 0.86 * (1.0 + j(0.02));

        let heart_cy = 0.20 + j(0.03);
        let heart_cx = -0.06 + j(0.02);
        let heart_b = 0.30 * (1.0 + j(0.06));

        // Heart half-width: exactly theta times the cavity half-width at the
        // heart's center row, which is also the heart's widest row.
        let rel = (heart_cy - cavity_cy) / cavity_b;
        let cavity_halfwidth_at_heart = cavity_a * (1.0 - rel * rel).max(0.0).sqrt();
        let heart_a = p.heart_ratio * cavity_halfwidth_at_heart;

        let medi_cx = heart_cx * 0.5 + j(0.01);
        let medi_halfwidth = 0.13 * (1.0 + j(0.10));
        let rib_phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let rib_freq = 3.2 * (1.0 + j(0.05));

        Anatomy {
            cavity_cx,
            cavity_cy,
            cavity_a,
            cavity_b,
            heart_cx,
            heart_cy,
            heart_a,
            heart_b,
            medi_cx,
            medi_halfwidth,
            rib_phase,
            rib_freq,
        }
    }
}

/// Linear-ramp coverage of an ellipse with a soft edge of `EDGE_SOFTNESS_PX`
/// pixels: 1 well inside, 0 well outside, 0.5 on the boundary.
fn ellipse_coverage(x: f64, y: f64, cx: f64, cy: f64, a: f64, b: f64, half_side_px: f64) -> f64 {
    let dx = (x - cx) / a;
    let dy = (y - cy) / b;
    let r = (dx * dx + dy * dy).sqrt();
    let dist_px = (r - 1.0) * a.min(b) * half_side_px;
    (0.5 - dist_px / EDGE_SOFTNESS_PX).clamp(0.0, 1.0)
}

fn band_coverage(x: f64, cx: f64, halfwidth: f64, half_side_px: f64) -> f64 {
    let dist_px = ((x - cx).abs() - halfwidth) * half_side_px;
    (0.5 - dist_px / EDGE_SOFTNESS_PX).clamp(0.0, 1.0)
}

/// Render a phantom chest image. Bit-deterministic given the parameters.
pub fn generate_phantom(params: &PhantomParams) -> Result<(Image, GroundTruth)> {
    params.validate()?;
    let side = params.image_side;
    let half = side as f64 / 2.0;
    let anat = Anatomy::from_params(params);
    let s = params.intensity_scale;

    let mut pixels = Array2::<f64>::zeros((side, side));
    for i in 0..side {
        // pixel centers in normalized [-1, 1] coordinates, y growing downward
        let y = ((i as f64 + 0.5) / side as f64) * 2.0 - 1.0;
        for jx in 0..side {
            let x = ((jx as f64 + 0.5) / side as f64) * 2.0 - 1.0;

            let cov_cavity = ellipse_coverage(
                x, y, anat.cavity_cx, anat.cavity_cy, anat.cavity_a, anat.cavity_b, half,
            );
            let mut v = BG_LEVEL + (CAVITY_LEVEL * s - BG_LEVEL) * cov_cavity;

            // faint horizontal rib bands, only inside the cavity
            let rib =
                RIB_AMPLITUDE * s * (std::f64::consts::TAU * anat.rib_freq * y + anat.rib_phase).sin();
            v += rib * cov_cavity;

            // mediastinal band splits the cavity into two lung fields
            let cov_medi = band_coverage(x, anat.medi_cx, anat.medi_halfwidth, half) * cov_cavity;
            v += (MEDIASTINUM_LEVEL * s - v) * cov_medi;

            // cardiac ellipse on top
            let cov_heart = ellipse_coverage(
                x, y, anat.heart_cx, anat.heart_cy, anat.heart_a, anat.heart_b, half,
            );
            v += (HEART_LEVEL * s - v) * cov_heart;

            pixels[(i, jx)] = v;
        }
    }

    if params.noise_sigma > 0.0 {
        let mut noise_rng = ChaCha8Rng::seed_from_u64(params.jitter_seed ^ 0x9E37_79B9_7F4A_7C15);
        pixels.mapv_inplace(|v| {
            let z: f64 = StandardNormal.sample(&mut noise_rng);
            (v + z * params.noise_sigma).clamp(-1.0, 1.0)
        });
    } else {
        pixels.mapv_inplace(|v| v.clamp(-1.0, 1.0));
    }

    Ok((Image::new(pixels)?, GroundTruth::from_theta(params.heart_ratio)))
}

/// Radiographic view of a manifest record.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum View {
    Frontal,
    Lateral,
}

/// CheXpert-style cardiomegaly annotation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CardioLabel {
    Positive,
    Negative,
    Uncertain,
    Missing,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    pub image_path: String,
    pub view: View,
    pub cardio_label: CardioLabel,
    pub ground_truth: Option<GroundTruth>,
}

/// Labeled image records plus the directory paths resolve against.
#[derive(Clone, Debug, Default)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn resolve(&self, record: &ManifestRecord) -> PathBuf {
        self.root.join(&record.image_path)
    }
}

/// Mix a record index into a dataset seed so per-record streams are
/// independent of iteration order.
pub fn record_seed(dataset_seed: u64, index: usize) -> u64 {
    // splitmix64 finalizer
    let mut z = dataset_seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A sampled phantom cohort: manifest records plus the exact rendering
/// parameters for each.
#[derive(Clone, Debug)]
pub struct PhantomDataset {
    pub manifest: DatasetManifest,
    pub params: Vec<PhantomParams>,
}

impl PhantomDataset {
    /// Render every record to an in-memory image, in record order.
    pub fn render_all(&self) -> Result<Vec<Image>> {
        self.params
            .iter()
            .map(|p| generate_phantom(p).map(|(img, _)| img))
            .collect()
    }

    /// Write PNGs plus `manifest.csv` into `dir`.
    pub fn materialize(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        for (record, params) in self.manifest.records.iter().zip(&self.params) {
            let (img, _) = generate_phantom(params)?;
            img.save_png(&dir.join(&record.image_path))?;
        }
        let manifest_path = dir.join("manifest.csv");
        let mut on_disk = self.manifest.clone();
        on_disk.root = dir.to_path_buf();
        write_manifest(&on_disk, &manifest_path)?;
        Ok(manifest_path)
    }
}

/// Sample a labeled phantom cohort. Healthy heart ratios are drawn uniformly
/// from [0.35, 0.45], cardiomegaly from [0.58, 0.72]; the gap keeps the two
/// classes separable by construction.
pub fn sample_phantom_dataset(
    n: usize,
    class_fractions: (f64, f64),
    seed: u64,
    image_side: usize,
    noise_sigma: f64,
) -> Result<PhantomDataset> {
    if n < 2 {
        return Err(Error::Parameter(format!("cohort size must be >= 2, got {n}")));
    }
    let (f_healthy, f_cardio) = class_fractions;
    if f_healthy < 0.0 || f_cardio < 0.0 || (f_healthy + f_cardio - 1.0).abs() > 1e-9 {
        return Err(Error::Parameter(format!(
            "class fractions must be non-negative and sum to 1, got ({f_healthy}, {f_cardio})"
        )));
    }
    let n_healthy = (((n as f64) * f_healthy).round() as usize).min(n);

    let mut records = Vec::with_capacity(n);
    let mut params = Vec::with_capacity(n);
    for i in 0..n {
        let rseed = record_seed(seed, i);
        let mut rng = ChaCha8Rng::seed_from_u64(rseed);
        let healthy = i < n_healthy;
        let (lo, hi) = if healthy { HEALTHY_BAND } else { CARDIOMEGALY_BAND };
        let theta = rng.gen_range(lo..hi);
        let jitter_seed = rng.gen::<u64>();
        let gt = GroundTruth::from_theta(theta);
        let mut p = PhantomParams::new(image_side, theta, jitter_seed);
        p.noise_sigma = noise_sigma;
        p.validate()?;
        records.push(ManifestRecord {
            image_path: format!("phantom_{i:05}.png"),
            view: View::Frontal,
            cardio_label: if healthy { CardioLabel::Negative } else { CardioLabel::Positive },
            ground_truth: Some(gt),
        });
        params.push(p);
    }
    Ok(PhantomDataset {
        manifest: DatasetManifest {
            records,
            root: PathBuf::new(),
        },
        params,
    })
}

const COL_PATH: &str = "Path";
const COL_VIEW: &str = "Frontal/Lateral";
const COL_CARDIO: &str = "Cardiomegaly";
const COL_THETA: &str = "Theta";

/// Read a CheXpert-convention CSV manifest. Lateral rows are dropped, label
/// codes map 1.0 -> positive, 0.0 -> negative, -1.0 -> uncertain, blank ->
/// missing, and row order is preserved. Every retained image path must
/// resolve relative to the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let root = path.parent().unwrap_or_else(|| Path::new("")).to_path_buf();
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let (Some(ci_path), Some(ci_view), Some(ci_cardio)) =
        (find(COL_PATH), find(COL_VIEW), find(COL_CARDIO))
    else {
        return Err(Error::Format(format!(
            "manifest must contain columns {COL_PATH}, {COL_VIEW}, {COL_CARDIO}"
        )));
    };
    let ci_theta = find(COL_THETA);

    let mut records = Vec::new();
    for row in reader.records() {
        let row = row?;
        let get = |i: usize| row.get(i).unwrap_or("").trim();
        let view = match get(ci_view).to_ascii_lowercase().as_str() {
            "frontal" => View::Frontal,
            "lateral" => View::Lateral,
            other => {
                return Err(Error::Format(format!("unknown view value '{other}'")));
            }
        };
        if view == View::Lateral {
            continue;
        }
        let cardio_raw = get(ci_cardio);
        let cardio_label = if cardio_raw.is_empty() {
            CardioLabel::Missing
        } else {
            match cardio_raw.parse::<f64>() {
                Ok(v) if v == 1.0 => CardioLabel::Positive,
                Ok(v) if v == 0.0 => CardioLabel::Negative,
                Ok(v) if v == -1.0 => CardioLabel::Uncertain,
                _ => {
                    return Err(Error::Format(format!(
                        "unrecognized Cardiomegaly value '{cardio_raw}'"
                    )));
                }
            }
        };
        let ground_truth = match ci_theta {
            Some(ci) => {
                let raw = get(ci);
                if raw.is_empty() {
                    None
                } else {
                    let theta = raw
                        .parse::<f64>()
                        .map_err(|_| Error::Format(format!("bad Theta value '{raw}'")))?;
                    Some(GroundTruth::from_theta(theta))
                }
            }
            None => None,
        };
        records.push(ManifestRecord {
            image_path: get(ci_path).to_string(),
            view,
            cardio_label,
            ground_truth,
        });
    }

    let manifest = DatasetManifest { records, root };
    for record in &manifest.records {
        let p = manifest.resolve(record);
        if !p.exists() {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("manifest references missing image {}", p.display()),
            )));
        }
    }
    Ok(manifest)
}

/// Write a manifest in the same convention `load_manifest` reads.
pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let has_theta = manifest.records.iter().any(|r| r.ground_truth.is_some());
    let mut writer = csv::Writer::from_path(path)?;
    let mut header = vec![COL_PATH, COL_VIEW, COL_CARDIO];
    if has_theta {
        header.push(COL_THETA);
    }
    writer.write_record(&header)?;
    for r in &manifest.records {
        let view = match r.view {
            View::Frontal => "Frontal",
            View::Lateral => "Lateral",
        };
        let cardio = match r.cardio_label {
            CardioLabel::Positive => "1.0",
            CardioLabel::Negative => "0.0",
            CardioLabel::Uncertain => "-1.0",
            CardioLabel::Missing => "",
        };
        let mut row = vec![r.image_path.clone(), view.to_string(), cardio.to_string()];
        if has_theta {
            row.push(match &r.ground_truth {
                Some(gt) => format!("{}", gt.theta),
                None => String::new(),
            });
        }
        writer.write_record(&row)?;
    }
    writer.flush()?;
    Ok(())
}

/// Exact box-filter (area-weighted) resampling of a square grid.
pub fn area_resample(src: &Array2<f64>, out_side: usize) -> Array2<f64> {
    let (in_h, in_w) = src.dim();
    debug_assert_eq!(in_h, in_w);
    let n = in_h as f64;
    let m = out_side as f64;
    let ratio = n / m;
    let mut out = Array2::<f64>::zeros((out_side, out_side));
    // 1-D overlap weights: output cell k covers [k*r, (k+1)*r)
    let overlaps: Vec<Vec<(usize, f64)>> = (0..out_side)
        .map(|k| {
            let lo = k as f64 * ratio;
            let hi = (k as f64 + 1.0) * ratio;
            let mut w = Vec::new();
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(in_h);
            for i in first..last {
                let a = (i as f64).max(lo);
                let b = ((i + 1) as f64).min(hi);
                if b > a {
                    w.push((i, (b - a) / ratio));
                }
            }
            w
        })
        .collect();
    for (oi, wi) in overlaps.iter().enumerate() {
        for (oj, wj) in overlaps.iter().enumerate() {
            let mut acc = 0.0;
            for &(i, a) in wi {
                for &(j, b) in wj {
                    acc += a * b * src[(i, j)];
                }
            }
            out[(oi, oj)] = acc;
        }
    }
    out
}

/// Decode an 8-bit grayscale image file, center-crop to square, area-resample
/// to `side`, and map [0, 255] linearly onto [-1, 1].
pub fn preprocess(path: &Path, side: usize) -> Result<Image> {
    let img = image::open(path)?;
    let gray = img.to_luma8();
    preprocess_gray(&gray, side)
}

pub fn preprocess_gray(gray: &image::GrayImage, side: usize) -> Result<Image> {
    let (w, h) = gray.dimensions();
    let s = w.min(h);
    let x0 = (w - s) / 2;
    let y0 = (h - s) / 2;
    let mut grid = Array2::<f64>::zeros((s as usize, s as usize));
    for i in 0..s {
        for j in 0..s {
            grid[(i as usize, j as usize)] = gray.get_pixel(x0 + j, y0 + i).0[0] as f64;
        }
    }
    let resized = if s as usize == side { grid } else { area_resample(&grid, side) };
    let mapped = resized.mapv(|v| (v / 255.0) * 2.0 - 1.0);
    Image::from_clamped(mapped)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phantom_is_bit_deterministic() {
        let p = PhantomParams::new(64, 0.55, 123);
        let (a, _) = generate_phantom(&p).unwrap();
        let (b, _) = generate_phantom(&p).unwrap();
        assert_eq!(a.pixels(), b.pixels());
    }

    #[test]
    fn phantom_labels_follow_threshold() {
        let (_, gt) = generate_phantom(&PhantomParams::new(64, 0.40, 1)).unwrap();
        assert_eq!(gt.label, ClassLabel::Healthy);
        assert!((gt.theta - 0.40).abs() < 1e-12);
        let (_, gt) = generate_phantom(&PhantomParams::new(64, 0.65, 1)).unwrap();
        assert_eq!(gt.label, ClassLabel::Cardiomegaly);
    }

    #[test]
    fn phantom_rejects_bad_parameters() {
        assert!(generate_phantom(&PhantomParams::new(64, 0.95, 1)).is_err());
        assert!(generate_phantom(&PhantomParams::new(48, 0.5, 1)).is_err());
        let mut p = PhantomParams::new(64, 0.5, 1);
        p.intensity_scale = 0.0;
        assert!(generate_phantom(&p).is_err());
    }

    #[test]
    fn phantom_pixels_in_range() {
        let mut p = PhantomParams::new(32, 0.7, 9);
        p.noise_sigma = 0.1;
        let (img, _) = generate_phantom(&p).unwrap();
        assert!(img.pixels().iter().all(|v| (-1.0..=1.0).contains(v) && v.is_finite()));
    }

    #[test]
    fn sampler_hits_exact_class_counts() {
        let ds = sample_phantom_dataset(350, (100.0 / 350.0, 250.0 / 350.0), 0, 64, 0.02).unwrap();
        let healthy = ds
            .manifest
            .records
            .iter()
            .filter(|r| r.ground_truth.unwrap().label == ClassLabel::Healthy)
            .count();
        assert_eq!(healthy, 100);
        assert_eq!(ds.manifest.len() - healthy, 250);

        let ds2 = sample_phantom_dataset(2, (0.5, 0.5), 7, 64, 0.0).unwrap();
        let labels: Vec<_> = ds2
            .manifest
            .records
            .iter()
            .map(|r| r.ground_truth.unwrap().label)
            .collect();
        assert_eq!(labels, vec![ClassLabel::Healthy, ClassLabel::Cardiomegaly]);
    }

    #[test]
    fn sampler_is_deterministic_and_respects_bands() {
        let a = sample_phantom_dataset(40, (0.5, 0.5), 3, 64, 0.02).unwrap();
        let b = sample_phantom_dataset(40, (0.5, 0.5), 3, 64, 0.02).unwrap();
        assert_eq!(a.manifest.records, b.manifest.records);
        for r in &a.manifest.records {
            let gt = r.ground_truth.unwrap();
            match gt.label {
                ClassLabel::Healthy => {
                    assert!((HEALTHY_BAND.0..HEALTHY_BAND.1).contains(&gt.theta))
                }
                ClassLabel::Cardiomegaly => {
                    assert!((CARDIOMEGALY_BAND.0..CARDIOMEGALY_BAND.1).contains(&gt.theta))
                }
            }
        }
    }

    #[test]
    fn sampler_rejects_bad_inputs() {
        assert!(sample_phantom_dataset(1, (0.5, 0.5), 0, 64, 0.0).is_err());
        assert!(sample_phantom_dataset(10, (0.7, 0.7), 0, 64, 0.0).is_err());
    }

    #[test]
    fn manifest_round_trip_preserves_records() {
        let dir = tempfile::tempdir().unwrap();
        let ds = sample_phantom_dataset(6, (0.5, 0.5), 11, 32, 0.0).unwrap();
        let manifest_path = ds.materialize(dir.path()).unwrap();
        let loaded = load_manifest(&manifest_path).unwrap();
        assert_eq!(loaded.records.len(), 6);
        for (a, b) in loaded.records.iter().zip(&ds.manifest.records) {
            assert_eq!(a.image_path, b.image_path);
            assert_eq!(a.view, b.view);
            assert_eq!(a.cardio_label, b.cardio_label);
            let (ga, gb) = (a.ground_truth.unwrap(), b.ground_truth.unwrap());
            assert_eq!(ga.theta.to_bits(), gb.theta.to_bits());
            assert_eq!(ga.label, gb.label);
        }
    }

    #[test]
    fn manifest_filters_laterals_and_maps_labels() {
        let dir = tempfile::tempdir().unwrap();
        // a tiny real PNG so path resolution succeeds
        let img = Image::new(Array2::zeros((8, 8))).unwrap();
        img.save_png(&dir.path().join("p.png")).unwrap();
        let csv_path = dir.path().join("m.csv");
        std::fs::write(
            &csv_path,
            "Path,Frontal/Lateral,Cardiomegaly,Extra\n\
             p.png,Lateral,1.0,x\n\
             p.png,Frontal,1.0,x\n\
             p.png,Frontal,0.0,x\n\
             p.png,Frontal,-1.0,x\n\
             p.png,Frontal,,x\n",
        )
        .unwrap();
        let m = load_manifest(&csv_path).unwrap();
        assert_eq!(m.records.len(), 4); // lateral dropped
        assert_eq!(m.records[0].cardio_label, CardioLabel::Positive);
        assert_eq!(m.records[1].cardio_label, CardioLabel::Negative);
        assert_eq!(m.records[2].cardio_label, CardioLabel::Uncertain);
        assert_eq!(m.records[3].cardio_label, CardioLabel::Missing);
    }

    #[test]
    fn manifest_errors() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.csv");
        std::fs::write(&bad, "Path,SomethingElse\np.png,1\n").unwrap();
        assert!(matches!(load_manifest(&bad), Err(Error::Format(_))));

        let missing_img = dir.path().join("m.csv");
        std::fs::write(&missing_img, "Path,Frontal/Lateral,Cardiomegaly\nnope.png,Frontal,1.0\n")
            .unwrap();
        assert!(matches!(load_manifest(&missing_img), Err(Error::Io(_))));

        assert!(load_manifest(&dir.path().join("does_not_exist.csv")).is_err());
    }

    #[test]
    fn preprocess_maps_endpoints() {
        let dir = tempfile::tempdir().unwrap();
        for (val, expect) in [(0u8, -1.0), (255u8, 1.0)] {
            let buf = image::GrayImage::from_pixel(32, 32, image::Luma([val]));
            let p = dir.path().join(format!("c{val}.png"));
            buf.save(&p).unwrap();
            let img = preprocess(&p, 32).unwrap();
            assert!(img.pixels().iter().all(|&v| (v - expect).abs() < 1e-12));
        }
    }

    #[test]
    fn preprocess_crops_then_resizes() {
        // 100x80 input: crop to central 80x80, then resample to 64
        let mut buf = image::GrayImage::from_pixel(100, 80, image::Luma([0]));
        for y in 0..80 {
            for x in 10..90 {
                buf.put_pixel(x, y, image::Luma([200]));
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rect.png");
        buf.save(&p).unwrap();
        let img = preprocess(&p, 64).unwrap();
        assert_eq!(img.side(), 64);
        let expect = (200.0 / 255.0) * 2.0 - 1.0;
        assert!(img.pixels().iter().all(|&v| (v - expect).abs() < 1e-9));
    }

    #[test]
    fn area_resample_averages_blocks() {
        let src = Array2::from_shape_fn((4, 4), |(i, j)| (i * 4 + j) as f64);
        let out = area_resample(&src, 2);
        assert!((out[(0, 0)] - (0.0 + 1.0 + 4.0 + 5.0) / 4.0).abs() < 1e-12);
        assert!((out[(1, 1)] - (10.0 + 11.0 + 14.0 + 15.0) / 4.0).abs() < 1e-12);
    }

    #[test]
    fn image_validation() {
        assert!(Image::new(Array2::zeros((8, 8))).is_ok());
        assert!(Image::new(Array2::zeros((8, 9))).is_err());
        assert!(Image::new(Array2::zeros((12, 12))).is_err()); // not power of two
        assert!(Image::new(Array2::from_elem((8, 8), 2.0)).is_err());
        assert!(Image::new(Array2::from_elem((8, 8), f64::NAN)).is_err());
    }
}

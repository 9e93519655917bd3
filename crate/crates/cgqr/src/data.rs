//! Dataset ingestion, preprocessing, boundary-target synthesis, patient-level
//! splitting, and the synthetic echo-like dataset generator.
//!
//! Images are stored as `Array2<f64>` (row-major, `[y, x]`), masks as
//! `Array2<u8>` with label values in `0..=K` (0 = background).

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CgqrError, Result};
use crate::pgm;

pub const STANDARDIZE_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum View {
    #[serde(rename = "2CH")]
    TwoChamber,
    #[serde(rename = "4CH")]
    FourChamber,
    #[serde(rename = "SYNTH")]
    Synth,
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            View::TwoChamber => "2CH",
            View::FourChamber => "4CH",
            View::Synth => "SYNTH",
        };
        f.write_str(s)
    }
}

impl View {
    pub fn parse(s: &str) -> Option<View> {
        match s {
            "2CH" => Some(View::TwoChamber),
            "4CH" => Some(View::FourChamber),
            "SYNTH" => Some(View::Synth),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "ED")]
    Ed,
    #[serde(rename = "ES")]
    Es,
    #[serde(rename = "NONE")]
    None,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Phase::Ed => "ED",
            Phase::Es => "ES",
            Phase::None => "NONE",
        };
        f.write_str(s)
    }
}

impl Phase {
    /// Accepts an optional trailing frame index ("NONE0", "ED" ...) so a
    /// patient directory can hold several frames of the same phase.
    pub fn parse(s: &str) -> Option<Phase> {
        for (tok, p) in [("ED", Phase::Ed), ("ES", Phase::Es), ("NONE", Phase::None)] {
            if let Some(rest) = s.strip_prefix(tok) {
                if rest.is_empty() || rest.chars().all(|c| c.is_ascii_digit()) {
                    return Some(p);
                }
            }
        }
        None
    }
}

/// A raw (unpreprocessed) image/mask pair.
#[derive(Debug, Clone)]
pub struct RawSample {
    pub image: Array2<f64>,
    pub mask: Array2<u8>,
    pub patient_id: String,
    pub view: View,
    pub phase: Phase,
}

impl RawSample {
    pub fn validate(&self, n_classes: u8) -> Result<()> {
        if self.image.dim() != self.mask.dim() {
            return Err(CgqrError::Shape(format!(
                "image {:?} vs mask {:?} for patient {}",
                self.image.dim(),
                self.mask.dim(),
                self.patient_id
            )));
        }
        if let Some(bad) = self.mask.iter().find(|&&v| v > n_classes) {
            return Err(CgqrError::Data(format!(
                "mask label {bad} exceeds n_classes {n_classes}"
            )));
        }
        Ok(())
    }

    pub fn has_foreground(&self) -> bool {
        self.mask.iter().any(|&v| v != 0)
    }
}

/// A preprocessed sample ready for the model.
#[derive(Debug, Clone)]
pub struct ImageSample {
    pub image: Array2<f64>,
    pub mask: Array2<u8>,
    pub boundary: Array2<u8>,
    pub patient_id: String,
    pub phase: Phase,
}

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<ImageSample>,
    pub val: Vec<ImageSample>,
    pub split_ratio: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub frames_per_patient: usize,
    pub image_size: (usize, usize),
    pub n_classes: u8,
    pub noise_level: f64,
    pub contrast: f64,
    pub domain_shift: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_patients: 4,
            frames_per_patient: 4,
            image_size: (64, 64),
            n_classes: 3,
            noise_level: 0.1,
            contrast: 0.8,
            domain_shift: 0.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 1 {
            return Err(CgqrError::Config("n_classes must be >= 1".into()));
        }
        if self.image_size.0 < 32 || self.image_size.1 < 32 {
            return Err(CgqrError::Config("image_size dims must be >= 32".into()));
        }
        if self.contrast <= 0.0 || self.contrast > 1.0 {
            return Err(CgqrError::Config("contrast must be in (0, 1]".into()));
        }
        if self.noise_level < 0.0 || self.domain_shift < 0.0 {
            return Err(CgqrError::Config("noise_level/domain_shift must be >= 0".into()));
        }
        Ok(())
    }
}

/// Preprocessing parameters applied to every raw sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub target_size: (usize, usize),
    pub boundary_thickness: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig { target_size: (256, 256), boundary_thickness: 1 }
    }
}

/// Per-image standardization to zero mean, unit variance. A constant image
/// maps to all zeros (its zero-centered numerator is divided by eps only).
pub fn normalize_image(image: &Array2<f64>) -> Result<Array2<f64>> {
    if image.is_empty() {
        return Err(CgqrError::Data("normalize_image: empty image".into()));
    }
    let n = image.len() as f64;
    let mean = image.sum() / n;
    let var = image.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    Ok(image.mapv(|v| (v - mean) / (std + STANDARDIZE_EPS)))
}

/// Bilinear resize for the image, nearest-neighbor for the mask.
pub fn resize_pair(
    image: &Array2<f64>,
    mask: &Array2<u8>,
    target: (usize, usize),
) -> Result<(Array2<f64>, Array2<u8>)> {
    if image.dim() != mask.dim() {
        return Err(CgqrError::Shape(format!(
            "resize_pair: image {:?} vs mask {:?}",
            image.dim(),
            mask.dim()
        )));
    }
    if target.0 == 0 || target.1 == 0 {
        return Err(CgqrError::Config("resize_pair: target dims must be >= 1".into()));
    }
    Ok((resize_bilinear(image, target), resize_nearest(mask, target)))
}

pub fn resize_bilinear(src: &Array2<f64>, target: (usize, usize)) -> Array2<f64> {
    let (sh, sw) = src.dim();
    let (th, tw) = target;
    let sy = sh as f64 / th as f64;
    let sx = sw as f64 / tw as f64;
    Array2::from_shape_fn((th, tw), |(y, x)| {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (sh - 1) as f64);
        let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (sw - 1) as f64);
        let y0 = fy.floor() as usize;
        let x0 = fx.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let x1 = (x0 + 1).min(sw - 1);
        let dy = fy - y0 as f64;
        let dx = fx - x0 as f64;
        src[[y0, x0]] * (1.0 - dy) * (1.0 - dx)
            + src[[y0, x1]] * (1.0 - dy) * dx
            + src[[y1, x0]] * dy * (1.0 - dx)
            + src[[y1, x1]] * dy * dx
    })
}

pub fn resize_nearest(src: &Array2<u8>, target: (usize, usize)) -> Array2<u8> {
    let (sh, sw) = src.dim();
    let (th, tw) = target;
    let sy = sh as f64 / th as f64;
    let sx = sw as f64 / tw as f64;
    Array2::from_shape_fn((th, tw), |(y, x)| {
        let iy = (((y as f64 + 0.5) * sy).floor() as usize).min(sh - 1);
        let ix = (((x as f64 + 0.5) * sx).floor() as usize).min(sw - 1);
        src[[iy, ix]]
    })
}

/// Binary boundary target: the morphological gradient (dilation minus
/// erosion, 3x3 cross, iterated `thickness` times, replicate padding) of the
/// multi-class label grid.
pub fn make_boundary_target(mask: &Array2<u8>, thickness: usize) -> Result<Array2<u8>> {
    if thickness < 1 {
        return Err(CgqrError::Config("boundary thickness must be >= 1".into()));
    }
    let mut dil = mask.clone();
    let mut ero = mask.clone();
    for _ in 0..thickness {
        dil = cross_morph(&dil, true);
        ero = cross_morph(&ero, false);
    }
    Ok(Array2::from_shape_fn(mask.dim(), |ix| u8::from(dil[ix] != ero[ix])))
}

fn cross_morph(m: &Array2<u8>, dilate: bool) -> Array2<u8> {
    let (h, w) = m.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut acc = m[[y, x]];
        // replicate padding: clamped neighbor coordinates
        let ns = [
            (y.saturating_sub(1), x),
            ((y + 1).min(h - 1), x),
            (y, x.saturating_sub(1)),
            (y, (x + 1).min(w - 1)),
        ];
        for (ny, nx) in ns {
            let v = m[[ny, nx]];
            acc = if dilate { acc.max(v) } else { acc.min(v) };
        }
        acc
    })
}

/// Full preprocessing chain: resize, standardize, synthesize boundary target.
pub fn preprocess(raw: &RawSample, cfg: &PreprocessConfig) -> Result<ImageSample> {
    let (img, mask) = resize_pair(&raw.image, &raw.mask, cfg.target_size)?;
    let img = normalize_image(&img)?;
    let boundary = make_boundary_target(&mask, cfg.boundary_thickness)?;
    Ok(ImageSample {
        image: img,
        mask,
        boundary,
        patient_id: raw.patient_id.clone(),
        phase: raw.phase,
    })
}

///// Frame extraction: one sample per frame, with optional exclusion of frames
/// that contain no foreground pixels.
pub fn extract_frames(sequence: Vec<RawSample>, drop_empty: bool) -> Vec<RawSample> {
    sequence
        .into_iter()
        .filter(|s| !drop_empty || s.has_foreground())
        .collect()
}

/// Deterministic patient-level split. Patients are shuffled with a seeded
/// generator; no patient appears on both sides.
pub fn split_by_patient(
    samples: &[RawSample],
    ratio: f64,
    seed: u64,
    prep: &PreprocessConfig,
) -> Result<DatasetSplit> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(CgqrError::Config(format!("split ratio {ratio} not in (0, 1)")));
    }
    let patients: BTreeSet<&str> = samples.iter().map(|s| s.patient_id.as_str()).collect();
    if patients.len() < 2 {
        return Err(CgqrError::Data(
            "split_by_patient needs at least 2 distinct patients".into(),
        ));
    }
    let mut ids: Vec<&str> = patients.into_iter().collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let n_train = ((ratio * ids.len() as f64).round() as usize).clamp(1, ids.len() - 1);
    let train_ids: BTreeSet<&str> = ids[..n_train].iter().copied().collect();

    let mut train = Vec::new();
    let mut val = Vec::new();
    for s in samples {
        let prepped = preprocess(s, prep)?;
        if train_ids.contains(s.patient_id.as_str()) {
            train.push(prepped);
        } else {
            val.push(prepped);
        }
    }
    Ok(DatasetSplit { train, val, split_ratio: ratio, seed })
}

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let dy = (y - self.cy) / self.ry;
        let dx = (x - self.cx) / self.rx;
        dy * dy + dx * dx <= 1.0
    }
}

/// Deterministic echo-like phantom generator: K mutually disjoint smooth
/// regions (nested LV endo/epi ring plus satellite ellipses), multiplicative
/// speckle, reduced edge contrast, and an optional intensity/warp shift for
/// a second domain.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Vec<RawSample>> {
    cfg.validate()?;
    let (h, w) = cfg.image_size;
    let mut out = Vec::with_capacity(cfg.n_patients * cfg.frames_per_patient);
    for p in 0..cfg.n_patients {
        for f in 0..cfg.frames_per_patient {
            // Independent sub-streams so domain_shift never perturbs the
            // geometry/noise draws (masks must match across shifts).
            let base = cfg
                .seed
                .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                .wrapping_add((p as u64) << 20)
                .wrapping_add(f as u64);
            let mut geo = ChaCha20Rng::seed_from_u64(base);
            let mut noise = ChaCha20Rng::seed_from_u64(base ^ 0x5bd1_e995);
            let mut warp = ChaCha20Rng::seed_from_u64(base ^ 0xc2b2_ae35);

            let mask = synth_mask(cfg, h, w, &mut geo)?;
            let image = synth_image(cfg, &mask, &mut noise, &mut warp);
            out.push(RawSample {
                image,
                mask,
                patient_id: format!("synth{:03}", p),
                view: View::Synth,
                phase: Phase::None,
            });
        }
    }
    Ok(out)
}

fn synth_mask(cfg: &SynthConfig, h: usize, w: usize, rng: &mut ChaCha20Rng) -> Result<Array2<u8>> {
    let hf = h as f64;
    let wf = w as f64;
    let k = cfg.n_classes as usize;

    // class 1: LV-endocardium-like ellipse; class 2 (when present): the
    // surrounding epicardial ring; classes >= 3: disjoint satellite ellipses.
    let jitter = |rng: &mut ChaCha20Rng, a: f64| rng.gen_range(-a..=a);
    let cy = hf * (0.38 + jitter(rng, 0.04));
    let cx = wf * (0.42 + jitter(rng, 0.04));
    let ry = hf * (0.16 + jitter(rng, 0.03));
    let rx = wf * (0.12 + jitter(rng, 0.02));
    let endo = Ellipse { cy, cx, ry, rx };
    let epi = Ellipse { cy, cx, ry: ry + hf * 0.07, rx: rx + wf * 0.07 };

    let mut satellites = Vec::new();
    if k >= 3 {
        // LA-like ellipse below the ventricle
        satellites.push(Ellipse {
            cy: hf * (0.76 + jitter(rng, 0.03)),
            cx: wf * (0.45 + jitter(rng, 0.04)),
            ry: hf * (0.11 + jitter(rng, 0.02)),
            rx: wf * (0.13 + jitter(rng, 0.02)),
        });
    }
    for i in 3..k {
        // remaining classes on the right-hand side, stacked vertically
        let slots = (k - 3).max(1) as f64;
        let cy = hf * (0.15 + 0.7 * ((i - 3) as f64 + 0.5) / slots);
        satellites.push(Ellipse {
            cy: cy + jitter(rng, hf * 0.02),
            cx: wf * (0.82 + jitter(rng, 0.02)),
            ry: hf * 0.07,
            rx: wf * 0.06,
        });
    }

    let mut mask = Array2::<u8>::zeros((h, w));
    let mut counts = vec![0usize; k + 1];
    for y in 0..h {
        for x in 0..w {
            let fy = y as f64 + 0.5;
            let fx = x as f64 + 0.5;
            let label = if endo.contains(fy, fx) {
                1
            } else if k >= 2 && epi.contains(fy, fx) {
                2
            } else {
                let mut l = 0;
                for (i, e) in satellites.iter().enumerate() {
                    if e.contains(fy, fx) {
                        l = (i + 3) as u8;
                        break;
                    }
                }
                l
            };
            mask[[y, x]] = label;
            counts[label as usize] += 1;
        }
    }
    for (c, &n) in counts.iter().enumerate().skip(1) {
        if n == 0 {
            return Err(CgqrError::Data(format!(
                "synthetic class {c} unplaceable at {h}x{w}"
            )));
        }
    }
    Ok(mask)
}

fn synth_image(
    cfg: &SynthConfig,
    mask: &Array2<u8>,
    noise: &mut ChaCha20Rng,
    warp: &mut ChaCha20Rng,
) -> Array2<f64> {
    let (h, w) = mask.dim();
    let bg = 0.25;
    let level = |c: u8| -> f64 {
        if c == 0 {
            bg
        } else {
            // alternate bright/dark tissue levels around the background
            let t = c as f64;
            bg + cfg.contrast * (0.55 - 0.12 * ((t - 1.0) % 3.0)) * if c % 2 == 0 { -0.6 } else { 1.0 }
        }
    };
    let mut img = Array2::from_shape_fn((h, w), |(y, x)| level(mask[[y, x]]).max(0.0));

    // reduced edge contrast: one smoothing pass unless fully crisp
    if cfg.contrast < 1.0 {
        img = box_blur3(&img);
    }

    // multiplicative speckle
    if cfg.noise_level > 0.0 {
        for v in img.iter_mut() {
            let g: f64 = standard_normal(noise);
            *v = (*v * (1.0 + cfg.noise_level * g)).max(0.0);
        }
    }

    // domain shift: global gamma plus a small sinusoidal warp of the image
    // only (labels deliberately stay fixed so shifted/unshifted masks match)
    if cfg.domain_shift > 0.0 {
        let maxv = img.iter().cloned().fold(f64::MIN, f64::max).max(1e-12);
        let gamma = 1.0 + cfg.domain_shift;
        let amp = cfg.domain_shift * 2.0;
        let py: f64 = warp.gen_range(0.0..std::f64::consts::TAU);
        let px: f64 = warp.gen_range(0.0..std::f64::consts::TAU);
        let src = img.clone();
        for y in 0..h {
            for x in 0..w {
                let dy = amp * ((x as f64) * 0.15 + py).sin();
                let dx = amp * ((y as f64) * 0.15 + px).cos();
                let fy = (y as f64 + dy).clamp(0.0, (h - 1) as f64);
                let fx = (x as f64 + dx).clamp(0.0, (w - 1) as f64);
                let v = bilinear_at(&src, fy, fx);
                img[[y, x]] = maxv * (v / maxv).max(0.0).powf(gamma);
            }
        }
    }
    img
}

fn bilinear_at(src: &Array2<f64>, fy: f64, fx: f64) -> f64 {
    let (h, w) = src.dim();
    let y0 = fy.floor() as usize;
    let x0 = fx.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let dy = fy - y0 as f64;
    let dx = fx - x0 as f64;
    src[[y0, x0]] * (1.0 - dy) * (1.0 - dx)
        + src[[y0, x1]] * (1.0 - dy) * dx
        + src[[y1, x0]] * dy * (1.0 - dx)
        + src[[y1, x1]] * dy * dx
}

fn box_blur3(src: &Array2<f64>) -> Array2<f64> {
    let (h, w) = src.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut s = 0.0;
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let ny = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                let nx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                s += src[[ny, nx]];
            }
        }
        s / 9.0
    })
}

fn standard_normal(rng: &mut ChaCha20Rng) -> f64 {
    // Box-Muller; two uniforms per call keeps the stream length fixed
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

// ---------------------------------------------------------------------------
// On-disk dataset layout
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub patients: Vec<String>,
    pub n_samples: usize,
    pub seed: u64,
    pub config: Option<SynthConfig>,
    pub created_at: String,
}

/// Write samples as `<root>/<patient_id>/<view>_<phase><idx>_img.pgm` plus
/// `..._mask.pgm`, with a manifest.json at the root. Intensities are scaled
/// to the 8-bit range per image.
pub fn write_dataset(root: &Path, samples: &[RawSample], cfg: Option<&SynthConfig>) -> Result<()> {
    std::fs::create_dir_all(root)?;
    let mut patients = BTreeSet::new();
    let mut frame_counter: std::collections::HashMap<(String, View, Phase), usize> =
        std::collections::HashMap::new();
    for s in samples {
        patients.insert(s.patient_id.clone());
        let idx = frame_counter
            .entry((s.patient_id.clone(), s.view, s.phase))
            .and_modify(|v| *v += 1)
            .or_insert(0);
        let dir = root.join(&s.patient_id);
        let stem = format!("{}_{}{}", s.view, s.phase, idx);
        let maxv = s.image.iter().cloned().fold(f64::MIN, f64::max).max(1e-12);
        let img8 = s.image.mapv(|v| ((v / maxv).clamp(0.0, 1.0) * 255.0).round() as u8);
        pgm::write_pgm(&dir.join(format!("{stem}_img.pgm")), &img8)?;
        pgm::write_pgm(&dir.join(format!("{stem}_mask.pgm")), &s.mask)?;
    }
    let manifest = Manifest {
        patients: patients.into_iter().collect(),
        n_samples: samples.len(),
        seed: cfg.map(|c| c.seed).unwrap_or(0),
        config: cfg.cloned(),
        created_at: now_utc_string(),
    };
    let json = serde_json::to_vec_pretty(&manifest)?;
    pgm::atomic_write(&root.join("manifest.json"), &json)?;
    Ok(())
}

fn now_utc_string() -> String {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    format!("unix:{secs}")
}

/// Load a dataset directory written in the layout above (or CAMUS-style
/// fixtures with `<view>_<phase>_img.pgm` names).
pub fn load_dataset(root: &Path) -> Result<Vec<RawSample>> {
    let mut out = Vec::new();
    let mut patient_dirs: Vec<_> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.path())
        .collect();
    patient_dirs.sort();
    for pdir in patient_dirs {
        let patient_id = pdir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut files: Vec<_> = std::fs::read_dir(&pdir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| {
                p.file_name()
                    .map(|n| n.to_string_lossy().ends_with("_img.pgm"))
                    .unwrap_or(false)
            })
            .collect();
        files.sort();
        for img_path in files {
            let name = img_path.file_name().unwrap().to_string_lossy().into_owned();
            let stem = name.trim_end_matches("_img.pgm");
            let (view, phase) = parse_stem(stem).ok_or_else(|| {
                CgqrError::Data(format!("unrecognized sample file name {name}"))
            })?;
            let mask_path = pdir.join(format!("{stem}_mask.pgm"));
            let img = pgm::read_pgm(&img_path)?.mapv(|v| v as f64);
            let mask = pgm::read_pgm(&mask_path)?;
            out.push(RawSample { image: img, mask, patient_id: patient_id.clone(), view, phase });
        }
    }
    if out.is_empty() {
        return Err(CgqrError::Data(format!("no samples found under {}", root.display())));
    }
    Ok(out)
}

fn parse_stem(stem: &str) -> Option<(View, Phase)> {
    let (v, p) = stem.split_once('_')?;
    Some((View::parse(v)?, Phase::parse(p)?))
}

pub fn load_manifest(root: &Path) -> Result<Manifest> {
    let bytes = std::fs::read(root.join("manifest.json"))?;
    Ok(serde_json::from_slice(&bytes)?)
}

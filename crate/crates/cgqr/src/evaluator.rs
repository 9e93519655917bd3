//! Dice metrics, report generation (JSON / aligned table / CSV), and
//! qualitative panel emission.

use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::contour::Contour;
use crate::data::ImageSample;
use crate::error::{CgqrError, Result};
use crate::heads::PredictionBundle;
use crate::model::{argmax_mask, Model};
use crate::params::ParamStore;
use crate::pgm;
use crate::tape::Tape;

pub const DSC_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassDice {
    pub class_id: usize,
    pub dsc: f64,
    /// Ground-truth pixel count pooled over the evaluated set.
    pub support: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class: Vec<ClassDice>,
    pub mean_dsc: f64,
    pub dataset_tag: String,
    pub n_samples: usize,
    pub config_echo: String,
    /// "micro" (pooled sums, default) or "macro" (per-sample mean).
    pub aggregation: String,
}

/// Hard-mask Dice with smoothing; membership is "nonzero". Both masks empty
/// is defined as 1.0.
pub fn dsc(pred: &Array2<u8>, gt: &Array2<u8>) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(CgqrError::Shape(format!(
            "dsc shapes differ: {:?} vs {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    let mut inter = 0usize;
    let mut p_sum = 0usize;
    let mut g_sum = 0usize;
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        let p = p != 0;
        let g = g != 0;
        inter += (p && g) as usize;
        p_sum += p as usize;
        g_sum += g as usize;
    }
    if p_sum == 0 && g_sum == 0 {
        return Ok(1.0);
    }
    Ok((2.0 * inter as f64 + DSC_EPS) / ((p_sum + g_sum) as f64 + DSC_EPS))
}

fn class_mask(mask: &Array2<u8>, class: usize) -> Array2<u8> {
    mask.mapv(|v| (v as usize == class) as u8)
}

/// Per-class DSC of a set of (prediction, ground truth) mask pairs.
/// Micro mode pools intersections and sizes over the whole set before the
/// ratio; macro mode averages per-sample DSCs.
pub fn dice_over_set(
    pairs: &[(Array2<u8>, Array2<u8>)],
    n_classes: usize,
    macro_average: bool,
) -> Result<Vec<ClassDice>> {
    if pairs.is_empty() {
        return Err(CgqrError::Data("empty evaluation set".into()));
    }
    let mut out = Vec::with_capacity(n_classes);
    for class in 1..=n_classes {
        let mut support = 0usize;
        let value = if macro_average {
            let mut acc = 0.0;
            for (p, g) in pairs {
                let gm = class_mask(g, class);
                support += gm.iter().filter(|&&v| v != 0).count();
                acc += dsc(&class_mask(p, class), &gm)?;
            }
            acc / pairs.len() as f64
        } else {
            let mut inter = 0usize;
            let mut p_sum = 0usize;
            let mut g_sum = 0usize;
            for (p, g) in pairs {
                if p.dim() != g.dim() {
                    return Err(CgqrError::Shape("pred/gt shape mismatch".into()));
                }
                for (&pv, &gv) in p.iter().zip(g.iter()) {
                    let pm = pv as usize == class;
                    let gm = gv as usize == class;
                    inter += (pm && gm) as usize;
                    p_sum += pm as usize;
                    g_sum += gm as usize;
                }
            }
            support = g_sum;
            if p_sum == 0 && g_sum == 0 {
                1.0
            } else {
                (2.0 * inter as f64 + DSC_EPS) / ((p_sum + g_sum) as f64 + DSC_EPS)
            }
        };
        out.push(ClassDice { class_id: class, dsc: value, support });
    }
    Ok(out)
}

pub fn mean_foreground_dsc(per_class: &[ClassDice]) -> f64 {
    per_class.iter().map(|c| c.dsc).sum::<f64>() / per_class.len() as f64
}

/// Inference-mode evaluation of a model over a sample list.
pub fn evaluate(
    model: &Model,
    store: &mut ParamStore,
    samples: &[ImageSample],
    tag: &str,
    macro_average: bool,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(CgqrError::Data("empty evaluation set".into()));
    }
    let mut pairs = Vec::with_capacity(samples.len());
    for s in samples {
        let mut tape = Tape::new();
        let art = model.forward(&mut tape, store, &s.image, None, false, false)?;
        let pred = argmax_mask(&tape, art.bundle.refined_probs);
        pairs.push((pred, s.mask.clone()));
    }
    let per_class = dice_over_set(&pairs, model.cfg.n_classes, macro_average)?;
    let mean_dsc = mean_foreground_dsc(&per_class);
    Ok(EvalReport {
        per_class,
        mean_dsc,
        dataset_tag: tag.to_string(),
        n_samples: samples.len(),
        config_echo: serde_json::to_string(&model.cfg)?,
        aggregation: if macro_average { "macro".into() } else { "micro".into() },
    })
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned-text table: one row per model/tag with per-class DSC percent
    /// and the foreground average.
    pub fn to_table(&self) -> String {
        let mut header = format!("{:<24}", "dataset");
        let mut row = format!("{:<24}", self.dataset_tag);
        for c in &self.per_class {
            header.push_str(&format!("{:>10}", format!("class{}", c.class_id)));
            row.push_str(&format!("{:>10.2}", 100.0 * c.dsc));
        }
        header.push_str(&format!("{:>10}", "avg"));
        row.push_str(&format!("{:>10.2}", 100.0 * self.mean_dsc));
        format!("# aggregation: {}\n{header}\n{row}\n", self.aggregation)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("dataset,class_id,dsc,support\n");
        for c in &self.per_class {
            out.push_str(&format!("{},{},{},{}\n", self.dataset_tag, c.class_id, c.dsc, c.support));
        }
        out.push_str(&format!("{},mean,{},\n", self.dataset_tag, self.mean_dsc));
        out
    }
}

fn to_u8_gray(img: &Array2<f64>) -> Array2<u8> {
    let mn = img.iter().cloned().fold(f64::INFINITY, f64::min);
    let mx = img.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = (mx - mn).max(1e-12);
    img.mapv(|v| (255.0 * (v - mn) / range).round().clamp(0.0, 255.0) as u8)
}

fn mask_to_gray(mask: &Array2<u8>, n_classes: usize) -> Array2<u8> {
    mask.mapv(|v| ((v as f64) * 255.0 / n_classes.max(1) as f64).round() as u8)
}

const CLASS_COLORS: [[u8; 3]; 6] = [
    [220, 60, 60],
    [60, 200, 60],
    [70, 110, 240],
    [230, 200, 50],
    [200, 80, 220],
    [70, 210, 210],
];

/// Draw closed contour polylines (normalized coordinates) into a binary
/// grid; exposed so tests can rasterize independently.
pub fn rasterize_contours(contours: &[Contour], hw: (usize, usize)) -> Array2<u8> {
    let (h, w) = hw;
    let mut out = Array2::<u8>::zeros((h, w));
    for c in contours {
        if !c.present || c.points.is_empty() {
            continue;
        }
        let pts: Vec<(i64, i64)> = c
            .points
            .iter()
            .map(|&(x, y)| {
                (
                    (x * w as f64).round().clamp(0.0, (w - 1) as f64) as i64,
                    (y * h as f64).round().clamp(0.0, (h - 1) as f64) as i64,
                )
            })
            .collect();
        for i in 0..pts.len() {
            let (x0, y0) = pts[i];
            let (x1, y1) = pts[(i + 1) % pts.len()];
            draw_line(&mut out, x0, y0, x1, y1);
        }
    }
    out
}

fn draw_line(grid: &mut Array2<u8>, mut x0: i64, mut y0: i64, x1: i64, y1: i64) {
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        grid[[y0 as usize, x0 as usize]] = 255;
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

/// Write the seven qualitative panels for one sample. Grayscale panels are
/// PGM; the overlay is a color PPM with the class mask alpha-blended at 0.4.
pub fn emit_panels(
    sample_id: &str,
    sample: &ImageSample,
    tape: &Tape,
    bundle: &PredictionBundle,
    contours: &[Contour],
    n_classes: usize,
    out_dir: &Path,
) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let (h0, w0) = sample.image.dim();
    let mut written = Vec::new();
    let mut put = |name: &str, img: Array2<u8>| -> Result<()> {
        let p = out_dir.join(format!("{sample_id}_{name}.pgm"));
        pgm::write_pgm(&p, &img)?;
        written.push(p);
        Ok(())
    };
    put("orig", to_u8_gray(&sample.image))?;
    put("gt", mask_to_gray(&sample.mask, n_classes))?;

    let coarse = match bundle.coarse_probs {
        Some(cp) => {
            let m = argmax_mask(tape, cp);
            let up = crate::data::resize_nearest(&m, (h0, w0));
            mask_to_gray(&up, n_classes)
        }
        None => Array2::zeros((h0, w0)),
    };
    put("coarse", coarse)?;
    put("contours", rasterize_contours(contours, (h0, w0)))?;

    let boundary = match bundle.boundary_probs {
        Some(bp) => {
            let b: Array2<f64> =
                tape.value(bp).clone().into_dimensionality().map_err(|_| {
                    CgqrError::Shape("boundary probs are not 2-d".into())
                })?;
            b.mapv(|v| (255.0 * v.clamp(0.0, 1.0)).round() as u8)
        }
        None => Array2::zeros((h0, w0)),
    };
    put("boundary", boundary)?;

    let final_mask = argmax_mask(tape, bundle.refined_probs);
    put("final", mask_to_gray(&final_mask, n_classes))?;

    let gray = to_u8_gray(&sample.image);
    let mut overlay = Array3::<u8>::zeros((3, h0, w0));
    for y in 0..h0 {
        for x in 0..w0 {
            let g = gray[[y, x]] as f64;
            let cls = final_mask[[y, x]] as usize;
            let color = if cls == 0 {
                [g, g, g]
            } else {
                let c = CLASS_COLORS[(cls - 1) % CLASS_COLORS.len()];
                [
                    0.6 * g + 0.4 * c[0] as f64,
                    0.6 * g + 0.4 * c[1] as f64,
                    0.6 * g + 0.4 * c[2] as f64,
                ]
            };
            for ch in 0..3 {
                overlay[[ch, y, x]] = color[ch].round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    let p = out_dir.join(format!("{sample_id}_overlay.ppm"));
    pgm::write_ppm(&p, &overlay)?;
    written.push(p);
    Ok(written)
}

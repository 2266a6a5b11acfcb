//! Saliency evaluation: PR curve, max F-measure, MAE and S-measure.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const THRESHOLDS: usize = 256;
pub const BETA2: f64 = 0.3;

/// Single-channel map with values in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl SaliencyMap {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w || h == 0 || w == 0 {
            return Err(Error::InvalidArgument(format!(
                "{} values for a {h}x{w} map",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(format!(
                "map value {} at {i} outside [0, 1]",
                data[i]
            )));
        }
        Ok(SaliencyMap { h, w, data })
    }

    pub fn from_u8(h: usize, w: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(h, w, bytes.iter().map(|&b| b as f64 / 255.0).collect())
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Nearest 8-bit level.
    pub fn quantized(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v * 255.0).round() as u8)
            .collect()
    }

    fn binary(&self) -> Vec<bool> {
        self.data.iter().map(|v| *v >= 0.5).collect()
    }

    fn same_size(&self, other: &SaliencyMap) -> Result<()> {
        if (self.h, self.w) != (other.h, other.w) {
            return Err(Error::InvalidArgument(format!(
                "prediction is {}x{}, ground truth {}x{}",
                self.h, self.w, other.h, other.w
            )));
        }
        Ok(())
    }
}

/// Precision and recall at thresholds `t = 0..=255` (pred level `≥ t`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

/// One image's curve. No predicted positives gives precision 1; no
/// ground-truth positives gives recall 1.
pub fn image_pr(pred: &SaliencyMap, gt: &SaliencyMap) -> Result<PrCurve> {
    pred.same_size(gt)?;
    let mut fg_hist = [0usize; THRESHOLDS];
    let mut bg_hist = [0usize; THRESHOLDS];
    for (&p, g) in pred.quantized().iter().zip(gt.binary()) {
        if g {
            fg_hist[p as usize] += 1;
        } else {
            bg_hist[p as usize] += 1;
        }
    }
    let positives: usize = fg_hist.iter().sum();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut precision = vec![0.0; THRESHOLDS];
    let mut recall = vec![0.0; THRESHOLDS];
    for t in (0..THRESHOLDS).rev() {
        tp += fg_hist[t];
        fp += bg_hist[t];
        precision[t] = if tp + fp == 0 {
            1.0
        } else {
            tp as f64 / (tp + fp) as f64
        };
        recall[t] = if positives == 0 {
            1.0
        } else {
            tp as f64 / positives as f64
        };
    }
    Ok(PrCurve { precision, recall })
}

/// Dataset curve: per-image precision and recall averaged over images.
pub fn pr_curve(preds: &[SaliencyMap], gts: &[SaliencyMap]) -> Result<PrCurve> {
    if preds.is_empty() || preds.len() != gts.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    let mut acc = PrCurve {
        precision: vec![0.0; THRESHOLDS],
        recall: vec![0.0; THRESHOLDS],
    };
    for (p, g) in preds.iter().zip(gts) {
        let c = image_pr(p, g)?;
        acc.precision
            .iter_mut()
            .zip(&c.precision)
            .for_each(|(a, v)| *a += v);
        acc.recall
            .iter_mut()
            .zip(&c.recall)
            .for_each(|(a, v)| *a += v);
    }
    let n = preds.len() as f64;
    acc.precision.iter_mut().for_each(|v| *v /= n);
    acc.recall.iter_mut().for_each(|v| *v /= n);
    Ok(acc)
}

/// `(1 + β²)·P·R / (β²·P + R)`, zero when the denominator is.
pub fn f_measure(p: f64, r: f64, beta2: f64) -> f64 {
    let den = beta2 * p + r;
    if den == 0.0 {
        0.0
    } else {
        (1.0 + beta2) * p * r / den
    }
}

pub fn max_f_measure(curve: &PrCurve, beta2: f64) -> f64 {
    curve
        .precision
        .iter()
        .zip(&curve.recall)
        .map(|(&p, &r)| f_measure(p, r, beta2))
        .fold(0.0, f64::max)
}

/// Mean absolute per-pixel difference.
pub fn mae(pred: &SaliencyMap, gt: &SaliencyMap) -> Result<f64> {
    pred.same_size(gt)?;
    Ok(pred
        .data
        .iter()
        .zip(&gt.data)
        .map(|(p, g)| (p - g).abs())
        .sum::<f64>()
        / pred.data.len() as f64)
}

const EPS: f64 = f64::EPSILON;

/// Structure measure: equal-weight object-aware and region-aware terms.
/// The ground truth is binarized at 0.5.
pub fn s_measure(pred: &SaliencyMap, gt: &SaliencyMap) -> Result<f64> {
    pred.same_size(gt)?;
    let mask = gt.binary();
    let y = mask.iter().filter(|v| **v).count() as f64 / mask.len() as f64;
    let mean_pred = pred.data.iter().sum::<f64>() / pred.data.len() as f64;
    let q = if y == 0.0 {
        1.0 - mean_pred
    } else if y == 1.0 {
        mean_pred
    } else {
        0.5 * s_object(&pred.data, &mask) + 0.5 * s_region(pred, &mask)
    };
    Ok(q.max(0.0))
}

fn object_score(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count();
    if n == 0 {
        return 0.0;
    }
    let x = values.clone().sum::<f64>() / n as f64;
    let sigma = if n > 1 {
        (values.map(|v| (v - x) * (v - x)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    2.0 * x / (x * x + 1.0 + sigma + EPS)
}

fn s_object(pred: &[f64], mask: &[bool]) -> f64 {
    let fg = pred.iter().zip(mask).filter(|(_, m)| **m).map(|(p, _)| *p);
    let bg = pred
        .iter()
        .zip(mask)
        .filter(|(_, m)| !**m)
        .map(|(p, _)| 1.0 - *p);
    let u = mask.iter().filter(|m| **m).count() as f64 / mask.len() as f64;
    u * object_score(fg) + (1.0 - u) * object_score(bg)
}

fn s_region(pred: &SaliencyMap, mask: &[bool]) -> f64 {
    let (h, w) = (pred.h, pred.w);
    // 1-based rounded centroid; the split puts columns 1..=cx on the left.
    let total = mask.iter().filter(|m| **m).count() as f64;
    let (cx, cy) = if total == 0.0 {
        (
            (w as f64 / 2.0).round() as usize,
            (h as f64 / 2.0).round() as usize,
        )
    } else {
        let (mut sx, mut sy) = (0.0, 0.0);
        for (i, m) in mask.iter().enumerate() {
            if *m {
                sx += (i % w + 1) as f64;
                sy += (i / w + 1) as f64;
            }
        }
        ((sx / total).round() as usize, (sy / total).round() as usize)
    };
    let area = (h * w) as f64;
    let blocks = [
        (0..cy, 0..cx),
        (0..cy, cx..w),
        (cy..h, 0..cx),
        (cy..h, cx..w),
    ];
    let mut q = 0.0;
    for (rows, cols) in blocks {
        let n = rows.len() * cols.len();
        if n == 0 {
            continue;
        }
        let mut p = Vec::with_capacity(n);
        let mut g = Vec::with_capacity(n);
        for r in rows {
            for c in cols.clone() {
                p.push(pred.data[r * w + c]);
                g.push(if mask[r * w + c] { 1.0 } else { 0.0 });
            }
        }
        q += n as f64 / area * ssim(&p, &g);
    }
    q
}

fn ssim(p: &[f64], g: &[f64]) -> f64 {
    let n = p.len() as f64;
    let x = p.iter().sum::<f64>() / n;
    let y = g.iter().sum::<f64>() / n;
    let den = n - 1.0 + EPS;
    let sx2 = p.iter().map(|v| (v - x) * (v - x)).sum::<f64>() / den;
    let sy2 = g.iter().map(|v| (v - y) * (v - y)).sum::<f64>() / den;
    let sxy = p.iter().zip(g).map(|(a, b)| (a - x) * (b - y)).sum::<f64>() / den;
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx2 + sy2);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Metrics of one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub name: String,
    pub max_f: f64,
    pub mae: f64,
    pub s_measure: f64,
}

/// Dataset-level evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub curve: PrCurve,
    pub max_f: f64,
    pub mae: f64,
    pub s_measure: f64,
    pub images: Vec<ImageMetrics>,
}

#[derive(Serialize, Deserialize)]
struct ReportJson {
    #[serde(rename = "maxF")]
    max_f: f64,
    #[serde(rename = "MAE")]
    mae: f64,
    #[serde(rename = "S_m")]
    s_measure: f64,
    images: usize,
    /// `[precision, recall]` per threshold 0..=255.
    pr_curve: Vec<[f64; 2]>,
}

impl MetricsReport {
    /// Evaluates named `(prediction, ground truth)` pairs.
    pub fn compute(names: &[String], preds: &[SaliencyMap], gts: &[SaliencyMap]) -> Result<Self> {
        if names.len() != preds.len() {
            return Err(Error::InvalidArgument("one name per image required".into()));
        }
        let curve = pr_curve(preds, gts)?;
        let mut images = Vec::with_capacity(preds.len());
        for ((name, p), g) in names.iter().zip(preds).zip(gts) {
            images.push(ImageMetrics {
                name: name.clone(),
                max_f: max_f_measure(&image_pr(p, g)?, BETA2),
                mae: mae(p, g)?,
                s_measure: s_measure(p, g)?,
            });
        }
        let n = images.len() as f64;
        Ok(MetricsReport {
            max_f: max_f_measure(&curve, BETA2),
            mae: images.iter().map(|m| m.mae).sum::<f64>() / n,
            s_measure: images.iter().map(|m| m.s_measure).sum::<f64>() / n,
            curve,
            images,
        })
    }

    pub fn to_json(&self) -> String {
        let j = ReportJson {
            max_f: self.max_f,
            mae: self.mae,
            s_measure: self.s_measure,
            images: self.images.len(),
            pr_curve: self
                .curve
                .precision
                .iter()
                .zip(&self.curve.recall)
                .map(|(p, r)| [*p, *r])
                .collect(),
        };
        serde_json::to_string_pretty(&j).expect("report serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("image,maxF,MAE,S_m\n");
        for m in &self.images {
            let _ = writeln!(
                s,
                "{},{:.6},{:.6},{:.6}",
                m.name, m.max_f, m.mae, m.s_measure
            );
        }
        s
    }

    /// Precision (y) against recall (x) as a standalone SVG.
    pub fn to_svg(&self) -> String {
        let (w, h, pad) = (400.0, 400.0, 40.0);
        let px = |r: f64| pad + r * (w - 2.0 * pad);
        let py = |p: f64| h - pad - p * (h - 2.0 * pad);
        let points: Vec<String> = self
            .curve
            .recall
            .iter()
            .zip(&self.curve.precision)
            .map(|(r, p)| format!("{:.2},{:.2}", px(*r), py(*p)))
            .collect();
        format!(
            concat!(
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n",
                "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n",
                "<rect x=\"{pad}\" y=\"{pad}\" width=\"{iw}\" height=\"{iw}\" fill=\"none\" stroke=\"black\"/>\n",
                "<text x=\"{cx}\" y=\"{by}\" text-anchor=\"middle\" font-size=\"12\">recall</text>\n",
                "<text x=\"12\" y=\"{cx}\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 12 {cx})\">precision</text>\n",
                "<text x=\"{cx}\" y=\"24\" text-anchor=\"middle\" font-size=\"12\">maxF {f:.4}  MAE {m:.4}  S {s:.4}</text>\n",
                "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"{pts}\"/>\n",
                "</svg>\n"
            ),
            w = w,
            h = h,
            pad = pad,
            iw = w - 2.0 * pad,
            cx = w / 2.0,
            by = h - 10.0,
            f = self.max_f,
            m = self.mae,
            s = self.s_measure,
            pts = points.join(" ")
        )
    }

    /// Writes `metrics.json`, `per_image.csv` and `pr_curve.svg` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [
            ("metrics.json", self.to_json()),
            ("per_image.csv", self.to_csv()),
            ("pr_curve.svg", self.to_svg()),
        ] {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

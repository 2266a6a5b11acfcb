//! Evaluation and single-image inference with attention dumps.

use std::path::{Path, PathBuf};

use crate::attention::{AttentionDump, GridMode};
use crate::error::{Error, Result};
use crate::metrics::{MetricsReport, SaliencyMap};
use crate::model::{Prediction, SaliencyModel};
use crate::nn::bilinear_resize;
use crate::pipeline::data::{load_rgb, resize_input, save_gray, Sample};
use crate::tensor::{Scalar, Tensor};

/// Eval-mode prediction for one `(1, h, w, 3)` image: the input is resized
/// to the network size and `S¹` is resized back to `h × w`.
pub fn predict_image<T: Scalar>(
    model: &SaliencyModel<T>,
    image: &Tensor<T>,
) -> Result<(Tensor<T>, Prediction<T>)> {
    let s = image.shape();
    let x = resize_input(image, model.config().input_size)?;
    let pred = model.predict(&x)?;
    let map = bilinear_resize(&pred.side[0], s.h, s.w)?;
    Ok((map, pred))
}

fn to_map<T: Scalar>(t: &Tensor<T>) -> Result<SaliencyMap> {
    let s = t.shape();
    SaliencyMap::new(
        s.h,
        s.w,
        t.data()
            .iter()
            .map(|v| v.as_f64().clamp(0.0, 1.0))
            .collect(),
    )
}

/// Saliency maps at original resolution, computed on all available cores.
pub fn predict_maps<T: Scalar>(
    model: &SaliencyModel<T>,
    samples: &[Sample<T>],
) -> Result<Vec<SaliencyMap>> {
    let workers = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(samples.len().max(1));
    let chunk = samples.len().div_ceil(workers).max(1);
    let parts: Vec<Result<Vec<SaliencyMap>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = samples
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|s| to_map(&predict_image(model, &s.image)?.0))
                        .collect()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("prediction worker panicked"))
            .collect()
    });
    let mut maps = Vec::with_capacity(samples.len());
    for p in parts {
        maps.extend(p?);
    }
    Ok(maps)
}

pub fn evaluate<T: Scalar>(
    model: &SaliencyModel<T>,
    samples: &[Sample<T>],
) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let preds = predict_maps(model, samples)?;
    let gts = samples
        .iter()
        .map(|s| to_map(&s.mask))
        .collect::<Result<Vec<_>>>()?;
    let names: Vec<String> = samples.iter().map(|s| s.name.clone()).collect();
    MetricsReport::compute(&names, &preds, &gts)
}

#[derive(Clone, Debug)]
pub struct InferOutput {
    pub saliency: PathBuf,
    /// `(png, sidecar)` per requested pixel and attentive module.
    pub attention: Vec<(PathBuf, PathBuf)>,
}

/// Writes `<stem>_saliency.png` and, for every `(y, x)` in image
/// coordinates and every attentive module, `<stem>_dec<i>_y<y>_x<x>`.
pub fn infer<T: Scalar>(
    model: &SaliencyModel<T>,
    image_path: &Path,
    out_dir: &Path,
    pixels: &[(usize, usize)],
) -> Result<InferOutput> {
    let image = load_rgb::<T>(image_path)?;
    let s = image.shape();
    if let Some(&(y, x)) = pixels.iter().find(|&&(y, x)| y >= s.h || x >= s.w) {
        return Err(Error::InvalidArgument(format!(
            "pixel ({y}, {x}) is outside the {}x{} image",
            s.h, s.w
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let stem = image_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    let (map, pred) = predict_image(model, &image)?;
    let saliency = out_dir.join(format!("{stem}_saliency.png"));
    save_gray(&saliency, &map)?;

    let mut attention = Vec::new();
    for &(y, x) in pixels {
        for a in &pred.attention {
            let ws = a.weights.shape();
            let (fy, fx) = (y * ws.h / s.h, x * ws.w / s.w);
            let weights = (0..ws.c)
                .map(|d| a.weights.at(0, fy, fx, d).as_f64())
                .collect();
            let dump = AttentionDump {
                module: format!("dec{}", a.module),
                grid: a.grid,
                kind: a.kind,
                pixel: (fy, fx),
                map: (ws.h, ws.w),
                weights,
            };
            attention.push(dump.write(out_dir, &format!("{stem}_dec{}_y{y}_x{x}", a.module))?);
        }
    }
    Ok(InferOutput {
        saliency,
        attention,
    })
}

/// Mean GAP attention mass that each labelled pixel of module 6 puts on
/// foreground and on background grid cells: `(pixel is fg, fg mass, bg mass)`.
pub fn global_attention_mass<T: Scalar>(
    pred: &Prediction<T>,
    mask6: &Tensor<T>,
    n: usize,
) -> Option<Vec<(bool, f64, f64)>> {
    let a = pred
        .attention
        .iter()
        .find(|a| a.module == 6 && a.grid.mode == GridMode::Global)?;
    let ws = a.weights.shape();
    let mut out = Vec::with_capacity(ws.h * ws.w);
    for y in 0..ws.h {
        for x in 0..ws.w {
            let (mut fg, mut bg) = (0.0, 0.0);
            for d in 0..ws.c {
                let (sy, sx) = a.grid.source(y, x, d, ws.h, ws.w)?;
                let w = a.weights.at(n, y, x, d).as_f64();
                if mask6.at(n, sy, sx, 0).as_f64() > 0.5 {
                    fg += w;
                } else {
                    bg += w;
                }
            }
            out.push((mask6.at(n, y, x, 0).as_f64() > 0.5, fg, bg));
        }
    }
    Some(out)
}

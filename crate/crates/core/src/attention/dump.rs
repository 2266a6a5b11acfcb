use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::GrayImage;

use crate::attention::grid::{ContextGrid, GridMode};
use crate::attention::ops::AttentionKind;
use crate::error::{Error, Result};

/// Smallest side of a written attention image, in pixels.
const MIN_SIDE: usize = 64;

/// One pixel's attention weights with the geometry needed to interpret them.
#[derive(Clone, Debug)]
pub struct AttentionDump {
    pub module: String,
    pub grid: ContextGrid,
    pub kind: AttentionKind,
    /// Attending pixel `(y, x)` in the module's feature map.
    pub pixel: (usize, usize),
    /// Size of the module's feature map.
    pub map: (usize, usize),
    pub weights: Vec<f64>,
}

impl AttentionDump {
    /// Writes `<stem>.png` (weights min-max scaled to 0..255, one block per
    /// grid cell; a flat map is written as 255) and `<stem>.txt`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
        let (gh, gw) = (self.grid.grid_h, self.grid.grid_w);
        let scale = (MIN_SIDE / gh.max(gw)).max(1);
        let lo = self.weights.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self
            .weights
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let level = |v: f64| {
            if hi - lo < 1e-12 {
                255u8
            } else {
                (255.0 * (v - lo) / (hi - lo)).round() as u8
            }
        };
        let img = GrayImage::from_fn((gw * scale) as u32, (gh * scale) as u32, |x, y| {
            let i = (y as usize / scale) * gw + x as usize / scale;
            image::Luma([level(self.weights[i])])
        });
        let png = dir.join(format!("{stem}.png"));
        img.save(&png).map_err(|source| Error::Image {
            path: png.clone(),
            source,
        })?;
        let txt = dir.join(format!("{stem}.txt"));
        std::fs::write(&txt, self.sidecar()).map_err(|e| Error::io(&txt, e))?;
        Ok((png, txt))
    }

    fn sidecar(&self) -> String {
        let mut s = String::new();
        let mode = match self.grid.mode {
            GridMode::Global => "global",
            GridMode::Local => "local",
        };
        let kind = match self.kind {
            AttentionKind::Softmax => "softmax",
            AttentionKind::Sigmoid => "sigmoid",
        };
        let _ = writeln!(s, "module = {}", self.module);
        let _ = writeln!(s, "mode = {mode}");
        let _ = writeln!(s, "kind = {kind}");
        let _ = writeln!(s, "grid_h = {}", self.grid.grid_h);
        let _ = writeln!(s, "grid_w = {}", self.grid.grid_w);
        let _ = writeln!(s, "dilation = {}", self.grid.dilation);
        let _ = writeln!(s, "pixel_y = {}", self.pixel.0);
        let _ = writeln!(s, "pixel_x = {}", self.pixel.1);
        let _ = writeln!(s, "map_h = {}", self.map.0);
        let _ = writeln!(s, "map_w = {}", self.map.1);
        let _ = writeln!(s, "weight_sum = {:.6}", self.weights.iter().sum::<f64>());
        let _ = writeln!(
            s,
            "weight_min = {:.6e}",
            self.weights.iter().copied().fold(f64::INFINITY, f64::min)
        );
        let _ = writeln!(
            s,
            "weight_max = {:.6e}",
            self.weights
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max)
        );
        s.push_str("# one row per grid row: weight@source_y,source_x (off-map taps show -)\n");
        for r in 0..self.grid.grid_h {
            let row: Vec<String> = (0..self.grid.grid_w)
                .map(|c| {
                    let i = r * self.grid.grid_w + c;
                    match self
                        .grid
                        .source(self.pixel.0, self.pixel.1, i, self.map.0, self.map.1)
                    {
                        Some((y, x)) => format!("{:.6e}@{y},{x}", self.weights[i]),
                        None => format!("{:.6e}@-", self.weights[i]),
                    }
                })
                .collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        s
    }
}

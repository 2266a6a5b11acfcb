//! PNG image/mask IO, dataset manifests, the synthetic shape generator and
//! training-time augmentation.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::bilinear_resize;
use crate::tensor::{Scalar, Shape, Tensor};

pub const MANIFEST_FILE: &str = "manifest.json";

fn image_err(path: &Path) -> impl FnOnce(image::ImageError) -> Error + '_ {
    move |source| Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

/// RGB image as `(1, h, w, 3)` in `[0, 1]`.
pub fn load_rgb<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let img = image::open(path).map_err(image_err(path))?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img
        .as_raw()
        .iter()
        .map(|&b| T::of(b as f64 / 255.0))
        .collect();
    Tensor::new(Shape::new(1, h as usize, w as usize, 3), data)
}

/// Single-channel mask as `(1, h, w, 1)` in `[0, 1]`.
pub fn load_mask<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let img = image::open(path).map_err(image_err(path))?.to_luma8();
    let (w, h) = img.dimensions();
    let data = img
        .as_raw()
        .iter()
        .map(|&b| T::of(b as f64 / 255.0))
        .collect();
    Tensor::new(Shape::new(1, h as usize, w as usize, 1), data)
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes channel 0 of image 0 as 8-bit grayscale.
pub fn save_gray<T: Scalar>(path: &Path, map: &Tensor<T>) -> Result<()> {
    let s = map.shape();
    let img: GrayImage = ImageBuffer::from_fn(s.w as u32, s.h as u32, |x, y| {
        Luma([to_byte(map.at(0, y as usize, x as usize, 0).as_f64())])
    });
    img.save(path).map_err(image_err(path))
}

pub fn save_rgb<T: Scalar>(path: &Path, rgb: &Tensor<T>) -> Result<()> {
    let s = rgb.shape();
    let img: RgbImage = ImageBuffer::from_fn(s.w as u32, s.h as u32, |x, y| {
        let px = |c| to_byte(rgb.at(0, y as usize, x as usize, c).as_f64());
        Rgb([px(0), px(1), px(2)])
    });
    img.save(path).map_err(image_err(path))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplePair {
    pub image: PathBuf,
    pub mask: PathBuf,
}

/// Parameters that regenerate a synthetic split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub count: usize,
    pub size: usize,
    pub shapes: Vec<String>,
}

/// Image/mask pairs of one split. Relative paths resolve against the
/// directory holding the manifest file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: String,
    pub pairs: Vec<SamplePair>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<SynthSpec>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    /// Reads a manifest from a JSON file or from a directory containing
    /// `manifest.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text)?;
        m.root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let file = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&file, text + "\n").map_err(|e| Error::io(&file, e))?;
        Ok(file)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Decodes every pair, checking that image and mask sizes agree.
    pub fn load_samples<T: Scalar>(&self) -> Result<Vec<Sample<T>>> {
        if self.pairs.is_empty() {
            return Err(Error::Config(format!(
                "dataset split {:?} is empty",
                self.split
            )));
        }
        self.pairs
            .iter()
            .map(|p| {
                let (ip, mp) = (self.resolve(&p.image), self.resolve(&p.mask));
                let image = load_rgb(&ip)?;
                let mask = load_mask(&mp)?;
                let (a, b) = (image.shape(), mask.shape());
                if (a.h, a.w) != (b.h, b.w) {
                    return Err(Error::Config(format!(
                        "{}: image is {}x{} but mask is {}x{}",
                        ip.display(),
                        a.h,
                        a.w,
                        b.h,
                        b.w
                    )));
                }
                let name = p
                    .image
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                Ok(Sample { name, image, mask })
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Sample<T> {
    pub name: String,
    /// `(1, h, w, 3)`.
    pub image: Tensor<T>,
    /// `(1, h, w, 1)`.
    pub mask: Tensor<T>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum ShapeKind {
    Ellipse,
    Rectangle,
    Triangle,
}

const SHAPE_NAMES: [&str; 3] = ["ellipse", "rectangle", "triangle"];

struct Figure {
    kind: ShapeKind,
    // Centre, half-extents and rotation for ellipses and rectangles;
    // vertices for triangles.
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    angle: f64,
    tri: [(f64, f64); 3],
}

impl Figure {
    fn random(rng: &mut ChaCha8Rng, size: f64) -> Self {
        let kind = [
            ShapeKind::Ellipse,
            ShapeKind::Rectangle,
            ShapeKind::Triangle,
        ][rng.gen_range(0..3)];
        let cx = rng.gen_range(0.2..0.8) * size;
        let cy = rng.gen_range(0.2..0.8) * size;
        let rx = rng.gen_range(0.08..0.25) * size;
        let ry = rng.gen_range(0.08..0.25) * size;
        let angle = rng.gen_range(0.0..std::f64::consts::PI);
        let mut tri = [(0.0, 0.0); 3];
        for (k, v) in tri.iter_mut().enumerate() {
            let a = angle + k as f64 * 2.0 * std::f64::consts::PI / 3.0 + rng.gen_range(-0.4..0.4);
            let r = rng.gen_range(0.6..1.0) * rx.max(ry) * 1.3;
            *v = (cx + r * a.cos(), cy + r * a.sin());
        }
        Figure {
            kind,
            cx,
            cy,
            rx,
            ry,
            angle,
            tri,
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (c, s) = (self.angle.cos(), self.angle.sin());
        let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
        match self.kind {
            ShapeKind::Ellipse => (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0,
            ShapeKind::Rectangle => u.abs() <= self.rx && v.abs() <= self.ry,
            ShapeKind::Triangle => {
                let [a, b, c] = self.tri;
                let side = |p: (f64, f64), q: (f64, f64)| {
                    (q.0 - p.0) * (y - p.1) - (q.1 - p.1) * (x - p.0)
                };
                let (d1, d2, d3) = (side(a, b), side(b, c), side(c, a));
                let neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                let pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                !(neg && pos)
            }
        }
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.gen(), rng.gen(), rng.gen()]
}

fn color_distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter()
        .zip(&b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// One synthetic image and its `{0, 1}` mask, both `size × size`.
fn synth_one(rng: &mut ChaCha8Rng, size: usize) -> (Vec<[f64; 3]>, Vec<bool>) {
    let s = size as f64;
    let mask = loop {
        let figures: Vec<Figure> = (0..rng.gen_range(1..=3))
            .map(|_| Figure::random(rng, s))
            .collect();
        let mask: Vec<bool> = (0..size * size)
            .map(|i| {
                let (y, x) = ((i / size) as f64 + 0.5, (i % size) as f64 + 0.5);
                figures.iter().any(|f| f.contains(x, y))
            })
            .collect();
        let frac = mask.iter().filter(|&&m| m).count() as f64 / (size * size) as f64;
        if frac > 0.02 && frac < 0.6 {
            break mask;
        }
    };
    let bg = random_color(rng);
    let fg = loop {
        let c = random_color(rng);
        if color_distance(c, bg) > 0.5 {
            break c;
        }
    };
    // Background texture: a smooth two-wave pattern plus per-pixel noise.
    let (fx, fy) = (rng.gen_range(0.5..3.0) / s, rng.gen_range(0.5..3.0) / s);
    let (px, py) = (rng.gen_range(0.0..6.3), rng.gen_range(0.0..6.3));
    let pixels = (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f64, (i % size) as f64);
            let wave = 0.08
                * ((2.0 * std::f64::consts::PI * fx * x + px).sin()
                    + (2.0 * std::f64::consts::PI * fy * y + py).sin());
            let base = if mask[i] { fg } else { bg };
            let tex = if mask[i] { 0.0 } else { wave };
            let mut px = [0.0; 3];
            for (c, v) in px.iter_mut().enumerate() {
                *v = (base[c] + tex + rng.gen_range(-0.06..0.06)).clamp(0.0, 1.0);
            }
            px
        })
        .collect();
    (pixels, mask)
}

/// Writes `n` synthetic image/mask pairs plus `manifest.json` into `dir`.
/// Output files are a pure function of `(seed, n, size)`.
pub fn synth_dataset(
    dir: &Path,
    split: &str,
    seed: u64,
    n: usize,
    size: usize,
) -> Result<DatasetManifest> {
    if n == 0 {
        return Err(Error::Config(
            "synthetic dataset needs at least one image".into(),
        ));
    }
    if size == 0 || size % 8 != 0 {
        return Err(Error::Config(format!(
            "synthetic image size {size} must be a positive multiple of 8"
        )));
    }
    for sub in ["images", "masks"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(n);
    for i in 0..n {
        let (pixels, mask) = synth_one(&mut rng, size);
        let image = PathBuf::from(format!("images/{i:05}.png"));
        let mask_path = PathBuf::from(format!("masks/{i:05}.png"));
        let img: RgbImage = ImageBuffer::from_fn(size as u32, size as u32, |x, y| {
            let p = pixels[y as usize * size + x as usize];
            Rgb([to_byte(p[0]), to_byte(p[1]), to_byte(p[2])])
        });
        let m: GrayImage = ImageBuffer::from_fn(size as u32, size as u32, |x, y| {
            Luma([if mask[y as usize * size + x as usize] {
                255
            } else {
                0
            }])
        });
        let (ip, mp) = (dir.join(&image), dir.join(&mask_path));
        img.save(&ip).map_err(image_err(&ip))?;
        m.save(&mp).map_err(image_err(&mp))?;
        pairs.push(SamplePair {
            image,
            mask: mask_path,
        });
    }
    let manifest = DatasetManifest {
        split: split.to_string(),
        pairs,
        generator: Some(SynthSpec {
            seed,
            count: n,
            size,
            shapes: SHAPE_NAMES.iter().map(|s| s.to_string()).collect(),
        }),
        root: dir.to_path_buf(),
    };
    manifest.save(dir)?;
    Ok(manifest)
}

/// Side length images are resized to before random cropping to `size`:
/// `8/7` of it, rounded up.
pub fn augment_scale(size: usize) -> usize {
    (size * 8 + 6) / 7
}

/// A sample resized once to the augmentation scale.
#[derive(Clone, Debug)]
pub struct ScaledSample<T> {
    pub image: Tensor<T>,
    pub mask: Tensor<T>,
}

pub fn prepare<T: Scalar>(samples: &[Sample<T>], crop: usize) -> Result<Vec<ScaledSample<T>>> {
    let big = augment_scale(crop);
    samples
        .iter()
        .map(|s| {
            Ok(ScaledSample {
                image: bilinear_resize(&s.image, big, big)?,
                mask: bilinear_resize(&s.mask, big, big)?,
            })
        })
        .collect()
}

/// Random horizontal flip then random `crop × crop` window, applied with
/// the same parameters to image and mask.
pub fn augment<T: Scalar>(
    rng: &mut impl Rng,
    s: &ScaledSample<T>,
    crop: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let sh = s.image.shape();
    if sh.h < crop || sh.w < crop {
        return Err(Error::shape(
            "augment",
            format!("{sh} is smaller than the {crop}x{crop} crop"),
        ));
    }
    let flip = rng.gen_bool(0.5);
    let oy = rng.gen_range(0..=sh.h - crop);
    let ox = rng.gen_range(0..=sh.w - crop);
    let window = |t: &Tensor<T>| {
        let c = t.shape().c;
        Tensor::from_fn(Shape::new(1, crop, crop, c), |_, y, x, ch| {
            let sx = if flip { sh.w - 1 - (ox + x) } else { ox + x };
            t.at(0, oy + y, sx, ch)
        })
    };
    Ok((window(&s.image)?, window(&s.mask)?))
}

/// Resizes a sample to the network input without augmentation.
pub fn resize_input<T: Scalar>(image: &Tensor<T>, size: usize) -> Result<Tensor<T>> {
    bilinear_resize(image, size, size)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn figures_cover_their_centre() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let f = Figure::random(&mut rng, 64.0);
            if f.kind != ShapeKind::Triangle {
                assert!(f.contains(f.cx, f.cy));
            }
            assert!(!f.contains(-100.0, -100.0));
        }
    }

    #[test]
    fn augment_scale_matches_ratio() {
        assert_eq!(augment_scale(224), 256);
        assert_eq!(augment_scale(64), 74);
    }

    #[test]
    fn flip_and_crop_keep_alignment() {
        let image = Tensor::<f64>::from_fn(Shape::new(1, 9, 9, 3), |_, y, x, c| {
            (y * 9 + x) as f64 + c as f64 * 0.1
        })
        .unwrap();
        let mask = Tensor::<f64>::from_fn(Shape::new(1, 9, 9, 1), |_, y, x, _| (y * 9 + x) as f64)
            .unwrap();
        let s = ScaledSample { image, mask };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let (i, m) = augment(&mut rng, &s, 7).unwrap();
            for y in 0..7 {
                for x in 0..7 {
                    assert_eq!(i.at(0, y, x, 0), m.at(0, y, x, 0));
                }
            }
        }
    }
}

//! Procedural training images and the per-step sampler.

use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SpastError};
use crate::feature_codec::ImageTensor;
use crate::init;

/// Number of procedural texture families used for style images.
pub const STYLE_FAMILIES: usize = 3;

fn smoothstep(edge: f64, x: f64) -> f64 {
    let t = ((x - edge) / 1.5 + 0.5).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn lerp3(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

fn raster(size: usize, mut px: impl FnMut(f64, f64) -> [f64; 3]) -> ImageTensor {
    let n = size * size;
    let mut data = vec![0.0; 3 * n];
    for y in 0..size {
        for x in 0..size {
            let c = px(x as f64 + 0.5, y as f64 + 0.5);
            for k in 0..3 {
                data[k * n + y * size + x] = c[k].clamp(0.0, 1.0);
            }
        }
    }
    ImageTensor::new(data, size, size).expect("procedural pixels are in range")
}

/// A "photo-like" scene: a two-colour gradient sky with a handful of soft
/// edged discs and boxes on top.
pub fn content_image(index: usize, size: usize, seed: u64) -> ImageTensor {
    let mut rng = init::rng_for(seed ^ index as u64, "content-scene");
    let (top, bottom) = (color(&mut rng), color(&mut rng));
    let angle: f64 = rng.random_range(-0.6..0.6);
    let s = size as f64;
    struct Shape {
        disc: bool,
        cx: f64,
        cy: f64,
        rx: f64,
        ry: f64,
        col: [f64; 3],
    }
    let count = rng.random_range(3..6);
    let shapes: Vec<Shape> = (0..count)
        .map(|_| Shape {
            disc: rng.random_bool(0.5),
            cx: rng.random_range(0.1..0.9) * s,
            cy: rng.random_range(0.1..0.9) * s,
            rx: rng.random_range(0.08..0.25) * s,
            ry: rng.random_range(0.08..0.25) * s,
            col: color(&mut rng),
        })
        .collect();
    raster(size, |x, y| {
        let g = ((y / s - 0.5) * angle.cos() + (x / s - 0.5) * angle.sin() + 0.5).clamp(0.0, 1.0);
        let mut c = lerp3(top, bottom, g);
        for sh in &shapes {
            let (dx, dy) = (x - sh.cx, y - sh.cy);
            let dist = if sh.disc {
                ((dx / sh.rx).powi(2) + (dy / sh.ry).powi(2)).sqrt() * sh.rx.min(sh.ry) - sh.rx.min(sh.ry)
            } else {
                (dx.abs() - sh.rx).max(dy.abs() - sh.ry)
            };
            let cover = 1.0 - smoothstep(0.0, dist);
            let shade = 0.85 + 0.15 * (1.0 - dy / (2.0 * sh.ry)).clamp(0.0, 1.0);
            c = lerp3(c, sh.col.map(|v| v * shade), cover);
        }
        c
    })
}

/// Family of style image `index`.
pub fn style_family(index: usize) -> usize {
    index % STYLE_FAMILIES
}

/// Procedural texture: oriented stripes, a dot lattice, or interfering
/// waves, depending on the family, with a random three-colour palette.
pub fn style_image(index: usize, size: usize, seed: u64) -> ImageTensor {
    let mut rng = init::rng_for(seed ^ index as u64, "style-texture");
    let palette = [color(&mut rng), color(&mut rng), color(&mut rng)];
    let s = size as f64;
    let theta: f64 = rng.random_range(0.0..TAU);
    let freq: f64 = rng.random_range(4.0..9.0) / s;
    let phase: f64 = rng.random_range(0.0..TAU);
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.0..TAU),
                rng.random_range(2.0..7.0) / s,
                rng.random_range(0.0..TAU),
            )
        })
        .collect();
    let radius: f64 = rng.random_range(0.2..0.4);
    let family = style_family(index);
    raster(size, |x, y| match family {
        0 => {
            let u = x * theta.cos() + y * theta.sin();
            let v = (TAU * freq * u + phase).sin();
            let w = (TAU * freq * 3.0 * (x * theta.sin() - y * theta.cos())).sin() * 0.15;
            lerp3(palette[0], palette[1], (0.5 + 0.5 * (v * 3.0).tanh() + w).clamp(0.0, 1.0))
        }
        1 => {
            let period = 1.0 / freq;
            let (u, v) = (x * theta.cos() + y * theta.sin(), -x * theta.sin() + y * theta.cos());
            let (fu, fv) = ((u / period).rem_euclid(1.0) - 0.5, (v / period).rem_euclid(1.0) - 0.5);
            let d = (fu * fu + fv * fv).sqrt() - radius;
            let cover = 1.0 - smoothstep(0.0, d * period);
            let ring = ((x + y) * freq * TAU * 0.5).sin() * 0.5 + 0.5;
            lerp3(lerp3(palette[0], palette[2], ring * 0.3), palette[1], cover)
        }
        _ => {
            let v: f64 = waves
                .iter()
                .map(|(a, f, p)| (TAU * f * (x * a.cos() + y * a.sin()) + p).sin())
                .sum::<f64>()
                / 3.0;
            let t = 0.5 + 0.5 * v;
            if t < 0.5 {
                lerp3(palette[0], palette[1], t * 2.0)
            } else {
                lerp3(palette[1], palette[2], t * 2.0 - 1.0)
            }
        }
    })
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub contents: Vec<ImageTensor>,
    pub styles: Vec<ImageTensor>,
}

impl Corpus {
    pub fn synthetic(contents: usize, styles: usize, size: usize, seed: u64) -> Self {
        Corpus {
            contents: (0..contents).map(|i| content_image(i, size, seed)).collect(),
            styles: (0..styles).map(|i| style_image(i, size, seed)).collect(),
        }
    }

    /// Writes `content/NNNN.png` and `style/NNNN.png` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        for (sub, images) in [("content", &self.contents), ("style", &self.styles)] {
            let d = dir.join(sub);
            fs::create_dir_all(&d)?;
            for (i, img) in images.iter().enumerate() {
                img.save(&d.join(format!("{i:04}.png")))?;
            }
        }
        Ok(())
    }
}

/// PNG and JPEG files directly inside `dir`, sorted by file name.
pub fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(SpastError::Config(format!("no PNG or JPEG images in {}", dir.display())));
    }
    Ok(files)
}

/// Loads every image in `dir`, resized to `size×size`.
pub fn load_dir(dir: &Path, size: usize) -> Result<Vec<ImageTensor>> {
    image_files(dir)?
        .iter()
        .map(|p| ImageTensor::load_resized(p, size, size))
        .collect()
}

/// One training pair with the indices it came from.
#[derive(Clone, Debug)]
pub struct Sample {
    pub content_index: usize,
    pub style_index: usize,
    pub content: ImageTensor,
    pub style: ImageTensor,
    /// True when the crop covers the whole image, so the pair is the same
    /// for every draw of these indices.
    pub whole: bool,
}

/// Content and style images resized once, then randomly cropped per draw.
#[derive(Clone, Debug)]
pub struct DataPipeline {
    contents: Vec<ImageTensor>,
    styles: Vec<ImageTensor>,
    crop: usize,
}

impl DataPipeline {
    pub fn new(corpus: Corpus, resize: usize, crop: usize) -> Result<Self> {
        if corpus.contents.is_empty() || corpus.styles.is_empty() {
            return Err(SpastError::Config("content and style corpora must be non-empty".into()));
        }
        if crop > resize {
            return Err(SpastError::Config(format!("crop {crop} exceeds resize {resize}")));
        }
        let fit = |v: Vec<ImageTensor>| -> Result<Vec<ImageTensor>> {
            v.into_iter()
                .map(|img| {
                    if img.height() == resize && img.width() == resize {
                        Ok(img)
                    } else {
                        img.resized(resize, resize)
                    }
                })
                .collect()
        };
        Ok(DataPipeline {
            contents: fit(corpus.contents)?,
            styles: fit(corpus.styles)?,
            crop,
        })
    }

    pub fn contents(&self) -> &[ImageTensor] {
        &self.contents
    }

    pub fn styles(&self) -> &[ImageTensor] {
        &self.styles
    }

    pub fn crop(&self) -> usize {
        self.crop
    }

    fn window(&self, img: &ImageTensor, rng: &mut ChaCha8Rng) -> Result<ImageTensor> {
        let top = rng.random_range(0..=img.height() - self.crop);
        let left = rng.random_range(0..=img.width() - self.crop);
        if self.crop == img.height() && self.crop == img.width() {
            Ok(img.clone())
        } else {
            img.crop(top, left, self.crop)
        }
    }

    /// Draws a content index, a style index, then the two crop windows.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Result<Sample> {
        let ci = rng.random_range(0..self.contents.len());
        let si = rng.random_range(0..self.styles.len());
        let content = self.window(&self.contents[ci], rng)?;
        let style = self.window(&self.styles[si], rng)?;
        Ok(Sample {
            content_index: ci,
            style_index: si,
            content,
            style,
            whole: self.crop == self.contents[ci].height() && self.crop == self.styles[si].height(),
        })
    }
}

//! Quantitative evaluation over every content×style pair of two image
//! directories, and an inference timing benchmark.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SpastError};
use crate::feature_codec::{Encoder, FeaturePyramid, ImageTensor, Level};
use crate::losses::{content_loss, gram_loss, style_loss};
use crate::trainer::{content_image, image_files, style_image, Stylizer};

/// Encoder levels averaged by [`perceptual_distance`].
pub const PERCEPTUAL_LEVELS: [Level; 5] = Level::ALL;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub content_loss: f64,
    pub style_loss: f64,
    pub gram_loss: f64,
    pub perceptual_distance: f64,
}

impl Metrics {
    /// Arithmetic mean, field by field.
    pub fn mean(items: &[Metrics]) -> Metrics {
        let n = items.len().max(1) as f64;
        let sum = |f: fn(&Metrics) -> f64| items.iter().map(f).sum::<f64>() / n;
        Metrics {
            content_loss: sum(|m| m.content_loss),
            style_loss: sum(|m| m.style_loss),
            gram_loss: sum(|m| m.gram_loss),
            perceptual_distance: sum(|m| m.perceptual_distance),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub content: String,
    pub style: String,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub samples: Vec<f64>,
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
    pub resolution: String,
    pub device: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub resolution: usize,
    pub perceptual_levels: Vec<String>,
    pub pairs: usize,
    pub aggregate: Metrics,
    #[serde(skip)]
    pub records: Vec<PairRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timing: Option<TimingStats>,
}

impl EvalReport {
    /// Per-pair rows with a header line.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["content", "style", "content_loss", "style_loss", "gram_loss", "perceptual_distance"])?;
        for r in &self.records {
            let m = &r.metrics;
            w.write_record([
                r.content.clone(),
                r.style.clone(),
                m.content_loss.to_string(),
                m.style_loss.to_string(),
                m.gram_loss.to_string(),
                m.perceptual_distance.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| SpastError::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    /// Aggregate values, levels and timing.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain report")
    }

    /// Table row in the order content, style, gram, perceptual.
    pub fn table_row(&self, name: &str) -> String {
        let a = &self.aggregate;
        format!(
            "{name:<16} {:>10.4} {:>10.4} {:>12.6} {:>10.4}",
            a.content_loss, a.style_loss, a.gram_loss, a.perceptual_distance
        )
    }

    pub fn table_header() -> String {
        format!(
            "{:<16} {:>10} {:>10} {:>12} {:>10}",
            "variant", "content", "style", "gram", "perceptual"
        )
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("pairs.csv"), self.to_csv()?)?;
        std::fs::write(dir.join("aggregate.json"), self.to_json())?;
        Ok(())
    }
}

/// LPIPS-like distance: features are scaled to unit length along the
/// channel axis at every position, then the squared difference is summed
/// over channels, averaged over positions, and averaged over levels.
pub fn perceptual_distance(a: &FeaturePyramid, b: &FeaturePyramid) -> Result<f64> {
    let mut total = 0.0;
    for level in PERCEPTUAL_LEVELS {
        let (x, y) = (a.get(level), b.get(level));
        if x.tensor().shape() != y.tensor().shape() {
            return Err(SpastError::LevelMismatch(format!("{level}: pyramids differ in shape")));
        }
        let (c, hw) = (x.channels(), x.height() * x.width());
        let (xd, yd) = (x.tensor().data(), y.tensor().data());
        let mut level_sum = 0.0;
        for p in 0..hw {
            let norm = |d: &[f64]| (0..c).map(|k| d[k * hw + p].powi(2)).sum::<f64>().sqrt() + 1e-10;
            let (nx, ny) = (norm(xd), norm(yd));
            level_sum += (0..c).map(|k| (xd[k * hw + p] / nx - yd[k * hw + p] / ny).powi(2)).sum::<f64>();
        }
        total += level_sum / hw as f64;
    }
    Ok(total / PERCEPTUAL_LEVELS.len() as f64)
}

/// Metrics for one stylized image against its inputs.
pub fn pair_metrics(encoder: &Encoder, stylized: &ImageTensor, content: &ImageTensor, style: &ImageTensor) -> Result<Metrics> {
    let e_cs = encoder.encode_pyramid(stylized)?;
    let e_c = encoder.encode_pyramid(content)?;
    let e_s = encoder.encode_pyramid(style)?;
    Ok(Metrics {
        content_loss: content_loss(&e_cs, &e_c)?.item(),
        style_loss: style_loss(&e_cs, &e_s)?.item(),
        gram_loss: gram_loss(&e_cs, &e_s)?.item(),
        perceptual_distance: perceptual_distance(&e_cs, &e_c)?,
    })
}

/// Evaluates every content×style pair, content-major.
pub fn evaluate_images(
    model: &dyn Stylizer,
    encoder: &Encoder,
    contents: &[(String, ImageTensor)],
    styles: &[(String, ImageTensor)],
) -> Result<EvalReport> {
    if contents.is_empty() || styles.is_empty() {
        return Err(SpastError::Config("evaluation needs at least one content and one style image".into()));
    }
    let mut records = Vec::with_capacity(contents.len() * styles.len());
    for (cname, c) in contents {
        for (sname, s) in styles {
            let out = model.stylize(c, s)?;
            records.push(PairRecord {
                content: cname.clone(),
                style: sname.clone(),
                metrics: pair_metrics(encoder, &out, c, s)?,
            });
        }
    }
    let all: Vec<Metrics> = records.iter().map(|r| r.metrics).collect();
    Ok(EvalReport {
        resolution: contents[0].1.height(),
        perceptual_levels: PERCEPTUAL_LEVELS.iter().map(|l| l.to_string()).collect(),
        pairs: records.len(),
        aggregate: Metrics::mean(&all),
        records,
        timing: None,
    })
}

fn load_named(dir: &Path, resolution: usize) -> Result<Vec<(String, ImageTensor)>> {
    image_files(dir)?
        .into_iter()
        .map(|p| {
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((name, ImageTensor::load_resized(&p, resolution, resolution)?))
        })
        .collect()
}

/// Loads both directories at `resolution×resolution` and evaluates every
/// pair in sorted file-name order.
pub fn evaluate(
    model: &dyn Stylizer,
    encoder: &Encoder,
    content_dir: &Path,
    style_dir: &Path,
    resolution: usize,
) -> Result<EvalReport> {
    let contents = load_named(content_dir, resolution)?;
    let styles = load_named(style_dir, resolution)?;
    evaluate_images(model, encoder, &contents, &styles)
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn device_descriptor() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_string())
        })
        .unwrap_or_else(|| std::env::consts::ARCH.to_string());
    let threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    format!("cpu: {cpu} ({threads} threads available, single-threaded f64)")
}

/// Times `trials` stylizations of a procedural pair at `resolution` after
/// one untimed warm-up.
pub fn benchmark_inference(model: &dyn Stylizer, resolution: usize, trials: usize) -> Result<TimingStats> {
    if trials < 3 {
        return Err(SpastError::Config(format!("benchmark needs at least 3 trials, got {trials}")));
    }
    let content = content_image(0, resolution, 0);
    let style = style_image(0, resolution, 0);
    model.stylize(&content, &style)?;
    let mut samples = Vec::with_capacity(trials);
    for _ in 0..trials {
        let start = Instant::now();
        model.stylize(&content, &style)?;
        samples.push(start.elapsed().as_secs_f64());
    }
    let mut sorted = samples.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(TimingStats {
        mean: samples.iter().sum::<f64>() / trials as f64,
        p50: quantile(&sorted, 0.5),
        p95: quantile(&sorted, 0.95),
        samples,
        resolution: format!("{resolution}x{resolution}"),
        device: device_descriptor(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles_interpolate() {
        let s = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile(&s, 0.5), 3.0);
        assert!((quantile(&s, 0.95) - 4.8).abs() < 1e-12);
    }

    #[test]
    fn mean_of_metrics() {
        let m = Metrics::mean(&[
            Metrics { content_loss: 1.0, style_loss: 2.0, gram_loss: 3.0, perceptual_distance: 4.0 },
            Metrics { content_loss: 3.0, style_loss: 4.0, gram_loss: 5.0, perceptual_distance: 6.0 },
        ]);
        assert_eq!(m, Metrics { content_loss: 2.0, style_loss: 3.0, gram_loss: 4.0, perceptual_distance: 5.0 });
    }
}

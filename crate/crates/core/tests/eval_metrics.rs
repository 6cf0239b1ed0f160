use spast_core::eval_metrics::*;
use spast_core::feature_codec::{Encoder, EncoderWeights, ImageTensor, Widths};
use spast_core::losses::{content_loss, gram_loss, style_loss};
use spast_core::trainer::{content_image, style_image, Corpus, PassThrough, SpastNet, Stylizer, InferenceModel};
use spast_core::lgwssm::Branches;
use spast_core::feature_codec::Level;
use spast_core::SpastError;

fn encoder() -> Encoder {
    Encoder::new(EncoderWeights::init(Widths::new(16).unwrap(), 4, "eval-test")).unwrap()
}

fn named(prefix: &str, images: Vec<ImageTensor>) -> Vec<(String, ImageTensor)> {
    images.into_iter().enumerate().map(|(i, img)| (format!("{prefix}-{i}"), img)).collect()
}

/// Brightens the content by a style-dependent amount so every pair differs.
struct Tint;

impl Stylizer for Tint {
    fn stylize(&self, content: &ImageTensor, style: &ImageTensor) -> spast_core::Result<ImageTensor> {
        let m = style.data().iter().sum::<f64>() / style.data().len() as f64;
        ImageTensor::new(content.data().iter().map(|v| (0.7 * v + 0.3 * m).min(1.0)).collect(), content.height(), content.width())
    }
}

#[test]
fn pass_through_on_the_same_directory_has_zero_content_loss() {
    let dir = tempfile::tempdir().unwrap();
    Corpus::synthetic(3, 1, 32, 0).write(dir.path()).unwrap();
    let content = dir.path().join("content");
    let report = evaluate(&PassThrough, &encoder(), &content, &content, 32).unwrap();
    assert_eq!(report.pairs, 9);
    assert_eq!(report.aggregate.content_loss, 0.0);
    for r in report.records.iter().filter(|r| r.content == r.style) {
        assert_eq!(r.metrics.style_loss, 0.0);
        assert_eq!(r.metrics.perceptual_distance, 0.0);
    }
}

#[test]
fn three_by_four_yields_twelve_ordered_records() {
    let enc = encoder();
    let contents = named("c", (0..3).map(|i| content_image(i, 32, 0)).collect());
    let styles = named("s", (0..4).map(|i| style_image(i, 32, 0)).collect());
    let report = evaluate_images(&Tint, &enc, &contents, &styles).unwrap();
    assert_eq!(report.records.len(), 12);
    let order: Vec<(String, String)> = report.records.iter().map(|r| (r.content.clone(), r.style.clone())).collect();
    let expected: Vec<(String, String)> = (0..3)
        .flat_map(|c| (0..4).map(move |s| (format!("c-{c}"), format!("s-{s}"))))
        .collect();
    assert_eq!(order, expected);
    let n = report.records.len() as f64;
    let mean = |f: fn(&Metrics) -> f64| report.records.iter().map(|r| f(&r.metrics)).sum::<f64>() / n;
    assert!((report.aggregate.content_loss - mean(|m| m.content_loss)).abs() <= 1e-9);
    assert!((report.aggregate.style_loss - mean(|m| m.style_loss)).abs() <= 1e-9);
    assert!((report.aggregate.gram_loss - mean(|m| m.gram_loss)).abs() <= 1e-9);
    assert!((report.aggregate.perceptual_distance - mean(|m| m.perceptual_distance)).abs() <= 1e-9);
}

#[test]
fn pair_metrics_reuse_the_training_losses() {
    let enc = encoder();
    let (c, s) = (content_image(5, 32, 0), style_image(1, 32, 0));
    let out = Tint.stylize(&c, &s).unwrap();
    let m = pair_metrics(&enc, &out, &c, &s).unwrap();
    let (pcs, pc, ps) = (
        enc.encode_pyramid(&out).unwrap(),
        enc.encode_pyramid(&c).unwrap(),
        enc.encode_pyramid(&s).unwrap(),
    );
    assert_eq!(m.content_loss, content_loss(&pcs, &pc).unwrap().item());
    assert_eq!(m.style_loss, style_loss(&pcs, &ps).unwrap().item());
    assert_eq!(m.gram_loss, gram_loss(&pcs, &ps).unwrap().item());
    assert!(m.perceptual_distance > 0.0);
}

#[test]
fn perceptual_distance_ignores_feature_scale() {
    let enc = encoder();
    let a = enc.encode_pyramid(&content_image(0, 32, 0)).unwrap();
    let b = enc.encode_pyramid(&content_image(1, 32, 0)).unwrap();
    let d = perceptual_distance(&a, &b).unwrap();
    assert!(d > 0.0 && d <= 4.0);
    assert_eq!(perceptual_distance(&a, &a).unwrap(), 0.0);
    assert_eq!(PERCEPTUAL_LEVELS.len(), 5);
}

#[test]
fn report_serialises_to_csv_and_json() {
    let enc = encoder();
    let report = evaluate_images(
        &Tint,
        &enc,
        &named("c", vec![content_image(0, 32, 0)]),
        &named("s", vec![style_image(0, 32, 0), style_image(1, 32, 0)]),
    )
    .unwrap();
    let csv = report.to_csv().unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "content,style,content_loss,style_loss,gram_loss,perceptual_distance");
    assert_eq!(lines.count(), 2);
    let json: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
    assert_eq!(json["pairs"], 2);
    assert_eq!(json["perceptual_levels"].as_array().unwrap().len(), 5);
    let dir = tempfile::tempdir().unwrap();
    report.write(dir.path()).unwrap();
    assert!(dir.path().join("pairs.csv").exists() && dir.path().join("aggregate.json").exists());
    assert!(report.table_row("full").starts_with("full"));
}

#[test]
fn unreadable_image_in_a_directory_is_named() {
    let dir = tempfile::tempdir().unwrap();
    Corpus::synthetic(2, 1, 32, 0).write(dir.path()).unwrap();
    std::fs::write(dir.path().join("content").join("0005.png"), b"junk").unwrap();
    let content = dir.path().join("content");
    let err = evaluate(&PassThrough, &encoder(), &content, &dir.path().join("style"), 32).unwrap_err();
    assert!(matches!(err, SpastError::UnreadableImage { .. }));
    assert!(err.to_string().contains("0005.png"));
}

#[test]
fn benchmark_records_every_trial() {
    let enc = encoder();
    let net = SpastNet::new(Widths::new(16).unwrap(), vec![Level::Relu4_1, Level::Relu5_1], 2, Branches::default()).unwrap();
    let params = net.init(&mut spast_core::init::rng_for(0, "bench"));
    let model = InferenceModel::new(enc, net, &params);
    let t = benchmark_inference(&model, 64, 10).unwrap();
    assert_eq!(t.samples.len(), 10);
    assert!(t.p50 <= t.p95);
    assert!(t.samples.iter().all(|s| *s > 0.0));
    assert_eq!(t.resolution, "64x64");
    assert!(!t.device.is_empty());
    assert!(matches!(benchmark_inference(&model, 64, 2), Err(SpastError::Config(_))));
}

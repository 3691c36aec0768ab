use textstyle::corpus::ImageBuffer as Image;
use textstyle::extractor::FeatureExtractor as Extractor;
use textstyle::style::{synthesize, StyleConfig, StyleTargets};
use textstyle::synthetic::gradient_image;
use textstyle::{style, Error, FeatureExtractor};
use textstyle_testkit::fixtures::style_pair;

#[test]
fn converges_within_two_hundred_iterations() {
    let (content, style_img) = style_pair();
    let ex = FeatureExtractor::seeded(0);
    let config = StyleConfig::default();
    let mut seen = 0;
    let out = synthesize(&content, &style_img, &ex, &config, |_| seen += 1).unwrap();
    assert_eq!(seen, 200);
    assert_eq!(out.history.len(), 200);
    assert_eq!(out.history[179].lr, 3.0);
    assert_eq!(out.history[180].lr, 0.1);
    let ratio = out.final_losses.total / out.history[0].total;
    assert!(ratio <= 0.2, "ratio {ratio}");
    assert!(out.image.tensor().data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn identity_pair_starts_at_zero_content_and_style_loss() {
    let (content, _) = style_pair();
    let ex = FeatureExtractor::seeded(0);
    let config = StyleConfig { iterations: 1, decay_at_iteration: 1, ..StyleConfig::default() };
    let out = synthesize(&content, &content, &ex, &config, |_| {}).unwrap();
    assert_eq!(out.history[0].content_loss, 0.0);
    assert_eq!(out.history[0].style_loss, 0.0);
    assert!(out.history[0].tv_loss > 0.0);
}

#[test]
fn zero_iterations_returns_content() {
    let (content, style_img) = style_pair();
    let ex = FeatureExtractor::seeded(0);
    let config = StyleConfig { iterations: 0, decay_at_iteration: 0, ..StyleConfig::default() };
    let out = synthesize(&content, &style_img, &ex, &config, |_| {}).unwrap();
    assert!(out.history.is_empty());
    assert_eq!(out.image, content);
    assert_eq!(out.final_losses.content_loss, 0.0);
}

#[test]
fn synthesis_is_deterministic() {
    let (content, style_img) = style_pair();
    let ex = FeatureExtractor::seeded(5);
    let config = StyleConfig { iterations: 20, decay_at_iteration: 15, ..StyleConfig::default() };
    let a = synthesize(&content, &style_img, &ex, &config, |_| {}).unwrap();
    let b = synthesize(&content, &style_img, &ex, &config, |_| {}).unwrap();
    assert_eq!(a.image.to_png_bytes(), b.image.to_png_bytes());
    assert_eq!(style::history_csv(&a.history), style::history_csv(&b.history));
}

#[test]
fn total_is_linear_in_the_weights() {
    let (content, style_img) = style_pair();
    let ex = FeatureExtractor::seeded(0);
    let x = gradient_image(32, 32, [0.3, 0.6, 0.2], [0.7, 0.1, 0.5]);
    let base = StyleConfig::default();
    let targets = StyleTargets::new(&ex, &content, &style_img, &base).unwrap();
    let (r, _) = style::evaluate_losses(&ex, &x, &targets, &base).unwrap();
    let doubled = StyleConfig {
        content_weight: 2.0 * base.content_weight,
        style_weights: base.style_weights.iter().map(|w| 2.0 * w).collect(),
        tv_weight: 2.0 * base.tv_weight,
        ..base.clone()
    };
    let (r2, _) = style::evaluate_losses(&ex, &x, &targets, &doubled).unwrap();
    assert!((r2.total - 2.0 * r.total).abs() <= 1e-12 * r.total);
    let want = base.content_weight * r.content_loss + r.style_loss + base.tv_weight * r.tv_loss;
    assert!((r.total - want).abs() <= 1e-12 * want);
}

#[test]
fn single_precision_tracks_double() {
    let (content, style_img) = style_pair();
    let config = StyleConfig { iterations: 5, decay_at_iteration: 5, ..StyleConfig::default() };
    let a = synthesize(&content, &style_img, &FeatureExtractor::seeded(0), &config, |_| {}).unwrap();
    let c32 = Image::<f32>::new(content.tensor().cast()).unwrap();
    let s32 = Image::<f32>::new(style_img.tensor().cast()).unwrap();
    let b = synthesize(&c32, &s32, &Extractor::<f32>::seeded(0), &config, |_| {}).unwrap();
    let (t64, t32) = (a.history[0].total, b.history[0].total);
    assert!((t64 - t32).abs() <= 1e-4 * t64, "{t64} vs {t32}");
}

#[test]
fn invalid_config_is_rejected() {
    let (content, style_img) = style_pair();
    let config = StyleConfig { style_weights: vec![1.0], ..StyleConfig::default() };
    let err = synthesize(&content, &style_img, &FeatureExtractor::seeded(0), &config, |_| {}).unwrap_err();
    assert!(matches!(err, Error::Validation(_)));
}

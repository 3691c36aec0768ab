//! Analytic gradients against central finite differences.
//!
//! Each check draws `n` random instances and compares every coordinate with
//! relative tolerance [`REL_TOL`]; the denominator is floored at 1e-6 so
//! coordinates whose true gradient is zero are compared absolutely.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use textstyle::corpus::ImageBuffer;
use textstyle::embedding::{margin_loss, ProjectionHead};
use textstyle::extractor::FeatureExtractor;
use textstyle::ops;
use textstyle::style::{self, content_loss, layer_style_loss, tv_loss, StyleConfig, StyleTargets};
use textstyle::tensor::Tensor;

use crate::{ensure, err, random, Check, Outcome};

pub const STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central difference of `f` along every coordinate of `x`.
pub fn numeric_grad(x: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut plus = x.clone();
            plus.data_mut()[i] += STEP;
            let mut minus = x.clone();
            minus.data_mut()[i] -= STEP;
            (f(&plus) - f(&minus)) / (2.0 * STEP)
        })
        .collect()
}

/// Tracks the worst relative error across all compared coordinates.
struct Tracker {
    name: &'static str,
    worst: f64,
    instances: usize,
}

impl Tracker {
    fn new(name: &'static str) -> Self {
        Self { name, worst: 0.0, instances: 0 }
    }

    fn compare(&mut self, what: &str, analytic: &Tensor<f64>, numeric: &[f64]) -> Result<(), String> {
        ensure!(analytic.len() == numeric.len(), "{what}: {} vs {} coordinates", analytic.len(), numeric.len());
        for (i, (&a, &n)) in analytic.data().iter().zip(numeric).enumerate() {
            let e = relative_error(a, n);
            self.worst = self.worst.max(e);
            ensure!(e <= REL_TOL, "{}: {what}[{i}] analytic {a} numeric {n} (rel {e:.2e})", self.name);
        }
        Ok(())
    }

    fn done(self) -> Outcome {
        Ok(Check { name: self.name, instances: self.instances, worst: self.worst })
    }
}

fn probe(t: &Tensor<f64>, w: &Tensor<f64>) -> f64 {
    t.dot(w).expect("matching shapes")
}

pub fn conv2d(seed: u64, n: usize) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tracker::new("conv2d");
    for _ in 0..n {
        let c_in = rng.random_range(1..3);
        let c_out = rng.random_range(1..4);
        let (h, w) = (rng.random_range(3..6), rng.random_range(3..6));
        let pad = rng.random_range(0..2);
        let x = random(&mut rng, &[c_in, h, w]);
        let k = random(&mut rng, &[c_out, c_in, 3, 3]);
        let y = ops::conv2d_forward(&x, &k, pad).map_err(err)?;
        let g = random(&mut rng, y.shape());
        let (gx, gk) = ops::conv2d_backward(&g, &x, &k, pad).map_err(err)?;
        t.compare("input", &gx, &numeric_grad(&x, |x| probe(&ops::conv2d_forward(x, &k, pad).unwrap(), &g)))?;
        t.compare("kernel", &gk, &numeric_grad(&k, |k| probe(&ops::conv2d_forward(&x, k, pad).unwrap(), &g)))?;
        let gx_only = ops::conv2d_backward_input(&g, x.shape(), &k, pad).map_err(err)?;
        ensure!(gx_only == gx, "conv2d: input-only backward differs from full backward");

        let b = random(&mut rng, &[c_out]);
        let gb = ops::channel_bias_backward(&g).map_err(err)?;
        t.compare("bias", &gb, &numeric_grad(&b, |b| probe(&ops::add_channel_bias(&y, b).unwrap(), &g)))?;
        t.instances += 1;
    }
    t.done()
}

pub fn relu(seed: u64, n: usize) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tracker::new("relu");
    for _ in 0..n {
        let mut x = random(&mut rng, &[2, 3, 3]);
        // Keep every coordinate at least 1e-3 away from the kink.
        x.data_mut().iter_mut().filter(|v| v.abs() < 1e-3).for_each(|v| *v = 0.5);
        let g = random(&mut rng, x.shape());
        let analytic = ops::relu_backward(&g, &x).map_err(err)?;
        t.compare("input", &analytic, &numeric_grad(&x, |x| probe(&ops::relu_forward(x), &g)))?;
        t.instances += 1;
    }
    t.done()
}

pub fn maxpool(seed: u64, n: usize) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tracker::new("maxpool");
    while t.instances < n {
        let x = random(&mut rng, &[2, 4, 6]);
        let (y, mask) = ops::maxpool2_forward(&x).map_err(err)?;
        // Skip instances where a step could change a window's winner.
        let mut sorted = x.data().to_vec();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).any(|w| w[1] - w[0] < 10.0 * STEP) {
            continue;
        }
        let g = random(&mut rng, y.shape());
        let analytic = ops::maxpool2_backward(&g, &mask).map_err(err)?;
        t.compare("input", &analytic, &numeric_grad(&x, |x| probe(&ops::maxpool2_forward(x).unwrap().0, &g)))?;
        t.instances += 1;
    }
    t.done()
}

pub fn linear(seed: u64, n: usize) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tracker::new("matvec/add/scale");
    for _ in 0..n {
        let (m, k) = (rng.random_range(1..5), rng.random_range(1..5));
        let w = random(&mut rng, &[m, k]);
        let x = random(&mut rng, &[k]);
        let g = random(&mut rng, &[m]);
        let (gw, gx) = ops::matvec_backward(&g, &w, &x).map_err(err)?;
        t.compare("matvec W", &gw, &numeric_grad(&w, |w| probe(&ops::matvec(w, &x).unwrap(), &g)))?;
        t.compare("matvec x", &gx, &numeric_grad(&x, |x| probe(&ops::matvec(&w, x).unwrap(), &g)))?;

        let gk = random(&mut rng, &[k]);
        let s = rng.random_range(-2.0..2.0);
        t.compare("scale", &ops::scale_backward(&gk, s), &numeric_grad(&x, |x| probe(&ops::scale(x, s), &gk)))?;
        let b = random(&mut rng, &[k]);
        let (ga, gb) = ops::add_backward(&gk);
        t.compare("add lhs", &ga, &numeric_grad(&x, |x| probe(&ops::add(x, &b).unwrap(), &gk)))?;
        t.compare("add rhs", &gb, &numeric_grad(&b, |b| probe(&ops::add(&x, b).unwrap(), &gk)))?;
        t.instances += 1;
    }
    t.done()
}

pub fn tanh(seed: u64, n: usize) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tracker::new("tanh");
    for _ in 0..n {
        let len = rng.random_range(1..8);
        let x = random(&mut rng, &[len]).map(|v| 2.0 * v);
        let g = random(&mut rng, x.shape());
        let y = ops::tanh_forward(&x);
        let analytic = ops::tanh_backward(&g, &y).map_err(err)?;
        t.compare("input", &analytic, &numeric_grad(&x, |x| probe(&ops::tanh_forward(x), &g)))?;
        t.instances += 1;
    }
    t.done()
}

pub fn normalize(seed: u64, n: usize) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tracker::new("l2_normalize");
    for _ in 0..n {
        let len = rng.random_range(1..8);
        let x = random(&mut rng, &[len]);
        let g = random(&mut rng, x.shape());
        let y = ops::l2_normalize(&x).map_err(err)?;
        let analytic = ops::l2_normalize_backward(&g, &x, &y).map_err(err)?;
        t.compare("input", &analytic, &numeric_grad(&x, |x| probe(&ops::l2_normalize(x).unwrap(), &g)))?;
        t.instances += 1;
    }
    t.done()
}

pub fn projection_head(seed: u64, n: usize) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tracker::new("projection head");
    for _ in 0..n {
        let mut head = ProjectionHead::<f64>::init(5, 7, &mut rng);
        head.bias = random(&mut rng, &[7]);
        let inputs: Vec<_> = (0..4).map(|_| random(&mut rng, &[5])).collect();
        head.fit_standardization(&inputs).map_err(err)?;
        let x = random(&mut rng, &[5]);
        let g = random(&mut rng, &[7]);
        let trace = head.forward_trace(&x).map_err(err)?;
        let grads = head.backward(&trace, &g).map_err(err)?;
        let nw = numeric_grad(&head.weight, |w| {
            let h = ProjectionHead { weight: w.clone(), ..head.clone() };
            probe(&h.forward(&x).unwrap(), &g)
        });
        let nb = numeric_grad(&head.bias, |b| {
            let h = ProjectionHead { bias: b.clone(), ..head.clone() };
            probe(&h.forward(&x).unwrap(), &g)
        });
        let nx = numeric_grad(&x, |x| probe(&head.forward(x).unwrap(), &g));
        t.compare("weight", &grads.weight, &nw)?;
        t.compare("bias", &grads.bias, &nb)?;
        t.compare("input", &head.input_gradient(&trace, &g).map_err(err)?, &nx)?;
        t.instances += 1;
    }
    t.done()
}

/// Matching and mismatched pairs, skipping mismatched pairs within 1e-3 of the hinge.
pub fn margin(seed: u64, n: usize) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tracker::new("margin loss");
    let m = 0.1;
    while t.instances < n {
        let a = ops::l2_normalize(&random(&mut rng, &[4])).map_err(err)?;
        let b = ops::l2_normalize(&random(&mut rng, &[4])).map_err(err)?;
        let cos = a.dot(&b).map_err(err)?;
        let is_match = t.instances.is_multiple_of(2);
        if !is_match && (cos - m).abs() < 1e-3 {
            continue;
        }
        let out = margin_loss(&a, &b, is_match, m).map_err(err)?;
        // The loss depends on the cosine only, which is defined off the sphere too.
        let loss = |a: &Tensor<f64>, b: &Tensor<f64>| {
            let c = a.dot(b).unwrap() / (a.norm() * b.norm());
            if is_match { 1.0 - c } else { (c - m).max(0.0) }
        };
        t.compare("text", &out.grad_text, &numeric_grad(&a, |a| loss(a, &b)))?;
        t.compare("visual", &out.grad_visual, &numeric_grad(&b, |b| loss(&a, b)))?;
        t.instances += 1;
    }
    t.done()
}

pub fn content(seed: u64, n: usize) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tracker::new("content loss");
    for _ in 0..n {
        let shape = [rng.random_range(1..5), rng.random_range(1..7)];
        let f = random(&mut rng, &shape);
        let p = random(&mut rng, &shape);
        let (_, g) = content_loss(&f, &p).map_err(err)?;
        t.compare("features", &g, &numeric_grad(&f, |f| content_loss(f, &p).unwrap().0))?;
        t.instances += 1;
    }
    t.done()
}

pub fn style_layer(seed: u64, n: usize) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tracker::new("style loss");
    for _ in 0..n {
        let shape = [rng.random_range(1..5), rng.random_range(1..7)];
        let f = random(&mut rng, &shape);
        let a = style::gram(&random(&mut rng, &shape)).map_err(err)?;
        let (_, g) = layer_style_loss(&f, &a).map_err(err)?;
        t.compare("features", &g, &numeric_grad(&f, |f| layer_style_loss(f, &a).unwrap().0))?;
        t.instances += 1;
    }
    t.done()
}

pub fn total_variation(seed: u64, n: usize) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tracker::new("tv loss");
    for _ in 0..n {
        let shape = [rng.random_range(1..4), rng.random_range(1..5), rng.random_range(1..5)];
        let x = random(&mut rng, &shape);
        let (_, g) = tv_loss(&x).map_err(err)?;
        t.compare("image", &g, &numeric_grad(&x, |x| tv_loss(x).unwrap().0))?;
        t.instances += 1;
    }
    t.done()
}

/// ReLU activation pattern and pooling choices of a forward pass. Probes
/// that change it straddle a kink and are excluded from comparison.
fn activation_signature(ex: &FeatureExtractor<f64>, img: &Tensor<f64>, depth: usize) -> Vec<usize> {
    let trace = ex.forward(&ImageBuffer::new(img.clone()).unwrap(), depth).unwrap();
    let mut sig = Vec::new();
    for z in &trace.preactivations {
        sig.extend(z.data().iter().map(|&v| (v > 0.0) as usize));
    }
    for mask in trace.pool_masks.iter().flatten() {
        sig.extend_from_slice(mask.argmax());
    }
    sig
}

/// Pixels in (0.05, 0.95) so no probe reaches the clamp to [0, 1].
fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor<f64> {
    Tensor::new(vec![3, h, w], (0..3 * h * w).map(|_| rng.random_range(0.05..0.95)).collect())
        .expect("image shape")
}

fn compare_pixels(
    t: &mut Tracker,
    ex: &FeatureExtractor<f64>,
    img: &Tensor<f64>,
    depth: usize,
    analytic: &Tensor<f64>,
    f: impl Fn(&Tensor<f64>) -> f64,
) -> Result<(), String> {
    let base = activation_signature(ex, img, depth);
    let mut compared = 0;
    for i in 0..img.len() {
        let mut plus = img.clone();
        plus.data_mut()[i] += STEP;
        let mut minus = img.clone();
        minus.data_mut()[i] -= STEP;
        if activation_signature(ex, &plus, depth) != base || activation_signature(ex, &minus, depth) != base {
            continue;
        }
        let numeric = (f(&plus) - f(&minus)) / (2.0 * STEP);
        let a = analytic.data()[i];
        let e = relative_error(a, numeric);
        t.worst = t.worst.max(e);
        ensure!(e <= REL_TOL, "{}: pixel {i} analytic {a} numeric {numeric} (rel {e:.2e})", t.name);
        compared += 1;
    }
    ensure!(compared * 2 > img.len(), "{}: only {compared} of {} pixels away from kinks", t.name, img.len());
    Ok(())
}

/// Backpropagation of random feature gradients on random tap sets.
pub fn extractor(seed: u64, n: usize) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tracker::new("extractor backprop");
    for trial in 0..n {
        let ex = FeatureExtractor::<f64>::seeded(seed.wrapping_add(trial as u64));
        let img = random_image(&mut rng, 8, 8);
        let mut layers: Vec<usize> = (1..=8).filter(|_| rng.random_bool(0.4)).collect();
        if layers.is_empty() {
            layers.push(rng.random_range(1..=8));
        }
        let image = ImageBuffer::new(img.clone()).map_err(err)?;
        let maps = ex.extract(&image, &layers).map_err(err)?;
        let grads: BTreeMap<usize, Tensor<f64>> =
            maps.iter().map(|(&l, f)| (l, random(&mut rng, f.data.shape()))).collect();
        let analytic = ex.backprop_to_image(&image, &grads).map_err(err)?;
        let depth = *layers.iter().max().expect("non-empty");
        let f = |x: &Tensor<f64>| {
            let maps = ex.extract(&ImageBuffer::new(x.clone()).unwrap(), &layers).unwrap();
            maps.iter().map(|(l, f)| f.data.dot(&grads[l]).unwrap()).sum::<f64>()
        };
        compare_pixels(&mut t, &ex, &img, depth, &analytic, f)?;
        t.instances += 1;
    }
    t.done()
}

/// Gradient of the weighted total loss with respect to the pixels, 3x8x8.
pub fn pixel_total(seed: u64, n: usize) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tracker::new("total pixel gradient");
    let config = StyleConfig::default();
    for trial in 0..n {
        let ex = FeatureExtractor::<f64>::seeded(seed.wrapping_add(100 + trial as u64));
        let content = ImageBuffer::new(random_image(&mut rng, 8, 8)).map_err(err)?;
        let style_img = ImageBuffer::new(random_image(&mut rng, 8, 8)).map_err(err)?;
        let x = random_image(&mut rng, 8, 8);
        let targets = StyleTargets::new(&ex, &content, &style_img, &config).map_err(err)?;
        let image = ImageBuffer::new(x.clone()).map_err(err)?;
        let (_, analytic) = style::evaluate_losses(&ex, &image, &targets, &config).map_err(err)?;
        let f = |x: &Tensor<f64>| {
            style::evaluate_losses(&ex, &ImageBuffer::new(x.clone()).unwrap(), &targets, &config)
                .unwrap()
                .0
                .total
        };
        compare_pixels(&mut t, &ex, &x, 7, &analytic, f)?;
        t.instances += 1;
    }
    t.done()
}

/// Every check above with `n` instances each.
pub fn all(seed: u64, n: usize) -> Vec<Outcome> {
    vec![
        conv2d(seed, n),
        relu(seed + 1, n),
        maxpool(seed + 2, n),
        linear(seed + 3, n),
        tanh(seed + 4, n),
        normalize(seed + 5, n),
        projection_head(seed + 6, n),
        margin(seed + 7, n),
        content(seed + 8, n),
        style_layer(seed + 9, n),
        total_variation(seed + 10, n),
        extractor(seed + 11, n),
        pixel_total(seed + 12, n),
    ]
}

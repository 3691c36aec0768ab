//! Content, Gram-matrix style and total-variation losses, and the pixel
//! optimization loop that combines them.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::adam::AdamState;
use crate::corpus::ImageBuffer;
use crate::error::{dim_err, Error, Result};
use crate::extractor::{FeatureExtractor, FeatureMap, NUM_BLOCKS};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `1/2 * sum (F - P)^2` and its gradient `F - P` with respect to `F`.
pub fn content_loss<T: Scalar>(features: &Tensor<T>, target: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    let diff = features.zip_map(target, |f, p| f - p)?;
    let loss = T::lit(0.5) * diff.data().iter().map(|&d| d * d).sum::<T>();
    Ok((loss, diff))
}

/// `G = F F^T` for a `[N, M]` feature matrix.
pub fn gram<T: Scalar>(features: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, m) = features.dims2()?;
    let f = features.data();
    let mut g = vec![T::zero(); n * n];
    for i in 0..n {
        let fi = &f[i * m..(i + 1) * m];
        for j in i..n {
            let fj = &f[j * m..(j + 1) * m];
            let mut acc = T::zero();
            for k in 0..m {
                acc += fi[k] * fj[k];
            }
            g[i * n + j] = acc;
            g[j * n + i] = acc;
        }
    }
    Tensor::new(vec![n, n], g)
}

/// `E_l = sum (G - A)^2 / (4 N^2 M^2)` with gradient `(G - A) F / (N^2 M^2)`.
pub fn layer_style_loss<T: Scalar>(
    features: &Tensor<T>,
    target_gram: &Tensor<T>,
) -> Result<(T, Tensor<T>)> {
    let (n, m) = features.dims2()?;
    if target_gram.shape() != [n, n] {
        return Err(dim_err!(
            "target Gram {:?} does not match {n} feature channels",
            target_gram.shape()
        ));
    }
    let diff = gram(features)?.zip_map(target_gram, |g, a| g - a)?;
    let nm2 = T::from_usize_lossy(n * n) * T::from_usize_lossy(m * m);
    let loss = diff.data().iter().map(|&d| d * d).sum::<T>() / (T::lit(4.0) * nm2);

    let d = diff.data();
    let f = features.data();
    let mut grad = vec![T::zero(); n * m];
    for i in 0..n {
        let row = &mut grad[i * m..(i + 1) * m];
        for j in 0..n {
            let dij = d[i * n + j];
            if dij == T::zero() {
                continue;
            }
            for (g, &fjk) in row.iter_mut().zip(&f[j * m..(j + 1) * m]) {
                *g += dij * fjk;
            }
        }
        row.iter_mut().for_each(|g| *g /= nm2);
    }
    Ok((loss, Tensor::new(vec![n, m], grad)?))
}

/// `sum_l w_l E_l` over the configured layers, with per-layer gradients
/// already scaled by `w_l`.
pub fn style_loss<T: Scalar>(
    features: &BTreeMap<usize, FeatureMap<T>>,
    target_grams: &BTreeMap<usize, Tensor<T>>,
    layers: &[usize],
    weights: &[T],
) -> Result<(T, BTreeMap<usize, Tensor<T>>)> {
    if layers.len() != weights.len() {
        return Err(Error::Validation(format!(
            "{} style layers but {} style weights",
            layers.len(),
            weights.len()
        )));
    }
    let mut total = T::zero();
    let mut grads = BTreeMap::new();
    for (&layer, &w) in layers.iter().zip(weights) {
        let fmap = features
            .get(&layer)
            .ok_or_else(|| Error::Validation(format!("no features for style layer {layer}")))?;
        let target = target_grams
            .get(&layer)
            .ok_or_else(|| Error::Validation(format!("no target Gram for style layer {layer}")))?;
        let (e, g) = layer_style_loss(&fmap.data, target)?;
        total += w * e;
        accumulate(&mut grads, layer, g.map(|v| v * w))?;
    }
    Ok((total, grads))
}

fn accumulate<T: Scalar>(
    grads: &mut BTreeMap<usize, Tensor<T>>,
    layer: usize,
    g: Tensor<T>,
) -> Result<()> {
    match grads.get_mut(&layer) {
        Some(existing) => existing.add_assign(&g),
        None => {
            grads.insert(layer, g);
            Ok(())
        }
    }
}

/// Anisotropic squared total variation over a `[C,H,W]` tensor, with gradient.
pub fn tv_loss<T: Scalar>(image: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    let (c, h, w) = image.dims3()?;
    let x = image.data();
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); x.len()];
    let two = T::lit(2.0);
    for ch in 0..c {
        let base = ch * h * w;
        for i in 0..h {
            for j in 0..w {
                let p = base + i * w + j;
                if i + 1 < h {
                    let d = x[p + w] - x[p];
                    loss += d * d;
                    grad[p + w] += two * d;
                    grad[p] -= two * d;
                }
                if j + 1 < w {
                    let d = x[p + 1] - x[p];
                    loss += d * d;
                    grad[p + 1] += two * d;
                    grad[p] -= two * d;
                }
            }
        }
    }
    Ok((loss, Tensor::new(image.shape().to_vec(), grad)?))
}

/// Hyperparameters of one synthesis run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StyleConfig {
    pub content_layers: Vec<usize>,
    pub content_weight: f64,
    pub style_layers: Vec<usize>,
    pub style_weights: Vec<f64>,
    pub tv_weight: f64,
    pub iterations: usize,
    pub lr_initial: f64,
    pub lr_after: f64,
    pub decay_at_iteration: usize,
    pub seed: u64,
}

impl Default for StyleConfig {
    fn default() -> Self {
        Self {
            content_layers: vec![3],
            content_weight: 0.001,
            style_layers: vec![2, 4, 6, 7],
            style_weights: vec![400.0, 50.0, 10.0, 5.0],
            tv_weight: 0.005,
            iterations: 200,
            lr_initial: 3.0,
            lr_after: 0.1,
            decay_at_iteration: 180,
            seed: 0,
        }
    }
}

impl StyleConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.style_layers.len() != self.style_weights.len() {
            return bad(format!(
                "{} style layers but {} style weights",
                self.style_layers.len(),
                self.style_weights.len()
            ));
        }
        if self.content_layers.is_empty() && self.style_layers.is_empty() {
            return bad("no content or style layers configured".into());
        }
        for &l in self.content_layers.iter().chain(&self.style_layers) {
            if !(1..=NUM_BLOCKS).contains(&l) {
                return bad(format!("layer {l} outside 1..={NUM_BLOCKS}"));
            }
        }
        let weights = self
            .style_weights
            .iter()
            .chain([&self.content_weight, &self.tv_weight]);
        if weights.clone().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return bad("loss weights must be finite and non-negative".into());
        }
        if !(self.lr_initial > 0.0 && self.lr_after > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.iterations > 0 && !(1..=self.iterations).contains(&self.decay_at_iteration) {
            return bad(format!(
                "decay iteration {} must lie in 1..={}",
                self.decay_at_iteration, self.iterations
            ));
        }
        Ok(())
    }

    /// Learning rate used for the step taken at `iteration` (0-based).
    pub fn learning_rate(&self, iteration: usize) -> f64 {
        if iteration < self.decay_at_iteration {
            self.lr_initial
        } else {
            self.lr_after
        }
    }

    fn tapped_layers(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self
            .content_layers
            .iter()
            .chain(&self.style_layers)
            .copied()
            .collect();
        set.into_iter().collect()
    }
}

/// Loss terms at one image. `total = content_weight * content + style + tv_weight * tv`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub content_loss: f64,
    pub style_loss: f64,
    pub tv_loss: f64,
    pub total: f64,
    pub lr: f64,
}

/// Precomputed content features and style Gram targets.
#[derive(Debug, Clone)]
pub struct StyleTargets<T> {
    pub content: BTreeMap<usize, Tensor<T>>,
    pub grams: BTreeMap<usize, Tensor<T>>,
}

impl<T: Scalar> StyleTargets<T> {
    pub fn new(
        extractor: &FeatureExtractor<T>,
        content: &ImageBuffer<T>,
        style: &ImageBuffer<T>,
        config: &StyleConfig,
    ) -> Result<Self> {
        let content_maps = if config.content_layers.is_empty() {
            BTreeMap::new()
        } else {
            extractor.extract(content, &config.content_layers)?
        };
        let style_maps = if config.style_layers.is_empty() {
            BTreeMap::new()
        } else {
            extractor.extract(style, &config.style_layers)?
        };
        Ok(Self {
            content: content_maps.into_iter().map(|(l, f)| (l, f.data)).collect(),
            grams: style_maps
                .into_iter()
                .map(|(l, f)| Ok((l, gram(&f.data)?)))
                .collect::<Result<_>>()?,
        })
    }
}

/// Total loss and its pixel gradient at `image`, with the unweighted terms.
pub fn evaluate_losses<T: Scalar>(
    extractor: &FeatureExtractor<T>,
    image: &ImageBuffer<T>,
    targets: &StyleTargets<T>,
    config: &StyleConfig,
) -> Result<(LossRecord, Tensor<T>)> {
    let layers = config.tapped_layers();
    let depth = *layers.last().expect("validated non-empty");
    let trace = extractor.forward(image, depth)?;
    let features: BTreeMap<usize, FeatureMap<T>> = layers
        .iter()
        .map(|&l| Ok((l, trace.feature(l)?)))
        .collect::<Result<_>>()?;

    let cw = T::lit(config.content_weight);
    let mut grads = BTreeMap::new();
    let mut content = T::zero();
    for &l in &config.content_layers {
        let target = targets
            .content
            .get(&l)
            .ok_or_else(|| Error::Validation(format!("no content target for layer {l}")))?;
        let (loss, g) = content_loss(&features[&l].data, target)?;
        content += loss;
        accumulate(&mut grads, l, g.map(|v| v * cw))?;
    }

    let style_weights: Vec<T> = config.style_weights.iter().map(|&w| T::lit(w)).collect();
    let (style, style_grads) =
        style_loss(&features, &targets.grams, &config.style_layers, &style_weights)?;
    for (l, g) in style_grads {
        accumulate(&mut grads, l, g)?;
    }

    let mut pixel_grad = extractor.backward(&trace, &grads)?;
    let (tv, tv_grad) = tv_loss(image.tensor())?;
    let tw = T::lit(config.tv_weight);
    pixel_grad.axpy(tw, &tv_grad)?;

    let total = cw * content + style + tw * tv;
    Ok((
        LossRecord {
            iteration: 0,
            content_loss: content.as_f64(),
            style_loss: style.as_f64(),
            tv_loss: tv.as_f64(),
            total: total.as_f64(),
            lr: 0.0,
        },
        pixel_grad,
    ))
}

/// Image under optimization plus optimizer state and loss history.
#[derive(Debug, Clone)]
pub struct SynthesisState<T> {
    pub image: Tensor<T>,
    pub adam: AdamState<T>,
    pub iteration: usize,
    pub history: Vec<LossRecord>,
}

/// Result of [`synthesize`].
#[derive(Debug, Clone)]
pub struct Synthesis<T> {
    pub image: ImageBuffer<T>,
    /// One record per optimization step, measured before that step.
    pub history: Vec<LossRecord>,
    /// Losses at the returned image.
    pub final_losses: LossRecord,
}

/// Optimizes the pixels of a copy of `content` with Adam, clamping to `[0,1]`
/// after every step. `on_progress` receives each history record as it is made.
pub fn synthesize<T: Scalar>(
    content: &ImageBuffer<T>,
    style: &ImageBuffer<T>,
    extractor: &FeatureExtractor<T>,
    config: &StyleConfig,
    mut on_progress: impl FnMut(&LossRecord),
) -> Result<Synthesis<T>> {
    config.validate()?;
    let targets = StyleTargets::new(extractor, content, style, config)?;
    let shape = content.tensor().shape().to_vec();
    let mut state = SynthesisState {
        image: content.tensor().clone(),
        adam: AdamState::new(&shape),
        iteration: 0,
        history: Vec::with_capacity(config.iterations),
    };
    let check = |rec: &LossRecord, iteration: usize| {
        if [rec.content_loss, rec.style_loss, rec.tv_loss, rec.total]
            .iter()
            .all(|v| v.is_finite())
        {
            Ok(())
        } else {
            Err(Error::Divergence {
                iteration,
                message: format!("non-finite loss {rec:?}"),
            })
        }
    };

    while state.iteration < config.iterations {
        let i = state.iteration;
        let current = ImageBuffer::new(state.image.clone())?;
        let (mut rec, grad) = evaluate_losses(extractor, &current, &targets, config)?;
        rec.iteration = i;
        rec.lr = config.learning_rate(i);
        check(&rec, i)?;
        if !grad.all_finite() {
            return Err(Error::Divergence {
                iteration: i,
                message: "non-finite pixel gradient".into(),
            });
        }
        state.adam.step(&mut state.image, &grad, T::lit(rec.lr))?;
        state.image = state.image.clamp(T::zero(), T::one());
        state.history.push(rec);
        state.iteration += 1;
        on_progress(&rec);
    }

    let image = ImageBuffer::new(state.image)?;
    let (mut final_losses, _) = evaluate_losses(extractor, &image, &targets, config)?;
    final_losses.iteration = config.iterations;
    final_losses.lr = config.learning_rate(config.iterations);
    check(&final_losses, config.iterations)?;
    Ok(Synthesis {
        image,
        history: state.history,
        final_losses,
    })
}

/// CSV with header `iteration,content_loss,style_loss,tv_loss,total,lr`.
pub fn history_csv(history: &[LossRecord]) -> String {
    let mut out = String::from("iteration,content_loss,style_loss,tv_loss,total,lr\n");
    for r in history {
        writeln!(
            out,
            "{},{:e},{:e},{:e},{:e},{}",
            r.iteration, r.content_loss, r.style_loss, r.tv_loss, r.total, r.lr
        )
        .expect("write to string");
    }
    out
}

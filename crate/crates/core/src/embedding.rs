//! Joint text/image embedding: projection heads, the cosine margin loss,
//! training, the persisted retrieval index, ranking and MR / R@K evaluation.

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::AdamState;
use crate::error::{dim_err, Error, Result};
use crate::extractor::Reader;
use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::text::TextEncoder;

pub const EMBEDDING_SIZE: usize = 128;
const UNIT_TOLERANCE: f64 = 1e-6;

/// Affine map, tanh and L2 normalization into the joint space.
///
/// Inputs are first standardized with a fixed per-feature shift and scale
/// (identity for text; fitted on the training images for the visual head).
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead<T> {
    pub input_shift: Tensor<T>,
    pub input_scale: Tensor<T>,
    /// `[out, in]`.
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Intermediate values of one head forward pass.
#[derive(Debug, Clone)]
pub struct HeadTrace<T> {
    pub input: Tensor<T>,
    pub activation: Tensor<T>,
    pub output: Tensor<T>,
}

/// Parameter gradients of a [`ProjectionHead`].
#[derive(Debug, Clone)]
pub struct HeadGrads<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> ProjectionHead<T> {
    /// Xavier-uniform weights, zero bias, identity standardization.
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weight = (0..in_dim * out_dim)
            .map(|_| T::lit(rng.random_range(-limit..limit)))
            .collect();
        Self {
            input_shift: Tensor::zeros(&[in_dim]),
            input_scale: Tensor::full(&[in_dim], T::one()),
            weight: Tensor::new(vec![out_dim, in_dim], weight).expect("head shape"),
            bias: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Sets the input standardization to the per-feature mean and standard
    /// deviation of `inputs` (deviations below `1e-12` are treated as 1).
    pub fn fit_standardization(&mut self, inputs: &[Tensor<T>]) -> Result<()> {
        let d = self.in_dim();
        if inputs.is_empty() {
            return Err(Error::Empty("no inputs to standardize".into()));
        }
        let n = T::from_usize_lossy(inputs.len());
        let mut mean = vec![T::zero(); d];
        for x in inputs {
            x.expect_shape(&[d])?;
            for (m, &v) in mean.iter_mut().zip(x.data()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![T::zero(); d];
        for x in inputs {
            for ((s, &v), &m) in var.iter_mut().zip(x.data()).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let scale = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd.as_f64() > 1e-12 {
                    T::one() / sd
                } else {
                    T::one()
                }
            })
            .collect();
        self.input_shift = Tensor::from_vec(mean);
        self.input_scale = Tensor::from_vec(scale);
        Ok(())
    }

    pub fn forward_trace(&self, x: &Tensor<T>) -> Result<HeadTrace<T>> {
        x.expect_shape(&[self.in_dim()])?;
        let input = x
            .zip_map(&self.input_shift, |v, s| v - s)?
            .zip_map(&self.input_scale, |v, s| v * s)?;
        let z = ops::add(&ops::matvec(&self.weight, &input)?, &self.bias)?;
        let activation = ops::tanh_forward(&z);
        let output = ops::l2_normalize(&activation)?;
        Ok(HeadTrace {
            input,
            activation,
            output,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_trace(x)?.output)
    }

    /// Parameter gradients given `dL/d output`.
    pub fn backward(&self, trace: &HeadTrace<T>, grad_output: &Tensor<T>) -> Result<HeadGrads<T>> {
        let g_act = ops::l2_normalize_backward(grad_output, &trace.activation, &trace.output)?;
        let g_z = ops::tanh_backward(&g_act, &trace.activation)?;
        let (g_w, _) = ops::matvec_backward(&g_z, &self.weight, &trace.input)?;
        Ok(HeadGrads {
            weight: g_w,
            bias: g_z,
        })
    }

    /// Gradient of `sum(grad_output * forward(x))` with respect to the raw input `x`.
    pub fn input_gradient(&self, trace: &HeadTrace<T>, grad_output: &Tensor<T>) -> Result<Tensor<T>> {
        let g_act = ops::l2_normalize_backward(grad_output, &trace.activation, &trace.output)?;
        let g_z = ops::tanh_backward(&g_act, &trace.activation)?;
        let (_, g_in) = ops::matvec_backward(&g_z, &self.weight, &trace.input)?;
        g_in.zip_map(&self.input_scale, |g, s| g * s)
    }

    fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.in_dim() as u32).to_le_bytes());
        out.extend_from_slice(&(self.out_dim() as u32).to_le_bytes());
        for t in [&self.input_shift, &self.input_scale, &self.weight, &self.bias] {
            for v in t.data() {
                out.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
    }

    fn read(r: &mut Reader<'_>) -> std::result::Result<Self, String> {
        let (i, o) = (r.u32()? as usize, r.u32()? as usize);
        if i == 0 || o == 0 {
            return Err("zero head dimension".into());
        }
        let mk = |shape: Vec<usize>, v| Tensor::new(shape, v).map_err(|e| e.to_string());
        Ok(Self {
            input_shift: mk(vec![i], r.f64s(i)?)?,
            input_scale: mk(vec![i], r.f64s(i)?)?,
            weight: mk(vec![o, i], r.f64s(o * i)?)?,
            bias: mk(vec![o], r.f64s(o)?)?,
        })
    }
}

fn check_unit<T: Scalar>(v: &Tensor<T>, what: &str) -> Result<()> {
    let n = v.norm().as_f64();
    if (n - 1.0).abs() > UNIT_TOLERANCE {
        return Err(Error::Validation(format!("{what} has norm {n}, expected 1")));
    }
    Ok(())
}

/// Loss value and gradients with respect to both embeddings.
#[derive(Debug, Clone)]
pub struct MarginLoss<T> {
    pub loss: T,
    pub grad_text: Tensor<T>,
    pub grad_visual: Tensor<T>,
}

/// `1 - cos` for a matching pair, `max(0, cos - m)` otherwise.
pub fn margin_loss<T: Scalar>(
    text: &Tensor<T>,
    visual: &Tensor<T>,
    is_match: bool,
    margin: T,
) -> Result<MarginLoss<T>> {
    check_unit(text, "text embedding")?;
    check_unit(visual, "visual embedding")?;
    let (na, nb) = (text.norm(), visual.norm());
    let cos = text.dot(visual)? / (na * nb);
    // d cos / d a = b / (|a||b|) - cos * a / |a|^2
    let dcos = |a: &Tensor<T>, b: &Tensor<T>, na: T, nb: T| {
        b.zip_map(a, |bi, ai| bi / (na * nb) - cos * ai / (na * na))
    };
    let (loss, sign) = if is_match {
        (T::one() - cos, -T::one())
    } else if cos - margin > T::zero() {
        (cos - margin, T::one())
    } else {
        (T::zero(), T::zero())
    };
    Ok(MarginLoss {
        loss,
        grad_text: dcos(text, visual, na, nb)?.map(|g| g * sign),
        grad_visual: dcos(visual, text, nb, na)?.map(|g| g * sign),
    })
}

/// Loss, text gradients and visual gradients of one batch.
pub type BatchLoss<T> = (T, Vec<Tensor<T>>, Vec<Tensor<T>>);

/// Batch objective over projected embeddings: the mean of the `B` matching
/// terms plus the mean of all `B(B-1)` mismatched terms. Returns the loss and
/// its gradients with respect to every text and visual embedding.
pub fn batch_loss_projected<T: Scalar>(
    text: &[Tensor<T>],
    visual: &[Tensor<T>],
    margin: T,
) -> Result<BatchLoss<T>> {
    let b = text.len();
    if b < 2 {
        return Err(Error::Validation(format!("batch needs at least 2 pairs, got {b}")));
    }
    if visual.len() != b {
        return Err(dim_err!("{b} text embeddings but {} visual", visual.len()));
    }
    let pos_w = T::one() / T::from_usize_lossy(b);
    let neg_w = T::one() / T::from_usize_lossy(b * (b - 1));
    let mut gt: Vec<Tensor<T>> = text.iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut gv: Vec<Tensor<T>> = visual.iter().map(|v| Tensor::zeros(v.shape())).collect();
    let mut pos = T::zero();
    let mut neg = T::zero();
    for k in 0..b {
        for j in 0..b {
            let w = if k == j { pos_w } else { neg_w };
            let term = margin_loss(&text[k], &visual[j], k == j, margin)?;
            if k == j {
                pos += term.loss;
            } else {
                neg += term.loss;
            }
            gt[k].axpy(w, &term.grad_text)?;
            gv[j].axpy(w, &term.grad_visual)?;
        }
    }
    Ok((pos * pos_w + neg * neg_w, gt, gv))
}

/// Both projection heads.
#[derive(Debug, Clone, PartialEq)]
pub struct JointHeads<T> {
    pub text: ProjectionHead<T>,
    pub visual: ProjectionHead<T>,
}

const HEADS_MAGIC: &[u8; 4] = b"TXHD";
const HEADS_VERSION: u32 = 1;

impl<T: Scalar> JointHeads<T> {
    pub fn init(text_dim: usize, visual_dim: usize, embedding_size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let text = ProjectionHead::init(text_dim, embedding_size, &mut rng);
        let visual = ProjectionHead::init(visual_dim, embedding_size, &mut rng);
        Self { text, visual }
    }

    /// Binary layout: `TXHD`, u32 version, then text and visual heads, each
    /// as u32 in, u32 out, shift, scale, weight, bias (f64 little-endian).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(HEADS_MAGIC);
        out.extend_from_slice(&HEADS_VERSION.to_le_bytes());
        self.text.write(&mut out);
        self.visual.write(&mut out);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != HEADS_MAGIC {
            return Err("bad magic, expected TXHD".into());
        }
        let v = r.u32()?;
        if v != HEADS_VERSION {
            return Err(format!("unsupported heads version {v}"));
        }
        let text = ProjectionHead::read(&mut r)?;
        let visual = ProjectionHead::read(&mut r)?;
        if !r.is_done() {
            return Err("trailing bytes".into());
        }
        if text.out_dim() != visual.out_dim() {
            return Err("text and visual heads disagree on embedding size".into());
        }
        Ok(Self { text, visual })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|m| Error::format(path, m))
    }

    /// Full batch objective from unprojected inputs.
    pub fn batch_loss(&self, texts: &[Tensor<T>], visuals: &[Tensor<T>], margin: T) -> Result<T> {
        let pt = texts.iter().map(|x| self.text.forward(x)).collect::<Result<Vec<_>>>()?;
        let pv = visuals.iter().map(|x| self.visual.forward(x)).collect::<Result<Vec<_>>>()?;
        Ok(batch_loss_projected(&pt, &pv, margin)?.0)
    }
}

/// Retrieval training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub embedding_size: usize,
    pub margin: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 0.001,
            batch_size: 28,
            embedding_size: EMBEDDING_SIZE,
            margin: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0 && self.margin < 1.0) {
            return Err(Error::Validation(format!("margin {} not in (0,1)", self.margin)));
        }
        if self.batch_size < 2 {
            return Err(Error::Validation("batch size must be at least 2".into()));
        }
        if !(self.learning_rate > 0.0) || self.embedding_size == 0 {
            return Err(Error::Validation(
                "learning rate and embedding size must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Trained heads and the mean batch loss of every epoch.
#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub heads: JointHeads<T>,
    pub loss_curve: Vec<f64>,
}

struct HeadOptimizer<T> {
    weight: AdamState<T>,
    bias: AdamState<T>,
}

impl<T: Scalar> HeadOptimizer<T> {
    fn new(head: &ProjectionHead<T>) -> Self {
        Self {
            weight: AdamState::new(head.weight.shape()),
            bias: AdamState::new(head.bias.shape()),
        }
    }

    fn step(&mut self, head: &mut ProjectionHead<T>, grads: &HeadGrads<T>, lr: T) -> Result<()> {
        self.weight.step(&mut head.weight, &grads.weight, lr)?;
        self.bias.step(&mut head.bias, &grads.bias, lr)
    }
}

/// Splits a shuffled order into batches; a trailing singleton joins the
/// previous batch so every batch has in-batch negatives.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let mut end = (start + size).min(order.len());
        if order.len() - end == 1 {
            end = order.len();
        }
        out.push(&order[start..end]);
        start = end;
    }
    out
}

/// Trains both heads on aligned `(text, visual)` inputs with one Adam per
/// head parameter. Batch order is a seeded shuffle per epoch.
pub fn train<T: Scalar>(
    texts: &[Tensor<T>],
    visuals: &[Tensor<T>],
    config: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    let n = texts.len();
    if n < 2 {
        return Err(Error::Empty(format!("need at least 2 training pairs, got {n}")));
    }
    if visuals.len() != n {
        return Err(dim_err!("{n} texts but {} images", visuals.len()));
    }
    let mut heads = JointHeads::init(
        texts[0].len(),
        visuals[0].len(),
        config.embedding_size,
        config.seed,
    );
    heads.visual.fit_standardization(visuals)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_ba7c);
    let mut opt_text = HeadOptimizer::new(&heads.text);
    let mut opt_visual = HeadOptimizer::new(&heads.visual);
    let lr = T::lit(config.learning_rate);
    let margin = T::lit(config.margin);
    let mut order: Vec<usize> = (0..n).collect();
    let mut loss_curve = Vec::with_capacity(config.epochs);

    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let groups = batches(&order, config.batch_size);
        for batch in &groups {
            let tt = batch
                .iter()
                .map(|&i| heads.text.forward_trace(&texts[i]))
                .collect::<Result<Vec<_>>>()?;
            let vt = batch
                .iter()
                .map(|&i| heads.visual.forward_trace(&visuals[i]))
                .collect::<Result<Vec<_>>>()?;
            let pt: Vec<_> = tt.iter().map(|t| t.output.clone()).collect();
            let pv: Vec<_> = vt.iter().map(|t| t.output.clone()).collect();
            let (loss, gt, gv) = batch_loss_projected(&pt, &pv, margin)?;
            epoch_loss += loss.as_f64();

            let text_grads = sum_grads(&heads.text, &tt, &gt)?;
            let visual_grads = sum_grads(&heads.visual, &vt, &gv)?;
            opt_text.step(&mut heads.text, &text_grads, lr)?;
            opt_visual.step(&mut heads.visual, &visual_grads, lr)?;
        }
        loss_curve.push(epoch_loss / groups.len() as f64);
    }
    Ok(TrainOutcome { heads, loss_curve })
}

fn sum_grads<T: Scalar>(
    head: &ProjectionHead<T>,
    traces: &[HeadTrace<T>],
    grads: &[Tensor<T>],
) -> Result<HeadGrads<T>> {
    let mut acc = HeadGrads {
        weight: Tensor::zeros(head.weight.shape()),
        bias: Tensor::zeros(head.bias.shape()),
    };
    for (trace, g) in traces.iter().zip(grads) {
        let hg = head.backward(trace, g)?;
        acc.weight.add_assign(&hg.weight)?;
        acc.bias.add_assign(&hg.bias)?;
    }
    Ok(acc)
}

/// Projected visual embeddings of an image collection.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex<T> {
    ids: Vec<String>,
    /// `[count, dim]`, unit-norm rows.
    embeddings: Vec<Tensor<T>>,
    dim: usize,
    pub vocabulary_fingerprint: [u8; 32],
    pub extractor_seed: u64,
}

const INDEX_MAGIC: &[u8; 4] = b"TXIM";
const INDEX_VERSION: u32 = 1;

impl<T: Scalar> EmbeddingIndex<T> {
    pub fn new(
        ids: Vec<String>,
        embeddings: Vec<Tensor<T>>,
        vocabulary_fingerprint: [u8; 32],
        extractor_seed: u64,
    ) -> Result<Self> {
        if ids.len() != embeddings.len() {
            return Err(dim_err!("{} ids but {} embeddings", ids.len(), embeddings.len()));
        }
        let dim = embeddings.first().map_or(EMBEDDING_SIZE, |e| e.len());
        for (id, e) in ids.iter().zip(&embeddings) {
            e.expect_shape(&[dim])?;
            check_unit(e, &format!("embedding of {id:?}"))?;
        }
        Ok(Self {
            ids,
            embeddings,
            dim,
            vocabulary_fingerprint,
            extractor_seed,
        })
    }

    /// Projects raw visual encodings through the visual head.
    pub fn build(
        ids: Vec<String>,
        visual_inputs: &[Tensor<T>],
        heads: &JointHeads<T>,
        vocabulary_fingerprint: [u8; 32],
        extractor_seed: u64,
    ) -> Result<Self> {
        let rows = visual_inputs
            .iter()
            .map(|x| heads.visual.forward(x))
            .collect::<Result<Vec<_>>>()?;
        Self::new(ids, rows, vocabulary_fingerprint, extractor_seed)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn embeddings(&self) -> &[Tensor<T>] {
        &self.embeddings
    }

    /// Keeps only the rows whose id satisfies `keep`.
    pub fn filtered(&self, keep: impl Fn(&str) -> bool) -> Self {
        let (ids, embeddings) = self
            .ids
            .iter()
            .zip(&self.embeddings)
            .filter(|(id, _)| keep(id))
            .map(|(id, e)| (id.clone(), e.clone()))
            .unzip();
        Self {
            ids,
            embeddings,
            dim: self.dim,
            vocabulary_fingerprint: self.vocabulary_fingerprint,
            extractor_seed: self.extractor_seed,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for id in &self.ids {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
        }
        for e in &self.embeddings {
            for v in e.data() {
                out.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
        out.extend_from_slice(&self.vocabulary_fingerprint);
        out.extend_from_slice(&self.extractor_seed.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != INDEX_MAGIC {
            return Err("bad magic, expected TXIM".into());
        }
        let v = r.u32()?;
        if v != INDEX_VERSION {
            return Err(format!("unsupported index version {v}"));
        }
        let count = r.u32()? as usize;
        let dim = r.u32()? as usize;
        if dim == 0 {
            return Err("zero embedding dimension".into());
        }
        let mut ids = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let raw = r.take(len)?;
            ids.push(String::from_utf8(raw.to_vec()).map_err(|e| e.to_string())?);
        }
        let mut embeddings = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            embeddings.push(Tensor::from_vec(r.f64s(dim)?));
        }
        let fingerprint: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let seed = r.u64()?;
        if !r.is_done() {
            return Err("trailing bytes".into());
        }
        let mut index = Self::new(ids, embeddings, fingerprint, seed).map_err(|e| e.to_string())?;
        index.dim = dim;
        Ok(index)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|m| Error::format(path, m))
    }
}

/// One ranked result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedImage {
    pub id: String,
    pub score: f64,
}

/// Orders `(id, score)` pairs by descending score, ties by ascending id.
pub fn order_by_score(scored: &mut [RankedImage]) {
    scored.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.id.cmp(&b.id))
    });
}

/// Text encoder, trained heads and an index, checked for compatibility.
#[derive(Debug, Clone)]
pub struct Retriever<T> {
    pub encoder: TextEncoder,
    pub heads: JointHeads<T>,
    pub index: EmbeddingIndex<T>,
}

impl<T: Scalar> Retriever<T> {
    pub fn new(encoder: TextEncoder, heads: JointHeads<T>, index: EmbeddingIndex<T>) -> Result<Self> {
        if encoder.fingerprint() != index.vocabulary_fingerprint {
            return Err(Error::StaleIndex(
                "index was built with a different vocabulary".into(),
            ));
        }
        if heads.text.in_dim() != encoder.dimension() {
            return Err(Error::StaleIndex(format!(
                "text head expects {} inputs, vocabulary has {}",
                heads.text.in_dim(),
                encoder.dimension()
            )));
        }
        if heads.text.out_dim() != index.dim() {
            return Err(Error::StaleIndex(format!(
                "heads embed into {} dimensions, index holds {}",
                heads.text.out_dim(),
                index.dim()
            )));
        }
        Ok(Self {
            encoder,
            heads,
            index,
        })
    }

    /// Projected query embedding.
    pub fn embed_query(&self, title: &str, comment: &str) -> Result<Tensor<T>> {
        self.heads.text.forward(&self.encoder.encode(title, comment))
    }

    /// Top-`k` images by cosine similarity (all when `k` exceeds the index).
    pub fn rank(&self, title: &str, comment: &str, k: usize) -> Result<Vec<RankedImage>> {
        if self.index.is_empty() {
            return Err(Error::Empty("the index holds no images".into()));
        }
        let q = self.embed_query(title, comment)?;
        let mut scored = self
            .index
            .ids()
            .iter()
            .zip(self.index.embeddings())
            .map(|(id, e)| {
                Ok(RankedImage {
                    id: id.clone(),
                    score: q.dot(e)?.as_f64(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        order_by_score(&mut scored);
        scored.truncate(k);
        Ok(scored)
    }

    /// 1-based rank of `true_id` for each `(title, comment, true_id)` query.
    pub fn true_ranks<'a>(
        &self,
        queries: impl IntoIterator<Item = (&'a str, &'a str, &'a str)>,
    ) -> Result<Vec<usize>> {
        queries
            .into_iter()
            .map(|(title, comment, id)| {
                let ranked = self.rank(title, comment, usize::MAX)?;
                ranked
                    .iter()
                    .position(|r| r.id == id)
                    .map(|p| p + 1)
                    .ok_or_else(|| Error::Validation(format!("true image {id:?} not in index")))
            })
            .collect()
    }
}

/// Median rank and recall at 1, 5 and 10.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub median_rank: usize,
    pub recall_at_1: f64,
    pub recall_at_5: f64,
    pub recall_at_10: f64,
    pub queries: usize,
}

/// Lower median of the 1-based ranks and the fraction with rank `<= k`.
pub fn retrieval_metrics(ranks: &[usize]) -> Result<RetrievalMetrics> {
    if ranks.is_empty() {
        return Err(Error::Empty("no ranks to summarize".into()));
    }
    if ranks.contains(&0) {
        return Err(Error::Validation("ranks are 1-based".into()));
    }
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    let recall = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64;
    Ok(RetrievalMetrics {
        median_rank: sorted[(sorted.len() - 1) / 2],
        recall_at_1: recall(1),
        recall_at_5: recall(5),
        recall_at_10: recall(10),
        queries: ranks.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: &[f64]) -> Tensor<f64> {
        ops::l2_normalize(&Tensor::from_f64(&[v.len()], v).unwrap()).unwrap()
    }

    #[test]
    fn margin_loss_fixtures() {
        let a = unit(&[1.0, 0.0]);
        assert_eq!(margin_loss(&a, &a, true, 0.1).unwrap().loss, 0.0);
        let b = unit(&[0.0, 1.0]);
        assert_eq!(margin_loss(&a, &b, false, 0.1).unwrap().loss, 0.0);
        let c = unit(&[0.5, 0.75f64.sqrt()]);
        let l = margin_loss(&a, &c, false, 0.1).unwrap().loss;
        assert!((l - 0.4).abs() < 1e-15, "{l}");
        assert!(margin_loss(&Tensor::from_f64(&[2], &[2.0, 0.0]).unwrap(), &a, true, 0.1).is_err());
    }

    #[test]
    fn batch_loss_degenerate_and_separated() {
        let p = unit(&[1.0, 0.0]);
        let (l, _, _) = batch_loss_projected(&[p.clone(), p.clone()], &[p.clone(), p.clone()], 0.1).unwrap();
        assert!((l - 0.9).abs() < 1e-15);
        let q = unit(&[0.0, 1.0]);
        let (l, _, _) = batch_loss_projected(&[p.clone(), q.clone()], &[p.clone(), q], 0.1).unwrap();
        assert_eq!(l, 0.0);
        let one = [p];
        assert!(batch_loss_projected(&one, &one, 0.1).is_err());
    }

    #[test]
    fn metrics_fixtures() {
        let m = retrieval_metrics(&[1, 9, 20]).unwrap();
        assert_eq!(m.median_rank, 9);
        let m = retrieval_metrics(&[1, 9, 3, 20]).unwrap();
        assert_eq!(m.median_rank, 3);
        assert_eq!((m.recall_at_1, m.recall_at_5, m.recall_at_10), (0.25, 0.5, 0.75));
        let m = retrieval_metrics(&[1]).unwrap();
        assert_eq!((m.median_rank, m.recall_at_1, m.recall_at_10), (1, 1.0, 1.0));
        assert!(retrieval_metrics(&[]).is_err());
    }

    #[test]
    fn batching_merges_trailing_singleton() {
        let order: Vec<usize> = (0..57).collect();
        let sizes: Vec<usize> = batches(&order, 28).iter().map(|b| b.len()).collect();
        assert_eq!(sizes, [28, 29]);
        let order: Vec<usize> = (0..52).collect();
        let sizes: Vec<usize> = batches(&order, 28).iter().map(|b| b.len()).collect();
        assert_eq!(sizes, [28, 24]);
    }

    #[test]
    fn train_config_defaults_and_validation() {
        let c = TrainConfig::default();
        assert_eq!((c.epochs, c.batch_size, c.embedding_size), (30, 28, 128));
        assert_eq!((c.learning_rate, c.margin), (0.001, 0.1));
        assert!(TrainConfig { margin: 1.0, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { batch_size: 1, ..c }.validate().is_err());
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let texts = vec![unit(&[1.0, 0.0, 0.0]), unit(&[0.0, 1.0, 0.0])];
        let visuals = vec![Tensor::from_f64(&[2], &[0.3, 0.1]).unwrap(), Tensor::from_f64(&[2], &[0.1, 0.4]).unwrap()];
        let config = TrainConfig { epochs: 0, seed: 5, ..TrainConfig::default() };
        let out = train(&texts, &visuals, &config).unwrap();
        assert!(out.loss_curve.is_empty());
        let mut init = JointHeads::<f64>::init(3, 2, 128, 5);
        init.visual.fit_standardization(&visuals).unwrap();
        assert_eq!(out.heads, init);
    }

    #[test]
    fn heads_and_index_round_trip() {
        let heads = JointHeads::<f64>::init(5, 4, 8, 1);
        let back = JointHeads::from_bytes(&heads.to_bytes()).unwrap();
        assert_eq!(back, heads);
        let inputs: Vec<_> = (0..3).map(|i| Tensor::from_f64(&[4], &[i as f64, 1.0, -0.5, 0.25]).unwrap()).collect();
        let idx = EmbeddingIndex::build(vec!["a".into(), "b".into(), "ç".into()], &inputs, &heads, [7; 32], 99).unwrap();
        let bytes = idx.to_bytes();
        let back = EmbeddingIndex::<f64>::from_bytes(&bytes).unwrap();
        assert_eq!(back, idx);
        assert_eq!(back.to_bytes(), bytes);
        assert!(EmbeddingIndex::<f64>::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }
}

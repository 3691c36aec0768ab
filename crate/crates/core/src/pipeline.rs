//! End-to-end workflows shared by the command-line tool and the HTTP service.

use std::path::{Path, PathBuf};

use crate::corpus::{load_image, split_corpus, Corpus, CorpusSample, Split, DEFAULT_FRACTIONS};
use crate::embedding::{self, retrieval_metrics, RetrievalMetrics, TrainConfig};
use crate::error::{Error, Result};
use crate::style::{synthesize, LossRecord, StyleConfig};
use crate::text::TextEncoder;
use crate::{EmbeddingIndex, FeatureExtractor, ImageBuffer, JointHeads, Retriever, Synthesis, Tensor};

/// Default longest image side after loading.
pub const DEFAULT_MAX_SIDE: usize = 128;

/// Settings shared by every workflow.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub seed: u64,
    pub max_side: usize,
    pub min_count: usize,
    pub weights: Option<PathBuf>,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            seed: 0,
            max_side: DEFAULT_MAX_SIDE,
            min_count: crate::text::DEFAULT_MIN_COUNT,
            weights: None,
        }
    }
}

impl Settings {
    /// Extractor from the weights file if one is configured, else seeded.
    pub fn extractor(&self) -> Result<FeatureExtractor> {
        match &self.weights {
            Some(path) => FeatureExtractor::load(path),
            None => Ok(FeatureExtractor::seeded(self.seed)),
        }
    }
}

pub fn split(corpus: &Corpus, seed: u64) -> Result<Split<CorpusSample>> {
    split_corpus(&corpus.samples, seed, DEFAULT_FRACTIONS)
}

pub fn build_encoder(samples: &[CorpusSample], min_count: usize) -> Result<TextEncoder> {
    let titles: Vec<&str> = samples.iter().map(|s| s.title.as_str()).collect();
    let comments: Vec<&str> = samples.iter().map(|s| s.comment.as_str()).collect();
    TextEncoder::build(&titles, &comments, min_count)
}

pub fn encode_texts(encoder: &TextEncoder, samples: &[CorpusSample]) -> Vec<Tensor> {
    samples
        .iter()
        .map(|s| encoder.encode(&s.title, &s.comment))
        .collect()
}

pub fn load_sample_image(corpus: &Corpus, sample: &CorpusSample, max_side: usize) -> Result<ImageBuffer> {
    load_image(corpus.image_path(sample), max_side)
}

pub fn embed_images(
    corpus: &Corpus,
    samples: &[CorpusSample],
    extractor: &FeatureExtractor,
    max_side: usize,
) -> Result<Vec<Tensor>> {
    samples
        .iter()
        .map(|s| extractor.embed(&load_sample_image(corpus, s, max_side)?))
        .collect()
}

/// Vocabulary and heads trained on the training split.
#[derive(Debug, Clone)]
pub struct TrainedRetrieval {
    pub encoder: TextEncoder,
    pub heads: JointHeads,
    pub loss_curve: Vec<f64>,
    pub split: Split<CorpusSample>,
}

pub fn train_retrieval(
    corpus: &Corpus,
    settings: &Settings,
    config: &TrainConfig,
    extractor: &FeatureExtractor,
) -> Result<TrainedRetrieval> {
    let split = split(corpus, settings.seed)?;
    let encoder = build_encoder(&split.train, settings.min_count)?;
    let texts = encode_texts(&encoder, &split.train);
    let visuals = embed_images(corpus, &split.train, extractor, settings.max_side)?;
    let outcome = embedding::train(&texts, &visuals, config)?;
    Ok(TrainedRetrieval {
        encoder,
        heads: outcome.heads,
        loss_curve: outcome.loss_curve,
        split,
    })
}

/// Indexes every image of `samples`.
pub fn build_index(
    corpus: &Corpus,
    samples: &[CorpusSample],
    encoder: &TextEncoder,
    heads: &JointHeads,
    extractor: &FeatureExtractor,
    settings: &Settings,
) -> Result<EmbeddingIndex> {
    let visuals = embed_images(corpus, samples, extractor, settings.max_side)?;
    let ids = samples.iter().map(|s| s.id.clone()).collect();
    EmbeddingIndex::build(ids, &visuals, heads, encoder.fingerprint(), settings.seed)
}

/// MR and R@K of `queries` against the index rows whose ids belong to `queries`.
pub fn evaluate(retriever: &Retriever, queries: &[CorpusSample]) -> Result<RetrievalMetrics> {
    if queries.is_empty() {
        return Err(Error::Empty("no evaluation queries".into()));
    }
    let wanted: std::collections::HashSet<&str> = queries.iter().map(|s| s.id.as_str()).collect();
    for id in &wanted {
        if !retriever.index.ids().iter().any(|i| i == id) {
            return Err(Error::Validation(format!("true image {id:?} not in index")));
        }
    }
    let restricted = Retriever {
        encoder: retriever.encoder.clone(),
        heads: retriever.heads.clone(),
        index: retriever.index.filtered(|id| wanted.contains(id)),
    };
    let ranks = restricted.true_ranks(
        queries
            .iter()
            .map(|s| (s.title.as_str(), s.comment.as_str(), s.id.as_str())),
    )?;
    retrieval_metrics(&ranks)
}

/// Output of [`run_pipeline`].
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub style_id: String,
    pub style_score: f64,
    pub synthesis: Synthesis,
}

/// Retrieves the best style image for the text (or uses `style_id` when given)
/// and stylizes `content` with it.
#[allow(clippy::too_many_arguments)]
pub fn run_pipeline(
    content: &ImageBuffer,
    title: &str,
    description: &str,
    style_id: Option<&str>,
    retriever: &Retriever,
    corpus: &Corpus,
    extractor: &FeatureExtractor,
    style_config: &StyleConfig,
    max_side: usize,
    on_progress: impl FnMut(&LossRecord),
) -> Result<PipelineOutput> {
    let (id, score) = match style_id {
        Some(id) => {
            let score = retriever
                .rank(title, description, usize::MAX)?
                .into_iter()
                .find(|r| r.id == id)
                .map_or(f64::NAN, |r| r.score);
            (id.to_string(), score)
        }
        None => {
            let top = retriever
                .rank(title, description, 1)?
                .into_iter()
                .next()
                .ok_or_else(|| Error::Empty("the index holds no images".into()))?;
            (top.id, top.score)
        }
    };
    let sample = corpus
        .get(&id)
        .ok_or_else(|| Error::Validation(format!("style image {id:?} is not in the corpus")))?;
    let style = load_sample_image(corpus, sample, max_side)?;
    let synthesis = synthesize(content, &style, extractor, style_config, on_progress)?;
    Ok(PipelineOutput {
        style_id: id,
        style_score: score,
        synthesis,
    })
}

/// Default file names of the retrieval artifacts inside a data directory.
#[derive(Debug, Clone, PartialEq)]
pub struct ArtifactPaths {
    pub vocab: PathBuf,
    pub heads: PathBuf,
    pub index: PathBuf,
}

impl ArtifactPaths {
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let dir = dir.as_ref();
        Self {
            vocab: dir.join("vocab.json"),
            heads: dir.join("heads.bin"),
            index: dir.join("index.bin"),
        }
    }

    pub fn load_retriever(&self) -> Result<Retriever> {
        let encoder = TextEncoder::load(&self.vocab)?;
        let heads = JointHeads::load(&self.heads)?;
        let index = EmbeddingIndex::load(&self.index)?;
        Retriever::new(encoder, heads, index)
    }
}

/// Loaded artifacts plus the corpus they index, ready to serve queries.
#[derive(Debug, Clone)]
pub struct Model {
    pub retriever: Retriever,
    pub corpus: Corpus,
    pub extractor: FeatureExtractor,
    pub max_side: usize,
}

impl Model {
    /// Uses the extractor weights file when given, otherwise the extractor
    /// seed recorded in the index.
    pub fn load(
        paths: &ArtifactPaths,
        manifest: impl AsRef<Path>,
        weights: Option<&Path>,
        max_side: usize,
    ) -> Result<Self> {
        let retriever = paths.load_retriever()?;
        let corpus = Corpus::load(manifest)?;
        let extractor = match weights {
            Some(path) => FeatureExtractor::load(path)?,
            None => FeatureExtractor::seeded(retriever.index.extractor_seed),
        };
        Ok(Self {
            retriever,
            corpus,
            extractor,
            max_side,
        })
    }

    pub fn pipeline(
        &self,
        content: &ImageBuffer,
        title: &str,
        description: &str,
        style_id: Option<&str>,
        config: &StyleConfig,
        on_progress: impl FnMut(&LossRecord),
    ) -> Result<PipelineOutput> {
        run_pipeline(
            content,
            title,
            description,
            style_id,
            &self.retriever,
            &self.corpus,
            &self.extractor,
            config,
            self.max_side,
            on_progress,
        )
    }
}

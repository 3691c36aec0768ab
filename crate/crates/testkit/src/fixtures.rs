//! Synthetic corpora, trained retrievers and image pairs used by several suites.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use textstyle::pipeline::{self, Model, Settings, TrainedRetrieval};
use textstyle::synthetic::{gradient_image, render, write_corpus, Attributes};
use textstyle::{Corpus, FeatureExtractor, ImageBuffer, Result, Retriever, TrainConfig};

/// Samples in the shared retrieval corpus.
pub const CORPUS_SIZE: usize = 64;
/// Seed of the shared retrieval corpus.
pub const CORPUS_SEED: u64 = 7;

/// A synthetic corpus on disk with retrieval trained on it and every image indexed.
pub struct RetrievalFixture {
    pub dir: tempfile::TempDir,
    pub corpus: Corpus,
    pub settings: Settings,
    pub extractor: FeatureExtractor,
    pub trained: TrainedRetrieval,
    pub retriever: Retriever,
}

impl RetrievalFixture {
    /// Default training settings on a corpus of `image_size` pixel images.
    pub fn build(image_size: usize) -> Result<Self> {
        let dir = tempfile::tempdir().map_err(|source| textstyle::Error::Io { path: "tempdir".into(), source })?;
        write_corpus(dir.path(), CORPUS_SIZE, image_size, CORPUS_SEED)?;
        let corpus = Corpus::load(dir.path().join("manifest.jsonl"))?;
        let settings = Settings { max_side: image_size, ..Settings::default() };
        let extractor = settings.extractor()?;
        let trained = pipeline::train_retrieval(&corpus, &settings, &TrainConfig::default(), &extractor)?;
        let index = pipeline::build_index(
            &corpus,
            &corpus.samples,
            &trained.encoder,
            &trained.heads,
            &extractor,
            &settings,
        )?;
        let retriever = Retriever::new(trained.encoder.clone(), trained.heads.clone(), index)?;
        Ok(Self { dir, corpus, settings, extractor, trained, retriever })
    }

    pub fn model(&self) -> Model {
        Model {
            retriever: self.retriever.clone(),
            corpus: self.corpus.clone(),
            extractor: self.extractor.clone(),
            max_side: self.settings.max_side,
        }
    }
}

/// A smooth two-color content image and a rendered style image, both 32x32.
pub fn style_pair() -> (ImageBuffer, ImageBuffer) {
    let content = gradient_image(32, 32, [0.9, 0.2, 0.1], [0.1, 0.3, 0.8]);
    let style = render(Attributes::nth(42), 32, &mut ChaCha8Rng::seed_from_u64(7));
    (content, style)
}

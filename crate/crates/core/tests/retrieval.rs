use std::sync::OnceLock;

use textstyle::pipeline;
use textstyle::{EmbeddingIndex, Error, JointHeads, Retriever, TrainConfig};
use textstyle_testkit::fixtures::RetrievalFixture;

fn fixture() -> &'static RetrievalFixture {
    static FIXTURE: OnceLock<RetrievalFixture> = OnceLock::new();
    FIXTURE.get_or_init(|| RetrievalFixture::build(64).unwrap())
}

#[test]
fn held_out_queries_find_their_images() {
    let f = fixture();
    let m = pipeline::evaluate(&f.retriever, &f.trained.split.test).unwrap();
    assert_eq!(m.queries, 6);
    assert!(m.median_rank <= 2, "{m:?}");
    assert!(m.recall_at_1 >= 0.8, "{m:?}");
}

#[test]
fn training_split_is_nearly_perfect() {
    let f = fixture();
    let m = pipeline::evaluate(&f.retriever, &f.trained.split.train).unwrap();
    assert_eq!(m.median_rank, 1, "{m:?}");
    assert!(m.recall_at_10 >= 0.9, "{m:?}");
}

#[test]
fn loss_curve_decreases() {
    let curve = &fixture().trained.loss_curve;
    assert_eq!(curve.len(), TrainConfig::default().epochs);
    assert!(curve.iter().all(|l| l.is_finite()));
    assert!(curve.last().unwrap() < &(0.5 * curve[0]), "{curve:?}");
}

#[test]
fn training_is_deterministic() {
    let f = fixture();
    let again =
        pipeline::train_retrieval(&f.corpus, &f.settings, &TrainConfig::default(), &f.extractor).unwrap();
    assert_eq!(again.heads.to_bytes(), f.trained.heads.to_bytes());
    assert_eq!(again.loss_curve, f.trained.loss_curve);
}

#[test]
fn whole_corpus_ranking() {
    let f = fixture();
    let m = pipeline::evaluate(&f.retriever, &f.corpus.samples).unwrap();
    assert_eq!(m.median_rank, 1, "{m:?}");
    assert!(m.recall_at_5 >= 0.95, "{m:?}");
    let top = f.retriever.rank(&f.corpus.samples[0].title, &f.corpus.samples[0].comment, 3).unwrap();
    assert_eq!(top.len(), 3);
    assert!(top[0].score >= top[1].score && top[1].score >= top[2].score);
}

#[test]
fn artifacts_round_trip() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    f.retriever.index.save(dir.path().join("index.bin")).unwrap();
    f.trained.heads.save(dir.path().join("heads.bin")).unwrap();
    f.trained.encoder.save(dir.path().join("vocab.json")).unwrap();
    let index = EmbeddingIndex::load(dir.path().join("index.bin")).unwrap();
    let heads = JointHeads::load(dir.path().join("heads.bin")).unwrap();
    let encoder = textstyle::TextEncoder::load(dir.path().join("vocab.json")).unwrap();
    assert_eq!(index.to_bytes(), f.retriever.index.to_bytes());
    let reloaded = Retriever::new(encoder, heads, index).unwrap();
    let q = &f.corpus.samples[5];
    assert_eq!(
        reloaded.rank(&q.title, &q.comment, 10).unwrap(),
        f.retriever.rank(&q.title, &q.comment, 10).unwrap()
    );
}

#[test]
fn index_from_another_vocabulary_is_stale() {
    let f = fixture();
    let other = pipeline::build_encoder(&f.corpus.samples[..20], 1).unwrap();
    let err = Retriever::new(other, f.trained.heads.clone(), f.retriever.index.clone()).unwrap_err();
    assert!(matches!(err, Error::StaleIndex(_)), "{err:?}");
    assert_eq!(err.exit_code(), 3);
}

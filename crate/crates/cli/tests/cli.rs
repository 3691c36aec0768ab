use std::path::Path;
use std::process::{Command, Output};

use textstyle::corpus::decode_image;
use textstyle::synthetic::{gradient_image, write_corpus};
use textstyle::{EmbeddingIndex, TextEncoder};

fn textstyle(data: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_textstyle"))
        .arg("--data-dir")
        .arg(data)
        .args(["--max-side", "32"])
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    assert!(out.status.success(), "exit {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

/// A corpus of `count` samples with its index built in the same directory.
fn indexed(count: usize) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path(), count, 32, 3).unwrap();
    stdout(&textstyle(dir.path(), &["build-index"]));
    dir
}

#[test]
fn build_index_reports_every_image() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path(), 12, 32, 3).unwrap();
    let out = stdout(&textstyle(dir.path(), &["build-index"]));
    assert!(out.contains("samples: 12"), "{out}");
    assert!(out.contains("index: 12 images, 128 dimensions"), "{out}");
    let index = EmbeddingIndex::load(dir.path().join("index.bin")).unwrap();
    assert_eq!(index.len(), 12);

    let out = stdout(&textstyle(dir.path(), &["retrieve", "--title", "x", "--description", "y", "-k", "20"]));
    assert_eq!(out.lines().count(), 12, "{out}");
}

#[test]
fn missing_manifest_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = textstyle(dir.path(), &["build-index"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("manifest.jsonl"), "{err}");
}

#[test]
fn rebuilding_is_byte_identical() {
    let dir = indexed(12);
    let read = |name: &str| std::fs::read(dir.path().join(name)).unwrap();
    let (vocab, heads, index) = (read("vocab.json"), read("heads.bin"), read("index.bin"));
    stdout(&textstyle(dir.path(), &["build-index"]));
    assert_eq!(read("vocab.json"), vocab);
    assert_eq!(read("heads.bin"), heads);
    assert_eq!(read("index.bin"), index);

    let again = stdout(&textstyle(dir.path(), &["build-index", "--heads", dir.path().join("heads.bin").to_str().unwrap()]));
    assert!(again.contains("index: 12 images"), "{again}");
    assert_eq!(read("index.bin"), index);
}

#[test]
fn single_query_test_split() {
    let dir = indexed(10);
    let out = stdout(&textstyle(dir.path(), &["eval-retrieval"]));
    assert_eq!(out, "queries 1\nMR 1\nR@1 1.000000\nR@5 1.000000\nR@10 1.000000\n");
}

#[test]
fn index_from_another_vocabulary_is_stale() {
    let dir = indexed(12);
    let other = TextEncoder::build(&["unrelated words"], &["entirely different text"], 1).unwrap();
    other.save(dir.path().join("vocab.json")).unwrap();
    let out = textstyle(dir.path(), &["retrieve", "--title", "ocean"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn empty_index_is_reported() {
    let dir = indexed(12);
    let encoder = TextEncoder::load(dir.path().join("vocab.json")).unwrap();
    let empty = EmbeddingIndex::new(vec![], vec![], encoder.fingerprint(), 0).unwrap();
    empty.save(dir.path().join("index.bin")).unwrap();
    let out = textstyle(dir.path(), &["retrieve", "--title", "ocean"]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn retrieve_requires_text() {
    let dir = indexed(12);
    let out = textstyle(dir.path(), &["retrieve"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn zero_iterations_reproduce_the_content() {
    let dir = indexed(12);
    let content = gradient_image(24, 32, [0.9, 0.2, 0.1], [0.1, 0.3, 0.8]);
    content.save_ppm(dir.path().join("content.ppm")).unwrap();
    let out = dir.path().join("out.png");
    let text = stdout(&textstyle(
        dir.path(),
        &[
            "pipeline",
            "--content",
            dir.path().join("content.ppm").to_str().unwrap(),
            "--title",
            "stormy",
            "--iterations",
            "0",
            "--out",
            out.to_str().unwrap(),
        ],
    ));
    assert!(text.starts_with("style image: s0"), "{text}");
    let png = decode_image::<f64>(&std::fs::read(&out).unwrap(), 32).unwrap();
    assert_eq!(png.to_png_bytes(), content.to_png_bytes());
}

#[test]
fn commands_are_deterministic() {
    let dir = indexed(12);
    gradient_image(16, 16, [0.2, 0.7, 0.3], [0.8, 0.1, 0.6])
        .save_ppm(dir.path().join("content.ppm"))
        .unwrap();
    let content = dir.path().join("content.ppm");
    let style_img = dir.path().join("images/s004.ppm");
    let run = |name: &str| {
        let out = dir.path().join(name);
        let text = stdout(&textstyle(
            dir.path(),
            &[
                "transfer",
                "--content",
                content.to_str().unwrap(),
                "--style",
                style_img.to_str().unwrap(),
                "--iterations",
                "15",
                "--decay-at",
                "10",
                "--out",
                out.to_str().unwrap(),
            ],
        ));
        (text, std::fs::read(out).unwrap())
    };
    assert_eq!(run("a.png"), run("b.png"));

    let retrieve = || stdout(&textstyle(dir.path(), &["retrieve", "--title", "misty", "-k", "12"]));
    assert_eq!(retrieve(), retrieve());
    let eval = || stdout(&textstyle(dir.path(), &["eval-retrieval", "--split", "all"]));
    assert_eq!(eval(), eval());
}

#[test]
fn config_file_and_flags_combine() {
    let dir = indexed(12);
    let config = dir.path().join("run.json");
    std::fs::write(&config, r#"{"style": {"iterations": 0, "decay_at_iteration": 0}}"#).unwrap();
    gradient_image(8, 8, [0.0; 3], [1.0; 3]).save_ppm(dir.path().join("c.ppm")).unwrap();
    let out = dir.path().join("o.png");
    let text = stdout(&textstyle(
        dir.path(),
        &[
            "--config",
            config.to_str().unwrap(),
            "pipeline",
            "--content",
            dir.path().join("c.ppm").to_str().unwrap(),
            "--style-id",
            "s002",
            "--out",
            out.to_str().unwrap(),
        ],
    ));
    assert!(text.starts_with("style image: s002 "), "{text}");

    std::fs::write(&config, r#"{"styel": {}}"#).unwrap();
    let bad = textstyle(dir.path(), &["--config", config.to_str().unwrap(), "retrieve", "--title", "x"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn help_lists_the_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let help = stdout(&textstyle(dir.path(), &["transfer", "--help"]));
    for want in ["[default: 200]", "[default: 3]", "[default: 0.001]", "[default: 2,4,6,7]", "[default: 400,50,10,5]", "[default: 0.005]", "[default: 0.1]", "[default: 180]"] {
        assert!(help.contains(want), "missing {want}:\n{help}");
    }
    let help = stdout(&textstyle(dir.path(), &["train-retrieval", "--help"]));
    for want in ["[default: 30]", "[default: 0.001]", "[default: 28]", "[default: 128]", "[default: 0.1]"] {
        assert!(help.contains(want), "missing {want}:\n{help}");
    }
}

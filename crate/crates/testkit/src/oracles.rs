//! Library results against direct, loop-by-loop reference computations.
//!
//! `worst` is the largest relative difference seen; checks that must agree
//! bit for bit report 0.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use textstyle::corpus::ImageBuffer;
use textstyle::embedding::{batch_loss_projected, margin_loss, retrieval_metrics, RankedImage};
use textstyle::extractor::{FeatureExtractor, FeatureMap};
use textstyle::ops;
use textstyle::style;
use textstyle::tensor::Tensor;
use textstyle::text::{TextEncoder, TfIdfVocabulary};
use textstyle::{EmbeddingIndex, JointHeads, Retriever};

use crate::{ensure, err, random, Check, Outcome};

/// Tolerance for sums evaluated in a different order than the library.
pub const SUM_TOL: f64 = 1e-12;

fn relative(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Convolution over an explicitly zero-padded copy of the input.
pub fn conv_reference(x: &Tensor<f64>, k: &Tensor<f64>, pad: usize) -> Vec<f64> {
    let (ci_n, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co_n, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut padded = vec![0.0; ci_n * ph * pw];
    for c in 0..ci_n {
        for y in 0..h {
            for xx in 0..w {
                padded[(c * ph + y + pad) * pw + xx + pad] = x.data()[(c * h + y) * w + xx];
            }
        }
    }
    let (oh, ow) = (ph - kh + 1, pw - kw + 1);
    let mut out = vec![0.0; co_n * oh * ow];
    for co in 0..co_n {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ci in 0..ci_n {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            acc += padded[(ci * ph + oy + ky) * pw + ox + kx]
                                * k.data()[((co * ci_n + ci) * kh + ky) * kw + kx];
                        }
                    }
                }
                out[(co * oh + oy) * ow + ox] = acc;
            }
        }
    }
    out
}

/// G[i][j] = sum over k of F[i][k] F[j][k] for an N x M feature matrix.
pub fn gram_reference(f: &Tensor<f64>) -> Vec<f64> {
    let (n, m) = (f.shape()[0], f.shape()[1]);
    let mut g = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for k in 0..m {
                acc += f.data()[i * m + k] * f.data()[j * m + k];
            }
            g[i * n + j] = acc;
        }
    }
    g
}

/// Descending score, ties broken by ascending id, by repeated selection.
pub fn rank_reference(mut left: Vec<(String, f64)>, k: usize) -> Vec<RankedImage> {
    let mut out = Vec::new();
    while !left.is_empty() && out.len() < k {
        let mut best = 0;
        for i in 1..left.len() {
            let (ref id, s) = left[i];
            let (ref bid, bs) = left[best];
            if s > bs || (s == bs && id < bid) {
                best = i;
            }
        }
        let (id, score) = left.remove(best);
        out.push(RankedImage { id, score });
    }
    out
}

/// Convolution bitwise against the padded brute force, with 1x1, 3x3 and 5x5 kernels.
pub fn conv2d(seed: u64, n: usize) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..n {
        let ci = rng.random_range(1..4);
        let co = rng.random_range(1..4);
        let ks = [1, 3, 5][rng.random_range(0..3)];
        let pad = rng.random_range(0..=ks / 2);
        let h = rng.random_range(ks.max(2)..9);
        let w = rng.random_range(ks.max(2)..9);
        let x = random(&mut rng, &[ci, h, w]);
        let k = random(&mut rng, &[co, ci, ks, ks]);
        let got = ops::conv2d_forward(&x, &k, pad).map_err(err)?;
        let want = conv_reference(&x, &k, pad);
        ensure!(got.len() == want.len(), "conv2d case {case}: {} outputs, expected {}", got.len(), want.len());
        for (i, (a, b)) in got.data().iter().zip(&want).enumerate() {
            // Out-of-range taps contribute exact zeros, so the sums agree bit for bit.
            ensure!(a.to_bits() == b.to_bits(), "conv2d case {case} output {i}: {a} vs {b}");
        }
    }
    Ok(Check { name: "conv2d", instances: n, worst: 0.0 })
}

/// Gram bitwise against the double loop, symmetric, and positive semidefinite.
pub fn gram(seed: u64, n: usize) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for case in 0..n {
        let (c, m) = (rng.random_range(1..7), rng.random_range(1..20));
        let f = random(&mut rng, &[c, m]);
        let g = style::gram(&f).map_err(err)?;
        let want = gram_reference(&f);
        for i in 0..c {
            for j in 0..c {
                let v = g.data()[i * c + j];
                ensure!(v.to_bits() == want[i * c + j].to_bits(), "gram case {case} [{i}][{j}]: {v} vs {}", want[i * c + j]);
                ensure!(v == g.data()[j * c + i], "gram case {case}: not symmetric at [{i}][{j}]");
            }
        }
        let min_eig = nalgebra::DMatrix::from_row_slice(c, c, g.data()).symmetric_eigenvalues().min();
        ensure!(min_eig >= -1e-9, "gram case {case}: eigenvalue {min_eig}");
        worst = worst.max(-min_eig);
    }
    Ok(Check { name: "gram", instances: n, worst: worst.max(0.0) })
}

/// Per-layer E_l and the weighted style sum against explicit summation.
pub fn style_loss(seed: u64, n: usize) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for case in 0..n {
        let layers = [2usize, 4, 6];
        let weights = [rng.random_range(0.0..5.0), rng.random_range(0.0..5.0), rng.random_range(0.0..5.0)];
        let mut feats = BTreeMap::new();
        let mut targets = BTreeMap::new();
        let mut want = 0.0;
        for (&l, &wl) in layers.iter().zip(&weights) {
            let (c, m) = (rng.random_range(1..5), rng.random_range(1..10));
            let f = random(&mut rng, &[c, m]);
            let a = style::gram(&random(&mut rng, &[c, m])).map_err(err)?;
            let g = gram_reference(&f);
            let mut e = 0.0;
            for (gij, aij) in g.iter().zip(a.data()) {
                e += (gij - aij).powi(2);
            }
            e /= 4.0 * (c * c) as f64 * (m * m) as f64;
            let (got_e, _) = style::layer_style_loss(&f, &a).map_err(err)?;
            worst = worst.max(relative(got_e, e));
            ensure!(relative(got_e, e) <= SUM_TOL, "style case {case} layer {l}: {got_e} vs {e}");
            want += wl * e;
            feats.insert(l, FeatureMap { layer: l, height: 1, width: m, data: f });
            targets.insert(l, a);
        }
        let (got, grads) = style::style_loss(&feats, &targets, &layers, &weights).map_err(err)?;
        worst = worst.max(relative(got, want));
        ensure!(relative(got, want) <= SUM_TOL, "style case {case} weighted: {got} vs {want}");
        ensure!(grads.len() == layers.len(), "style case {case}: {} gradients", grads.len());
    }
    Ok(Check { name: "style loss", instances: n, worst })
}

/// Content and total-variation losses against explicit summation.
pub fn content_and_tv(seed: u64, n: usize) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for case in 0..n {
        let (c, h, w) = (rng.random_range(1..4), rng.random_range(1..6), rng.random_range(1..6));
        let x = random(&mut rng, &[c, h, w]);
        let mut tv = 0.0;
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let v = x.data()[(ch * h + y) * w + xx];
                    if y + 1 < h {
                        tv += (x.data()[(ch * h + y + 1) * w + xx] - v).powi(2);
                    }
                    if xx + 1 < w {
                        tv += (x.data()[(ch * h + y) * w + xx + 1] - v).powi(2);
                    }
                }
            }
        }
        let got = style::tv_loss(&x).map_err(err)?.0;
        worst = worst.max(relative(got, tv));
        ensure!(relative(got, tv) <= SUM_TOL, "tv case {case}: {got} vs {tv}");

        let p = random(&mut rng, &[c, h * w]);
        let f = random(&mut rng, &[c, h * w]);
        let want = 0.5 * f.data().iter().zip(p.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        let got = style::content_loss(&f, &p).map_err(err)?.0;
        worst = worst.max(relative(got, want));
        ensure!(relative(got, want) <= SUM_TOL, "content case {case}: {got} vs {want}");
    }
    Ok(Check { name: "content and tv loss", instances: n, worst })
}

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Result<Tensor<f64>, String> {
    ops::l2_normalize(&random(rng, &[d])).map_err(err)
}

/// Batch ranking loss against a double loop over all text/image pairs.
pub fn batch_loss(seed: u64, n: usize) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for case in 0..n {
        let b = rng.random_range(2..7);
        let margin = rng.random_range(-0.5..0.5);
        let texts = (0..b).map(|_| unit(&mut rng, 5)).collect::<Result<Vec<_>, _>>()?;
        let visuals = (0..b).map(|_| unit(&mut rng, 5)).collect::<Result<Vec<_>, _>>()?;
        let cos = |k: usize, j: usize| -> f64 { (0..5).map(|i| texts[k].data()[i] * visuals[j].data()[i]).sum() };
        let (mut pos, mut neg) = (0.0, 0.0);
        for k in 0..b {
            for j in 0..b {
                if k == j {
                    pos += 1.0 - cos(k, j);
                } else {
                    neg += f64::max(0.0, cos(k, j) - margin);
                }
            }
        }
        let want = pos / b as f64 + neg / (b * (b - 1)) as f64;
        let (got, _, _) = batch_loss_projected(&texts, &visuals, margin).map_err(err)?;
        worst = worst.max(relative(got, want));
        ensure!(relative(got, want) <= SUM_TOL, "batch loss case {case}: {got} vs {want}");
    }
    Ok(Check { name: "batch loss", instances: n, worst })
}

fn small_retriever(rng: &mut ChaCha8Rng, n: usize) -> Result<Retriever, String> {
    let words = ["red", "blue", "sea", "sky", "tree", "stone"];
    let texts: Vec<String> = (0..12)
        .map(|_| (0..4).map(|_| words[rng.random_range(0..words.len())]).collect::<Vec<_>>().join(" "))
        .collect();
    let encoder = TextEncoder::build(&texts, &texts, 1).map_err(err)?;
    let heads = JointHeads::init(encoder.dimension(), 6, 4, rng.random());
    // Repeated visuals force exact score ties between different ids.
    let base: Vec<_> = (0..3).map(|_| random(rng, &[6])).collect();
    let visuals: Vec<_> = (0..n).map(|i| base[i % 3].clone()).collect();
    let ids = (0..n).map(|i| format!("img{:02}", (i * 7) % n)).collect();
    let index = EmbeddingIndex::build(ids, &visuals, &heads, encoder.fingerprint(), 0).map_err(err)?;
    Retriever::new(encoder, heads, index).map_err(err)
}

/// Top-k ranking identical to selection sort over cosine scores, ties included.
pub fn ranking(seed: u64, n: usize) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..n {
        let size = rng.random_range(3..12);
        let r = small_retriever(&mut rng, size)?;
        let (title, description) = ("red sky", "blue sea stone");
        let q = r.embed_query(title, description).map_err(err)?;
        let scored = r
            .index
            .ids()
            .iter()
            .zip(r.index.embeddings())
            .map(|(id, e)| (id.clone(), (0..e.len()).map(|i| q.data()[i] * e.data()[i]).sum()))
            .collect();
        let k = rng.random_range(1..=size + 2);
        let want = rank_reference(scored, k);
        let got = r.rank(title, description, k).map_err(err)?;
        ensure!(got == want, "ranking case {case}: {got:?} vs {want:?}");
    }
    Ok(Check { name: "ranking", instances: n, worst: 0.0 })
}

/// Median rank and recall@K against counting over random rank lists.
pub fn metrics(seed: u64, n: usize) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..n {
        let q: usize = rng.random_range(1..30);
        let ranks: Vec<usize> = (0..q).map(|_| rng.random_range(1..15)).collect();
        let m = retrieval_metrics(&ranks).map_err(err)?;
        let count = |r: usize| ranks.iter().filter(|&&x| x <= r).count();
        let median = (1..).find(|&r| count(r) >= q.div_ceil(2)).expect("ranks are bounded");
        let recall = |r: usize| count(r) as f64 / q as f64;
        ensure!(m.median_rank == median, "metrics case {case}: MR {} vs {median}", m.median_rank);
        ensure!(
            (m.recall_at_1, m.recall_at_5, m.recall_at_10) == (recall(1), recall(5), recall(10)),
            "metrics case {case}: recalls {m:?}"
        );
        ensure!(m.queries == q, "metrics case {case}: {} queries", m.queries);
    }
    Ok(Check { name: "retrieval metrics", instances: n, worst: 0.0 })
}

/// Vocabulary, document frequencies and tf-idf vectors against counting over
/// `n` random texts.
pub fn vocabulary(seed: u64, n: usize) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words = ["Sun", "moon", "STAR", "river", "hill", "cloud", "rain", "snow", "wind", "leaf"];
    let seps = [" ", ", ", ". ", "-", " 42 ", "!\n"];
    let texts: Vec<String> = (0..n)
        .map(|_| {
            let len = rng.random_range(1..9);
            (0..len)
                .map(|_| format!("{}{}", words[rng.random_range(0..words.len())], seps[rng.random_range(0..seps.len())]))
                .collect()
        })
        .collect();
    // Roughly the mean per-word count, so the threshold drops some words.
    let min_count = n * 9 / 20;
    let vocab = TfIdfVocabulary::build(&texts, min_count).map_err(err)?;

    let lower: Vec<Vec<String>> = texts
        .iter()
        .map(|t| t.split(|c: char| !c.is_alphabetic()).filter(|w| !w.is_empty()).map(str::to_lowercase).collect())
        .collect();
    let mut total: HashMap<&str, usize> = HashMap::new();
    let mut df: HashMap<&str, usize> = HashMap::new();
    for doc in &lower {
        for w in doc {
            *total.entry(w).or_default() += 1;
        }
        let mut uniq: Vec<&str> = doc.iter().map(String::as_str).collect();
        uniq.sort();
        uniq.dedup();
        for w in uniq {
            *df.entry(w).or_default() += 1;
        }
    }
    let mut kept: Vec<&str> = total.iter().filter(|(_, &c)| c >= min_count).map(|(&w, _)| w).collect();
    kept.sort();
    ensure!(!kept.is_empty() && kept.len() < total.len(), "vocabulary: threshold {min_count} keeps {} of {}", kept.len(), total.len());
    ensure!(vocab.tokens() == kept.as_slice(), "vocabulary: {:?} vs {kept:?}", vocab.tokens());
    for (i, w) in kept.iter().enumerate() {
        ensure!(vocab.index_of(w) == Some(i), "vocabulary: index of {w}");
        ensure!(vocab.document_frequency(w) == Some(df[w]), "vocabulary: document frequency of {w}");
    }

    let mut worst: f64 = 0.0;
    for (text, doc) in texts.iter().zip(&lower) {
        let raw: Vec<f64> = kept
            .iter()
            .map(|w| {
                let tf = doc.iter().filter(|t| t == w).count() as f64;
                tf * (((1 + n) as f64 / (1 + df[w]) as f64).ln() + 1.0)
            })
            .collect();
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        let enc = vocab.encode(text);
        for (i, v) in raw.iter().enumerate() {
            let want = if norm > 0.0 { v / norm } else { 0.0 };
            let d = (enc.get(i) - want).abs();
            worst = worst.max(d);
            ensure!(d <= SUM_TOL, "tf-idf of {text:?} at {i}: {} vs {want}", enc.get(i));
        }
    }
    Ok(Check { name: "tf-idf vocabulary", instances: n, worst })
}

/// Block 1 equals relu(conv + bias) exactly and the embedding equals the
/// channel means of block 8, over `n` random images.
pub fn extractor(seed: u64, n: usize) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ex = FeatureExtractor::<f64>::seeded(seed);
    let block = &ex.blocks()[0];
    let mut worst: f64 = 0.0;
    for case in 0..n {
        let (h, w) = (8 * rng.random_range(1..3), 8 * rng.random_range(1..3));
        let img = Tensor::new(vec![3, h, w], (0..3 * h * w).map(|_| rng.random_range(0.0..1.0)).collect())
            .map_err(err)?;
        let image = ImageBuffer::new(img.clone()).map_err(err)?;
        let maps = ex.extract(&image, &[1, 8]).map_err(err)?;
        let conv = conv_reference(&img, &block.kernel, 1);
        let f1 = &maps[&1];
        let p = h * w;
        ensure!((f1.height, f1.width, f1.channels()) == (h, w, 8), "extractor case {case}: block 1 shape");
        for c in 0..8 {
            for i in 0..p {
                let want = (conv[c * p + i] + block.bias.data()[c]).max(0.0);
                let got = f1.data.data()[c * p + i];
                ensure!(got.to_bits() == want.to_bits(), "extractor case {case}: block 1 [{c}][{i}] {got} vs {want}");
            }
        }
        let f8 = &maps[&8];
        let e = ex.embed(&image).map_err(err)?;
        ensure!(e.len() == 64, "extractor case {case}: embedding has {} entries", e.len());
        let m = f8.positions();
        for c in 0..64 {
            let mean = f8.data.data()[c * m..(c + 1) * m].iter().sum::<f64>() / m as f64;
            worst = worst.max((e.data()[c] - mean).abs());
            ensure!((e.data()[c] - mean).abs() <= SUM_TOL, "extractor case {case}: channel {c} mean");
        }
    }
    Ok(Check { name: "extractor", instances: n, worst })
}

/// Every oracle above with `n` instances each.
pub fn all(seed: u64, n: usize) -> Vec<Outcome> {
    vec![
        conv2d(seed, n),
        gram(seed + 1, n),
        style_loss(seed + 2, n),
        content_and_tv(seed + 3, n),
        batch_loss(seed + 4, n),
        ranking(seed + 5, n),
        metrics(seed + 6, n),
        vocabulary(seed + 7, n.max(200)),
        extractor(seed + 8, n.min(10)),
    ]
}

/// Hand-computed values of the loss and metric definitions.
pub fn formulas() -> Vec<(&'static str, Result<(), String>)> {
    let t = |shape: &[usize], v: &[f64]| Tensor::<f64>::from_f64(shape, v).expect("fixture shape");
    let margin = || {
        let a = t(&[2], &[1.0, 0.0]);
        let b = t(&[2], &[0.5, 0.75f64.sqrt()]);
        let l = margin_loss(&a, &b, false, 0.1).map_err(err)?.loss;
        ensure!((l - 0.4).abs() < 1e-12, "mismatched pair at cos 0.5, margin 0.1: {l}, expected 0.4");
        let l = margin_loss(&a, &a, true, 0.1).map_err(err)?.loss;
        ensure!(l == 0.0, "identical matching pair: {l}, expected 0");
        Ok(())
    };
    let style_layer = || {
        let s = 8f64.sqrt();
        let (e, _) = style::layer_style_loss(&t(&[1, 2], &[s, s]), &t(&[1, 1], &[0.0])).map_err(err)?;
        ensure!((e - 16.0).abs() < 1e-12, "N=1 M=2 G=16 A=0: {e}, expected 16");
        Ok(())
    };
    let content = || {
        let (l, _) = style::content_loss(&t(&[1, 1], &[1.0]), &t(&[1, 1], &[3.0])).map_err(err)?;
        ensure!(l == 2.0, "F=1 P=3: {l}, expected 2");
        Ok(())
    };
    let median = || {
        let m = retrieval_metrics(&[1, 3, 9, 20]).map_err(err)?;
        ensure!(m.median_rank == 3, "ranks 1,3,9,20: MR {}, expected 3", m.median_rank);
        Ok(())
    };
    vec![
        ("margin loss 0.4", margin()),
        ("style layer loss 16", style_layer()),
        ("content loss 2", content()),
        ("median rank 3", median()),
    ]
}

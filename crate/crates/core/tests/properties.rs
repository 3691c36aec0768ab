use std::collections::HashSet;

use proptest::prelude::*;
use textstyle::corpus::{split_corpus, DEFAULT_FRACTIONS};
use textstyle::embedding::{margin_loss, order_by_score, RankedImage};
use textstyle::ops;
use textstyle::style;
use textstyle::tensor::Tensor;
use textstyle::text::TfIdfVocabulary;

const WORDS: [&str; 8] = ["alpha", "beta", "gamma", "delta", "echo", "fox", "golf", "hotel"];

fn sentence() -> impl Strategy<Value = String> {
    prop::collection::vec(0..WORDS.len(), 1..12)
        .prop_map(|idx| idx.into_iter().map(|i| WORDS[i]).collect::<Vec<_>>().join(" "))
}

fn vocab() -> TfIdfVocabulary {
    let texts: Vec<String> = (0..WORDS.len())
        .map(|i| WORDS[..=i].join(" "))
        .collect();
    TfIdfVocabulary::build(&texts, 1).unwrap()
}

fn vector(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0..10.0f64, len)
}

proptest! {
    #[test]
    fn tfidf_is_unit_norm(text in sentence()) {
        let v = vocab().encode(&text);
        prop_assert!((v.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tfidf_ignores_repetition(text in sentence(), k in 2usize..5) {
        let v = vocab();
        let once = v.encode(&text);
        let repeated = v.encode(&vec![text.as_str(); k].join(" "));
        for i in 0..WORDS.len() {
            prop_assert!((once.get(i) - repeated.get(i)).abs() < 1e-12);
        }
    }

    #[test]
    fn tfidf_ignores_case_and_punctuation(text in sentence()) {
        let v = vocab();
        let noisy = text.to_uppercase().replace(' ', ", 7 ");
        prop_assert_eq!(v.encode(&text), v.encode(&noisy));
    }

    #[test]
    fn normalize_yields_unit_norm(x in vector(1..20)) {
        let t = Tensor::from_vec(x);
        prop_assume!(t.norm() > 1e-6);
        prop_assert!((ops::l2_normalize(&t).unwrap().norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn split_partitions_the_corpus(n in 10usize..300, seed in any::<u64>()) {
        let items: Vec<usize> = (0..n).collect();
        let s = split_corpus(&items, seed, DEFAULT_FRACTIONS).unwrap();
        prop_assert_eq!(s.validation.len(), n / 10);
        prop_assert_eq!(s.test.len(), n / 10);
        let all: HashSet<usize> = s.train.iter().chain(&s.validation).chain(&s.test).copied().collect();
        prop_assert_eq!(all.len(), n);
        prop_assert_eq!(s.train.len() + s.validation.len() + s.test.len(), n);
        prop_assert_eq!(s, split_corpus(&items, seed, DEFAULT_FRACTIONS).unwrap());
    }

    #[test]
    fn gram_is_symmetric(n in 1usize..6, m in 1usize..12, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let f = Tensor::new(vec![n, m], (0..n * m).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let g = style::gram(&f).unwrap();
        for i in 0..n {
            prop_assert!(g.data()[i * n + i] >= 0.0);
            for j in 0..n {
                prop_assert_eq!(g.data()[i * n + j], g.data()[j * n + i]);
            }
        }
    }

    #[test]
    fn margin_loss_is_bounded(a in vector(4..5), b in vector(4..5), is_match: bool, m in -1.0..1.0f64) {
        let ta = Tensor::from_vec(a);
        let tb = Tensor::from_vec(b);
        prop_assume!(ta.norm() > 1e-3 && tb.norm() > 1e-3);
        let (ua, ub) = (ops::l2_normalize(&ta).unwrap(), ops::l2_normalize(&tb).unwrap());
        let l = margin_loss(&ua, &ub, is_match, m).unwrap().loss;
        prop_assert!((0.0..=2.0 + 1e-12).contains(&l));
    }

    #[test]
    fn ordering_is_descending_with_id_tiebreak(scores in prop::collection::vec(0i32..5, 0..30)) {
        let mut items: Vec<RankedImage> = scores
            .iter()
            .enumerate()
            .map(|(i, &s)| RankedImage { id: format!("{:03}", 29 - i), score: s as f64 })
            .collect();
        order_by_score(&mut items);
        for w in items.windows(2) {
            prop_assert!(w[0].score > w[1].score || (w[0].score == w[1].score && w[0].id < w[1].id));
        }
    }
}

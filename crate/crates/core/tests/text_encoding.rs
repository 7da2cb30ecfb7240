use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use volalign_autodiff::ParamSet;
use volalign_core::data::{ABNORMALITY_NAMES, OCTANT_NAMES};
use volalign_core::text::{project_text, tokenize, BagEncoder, TextEmbedding, TextEncoder, TextEncoderConfig, TextProjector, TokenSequence, CLS_ID};

fn encoder() -> BagEncoder {
    BagEncoder::new(&TextEncoderConfig::default()).unwrap()
}

fn random_report(rng: &mut ChaCha8Rng) -> String {
    let m = ["T1", "T2", "DWI", "FLAIR"][rng.gen_range(0..4)];
    let c = ABNORMALITY_NAMES[rng.gen_range(0..ABNORMALITY_NAMES.len())];
    let o = OCTANT_NAMES[rng.gen_range(0..OCTANT_NAMES.len())];
    format!("{m} sequence shows {c} in {o} region.")
}

#[test]
fn case_and_punctuation_fold() {
    let a = tokenize("T1 sequence shows cyst.", 64, 8192);
    let b = tokenize("t1 sequence shows cyst", 64, 8192);
    assert_eq!(a, b);
    assert_eq!(a.ids.len(), 5);
    assert_eq!(a.ids[0], CLS_ID);
    assert_eq!(tokenize("", 64, 8192).ids, vec![CLS_ID]);
}

#[test]
fn truncation_is_flagged() {
    let t = tokenize("a b c d e f", 4, 8192);
    assert_eq!(t.ids.len(), 4);
    assert!(t.truncated);
    assert!(!tokenize("a b c", 4, 8192).truncated);
}

#[test]
fn encoder_is_seeded_and_stable() {
    let (a, b) = (encoder(), encoder());
    assert_eq!(a.checksum(), b.checksum());
    let r = "DWI sequence shows infarct in left anterior superior region.";
    assert_eq!(a.encode(r).unwrap(), b.encode(r).unwrap());
    assert_eq!(a.encode(r).unwrap().0.len(), 128);
}

#[test]
fn distinct_reports_give_distinct_embeddings() {
    let enc = encoder();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut pairs = 0;
    while pairs < 100 {
        let (x, y) = (random_report(&mut rng), random_report(&mut rng));
        let (tx, ty) = (enc.max_len(), enc.vocab_size());
        let (sx, sy) = (tokenize(&x, tx, ty), tokenize(&y, tx, ty));
        let (mut ix, mut iy) = (sx.ids.clone(), sy.ids.clone());
        ix.sort_unstable();
        iy.sort_unstable();
        if ix == iy {
            continue;
        }
        assert_ne!(enc.encode(&x).unwrap(), enc.encode(&y).unwrap(), "{x} / {y}");
        pairs += 1;
    }
}

#[test]
fn token_order_does_not_matter() {
    let enc = encoder();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let t = tokenize(&random_report(&mut rng), 64, 8192);
        let mut rest = t.ids[1..].to_vec();
        rest.shuffle(&mut rng);
        let mut ids = vec![CLS_ID];
        ids.extend(rest);
        let shuffled = TokenSequence { ids, truncated: false };
        assert_eq!(enc.encode_tokens(&t).unwrap(), enc.encode_tokens(&shuffled).unwrap());
    }
}

#[test]
fn identity_projection_of_unit_vector() {
    let mut ps = ParamSet::<f64>::new();
    let p = TextProjector::identity(&mut ps, "projector", 6).unwrap();
    let v = vec![0.6f32, 0.0, 0.0, -0.8, 0.0, 0.0];
    let out = project_text(&p, &ps, &TextEmbedding(v.clone())).unwrap();
    for (a, b) in out.0.iter().zip(&v) {
        assert!((a - b).abs() < 1e-7);
    }
}

proptest! {
    #[test]
    fn tokens_stay_in_vocabulary(s in "\\PC{0,120}", max_len in 1usize..40, vocab in 2usize..5000) {
        let t = tokenize(&s, max_len, vocab);
        prop_assert_eq!(t.ids[0], CLS_ID);
        prop_assert!(t.ids.len() <= max_len.max(1));
        prop_assert!(t.ids.iter().all(|&i| (i as usize) < vocab));
        prop_assert!(t.ids[1..].iter().all(|&i| i != CLS_ID));
        prop_assert_eq!(&t, &tokenize(&s, max_len, vocab));
    }

    #[test]
    fn projection_is_unit_norm(seed in any::<u64>(), x in prop::collection::vec(-2.0f32..2.0, 128)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::<f32>::new();
        let p = TextProjector::new(&mut ps, "projector", 128, 64, &mut rng).unwrap();
        let out = project_text(&p, &ps, &TextEmbedding(x)).unwrap();
        let norm = out.0.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        prop_assert!((norm - 1.0).abs() < 1e-5);
    }
}

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use volalign_autodiff::gradcheck::{central_diff, relative_error};
use volalign_autodiff::{Graph, Tensor};
use volalign_core::contrastive::{loss_t2v, loss_v2t, pretrain_modality, similarity_matrix, symmetric_loss, symmetric_loss_graph, PretrainConfig, SimilarityMatrix};
use volalign_core::data::{synthesize_records, Dataset, PhantomSpec};
use volalign_core::text::{BagEncoder, TextEncoder, TextEncoderConfig};
use volalign_core::train::params_sha256;
use volalign_core::vision::VisionConfig;
use volalign_core::Error;

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / norm).collect()
        })
        .collect()
}

fn matrix(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> SimilarityMatrix {
    SimilarityMatrix {
        n,
        data: (0..n * n).map(|k| f(k / n, k % n)).collect(),
        temperature: 1.0,
    }
}

fn angle(deg: f64) -> Vec<f64> {
    let r = deg.to_radians();
    vec![r.cos(), r.sin()]
}

#[test]
fn similarity_examples() {
    let basis: Vec<Vec<f64>> = (0..3).map(|i| (0..3).map(|j| (i == j) as u8 as f64).collect()).collect();
    let s = similarity_matrix(&basis, &basis, 1.0).unwrap();
    assert_eq!(s.data, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    let half = similarity_matrix(&basis, &basis, 0.5).unwrap();
    assert!(half.data.iter().zip(&s.data).all(|(h, x)| *h == 2.0 * x));

    let fv = [angle(0.0), angle(90.0)];
    let ft = [angle(60.0), angle(180.0)];
    let s = similarity_matrix(&fv, &ft, 1.0).unwrap();
    let expected = [0.5, -1.0, 3f64.sqrt() / 2.0, 0.0];
    for (a, b) in s.data.iter().zip(expected) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    assert!(matches!(similarity_matrix(&fv, &ft[..1], 1.0), Err(Error::BatchMismatch(2, 1))));
    assert!(matches!(similarity_matrix(&fv, &ft, 0.0), Err(Error::Temperature(_))));
}

#[test]
fn directional_loss_values() {
    assert_eq!(loss_v2t(&matrix(1, |_, _| 3.0)), 0.0);
    let uniform = matrix(4, |_, _| 0.3);
    assert!((loss_v2t(&uniform) - 1.386294).abs() < 1e-6);
    assert!((loss_t2v(&uniform) - 1.386294).abs() < 1e-6);

    let mut last = f64::INFINITY;
    for margin in [2.0, 5.0, 10.0] {
        let s = matrix(4, |i, j| if i == j { margin } else { 0.0 });
        let brute = -(f64::exp(margin) / (f64::exp(margin) + 3.0)).ln();
        assert!((loss_v2t(&s) - brute).abs() < 1e-12);
        assert!((loss_t2v(&s) - brute).abs() < 1e-12);
        assert!(loss_v2t(&s) < last);
        last = loss_v2t(&s);
    }
}

#[test]
fn uniform_batch_symmetric_loss_is_ln4() {
    let same = vec![vec![1.0, 0.0]; 4];
    assert!((symmetric_loss(&same, &same, 0.07).unwrap() - 1.386294).abs() < 1e-6);
}

#[test]
fn symmetric_loss_is_symmetric_on_random_batches() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let n = rng.gen_range(1..12);
        let (fv, ft) = (unit_rows(&mut rng, n, 8), unit_rows(&mut rng, n, 8));
        let a = symmetric_loss(&fv, &ft, 0.07).unwrap();
        let b = symmetric_loss(&ft, &fv, 0.07).unwrap();
        assert!((a - b).abs() < 1e-12);
        let s = similarity_matrix(&fv, &ft, 0.07).unwrap();
        assert!((a - 0.5 * (loss_v2t(&s) + loss_t2v(&s))).abs() < 1e-12);
    }
}

#[test]
fn graph_loss_gradient_matches_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (n, d) = (5, 6);
    let ft: Vec<f64> = unit_rows(&mut rng, n, d).concat();
    let mut fv: Vec<f64> = unit_rows(&mut rng, n, d).concat();
    let loss = |x: &[f64]| {
        let mut g = Graph::inference();
        let a = g.constant(Tensor::new([n, d], x.to_vec()).unwrap());
        let a = g.l2_normalize_rows(a);
        let b = g.constant(Tensor::new([n, d], ft.clone()).unwrap());
        let l = symmetric_loss_graph(&mut g, a, b, 0.07);
        g.scalar(l)
    };
    let mut g = Graph::new();
    let a = g.input(Tensor::new([n, d], fv.clone()).unwrap());
    let an = g.l2_normalize_rows(a);
    let b = g.constant(Tensor::new([n, d], ft.clone()).unwrap());
    let l = symmetric_loss_graph(&mut g, an, b, 0.07);
    let grads = g.backward(l);
    let analytic = grads.get(a).unwrap().data().to_vec();
    let coords: Vec<usize> = (0..n * d).collect();
    let numeric = central_diff(&mut fv, &coords, 1e-6, loss);
    assert!(relative_error(&analytic, &numeric) < 1e-6);

    let rows: Vec<Vec<f64>> = fv.chunks(d).map(|r| {
        let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        r.iter().map(|x| x / norm).collect()
    }).collect();
    let plain = symmetric_loss(&rows, &ft.chunks(d).map(|r| r.to_vec()).collect::<Vec<_>>(), 0.07).unwrap();
    assert!((plain - loss(&fv)).abs() < 1e-12);
}

fn single_modality() -> Dataset {
    let spec = PhantomSpec {
        grid_size: 16,
        n_records: 85,
        modalities: vec!["T2".into()],
        train_fraction: 0.75,
        val_fraction: 0.125,
        ..PhantomSpec::default()
    };
    let (m, recs) = synthesize_records(&spec).unwrap();
    Dataset::from_parts(m, recs).unwrap()
}

#[test]
fn pretraining_lowers_loss_keeps_text_frozen_and_repeats() {
    let ds = single_modality();
    assert_eq!(ds.split(volalign_core::data::Split::Train).len(), 64);
    let enc = BagEncoder::new(&TextEncoderConfig::default()).unwrap();
    let before = enc.checksum();
    let cfg = PretrainConfig {
        epochs: 20,
        batch_size: 8,
        ..PretrainConfig::default()
    };
    let vision = VisionConfig::default();
    let a = pretrain_modality(&ds, "T2", &vision, &cfg, &enc).unwrap();
    let first = a.loss_curve[0].1;
    let last = a.loss_curve.last().unwrap().1;
    assert!(last < first, "loss {first} -> {last}");
    assert_eq!(a.loss_curve.len(), 20);
    assert_eq!(a.text_sha256_before, before);
    assert_eq!(a.text_sha256_after, before);
    assert_eq!(enc.checksum(), before);

    let b = pretrain_modality(&ds, "T2", &vision, &cfg, &enc).unwrap();
    assert_eq!(params_sha256(&a.expert.params, None), params_sha256(&b.expert.params, None));
    assert_eq!(a.loss_curve, b.loss_curve);

    assert!(matches!(pretrain_modality(&ds, "T1", &vision, &cfg, &enc), Err(Error::UnknownModality(_))));
    let big = PretrainConfig { batch_size: 65, ..cfg };
    assert!(matches!(pretrain_modality(&ds, "T2", &vision, &big, &enc), Err(Error::InsufficientData(_))));
}

proptest! {
    #[test]
    fn loss_is_non_negative(seed in any::<u64>(), n in 1usize..10, t in 0.01f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (fv, ft) = (unit_rows(&mut rng, n, 4), unit_rows(&mut rng, n, 4));
        prop_assert!(symmetric_loss(&fv, &ft, t).unwrap() >= 0.0);
    }

    #[test]
    fn row_shift_leaves_v2t_unchanged(seed in any::<u64>(), row in 0usize..5, c in -20.0f64..20.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = matrix(5, |_, _| rng.gen_range(-5.0..5.0));
        let mut shifted = s.clone();
        for j in 0..5 {
            shifted.data[row * 5 + j] += c;
        }
        prop_assert!((loss_v2t(&s) - loss_v2t(&shifted)).abs() < 1e-12);
    }
}
